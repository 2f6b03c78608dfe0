#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "mdm/numerics/tensor.hpp"

namespace mdm::num {

// Counter-based SplitMix64.
//   value_k = mix(seed + k * 0x9E3779B97F4A7C15),  k = 1, 2, ...
//   mix(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
//           z *= 0x94D049BB133111EB; z ^= z >> 31
// uniform = ((value >> 11) + 0.5) * 2^-53, always inside (0, 1).
// normal = sqrt(-2 ln u1) * cos(2 pi u2), one normal per two uniforms.
// Streams depend only on (seed, counter), so they are identical on every platform.
class Rng {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0)
      : seed_(seed), counter_(counter) {}

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

  std::uint64_t next_u64() {
    ++counter_;
    return mix(seed_ + counter_ * kGolden);
  }

  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Uniform integer in [lo, hi]. Uses rejection to avoid modulo bias.
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi) {
    if (hi < lo) throw ArgumentError("uniform_int: empty range");
    const std::uint64_t span = hi - lo;
    if (span == ~std::uint64_t{0}) return next_u64();
    const std::uint64_t n = span + 1;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do v = next_u64();
    while (v >= limit);
    return lo + v % n;
  }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent child stream. Does not advance this generator.
  Rng fork(std::uint64_t stream) const {
    return Rng(mix(seed_ ^ mix(stream * kGolden + 0x6A09E667F3BCC909ULL)), 0);
  }

  Rng fork(std::uint64_t a, std::uint64_t b) const { return fork(a).fork(b); }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  friend bool operator==(const Rng&, const Rng&) = default;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_;
};

template <Real T>
Tensor<T> standard_normal(Rng& rng, const Shape& shape) {
  Tensor<T> out(shape);
  for (auto& v : out.values()) v = static_cast<T>(rng.normal());
  return out;
}

/// mean + std * n. mean and std are either one element (broadcast) or exactly `shape`.
template <Real T>
Tensor<T> gaussian_sample(Rng& rng, const Shape& shape, const Tensor<T>& mean,
                          const Tensor<T>& std) {
  const std::size_t n = shape_size(shape);
  auto check = [&](const Tensor<T>& p, const char* what) {
    if (p.size() != 1 && p.shape() != shape) {
      throw ArgumentError(std::string("gaussian_sample: ") + what + " " +
                          shape_str(p.shape()) + " not broadcastable to " + shape_str(shape));
    }
  };
  check(mean, "mean");
  check(std, "std");
  for (std::size_t i = 0; i < std.size(); ++i) {
    if (!(std[i] >= T{0})) throw ArgumentError("gaussian_sample: std must be >= 0");
  }
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < n; ++i) {
    const T m = mean.size() == 1 ? mean[0] : mean[i];
    const T s = std.size() == 1 ? std[0] : std[i];
    const T z = static_cast<T>(rng.normal());
    out[i] = m + s * z;
  }
  return out;
}

}  // namespace mdm::num
