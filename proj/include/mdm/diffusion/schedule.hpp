#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdm/latent.hpp"
#include "mdm/numerics/tensor.hpp"

namespace mdm::diffusion {

enum class ScheduleKind { linear, cosine };

inline std::string to_string(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "cosine"; }

inline ScheduleKind schedule_kind_from(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "cosine") return ScheduleKind::cosine;
  throw ArgumentError("unknown schedule kind '" + s + "'");
}

/// betas[k-1] = beta_k for k = 1..T; alpha_bars[k-1] = prod_{j<=k} (1 - beta_j).
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  std::size_t T = 0;
  double beta_start = 0, beta_end = 0;
  std::vector<double> betas, alphas, alpha_bars;

  /// alpha_bar at integer step t in [0, T]; t = 0 is the clean signal.
  double alpha_bar(std::size_t t) const {
    if (t > T) throw ArgumentError("alpha_bar: step " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    return t == 0 ? 1.0 : alpha_bars[t - 1];
  }

  /// Continuous extension: log alpha_bar interpolated linearly between integer steps.
  double alpha_bar_at(double t) const {
    if (!(t >= 0.0 && t <= static_cast<double>(T))) {
      throw ArgumentError("alpha_bar_at: time outside [0, T]");
    }
    const auto k = static_cast<std::size_t>(std::floor(t));
    if (k >= T) return alpha_bars[T - 1];
    const double w = t - static_cast<double>(k);
    const double a = std::log(alpha_bar(k)), b = std::log(alpha_bar(k + 1));
    return std::exp(a + w * (b - a));
  }

  /// Inverse of alpha_bar_at on [alpha_bar(T), 1].
  double time_for_alpha_bar(double ab) const {
    if (!(ab > 0.0 && ab <= 1.0)) throw ArgumentError("time_for_alpha_bar: value outside (0, 1]");
    const double target = std::log(ab);
    if (target >= 0.0) return 0.0;
    if (ab <= alpha_bars[T - 1]) return static_cast<double>(T);
    // log alpha_bar is strictly decreasing: find k with la(k) >= target > la(k+1)
    std::size_t lo = 0, hi = T;
    while (hi - lo > 1) {
      const std::size_t mid = (lo + hi) / 2;
      if (std::log(alpha_bar(mid)) >= target) lo = mid;
      else hi = mid;
    }
    const double a = std::log(alpha_bar(lo)), b = std::log(alpha_bar(hi));
    return static_cast<double>(lo) + (target - a) / (b - a);
  }

  /// Noise-to-signal ratio sqrt((1 - ab) / ab).
  double sigma_at(double t) const {
    const double ab = alpha_bar_at(t);
    return std::sqrt((1.0 - ab) / ab);
  }

  double time_for_sigma(double sigma) const {
    if (!(sigma >= 0.0)) throw ArgumentError("time_for_sigma: sigma must be >= 0");
    return time_for_alpha_bar(1.0 / (1.0 + sigma * sigma));
  }

  nlohmann::json to_json() const {
    return {{"kind", to_string(kind)}, {"T", T}, {"beta_start", beta_start}, {"beta_end", beta_end}};
  }
};

inline void validate_schedule(const NoiseSchedule& s) {
  if (s.T == 0 || s.betas.size() != s.T) throw ArgumentError("schedule: T must equal the number of betas");
  double prev = 1.0;
  for (std::size_t k = 0; k < s.T; ++k) {
    if (!(s.betas[k] > 0.0 && s.betas[k] < 1.0)) throw ArgumentError("schedule: beta outside (0, 1)");
    if (!(s.alpha_bars[k] < prev && s.alpha_bars[k] > 0.0)) {
      throw ArgumentError("schedule: alpha_bar must decrease strictly inside (0, 1]");
    }
    prev = s.alpha_bars[k];
  }
}

inline NoiseSchedule schedule_from_betas(std::vector<double> betas, ScheduleKind kind = ScheduleKind::linear) {
  NoiseSchedule s;
  s.kind = kind;
  s.T = betas.size();
  s.betas = std::move(betas);
  double ab = 1.0;
  for (double b : s.betas) {
    s.alphas.push_back(1.0 - b);
    ab *= 1.0 - b;
    s.alpha_bars.push_back(ab);
  }
  if (!s.betas.empty()) {
    s.beta_start = s.betas.front();
    s.beta_end = s.betas.back();
  }
  validate_schedule(s);
  return s;
}

/// Linear: beta_k evenly spaced from beta_start to beta_end.
/// Cosine: betas from the squared-cosine alpha_bar curve (offset 0.008), clipped to [beta_start, beta_end].
inline NoiseSchedule build_schedule(std::size_t T, double beta_start, double beta_end,
                                    ScheduleKind kind = ScheduleKind::linear) {
  if (T < 1) throw ArgumentError("build_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ArgumentError("build_schedule: need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(T);
  if (kind == ScheduleKind::linear) {
    for (std::size_t k = 0; k < T; ++k) {
      betas[k] = T == 1 ? beta_start
                        : beta_start + (beta_end - beta_start) * static_cast<double>(k) / static_cast<double>(T - 1);
    }
  } else {
    constexpr double off = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / static_cast<double>(T) + off) / (1.0 + off) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (std::size_t k = 0; k < T; ++k) {
      const double b = 1.0 - f(static_cast<double>(k + 1)) / f(static_cast<double>(k));
      betas[k] = std::clamp(b, beta_start, beta_end);
    }
  }
  NoiseSchedule s = schedule_from_betas(std::move(betas), kind);
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  return s;
}

inline NoiseSchedule default_schedule() { return build_schedule(1000, 1e-4, 0.02, ScheduleKind::linear); }

inline NoiseSchedule schedule_from_json(const nlohmann::json& j) {
  try {
    return build_schedule(j.at("T").get<std::size_t>(), j.at("beta_start").get<double>(),
                          j.at("beta_end").get<double>(), schedule_kind_from(j.at("kind").get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("schedule header: ") + e.what());
  }
}

/// sqrt(ab) z0 + sqrt(1 - ab) eps, elementwise.
template <num::Real T>
num::Tensor<T> forward_diffuse(const num::Tensor<T>& z0, double alpha_bar, const num::Tensor<T>& eps) {
  num::require_same_shape(z0, eps, "forward_diffuse");
  if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) throw ArgumentError("forward_diffuse: alpha_bar outside [0, 1]");
  const T a = static_cast<T>(std::sqrt(alpha_bar)), b = static_cast<T>(std::sqrt(1.0 - alpha_bar));
  num::Tensor<T> out(z0.shape());
  for (std::size_t i = 0; i < z0.size(); ++i) out[i] = a * z0[i] + b * eps[i];
  return out;
}

/// Diffuses the content rows to step t. Special rows and all metadata are preserved.
template <num::Real T>
LatentSequence<T> forward_diffuse(const LatentSequence<T>& z0, std::size_t t, const num::Tensor<T>& eps,
                                  const NoiseSchedule& sched) {
  if (t < 1 || t > sched.T) {
    throw ArgumentError("forward_diffuse: step " + std::to_string(t) + " outside [1, " + std::to_string(sched.T) + "]");
  }
  num::require_same_shape(z0.vectors, eps, "forward_diffuse");
  const double ab = sched.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab)), b = static_cast<T>(std::sqrt(1.0 - ab));
  LatentSequence<T> out = z0;
  const std::size_t D = z0.dim();
  for (std::size_t r = 0; r < z0.length(); ++r) {
    if (z0.roles[r] != Role::content) continue;
    for (std::size_t c = 0; c < D; ++c) {
      out.vectors[r * D + c] = a * z0.vectors[r * D + c] + b * eps[r * D + c];
    }
  }
  out.t = static_cast<double>(t);
  return out;
}

}  // namespace mdm::diffusion
