#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "mdm/mamba/scan.hpp"
#include "mdm/numerics/rng.hpp"

namespace mdm::bench {

using num::Tensor;

struct BenchConfig {
  std::vector<std::size_t> lengths{64, 128, 256, 512, 1024, 2048, 4096, 8192};
  std::size_t width = 64;   // N: scan channels and state size; attention model width
  std::size_t layers = 4;   // M
  std::size_t groups = 4;   // G: query heads per key/value head
  std::size_t heads = 8;    // attention query heads
  std::size_t repetitions = 5;
  std::size_t warmup = 2;
  std::size_t threads = 1;  // attention only; the scan recurrence is sequential in L
  std::uint64_t seed = 1;

  void validate() const {
    if (lengths.empty()) throw ArgumentError("bench: need at least one length");
    for (std::size_t i = 0; i < lengths.size(); ++i) {
      if (lengths[i] == 0) throw ArgumentError("bench: lengths must be >= 1");
      if (i && lengths[i] <= lengths[i - 1]) throw ArgumentError("bench: lengths must be strictly increasing");
    }
    if (repetitions < 5) throw ArgumentError("bench: repetitions must be >= 5");
    if (width == 0 || layers == 0 || groups == 0 || heads == 0 || threads == 0) throw ArgumentError("bench: sizes must be >= 1");
    if (heads % groups != 0) throw ArgumentError("bench: heads must be a multiple of groups");
    if (width % heads != 0) throw ArgumentError("bench: width must be a multiple of heads");
  }
};

struct Timing {
  std::size_t L = 0;
  double median_us = 0, p10_us = 0, p90_us = 0;
};

struct Series {
  std::string kernel;  // scan | attention | attention_t<threads>
  BenchConfig cfg;
  std::vector<Timing> points;
};

namespace detail {

inline double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Warms up each length, then times repetitions round-robin across lengths so a
/// burst of host noise is spread over the series instead of one point.
inline std::vector<Timing> time_series(const BenchConfig& cfg, const std::vector<std::function<void()>>& runs) {
  using clock = std::chrono::steady_clock;
  for (const auto& run : runs)
    for (std::size_t w = 0; w < cfg.warmup; ++w) run();
  std::vector<std::vector<double>> us(runs.size());
  for (std::size_t r = 0; r < cfg.repetitions; ++r) {
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const auto t0 = clock::now();
      runs[i]();
      us[i].push_back(std::chrono::duration<double, std::micro>(clock::now() - t0).count());
    }
  }
  std::vector<Timing> out;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const std::size_t L = cfg.lengths[i];
    Timing t{L, percentile(us[i], 0.5), percentile(us[i], 0.1), percentile(us[i], 0.9)};
    if (t.median_us < 1.0) {
      throw ArgumentError("bench: median time below 1 us at L=" + std::to_string(L) +
                          "; timer resolution is insufficient, use larger lengths");
    }
    out.push_back(t);
  }
  return out;
}

// exp for x <= 0 by 2^n range reduction and a degree-6 polynomial; branch-free so
// the softmax loop vectorizes. Relative error about 2e-7 above the underflow cut.
inline float exp_nonpos(float x) {
  x = std::max(x, -87.0f);
  const float n = (x * 1.44269504f + 12582912.0f) - 12582912.0f;  // round to nearest
  const float r = x - n * 0.693145752f - n * 1.42860677e-6f;
  float p = 1.0f / 720;
  p = p * r + 1.0f / 120;
  p = p * r + 1.0f / 24;
  p = p * r + 1.0f / 6;
  p = p * r + 0.5f;
  p = p * r + 1.0f;
  p = p * r + 1.0f;
  const std::int32_t bits = (static_cast<std::int32_t>(n) + 127) << 23;
  return p * std::bit_cast<float>(bits);
}

// Keeps results observable so the work is not optimized away.
inline volatile float sink = 0;

}  // namespace detail

/// M stacked scans over [L x N] inputs with N-dimensional state: O(M L N^2).
inline Series bench_scan(const BenchConfig& cfg) {
  cfg.validate();
  const std::size_t N = cfg.width;
  num::Rng rng(cfg.seed);
  std::vector<mamba::ScanModel<float>> layers;
  for (std::size_t m = 0; m < cfg.layers; ++m) {
    std::vector<double> A(N), delta(N);
    for (std::size_t i = 0; i < N; ++i) A[i] = -std::exp(std::log(0.5) + rng.uniform() * std::log(16.0));
    for (std::size_t e = 0; e < N; ++e) delta[e] = 0.01 + 0.09 * rng.uniform();
    Tensor<double> B = num::standard_normal<double>(rng, {N, N});
    for (auto& v : B.values()) v /= std::sqrt(static_cast<double>(N));
    const auto d = mamba::discretize(A, B, delta);
    mamba::ScanModel<float> sm;
    for (std::size_t i = 0; i < N; ++i) sm.A_bar.push_back(static_cast<float>(d.A_bar[i]));
    sm.B_bar = d.B_bar.cast<float>();
    sm.C = num::standard_normal<float>(rng, {N, N});
    for (auto& v : sm.C.values()) v /= std::sqrt(static_cast<float>(N));
    sm.D.assign(N, 1.0f);
    layers.push_back(std::move(sm));
  }
  std::vector<Tensor<float>> inputs;
  std::vector<std::function<void()>> runs;
  for (std::size_t L : cfg.lengths) inputs.push_back(num::standard_normal<float>(rng, {L, N}));
  for (const auto& x0 : inputs) {
    runs.emplace_back([&layers, &x0] {
      Tensor<float> x = x0;
      for (const auto& m : layers) x = mamba::scan_sequential(m, x);
      detail::sink = x[0];
    });
  }
  return Series{"scan", cfg, detail::time_series(cfg, runs)};
}

/// Naive grouped-query self-attention (no fusion, no blocking), used only as a
/// scaling baseline. `heads` query heads share heads / G key/value heads. Per
/// layer: Q and output projections N^2 L, K and V projections 2 N^2 L / G,
/// scores and weighted values 2 L^2 N. With threads > 1 the key/value heads are
/// split across threads.
inline Tensor<float> gqa_forward(const Tensor<float>& x, const Tensor<float>& wq, const Tensor<float>& wk,
                                 const Tensor<float>& wv, const Tensor<float>& wo, std::size_t heads,
                                 std::size_t groups, std::size_t threads = 1) {
  const std::size_t L = x.dim(0), N = x.dim(1), dh = N / heads, kvh = heads / groups, Nkv = kvh * dh;
  auto project = [&](const Tensor<float>& in, const Tensor<float>& w, std::size_t out) {
    Tensor<float> y({L, out});
    for (std::size_t n = 0; n < L; ++n)
      for (std::size_t o = 0; o < out; ++o) y[n * out + o] = num::dot(w.data() + o * N, in.data() + n * N, N);
    return y;
  };
  const Tensor<float> q = project(x, wq, N), k = project(x, wk, Nkv), v = project(x, wv, Nkv);
  Tensor<float> ctx({L, N});
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  auto run_kv = [&](std::size_t kv_begin, std::size_t kv_end) {
    std::vector<float> p(L), kt(dh * L), vt(dh * L);
    for (std::size_t kv = kv_begin; kv < kv_end; ++kv) {
      for (std::size_t j = 0; j < L; ++j)
        for (std::size_t d = 0; d < dh; ++d) {
          kt[d * L + j] = k[j * Nkv + kv * dh + d];
          vt[d * L + j] = v[j * Nkv + kv * dh + d];
        }
      for (std::size_t h = kv * groups; h < (kv + 1) * groups; ++h) {
        for (std::size_t i = 0; i < L; ++i) {
          const float* qi = q.data() + i * N + h * dh;
          std::fill(p.begin(), p.end(), 0.0f);
          for (std::size_t d = 0; d < dh; ++d) {
            const float a = scale * qi[d];
            const float* row = kt.data() + d * L;
#pragma omp simd
            for (std::size_t j = 0; j < L; ++j) p[j] += a * row[j];
          }
          float mx = -INFINITY;
#pragma omp simd reduction(max : mx)
          for (std::size_t j = 0; j < L; ++j) mx = std::max(mx, p[j]);
          float z = 0;
#pragma omp simd reduction(+ : z)
          for (std::size_t j = 0; j < L; ++j) z += (p[j] = detail::exp_nonpos(p[j] - mx));
          float* out = ctx.data() + i * N + h * dh;
          for (std::size_t d = 0; d < dh; ++d) out[d] = num::dot(p.data(), vt.data() + d * L, L) / z;
        }
      }
    }
  };
  const std::size_t nt = std::clamp<std::size_t>(threads, 1, kvh);
  if (nt == 1) {
    run_kv(0, kvh);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < nt; ++t) pool.emplace_back(run_kv, t * kvh / nt, (t + 1) * kvh / nt);
    for (auto& th : pool) th.join();
  }
  return project(ctx, wo, N);
}

inline Series bench_attention(const BenchConfig& cfg) {
  cfg.validate();
  const std::size_t N = cfg.width, Nkv = N / cfg.groups;
  num::Rng rng(cfg.seed);
  struct Layer {
    Tensor<float> wq, wk, wv, wo;
  };
  std::vector<Layer> layers;
  const float sd = 1.0f / std::sqrt(static_cast<float>(N));
  auto init = [&](std::size_t rows) {
    Tensor<float> w = num::standard_normal<float>(rng, {rows, N});
    for (auto& v : w.values()) v *= sd;
    return w;
  };
  for (std::size_t m = 0; m < cfg.layers; ++m) layers.push_back({init(N), init(Nkv), init(Nkv), init(N)});
  std::vector<Tensor<float>> inputs;
  std::vector<std::function<void()>> runs;
  for (std::size_t L : cfg.lengths) inputs.push_back(num::standard_normal<float>(rng, {L, N}));
  for (const auto& x0 : inputs) {
    runs.emplace_back([&layers, &x0, &cfg] {
      Tensor<float> x = x0;
      for (const auto& l : layers) x = gqa_forward(x, l.wq, l.wk, l.wv, l.wo, cfg.heads, cfg.groups, cfg.threads);
      detail::sink = x[0];
    });
  }
  return Series{cfg.threads > 1 ? "attention_t" + std::to_string(cfg.threads) : "attention", cfg,
                detail::time_series(cfg, runs)};
}

struct LogLogFit {
  double slope = 0, intercept = 0, r2 = 0;
};

/// Least squares of log(median) on log(L).
inline LogLogFit fit_loglog(const Series& s) {
  const std::size_t n = s.points.size();
  if (n < 2) throw ArgumentError("fit_loglog: need at least two points");
  double mx = 0, my = 0;
  for (const auto& p : s.points) mx += std::log(static_cast<double>(p.L)), my += std::log(p.median_us);
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0, sxy = 0, syy = 0;
  for (const auto& p : s.points) {
    const double dx = std::log(static_cast<double>(p.L)) - mx, dy = std::log(p.median_us) - my;
    sxx += dx * dx, sxy += dx * dy, syy += dy * dy;
  }
  LogLogFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.r2 = syy > 0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return f;
}

/// Smallest L from which the scan stays faster than attention for every larger length.
inline std::optional<std::size_t> find_crossover(const Series& scan, const Series& attn) {
  if (scan.points.size() != attn.points.size()) throw ArgumentError("find_crossover: series lengths differ");
  for (std::size_t i = 0; i < scan.points.size(); ++i) {
    if (scan.points[i].L != attn.points[i].L) throw ArgumentError("find_crossover: series use different lengths");
  }
  std::optional<std::size_t> out;
  for (std::size_t i = scan.points.size(); i-- > 0;) {
    if (!(scan.points[i].median_us < attn.points[i].median_us)) break;
    out = scan.points[i].L;
  }
  return out;
}

inline void write_csv_header(std::ostream& os) { os << "kernel,L,N,M,G,median_us,p10_us,p90_us\n"; }

inline void write_csv(std::ostream& os, const Series& s) {
  char buf[160];
  for (const auto& p : s.points) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%zu,%zu,%.3f,%.3f,%.3f\n", s.kernel.c_str(), p.L, s.cfg.width,
                  s.cfg.layers, s.cfg.groups, p.median_us, p.p10_us, p.p90_us);
    os << buf;
  }
}

}  // namespace mdm::bench
