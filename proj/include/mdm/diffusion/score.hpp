#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "mdm/numerics/ops.hpp"
#include "mdm/numerics/tensor.hpp"

namespace mdm::diffusion {

/// The score ratio does not fit in a double; log_ratio() holds the exact exponent.
class ScoreOverflowError : public NumericError {
 public:
  explicit ScoreOverflowError(double log_ratio)
      : NumericError("true_score_ratio: exp(" + std::to_string(log_ratio) + ") overflows"), log_ratio_(log_ratio) {}
  double log_ratio() const noexcept { return log_ratio_; }

 private:
  double log_ratio_;
};

/// ||z_t||^2 / 2 - ||z_t - sqrt(ab) z0||^2 / (2 (1 - ab))
template <num::Real T>
double log_true_score_ratio(const num::Tensor<T>& z_t, const num::Tensor<T>& z0, double alpha_bar) {
  num::require_same_shape(z_t, z0, "true_score_ratio");
  if (!(alpha_bar > 0.0 && alpha_bar < 1.0)) throw ArgumentError("true_score_ratio: alpha_bar must be in (0, 1)");
  const double sa = std::sqrt(alpha_bar);
  double nz = 0.0, nd = 0.0;
  for (std::size_t i = 0; i < z_t.size(); ++i) {
    const double zt = z_t[i], d = zt - sa * static_cast<double>(z0[i]);
    nz += zt * zt;
    nd += d * d;
  }
  return 0.5 * nz - nd / (2.0 * (1.0 - alpha_bar));
}

template <num::Real T>
double true_score_ratio(const num::Tensor<T>& z_t, const num::Tensor<T>& z0, double alpha_bar) {
  const double lr = log_true_score_ratio(z_t, z0, alpha_bar);
  if (lr > std::log(std::numeric_limits<double>::max())) throw ScoreOverflowError(lr);
  return std::exp(lr);
}

/// Softmax over candidate scores.
inline std::vector<double> parameterized_score(const std::vector<double>& f) {
  if (f.empty()) throw ArgumentError("parameterized_score: no candidates");
  for (double v : f)
    if (!std::isfinite(v)) throw NumericError("parameterized_score: non-finite candidate score");
  std::vector<double> s = f;
  num::softmax_inplace<double>(s);
  return s;
}

struct ScoreTerms {
  std::vector<double> s_theta;
  std::vector<double> r_true;
  std::vector<double> weights;  // empty means 1 for every candidate
};

/// K(a) = a (log a - 1)
inline double score_normalizer(double a) { return a * (std::log(a) - 1.0); }

namespace detail {
inline void validate_terms(const ScoreTerms& t) {
  if (t.s_theta.size() != t.r_true.size()) throw ArgumentError("score_entropy: s and r lengths differ");
  if (!t.weights.empty() && t.weights.size() != t.s_theta.size()) {
    throw ArgumentError("score_entropy: weight count differs from candidate count");
  }
  for (std::size_t i = 0; i < t.s_theta.size(); ++i) {
    if (!(t.s_theta[i] > 0.0)) throw ArgumentError("score_entropy: s must be positive");
    if (!(t.r_true[i] > 0.0)) throw ArgumentError("score_entropy: r must be positive");
    if (!t.weights.empty() && !(t.weights[i] > 0.0 && t.weights[i] <= 1.0)) {
      throw ArgumentError("score_entropy: weights must be in (0, 1]");
    }
  }
}
}  // namespace detail

/// sum_y w (s - r log s + K(r)). Evaluated as w r (d - log1p(d)) with d = s/r - 1,
/// which is exactly zero at s = r and never negative.
inline double score_entropy(const ScoreTerms& t) {
  detail::validate_terms(t);
  double acc = 0.0;
  for (std::size_t i = 0; i < t.s_theta.size(); ++i) {
    const double w = t.weights.empty() ? 1.0 : t.weights[i];
    const double r = t.r_true[i], d = t.s_theta[i] / r - 1.0;
    acc += w * r * std::max(0.0, d - std::log1p(d));
  }
  return acc;
}

/// d se / d s_i = w_i (1 - r_i / s_i)
inline std::vector<double> score_entropy_grad(const ScoreTerms& t) {
  detail::validate_terms(t);
  std::vector<double> g(t.s_theta.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double w = t.weights.empty() ? 1.0 : t.weights[i];
    g[i] = w * (1.0 - t.r_true[i] / t.s_theta[i]);
  }
  return g;
}

}  // namespace mdm::diffusion
