#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "mdm/latent.hpp"
#include "mdm/numerics/tensor.hpp"

namespace mdm::diffusion {

template <num::Real T>
using Evaluator = std::function<num::Tensor<T>(const num::Tensor<T>& z, double t)>;

namespace detail {
template <num::Real T>
void require_finite_step(const num::Tensor<T>& v, std::size_t step, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) throw SamplerError(std::string("non-finite ") + what, step);
  }
}
}  // namespace detail

/// Second-order step from t to t - dt:
///   z~ = z - dt f(z, t);  z' = z - dt/2 [f(z, t) + f(z~, t - dt)]
template <num::Real T>
num::Tensor<T> dpm_solver_step(const Evaluator<T>& f, const num::Tensor<T>& z, double t, double dt,
                               std::size_t step_index = 0) {
  if (!(dt > 0.0)) throw ArgumentError("dpm_solver_step: dt must be > 0");
  num::Tensor<T> f0 = f(z, t);
  num::require_same_shape(z, f0, "dpm_solver_step");
  detail::require_finite_step(f0, step_index, "evaluator output");
  num::Tensor<T> pred = z;
  for (std::size_t i = 0; i < z.size(); ++i) pred[i] -= static_cast<T>(dt) * f0[i];
  num::Tensor<T> f1 = f(pred, t - dt);
  num::require_same_shape(z, f1, "dpm_solver_step");
  detail::require_finite_step(f1, step_index, "evaluator output");
  num::Tensor<T> out = z;
  const T h = static_cast<T>(dt / 2.0);
  for (std::size_t i = 0; i < z.size(); ++i) out[i] -= h * (f0[i] + f1[i]);
  detail::require_finite_step(out, step_index, "sampler state");
  return out;
}

/// Sequence form: the evaluator sees the full vectors; roles and grid are carried over.
template <num::Real T>
LatentSequence<T> dpm_solver_step(const Evaluator<T>& f, const LatentSequence<T>& z, double t, double dt,
                                  std::size_t step_index = 0) {
  LatentSequence<T> out = z;
  out.vectors = dpm_solver_step(f, z.vectors, t, dt, step_index);
  out.t = t - dt;
  return out;
}

/// n + 1 decreasing noise levels from sigma_max to sigma_min, spaced uniformly in sigma^(1/rho).
inline std::vector<double> karras_sigmas(std::size_t n, double sigma_min, double sigma_max, double rho = 7.0) {
  if (n < 1) throw ArgumentError("karras_sigmas: need at least one step");
  if (!(sigma_min > 0.0 && sigma_min < sigma_max)) throw ArgumentError("karras_sigmas: need 0 < sigma_min < sigma_max");
  std::vector<double> s(n + 1);
  const double a = std::pow(sigma_max, 1.0 / rho), b = std::pow(sigma_min, 1.0 / rho);
  for (std::size_t i = 0; i <= n; ++i) {
    const double w = static_cast<double>(i) / static_cast<double>(n);
    s[i] = std::pow(a + w * (b - a), rho);
  }
  s.front() = sigma_max;
  s.back() = sigma_min;
  return s;
}

}  // namespace mdm::diffusion
