#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "mdm/numerics/tensor.hpp"

namespace mdm::num {

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate.
inline Tensor<double> finite_diff_grad(const std::function<double(const Tensor<double>&)>& f,
                                       const Tensor<double>& x, double h = 1e-5) {
  if (!(h > 0.0)) throw ArgumentError("finite_diff_grad: h must be > 0");
  Tensor<double> g(x.shape());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = probe[i];
    probe[i] = x0 + h;
    const double fp = f(probe);
    probe[i] = x0 - h;
    const double fm = f(probe);
    probe[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite function value at coordinate " +
                         std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Five-point central stencil [f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)] / 12h.
inline Tensor<double> finite_diff_grad5(const std::function<double(const Tensor<double>&)>& f,
                                        const Tensor<double>& x, double h = 1e-3) {
  if (!(h > 0.0)) throw ArgumentError("finite_diff_grad5: h must be > 0");
  Tensor<double> g(x.shape());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = probe[i];
    double v[4];
    const double off[4] = {-2 * h, -h, h, 2 * h};
    for (int k = 0; k < 4; ++k) {
      probe[i] = x0 + off[k];
      v[k] = f(probe);
      if (!std::isfinite(v[k])) {
        throw NumericError("finite_diff_grad5: non-finite function value at coordinate " + std::to_string(i));
      }
    }
    probe[i] = x0;
    g[i] = (v[0] - 8.0 * v[1] + 8.0 * v[2] - v[3]) / (12.0 * h);
  }
  return g;
}

/// Max over elements of |a - n| / max(|a|, |n|, floor).
inline double max_relative_error(const Tensor<double>& analytic, const Tensor<double>& numeric,
                                 double floor = 1e-6) {
  require_same_shape(analytic, numeric, "max_relative_error");
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[i];
    const double denom = std::max({std::abs(a), std::abs(n), floor});
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

}  // namespace mdm::num
