#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mdm/numerics/graph.hpp"
#include "mdm/numerics/ops.hpp"

namespace mdm::mamba {

struct SelectionPolicy {
  enum class Kind { threshold, top_j } kind = Kind::threshold;
  double tau = 0.05;
  std::size_t j = 0;  // 0 means ceil(0.75 * length)

  std::size_t count_for(std::size_t length) const {
    return j != 0 ? j : static_cast<std::size_t>(std::ceil(0.75 * static_cast<double>(length)));
  }
};

/// Threshold: se_i <= tau. Top-j: the j smallest values, ties to the lower index.
inline std::vector<bool> select_items(const std::vector<double>& se, const SelectionPolicy& policy) {
  for (double v : se) {
    if (!(v >= 0.0)) throw ArgumentError("select_items: se values must be >= 0");
  }
  std::vector<bool> mask(se.size(), false);
  if (policy.kind == SelectionPolicy::Kind::threshold) {
    for (std::size_t i = 0; i < se.size(); ++i) mask[i] = se[i] <= policy.tau;
    return mask;
  }
  const std::size_t j = policy.count_for(se.size());
  if (j > se.size()) throw ArgumentError("select_items: j exceeds sequence length");
  std::vector<std::size_t> idx(se.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return se[a] < se[b]; });
  for (std::size_t k = 0; k < j; ++k) mask[idx[k]] = true;
  return mask;
}

template <num::Real T>
struct SelectionValues {
  num::Tensor<T> f;  // [L x K] candidate scores from the head
  num::Tensor<T> g;  // [L x K] true log-ratios from the current state
  std::vector<double> se;
};

/// Per-position score entropy between the head distribution s = softmax_k f and
/// the true ratio distribution r = softmax_k g over candidates y_k:
///   f_k = (sqrt(ab) <q, y_k> - ab |y_k|^2 / 2) / (1 - ab)
///   g_k = same with the current state x in place of q
///   se  = sum_k w_k (s_k - r_k log s_k + r_k log r_k - r_k)
/// x, q: [L x D]; each candidate [L x D]. Returns a [L x 1] node.
template <num::Real T>
num::Var selection_entropy(num::Graph<T>& gr, num::Var x, num::Var q, const std::vector<num::Tensor<T>>& candidates,
                           double alpha_bar, const std::vector<double>& weights = {},
                           SelectionValues<T>* values = nullptr) {
  using num::Tensor;
  const auto& X = gr.value(x);
  const auto& Q = gr.value(q);
  const std::size_t L = X.dim(0), D = X.size() / L, K = candidates.size();
  if (K == 0) throw ArgumentError("selection_entropy: no candidates");
  if (Q.size() != X.size()) throw ArgumentError("selection_entropy: x and q shapes differ");
  for (const auto& c : candidates) {
    if (c.size() != X.size()) throw ArgumentError("selection_entropy: candidate shape differs from state");
  }
  if (!weights.empty() && weights.size() != K) throw ArgumentError("selection_entropy: weight count mismatch");
  if (!(alpha_bar > 0.0 && alpha_bar < 1.0)) throw ArgumentError("selection_entropy: alpha_bar must be in (0, 1)");
  const double sa = std::sqrt(alpha_bar), c = 1.0 / (1.0 - alpha_bar);
  auto w = [&](std::size_t k) { return weights.empty() ? 1.0 : weights[k]; };

  std::vector<double> logs(L * K), logr(L * K), f(K), g(K);
  Tensor<T> out({L, 1});
  std::vector<double> se(L);
  if (values) {
    values->f = Tensor<T>({L, K});
    values->g = Tensor<T>({L, K});
  }
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t k = 0; k < K; ++k) {
      const T* y = candidates[k].data() + i * D;
      double qy = 0, xy = 0, yy = 0;
      for (std::size_t d = 0; d < D; ++d) {
        const double yv = y[d];
        qy += static_cast<double>(Q[i * D + d]) * yv;
        xy += static_cast<double>(X[i * D + d]) * yv;
        yy += yv * yv;
      }
      f[k] = c * (sa * qy - 0.5 * alpha_bar * yy);
      g[k] = c * (sa * xy - 0.5 * alpha_bar * yy);
      if (values) {
        values->f[i * K + k] = static_cast<T>(f[k]);
        values->g[i * K + k] = static_cast<T>(g[k]);
      }
    }
    num::log_softmax_inplace<double>(f);
    num::log_softmax_inplace<double>(g);
    double acc = 0;
    for (std::size_t k = 0; k < K; ++k) {
      logs[i * K + k] = f[k];
      logr[i * K + k] = g[k];
      const double s = std::exp(f[k]), r = std::exp(g[k]);
      acc += w(k) * (s - r * f[k] + r * g[k] - r);
    }
    se[i] = std::max(0.0, acc);
    out[i] = static_cast<T>(se[i]);
  }
  if (values) values->se = se;

  return gr.custom(std::move(out), {x, q},
                   [x, q, candidates, logs, logr, weights, L, D, K, sa, c](num::Graph<T>& G, const Tensor<T>& go) {
                     auto w = [&](std::size_t k) { return weights.empty() ? 1.0 : weights[k]; };
                     T* dx = G.needs_grad(x) ? G.grad(x).data() : nullptr;
                     T* dq = G.needs_grad(q) ? G.grad(q).data() : nullptr;
                     std::vector<double> df(K), dg(K);
                     for (std::size_t i = 0; i < L; ++i) {
                       const double up = go[i];
                       if (up == 0.0) continue;
                       double sa_sum = 0, sb_sum = 0;
                       for (std::size_t k = 0; k < K; ++k) {
                         const double s = std::exp(logs[i * K + k]), r = std::exp(logr[i * K + k]);
                         df[k] = w(k) * (s - r);
                         dg[k] = w(k) * r * (logr[i * K + k] - logs[i * K + k]);
                         sa_sum += df[k];
                         sb_sum += dg[k];
                       }
                       for (std::size_t k = 0; k < K; ++k) {
                         const double s = std::exp(logs[i * K + k]), r = std::exp(logr[i * K + k]);
                         const double gf = up * c * sa * (df[k] - s * sa_sum);
                         const double gg = up * c * sa * (dg[k] - r * sb_sum);
                         const T* y = candidates[k].data() + i * D;
                         for (std::size_t d = 0; d < D; ++d) {
                           if (dq) dq[i * D + d] += static_cast<T>(gf * y[d]);
                           if (dx) dx[i * D + d] += static_cast<T>(gg * y[d]);
                         }
                       }
                     }
                   });
}

}  // namespace mdm::mamba
