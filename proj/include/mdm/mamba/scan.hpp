#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mdm/latent.hpp"
#include "mdm/numerics/graph.hpp"
#include "mdm/numerics/ops.hpp"
#include "mdm/numerics/tensor.hpp"

namespace mdm::mamba {

using num::Real;
using num::Tensor;

// ---------------------------------------------------------------------------
// Scan orders

enum class OrderKind { row_major, row_major_reversed, col_major, col_major_reversed, text_forward, text_backward };

struct ScanOrder {
  std::vector<std::size_t> perm;  // perm[k] = content index visited at step k
  OrderKind kind = OrderKind::text_forward;

  std::vector<std::size_t> inverse() const {
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t k = 0; k < perm.size(); ++k) inv[perm[k]] = k;
    return inv;
  }
};

/// Images: row-major, reversed row-major, column-major, reversed column-major.
/// Text: forward and backward over `length` positions.
inline std::vector<ScanOrder> make_scan_orders(Modality m, std::size_t rows, std::size_t cols, std::size_t length = 0) {
  std::vector<ScanOrder> out;
  if (m == Modality::text) {
    ScanOrder f{std::vector<std::size_t>(length), OrderKind::text_forward};
    std::iota(f.perm.begin(), f.perm.end(), std::size_t{0});
    ScanOrder b{f.perm, OrderKind::text_backward};
    std::reverse(b.perm.begin(), b.perm.end());
    out.push_back(std::move(f));
    out.push_back(std::move(b));
    return out;
  }
  if (rows == 0 || cols == 0) throw ArgumentError("make_scan_orders: image orders need a grid");
  ScanOrder rm{{}, OrderKind::row_major}, cm{{}, OrderKind::col_major};
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) rm.perm.push_back(r * cols + c);
  for (std::size_t c = 0; c < cols; ++c)
    for (std::size_t r = 0; r < rows; ++r) cm.perm.push_back(r * cols + c);
  ScanOrder rmr{rm.perm, OrderKind::row_major_reversed}, cmr{cm.perm, OrderKind::col_major_reversed};
  std::reverse(rmr.perm.begin(), rmr.perm.end());
  std::reverse(cmr.perm.begin(), cmr.perm.end());
  out.push_back(std::move(rm));
  out.push_back(std::move(rmr));
  out.push_back(std::move(cm));
  out.push_back(std::move(cmr));
  return out;
}

inline std::vector<ScanOrder> make_scan_orders(const std::vector<Role>& roles, Modality m, std::size_t rows,
                                               std::size_t cols) {
  std::size_t content = 0;
  for (Role r : roles) content += r == Role::content;
  return make_scan_orders(m, rows, cols, content);
}

/// Row permutation of a full sequence: specials before the first content row keep
/// their place at the front, specials after it go to the back, content follows `order`.
inline std::vector<std::size_t> full_permutation(const ScanOrder& order, const std::vector<Role>& roles) {
  std::vector<std::size_t> content, prefix, suffix;
  for (std::size_t i = 0; i < roles.size(); ++i) {
    if (roles[i] == Role::content) content.push_back(i);
    else if (content.empty()) prefix.push_back(i);
    else suffix.push_back(i);
  }
  if (order.perm.size() != content.size()) throw ArgumentError("scan order length does not match content count");
  std::vector<std::size_t> out = prefix;
  for (std::size_t k : order.perm) out.push_back(content.at(k));
  out.insert(out.end(), suffix.begin(), suffix.end());
  return out;
}

inline std::vector<std::size_t> invert(const std::vector<std::size_t>& p) {
  std::vector<std::size_t> inv(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) inv[p[k]] = k;
  return inv;
}

// ---------------------------------------------------------------------------
// Discretization. A is diagonal (N), B is [N x E], delta is per state channel (N).
//   A_bar = exp(delta A)
//   phi   = (exp(delta A) - 1) / A       (B_bar = phi B)
//   dphi/ddelta = exp(delta A)
//   dphi/dA     = delta^2 psi(delta A),  psi(x) = (x e^x - e^x + 1) / x^2

inline constexpr double kSeriesThreshold = 1e-4;

template <Real T>
T zoh_phi(T a, T delta) {
  const T x = delta * a;
  if (std::abs(x) < T(kSeriesThreshold)) return delta * (T{1} + x / T{2} + x * x / T{6} + x * x * x / T{24});
  return std::expm1(x) / a;
}

template <Real T>
T zoh_psi(T x) {
  if (std::abs(x) < T(1e-3)) return T(0.5) + x / T{3} + x * x / T{8} + x * x * x / T{30};
  const T e = std::exp(x);
  return (x * e - std::expm1(x)) / (x * x);
}

template <Real T>
struct Discretized {
  std::vector<T> A_bar;  // N
  std::vector<T> phi;    // N
  Tensor<T> B_bar;       // N x E
};

template <Real T>
Discretized<T> discretize(const std::vector<T>& A, const Tensor<T>& B, const std::vector<T>& delta) {
  const std::size_t N = A.size();
  if (delta.size() != N || B.rank() != 2 || B.dim(0) != N) {
    throw ArgumentError("discretize: A, B, delta sizes disagree");
  }
  Discretized<T> d;
  d.A_bar.resize(N);
  d.phi.resize(N);
  d.B_bar = Tensor<T>(B.shape());
  const std::size_t E = B.dim(1);
  for (std::size_t i = 0; i < N; ++i) {
    if (!(delta[i] > T{0})) throw ArgumentError("discretize: delta must be > 0");
    d.A_bar[i] = std::exp(delta[i] * A[i]);
    d.phi[i] = zoh_phi(A[i], delta[i]);
    for (std::size_t j = 0; j < E; ++j) d.B_bar[i * E + j] = d.phi[i] * B[i * E + j];
  }
  return d;
}

// ---------------------------------------------------------------------------
// Scan:  H_n = A_bar * H_{n-1} + B_bar u_n,  y_n = C H_n + D * u_n,  H_0 = 0.
// u is [L x E], H is [L x N], C is [E x N], D has E entries.

template <Real T>
struct ScanModel {
  std::vector<T> A_bar;  // N
  Tensor<T> B_bar;       // N x E
  Tensor<T> C;           // E x N
  std::vector<T> D;      // E

  std::size_t N() const { return A_bar.size(); }
  std::size_t E() const { return D.size(); }
};

namespace detail {

template <Real T>
void check_model(const ScanModel<T>& m, const Tensor<T>& u) {
  const std::size_t N = m.N(), E = m.E();
  if (m.B_bar.size() != N * E || m.C.size() != E * N) throw ArgumentError("ssm_scan: parameter shapes disagree");
  if (u.rank() != 2 || u.dim(1) != E) throw ArgumentError("ssm_scan: input must be [L x E]");
}

template <Real T>
void throw_non_finite(std::size_t n) {
  throw NumericError("ssm_scan: non-finite state at position " + std::to_string(n));
}

// y_n = C H_n + D u_n for every row.
template <Real T>
Tensor<T> readout(const ScanModel<T>& m, const Tensor<T>& u, const Tensor<T>& H) {
  const std::size_t L = u.dim(0), N = m.N(), E = m.E();
  Tensor<T> y({L, E});
  for (std::size_t n = 0; n < L; ++n) {
    const T* h = H.data() + n * N;
    for (std::size_t e = 0; e < E; ++e) {
      y[n * E + e] = num::dot(m.C.data() + e * N, h, N) + m.D[e] * u[n * E + e];
    }
  }
  return y;
}

}  // namespace detail

template <Real T>
Tensor<T> scan_sequential(const ScanModel<T>& m, const Tensor<T>& u, Tensor<T>* H_out = nullptr) {
  detail::check_model(m, u);
  const std::size_t L = u.dim(0), N = m.N(), E = m.E();
  Tensor<T> H({L, N});
  std::vector<T> h(N, T{0});
  for (std::size_t n = 0; n < L; ++n) {
    const T* un = u.data() + n * E;
    for (std::size_t i = 0; i < N; ++i) {
      h[i] = m.A_bar[i] * h[i] + num::dot(m.B_bar.data() + i * E, un, E);
      if (!std::isfinite(h[i])) detail::throw_non_finite<T>(n);
      H[n * N + i] = h[i];
    }
  }
  Tensor<T> y = detail::readout(m, u, H);
  if (H_out) *H_out = std::move(H);
  return y;
}

/// Work-efficient (Blelloch) exclusive scan over the affine maps h -> a h + b,
/// run serially; returns the same states as the recurrence.
template <Real T>
Tensor<T> scan_parallel(const ScanModel<T>& m, const Tensor<T>& u, Tensor<T>* H_out = nullptr) {
  detail::check_model(m, u);
  const std::size_t L = u.dim(0), N = m.N(), E = m.E();
  std::size_t P = 1;
  while (P < L) P <<= 1;
  // element k: (a[k*N..], b[k*N..]); identity is (1, 0)
  std::vector<T> a(P * N, T{1}), b(P * N, T{0});
  for (std::size_t n = 0; n < L; ++n) {
    for (std::size_t i = 0; i < N; ++i) {
      a[n * N + i] = m.A_bar[i];
      b[n * N + i] = num::dot(m.B_bar.data() + i * E, u.data() + n * E, E);
    }
  }
  const std::vector<T> a0 = a, b0 = b;
  // (first, second) -> apply first then second: (a1 a2, a2 b1 + b2)
  auto combine_into = [&](std::size_t first, std::size_t second) {
    for (std::size_t i = 0; i < N; ++i) {
      const T a1 = a[first * N + i], b1 = b[first * N + i];
      T& a2 = a[second * N + i];
      T& b2 = b[second * N + i];
      b2 = a2 * b1 + b2;
      a2 = a1 * a2;
    }
  };
  for (std::size_t d = 1; d < P; d <<= 1) {
    for (std::size_t k = 2 * d - 1; k < P; k += 2 * d) combine_into(k - d, k);
  }
  for (std::size_t i = 0; i < N; ++i) {
    a[(P - 1) * N + i] = T{1};
    b[(P - 1) * N + i] = T{0};
  }
  std::vector<T> ta(N), tb(N);
  for (std::size_t d = P >> 1; d >= 1; d >>= 1) {
    for (std::size_t k = 2 * d - 1; k < P; k += 2 * d) {
      const std::size_t left = k - d;
      for (std::size_t i = 0; i < N; ++i) {
        ta[i] = a[left * N + i];
        tb[i] = b[left * N + i];
        a[left * N + i] = a[k * N + i];
        b[left * N + i] = b[k * N + i];
      }
      // right = parent prefix followed by left subtree total
      for (std::size_t i = 0; i < N; ++i) {
        const T pa = a[k * N + i], pb = b[k * N + i];
        b[k * N + i] = ta[i] * pb + tb[i];
        a[k * N + i] = pa * ta[i];
      }
    }
    if (d == 1) break;
  }
  Tensor<T> H({L, N});
  for (std::size_t n = 0; n < L; ++n) {
    for (std::size_t i = 0; i < N; ++i) {
      // inclusive = exclusive prefix followed by element n, applied to H_0 = 0
      const T v = a0[n * N + i] * b[n * N + i] + b0[n * N + i];
      if (!std::isfinite(v)) detail::throw_non_finite<T>(n);
      H[n * N + i] = v;
    }
  }
  Tensor<T> y = detail::readout(m, u, H);
  if (H_out) *H_out = std::move(H);
  return y;
}

template <Real T>
struct ScanGradients {
  std::vector<T> A_bar;  // N
  Tensor<T> B_bar;       // N x E
  Tensor<T> C;           // E x N
  std::vector<T> D;      // E
  Tensor<T> u;           // L x E
};

/// Reverse pass of the recurrence given dL/dy.
///   g_n = C^T dy_n + A_bar * g_{n+1}
///   dA_bar = sum_n g_n * H_{n-1},  dB_bar = sum_n g_n u_n^T
///   dC = sum_n dy_n H_n^T,  dD = sum_n dy_n * u_n,  du_n = B_bar^T g_n + D * dy_n
template <Real T>
ScanGradients<T> scan_backward(const ScanModel<T>& m, const Tensor<T>& u, const Tensor<T>& H, const Tensor<T>& dy) {
  detail::check_model(m, u);
  const std::size_t L = u.dim(0), N = m.N(), E = m.E();
  ScanGradients<T> g;
  g.A_bar.assign(N, T{0});
  g.B_bar = Tensor<T>({N, E});
  g.C = Tensor<T>({E, N});
  g.D.assign(E, T{0});
  g.u = Tensor<T>({L, E});
  std::vector<T> carry(N, T{0}), gn(N);
  for (std::size_t n = L; n-- > 0;) {
    const T* dyn = dy.data() + n * E;
    const T* un = u.data() + n * E;
    const T* hn = H.data() + n * N;
    for (std::size_t i = 0; i < N; ++i) gn[i] = m.A_bar[i] * carry[i];
    for (std::size_t e = 0; e < E; ++e) {
      const T d = dyn[e];
      if (d == T{0}) continue;
      num::axpy(d, m.C.data() + e * N, gn.data(), N);
      num::axpy(d, hn, g.C.data() + e * N, N);
      g.D[e] += d * un[e];
    }
    for (std::size_t i = 0; i < N; ++i) {
      if (n > 0) g.A_bar[i] += gn[i] * H[(n - 1) * N + i];
      num::axpy(gn[i], un, g.B_bar.data() + i * E, E);
      num::axpy(gn[i], m.B_bar.data() + i * E, g.u.data() + n * E, E);
    }
    for (std::size_t e = 0; e < E; ++e) g.u[n * E + e] += m.D[e] * dyn[e];
    carry = gn;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Tape node: y = scan(u) with A = -exp(a_log), delta = softplus(delta_raw).

enum class ScanMode { sequential, parallel };

template <Real T>
num::Var ssm_scan(num::Graph<T>& g, num::Var u, num::Var a_log, num::Var delta_raw, num::Var B, num::Var C,
                  num::Var D, ScanMode mode = ScanMode::sequential) {
  const auto& al = g.value(a_log);
  const auto& dr = g.value(delta_raw);
  const std::size_t N = al.size();
  std::vector<T> A(N), delta(N);
  for (std::size_t i = 0; i < N; ++i) {
    A[i] = -std::exp(al[i]);
    delta[i] = num::softplus(dr[i]);
  }
  const auto& Bv = g.value(B);
  Tensor<T> B2 = Bv;
  if (B2.rank() != 2) B2.reshape({N, Bv.size() / N});
  auto disc = discretize(A, B2, delta);
  ScanModel<T> model{disc.A_bar, disc.B_bar, g.value(C), g.value(D).storage()};
  Tensor<T> H;
  Tensor<T> y = mode == ScanMode::parallel ? scan_parallel(model, g.value(u), &H) : scan_sequential(model, g.value(u), &H);
  return g.custom(std::move(y), {u, a_log, delta_raw, B, C, D},
                  [u, a_log, delta_raw, B, C, D, model, H, A, delta, disc, B2](num::Graph<T>& gr, const Tensor<T>& dy) {
                    const auto sg = scan_backward(model, gr.value(u), H, dy);
                    const std::size_t N = A.size(), E = model.E();
                    if (gr.needs_grad(u)) {
                      auto& du = gr.grad(u);
                      for (std::size_t i = 0; i < du.size(); ++i) du[i] += sg.u[i];
                    }
                    if (gr.needs_grad(C)) {
                      auto& dC = gr.grad(C);
                      for (std::size_t i = 0; i < dC.size(); ++i) dC[i] += sg.C[i];
                    }
                    if (gr.needs_grad(D)) {
                      auto& dD = gr.grad(D);
                      for (std::size_t i = 0; i < dD.size(); ++i) dD[i] += sg.D[i];
                    }
                    std::vector<T> dphi(N, T{0});
                    for (std::size_t i = 0; i < N; ++i)
                      dphi[i] = num::dot(sg.B_bar.data() + i * E, B2.data() + i * E, E);
                    if (gr.needs_grad(B)) {
                      auto& dB = gr.grad(B);
                      for (std::size_t i = 0; i < N; ++i)
                        for (std::size_t j = 0; j < E; ++j) dB[i * E + j] += disc.phi[i] * sg.B_bar[i * E + j];
                    }
                    for (std::size_t i = 0; i < N; ++i) {
                      const T ab = disc.A_bar[i];
                      const T dA = sg.A_bar[i] * delta[i] * ab + dphi[i] * delta[i] * delta[i] * zoh_psi(delta[i] * A[i]);
                      const T dDelta = sg.A_bar[i] * A[i] * ab + dphi[i] * ab;
                      if (gr.needs_grad(a_log)) gr.grad(a_log)[i] += dA * A[i];
                      if (gr.needs_grad(delta_raw)) gr.grad(delta_raw)[i] += dDelta * num::sigmoid(gr.value(delta_raw)[i]);
                    }
                  });
}

}  // namespace mdm::mamba
