#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mdm/numerics/ops.hpp"
#include "mdm/numerics/tensor.hpp"

namespace mdm::num {

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const noexcept { return id != static_cast<std::size_t>(-1); }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so walking them
// backwards is a valid topological order. Values are 2-D [rows x cols] except
// parameter leaves, which keep the parameter's own shape.
template <Real T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, const Tensor<T>& grad_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  /// Leaf that receives a gradient. Repeated calls with the same name reuse one leaf.
  Var param(const std::string& name, const Tensor<T>& value) {
    auto it = params_.find(name);
    if (it != params_.end()) return it->second;
    Var v = push_ref(&value);
    params_[name] = v;
    return v;
  }

  Var custom(Tensor<T> value, const std::vector<Var>& inputs, Backward back) {
    bool needs = false;
    for (auto in : inputs) needs = needs || nodes_[in.id].needs_grad;
    return push(std::move(value), needs, needs ? std::move(back) : nullptr);
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_[v.id];
    return n.ref ? *n.ref : n.value;
  }

  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }

  /// Gradient buffer for v, allocated as zeros on first use.
  Tensor<T>& grad(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.size() != value(v).size()) n.grad = Tensor<T>(value(v).shape());
    return n.grad;
  }

  bool has_grad(Var v) const { return nodes_[v.id].grad.size() != 0; }

  void backward(Var root, const Tensor<T>& seed) {
    require_same_shape(value(root), seed, "Graph::backward seed");
    grad(root) = seed;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.back || n.grad.size() == 0) continue;
      n.back(*this, n.grad);
    }
  }

  void backward(Var root) { backward(root, Tensor<T>(value(root).shape(), T{1})); }

  /// Gradient for a named parameter, or zeros when the parameter was never used.
  Tensor<T> param_grad(const std::string& name, const Shape& shape) const {
    auto it = params_.find(name);
    if (it == params_.end() || nodes_[it->second.id].grad.size() == 0) return Tensor<T>(shape);
    return nodes_[it->second.id].grad;
  }

  const std::map<std::string, Var>& params() const noexcept { return params_; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Tensor<T> grad;
    Backward back;
    bool needs_grad = false;
  };

  Var push(Tensor<T> value, bool needs, Backward back) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  Var push_ref(const Tensor<T>* ref) {
    Node n;
    n.ref = ref;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::map<std::string, Var> params_;
};

// ---------------------------------------------------------------------------
// Differentiable primitives. Shapes: matrices are [rows x cols]; bias and gain
// vectors may have any shape whose size matches the column count.

namespace ad {

template <Real T>
Var add(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (A.size() != B.size()) throw ArgumentError("ad::add: size mismatch");
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += B[i];
  return g.custom(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& go) {
    for (Var v : {a, b}) {
      if (!gr.needs_grad(v)) continue;
      auto& d = gr.grad(v);
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i];
    }
  });
}

/// a + alpha * b
template <Real T>
Var add_scaled(Graph<T>& g, Var a, Var b, T alpha) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (A.size() != B.size()) throw ArgumentError("ad::add_scaled: size mismatch");
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += alpha * B[i];
  return g.custom(std::move(out), {a, b}, [a, b, alpha](Graph<T>& gr, const Tensor<T>& go) {
    if (gr.needs_grad(a)) {
      auto& d = gr.grad(a);
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i];
    }
    if (gr.needs_grad(b)) {
      auto& d = gr.grad(b);
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += alpha * go[i];
    }
  });
}

template <Real T>
Var scale(Graph<T>& g, Var a, T c) {
  Tensor<T> out = g.value(a);
  for (auto& v : out.values()) v *= c;
  return g.custom(std::move(out), {a}, [a, c](Graph<T>& gr, const Tensor<T>& go) {
    auto& d = gr.grad(a);
    for (std::size_t i = 0; i < go.size(); ++i) d[i] += c * go[i];
  });
}

template <Real T>
Var mul(Graph<T>& g, Var a, Var b) {
  const auto& A = g.value(a);
  const auto& B = g.value(b);
  if (A.size() != B.size()) throw ArgumentError("ad::mul: size mismatch");
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= B[i];
  return g.custom(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& go) {
    const auto& A = gr.value(a);
    const auto& B = gr.value(b);
    if (gr.needs_grad(a)) {
      auto& d = gr.grad(a);
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i] * B[i];
    }
    if (gr.needs_grad(b)) {
      auto& d = gr.grad(b);
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i] * A[i];
    }
  });
}

/// Elementwise product with a constant of the same size.
template <Real T>
Var mul_const(Graph<T>& g, Var a, const Tensor<T>& c) {
  const auto& A = g.value(a);
  if (A.size() != c.size()) throw ArgumentError("ad::mul_const: size mismatch");
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  return g.custom(std::move(out), {a}, [a, c](Graph<T>& gr, const Tensor<T>& go) {
    auto& d = gr.grad(a);
    for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i] * c[i];
  });
}

template <Real T>
Var add_const(Graph<T>& g, Var a, const Tensor<T>& c) {
  const auto& A = g.value(a);
  if (A.size() != c.size()) throw ArgumentError("ad::add_const: size mismatch");
  Tensor<T> out = A;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  return g.custom(std::move(out), {a}, [a](Graph<T>& gr, const Tensor<T>& go) {
    auto& d = gr.grad(a);
    for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i];
  });
}

/// Scales row r of a [rows x cols] matrix by mask[r].
template <Real T>
Var mask_rows(Graph<T>& g, Var a, const std::vector<T>& mask) {
  const auto& A = g.value(a);
  const std::size_t rows = A.dim(0), cols = A.size() / rows;
  if (mask.size() != rows) throw ArgumentError("ad::mask_rows: mask length mismatch");
  Tensor<T> out = A;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] *= mask[r];
  return g.custom(std::move(out), {a}, [a, mask, rows, cols](Graph<T>& gr, const Tensor<T>& go) {
    auto& d = gr.grad(a);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += go[r * cols + c] * mask[r];
  });
}

/// x [L x in] * W^T + b, with W stored [out x in].
template <Real T>
Var linear(Graph<T>& g, Var x, Var w, Var b) {
  const auto& X = g.value(x);
  const auto& W = g.value(w);
  const std::size_t L = X.dim(0), in = X.size() / L, out = W.dim(0);
  if (W.size() != out * in) {
    throw ArgumentError("ad::linear: weight " + shape_str(W.shape()) + " incompatible with input " +
                        shape_str(X.shape()));
  }
  const bool has_b = b.valid();
  if (has_b && g.value(b).size() != out) throw ArgumentError("ad::linear: bias size mismatch");
  Tensor<T> Y({L, out});
  for (std::size_t r = 0; r < L; ++r) {
    const T* xr = X.data() + r * in;
    T* yr = Y.data() + r * out;
    for (std::size_t o = 0; o < out; ++o) yr[o] = dot(W.data() + o * in, xr, in);
    if (has_b) {
      const T* bb = g.value(b).data();
      for (std::size_t o = 0; o < out; ++o) yr[o] += bb[o];
    }
  }
  std::vector<Var> ins{x, w};
  if (has_b) ins.push_back(b);
  return g.custom(std::move(Y), ins, [x, w, b, has_b, L, in, out](Graph<T>& gr, const Tensor<T>& go) {
    const auto& X = gr.value(x);
    const auto& W = gr.value(w);
    if (gr.needs_grad(x)) {
      auto& dx = gr.grad(x);
      for (std::size_t r = 0; r < L; ++r)
        for (std::size_t o = 0; o < out; ++o)
          axpy(go[r * out + o], W.data() + o * in, dx.data() + r * in, in);
    }
    if (gr.needs_grad(w)) {
      auto& dw = gr.grad(w);
      for (std::size_t r = 0; r < L; ++r)
        for (std::size_t o = 0; o < out; ++o)
          axpy(go[r * out + o], X.data() + r * in, dw.data() + o * in, in);
    }
    if (has_b && gr.needs_grad(b)) {
      auto& db = gr.grad(b);
      for (std::size_t r = 0; r < L; ++r)
        for (std::size_t o = 0; o < out; ++o) db[o] += go[r * out + o];
    }
  });
}

template <Real T>
Var linear(Graph<T>& g, Var x, Var w) {
  return linear(g, x, w, Var{});
}

/// y = x / rms(x) * gain, per row.
template <Real T>
Var rmsnorm(Graph<T>& g, Var x, Var gain, T eps = T(1e-6)) {
  const auto& X = g.value(x);
  const std::size_t L = X.dim(0), D = X.size() / L;
  const auto& G = g.value(gain);
  if (G.size() != D) throw ArgumentError("ad::rmsnorm: gain size mismatch");
  Tensor<T> Y({L, D});
  std::vector<T> inv(L);
  for (std::size_t r = 0; r < L; ++r) {
    const T* xr = X.data() + r * D;
    const T ms = dot(xr, xr, D) / static_cast<T>(D);
    inv[r] = T{1} / std::sqrt(ms + eps);
    for (std::size_t c = 0; c < D; ++c) Y[r * D + c] = xr[c] * inv[r] * G[c];
  }
  return g.custom(std::move(Y), {x, gain}, [x, gain, inv, L, D](Graph<T>& gr, const Tensor<T>& go) {
    const auto& X = gr.value(x);
    const auto& G = gr.value(gain);
    if (gr.needs_grad(gain)) {
      auto& dg = gr.grad(gain);
      for (std::size_t r = 0; r < L; ++r)
        for (std::size_t c = 0; c < D; ++c) dg[c] += go[r * D + c] * X[r * D + c] * inv[r];
    }
    if (gr.needs_grad(x)) {
      auto& dx = gr.grad(x);
      for (std::size_t r = 0; r < L; ++r) {
        // d/dx_k of x_c * s * g_c with s = (mean x^2 + eps)^-1/2
        T proj = 0;
        for (std::size_t c = 0; c < D; ++c) proj += go[r * D + c] * G[c] * X[r * D + c];
        const T s = inv[r];
        const T coef = proj * s * s * s / static_cast<T>(D);
        for (std::size_t c = 0; c < D; ++c)
          dx[r * D + c] += go[r * D + c] * G[c] * s - coef * X[r * D + c];
      }
    }
  });
}

template <Real T>
Var silu(Graph<T>& g, Var x) {
  const auto& X = g.value(x);
  Tensor<T> Y(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) Y[i] = X[i] * sigmoid(X[i]);
  return g.custom(std::move(Y), {x}, [x](Graph<T>& gr, const Tensor<T>& go) {
    const auto& X = gr.value(x);
    auto& d = gr.grad(x);
    for (std::size_t i = 0; i < X.size(); ++i) {
      const T s = sigmoid(X[i]);
      d[i] += go[i] * (s + X[i] * s * (T{1} - s));
    }
  });
}

template <Real T>
Var softplus(Graph<T>& g, Var x) {
  const auto& X = g.value(x);
  Tensor<T> Y(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) Y[i] = num::softplus(X[i]);
  return g.custom(std::move(Y), {x}, [x](Graph<T>& gr, const Tensor<T>& go) {
    const auto& X = gr.value(x);
    auto& d = gr.grad(x);
    for (std::size_t i = 0; i < X.size(); ++i) d[i] += go[i] * sigmoid(X[i]);
  });
}

/// Columns [begin, begin + count) of a [rows x cols] matrix.
template <Real T>
Var cols(Graph<T>& g, Var x, std::size_t begin, std::size_t count) {
  const auto& X = g.value(x);
  const std::size_t L = X.dim(0), C = X.size() / L;
  if (begin + count > C) throw ArgumentError("ad::cols: column range out of bounds");
  Tensor<T> Y({L, count});
  for (std::size_t r = 0; r < L; ++r)
    for (std::size_t c = 0; c < count; ++c) Y[r * count + c] = X[r * C + begin + c];
  return g.custom(std::move(Y), {x}, [x, L, C, begin, count](Graph<T>& gr, const Tensor<T>& go) {
    auto& d = gr.grad(x);
    for (std::size_t r = 0; r < L; ++r)
      for (std::size_t c = 0; c < count; ++c) d[r * C + begin + c] += go[r * count + c];
  });
}

/// out row i = x row idx[i]. Indices may repeat; the backward pass scatter-adds.
template <Real T>
Var gather_rows(Graph<T>& g, Var x, const std::vector<std::size_t>& idx) {
  const auto& X = g.value(x);
  const std::size_t R = X.dim(0), C = X.size() / R;
  Tensor<T> Y({idx.size(), C});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= R) throw ArgumentError("ad::gather_rows: index out of range");
    std::copy_n(X.data() + idx[i] * C, C, Y.data() + i * C);
  }
  return g.custom(std::move(Y), {x}, [x, idx, C](Graph<T>& gr, const Tensor<T>& go) {
    auto& d = gr.grad(x);
    for (std::size_t i = 0; i < idx.size(); ++i) axpy(T{1}, go.data() + i * C, d.data() + idx[i] * C, C);
  });
}

/// [rows x cols] matrix with row idx[i] = x row i and zeros elsewhere.
template <Real T>
Var scatter_rows(Graph<T>& g, Var x, const std::vector<std::size_t>& idx, std::size_t rows) {
  const auto& X = g.value(x);
  const std::size_t C = X.size() / X.dim(0);
  if (idx.size() != X.dim(0)) throw ArgumentError("ad::scatter_rows: index count mismatch");
  Tensor<T> Y({rows, C});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows) throw ArgumentError("ad::scatter_rows: index out of range");
    axpy(T{1}, X.data() + i * C, Y.data() + idx[i] * C, C);
  }
  return g.custom(std::move(Y), {x}, [x, idx, C](Graph<T>& gr, const Tensor<T>& go) {
    auto& d = gr.grad(x);
    for (std::size_t i = 0; i < idx.size(); ++i) axpy(T{1}, go.data() + idx[i] * C, d.data() + i * C, C);
  });
}

template <Real T>
Var concat_rows(Graph<T>& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw ArgumentError("ad::concat_rows: no inputs");
  const std::size_t C = g.value(parts[0]).size() / g.value(parts[0]).dim(0);
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (Var p : parts) {
    const auto& P = g.value(p);
    if (P.size() % C != 0 || P.size() / P.dim(0) != C) {
      throw ArgumentError("ad::concat_rows: column count mismatch");
    }
    offsets.push_back(rows);
    rows += P.size() / C;
  }
  Tensor<T> Y({rows, C});
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& P = g.value(parts[k]);
    std::copy_n(P.data(), P.size(), Y.data() + offsets[k] * C);
  }
  return g.custom(std::move(Y), parts, [parts, offsets, C](Graph<T>& gr, const Tensor<T>& go) {
    for (std::size_t k = 0; k < parts.size(); ++k) {
      if (!gr.needs_grad(parts[k])) continue;
      auto& d = gr.grad(parts[k]);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += go[offsets[k] * C + i];
    }
  });
}

/// Reshape a leaf of any shape into a [rows x size/rows] matrix.
template <Real T>
Var as_matrix(Graph<T>& g, Var x, std::size_t rows) {
  Tensor<T> Y = g.value(x);
  if (Y.size() % rows != 0) throw ArgumentError("ad::as_matrix: rows do not divide size");
  Y.reshape({rows, Y.size() / rows});
  return g.custom(std::move(Y), {x}, [x](Graph<T>& gr, const Tensor<T>& go) {
    auto& d = gr.grad(x);
    for (std::size_t i = 0; i < go.size(); ++i) d[i] += go[i];
  });
}

template <Real T>
Var mean_of(Graph<T>& g, const std::vector<Var>& xs) {
  if (xs.empty()) throw ArgumentError("ad::mean_of: no inputs");
  Tensor<T> Y = g.value(xs[0]);
  for (std::size_t k = 1; k < xs.size(); ++k) {
    const auto& X = g.value(xs[k]);
    if (X.size() != Y.size()) throw ArgumentError("ad::mean_of: size mismatch");
    for (std::size_t i = 0; i < Y.size(); ++i) Y[i] += X[i];
  }
  const T inv = T{1} / static_cast<T>(xs.size());
  for (auto& v : Y.values()) v *= inv;
  return g.custom(std::move(Y), xs, [xs, inv](Graph<T>& gr, const Tensor<T>& go) {
    for (Var x : xs) {
      if (!gr.needs_grad(x)) continue;
      auto& d = gr.grad(x);
      for (std::size_t i = 0; i < go.size(); ++i) d[i] += inv * go[i];
    }
  });
}

/// Scalar sum_k c_k * x_k of scalar nodes.
template <Real T>
Var weighted_sum(Graph<T>& g, const std::vector<Var>& xs, const std::vector<T>& c) {
  if (xs.size() != c.size()) throw ArgumentError("ad::weighted_sum: coefficient count mismatch");
  T acc = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) acc += c[k] * g.value(xs[k])[0];
  return g.custom(Tensor<T>({1, 1}, acc), xs, [xs, c](Graph<T>& gr, const Tensor<T>& go) {
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (!gr.needs_grad(xs[k])) continue;
      gr.grad(xs[k])[0] += c[k] * go[0];
    }
  });
}

template <Real T>
Var mean_all(Graph<T>& g, Var x) {
  const auto& X = g.value(x);
  T acc = 0;
  for (auto v : X.values()) acc += v;
  const T inv = T{1} / static_cast<T>(X.size());
  return g.custom(Tensor<T>({1, 1}, acc * inv), {x}, [x, inv](Graph<T>& gr, const Tensor<T>& go) {
    auto& d = gr.grad(x);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += inv * go[0];
  });
}

/// mean((x - target)^2) over all elements.
template <Real T>
Var mse(Graph<T>& g, Var x, const Tensor<T>& target) {
  const auto& X = g.value(x);
  if (X.size() != target.size()) throw ArgumentError("ad::mse: size mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < X.size(); ++i) {
    const T d = X[i] - target[i];
    acc += d * d;
  }
  const T inv = T{1} / static_cast<T>(X.size());
  return g.custom(Tensor<T>({1, 1}, acc * inv), {x}, [x, target, inv](Graph<T>& gr, const Tensor<T>& go) {
    const auto& X = gr.value(x);
    auto& d = gr.grad(x);
    for (std::size_t i = 0; i < X.size(); ++i) d[i] += T{2} * inv * (X[i] - target[i]) * go[0];
  });
}

/// Mean token cross-entropy of logits [L x V] against ids.
template <Real T>
Var cross_entropy(Graph<T>& g, Var logits, const std::vector<std::size_t>& ids) {
  const auto& Z = g.value(logits);
  const std::size_t L = Z.dim(0), V = Z.size() / L;
  if (ids.size() != L) throw ArgumentError("ad::cross_entropy: reference length mismatch");
  Tensor<T> probs = Z;
  T acc = 0;
  for (std::size_t r = 0; r < L; ++r) {
    if (ids[r] >= V) throw ArgumentError("ad::cross_entropy: id out of range");
    std::span<T> row(probs.data() + r * V, V);
    log_softmax_inplace(row);
    acc -= row[ids[r]];
    for (auto& v : row) v = std::exp(v);
  }
  const T inv = T{1} / static_cast<T>(L);
  return g.custom(Tensor<T>({1, 1}, acc * inv), {logits},
                  [logits, ids, probs, L, V, inv](Graph<T>& gr, const Tensor<T>& go) {
                    auto& d = gr.grad(logits);
                    for (std::size_t r = 0; r < L; ++r) {
                      for (std::size_t v = 0; v < V; ++v) d[r * V + v] += inv * go[0] * probs[r * V + v];
                      d[r * V + ids[r]] -= inv * go[0];
                    }
                  });
}

/// 0.5 * sum_d (mu^2 + sigma^2 - 1 - 2 log sigma), averaged over rows.
template <Real T>
Var kl_standard_normal(Graph<T>& g, Var mu, Var sigma) {
  const auto& M = g.value(mu);
  const auto& S = g.value(sigma);
  if (M.size() != S.size()) throw ArgumentError("ad::kl: size mismatch");
  const std::size_t L = M.dim(0);
  T acc = 0;
  for (std::size_t i = 0; i < M.size(); ++i) {
    if (!(S[i] > T{0})) throw ArgumentError("ad::kl: sigma must be > 0");
    acc += M[i] * M[i] + S[i] * S[i] - T{1} - T{2} * std::log(S[i]);
  }
  const T inv = T{1} / static_cast<T>(L);
  return g.custom(Tensor<T>({1, 1}, T(0.5) * acc * inv), {mu, sigma},
                  [mu, sigma, inv](Graph<T>& gr, const Tensor<T>& go) {
                    const auto& M = gr.value(mu);
                    const auto& S = gr.value(sigma);
                    if (gr.needs_grad(mu)) {
                      auto& d = gr.grad(mu);
                      for (std::size_t i = 0; i < M.size(); ++i) d[i] += inv * go[0] * M[i];
                    }
                    if (gr.needs_grad(sigma)) {
                      auto& d = gr.grad(sigma);
                      for (std::size_t i = 0; i < S.size(); ++i) d[i] += inv * go[0] * (S[i] - T{1} / S[i]);
                    }
                  });
}

/// Depthwise causal convolution along rows: y[n,e] = b[e] + sum_k w[e,k] x[n-K+1+k, e].
template <Real T>
Var causal_conv(Graph<T>& g, Var x, Var w, Var b) {
  const auto& X = g.value(x);
  const auto& W = g.value(w);
  const auto& B = g.value(b);
  const std::size_t L = X.dim(0), E = X.size() / L, K = W.size() / E;
  if (W.size() != E * K || B.size() != E) throw ArgumentError("ad::causal_conv: parameter shape mismatch");
  Tensor<T> Y({L, E});
  for (std::size_t n = 0; n < L; ++n) {
    for (std::size_t e = 0; e < E; ++e) {
      T acc = B[e];
      for (std::size_t k = 0; k < K; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(n + k) - static_cast<std::ptrdiff_t>(K - 1);
        if (src >= 0) acc += W[e * K + k] * X[static_cast<std::size_t>(src) * E + e];
      }
      Y[n * E + e] = acc;
    }
  }
  return g.custom(std::move(Y), {x, w, b}, [x, w, b, L, E, K](Graph<T>& gr, const Tensor<T>& go) {
    const auto& X = gr.value(x);
    const auto& W = gr.value(w);
    T* dx = gr.needs_grad(x) ? gr.grad(x).data() : nullptr;
    T* dw = gr.needs_grad(w) ? gr.grad(w).data() : nullptr;
    T* db = gr.needs_grad(b) ? gr.grad(b).data() : nullptr;
    for (std::size_t n = 0; n < L; ++n) {
      for (std::size_t e = 0; e < E; ++e) {
        const T d = go[n * E + e];
        if (db) db[e] += d;
        for (std::size_t k = 0; k < K; ++k) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(n + k) - static_cast<std::ptrdiff_t>(K - 1);
          if (src < 0) continue;
          const std::size_t s = static_cast<std::size_t>(src);
          if (dw) dw[e * K + k] += d * X[s * E + e];
          if (dx) dx[s * E + e] += d * W[e * K + k];
        }
      }
    }
  });
}

}  // namespace ad
}  // namespace mdm::num
