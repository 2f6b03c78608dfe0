#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>

#include "mdm/numerics/tensor.hpp"

namespace mdm::num {

template <Real T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T acc = 0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <Real T>
inline void axpy(T alpha, const T* x, T* y, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <Real T>
inline T softplus(T x) {
  // log(1 + e^x) without overflow
  return x > T{0} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <Real T>
inline T sigmoid(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <Real T>
inline T inverse_softplus(T y) {
  if (!(y > T{0})) throw ArgumentError("inverse_softplus: argument must be > 0");
  return y > T{20} ? y : std::log(std::expm1(y));
}

template <Real T>
Tensor<T> elementwise_exp(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::exp(x[i]);
  require_finite(out, "elementwise_exp");
  return out;
}

/// [m x k] * [k x n]
template <Real T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ArgumentError("matmul: cannot multiply " + shape_str(a.shape()) + " by " +
                        shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T* o = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) axpy(a.at(i, p), b.data() + p * n, o, n);
  }
  require_finite(out, "matmul");
  return out;
}

/// Sum over one axis; the axis is removed (rank-1 input gives shape [1]).
template <Real T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ArgumentError("reduce_sum: axis out of range");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Shape os;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) os.push_back(s[i]);
  if (os.empty()) os.push_back(1);
  Tensor<T> out(os);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x[(o * len + l) * inner + i];
  require_finite(out, "reduce_sum");
  return out;
}

template <Real T>
void softmax_inplace(std::span<T> v) {
  if (v.empty()) return;
  const T mx = *std::max_element(v.begin(), v.end());
  T z = 0;
  for (auto& e : v) {
    e = std::exp(e - mx);
    z += e;
  }
  for (auto& e : v) e /= z;
}

template <Real T>
void log_softmax_inplace(std::span<T> v) {
  if (v.empty()) return;
  const T mx = *std::max_element(v.begin(), v.end());
  T z = 0;
  for (auto e : v) z += std::exp(e - mx);
  const T lz = mx + std::log(z);
  for (auto& e : v) e -= lz;
}

template <Real T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ArgumentError("softmax: axis out of range");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw NumericError("softmax: non-finite input");
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Tensor<T> out = x;
  std::vector<T> buf(len);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      for (std::size_t l = 0; l < len; ++l) buf[l] = x[(o * len + l) * inner + i];
      softmax_inplace<T>(buf);
      for (std::size_t l = 0; l < len; ++l) out[(o * len + l) * inner + i] = buf[l];
    }
  }
  return out;
}

}  // namespace mdm::num
