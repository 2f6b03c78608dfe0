#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "mdm/numerics/container.hpp"
#include "mdm/numerics/gradcheck.hpp"
#include "mdm/numerics/graph.hpp"
#include "mdm/numerics/ops.hpp"
#include "mdm/numerics/rng.hpp"

using namespace mdm;
using namespace mdm::num;

TEST(Tensor, ShapeMustMatchElementCount) {
  EXPECT_THROW(Tensor<double>({2, 3}, std::vector<double>(5)), ArgumentError);
  Tensor<float> t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(Tensor<float>::precision(), Precision::f32);
  EXPECT_EQ(Tensor<double>::precision(), Precision::f64);
  EXPECT_THROW(t.reshape({4, 2}), ArgumentError);
}

TEST(Rng, KnownSplitMixValues) {
  // Reference values of the SplitMix64 finalizer from the published algorithm (seed 0 stream).
  Rng r(0);
  EXPECT_EQ(r.next_u64(), 0xE220A8397B1DCDAFULL);
  EXPECT_EQ(r.next_u64(), 0x6E789E6AA1B965F4ULL);
  EXPECT_EQ(r.next_u64(), 0x06C45D188009454FULL);
}

TEST(Rng, UniformInsideOpenInterval) {
  Rng r(9);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GT(u, 0.0);
    ASSERT_LT(u, 1.0);
  }
}

TEST(Rng, ForkDoesNotAdvanceParent) {
  Rng a(5);
  a.next_u64();
  const auto before = a;
  Rng c1 = a.fork(3), c2 = a.fork(3), c3 = a.fork(4);
  EXPECT_EQ(a, before);
  EXPECT_EQ(c1.next_u64(), c2.next_u64());
  EXPECT_NE(c1.next_u64(), c3.next_u64());
}

TEST(GaussianSample, ZeroStdGivesMeanExactly) {
  Rng r(1);
  Tensor<double> mean({3}, std::vector<double>{1.5, -2.0, 0.25});
  auto out = gaussian_sample(r, {3}, mean, Tensor<double>::scalar(0.0));
  EXPECT_TRUE(bit_equal(out, mean));
}

TEST(GaussianSample, SameSeedSameTensor) {
  Rng a(42), b(42);
  auto x = gaussian_sample(a, {64}, Tensor<float>::scalar(0), Tensor<float>::scalar(1));
  auto y = gaussian_sample(b, {64}, Tensor<float>::scalar(0), Tensor<float>::scalar(1));
  EXPECT_TRUE(bit_equal(x, y));
}

TEST(GaussianSample, MomentsOfStandardNormal) {
  Rng r(2024);
  auto x = gaussian_sample(r, {100000}, Tensor<double>::scalar(0), Tensor<double>::scalar(1));
  double m = 0, v = 0;
  for (auto e : x.values()) m += e;
  m /= x.size();
  for (auto e : x.values()) v += (e - m) * (e - m);
  v /= (x.size() - 1);
  EXPECT_NEAR(m, 0.0, 0.02);
  EXPECT_NEAR(v, 1.0, 0.05);
}

TEST(GaussianSample, Errors) {
  Rng r(0);
  EXPECT_THROW(gaussian_sample(r, {2}, Tensor<double>::scalar(0), Tensor<double>::scalar(-1)), ArgumentError);
  EXPECT_THROW(gaussian_sample(r, {2}, Tensor<double>({3}), Tensor<double>::scalar(1)), ArgumentError);
}

TEST(FiniteDiff, Square) {
  auto g = finite_diff_grad([](const Tensor<double>& x) { return x[0] * x[0]; },
                            Tensor<double>::scalar(3.0), 1e-5);
  EXPECT_NEAR(g[0], 6.0, 1e-8);
}

TEST(FiniteDiff, ConstantIsZero) {
  auto g = finite_diff_grad([](const Tensor<double>&) { return 4.0; }, Tensor<double>({5}, 1.0));
  for (auto v : g.values()) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDiff, CubicPolynomialsMatchSymbolic) {
  Rng r(77);
  for (int trial = 0; trial < 50; ++trial) {
    const double c0 = r.normal(), c1 = r.normal(), c2 = r.normal(), c3 = r.normal();
    const double x0 = 2.0 * r.normal();
    auto f = [&](const Tensor<double>& x) {
      const double v = x[0];
      return c0 + c1 * v + c2 * v * v + c3 * v * v * v;
    };
    const double exact = c1 + 2 * c2 * x0 + 3 * c3 * x0 * x0;
    auto g = finite_diff_grad(f, Tensor<double>::scalar(x0), 1e-5);
    EXPECT_LT(std::abs(g[0] - exact) / std::max(std::abs(exact), 1.0), 1e-7);
  }
}

TEST(FiniteDiff, FivePointExactOnQuartics) {
  Rng r(78);
  for (int trial = 0; trial < 50; ++trial) {
    double c[5];
    for (double& v : c) v = r.normal();
    const double x0 = 2.0 * r.normal();
    auto f = [&](const Tensor<double>& x) {
      const double v = x[0];
      return c[0] + v * (c[1] + v * (c[2] + v * (c[3] + v * c[4])));
    };
    const double exact = c[1] + x0 * (2 * c[2] + x0 * (3 * c[3] + x0 * 4 * c[4]));
    auto g = finite_diff_grad5(f, Tensor<double>::scalar(x0));
    EXPECT_LT(std::abs(g[0] - exact) / std::max(std::abs(exact), 1.0), 1e-9);
  }
}

TEST(FiniteDiff, NonFiniteValueNamesCoordinate) {
  auto f = [](const Tensor<double>& x) { return x[2] > 1.000001 ? std::log(-1.0) : 0.0; };
  try {
    finite_diff_grad(f, Tensor<double>({4}, 1.0));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 2"), std::string::npos);
  }
  EXPECT_THROW(finite_diff_grad(f, Tensor<double>({1}), 0.0), ArgumentError);
}

TEST(Softmax, ConstantVectorIsUniform) {
  auto s = softmax(Tensor<double>({4}, 3.7), 0);
  for (auto v : s.values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, ShiftInvarianceAndNormalization) {
  Rng r(3);
  auto x = standard_normal<double>(r, {6, 9});
  Tensor<double> y = x;
  for (auto& v : y.values()) v += 123.456;
  auto a = softmax(x, 1), b = softmax(y, 1);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NEAR(a[i], b[i], 1e-12);
    EXPECT_GT(a[i], 0.0);
    EXPECT_LE(a[i], 1.0);
  }
  for (std::size_t r0 = 0; r0 < 6; ++r0) {
    double s = 0;
    for (std::size_t c = 0; c < 9; ++c) s += a.at(r0, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  auto col = softmax(x, 0);
  for (std::size_t c = 0; c < 9; ++c) {
    double s = 0;
    for (std::size_t r0 = 0; r0 < 6; ++r0) s += col.at(r0, c);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, LargeLogitsStayFinite) {
  auto s = softmax(Tensor<double>({3}, std::vector<double>{1000.0, 0.0, -1000.0}), 0);
  EXPECT_TRUE(s.all_finite());
  EXPECT_NEAR(s[0], 1.0, 1e-12);
}

TEST(Ops, ExpOfZeroDiagonalIsOne) {
  Tensor<double> delta({4}, 0.3), a({4}, 0.0), da({4});
  for (std::size_t i = 0; i < 4; ++i) da[i] = delta[i] * a[i];
  auto e = elementwise_exp(da);
  for (auto v : e.values()) EXPECT_EQ(v, 1.0);
}

TEST(Ops, ExpOverflowRejected) {
  EXPECT_THROW(elementwise_exp(Tensor<double>({1}, 1e5)), NumericError);
}

TEST(Ops, MatmulAndReduceSum) {
  Tensor<double> a({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor<double> b({3, 2}, std::vector<double>{7, 8, 9, 10, 11, 12});
  auto c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 2}));
  EXPECT_EQ(c.at(0, 0), 58);
  EXPECT_EQ(c.at(1, 1), 154);
  EXPECT_THROW(matmul(a, a), ArgumentError);
  auto s0 = reduce_sum(a, 0);
  EXPECT_EQ(s0.storage(), (std::vector<double>{5, 7, 9}));
  auto s1 = reduce_sum(a, 1);
  EXPECT_EQ(s1.storage(), (std::vector<double>{6, 15}));
  EXPECT_THROW(reduce_sum(a, 2), ArgumentError);
}

TEST(Ops, SoftplusStable) {
  EXPECT_NEAR(softplus(0.0), std::log(2.0), 1e-15);
  EXPECT_DOUBLE_EQ(softplus(800.0), 800.0);
  EXPECT_GT(softplus(-800.0), -1.0);
  EXPECT_NEAR(inverse_softplus(softplus(0.37)), 0.37, 1e-14);
}

// ---- container

TEST(Container, RoundTripBitExact) {
  Rng r(11);
  Container c;
  auto f = standard_normal<float>(r, {3, 4});
  auto d = standard_normal<double>(r, {2, 2, 2});
  d[0] = -0.0;
  c.put("a/f", f);
  c.put("b/d", d);
  c.put_bytes("blob", std::string("hi\0there", 8));
  std::stringstream ss;
  c.write(ss);
  auto back = Container::read(ss);
  EXPECT_TRUE(bit_equal(back.get<float>("a/f"), f));
  EXPECT_TRUE(bit_equal(back.get<double>("b/d"), d));
  EXPECT_EQ(back.get_bytes("blob"), std::string("hi\0there", 8));
  EXPECT_THROW(back.get<double>("a/f"), FormatError);
  EXPECT_THROW(back.get<float>("missing"), FormatError);
}

TEST(Container, LittleEndianLayout) {
  Container c;
  c.put("x", Tensor<float>({1}, 1.0f));
  std::stringstream ss;
  c.write(ss);
  const std::string b = ss.str();
  ASSERT_EQ(b.substr(0, 4), "MDMT");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 1u);  // version
  EXPECT_EQ(static_cast<unsigned char>(b[8]), 1u);  // count
  // name_len(4) name(1) code(1) rank(4) dim(8) payload(4)
  EXPECT_EQ(b.size(), 12u + 4 + 1 + 1 + 4 + 8 + 4);
  EXPECT_EQ(static_cast<unsigned char>(b[b.size() - 1]), 0x3Fu);
  EXPECT_EQ(static_cast<unsigned char>(b[b.size() - 2]), 0x80u);
}

TEST(Container, CorruptInputsRejected) {
  Container c;
  c.put("x", Tensor<double>({4}, 2.0));
  std::stringstream ss;
  c.write(ss);
  const std::string good = ss.str();

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  std::stringstream s1(bad_magic);
  EXPECT_THROW(Container::read(s1), FormatError);

  std::string bad_version = good;
  bad_version[4] = 9;
  std::stringstream s2(bad_version);
  EXPECT_THROW(Container::read(s2), FormatError);

  for (std::size_t cut : {std::size_t{3}, std::size_t{10}, good.size() - 1}) {
    std::stringstream s3(good.substr(0, cut));
    EXPECT_THROW(Container::read(s3), FormatError) << "cut at " << cut;
  }
}

// ---- tape primitives against finite differences

namespace {

using Build = std::function<Var(Graph<double>&, const Tensor<double>&)>;

// Gradient of sum(w_out * node) w.r.t. one parameter, tape vs central differences.
double check_op(const Tensor<double>& p0, const Build& build, std::uint64_t seed = 1) {
  Graph<double> probe;
  Var out0 = build(probe, p0);
  Rng r(seed);
  auto wout = standard_normal<double>(r, probe.value(out0).shape());
  auto f = [&](const Tensor<double>& p) {
    Graph<double> g;
    Var o = build(g, p);
    double s = 0;
    for (std::size_t i = 0; i < wout.size(); ++i) s += wout[i] * g.value(o)[i];
    return s;
  };
  Graph<double> g;
  Var o = build(g, p0);
  g.backward(o, wout);
  auto analytic = g.param_grad("p", p0.shape());
  auto numeric = finite_diff_grad(f, p0, 1e-5);
  return max_relative_error(analytic, numeric);
}

}  // namespace

TEST(Tape, PrimitiveGradients) {
  Rng r(5);
  auto X = standard_normal<double>(r, {5, 4});
  auto W = standard_normal<double>(r, {3, 4});
  auto B = standard_normal<double>(r, {3});
  auto K = standard_normal<double>(r, {4, 3});
  auto M = standard_normal<double>(r, {5, 4});
  auto S = standard_normal<double>(r, {5, 4});
  for (auto& v : S.values()) v = std::abs(v) + 0.3;

  EXPECT_LT(check_op(X, [&](auto& g, auto& p) {
    return ad::linear(g, g.param("p", p), g.constant(W), g.constant(B)); }), 1e-7);
  EXPECT_LT(check_op(W, [&](auto& g, auto& p) {
    return ad::linear(g, g.constant(X), g.param("p", p), g.constant(B)); }), 1e-7);
  EXPECT_LT(check_op(B, [&](auto& g, auto& p) {
    return ad::linear(g, g.constant(X), g.constant(W), g.param("p", p)); }), 1e-7);
  EXPECT_LT(check_op(X, [&](auto& g, auto& p) {
    return ad::rmsnorm(g, g.param("p", p), g.constant(Tensor<double>({4}, 1.3))); }), 1e-6);
  EXPECT_LT(check_op(X, [&](auto& g, auto& p) { return ad::silu(g, g.param("p", p)); }), 1e-7);
  EXPECT_LT(check_op(X, [&](auto& g, auto& p) { return ad::softplus(g, g.param("p", p)); }), 1e-7);
  EXPECT_LT(check_op(X, [&](auto& g, auto& p) {
    Var v = g.param("p", p);
    return ad::mul(g, v, ad::silu(g, v)); }), 1e-7);
  EXPECT_LT(check_op(X, [&](auto& g, auto& p) {
    return ad::causal_conv(g, g.param("p", p), g.constant(K), g.constant(Tensor<double>({4}, 0.1))); }), 1e-7);
  EXPECT_LT(check_op(K, [&](auto& g, auto& p) {
    return ad::causal_conv(g, g.constant(X), g.param("p", p), g.constant(Tensor<double>({4}, 0.1))); }), 1e-7);
  EXPECT_LT(check_op(X, [&](auto& g, auto& p) {
    Var v = g.param("p", p);
    Var a = ad::gather_rows(g, v, {4, 0, 0, 2});
    Var b = ad::scatter_rows(g, a, {1, 3, 5, 0}, 6);
    return ad::concat_rows(g, {b, v}); }), 1e-7);
  EXPECT_LT(check_op(X, [&](auto& g, auto& p) { return ad::cols(g, g.param("p", p), 1, 2); }), 1e-7);
  EXPECT_LT(check_op(X, [&](auto& g, auto& p) {
    return ad::mse(g, g.param("p", p), M); }), 1e-7);
  EXPECT_LT(check_op(X, [&](auto& g, auto& p) {
    return ad::cross_entropy(g, g.param("p", p), {0, 3, 1, 1, 2}); }), 1e-7);
  EXPECT_LT(check_op(X, [&](auto& g, auto& p) {
    return ad::kl_standard_normal(g, g.param("p", p), g.constant(S)); }), 1e-7);
  EXPECT_LT(check_op(S, [&](auto& g, auto& p) {
    return ad::kl_standard_normal(g, g.constant(X), g.param("p", p)); }), 1e-7);
  EXPECT_LT(check_op(X, [&](auto& g, auto& p) {
    Var v = g.param("p", p);
    Var m = ad::mean_of(g, {v, ad::scale(g, v, 3.0), ad::add_scaled(g, v, v, -0.5)});
    return ad::mask_rows(g, ad::mul_const(g, m, S), {1, 0, 1, 1, 0}); }), 1e-7);
}

TEST(Tape, ParamLeafIsShared) {
  Graph<double> g;
  Tensor<double> p({1, 2}, 1.0);
  Var a = g.param("w", p), b = g.param("w", p);
  EXPECT_EQ(a.id, b.id);
  Var s = ad::mean_all(g, ad::add(g, a, b));
  g.backward(s);
  auto d = g.param_grad("w", p.shape());
  EXPECT_DOUBLE_EQ(d[0], 1.0);
  EXPECT_DOUBLE_EQ(d[1], 1.0);
}
