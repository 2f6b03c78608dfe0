#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mdm/diffusion/schedule.hpp"
#include "mdm/diffusion/score.hpp"
#include "mdm/diffusion/solver.hpp"
#include "mdm/numerics/gradcheck.hpp"
#include "mdm/numerics/rng.hpp"

using namespace mdm;
using namespace mdm::diffusion;
using num::Tensor;

TEST(Schedule, SingleStep) {
  auto s = build_schedule(1, 0.5, 0.5);
  ASSERT_EQ(s.alpha_bars.size(), 1u);
  EXPECT_DOUBLE_EQ(s.alpha_bars[0], 0.5);
}

TEST(Schedule, LinearMatchesCumulativeProduct) {
  auto s = default_schedule();
  ASSERT_EQ(s.T, 1000u);
  double prod = 1.0;
  for (int k = 1; k <= 1000; ++k) {
    const double beta = 1e-4 + (0.02 - 1e-4) * (k - 1) / 999.0;
    prod *= 1.0 - beta;
  }
  EXPECT_NEAR(s.alpha_bar(1000), prod, 1e-15);
  EXPECT_DOUBLE_EQ(s.betas.front(), 1e-4);
  EXPECT_DOUBLE_EQ(s.betas.back(), 0.02);
}

TEST(Schedule, StrictlyDecreasing) {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    auto s = build_schedule(1000, 1e-4, kind == ScheduleKind::linear ? 0.02 : 0.999, kind);
    for (std::size_t t = 1; t <= s.T; ++t) {
      EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
      EXPECT_GT(s.alpha_bar(t), 0.0);
      EXPECT_GT(s.betas[t - 1], 0.0);
      EXPECT_LT(s.betas[t - 1], 1.0);
    }
  }
}

TEST(Schedule, RejectsBadBounds) {
  EXPECT_THROW(build_schedule(0, 1e-4, 0.02), ArgumentError);
  EXPECT_THROW(build_schedule(10, 0.0, 0.02), ArgumentError);
  EXPECT_THROW(build_schedule(10, 0.03, 0.02), ArgumentError);
  EXPECT_THROW(build_schedule(10, 1e-4, 1.0), ArgumentError);
}

TEST(Schedule, ContinuousTimeAndInverse) {
  auto s = default_schedule();
  EXPECT_DOUBLE_EQ(s.alpha_bar_at(0.0), 1.0);
  EXPECT_DOUBLE_EQ(s.alpha_bar_at(37.0), s.alpha_bar(37));
  EXPECT_LT(s.alpha_bar_at(37.5), s.alpha_bar(37));
  EXPECT_GT(s.alpha_bar_at(37.5), s.alpha_bar(38));
  for (double t : {0.25, 1.0, 13.7, 500.0, 999.9}) {
    EXPECT_NEAR(s.time_for_alpha_bar(s.alpha_bar_at(t)), t, 1e-9);
    EXPECT_NEAR(s.time_for_sigma(s.sigma_at(t)), t, 1e-7);
  }
  EXPECT_THROW(s.alpha_bar_at(1000.5), ArgumentError);
}

TEST(Schedule, JsonRoundTrip) {
  auto s = build_schedule(200, 1e-3, 0.5, ScheduleKind::cosine);
  auto back = schedule_from_json(s.to_json());
  EXPECT_EQ(back.betas, s.betas);
  EXPECT_EQ(back.kind, ScheduleKind::cosine);
}

TEST(ForwardDiffuse, Limits) {
  num::Rng r(1);
  auto z0 = num::standard_normal<double>(r, {3, 4});
  auto eps = num::standard_normal<double>(r, {3, 4});
  EXPECT_TRUE(num::bit_equal(forward_diffuse(z0, 1.0, eps), z0));
  EXPECT_TRUE(num::bit_equal(forward_diffuse(z0, 0.0, eps), eps));
}

TEST(ForwardDiffuse, MonteCarloMoments) {
  auto s = default_schedule();
  const std::size_t t = 300;
  const double ab = s.alpha_bar(t);
  num::Rng r(8);
  Tensor<double> z0({1, 4}, std::vector<double>{1.0, -2.0, 0.5, 0.0});
  auto seq = LatentSequence<double>::content_only(z0, Modality::text);
  const int n = 10000;
  std::vector<double> sum(4, 0.0), sq(4, 0.0);
  for (int i = 0; i < n; ++i) {
    auto eps = num::standard_normal<double>(r, {1, 4});
    auto zt = forward_diffuse(seq, t, eps, s);
    for (int d = 0; d < 4; ++d) {
      sum[d] += zt.vectors[d];
      sq[d] += zt.vectors[d] * zt.vectors[d];
    }
  }
  for (int d = 0; d < 4; ++d) {
    const double mean = sum[d] / n, var = sq[d] / n - mean * mean;
    const double se_mean = std::sqrt((1 - ab) / n);
    const double se_var = (1 - ab) * std::sqrt(2.0 / (n - 1));
    EXPECT_NEAR(mean, std::sqrt(ab) * z0[d], 3 * se_mean);
    EXPECT_NEAR(var, 1 - ab, 3 * se_var);
  }
}

TEST(ForwardDiffuse, MetadataAndSpecialsPreserved) {
  auto s = default_schedule();
  LatentSequence<float> seq;
  seq.vectors = Tensor<float>({3, 2}, 1.0f);
  seq.roles = {Role::pad, Role::content, Role::time};
  seq.modality = Modality::text;
  auto out = forward_diffuse(seq, 10, Tensor<float>({3, 2}, 0.5f), s);
  EXPECT_EQ(out.roles, seq.roles);
  EXPECT_EQ(out.t, 10.0);
  EXPECT_EQ(out.vectors[0], 1.0f);
  EXPECT_NE(out.vectors[2], 1.0f);
  EXPECT_EQ(out.vectors[5], 1.0f);
  EXPECT_THROW(forward_diffuse(seq, 0, Tensor<float>({3, 2}), s), ArgumentError);
  EXPECT_THROW(forward_diffuse(seq, 1001, Tensor<float>({3, 2}), s), ArgumentError);
}

TEST(TrueScoreRatio, ZeroInputsGiveOne) {
  EXPECT_DOUBLE_EQ(true_score_ratio(Tensor<double>({4}), Tensor<double>({4}), 0.3), 1.0);
}

TEST(TrueScoreRatio, ScalarClosedForm) {
  const double v = true_score_ratio(Tensor<double>({1}, 1.0), Tensor<double>({1}, 1.0), 0.25);
  EXPECT_NEAR(v, std::exp(1.0 / 3.0), 1e-15);
}

TEST(TrueScoreRatio, MatchesGaussianDensityDifference) {
  num::Rng r(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + r.uniform_int(0, 15);
    auto zt = num::standard_normal<double>(r, {d});
    auto z0 = num::standard_normal<double>(r, {d});
    const double ab = 0.01 + 0.98 * r.uniform();
    // log N(zt; sqrt(ab) z0, (1-ab) I) - log N(zt; 0, I)
    double lq = 0, lp = 0;
    for (std::size_t i = 0; i < d; ++i) {
      const double m = std::sqrt(ab) * z0[i];
      lq += -0.5 * std::log(2 * std::numbers::pi * (1 - ab)) - (zt[i] - m) * (zt[i] - m) / (2 * (1 - ab));
      lp += -0.5 * std::log(2 * std::numbers::pi) - zt[i] * zt[i] / 2;
    }
    const double expected = lq - lp + 0.5 * static_cast<double>(d) * std::log(1 - ab);
    EXPECT_NEAR(log_true_score_ratio(zt, z0, ab), expected, 1e-10);
    EXPECT_GT(true_score_ratio(zt, z0, ab), 0.0);
  }
}

TEST(TrueScoreRatio, OverflowCarriesLogRatio) {
  Tensor<double> zt({1}, 40.0), z0({1}, std::sqrt(1.0 / 0.5) * 40.0);
  try {
    true_score_ratio(zt, z0, 0.5);
    FAIL() << "expected overflow";
  } catch (const ScoreOverflowError& e) {
    EXPECT_DOUBLE_EQ(e.log_ratio(), 800.0);
  }
  EXPECT_THROW(true_score_ratio(zt, z0, 1.0), ArgumentError);
  EXPECT_THROW(true_score_ratio(zt, z0, 0.0), ArgumentError);
}

TEST(ParameterizedScore, UniformAndShiftInvariant) {
  for (double v : parameterized_score({2.0, 2.0, 2.0, 2.0})) EXPECT_DOUBLE_EQ(v, 0.25);
  auto a = parameterized_score({0.3, -1.2, 4.0});
  auto b = parameterized_score({10.3, 8.8, 14.0});
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
  EXPECT_THROW(parameterized_score({}), ArgumentError);
}

TEST(ParameterizedScore, RanksLikeTrueRatio) {
  num::Rng r(21);
  for (int trial = 0; trial < 50; ++trial) {
    auto zt = num::standard_normal<double>(r, {6});
    const double ab = 0.1 + 0.8 * r.uniform();
    std::vector<Tensor<double>> cand;
    std::vector<double> f, truth;
    for (int k = 0; k < 5; ++k) {
      cand.push_back(num::standard_normal<double>(r, {6}));
      double nz = 0, nd = 0;
      for (int i = 0; i < 6; ++i) {
        nz += zt[i] * zt[i];
        const double dd = zt[i] - std::sqrt(ab) * cand.back()[i];
        nd += dd * dd;
      }
      f.push_back(-nd / (2 * (1 - ab)) + nz / 2);
      truth.push_back(true_score_ratio(zt, cand.back(), ab));
    }
    auto s = parameterized_score(f);
    std::vector<int> i1(5), i2(5);
    for (int k = 0; k < 5; ++k) i1[k] = i2[k] = k;
    std::sort(i1.begin(), i1.end(), [&](int a, int b) { return s[a] < s[b]; });
    std::sort(i2.begin(), i2.end(), [&](int a, int b) { return truth[a] < truth[b]; });
    EXPECT_EQ(i1, i2);
  }
}

TEST(ScoreEntropy, ZeroAtOptimum) {
  EXPECT_DOUBLE_EQ(score_normalizer(1.0), -1.0);
  EXPECT_EQ(score_entropy({{1.0}, {1.0}, {1.0}}), 0.0);
  num::Rng r(5);
  for (int trial = 0; trial < 200; ++trial) {
    ScoreTerms t;
    for (int k = 0; k < 8; ++k) {
      const double v = std::exp(3 * r.normal());
      t.s_theta.push_back(v);
      t.r_true.push_back(v);
      t.weights.push_back(r.uniform());
    }
    EXPECT_LE(score_entropy(t), 1e-12);
  }
}

TEST(ScoreEntropy, DirectFormulaAgrees) {
  num::Rng r(6);
  for (int trial = 0; trial < 100; ++trial) {
    const double s = std::exp(r.normal()), rr = std::exp(r.normal()), w = r.uniform();
    const double direct = w * (s - rr * std::log(s) + score_normalizer(rr));
    EXPECT_NEAR(score_entropy({{s}, {rr}, {w}}), direct, 1e-12 * std::max(1.0, std::abs(direct)));
  }
}

TEST(ScoreEntropy, UniqueMinimumOnGrid) {
  double best_s = 0, best = 1e300;
  for (int i = 0; i <= 9900; ++i) {
    const double s = 0.1 + i * 0.001;
    const double v = score_entropy({{s}, {2.0}, {1.0}});
    EXPECT_GE(v, 0.0);
    if (v < best) {
      best = v;
      best_s = s;
    }
  }
  EXPECT_NEAR(best_s, 2.0, 0.001);
  EXPECT_LT(best, 1e-12);
}

TEST(ScoreEntropy, GradientMatchesFiniteDifferences) {
  num::Rng r(7);
  for (int trial = 0; trial < 20; ++trial) {
    ScoreTerms t;
    for (int k = 0; k < 6; ++k) {
      t.s_theta.push_back(std::exp(r.normal()));
      t.r_true.push_back(std::exp(r.normal()));
      t.weights.push_back(0.1 + 0.9 * r.uniform());
    }
    Tensor<double> s0({6}, t.s_theta);
    auto f = [&](const Tensor<double>& s) {
      ScoreTerms u = t;
      u.s_theta = s.storage();
      return score_entropy(u);
    };
    auto numeric = num::finite_diff_grad(f, s0, 1e-6);
    Tensor<double> analytic({6}, score_entropy_grad(t));
    EXPECT_LT(num::max_relative_error(analytic, numeric), 1e-6);
  }
}

TEST(ScoreEntropy, RejectsInvalidTerms) {
  EXPECT_THROW(score_entropy({{0.0}, {1.0}, {}}), ArgumentError);
  EXPECT_THROW(score_entropy({{1.0}, {-1.0}, {}}), ArgumentError);
  EXPECT_THROW(score_entropy({{1.0, 2.0}, {1.0}, {}}), ArgumentError);
  EXPECT_THROW(score_entropy({{1.0}, {1.0}, {1.5}}), ArgumentError);
}

TEST(Solver, ZeroFieldIsIdentity) {
  Evaluator<double> f = [](const Tensor<double>& z, double) { return Tensor<double>(z.shape()); };
  Tensor<double> z({2, 3}, 1.25);
  EXPECT_TRUE(num::bit_equal(dpm_solver_step(f, z, 1.0, 0.1), z));
  EXPECT_THROW(dpm_solver_step(f, z, 1.0, 0.0), ArgumentError);
}

namespace {
// Integrate from t = 1 to t = 0 where each step moves z by -dt * z, so z(t) = e^{t-1}.
double endpoint_error(double dt) {
  Evaluator<double> f = [](const Tensor<double>& z, double) { return z; };
  Tensor<double> z({1}, 1.0);
  const int n = static_cast<int>(std::lround(1.0 / dt));
  for (int i = 0; i < n; ++i) z = dpm_solver_step(f, z, 1.0 - i * dt, dt, i);
  return std::abs(z[0] - std::exp(-1.0));
}
}  // namespace

TEST(Solver, SecondOrderConvergence) {
  const double e1 = endpoint_error(0.1), e2 = endpoint_error(0.05), e3 = endpoint_error(0.025);
  EXPECT_GE(e1 / e2, 3.0);
  EXPECT_LE(e1 / e2, 5.0);
  EXPECT_GE(e2 / e3, 3.0);
  EXPECT_LE(e2 / e3, 5.0);
}

TEST(Solver, NonFiniteEvaluatorReportsStep) {
  Evaluator<double> f = [](const Tensor<double>& z, double) {
    Tensor<double> o = z;
    o[0] = std::nan("");
    return o;
  };
  try {
    dpm_solver_step(f, Tensor<double>({1}, 1.0), 1.0, 0.1, 7);
    FAIL();
  } catch (const SamplerError& e) {
    EXPECT_EQ(e.step(), 7u);
  }
}

TEST(Solver, SequenceMetadataPreserved) {
  Evaluator<float> f = [](const Tensor<float>& z, double) { return z; };
  auto seq = LatentSequence<float>::content_only(Tensor<float>({4, 2}, 1.0f), Modality::image, 2, 2);
  seq.t = 5.0;
  auto out = dpm_solver_step(f, seq, 5.0, 0.5);
  EXPECT_EQ(out.roles, seq.roles);
  EXPECT_EQ(out.rows, 2u);
  EXPECT_DOUBLE_EQ(out.t, 4.5);
}

TEST(Solver, KarrasSigmasDecrease) {
  auto s = karras_sigmas(10, 0.01, 150.0);
  ASSERT_EQ(s.size(), 11u);
  EXPECT_DOUBLE_EQ(s.front(), 150.0);
  EXPECT_DOUBLE_EQ(s.back(), 0.01);
  for (std::size_t i = 1; i < s.size(); ++i) EXPECT_LT(s[i], s[i - 1]);
}
