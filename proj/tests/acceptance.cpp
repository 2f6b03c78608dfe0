// Acceptance run: one PASS/FAIL line per criterion. With arguments, runs only the
// listed criterion numbers. Exit status is nonzero if any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <set>
#include <string>

#include "mdm/bench/complexity.hpp"
#include "mdm/diffusion/score.hpp"
#include "mdm/diffusion/solver.hpp"
#include "mdm/mamba/scan.hpp"
#include "mdm/pipeline/checkpoint.hpp"
#include "mdm/pipeline/generate.hpp"
#include "mdm/pipeline/gradsuite.hpp"
#include "support.hpp"

using namespace mdm;
namespace fs = std::filesystem;
using num::Tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

void note(Outcome& o, bool ok, const std::string& what) {
  o.pass &= ok;
  if (!o.detail.empty()) o.detail += "; ";
  o.detail += what + (ok ? "" : " [fail]");
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// 1: score entropy is nonnegative and vanishes only at s = r
Outcome score_entropy_optimum() {
  Outcome o;
  num::Rng r(101);
  double worst_at_r = 0, most_negative = 0;
  std::size_t scan_failures = 0;
  for (int set = 0; set < 1000; ++set) {
    diffusion::ScoreTerms t;
    const std::size_t k = 1 + r.uniform_int(0, 7);
    for (std::size_t i = 0; i < k; ++i) {
      t.r_true.push_back(std::exp(2.0 * r.normal()));
      t.weights.push_back(0.05 + 0.95 * r.uniform());
    }
    t.s_theta = t.r_true;
    worst_at_r = std::max(worst_at_r, diffusion::score_entropy(t));
    auto u = t;
    for (auto& s : u.s_theta) s = std::exp(2.0 * r.normal());
    most_negative = std::min(most_negative, diffusion::score_entropy(u));
    // 1-D scan of one coordinate on a multiplicative grid through r
    const std::size_t i = r.uniform_int(0, k - 1);
    double prev = INFINITY;
    bool ok = true;
    for (int g = -40; g <= 40; ++g) {
      auto v = t;
      v.s_theta[i] = t.r_true[i] * std::exp(0.05 * g);
      const double se = diffusion::score_entropy(v);
      if (g <= 0 ? !(se < prev) : !(se > prev)) ok = false;
      if (g != 0 && !(se > 0.0)) ok = false;
      prev = se;
    }
    scan_failures += !ok;
  }
  note(o, worst_at_r <= 1e-12, "max se(s=r) " + fmt("%.2e", worst_at_r));
  note(o, most_negative >= 0.0, "min se " + fmt("%.2e", most_negative));
  note(o, scan_failures == 0, "1-D scans with a non-unique minimum: " + std::to_string(scan_failures));
  return o;
}

// 2: log true ratio against the Gaussian log-density difference
Outcome true_ratio_oracle() {
  Outcome o;
  num::Rng r(102);
  double worst = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 1 + r.uniform_int(0, 15);
    const auto zt = num::standard_normal<double>(r, {d});
    const auto z0 = num::standard_normal<double>(r, {d});
    const double ab = 0.01 + 0.98 * r.uniform();
    double lq = 0, lp = 0;
    for (std::size_t i = 0; i < d; ++i) {
      const double m = std::sqrt(ab) * z0[i];
      lq += -0.5 * std::log(2 * std::numbers::pi * (1 - ab)) - (zt[i] - m) * (zt[i] - m) / (2 * (1 - ab));
      lp += -0.5 * std::log(2 * std::numbers::pi) - zt[i] * zt[i] / 2;
    }
    const double want = lq - lp + 0.5 * static_cast<double>(d) * std::log(1 - ab);
    worst = std::max(worst, std::abs(diffusion::log_true_score_ratio(zt, z0, ab) - want));
  }
  note(o, worst <= 1e-10, "max |log ratio error| " + fmt("%.2e", worst));
  return o;
}

// 3
Outcome gradient_suite() {
  Outcome o;
  double worst = 0;
  std::string worst_name;
  std::size_t checks = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (const auto& c : pipeline::run_gradient_suite(seed)) {
      ++checks;
      if (c.max_rel_error > worst) worst = c.max_rel_error, worst_name = c.group + "/" + c.name;
    }
  }
  note(o, worst < 1e-4,
       std::to_string(checks) + " checks over 10 seeds, worst " + fmt("%.2e", worst) + " (" + worst_name + ")");
  return o;
}

// 4
Outcome ssm_correctness() {
  Outcome o;
  num::Rng r(104);
  const std::size_t N = 5, E = 6;
  double worst = 0;
  for (std::size_t L : {8, 64, 1024}) {
    std::vector<double> A(N), delta(N);
    for (std::size_t i = 0; i < N; ++i) {
      A[i] = -std::exp(std::log(0.5) + r.uniform() * std::log(16.0));
      delta[i] = std::exp(std::log(1e-3) + r.uniform() * std::log(100.0));
    }
    const auto d = mamba::discretize(A, num::standard_normal<double>(r, {N, E}), delta);
    std::vector<double> D(E);
    for (auto& v : D) v = r.normal();
    const mamba::ScanModel<double> m{d.A_bar, d.B_bar, num::standard_normal<double>(r, {E, N}), D};
    const auto u = num::standard_normal<double>(r, {L, E});
    Tensor<double> Hs, Hp;
    const auto ys = mamba::scan_sequential(m, u, &Hs), yp = mamba::scan_parallel(m, u, &Hp);
    for (std::size_t i = 0; i < ys.size(); ++i) worst = std::max(worst, std::abs(ys[i] - yp[i]));
    for (std::size_t i = 0; i < Hs.size(); ++i) worst = std::max(worst, std::abs(Hs[i] - Hp[i]));
  }
  note(o, worst <= 1e-10, "parallel vs sequential at L={8,64,1024}: " + fmt("%.2e", worst));

  const auto c = mamba::discretize<double>({-1.0}, Tensor<double>({1, 1}, 2.0), {0.5});
  const double e_a = std::abs(c.A_bar[0] - std::exp(-0.5)), e_b = std::abs(c.B_bar[0] - 2.0 * (1.0 - std::exp(-0.5)));
  note(o, e_a <= 1e-12 && e_b <= 1e-12, "closed form A=-1 dt=0.5 B=2: " + fmt("%.2e", std::max(e_a, e_b)));

  double series = 0;
  for (double a : {0.0, -1e-10, -1e-12, -1e-14}) {
    const auto s = mamba::discretize<double>({a}, Tensor<double>({1, 1}, 2.0), {0.3});
    series = std::max(series, std::abs(s.B_bar[0] - 0.3 * 2.0));
  }
  note(o, series <= 1e-10, "A->0 limit B_bar = dt B: " + fmt("%.2e", series));
  return o;
}

// 5
Outcome sampler_order() {
  Outcome o;
  auto endpoint_error = [](double dt) {
    diffusion::Evaluator<double> f = [](const Tensor<double>& z, double) { return z; };
    Tensor<double> z({1}, 1.0);
    const int n = static_cast<int>(std::lround(1.0 / dt));
    for (int i = 0; i < n; ++i) z = diffusion::dpm_solver_step(f, z, 1.0 - i * dt, dt, i);
    return std::abs(z[0] - std::exp(-1.0));
  };
  const double e1 = endpoint_error(0.1), e2 = endpoint_error(0.05), e3 = endpoint_error(0.025);
  const double r1 = e1 / e2, r2 = e2 / e3;
  note(o, r1 >= 3 && r1 <= 5 && r2 >= 3 && r2 <= 5, "error ratios " + fmt("%.3f", r1) + ", " + fmt("%.3f", r2));

  const auto s = pipeline::init_train_state<float>(pipeline::toy_train_config());
  for (std::size_t steps : {10, 20}) {
    pipeline::GenerateOptions go;
    go.class_id = 1;
    go.steps = steps;
    go.guidance = 2.0;
    const auto t0 = std::chrono::steady_clock::now();
    num::Rng ra(55), rb(55);
    const auto a = pipeline::generate(s.model, go, ra);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto b = pipeline::generate(s.model, go, rb);
    const bool same = num::bit_equal(a.image, b.image) && a.ids == b.ids;
    note(o, same && secs < 5.0, std::to_string(steps) + "-step generate " + fmt("%.2f s", secs) +
                                    (same ? ", deterministic" : ", not deterministic"));
  }
  return o;
}

// 6
Outcome tokenizer() {
  Outcome o;
  tok::TrainerConfig tc;
  tc.vocab_size = 16;
  tc.character_coverage = 1.0;
  num::Rng r(4);
  const char* motifs[] = {"ab", "abc", "cd", "dab", "bb"};
  std::vector<std::string> abcd;
  for (int i = 0; i < 60; ++i) {
    std::string s;
    while (s.size() < 20) {
      if (r.uniform() < 0.5) s += motifs[r.uniform_int(0, 4)];
      else s += static_cast<char>('a' + r.uniform_int(0, 3));
    }
    abcd.push_back(s);
  }
  const auto m = tok::train_unigram(abcd, tc).model;
  const std::u32string alphabet = U"abcd";
  std::size_t strings = 0, mismatches = 0;
  for (std::size_t n = 1; n <= 12; ++n) {
    for (std::size_t first = 0; first < alphabet.size(); ++first) {
      testing_support::exhaustive_best(m, alphabet, n, first, [&](const std::u32string& s, double best) {
        ++strings;
        if (std::abs(m.viterbi(s).score - best) > 1e-9 * std::max(1.0, std::abs(best))) ++mismatches;
      });
    }
  }
  note(o, mismatches == 0 && strings == (std::size_t{1} << 26) / 3 - 1,
       "Viterbi == exhaustive on " + std::to_string(strings) + " strings, " + std::to_string(mismatches) +
           " mismatches");

  const auto corpus = testing_support::synthetic_corpus(200, 5);
  tc.vocab_size = 64;
  const auto res = tok::train_unigram(corpus, tc);
  std::size_t decreases = 0, iterations = 0;
  for (const auto& phase : res.loglik) {
    for (std::size_t i = 1; i < phase.size(); ++i, ++iterations) {
      decreases += phase[i] < phase[i - 1] - 1e-9 * std::abs(phase[i - 1]);
    }
  }
  note(o, decreases == 0 && iterations > 0,
       "EM log-likelihood decreases: " + std::to_string(decreases) + "/" + std::to_string(iterations));
  std::size_t bad = 0;
  for (const auto& line : corpus) bad += res.model.decode(res.model.encode(line)) != line;
  note(o, bad == 0, "round trip on 200 lines, " + std::to_string(bad) + " differ");
  return o;
}

// 7
Outcome toy_training() {
  Outcome o;
  const auto data = pipeline::make_dataset(2, 256, 1);
  const auto tk = pipeline::caption_tokenizer(data);
  auto cfg = pipeline::toy_train_config();
  cfg.steps = 2000;
  cfg.seed = 7;
  auto s = pipeline::init_train_state<float>(cfg);
  s.tokenizer = tk;
  const auto examples = pipeline::prepare_examples<float>(data, tk, cfg.model);
  std::vector<double> losses;
  pipeline::train(s, examples, cfg.steps, [&](const pipeline::Metrics& m) { losses.push_back(m.loss.total); });
  const auto sm = pipeline::smooth(losses, 50);
  const double initial = sm[49], final = sm.back();
  note(o, final < 0.5 * initial,
       "smoothed L_total " + fmt("%.4f", initial) + " -> " + fmt("%.4f", final) + " (x" + fmt("%.3f", final / initial) +
           ")");
  const auto clf = pipeline::TemplateClassifier::fit(data, 2);
  int correct = 0;
  for (int i = 0; i < 100; ++i) {
    num::Rng r = num::Rng(11).fork(static_cast<std::uint64_t>(i));
    pipeline::GenerateOptions go;
    go.class_id = static_cast<std::size_t>(i % 2);
    go.guidance = 2.0;
    go.steps = 10;
    correct += clf.classify(pipeline::generate(s.model, go, r).image) == static_cast<std::size_t>(i % 2);
  }
  note(o, correct >= 90, "class accuracy at guidance 2.0: " + std::to_string(correct) + "/100");
  return o;
}

// 8
Outcome complexity() {
  Outcome o;
  bench::BenchConfig c;  // N=64, M=4, G=4, L=64..8192
  const auto scan = bench::bench_scan(c);
  const auto attn = bench::bench_attention(c);
  const auto fs_ = bench::fit_loglog(scan), fa = bench::fit_loglog(attn);
  note(o, fs_.slope >= 0.9 && fs_.slope <= 1.2 && fs_.r2 > 0.98,
       "scan slope " + fmt("%.3f", fs_.slope) + " R2 " + fmt("%.4f", fs_.r2));
  note(o, fa.slope >= 1.7 && fa.slope <= 2.2 && fa.r2 > 0.98,
       "attention slope " + fmt("%.3f", fa.slope) + " R2 " + fmt("%.4f", fa.r2));
  const auto cross = bench::find_crossover(scan, attn);
  note(o, cross.has_value(), "crossover " + (cross ? "L=" + std::to_string(*cross) : std::string("none")));
  return o;
}

// 9
Outcome persistence() {
  Outcome o;
  const auto data = pipeline::make_dataset(2, 32, 3);
  const auto tk = pipeline::caption_tokenizer(data);
  pipeline::TrainConfig cfg = pipeline::toy_train_config();
  cfg.model.blocks = 2;
  cfg.model.candidates = 3;
  cfg.batch = 2;
  cfg.threads = 1;
  const auto ex = pipeline::prepare_examples<float>(data, tk, cfg.model);
  const fs::path dir = fs::temp_directory_path() / "mdm_acceptance";
  fs::create_directories(dir);

  auto full = pipeline::init_train_state<float>(cfg);
  full.tokenizer = tk;
  std::vector<double> ref;
  pipeline::train(full, ex, 10, [&](const pipeline::Metrics& m) { ref.push_back(m.loss.total); });

  auto part = pipeline::init_train_state<float>(cfg);
  part.tokenizer = tk;
  std::vector<double> got;
  pipeline::train(part, ex, 5, [&](const pipeline::Metrics& m) { got.push_back(m.loss.total); });
  pipeline::save_checkpoint(part, dir / "a.mdmt");
  auto loaded = pipeline::load_checkpoint<float>(dir / "a.mdmt");
  pipeline::save_checkpoint(loaded, dir / "b.mdmt");
  auto bytes = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  bool params_equal = true;
  const auto pa = part.model.params(), pb = loaded.model.params();
  for (const auto& [name, t] : pa) params_equal &= num::bit_equal(t, pb.at(name));
  note(o, params_equal && bytes(dir / "a.mdmt") == bytes(dir / "b.mdmt") && loaded.step == part.step,
       "save/load/save bit-exact");

  pipeline::train(loaded, ex, 5, [&](const pipeline::Metrics& m) { got.push_back(m.loss.total); });
  bool final_equal = true;
  const auto fa = full.model.params(), fb = loaded.model.params();
  for (const auto& [name, t] : fa) final_equal &= num::bit_equal(t, fb.at(name));
  note(o, got == ref && final_equal, "5 + 5 resumed steps reproduce the 10-step losses and weights bit-exactly");
  fs::remove_all(dir);
  return o;
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;  // 0: no runtime bound
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "score-entropy optimum", 1.0, score_entropy_optimum},
      {2, "true-ratio oracle", 1.0, true_ratio_oracle},
      {3, "gradient suite", 30.0, gradient_suite},
      {4, "SSM correctness", 0.0, ssm_correctness},
      {5, "sampler order and generate", 0.0, sampler_order},
      {6, "tokenizer", 60.0, tokenizer},
      {7, "toy training", 900.0, toy_training},
      {8, "complexity", 300.0, complexity},
      {9, "persistence", 0.0, persistence},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0) note(o, secs < c.budget_s, fmt("%.2f s", secs) + " (limit " + fmt("%.0f s", c.budget_s) + ")");
    else o.detail += "; " + fmt("%.2f s", secs);
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
