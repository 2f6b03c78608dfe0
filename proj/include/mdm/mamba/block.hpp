#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mdm/diffusion/schedule.hpp"
#include "mdm/latent.hpp"
#include "mdm/mamba/scan.hpp"
#include "mdm/mamba/selection.hpp"
#include "mdm/numerics/graph.hpp"
#include "mdm/numerics/rng.hpp"

namespace mdm::mamba {

struct BlockConfig {
  std::size_t model_dim = 64;
  std::size_t expand_dim = 64;
  std::size_t state_dim = 16;
  std::size_t conv_width = 4;
};

template <Real T>
struct MambaBlockParams {
  Tensor<T> norm_g;     // [D]
  Tensor<T> in_w;       // [2E x D]
  Tensor<T> in_b;       // [2E]
  Tensor<T> conv_w;     // [E x K]
  Tensor<T> conv_b;     // [E]
  Tensor<T> a_log;      // [N], A = -exp(a_log)
  Tensor<T> delta_raw;  // [N], delta = softplus(delta_raw)
  Tensor<T> B;          // [N x E]
  Tensor<T> C;          // [E x N]
  Tensor<T> D;          // [E]
  Tensor<T> head_w;     // [D x E]
  Tensor<T> head_b;     // [D]
  Tensor<T> out_w;      // [D x E]
  Tensor<T> out_b;      // [D]

  template <class F>
  void for_each(F&& fn) {
    fn("norm_g", norm_g);
    fn("in_w", in_w);
    fn("in_b", in_b);
    fn("conv_w", conv_w);
    fn("conv_b", conv_b);
    fn("a_log", a_log);
    fn("delta_raw", delta_raw);
    fn("B", B);
    fn("C", C);
    fn("D", D);
    fn("head_w", head_w);
    fn("head_b", head_b);
    fn("out_w", out_w);
    fn("out_b", out_b);
  }
  template <class F>
  void for_each(F&& fn) const {
    const_cast<MambaBlockParams*>(this)->for_each(
        [&](const char* name, Tensor<T>& t) { fn(name, static_cast<const Tensor<T>&>(t)); });
  }

  std::vector<T> A() const {
    std::vector<T> a(a_log.size());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = -std::exp(a_log[i]);
    return a;
  }
  std::vector<T> delta() const {
    std::vector<T> d(delta_raw.size());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = num::softplus(delta_raw[i]);
    return d;
  }

  BlockConfig config() const { return {norm_g.size(), D.size(), a_log.size(), conv_w.size() / D.size()}; }
};

template <Real T>
MambaBlockParams<T> init_block(const BlockConfig& cfg, num::Rng& rng) {
  const std::size_t Dm = cfg.model_dim, E = cfg.expand_dim, N = cfg.state_dim, K = cfg.conv_width;
  if (Dm == 0 || E == 0 || N == 0 || K == 0) throw ArgumentError("init_block: dimensions must be positive");
  auto normal = [&](num::Shape s, double std) {
    Tensor<T> t(s);
    for (auto& v : t.values()) v = static_cast<T>(std * rng.normal());
    return t;
  };
  MambaBlockParams<T> p;
  p.norm_g = Tensor<T>({Dm}, T{1});
  p.in_w = normal({2 * E, Dm}, 1.0 / std::sqrt(static_cast<double>(Dm)));
  p.in_b = Tensor<T>({2 * E});
  p.conv_w = normal({E, K}, 1.0 / std::sqrt(static_cast<double>(K)));
  p.conv_b = Tensor<T>({E});
  p.a_log = Tensor<T>({N});
  p.delta_raw = Tensor<T>({N});
  for (std::size_t i = 0; i < N; ++i) {
    p.a_log[i] = static_cast<T>(std::log(0.5) + rng.uniform() * (std::log(8.0) - std::log(0.5)));
    const double delta = std::exp(std::log(1e-3) + rng.uniform() * (std::log(0.1) - std::log(1e-3)));
    p.delta_raw[i] = static_cast<T>(num::inverse_softplus(delta));
  }
  p.B = normal({N, E}, 1.0 / std::sqrt(static_cast<double>(E)));
  p.C = normal({E, N}, 1.0 / std::sqrt(static_cast<double>(N)));
  p.D = Tensor<T>({E}, T{1});
  p.head_w = normal({Dm, E}, 1e-3);
  p.head_b = Tensor<T>({Dm});
  p.out_w = normal({Dm, E}, 0.1 / std::sqrt(static_cast<double>(E)));
  p.out_b = Tensor<T>({Dm});
  return p;
}

// ---------------------------------------------------------------------------

/// Row layout of one sequence plus the full-sequence permutations of its scan orders.
struct BlockLayout {
  std::vector<Role> roles;
  std::vector<std::size_t> content;
  std::vector<std::vector<std::size_t>> perms, inverses;
};

inline BlockLayout make_layout(const std::vector<Role>& roles, const std::vector<ScanOrder>& orders) {
  if (orders.empty()) throw ArgumentError("block layout: at least one scan order is required");
  BlockLayout l;
  l.roles = roles;
  for (std::size_t i = 0; i < roles.size(); ++i)
    if (roles[i] == Role::content) l.content.push_back(i);
  for (const auto& o : orders) {
    l.perms.push_back(full_permutation(o, roles));
    l.inverses.push_back(invert(l.perms.back()));
  }
  return l;
}

template <Real T>
BlockLayout make_layout(const LatentSequence<T>& seq, std::size_t order_count = 0) {
  auto orders = make_scan_orders(seq.roles, seq.modality, seq.rows, seq.cols);
  if (order_count > 0 && order_count < orders.size()) orders.resize(order_count);
  return make_layout(seq.roles, orders);
}

struct BlockOptions {
  SelectionPolicy policy;
  ScanMode scan = ScanMode::sequential;
  const std::vector<bool>* forced_mask = nullptr;  // overrides selection (content positions)
  std::vector<double> candidate_weights;          // empty means 1
};

namespace detail {

struct BlockVars {
  num::Var norm_g, in_w, in_b, conv_w, conv_b, a_log, delta_raw, B, C, D, head_w, head_b, out_w, out_b;
};

template <Real T>
BlockVars bind(num::Graph<T>& g, const MambaBlockParams<T>& p, const std::string& prefix) {
  return {g.param(prefix + "norm_g", p.norm_g),   g.param(prefix + "in_w", p.in_w),
          g.param(prefix + "in_b", p.in_b),       g.param(prefix + "conv_w", p.conv_w),
          g.param(prefix + "conv_b", p.conv_b),   g.param(prefix + "a_log", p.a_log),
          g.param(prefix + "delta_raw", p.delta_raw), g.param(prefix + "B", p.B),
          g.param(prefix + "C", p.C),             g.param(prefix + "D", p.D),
          g.param(prefix + "head_w", p.head_w),   g.param(prefix + "head_b", p.head_b),
          g.param(prefix + "out_w", p.out_w),     g.param(prefix + "out_b", p.out_b)};
}

// Gated mixer output m [L x E]: norm, input projection, per-order conv/scan, order merge, gate.
template <Real T>
num::Var mixer(num::Graph<T>& g, const BlockVars& v, std::size_t E, num::Var x, const BlockLayout& layout,
               ScanMode mode) {
  using namespace num::ad;
  num::Var xn = rmsnorm(g, x, v.norm_g);
  num::Var proj = linear(g, xn, v.in_w, v.in_b);
  num::Var u0 = cols(g, proj, 0, E);
  num::Var gate = cols(g, proj, E, E);
  std::vector<num::Var> ys;
  for (std::size_t k = 0; k < layout.perms.size(); ++k) {
    num::Var ug = gather_rows(g, u0, layout.perms[k]);
    num::Var a = silu(g, causal_conv(g, ug, v.conv_w, v.conv_b));
    num::Var y = ssm_scan(g, a, v.a_log, v.delta_raw, v.B, v.C, v.D, mode);
    ys.push_back(gather_rows(g, y, layout.inverses[k]));
  }
  num::Var y = ys.size() == 1 ? ys[0] : mean_of(g, ys);
  return mul(g, y, silu(g, gate));
}

}  // namespace detail

template <Real T>
struct BlockStep {
  num::Var out;                // [L x D]
  num::Var se;                 // [Lc x 1]
  std::vector<bool> mask;      // content positions
  SelectionValues<T> values;   // head and true-ratio scores per candidate
};

/// One block as a step of the denoising ODE from t to t - dt in normalized time
/// (h = dt / T):
///   x' = x - h/2 [F(x) + F(x - h F(x))]
/// F is the output projection of the mixer on selected content rows and zero
/// elsewhere, so special tokens and ignored positions are left unchanged.
/// The head q = x + head(m) scores the candidates against the true ratio from x.
template <Real T>
BlockStep<T> block_step(num::Graph<T>& g, const MambaBlockParams<T>& p, const std::string& prefix, num::Var x,
                        const BlockLayout& layout, double t, double dt, const diffusion::NoiseSchedule& sched,
                        const std::vector<Tensor<T>>& candidates, const BlockOptions& opt = {}) {
  using namespace num::ad;
  if (!(dt > 0.0 && dt <= t)) throw ArgumentError("block_step: need 0 < dt <= t");
  const std::size_t E = p.D.size();
  const auto& X = g.value(x);
  if (X.rank() != 2 || X.dim(0) != layout.roles.size() || X.dim(1) != p.norm_g.size()) {
    throw ArgumentError("block_step: input " + num::shape_str(X.shape()) + " does not match layout/model dim");
  }
  const detail::BlockVars v = detail::bind(g, p, prefix);
  const std::size_t L = layout.roles.size(), Lc = layout.content.size();

  num::Var m = detail::mixer(g, v, E, x, layout, opt.scan);
  num::Var xc = gather_rows(g, x, layout.content);
  num::Var q = add(g, xc, linear(g, gather_rows(g, m, layout.content), v.head_w, v.head_b));

  BlockStep<T> step;
  std::vector<Tensor<T>> cands = candidates;
  if (cands.empty()) cands.emplace_back(Tensor<T>({Lc, p.norm_g.size()}));
  step.se = selection_entropy(g, xc, q, cands, sched.alpha_bar_at(t), opt.candidate_weights, &step.values);
  if (opt.forced_mask) {
    if (opt.forced_mask->size() != Lc) throw ArgumentError("block_step: forced mask length mismatch");
    step.mask = *opt.forced_mask;
  } else {
    step.mask = select_items(step.values.se, opt.policy);
  }
  std::vector<T> mk(Lc);
  for (std::size_t i = 0; i < Lc; ++i) mk[i] = step.mask[i] ? T{1} : T{0};

  auto field = [&](num::Var mm) {
    num::Var o = linear(g, mm, v.out_w, v.out_b);
    return scatter_rows(g, mask_rows(g, gather_rows(g, o, layout.content), mk), layout.content, L);
  };
  const T h = static_cast<T>(dt / static_cast<double>(sched.T));
  num::Var f1 = field(m);
  num::Var xp = add_scaled(g, x, f1, -h);
  num::Var f2 = field(detail::mixer(g, v, E, xp, layout, opt.scan));
  step.out = add_scaled(g, x, add(g, f1, f2), -h / T{2});
  return step;
}

// ---------------------------------------------------------------------------
// Standalone forward with a cached tape for the analytic gradients.

template <Real T>
struct BlockCache {
  std::shared_ptr<num::Graph<T>> graph;
  num::Var input, output, se;
  bool valid() const { return graph != nullptr; }
};

template <Real T>
struct BlockForward {
  LatentSequence<T> seq;   // at t - dt
  Tensor<T> f_values;      // [Lc x K] head scores, feed parameterized_score
  std::vector<double> se;  // per content position
  std::vector<bool> mask;
  BlockCache<T> cache;
};

/// `block` must outlive the returned cache.
template <Real T>
BlockForward<T> mamba_block_forward(const MambaBlockParams<T>& block, const LatentSequence<T>& seq, double t, double dt,
                                    const diffusion::NoiseSchedule& sched,
                                    const std::vector<Tensor<T>>& candidates = {}, const BlockOptions& opt = {},
                                    const std::vector<ScanOrder>* orders = nullptr) {
  if (std::abs(seq.t - t) > 1e-12 * std::max(1.0, std::abs(t))) {
    throw ArgumentError("mamba_block_forward: sequence is at t=" + std::to_string(seq.t) + ", not " +
                        std::to_string(t));
  }
  const BlockLayout layout =
      orders ? make_layout(seq.roles, *orders) : make_layout(seq.roles, make_scan_orders(seq.roles, seq.modality, seq.rows, seq.cols));
  BlockForward<T> r;
  r.cache.graph = std::make_shared<num::Graph<T>>();
  auto& g = *r.cache.graph;
  r.cache.input = g.param("input", seq.vectors);
  auto step = block_step(g, block, "", r.cache.input, layout, t, dt, sched, candidates, opt);
  r.cache.output = step.out;
  r.cache.se = step.se;
  r.seq = seq;
  r.seq.vectors = g.value(step.out);
  r.seq.t = t - dt;
  r.f_values = step.values.f;
  r.se = step.values.se;
  r.mask = step.mask;
  return r;
}

template <Real T>
struct BlockGradients {
  std::map<std::string, Tensor<T>> params;
  Tensor<T> input;
};

/// Gradients of <upstream, output> + se_weight * sum(se) with respect to the block
/// parameters and the input. Consumes the cache.
template <Real T>
BlockGradients<T> mamba_block_gradients(const MambaBlockParams<T>& block, const Tensor<T>& upstream,
                                        BlockCache<T>& cache, T se_weight = T{0}) {
  if (!cache.valid()) throw StateError("mamba_block_gradients: no cached forward pass");
  auto& g = *cache.graph;
  num::Var root = cache.output;
  if (se_weight != T{0}) {
    using namespace num::ad;
    const auto& y = g.value(cache.output);
    num::Var dot = weighted_sum(g, {mean_all(g, mul_const(g, cache.output, upstream))}, {static_cast<T>(y.size())});
    root = add_scaled(g, dot, weighted_sum(g, {mean_all(g, cache.se)}, {static_cast<T>(g.value(cache.se).size())}),
                      se_weight);
    g.backward(root);
  } else {
    g.backward(root, upstream);
  }
  BlockGradients<T> out;
  block.for_each([&](const char* name, const Tensor<T>& p) { out.params[name] = g.param_grad(name, p.shape()); });
  out.input = g.param_grad("input", g.value(cache.input).shape());
  cache.graph.reset();
  return out;
}

}  // namespace mdm::mamba
