#pragma once

#include <string>
#include <vector>

#include "mdm/codec/codec.hpp"
#include "mdm/diffusion/score.hpp"
#include "mdm/mamba/block.hpp"
#include "mdm/numerics/gradcheck.hpp"

namespace mdm::pipeline {

struct GradCheck {
  std::string group;  // score | block | codec
  std::string name;
  double max_rel_error = 0;
};

namespace detail {

inline void check_score(num::Rng& r, std::vector<GradCheck>& out) {
  diffusion::ScoreTerms t;
  for (int k = 0; k < 6; ++k) {
    t.s_theta.push_back(0.2 + 2.0 * r.uniform());
    t.r_true.push_back(0.2 + 2.0 * r.uniform());
    t.weights.push_back(0.1 + 0.9 * r.uniform());
  }
  const auto g = diffusion::score_entropy_grad(t);
  num::Tensor<double> analytic({g.size()}), s0({t.s_theta.size()});
  for (std::size_t i = 0; i < g.size(); ++i) analytic[i] = g[i], s0[i] = t.s_theta[i];
  auto numeric = num::finite_diff_grad5(
      [&](const num::Tensor<double>& s) {
        auto u = t;
        u.s_theta.assign(s.values().begin(), s.values().end());
        return diffusion::score_entropy(u);
      },
      s0);
  out.push_back({"score", "s", num::max_relative_error(analytic, numeric)});
}

inline void check_block(num::Rng& r, std::vector<GradCheck>& out) {
  using namespace mamba;
  constexpr std::size_t Lc = 8, Dm = 6;
  auto p = init_block<double>({Dm, 5, 4, 3}, r);
  // move the zero- and small-initialized tensors off their defaults
  for (auto* t : {&p.head_w, &p.in_b, &p.conv_b, &p.head_b, &p.out_b})
    for (auto& v : t->values()) v = 0.3 * r.normal();
  for (auto& v : p.out_w.values()) v = r.normal() / std::sqrt(5.0);
  LatentSequence<double> seq;
  seq.roles = {Role::pad, Role::time, Role::klass};
  seq.roles.insert(seq.roles.end(), Lc, Role::content);
  seq.roles.push_back(Role::pad);
  seq.vectors = num::standard_normal<double>(r, {seq.roles.size(), Dm});
  seq.modality = Modality::text;
  seq.t = 450.0;
  const auto sched = diffusion::default_schedule();
  std::vector<num::Tensor<double>> cands;
  for (int k = 0; k < 3; ++k) cands.push_back(num::standard_normal<double>(r, {Lc, Dm}));
  const std::vector<bool> mask{true, true, false, true, true, true, false, true};
  BlockOptions opt;
  opt.forced_mask = &mask;
  const auto up = num::standard_normal<double>(r, seq.vectors.shape());
  const double se_w = 0.7;

  auto objective = [&](const LatentSequence<double>& s) {
    auto f = mamba_block_forward(p, s, seq.t, 150.0, sched, cands, opt);
    double v = 0;
    for (std::size_t i = 0; i < up.size(); ++i) v += up[i] * f.seq.vectors[i];
    for (double e : f.se) v += se_w * e;
    return v;
  };
  auto fwd = mamba_block_forward(p, seq, seq.t, 150.0, sched, cands, opt);
  const auto grads = mamba_block_gradients(p, up, fwd.cache, se_w);
  p.for_each([&](const char* name, num::Tensor<double>& t) {
    const num::Tensor<double> saved = t;
    auto numeric = num::finite_diff_grad5(
        [&](const num::Tensor<double>& v) {
          t = v;
          return objective(seq);
        },
        saved);
    t = saved;
    out.push_back({"block", name, num::max_relative_error(grads.params.at(name), numeric)});
  });
  auto numeric_in = num::finite_diff_grad5(
      [&](const num::Tensor<double>& v) {
        auto s = seq;
        s.vectors = v;
        return objective(s);
      },
      seq.vectors);
  out.push_back({"block", "input", num::max_relative_error(grads.input, numeric_in)});
}

inline void check_codec(num::Rng& r, std::vector<GradCheck>& out) {
  using namespace codec;
  CodecConfig cfg;
  cfg.latent_dim = 8;
  cfg.vocab = 12;
  cfg.height = cfg.width = 4;
  cfg.num_classes = 3;
  auto params = init_codec<double>(cfg, r);
  for (auto* t : {&params.img_w, &params.txt_w})
    for (auto& v : t->values()) v = r.normal() / std::sqrt(8.0);
  num::Tensor<double> image({4, 4, 1});
  for (auto& v : image.values()) v = r.uniform();
  const auto patches = patchify(image, 2);
  const std::vector<std::size_t> ids{1, 7, 3, 11, 0};
  const auto n_img = num::standard_normal<double>(r, {4, 8}), e_img = num::standard_normal<double>(r, {4, 8});
  const auto n_txt = num::standard_normal<double>(r, {5, 8}), e_txt = num::standard_normal<double>(r, {5, 8});
  const auto w_img = num::standard_normal<double>(r, {8, 8}), w_txt = num::standard_normal<double>(r, {8, 8});

  auto loss = [&](num::Graph<double>& g) {
    using namespace num::ad;
    auto ei = encode_graph(g, params, image_features(g, params, patches), n_img, e_img);
    auto et = encode_graph(g, params, text_features(g, params, ids), n_txt, e_txt);
    num::Var seq_i = assemble_graph(g, params, ei.z0, Modality::image, 37.5, std::size_t{2});
    num::Var seq_t = assemble_graph(g, params, et.z0, Modality::text, 37.5, std::nullopt);
    num::Var zi = gather_rows(g, seq_i, {3, 4, 5, 6});
    num::Var zt = gather_rows(g, seq_t, {2, 3, 4, 5, 6});
    num::Var rec_i = mse(g, decode_image_graph(g, params, zi), patches);
    num::Var rec_t = cross_entropy(g, decode_text_graph(g, params, zt), ids);
    num::Var kl = add(g, kl_standard_normal(g, ei.mu, ei.sigma), kl_standard_normal(g, et.mu, et.sigma));
    // probe so the padding and time tokens carry gradient
    num::Var probe = add(g, mean_all(g, mul_const(g, seq_i, w_img)), mean_all(g, mul_const(g, seq_t, w_txt)));
    return weighted_sum(g, {rec_i, rec_t, kl, probe}, {1.0, 1.0, 0.1, 1.0});
  };
  num::Graph<double> g;
  g.backward(loss(g));
  params.for_each([&](const char* name, num::Tensor<double>& t) {
    const auto analytic = g.param_grad(std::string(kPrefix) + name, t.shape());
    const num::Tensor<double> saved = t;
    auto numeric = num::finite_diff_grad5(
        [&](const num::Tensor<double>& v) {
          t = v;
          num::Graph<double> h;
          return h.value(loss(h))[0];
        },
        saved);
    t = saved;
    out.push_back({"codec", name, num::max_relative_error(analytic, numeric)});
  });
}

}  // namespace detail

/// Analytic gradients against 64-bit five-point central differences: score entropy w.r.t. s,
/// every parameter and the input of a 4-state block on 8 content positions
/// (selection and scan included), and every codec parameter through the losses.
inline std::vector<GradCheck> run_gradient_suite(std::uint64_t seed) {
  num::Rng root(seed);
  std::vector<GradCheck> out;
  num::Rng a = root.fork(0), b = root.fork(1), c = root.fork(2);
  detail::check_score(a, out);
  detail::check_block(b, out);
  detail::check_codec(c, out);
  return out;
}

}  // namespace mdm::pipeline
