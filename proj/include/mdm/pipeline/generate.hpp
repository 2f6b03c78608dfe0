#pragma once

#include <cmath>
#include <deque>
#include <optional>
#include <vector>

#include "mdm/codec/codec.hpp"
#include "mdm/diffusion/solver.hpp"
#include "mdm/pipeline/model.hpp"

namespace mdm::pipeline {

struct GenerateOptions {
  std::optional<std::size_t> class_id;
  std::vector<std::size_t> prompt_tokens;  // fixed leading text tokens
  std::size_t steps = 10;
  double guidance = 1.0;
};

template <Real T>
struct Generation {
  Tensor<T> image;               // [H x W x C], decoder output
  std::vector<std::size_t> ids;  // argmax token per text position
  std::size_t evaluations = 0;   // stack passes for the image sequence
};

namespace detail {

template <Real T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  Tensor<T> p(logits.shape());
  const std::size_t R = logits.dim(0), V = logits.dim(1);
  for (std::size_t r = 0; r < R; ++r) {
    const T* in = logits.data() + r * V;
    T* out = p.data() + r * V;
    const double mx = *std::max_element(in, in + V);
    double z = 0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(static_cast<double>(in[v]) - mx);
    for (std::size_t v = 0; v < V; ++v) out[v] = static_cast<T>(std::exp(static_cast<double>(in[v]) - mx) / z);
  }
  return p;
}

/// Noise variance already present in a clean training latent, in encoder-mean units.
inline double noise_floor(const ModelConfig& cfg) { return cfg.extra_noise ? 1.0 : 0.0; }

/// Training step whose noise, on top of the floor, totals sigma; clamped to [1, T].
inline double model_time(const diffusion::NoiseSchedule& s, double floor, double sigma) {
  const double s1 = s.sigma_at(1.0);
  const double sm = std::sqrt(std::max(sigma * sigma - floor, s1 * s1));
  return std::clamp(s.time_for_sigma(sm), 1.0, static_cast<double>(s.T));
}

/// Clean-latent estimate for one modality. The stack output is decoded, and the
/// decoded expectation (pixel values, or token probabilities) is mapped back
/// through the affine encoder mean, giving E[z0 | z_t] in the encoder's space.
template <Real T>
class Denoiser {
 public:
  Denoiser(const Model<T>& m, Modality mod, std::optional<std::size_t> cls, double guidance)
      : m_(m), mod_(mod), cls_(cls), guidance_(guidance), floor_(noise_floor(m.cfg)) {}

  struct Estimate {
    Tensor<T> z0;       // latent estimate
    Tensor<T> decoded;  // image patches or text logits
  };

  /// Guided estimate: u + g (c - u) on the decoded outputs when g > 1 and a class is set.
  Estimate guided(const Tensor<T>& x, double sigma) {
    Tensor<T> dc = decode(x, sigma, cls_);
    if (cls_ && guidance_ > 1.0) {
      Tensor<T> du = decode(x, sigma, std::nullopt);
      const T gw = static_cast<T>(guidance_);
      for (std::size_t i = 0; i < dc.size(); ++i) dc[i] = du[i] + gw * (dc[i] - du[i]);
    }
    Estimate e{project(dc), std::move(dc)};
    history_.push_back(e.z0);
    if (history_.size() + 1 > m_.cfg.candidates) history_.pop_front();
    return e;
  }

  /// x-space probability-flow field (x - D(x)) / sigma.
  Tensor<T> field(const Tensor<T>& x, double sigma) {
    const Tensor<T> z0 = guided(x, sigma).z0;
    Tensor<T> f(x.shape());
    const T inv = static_cast<T>(1.0 / sigma);
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = (x[i] - z0[i]) * inv;
    return f;
  }

  std::size_t evaluations() const { return evals_; }

 private:
  Tensor<T> decode(const Tensor<T>& x, double sigma, std::optional<std::size_t> cls) {
    const double t = model_time(m_.sched, floor_, sigma);
    Tensor<T> z = x;
    const T s = static_cast<T>(std::sqrt(m_.sched.alpha_bar_at(t)));
    for (auto& v : z.values()) v *= s;
    const std::vector<Tensor<T>> cands(history_.begin(), history_.end());
    num::Graph<T> g;
    auto out = denoise_graph(g, m_, g.constant(std::move(z)), mod_, t, cls, cands);
    ++evals_;
    return g.value(mod_ == Modality::image ? codec::decode_image_graph(g, m_.codec, out.content)
                                           : codec::decode_text_graph(g, m_.codec, out.content));
  }

  Tensor<T> project(const Tensor<T>& decoded) const {
    num::Graph<T> g;
    const auto& cp = m_.codec;
    Var h = mod_ == Modality::image
                ? codec::image_features(g, cp, decoded)
                : g.constant(num::matmul(softmax_rows(decoded), cp.embed));
    return g.value(num::ad::linear(g, h, codec::bind(g, cp, "mu_w"), codec::bind(g, cp, "mu_b")));
  }

  const Model<T>& m_;
  Modality mod_;
  std::optional<std::size_t> cls_;
  double guidance_;
  double floor_;
  std::deque<Tensor<T>> history_;
  std::size_t evals_ = 0;
};

}  // namespace detail

/// Samples an image and a caption together. Both latent sequences start from
/// N(0, I) at t = T and follow the probability-flow ODE in x = z / sqrt(alpha_bar)
/// over Karras sigma levels with second-order steps; the outputs are the decoded
/// expectations at the last level. Levels are total noise around the encoder mean,
/// sqrt(floor + sigma_t^2) for t in [1, T], so the extra latent noise seen in
/// training is never integrated away.
template <Real T>
Generation<T> generate(const Model<T>& m, const GenerateOptions& opt, num::Rng& rng) {
  if (opt.steps < 1 || opt.steps > m.sched.T) {
    throw ArgumentError("generate: steps must be in [1, " + std::to_string(m.sched.T) + "]");
  }
  if (!(opt.guidance >= 0.0)) throw ArgumentError("generate: guidance must be >= 0");
  if (opt.class_id && *opt.class_id >= m.codec.class_emb.dim(0)) throw ArgumentError("generate: class id out of range");
  const auto& c = m.cfg.codec;
  if (opt.prompt_tokens.size() > c.max_text_len) throw ArgumentError("generate: prompt longer than max text length");
  const std::size_t D = c.latent_dim;
  const double floor = detail::noise_floor(m.cfg);
  const double sigma_max = std::sqrt(floor + std::pow(m.sched.sigma_at(static_cast<double>(m.sched.T)), 2));
  const double sigma_min = std::sqrt(floor + std::pow(m.sched.sigma_at(1.0), 2));
  const auto sigmas = diffusion::karras_sigmas(opt.steps, sigma_min, sigma_max);
  const T scale0 = static_cast<T>(std::sqrt(1.0 + sigma_max * sigma_max));

  Tensor<T> xi = num::standard_normal<T>(rng, {c.patch_count(), D});
  Tensor<T> xt = num::standard_normal<T>(rng, {c.max_text_len, D});
  Tensor<T> ep = num::standard_normal<T>(rng, {std::max<std::size_t>(1, opt.prompt_tokens.size()), D});
  for (auto& v : xi.values()) v *= scale0;
  for (auto& v : xt.values()) v *= scale0;

  Tensor<T> prompt_mu;
  if (!opt.prompt_tokens.empty()) {
    num::Graph<T> g;
    const std::size_t P = opt.prompt_tokens.size();
    auto e = codec::encode_graph(g, m.codec, codec::text_features(g, m.codec, opt.prompt_tokens), Tensor<T>({P, D}),
                                 Tensor<T>({P, D}), {false, true});
    prompt_mu = g.value(e.mu);
  }
  auto pin_prompt = [&](Tensor<T>& x, double sigma) {
    for (std::size_t i = 0; i < prompt_mu.size(); ++i) x[i] = prompt_mu[i] + static_cast<T>(sigma) * ep[i];
  };
  pin_prompt(xt, sigma_max);

  detail::Denoiser<T> di(m, Modality::image, opt.class_id, opt.guidance);
  detail::Denoiser<T> dt(m, Modality::text, opt.class_id, opt.guidance);
  diffusion::Evaluator<T> fi = [&](const Tensor<T>& x, double s) { return di.field(x, s); };
  diffusion::Evaluator<T> ft = [&](const Tensor<T>& x, double s) { return dt.field(x, s); };
  for (std::size_t k = 0; k < opt.steps; ++k) {
    const double h = sigmas[k] - sigmas[k + 1];
    xi = diffusion::dpm_solver_step(fi, xi, sigmas[k], h, k);
    xt = diffusion::dpm_solver_step(ft, xt, sigmas[k], h, k);
    pin_prompt(xt, sigmas[k + 1]);
  }
  const Tensor<T> patches = di.guided(xi, sigmas.back()).decoded;
  const Tensor<T> logits = dt.guided(xt, sigmas.back()).decoded;

  Generation<T> out;
  out.image = codec::unpatchify(patches, c.height, c.width, c.channels, c.patch);
  const std::size_t V = logits.dim(1);
  for (std::size_t r = 0; r < logits.dim(0); ++r) {
    if (r < opt.prompt_tokens.size()) {
      out.ids.push_back(opt.prompt_tokens[r]);
      continue;
    }
    const T* row = logits.data() + r * V;
    out.ids.push_back(static_cast<std::size_t>(std::max_element(row, row + V) - row));
  }
  out.evaluations = di.evaluations();
  return out;
}

}  // namespace mdm::pipeline
