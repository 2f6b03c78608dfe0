#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mdm/latent.hpp"
#include "mdm/numerics/graph.hpp"
#include "mdm/numerics/ops.hpp"
#include "mdm/numerics/rng.hpp"
#include "mdm/numerics/tensor.hpp"

namespace mdm::codec {

using num::Real;
using num::Tensor;
using num::Var;

struct CodecConfig {
  std::size_t height = 8, width = 8, channels = 1, patch = 2;
  std::size_t latent_dim = 64;
  std::size_t vocab = 256;
  std::size_t max_text_len = 32;
  std::size_t num_classes = 2;

  std::size_t patch_values() const { return patch * patch * channels; }
  std::size_t grid_rows() const { return height / patch; }
  std::size_t grid_cols() const { return width / patch; }
  std::size_t patch_count() const { return grid_rows() * grid_cols(); }

  void validate() const {
    if (patch == 0 || height % patch || width % patch) throw ArgumentError("codec: image dims not divisible by patch");
    if (latent_dim == 0 || latent_dim % 2) throw ArgumentError("codec: latent_dim must be even and positive");
    if (vocab == 0 || max_text_len == 0 || channels == 0) throw ArgumentError("codec: empty vocab, text or channels");
  }

  nlohmann::json to_json() const {
    return {{"height", height}, {"width", width}, {"channels", channels}, {"patch", patch},
            {"latent_dim", latent_dim}, {"vocab", vocab}, {"max_text_len", max_text_len},
            {"num_classes", num_classes}};
  }
};

// ---------------------------------------------------------------------------
// Patches

/// image [H x W x C] -> [(H/p)(W/p) x p*p*C], patches row-major, values (dy, dx, c) order.
template <Real T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t p) {
  if (image.rank() != 3) throw ArgumentError("patchify: image must be [H x W x C]");
  const std::size_t H = image.dim(0), W = image.dim(1), C = image.dim(2);
  if (p == 0 || H % p || W % p) {
    throw ArgumentError("patchify: " + num::shape_str(image.shape()) + " not divisible by patch " + std::to_string(p));
  }
  const std::size_t gr = H / p, gc = W / p, P = p * p * C;
  Tensor<T> out({gr * gc, P});
  for (std::size_t r = 0; r < gr; ++r)
    for (std::size_t c = 0; c < gc; ++c)
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t ch = 0; ch < C; ++ch)
            out[(r * gc + c) * P + (dy * p + dx) * C + ch] = image[((r * p + dy) * W + c * p + dx) * C + ch];
  return out;
}

template <Real T>
Tensor<T> unpatchify(const Tensor<T>& patches, std::size_t H, std::size_t W, std::size_t C, std::size_t p) {
  if (p == 0 || H % p || W % p) throw ArgumentError("unpatchify: dims not divisible by patch");
  const std::size_t gr = H / p, gc = W / p, P = p * p * C;
  if (patches.size() != gr * gc * P) throw ArgumentError("unpatchify: patch count does not match the image");
  Tensor<T> out({H, W, C});
  for (std::size_t r = 0; r < gr; ++r)
    for (std::size_t c = 0; c < gc; ++c)
      for (std::size_t dy = 0; dy < p; ++dy)
        for (std::size_t dx = 0; dx < p; ++dx)
          for (std::size_t ch = 0; ch < C; ++ch)
            out[((r * p + dy) * W + c * p + dx) * C + ch] = patches[(r * gc + c) * P + (dy * p + dx) * C + ch];
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

template <Real T>
struct CodecParams {
  CodecConfig cfg;
  Tensor<T> patch_w, patch_b;  // [D x P], [D]
  Tensor<T> embed;             // [V x D]
  Tensor<T> mu_w, mu_b;        // [D x D], [D]
  Tensor<T> sig_w, sig_b;      // [D x D], [D]; sigma = softplus(.)
  Tensor<T> img_w, img_b;      // [P x D], [P]
  Tensor<T> txt_w, txt_b;      // [V x D], [V]
  Tensor<T> pad_start_img, pad_end_img, pad_start_txt, pad_end_txt;  // [1 x D]
  Tensor<T> time_w, time_b;    // [D x D], [D]
  Tensor<T> class_emb;         // [classes x D]

  template <class F>
  void for_each(F&& fn) {
    fn("patch_w", patch_w);
    fn("patch_b", patch_b);
    fn("embed", embed);
    fn("mu_w", mu_w);
    fn("mu_b", mu_b);
    fn("sig_w", sig_w);
    fn("sig_b", sig_b);
    fn("img_w", img_w);
    fn("img_b", img_b);
    fn("txt_w", txt_w);
    fn("txt_b", txt_b);
    fn("pad_start_img", pad_start_img);
    fn("pad_end_img", pad_end_img);
    fn("pad_start_txt", pad_start_txt);
    fn("pad_end_txt", pad_end_txt);
    fn("time_w", time_w);
    fn("time_b", time_b);
    fn("class_emb", class_emb);
  }
  template <class F>
  void for_each(F&& fn) const {
    const_cast<CodecParams*>(this)->for_each(
        [&](const char* name, Tensor<T>& t) { fn(name, static_cast<const Tensor<T>&>(t)); });
  }
};

template <Real T>
CodecParams<T> init_codec(const CodecConfig& cfg, num::Rng& rng) {
  cfg.validate();
  const std::size_t D = cfg.latent_dim, P = cfg.patch_values(), V = cfg.vocab;
  auto normal = [&](num::Shape s, double std) {
    Tensor<T> t(s);
    for (auto& v : t.values()) v = static_cast<T>(std * rng.normal());
    return t;
  };
  const double sd = 1.0 / std::sqrt(static_cast<double>(D));
  CodecParams<T> p;
  p.cfg = cfg;
  p.patch_w = normal({D, P}, 1.0 / std::sqrt(static_cast<double>(P)));
  p.patch_b = Tensor<T>({D});
  p.embed = normal({V, D}, 1.0);
  p.mu_w = normal({D, D}, sd);
  p.mu_b = Tensor<T>({D});
  p.sig_w = normal({D, D}, 0.01 * sd);
  p.sig_b = Tensor<T>({D}, static_cast<T>(num::inverse_softplus(1.0)));
  p.img_w = normal({P, D}, 0.1 * sd);
  p.img_b = Tensor<T>({P});
  p.txt_w = normal({V, D}, 0.1 * sd);
  p.txt_b = Tensor<T>({V});
  p.pad_start_img = normal({1, D}, 1.0);
  p.pad_end_img = normal({1, D}, 1.0);
  p.pad_start_txt = normal({1, D}, 1.0);
  p.pad_end_txt = normal({1, D}, 1.0);
  p.time_w = normal({D, D}, sd);
  p.time_b = Tensor<T>({D});
  p.class_emb = normal({std::max<std::size_t>(1, cfg.num_classes), D}, 1.0);
  return p;
}

/// Sinusoidal embedding of a (possibly fractional) diffusion time, [1 x dim].
template <Real T>
Tensor<T> sinusoidal_time(double t, std::size_t dim) {
  Tensor<T> e({1, dim});
  const std::size_t half = dim / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double w = std::exp(-std::log(10000.0) * static_cast<double>(2 * i) / static_cast<double>(dim));
    e[2 * i] = static_cast<T>(std::sin(t * w));
    e[2 * i + 1] = static_cast<T>(std::cos(t * w));
  }
  return e;
}

// ---------------------------------------------------------------------------
// Tape builders. Parameter names are prefixed with "codec/".

inline constexpr const char* kPrefix = "codec/";

template <Real T>
Var bind(num::Graph<T>& g, const CodecParams<T>& p, const std::string& name) {
  Var out;
  p.for_each([&](const char* n, const Tensor<T>& t) {
    if (name == n) out = g.param(kPrefix + name, t);
  });
  if (!out.valid()) throw ArgumentError("codec: no parameter '" + name + "'");
  return out;
}

template <Real T>
Var image_features(num::Graph<T>& g, const CodecParams<T>& p, const Tensor<T>& patches) {
  return num::ad::linear(g, g.constant(patches), bind(g, p, "patch_w"), bind(g, p, "patch_b"));
}

template <Real T>
Var text_features(num::Graph<T>& g, const CodecParams<T>& p, const std::vector<std::size_t>& ids) {
  for (auto id : ids)
    if (id >= p.cfg.vocab) throw ArgumentError("codec: token id " + std::to_string(id) + " outside vocabulary");
  return num::ad::gather_rows(g, bind(g, p, "embed"), ids);
}

struct EncodeOptions {
  bool extra_noise = true;  // z = s + eps on top of s ~ N(mu, sigma)
  bool zero_sigma = false;  // clamped test mode: s = mu
};

struct EncodeVars {
  Var mu, sigma, z0;
};

/// mu, sigma from the features; z0 = mu + sigma * n + eps with the given draws.
template <Real T>
EncodeVars encode_graph(num::Graph<T>& g, const CodecParams<T>& p, Var h, const Tensor<T>& n, const Tensor<T>& eps,
                        const EncodeOptions& opt = {}) {
  using namespace num::ad;
  EncodeVars e;
  e.mu = linear(g, h, bind(g, p, "mu_w"), bind(g, p, "mu_b"));
  e.sigma = softplus(g, linear(g, h, bind(g, p, "sig_w"), bind(g, p, "sig_b")));
  e.z0 = e.mu;
  if (!opt.zero_sigma) e.z0 = add(g, e.z0, mul_const(g, e.sigma, n));
  if (opt.extra_noise) e.z0 = add_const(g, e.z0, eps);
  return e;
}

template <Real T>
Var decode_image_graph(num::Graph<T>& g, const CodecParams<T>& p, Var z) {
  return num::ad::linear(g, z, bind(g, p, "img_w"), bind(g, p, "img_b"));
}

template <Real T>
Var decode_text_graph(num::Graph<T>& g, const CodecParams<T>& p, Var z) {
  return num::ad::linear(g, z, bind(g, p, "txt_w"), bind(g, p, "txt_b"));
}

template <Real T>
Var time_token(num::Graph<T>& g, const CodecParams<T>& p, double t) {
  return num::ad::linear(g, g.constant(sinusoidal_time<T>(t, p.cfg.latent_dim)), bind(g, p, "time_w"),
                         bind(g, p, "time_b"));
}

template <Real T>
Var class_token(num::Graph<T>& g, const CodecParams<T>& p, std::size_t class_id) {
  if (class_id >= p.class_emb.dim(0)) throw ArgumentError("codec: class id " + std::to_string(class_id) + " out of range");
  return num::ad::gather_rows(g, bind(g, p, "class_emb"), {class_id});
}

/// Roles of the padded layout [pad, time, class?, content..., pad].
inline std::vector<Role> padded_roles(std::size_t content, bool with_class) {
  std::vector<Role> r{Role::pad, Role::time};
  if (with_class) r.push_back(Role::klass);
  r.insert(r.end(), content, Role::content);
  r.push_back(Role::pad);
  return r;
}

template <Real T>
Var assemble_graph(num::Graph<T>& g, const CodecParams<T>& p, Var content, Modality m, double t,
                   std::optional<std::size_t> class_id) {
  const bool img = m == Modality::image;
  std::vector<Var> parts{bind(g, p, img ? "pad_start_img" : "pad_start_txt"), time_token(g, p, t)};
  if (class_id) parts.push_back(class_token(g, p, *class_id));
  parts.push_back(content);
  parts.push_back(bind(g, p, img ? "pad_end_img" : "pad_end_txt"));
  return num::ad::concat_rows(g, parts);
}

// ---------------------------------------------------------------------------
// Direct forms

template <Real T>
struct EncodeResult {
  LatentSequence<T> z;  // content only, t = 0
  Tensor<T> mu, sigma, n, eps;
};

namespace detail {
template <Real T>
EncodeResult<T> encode_from(num::Graph<T>& g, const CodecParams<T>& p, Var h, Modality m, std::size_t rows,
                            std::size_t cols, num::Rng& rng, const EncodeOptions& opt) {
  const auto& H = g.value(h);
  const num::Shape s{H.dim(0), p.cfg.latent_dim};
  EncodeResult<T> r;
  r.n = num::standard_normal<T>(rng, s);
  r.eps = opt.extra_noise ? num::standard_normal<T>(rng, s) : Tensor<T>(s);
  const auto e = encode_graph(g, p, h, r.n, r.eps, opt);
  r.mu = g.value(e.mu);
  r.sigma = opt.zero_sigma ? Tensor<T>(s) : g.value(e.sigma);
  r.z = LatentSequence<T>::content_only(g.value(e.z0), m, rows, cols);
  return r;
}
}  // namespace detail

/// Image patches [Lc x P] -> latent sequence on the patch grid.
template <Real T>
EncodeResult<T> encode_latent(const CodecParams<T>& p, const Tensor<T>& patches, num::Rng& rng,
                              const EncodeOptions& opt = {}) {
  if (patches.rank() != 2 || patches.dim(0) == 0 || patches.dim(1) != p.cfg.patch_values()) {
    throw ArgumentError("encode_latent: expected [count x " + std::to_string(p.cfg.patch_values()) + "] patches, got " +
                        num::shape_str(patches.shape()));
  }
  std::size_t rows = p.cfg.grid_rows(), cols = p.cfg.grid_cols();
  if (rows * cols != patches.dim(0)) {
    rows = 1;
    cols = patches.dim(0);
  }
  num::Graph<T> g;
  return detail::encode_from(g, p, image_features(g, p, patches), Modality::image, rows, cols, rng, opt);
}

/// Token ids -> latent text sequence.
template <Real T>
EncodeResult<T> encode_latent(const CodecParams<T>& p, const std::vector<std::size_t>& ids, num::Rng& rng,
                              const EncodeOptions& opt = {}) {
  if (ids.empty()) throw ArgumentError("encode_latent: empty token sequence");
  num::Graph<T> g;
  return detail::encode_from(g, p, text_features(g, p, ids), Modality::text, 0, 0, rng, opt);
}

template <Real T>
LatentSequence<T> insert_padding_tokens(const CodecParams<T>& p, const LatentSequence<T>& seq, double t,
                                        std::optional<std::size_t> class_id = std::nullopt) {
  if (seq.has_specials()) throw StateError("insert_padding_tokens: sequence already carries special tokens");
  if (seq.dim() != p.cfg.latent_dim) throw ArgumentError("insert_padding_tokens: latent dim mismatch");
  num::Graph<T> g;
  Var v = assemble_graph(g, p, g.constant(seq.vectors), seq.modality, t, class_id);
  LatentSequence<T> out = seq;
  out.vectors = g.value(v);
  out.roles = padded_roles(seq.length(), class_id.has_value());
  out.t = t;
  return out;
}

template <Real T>
LatentSequence<T> strip_padding_tokens(const LatentSequence<T>& seq) {
  const auto idx = seq.content_index();
  const std::size_t D = seq.dim();
  LatentSequence<T> out = seq;
  out.vectors = Tensor<T>({idx.size(), D});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t d = 0; d < D; ++d) out.vectors[i * D + d] = seq.vectors[idx[i] * D + d];
  out.roles.assign(idx.size(), Role::content);
  return out;
}

/// 1/n sum (a - b)^2, summed in order.
template <Real T>
double image_mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size() || a.size() == 0) throw ArgumentError("image_mse: size mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

/// Mean over positions of -log softmax(logits)[id].
template <Real T>
double text_cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& ids) {
  const std::size_t L = logits.dim(0), V = logits.size() / std::max<std::size_t>(1, L);
  if (ids.size() != L) throw ArgumentError("decode_text: reference length mismatch");
  std::vector<double> row(V);
  double acc = 0;
  for (std::size_t r = 0; r < L; ++r) {
    if (ids[r] >= V) throw ArgumentError("decode_text: reference id out of range");
    for (std::size_t v = 0; v < V; ++v) row[v] = logits[r * V + v];
    num::log_softmax_inplace<double>(row);
    acc -= row[ids[r]];
  }
  return acc / static_cast<double>(L);
}

template <Real T>
struct ImageDecode {
  Tensor<T> image;  // [H x W x C]
  double loss = 0;  // against the reference, when given
};

template <Real T>
ImageDecode<T> decode_image(const CodecParams<T>& p, const LatentSequence<T>& z0,
                            const Tensor<T>* reference = nullptr) {
  if (z0.modality != Modality::image) throw ArgumentError("decode_image: sequence modality is text");
  const auto content = strip_padding_tokens(z0);
  num::Graph<T> g;
  const Tensor<T> patches = g.value(decode_image_graph(g, p, g.constant(content.vectors)));
  const auto& c = p.cfg;
  ImageDecode<T> r;
  r.image = unpatchify(patches, content.rows * c.patch, content.cols * c.patch, c.channels, c.patch);
  if (reference) {
    if (reference->size() != r.image.size()) throw ArgumentError("decode_image: reference shape mismatch");
    r.loss = image_mse(r.image, *reference);
  }
  return r;
}

template <Real T>
struct TextDecode {
  Tensor<T> logits;  // [L x V]
  double loss = 0;
};

template <Real T>
TextDecode<T> decode_text(const CodecParams<T>& p, const LatentSequence<T>& z0,
                          const std::vector<std::size_t>* reference_ids = nullptr) {
  if (z0.modality != Modality::text) throw ArgumentError("decode_text: sequence modality is image");
  const auto content = strip_padding_tokens(z0);
  num::Graph<T> g;
  TextDecode<T> r;
  r.logits = g.value(decode_text_graph(g, p, g.constant(content.vectors)));
  if (reference_ids) {
    if (reference_ids->size() != content.length()) throw ArgumentError("decode_text: reference length mismatch");
    r.loss = text_cross_entropy(r.logits, *reference_ids);
  }
  return r;
}

/// 0.5 sum (mu^2 + sigma^2 - 1 - 2 log sigma), averaged over positions (rows).
template <Real T>
double kl_loss(const Tensor<T>& mu, const Tensor<T>& sigma) {
  num::require_same_shape(mu, sigma, "kl_loss");
  const std::size_t rows = mu.rank() >= 2 ? mu.dim(0) : 1;
  double acc = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double m = mu[i], s = sigma[i];
    if (!(s > 0.0)) throw ArgumentError("kl_loss: sigma must be > 0");
    acc += m * m + s * s - 1.0 - 2.0 * std::log(s);
  }
  return std::max(0.0, 0.5 * acc / static_cast<double>(rows));
}

}  // namespace mdm::codec
