#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <mutex>
#include <thread>
#include <vector>

#include "mdm/codec/codec.hpp"
#include "mdm/pipeline/dataset.hpp"
#include "mdm/pipeline/model.hpp"
#include "mdm/tokenizer/unigram.hpp"

namespace mdm::pipeline {

/// L = rec_img + rec_txt + beta * kl + lambda * se
inline double total_loss(double rec_img, double rec_txt, double kl, double se, double beta_kl, double lambda_se) {
  return rec_img + rec_txt + beta_kl * kl + lambda_se * se;
}

struct LossParts {
  double total = 0, se = 0, rec_img = 0, rec_txt = 0, kl = 0;
};

struct Metrics {
  std::size_t step = 0;  // 1-based index of the completed step
  LossParts loss;
};

template <Real T>
struct Example {
  Tensor<T> patches;              // [Lc x P]
  std::vector<std::size_t> ids;   // max_text_len ids, EOS then PAD
  std::optional<std::size_t> class_id;
};

template <Real T>
std::vector<Example<T>> prepare_examples(const Dataset& d, const tok::TokenizerModel& tok,
                                         const ModelConfig& cfg) {
  const auto& c = cfg.codec;
  if (d.height() != c.height || d.width() != c.width || d.channels() != c.channels) {
    throw ArgumentError("prepare_examples: dataset images do not match the model image size");
  }
  if (tok.vocab_size() > c.vocab) {
    throw ArgumentError("prepare_examples: tokenizer vocabulary " + std::to_string(tok.vocab_size()) +
                        " exceeds model vocab " + std::to_string(c.vocab));
  }
  std::vector<Example<T>> out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    Example<T> e;
    e.patches = codec::patchify(d.image(i).template cast<T>(), c.patch);
    e.ids = caption_ids(tok, d.captions[i], c.max_text_len);
    if (!d.classes.empty()) e.class_id = d.classes[i];
    out.push_back(std::move(e));
  }
  return out;
}

template <Real T>
struct ItemLoss {
  Var total;
  Var rec_img, rec_txt, kl, se;
};

/// Per-item objective: encode, diffuse both modalities to a shared t, denoise with
/// the block stack, decode, and combine the loss terms. Draws are taken from rng
/// in a fixed order.
template <Real T>
ItemLoss<T> item_loss(num::Graph<T>& g, const Model<T>& m, const TrainConfig& cfg, const Example<T>& ex,
                      num::Rng& rng) {
  using namespace num::ad;
  const auto& cp = m.codec;
  const std::size_t D = m.cfg.codec.latent_dim;
  const codec::EncodeOptions eo{m.cfg.extra_noise, false};
  auto draw = [&](std::size_t rows) { return num::standard_normal<T>(rng, {rows, D}); };
  const std::size_t Li = ex.patches.dim(0), Lt = ex.ids.size();

  const auto ni = draw(Li), ei = eo.extra_noise ? draw(Li) : Tensor<T>({Li, D});
  const auto nt = draw(Lt), et = eo.extra_noise ? draw(Lt) : Tensor<T>({Lt, D});
  auto enc_i = codec::encode_graph(g, cp, codec::image_features(g, cp, ex.patches), ni, ei, eo);
  auto enc_t = codec::encode_graph(g, cp, codec::text_features(g, cp, ex.ids), nt, et, eo);

  const std::size_t t = rng.uniform_int(1, m.sched.T);
  const double ab = m.sched.alpha_bar(t);
  const bool drop = rng.uniform() < cfg.class_drop;
  const std::optional<std::size_t> cls = drop ? std::nullopt : ex.class_id;

  auto diffuse = [&](Var z0, std::size_t rows, Modality mod) {
    Tensor<T> eps = draw(rows);
    for (auto& v : eps.values()) v *= static_cast<T>(std::sqrt(1.0 - ab));
    Var zt = add_const(g, scale(g, z0, static_cast<T>(std::sqrt(ab))), eps);
    std::vector<Tensor<T>> cands{g.value(z0)};
    const std::size_t extra = std::min<std::size_t>(m.cfg.candidates - 1, t - 1);
    for (std::size_t k = 0; k < extra; ++k) {
      const double abk = m.sched.alpha_bar(rng.uniform_int(1, t - 1));
      Tensor<T> y = draw(rows);
      const auto& z = g.value(z0);
      for (std::size_t i = 0; i < y.size(); ++i)
        y[i] = static_cast<T>(std::sqrt(abk)) * z[i] + static_cast<T>(std::sqrt(1.0 - abk)) * y[i];
      cands.push_back(std::move(y));
    }
    return denoise_graph(g, m, zt, mod, static_cast<double>(t), cls, cands);
  };
  auto out_i = diffuse(enc_i.z0, Li, Modality::image);
  auto out_t = diffuse(enc_t.z0, Lt, Modality::text);

  ItemLoss<T> l;
  l.rec_img = mse(g, codec::decode_image_graph(g, cp, out_i.content), ex.patches);
  l.rec_txt = cross_entropy(g, codec::decode_text_graph(g, cp, out_t.content), ex.ids);
  const T wi = static_cast<T>(Li) / static_cast<T>(Li + Lt);
  l.kl = weighted_sum(g, {kl_standard_normal(g, enc_i.mu, enc_i.sigma), kl_standard_normal(g, enc_t.mu, enc_t.sigma)},
                      {wi, T{1} - wi});
  l.se = mean_of(g, {out_i.se, out_t.se});
  l.total = weighted_sum(g, {l.rec_img, l.rec_txt, l.kl, l.se},
                         {T{1}, T{1}, static_cast<T>(cfg.beta_kl), static_cast<T>(cfg.lambda_se)});
  return l;
}

// ---------------------------------------------------------------------------
// Optimizer and EMA

struct AdamConfig {
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.0;
};

/// Decoupled weight decay; t is the 1-based update count.
template <Real T>
void adamw_update(Tensor<T>& w, const Tensor<T>& grad, Tensor<T>& m, Tensor<T>& v, std::size_t t,
                  const AdamConfig& c) {
  num::require_same_shape(w, grad, "adamw");
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double g = grad[i];
    const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g;
    const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double upd = (mi / bc1) / (std::sqrt(vi / bc2) + c.eps) + c.weight_decay * w[i];
    if (upd != 0.0) w[i] = static_cast<T>(w[i] - c.lr * upd);
  }
}

/// shadow <- d * shadow + (1 - d) * w
template <Real T>
void ema_update(Tensor<T>& shadow, const Tensor<T>& w, double d) {
  num::require_same_shape(shadow, w, "ema");
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (shadow[i] == w[i]) continue;
    shadow[i] = static_cast<T>(d * shadow[i] + (1.0 - d) * w[i]);
  }
}

// ---------------------------------------------------------------------------

template <Real T>
struct TrainState {
  TrainConfig cfg;
  Model<T> model;
  ParamMap<T> ema, adam_m, adam_v;
  std::size_t step = 0;
  num::Rng rng;
  std::optional<tok::TokenizerModel> tokenizer;

  Model<T> ema_model() const {
    Model<T> m = model;
    m.assign(ema);
    return m;
  }
};

template <Real T>
TrainState<T> init_train_state(const TrainConfig& cfg) {
  cfg.validate();
  TrainState<T> s;
  s.cfg = cfg;
  num::Rng root(cfg.seed);
  num::Rng init = root.fork(0x1417);
  s.model = init_model<T>(cfg.model, init);
  s.ema = s.model.params();
  s.model.for_each([&](const std::string& n, const Tensor<T>& t) {
    s.adam_m[n] = Tensor<T>(t.shape());
    s.adam_v[n] = Tensor<T>(t.shape());
  });
  s.rng = root.fork(0x7124);
  return s;
}

inline std::size_t resolve_threads(std::size_t requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("MDM_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

template <Real T>
struct ItemResult {
  LossParts loss;
  ParamMap<T> grads;
};

template <Real T>
ItemResult<T> evaluate_item(const Model<T>& m, const TrainConfig& cfg, const Example<T>& ex, num::Rng rng) {
  num::Graph<T> g;
  auto l = item_loss(g, m, cfg, ex, rng);
  ItemResult<T> r;
  r.loss = {g.value(l.total)[0], g.value(l.se)[0], g.value(l.rec_img)[0], g.value(l.rec_txt)[0], g.value(l.kl)[0]};
  if (!std::isfinite(r.loss.total)) return r;
  g.backward(l.total);
  m.for_each([&](const std::string& n, const Tensor<T>& t) { r.grads[n] = g.param_grad(n, t.shape()); });
  return r;
}

/// One optimizer step on `batch`. Item i draws from rng.fork(i); per-item results
/// are reduced in item order, so the update does not depend on the thread count.
template <Real T>
Metrics train_step(TrainState<T>& s, const std::vector<const Example<T>*>& batch, const num::Rng& rng) {
  if (batch.empty()) throw ArgumentError("train_step: empty batch");
  const std::size_t B = batch.size();
  std::vector<ItemResult<T>> res(B);
  const std::size_t nt = std::min(resolve_threads(s.cfg.threads), B);
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < B; i += nt) res[i] = evaluate_item(s.model, s.cfg, *batch[i], rng.fork(i));
  };
  if (nt <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    std::exception_ptr err;
    std::mutex mu;
    for (std::size_t w = 0; w < nt; ++w) {
      pool.emplace_back([&, w] {
        try {
          work(w);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!err) err = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
  }

  Metrics out;
  out.step = s.step + 1;
  for (const auto& r : res) {
    out.loss.total += r.loss.total;
    out.loss.se += r.loss.se;
    out.loss.rec_img += r.loss.rec_img;
    out.loss.rec_txt += r.loss.rec_txt;
    out.loss.kl += r.loss.kl;
  }
  const double inv = 1.0 / static_cast<double>(B);
  out.loss.total *= inv;
  out.loss.se *= inv;
  out.loss.rec_img *= inv;
  out.loss.rec_txt *= inv;
  out.loss.kl *= inv;
  if (!std::isfinite(out.loss.total)) {
    char buf[256];
    std::snprintf(buf, sizeof buf,
                  "train_step: non-finite loss at step %zu (rec_img=%g rec_txt=%g kl=%g se=%g)", out.step,
                  out.loss.rec_img, out.loss.rec_txt, out.loss.kl, out.loss.se);
    throw NumericError(buf);
  }

  const AdamConfig ac{s.cfg.learning_rate, s.cfg.adam_beta1, s.cfg.adam_beta2, s.cfg.adam_eps, s.cfg.weight_decay};
  s.model.for_each([&](const std::string& n, Tensor<T>& w) {
    Tensor<T> grad = res[0].grads.at(n);
    for (std::size_t i = 1; i < B; ++i) {
      const auto& gi = res[i].grads.at(n);
      for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += gi[k];
    }
    for (auto& v : grad.values()) v = static_cast<T>(v * inv);
    adamw_update(w, grad, s.adam_m.at(n), s.adam_v.at(n), out.step, ac);
    ema_update(s.ema.at(n), w, s.cfg.ema_decay);
  });
  s.step = out.step;
  return out;
}

/// Batch for the current step, drawn with replacement from stream fork(step).
template <Real T>
std::vector<const Example<T>*> sample_batch(const TrainState<T>& s, const std::vector<Example<T>>& data) {
  if (data.empty()) throw ArgumentError("sample_batch: no training examples");
  num::Rng r = s.rng.fork(s.step, 0);
  std::vector<const Example<T>*> b;
  for (std::size_t i = 0; i < s.cfg.batch; ++i) b.push_back(&data[r.uniform_int(0, data.size() - 1)]);
  return b;
}

/// Runs `steps` more updates; on_step sees each step's metrics.
template <Real T, class F>
void train(TrainState<T>& s, const std::vector<Example<T>>& data, std::size_t steps, F&& on_step) {
  for (std::size_t k = 0; k < steps; ++k) {
    const auto batch = sample_batch(s, data);
    const Metrics m = train_step(s, batch, s.rng.fork(s.step, 1));
    on_step(m);
  }
}

/// Append-only metrics CSV; the header is written when the file is new or empty.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path) {
    const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    f_.open(path, std::ios::app | std::ios::binary);
    if (!f_) throw std::runtime_error("metrics: cannot open " + path.string());
    if (fresh) f_ << "step,loss_total,loss_se,loss_rec_img,loss_rec_txt,loss_kl\n";
  }

  void write(const Metrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", m.step, m.loss.total, m.loss.se, m.loss.rec_img,
                  m.loss.rec_txt, m.loss.kl);
    f_ << buf;
    f_.flush();
  }

 private:
  std::ofstream f_;
};

/// Trailing-window mean of a loss series.
inline std::vector<double> smooth(const std::vector<double>& x, std::size_t window) {
  std::vector<double> out(x.size());
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    acc += x[i];
    if (i >= window) acc -= x[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

}  // namespace mdm::pipeline
