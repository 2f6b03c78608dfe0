#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "mdm/codec/codec.hpp"
#include "mdm/diffusion/schedule.hpp"
#include "mdm/mamba/block.hpp"

namespace mdm::pipeline {

struct ModelConfig {
  codec::CodecConfig codec;
  mamba::BlockConfig block;
  std::size_t blocks = 4;
  mamba::SelectionPolicy selection;
  bool extra_noise = true;
  std::size_t candidates = 8;  // clean state plus earlier states
  std::size_t schedule_T = 1000;
  double beta_start = 1e-4, beta_end = 0.02;
  diffusion::ScheduleKind schedule_kind = diffusion::ScheduleKind::linear;

  void validate() const {
    codec.validate();
    if (block.model_dim != codec.latent_dim) throw ArgumentError("config: block model_dim must equal latent_dim");
    if (blocks == 0) throw ArgumentError("config: need at least one block");
    if (candidates == 0) throw ArgumentError("config: candidates must be >= 1");
    if (!(selection.tau >= 0.0)) throw ArgumentError("config: selection tau must be >= 0");
  }

  diffusion::NoiseSchedule schedule() const {
    return diffusion::build_schedule(schedule_T, beta_start, beta_end, schedule_kind);
  }
};

struct TrainConfig {
  ModelConfig model;
  double learning_rate = 1e-4;
  double weight_decay = 0.0;
  double ema_decay = 0.9999;
  double beta_kl = 1e-2;
  double lambda_se = 1.0;
  double class_drop = 0.1;
  double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
  std::size_t steps = 2000;
  std::size_t batch = 8;
  std::uint64_t seed = 7;
  std::size_t threads = 0;  // 0: MDM_THREADS or hardware concurrency

  void validate() const {
    model.validate();
    if (!(learning_rate > 0.0)) throw ArgumentError("config: learning_rate must be > 0");
    if (!(weight_decay >= 0.0)) throw ArgumentError("config: weight_decay must be >= 0");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ArgumentError("config: ema_decay must be in [0, 1)");
    if (!(beta_kl >= 0.0 && lambda_se >= 0.0)) throw ArgumentError("config: beta_kl and lambda_se must be >= 0");
    if (!(class_drop >= 0.0 && class_drop <= 1.0)) throw ArgumentError("config: class_drop must be in [0, 1]");
    if (batch == 0) throw ArgumentError("config: batch must be >= 1");
  }
};

/// Desk-scale toy run: the two-class 8x8 set for 2000 steps, 64-piece captions.
inline TrainConfig toy_train_config() {
  TrainConfig t;
  t.model.codec.vocab = 64;
  t.learning_rate = 1e-3;
  t.batch = 8;
  return t;
}

inline nlohmann::json to_json(const ModelConfig& m) {
  const auto& c = m.codec;
  return {{"height", c.height},
          {"width", c.width},
          {"channels", c.channels},
          {"patch", c.patch},
          {"latent_dim", c.latent_dim},
          {"vocab", c.vocab},
          {"max_text_len", c.max_text_len},
          {"num_classes", c.num_classes},
          {"blocks", m.blocks},
          {"expand_dim", m.block.expand_dim},
          {"state_dim", m.block.state_dim},
          {"conv_width", m.block.conv_width},
          {"selection", m.selection.kind == mamba::SelectionPolicy::Kind::threshold ? "threshold" : "top_j"},
          {"tau", m.selection.tau},
          {"top_j", m.selection.j},
          {"extra_noise", m.extra_noise},
          {"candidates", m.candidates},
          {"schedule", {{"kind", diffusion::to_string(m.schedule_kind)},
                        {"T", m.schedule_T},
                        {"beta_start", m.beta_start},
                        {"beta_end", m.beta_end}}}};
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"model", to_json(t.model)},    {"learning_rate", t.learning_rate}, {"weight_decay", t.weight_decay},
          {"ema_decay", t.ema_decay},     {"beta_kl", t.beta_kl},             {"lambda_se", t.lambda_se},
          {"class_drop", t.class_drop},   {"adam_beta1", t.adam_beta1},       {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps},       {"steps", t.steps},                 {"batch", t.batch},
          {"seed", t.seed},               {"threads", t.threads}};
}

namespace detail {
template <class V>
void read_opt(const nlohmann::json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}
}  // namespace detail

/// Missing keys keep their defaults; unknown keys are rejected.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig m = {}) {
  static const char* known[] = {"height",     "width",      "channels",  "patch",    "latent_dim", "vocab",
                                "max_text_len", "num_classes", "blocks", "expand_dim", "state_dim", "conv_width",
                                "selection",  "tau",        "top_j",     "extra_noise", "candidates", "schedule"};
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (std::find(std::begin(known), std::end(known), it.key()) == std::end(known)) {
        throw ArgumentError("config: unknown model key '" + it.key() + "'");
      }
    }
    auto& c = m.codec;
    detail::read_opt(j, "height", c.height);
    detail::read_opt(j, "width", c.width);
    detail::read_opt(j, "channels", c.channels);
    detail::read_opt(j, "patch", c.patch);
    detail::read_opt(j, "latent_dim", c.latent_dim);
    detail::read_opt(j, "vocab", c.vocab);
    detail::read_opt(j, "max_text_len", c.max_text_len);
    detail::read_opt(j, "num_classes", c.num_classes);
    detail::read_opt(j, "blocks", m.blocks);
    m.block.model_dim = c.latent_dim;
    detail::read_opt(j, "expand_dim", m.block.expand_dim);
    detail::read_opt(j, "state_dim", m.block.state_dim);
    detail::read_opt(j, "conv_width", m.block.conv_width);
    if (j.contains("selection")) {
      const auto s = j.at("selection").get<std::string>();
      if (s == "threshold") m.selection.kind = mamba::SelectionPolicy::Kind::threshold;
      else if (s == "top_j") m.selection.kind = mamba::SelectionPolicy::Kind::top_j;
      else throw ArgumentError("config: selection must be 'threshold' or 'top_j'");
    }
    detail::read_opt(j, "tau", m.selection.tau);
    detail::read_opt(j, "top_j", m.selection.j);
    detail::read_opt(j, "extra_noise", m.extra_noise);
    detail::read_opt(j, "candidates", m.candidates);
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      detail::read_opt(s, "T", m.schedule_T);
      detail::read_opt(s, "beta_start", m.beta_start);
      detail::read_opt(s, "beta_end", m.beta_end);
      if (s.contains("kind")) m.schedule_kind = diffusion::schedule_kind_from(s.at("kind").get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("config: ") + e.what());
  }
  m.validate();
  return m;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig t = {}) {
  static const char* known[] = {"model",      "learning_rate", "weight_decay", "ema_decay", "beta_kl",
                                "lambda_se",  "class_drop",    "adam_beta1",   "adam_beta2", "adam_eps",
                                "steps",      "batch",         "seed",         "threads"};
  try {
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (std::find(std::begin(known), std::end(known), it.key()) == std::end(known)) {
        throw ArgumentError("config: unknown key '" + it.key() + "'");
      }
    }
    if (j.contains("model")) t.model = model_config_from_json(j.at("model"), t.model);
    detail::read_opt(j, "learning_rate", t.learning_rate);
    detail::read_opt(j, "weight_decay", t.weight_decay);
    detail::read_opt(j, "ema_decay", t.ema_decay);
    detail::read_opt(j, "beta_kl", t.beta_kl);
    detail::read_opt(j, "lambda_se", t.lambda_se);
    detail::read_opt(j, "class_drop", t.class_drop);
    detail::read_opt(j, "adam_beta1", t.adam_beta1);
    detail::read_opt(j, "adam_beta2", t.adam_beta2);
    detail::read_opt(j, "adam_eps", t.adam_eps);
    detail::read_opt(j, "steps", t.steps);
    detail::read_opt(j, "batch", t.batch);
    detail::read_opt(j, "seed", t.seed);
    detail::read_opt(j, "threads", t.threads);
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("config: ") + e.what());
  }
  t.validate();
  return t;
}

}  // namespace mdm::pipeline
