#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "mdm/numerics/container.hpp"
#include "mdm/pipeline/train.hpp"

namespace mdm::pipeline {

inline constexpr int kCheckpointVersion = 1;

template <Real T>
num::Container checkpoint_container(const TrainState<T>& s) {
  num::Container c;
  nlohmann::json h = {{"format", "mdm-checkpoint"},
                      {"version", kCheckpointVersion},
                      {"precision", num::precision_of<T>() == num::Precision::f32 ? "f32" : "f64"},
                      {"config", to_json(s.cfg)},
                      {"schedule", s.model.sched.to_json()},
                      {"step", s.step},
                      {"rng", {{"seed", s.rng.seed()}, {"counter", s.rng.counter()}}},
                      {"tokenizer", s.tokenizer.has_value()}};
  c.put_bytes("header", h.dump());
  if (s.tokenizer) c.put_bytes("tokenizer", s.tokenizer->to_tsv());
  s.model.for_each([&](const std::string& n, const Tensor<T>& t) {
    c.put(n, t);
    c.put("ema/" + n, s.ema.at(n));
    c.put("adam/m/" + n, s.adam_m.at(n));
    c.put("adam/v/" + n, s.adam_v.at(n));
  });
  return c;
}

template <Real T>
void save_checkpoint(const TrainState<T>& s, const std::filesystem::path& path) {
  checkpoint_container(s).save(path);
}

/// Builds a complete state or throws; nothing is returned on failure.
template <Real T>
TrainState<T> state_from_container(const num::Container& c) {
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(c.get_bytes("header"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  try {
    if (h.at("format").get<std::string>() != "mdm-checkpoint") throw FormatError("checkpoint: not an mdm checkpoint");
    const int version = h.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw FormatError("checkpoint: version " + std::to_string(version) + " not supported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    TrainConfig cfg;
    try {
      cfg = train_config_from_json(h.at("config"));
    } catch (const ArgumentError& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
    TrainState<T> s;
    s.cfg = cfg;
    num::Rng scratch(0);
    s.model = init_model<T>(cfg.model, scratch);
    s.model.sched = diffusion::schedule_from_json(h.at("schedule"));
    ParamMap<T> params;
    s.model.for_each([&](const std::string& n, const Tensor<T>&) {
      params[n] = c.get<T>(n);
      s.ema[n] = c.get<T>("ema/" + n);
      s.adam_m[n] = c.get<T>("adam/m/" + n);
      s.adam_v[n] = c.get<T>("adam/v/" + n);
    });
    s.model.assign(params);
    s.model.for_each([&](const std::string& n, const Tensor<T>& t) {
      for (const auto* m : {&s.ema.at(n), &s.adam_m.at(n), &s.adam_v.at(n)}) {
        if (m->shape() != t.shape()) throw FormatError("checkpoint: optimizer state shape mismatch for '" + n + "'");
      }
    });
    s.step = h.at("step").get<std::size_t>();
    s.rng = num::Rng(h.at("rng").at("seed").get<std::uint64_t>(), h.at("rng").at("counter").get<std::uint64_t>());
    if (h.at("tokenizer").get<bool>()) s.tokenizer = tok::TokenizerModel::from_tsv(c.get_bytes("tokenizer"));
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
}

template <Real T>
TrainState<T> load_checkpoint(const std::filesystem::path& path) {
  return state_from_container<T>(num::Container::load(path));
}

}  // namespace mdm::pipeline
