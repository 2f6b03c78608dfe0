#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mdm/codec/codec.hpp"
#include "mdm/mamba/block.hpp"
#include "mdm/pipeline/config.hpp"

namespace mdm::pipeline {

using num::Real;
using num::Tensor;
using num::Var;

template <Real T>
using ParamMap = std::map<std::string, Tensor<T>>;

template <Real T>
struct Model {
  ModelConfig cfg;
  diffusion::NoiseSchedule sched;
  codec::CodecParams<T> codec;
  std::vector<mamba::MambaBlockParams<T>> blocks;

  static std::string block_prefix(std::size_t i) { return "mamba/" + std::to_string(i) + "/"; }

  /// Visits every parameter with its checkpoint name, in a fixed order.
  template <class F>
  void for_each(F&& fn) {
    codec.for_each([&](const char* n, Tensor<T>& t) { fn(std::string(codec::kPrefix) + n, t); });
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].for_each([&](const char* n, Tensor<T>& t) { fn(block_prefix(i) + n, t); });
  }
  template <class F>
  void for_each(F&& fn) const {
    const_cast<Model*>(this)->for_each([&](const std::string& n, Tensor<T>& t) { fn(n, std::as_const(t)); });
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const Tensor<T>& t) { n += t.size(); });
    return n;
  }

  ParamMap<T> params() const {
    ParamMap<T> m;
    for_each([&](const std::string& n, const Tensor<T>& t) { m[n] = t; });
    return m;
  }

  /// Overwrites parameters from a map; every name must be present with its shape.
  void assign(const ParamMap<T>& m) {
    for_each([&](const std::string& n, Tensor<T>& t) {
      auto it = m.find(n);
      if (it == m.end()) throw FormatError("missing parameter '" + n + "'");
      if (it->second.shape() != t.shape()) {
        throw FormatError("parameter '" + n + "' has shape " + num::shape_str(it->second.shape()) + ", expected " +
                          num::shape_str(t.shape()));
      }
      t = it->second;
    });
  }
};

template <Real T>
Model<T> init_model(const ModelConfig& cfg, num::Rng& rng) {
  cfg.validate();
  Model<T> m;
  m.cfg = cfg;
  m.sched = cfg.schedule();
  num::Rng crng = rng.fork(0);
  m.codec = codec::init_codec<T>(cfg.codec, crng);
  for (std::size_t i = 0; i < cfg.blocks; ++i) {
    num::Rng brng = rng.fork(1, i);
    m.blocks.push_back(mamba::init_block<T>(cfg.block, brng));
  }
  return m;
}

template <Real T>
struct StackOutput {
  Var content;  // [Lc x D] estimate of the clean latents
  Var se;       // [1 x 1] mean score entropy over blocks and positions
  std::vector<std::vector<bool>> masks;
  std::vector<Tensor<T>> f_values;  // per block [Lc x K]
};

/// Denoiser: pads the content with [pad, time, class?, ..., pad], runs the block
/// stack from t down to 0 in equal steps, and returns the content rows.
template <Real T>
StackOutput<T> denoise_graph(num::Graph<T>& g, const Model<T>& m, Var content, Modality mod, double t,
                             std::optional<std::size_t> class_id, const std::vector<Tensor<T>>& candidates,
                             const mamba::BlockOptions& opt = {}) {
  if (!(t > 0.0 && t <= static_cast<double>(m.sched.T))) {
    throw ArgumentError("denoise: t=" + std::to_string(t) + " outside (0, T]");
  }
  const std::size_t Lc = g.value(content).dim(0);
  const auto roles = codec::padded_roles(Lc, class_id.has_value());
  const std::size_t rows = mod == Modality::image ? m.cfg.codec.grid_rows() : 0;
  const std::size_t cols = mod == Modality::image ? m.cfg.codec.grid_cols() : 0;
  const auto layout = mamba::make_layout(roles, mamba::make_scan_orders(roles, mod, rows, cols));
  Var x = codec::assemble_graph(g, m.codec, content, mod, t, class_id);
  const std::size_t M = m.blocks.size();
  const double dt = t / static_cast<double>(M);
  StackOutput<T> out;
  std::vector<Var> se;
  mamba::BlockOptions o = opt;
  o.policy = m.cfg.selection;
  if (opt.forced_mask) o.forced_mask = opt.forced_mask;
  for (std::size_t b = 0; b < M; ++b) {
    const double tb = t - static_cast<double>(b) * dt;
    auto step = mamba::block_step(g, m.blocks[b], Model<T>::block_prefix(b), x, layout, tb, std::min(dt, tb), m.sched,
                                  candidates, o);
    x = step.out;
    se.push_back(num::ad::mean_all(g, step.se));
    out.masks.push_back(std::move(step.mask));
    out.f_values.push_back(std::move(step.values.f));
  }
  out.content = num::ad::gather_rows(g, x, layout.content);
  out.se = se.size() == 1 ? se[0] : num::ad::mean_of(g, se);
  return out;
}

}  // namespace mdm::pipeline
