#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mdm/errors.hpp"
#include "mdm/numerics/tensor.hpp"

namespace mdm {

enum class Role : unsigned char { content, time, klass, pad };
enum class Modality : unsigned char { image, text };

inline const char* to_string(Modality m) { return m == Modality::image ? "image" : "text"; }

/// Latent vectors [len x dim] with a role per row.
template <num::Real T>
struct LatentSequence {
  num::Tensor<T> vectors;
  std::vector<Role> roles;
  Modality modality = Modality::image;
  std::size_t rows = 0;  // image grid, zero for text
  std::size_t cols = 0;
  double t = 0.0;

  std::size_t length() const noexcept { return roles.size(); }
  std::size_t dim() const { return vectors.size() / std::max<std::size_t>(1, vectors.dim(0)); }

  std::vector<std::size_t> content_index() const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < roles.size(); ++i)
      if (roles[i] == Role::content) idx.push_back(i);
    return idx;
  }

  bool has_specials() const {
    for (Role r : roles)
      if (r != Role::content) return true;
    return false;
  }

  /// Throws StateError when the role layout breaks the sequence invariants.
  void validate() const {
    if (vectors.rank() != 2 || vectors.dim(0) != roles.size()) {
      throw StateError("latent sequence: " + std::to_string(roles.size()) + " roles for vectors " +
                       num::shape_str(vectors.shape()));
    }
    std::size_t time = 0, klass = 0, content = 0;
    for (Role r : roles) {
      time += r == Role::time;
      klass += r == Role::klass;
      content += r == Role::content;
    }
    if (has_specials() && time != 1) throw StateError("latent sequence: expected exactly one time token");
    if (klass > 1) throw StateError("latent sequence: more than one class token");
    if (modality == Modality::image && content != rows * cols) {
      throw StateError("latent sequence: image content count " + std::to_string(content) +
                       " does not match grid " + std::to_string(rows) + "x" + std::to_string(cols));
    }
  }

  static LatentSequence content_only(num::Tensor<T> v, Modality m, std::size_t rows = 0, std::size_t cols = 0) {
    LatentSequence s;
    s.roles.assign(v.dim(0), Role::content);
    s.vectors = std::move(v);
    s.modality = m;
    s.rows = rows;
    s.cols = cols;
    return s;
  }
};

}  // namespace mdm
