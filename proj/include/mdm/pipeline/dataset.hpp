#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mdm/numerics/container.hpp"
#include "mdm/numerics/rng.hpp"
#include "mdm/tokenizer/unigram.hpp"

namespace mdm::pipeline {

/// images [count x H x W x C] in [0, 1]; captions[i] and classes[i] describe image i.
struct Dataset {
  num::Tensor<float> images;
  std::vector<std::string> captions;
  std::vector<std::size_t> classes;

  std::size_t size() const { return captions.size(); }
  std::size_t height() const { return images.dim(1); }
  std::size_t width() const { return images.dim(2); }
  std::size_t channels() const { return images.dim(3); }

  num::Tensor<float> image(std::size_t i) const {
    const std::size_t n = height() * width() * channels();
    num::Tensor<float> out({height(), width(), channels()});
    std::copy_n(images.data() + i * n, n, out.data());
    return out;
  }

  void validate() const {
    if (images.rank() != 4) throw FormatError("dataset: images must be [count x H x W x C]");
    if (images.dim(0) != captions.size()) {
      throw FormatError("dataset: " + std::to_string(images.dim(0)) + " images but " +
                        std::to_string(captions.size()) + " captions");
    }
    if (!classes.empty() && classes.size() != captions.size()) {
      throw FormatError("dataset: " + std::to_string(classes.size()) + " class ids for " +
                        std::to_string(captions.size()) + " images");
    }
    const std::size_t n = height() * width() * channels();
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (!(images[i] >= 0.0f && images[i] <= 1.0f)) {
        throw FormatError("dataset: pixel outside [0, 1] in image " + std::to_string(i / n) + " at offset " +
                          std::to_string(i % n));
      }
    }
  }

  friend bool operator==(const Dataset& a, const Dataset& b) {
    return num::bit_equal(a.images, b.images) && a.captions == b.captions && a.classes == b.classes;
  }
};

inline const char* class_name(std::size_t c) { return c == 0 ? "square" : "cross"; }

/// Two shape classes on a dark 8x8 canvas: 0 = filled square (side 4-6),
/// 1 = plus-shaped cross (arm 1-3), both near the centre. Captions have 16 words.
inline Dataset make_dataset(std::size_t classes, std::size_t count, std::uint64_t seed) {
  if (classes < 1 || classes > 2) throw ArgumentError("make_dataset: supports 1 or 2 classes");
  if (count == 0) throw ArgumentError("make_dataset: count must be >= 1");
  constexpr std::size_t S = 8;
  static const char* sizes[] = {"small", "medium", "large"};
  Dataset d;
  d.images = num::Tensor<float>({count, S, S, 1});
  num::Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t c = classes == 1 ? 0 : i % 2;
    num::Rng r = rng.fork(i);
    float* img = d.images.data() + i * S * S;
    std::size_t size_word = 0;
    double cy = 0, cx = 0;
    if (c == 0) {
      const std::size_t side = 4 + r.uniform_int(0, 2);
      const std::size_t c0 = (S - side) / 2;
      const std::size_t y0 = c0 + r.uniform_int(0, 1), x0 = c0 + r.uniform_int(0, 1);
      for (std::size_t y = y0; y < y0 + side; ++y)
        for (std::size_t x = x0; x < x0 + side; ++x) img[y * S + x] = 1.0f;
      size_word = side - 4;
      cy = static_cast<double>(y0) + (side - 1) / 2.0;
      cx = static_cast<double>(x0) + (side - 1) / 2.0;
    } else {
      const std::size_t arm = 1 + r.uniform_int(0, 2);
      const std::size_t py = 3 + r.uniform_int(0, 1), px = 3 + r.uniform_int(0, 1);
      for (std::size_t k = py - arm; k <= py + arm; ++k) img[k * S + px] = 1.0f;
      for (std::size_t k = px - arm; k <= px + arm; ++k) img[py * S + k] = 1.0f;
      size_word = arm - 1;
      cy = static_cast<double>(py);
      cx = static_cast<double>(px);
    }
    const double dy = cy - 3.5, dx = cx - 3.5;
    const char* where = "centre";
    if (std::abs(dx) >= 1.0 || std::abs(dy) >= 1.0) {
      if (std::abs(dx) >= std::abs(dy)) where = dx < 0 ? "left" : "right";
      else where = dy < 0 ? "top" : "bottom";
    }
    d.captions.push_back(std::string("a ") + sizes[size_word] + " bright " + class_name(c) +
                         " drawn on a plain dark background near the " + where + " of the picture");
    d.classes.push_back(c);
  }
  return d;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  d.validate();
  std::filesystem::create_directories(dir);
  num::Container c;
  c.put("images", d.images);
  c.save(dir / "images.mdmt");
  std::ofstream cap(dir / "captions.txt", std::ios::binary);
  for (const auto& s : d.captions) cap << s << '\n';
  if (!cap) throw std::runtime_error("save_dataset: cannot write captions");
  if (!d.classes.empty()) {
    std::ofstream cls(dir / "classes.txt", std::ios::binary);
    for (auto v : d.classes) cls << v << '\n';
    if (!cls) throw std::runtime_error("save_dataset: cannot write classes");
  }
}

namespace detail {
inline std::vector<std::string> read_lines(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw FormatError("dataset: cannot open " + p.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line)) lines.push_back(line);
  return lines;
}
}  // namespace detail

inline Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset d;
  d.images = num::Container::load(dir / "images.mdmt").get<float>("images");
  d.captions = detail::read_lines(dir / "captions.txt");
  if (d.images.rank() != 4) throw FormatError("dataset: images must be [count x H x W x C]");
  const std::size_t count = d.images.dim(0);
  if (d.captions.size() != count) {
    // first image index without a caption line, 1-based as a line number
    throw FormatError("dataset: captions.txt has " + std::to_string(d.captions.size()) + " lines for " +
                      std::to_string(count) + " images (line " + std::to_string(std::min(d.captions.size(), count) + 1) +
                      ")");
  }
  if (std::filesystem::exists(dir / "classes.txt")) {
    const auto lines = detail::read_lines(dir / "classes.txt");
    for (std::size_t i = 0; i < lines.size(); ++i) {
      std::size_t pos = 0;
      unsigned long v = 0;
      try {
        v = std::stoul(lines[i], &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos == 0 || pos != lines[i].size()) {
        throw FormatError("dataset: classes.txt line " + std::to_string(i + 1) + " is not an integer");
      }
      d.classes.push_back(v);
    }
    if (d.classes.size() != count) {
      throw FormatError("dataset: classes.txt has " + std::to_string(d.classes.size()) + " lines for " +
                        std::to_string(count) + " images (line " +
                        std::to_string(std::min(d.classes.size(), count) + 1) + ")");
    }
  }
  d.validate();
  return d;
}

/// Unigram tokenizer fitted to the dataset captions.
inline tok::TokenizerModel caption_tokenizer(const Dataset& d, std::size_t vocab_size = 64) {
  tok::TrainerConfig tc;
  tc.vocab_size = vocab_size;
  tc.max_piece_length = 12;
  return tok::train_unigram(d.captions, tc).model;
}

/// Caption -> ids + EOS, truncated and padded with PAD to `length`.
inline std::vector<std::size_t> caption_ids(const tok::TokenizerModel& tok, const std::string& caption,
                                            std::size_t length) {
  const auto& sp = tok.specials();
  std::vector<std::size_t> ids;
  for (int id : tok.encode(caption)) {
    if (ids.size() + 1 >= length) break;
    ids.push_back(static_cast<std::size_t>(id));
  }
  ids.push_back(static_cast<std::size_t>(sp.eos));
  ids.resize(length, static_cast<std::size_t>(sp.pad));
  return ids;
}

/// Tokens up to the first EOS or PAD.
inline std::vector<int> trim_generated(const tok::TokenizerModel& tok, const std::vector<std::size_t>& ids) {
  std::vector<int> out;
  for (auto id : ids) {
    if (id == static_cast<std::size_t>(tok.specials().eos) || id == static_cast<std::size_t>(tok.specials().pad)) break;
    out.push_back(static_cast<int>(id));
  }
  return out;
}

/// Fixed nearest-template classifier: class means of a reference set, Euclidean distance.
struct TemplateClassifier {
  std::vector<num::Tensor<double>> templates;

  static TemplateClassifier fit(const Dataset& d, std::size_t classes) {
    if (d.classes.empty()) throw ArgumentError("classifier: dataset has no class ids");
    const std::size_t n = d.height() * d.width() * d.channels();
    TemplateClassifier c;
    std::vector<std::size_t> counts(classes, 0);
    c.templates.assign(classes, num::Tensor<double>({n}));
    for (std::size_t i = 0; i < d.size(); ++i) {
      const std::size_t k = d.classes[i];
      if (k >= classes) throw ArgumentError("classifier: class id out of range");
      ++counts[k];
      for (std::size_t j = 0; j < n; ++j) c.templates[k][j] += d.images[i * n + j];
    }
    for (std::size_t k = 0; k < classes; ++k) {
      if (counts[k] == 0) throw ArgumentError("classifier: class " + std::to_string(k) + " has no examples");
      for (auto& v : c.templates[k].values()) v /= static_cast<double>(counts[k]);
    }
    return c;
  }

  template <num::Real T>
  std::size_t classify(const num::Tensor<T>& image) const {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < templates.size(); ++k) {
      if (templates[k].size() != image.size()) throw ArgumentError("classifier: image size mismatch");
      double dist = 0;
      for (std::size_t j = 0; j < image.size(); ++j) {
        const double e = static_cast<double>(image[j]) - templates[k][j];
        dist += e * e;
      }
      if (dist < best_d) {
        best_d = dist;
        best = k;
      }
    }
    return best;
  }
};

}  // namespace mdm::pipeline
