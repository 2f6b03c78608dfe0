#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>
#include <unicode/normalizer2.h>
#include <unicode/unistr.h>

#include "mdm/errors.hpp"

namespace mdm::tok {

inline constexpr char32_t kSpaceMarker = U'▁';

inline std::string utf8_encode(std::u32string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char32_t c : s) {
    if (c < 0x80) {
      out.push_back(static_cast<char>(c));
    } else if (c < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (c >> 6)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else if (c < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (c >> 12)));
      out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (c >> 18)));
      out.push_back(static_cast<char>(0x80 | ((c >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((c >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    }
  }
  return out;
}

/// Invalid UTF-8 sequences become U+FFFD.
inline std::u32string utf8_decode(std::string_view s) {
  icu::UnicodeString u = icu::UnicodeString::fromUTF8(icu::StringPiece(s.data(), static_cast<int32_t>(s.size())));
  std::u32string out;
  out.reserve(static_cast<std::size_t>(u.length()));
  for (int32_t i = 0; i < u.length();) {
    const UChar32 c = u.char32At(i);
    out.push_back(static_cast<char32_t>(c));
    i += U16_LENGTH(c);
  }
  return out;
}

/// NFC, then U+0020 is replaced by the visible marker U+2581.
inline std::u32string normalize(std::string_view text) {
  UErrorCode st = U_ZERO_ERROR;
  const icu::Normalizer2* nfc = icu::Normalizer2::getNFCInstance(st);
  if (U_FAILURE(st)) throw StateError("ICU NFC normalizer unavailable");
  icu::UnicodeString u =
      icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  icu::UnicodeString n = nfc->normalize(u, st);
  if (U_FAILURE(st)) throw ArgumentError("NFC normalization failed");
  std::string utf8;
  n.toUTF8String(utf8);
  std::u32string cps = utf8_decode(utf8);
  for (auto& c : cps)
    if (c == U' ') c = kSpaceMarker;
  return cps;
}

struct Specials {
  int pad = 0;
  int bos = 1;
  int eos = 2;
  int unk = 3;
  static constexpr int kCount = 4;
};

struct TrainerConfig {
  std::size_t vocab_size = 8000;
  double character_coverage = 0.9995;
  std::size_t max_piece_length = 6;
  std::size_t seed_factor = 20;
  double prune_fraction = 0.2;
  std::size_t em_iterations = 2;
  std::size_t final_em_iterations = 2;

  /// Throws ArgumentError on out-of-range settings.
  void validate() const {
    if (vocab_size < static_cast<std::size_t>(Specials::kCount) + 1) {
      throw ArgumentError("vocab_size must exceed the number of special tokens");
    }
    if (!(character_coverage > 0.0 && character_coverage <= 1.0)) {
      throw ArgumentError("character_coverage must be in (0, 1]");
    }
    if (max_piece_length < 1) throw ArgumentError("max_piece_length must be >= 1");
    if (!(prune_fraction > 0.0 && prune_fraction < 1.0)) {
      throw ArgumentError("prune_fraction must be in (0, 1)");
    }
    if (em_iterations < 1) throw ArgumentError("em_iterations must be >= 1");
  }
};

namespace detail {

// Code-point trie over piece strings.
class Trie {
 public:
  Trie() : nodes_(1) {}

  void insert(std::u32string_view s, int id) {
    std::size_t n = 0;
    for (char32_t c : s) {
      auto& next = nodes_[n].next;
      auto it = std::lower_bound(next.begin(), next.end(), c,
                                 [](const auto& e, char32_t k) { return e.first < k; });
      if (it == next.end() || it->first != c) {
        const auto child = static_cast<std::uint32_t>(nodes_.size());
        it = next.insert(it, {c, child});
        nodes_.emplace_back();
      }
      n = it->second;
    }
    nodes_[n].id = id;
  }

  /// Calls fn(end, id) for every piece that is a prefix of s[begin..].
  template <class Fn>
  void prefixes(std::u32string_view s, std::size_t begin, Fn&& fn) const {
    std::size_t n = 0;
    for (std::size_t i = begin; i < s.size(); ++i) {
      const auto& next = nodes_[n].next;
      auto it = std::lower_bound(next.begin(), next.end(), s[i],
                                 [](const auto& e, char32_t k) { return e.first < k; });
      if (it == next.end() || it->first != s[i]) return;
      n = it->second;
      if (nodes_[n].id >= 0) fn(i + 1, nodes_[n].id);
    }
  }

 private:
  struct Node {
    std::vector<std::pair<char32_t, std::uint32_t>> next;
    int id = -1;
  };
  std::vector<Node> nodes_;
};

inline double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

inline std::string escape_piece(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '\\') out += "\\\\";
    else if (c == '\t') out += "\\t";
    else if (c == '\n') out += "\\n";
    else out.push_back(c);
  }
  return out;
}

inline std::string unescape_piece(const std::string& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out.push_back(s[i]);
      continue;
    }
    if (i + 1 >= s.size()) throw FormatError("tokenizer model: dangling escape");
    const char n = s[++i];
    if (n == '\\') out.push_back('\\');
    else if (n == 't') out.push_back('\t');
    else if (n == 'n') out.push_back('\n');
    else throw FormatError("tokenizer model: unknown escape");
  }
  return out;
}

}  // namespace detail

struct Segmentation {
  std::vector<int> ids;
  double score = 0.0;
};

/// Unigram LM over subword pieces. Ids 0..3 are the specials; pieces follow.
class TokenizerModel {
 public:
  struct Piece {
    std::string text;
    std::u32string cps;
    double log_prob = 0.0;
  };

  TokenizerModel() = default;

  /// pieces excludes the specials. log probabilities are used as given.
  TokenizerModel(std::vector<std::pair<std::u32string, double>> pieces, double coverage)
      : coverage_(coverage) {
    const char* names[] = {"<pad>", "<s>", "</s>", "<unk>"};
    for (const char* n : names) pieces_.push_back(Piece{n, utf8_decode(n), 0.0});
    double min_lp = 0.0;
    for (auto& [cps, lp] : pieces) {
      if (cps.empty()) throw ArgumentError("tokenizer: empty piece");
      if (!std::isfinite(lp)) throw ArgumentError("tokenizer: non-finite log probability");
      pieces_.push_back(Piece{utf8_encode(cps), cps, lp});
      min_lp = std::min(min_lp, lp);
    }
    unk_score_ = min_lp - 10.0;
    rebuild();
  }

  std::size_t vocab_size() const noexcept { return pieces_.size(); }
  double coverage() const noexcept { return coverage_; }
  const Specials& specials() const noexcept { return specials_; }
  const std::vector<Piece>& pieces() const noexcept { return pieces_; }
  const Piece& piece(int id) const { return pieces_.at(static_cast<std::size_t>(id)); }
  double unk_score() const noexcept { return unk_score_; }

  bool is_special(int id) const noexcept { return id >= 0 && id < Specials::kCount; }

  int id_of(const std::string& piece) const {
    auto it = by_text_.find(piece);
    return it == by_text_.end() ? -1 : it->second;
  }

  /// Max-likelihood segmentation of normalized code points; uncovered characters become UNK.
  Segmentation viterbi(std::u32string_view s) const {
    thread_local std::vector<double> best;
    thread_local std::vector<int> back_id;
    thread_local std::vector<std::size_t> back_pos;
    const double ninf = -std::numeric_limits<double>::infinity();
    best.assign(s.size() + 1, ninf);
    back_id.assign(s.size() + 1, -1);
    back_pos.assign(s.size() + 1, 0);
    best[0] = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (best[i] == ninf) continue;
      bool single = false;
      trie_.prefixes(s, i, [&](std::size_t end, int id) {
        if (end == i + 1) single = true;
        const double v = best[i] + pieces_[static_cast<std::size_t>(id)].log_prob;
        if (v > best[end]) {
          best[end] = v;
          back_id[end] = id;
          back_pos[end] = i;
        }
      });
      if (!single) {
        const double v = best[i] + unk_score_;
        if (v > best[i + 1]) {
          best[i + 1] = v;
          back_id[i + 1] = specials_.unk;
          back_pos[i + 1] = i;
        }
      }
    }
    Segmentation seg;
    seg.score = best[s.size()];
    for (std::size_t e = s.size(); e > 0; e = back_pos[e]) seg.ids.push_back(back_id[e]);
    std::reverse(seg.ids.begin(), seg.ids.end());
    return seg;
  }

  std::vector<int> encode(std::string_view text) const {
    if (text.empty()) return {};
    return viterbi(normalize(text)).ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::u32string out;
    for (int id : ids) {
      if (id < 0 || static_cast<std::size_t>(id) >= pieces_.size()) {
        throw ArgumentError("decode: token id " + std::to_string(id) + " out of range");
      }
      if (is_special(id)) continue;
      out += pieces_[static_cast<std::size_t>(id)].cps;
    }
    for (auto& c : out)
      if (c == kSpaceMarker) c = U' ';
    return utf8_encode(out);
  }

  /// Sum of probabilities over non-special pieces.
  double probability_mass() const {
    double m = 0.0;
    for (std::size_t i = Specials::kCount; i < pieces_.size(); ++i) m += std::exp(pieces_[i].log_prob);
    return m;
  }

  std::string to_tsv() const {
    nlohmann::json header = {
        {"vocab_size", pieces_.size()},
        {"coverage", coverage_},
        {"specials", {{"pad", specials_.pad}, {"bos", specials_.bos}, {"eos", specials_.eos}, {"unk", specials_.unk}}}};
    std::string out = header.dump() + "\n";
    char buf[64];
    for (const auto& p : pieces_) {
      std::snprintf(buf, sizeof buf, "%.17g", p.log_prob);
      out += detail::escape_piece(p.text) + "\t" + buf + "\n";
    }
    return out;
  }

  static TokenizerModel from_tsv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line)) throw FormatError("tokenizer model: missing header");
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("tokenizer model: bad header: ") + e.what());
    }
    const auto vocab = header.value("vocab_size", std::size_t{0});
    TokenizerModel m;
    m.coverage_ = header.value("coverage", 1.0);
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos) {
        throw FormatError("tokenizer model: line " + std::to_string(lineno) + " has no tab");
      }
      Piece p;
      p.text = detail::unescape_piece(line.substr(0, tab));
      p.cps = utf8_decode(p.text);
      try {
        std::size_t used = 0;
        p.log_prob = std::stod(line.substr(tab + 1), &used);
      } catch (const std::exception&) {
        throw FormatError("tokenizer model: bad log probability on line " + std::to_string(lineno));
      }
      m.pieces_.push_back(std::move(p));
    }
    if (m.pieces_.size() != vocab) {
      throw FormatError("tokenizer model: header says " + std::to_string(vocab) + " pieces, found " +
                        std::to_string(m.pieces_.size()));
    }
    if (m.pieces_.size() < static_cast<std::size_t>(Specials::kCount)) {
      throw FormatError("tokenizer model: missing special tokens");
    }
    double min_lp = 0.0;
    for (std::size_t i = Specials::kCount; i < m.pieces_.size(); ++i) min_lp = std::min(min_lp, m.pieces_[i].log_prob);
    m.unk_score_ = min_lp - 10.0;
    m.rebuild();
    return m;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write " + path.string());
    f << to_tsv();
  }

  static TokenizerModel load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot read " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    return from_tsv(ss.str());
  }

 private:
  void rebuild() {
    trie_ = detail::Trie();
    by_text_.clear();
    for (std::size_t i = 0; i < pieces_.size(); ++i) {
      by_text_[pieces_[i].text] = static_cast<int>(i);
      if (i >= static_cast<std::size_t>(Specials::kCount)) trie_.insert(pieces_[i].cps, static_cast<int>(i));
    }
  }

  std::vector<Piece> pieces_;
  Specials specials_;
  double coverage_ = 1.0;
  double unk_score_ = -10.0;
  detail::Trie trie_;
  std::unordered_map<std::string, int> by_text_;
};

struct TrainResult {
  TokenizerModel model;
  /// Corpus log-likelihood per EM iteration, one inner list per fixed-vocabulary phase.
  /// Each list also holds the value after the phase's last M-step.
  std::vector<std::vector<double>> loglik;
  std::vector<char32_t> covered;
};

namespace detail {

struct Lattice {
  std::vector<std::u32string> pieces;
  std::vector<double> logp;
  std::vector<bool> is_char;
  Trie trie;

  void build() {
    trie = Trie();
    for (std::size_t i = 0; i < pieces.size(); ++i) trie.insert(pieces[i], static_cast<int>(i));
  }
};

struct Word {
  std::u32string text;
  double count;
};

// One E-step. Returns the corpus log-likelihood and fills expected counts.
inline double expected_counts(const Lattice& lat, const std::vector<Word>& words, std::vector<double>& counts) {
  const double ninf = -std::numeric_limits<double>::infinity();
  counts.assign(lat.pieces.size(), 0.0);
  double ll = 0.0;
  std::vector<double> alpha, beta;
  for (const auto& w : words) {
    const std::size_t n = w.text.size();
    alpha.assign(n + 1, ninf);
    beta.assign(n + 1, ninf);
    alpha[0] = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (alpha[i] == ninf) continue;
      lat.trie.prefixes(w.text, i, [&](std::size_t end, int id) {
        alpha[end] = log_add(alpha[end], alpha[i] + lat.logp[static_cast<std::size_t>(id)]);
      });
    }
    beta[n] = 0.0;
    for (std::size_t i = n; i-- > 0;) {
      lat.trie.prefixes(w.text, i, [&](std::size_t end, int id) {
        beta[i] = log_add(beta[i], beta[end] + lat.logp[static_cast<std::size_t>(id)]);
      });
    }
    const double z = alpha[n];
    if (z == ninf) continue;
    ll += w.count * z;
    for (std::size_t i = 0; i < n; ++i) {
      if (alpha[i] == ninf) continue;
      lat.trie.prefixes(w.text, i, [&](std::size_t end, int id) {
        const double lp = alpha[i] + lat.logp[static_cast<std::size_t>(id)] + beta[end] - z;
        counts[static_cast<std::size_t>(id)] += w.count * std::exp(lp);
      });
    }
  }
  return ll;
}

// Maximum-likelihood M-step. Characters keep a tiny floor so they stay segmentable.
inline void maximize(Lattice& lat, const std::vector<double>& counts) {
  double total = 0.0;
  for (double c : counts) total += c;
  const double floor = 1e-12 * total;
  std::vector<double> c = counts;
  for (std::size_t i = 0; i < c.size(); ++i)
    if (lat.is_char[i] && c[i] < floor) c[i] = floor;
  total = 0.0;
  for (double v : c) total += v;
  for (std::size_t i = 0; i < c.size(); ++i) {
    lat.logp[i] = c[i] > 0.0 ? std::log(c[i] / total) : -std::numeric_limits<double>::infinity();
  }
}

// Best score of s using every piece except `skip`.
inline double best_without(const Lattice& lat, const std::u32string& s, int skip) {
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> best(s.size() + 1, ninf);
  best[0] = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (best[i] == ninf) continue;
    lat.trie.prefixes(s, i, [&](std::size_t end, int id) {
      if (id == skip) return;
      best[end] = std::max(best[end], best[i] + lat.logp[static_cast<std::size_t>(id)]);
    });
  }
  return best[s.size()];
}

inline void drop_pieces(Lattice& lat, const std::vector<bool>& keep) {
  Lattice next;
  for (std::size_t i = 0; i < lat.pieces.size(); ++i) {
    if (!keep[i]) continue;
    next.pieces.push_back(lat.pieces[i]);
    next.logp.push_back(lat.logp[i]);
    next.is_char.push_back(lat.is_char[i]);
  }
  double m = -std::numeric_limits<double>::infinity();
  for (double v : next.logp) m = log_add(m, v);
  for (double& v : next.logp) v -= m;
  next.build();
  lat = std::move(next);
}

}  // namespace detail

/// Unigram-LM trainer: frequent-substring seeds, EM re-estimation, and loss-based pruning.
inline TrainResult train_unigram(const std::vector<std::string>& corpus, const TrainerConfig& cfg) {
  cfg.validate();
  if (corpus.empty()) throw ArgumentError("train_unigram: empty corpus");

  std::vector<std::u32string> lines;
  std::map<char32_t, double> char_freq;
  double total_chars = 0.0;
  for (const auto& l : corpus) {
    lines.push_back(normalize(l));
    for (char32_t c : lines.back()) {
      char_freq[c] += 1.0;
      total_chars += 1.0;
    }
  }
  if (total_chars == 0.0) throw ArgumentError("train_unigram: corpus has no characters");

  std::vector<std::pair<char32_t, double>> chars(char_freq.begin(), char_freq.end());
  std::stable_sort(chars.begin(), chars.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<char32_t> covered;
  double acc = 0.0;
  for (const auto& [c, f] : chars) {
    if (!covered.empty() && acc / total_chars >= cfg.character_coverage) break;
    covered.push_back(c);
    acc += f;
  }
  const std::size_t floor = covered.size() + Specials::kCount;
  if (cfg.vocab_size < floor) {
    throw ArgumentError("train_unigram: vocab_size " + std::to_string(cfg.vocab_size) +
                        " is below the character floor " + std::to_string(floor));
  }
  std::map<char32_t, bool> is_covered;
  for (char32_t c : covered) is_covered[c] = true;

  // Words: split before each space marker and at uncovered characters.
  std::map<std::u32string, double> word_count;
  for (const auto& l : lines) {
    std::u32string cur;
    auto flush = [&] {
      if (!cur.empty()) word_count[cur] += 1.0;
      cur.clear();
    };
    for (char32_t c : l) {
      if (!is_covered.count(c)) {
        flush();
        continue;
      }
      if (c == kSpaceMarker) flush();
      cur.push_back(c);
    }
    flush();
  }
  std::vector<detail::Word> words;
  for (auto& [w, n] : word_count) words.push_back({w, n});

  // Seeds.
  std::map<std::u32string, double> sub;
  for (const auto& w : words) {
    for (std::size_t i = 0; i < w.text.size(); ++i) {
      for (std::size_t len = 2; len <= cfg.max_piece_length && i + len <= w.text.size(); ++len) {
        if (w.text[i + len - 1] == kSpaceMarker) break;
        sub[w.text.substr(i, len)] += w.count;
      }
    }
  }
  std::vector<std::pair<std::u32string, double>> seeds;
  for (auto& [s, f] : sub)
    if (f >= 2.0) seeds.push_back({s, f});
  std::stable_sort(seeds.begin(), seeds.end(), [](const auto& a, const auto& b) {
    return a.second * static_cast<double>(a.first.size()) > b.second * static_cast<double>(b.first.size());
  });
  const std::size_t cap = cfg.seed_factor * cfg.vocab_size;
  if (seeds.size() > cap) seeds.resize(cap);

  detail::Lattice lat;
  for (char32_t c : covered) {
    lat.pieces.push_back(std::u32string(1, c));
    lat.logp.push_back(std::log(char_freq[c]));
    lat.is_char.push_back(true);
  }
  for (auto& [s, f] : seeds) {
    lat.pieces.push_back(s);
    lat.logp.push_back(std::log(f));
    lat.is_char.push_back(false);
  }
  {
    double m = -std::numeric_limits<double>::infinity();
    for (double v : lat.logp) m = detail::log_add(m, v);
    for (double& v : lat.logp) v -= m;
  }
  lat.build();

  TrainResult result;
  result.covered = covered;
  const std::size_t target = cfg.vocab_size - Specials::kCount;
  std::vector<double> counts;

  auto run_em = [&](std::size_t iters) {
    std::vector<double> hist;
    for (std::size_t it = 0; it < iters; ++it) {
      hist.push_back(detail::expected_counts(lat, words, counts));
      detail::maximize(lat, counts);
    }
    hist.push_back(detail::expected_counts(lat, words, counts));
    result.loglik.push_back(std::move(hist));
  };

  while (true) {
    run_em(cfg.em_iterations);
    // Unused multi-character pieces carry no probability.
    std::vector<bool> keep(lat.pieces.size(), true);
    std::size_t alive = 0;
    for (std::size_t i = 0; i < lat.pieces.size(); ++i) {
      if (!lat.is_char[i] && !(counts[i] > 0.0)) keep[i] = false;
      alive += keep[i];
    }
    if (alive <= target) {
      detail::drop_pieces(lat, keep);
      break;
    }
    std::vector<std::pair<double, std::size_t>> loss;
    for (std::size_t i = 0; i < lat.pieces.size(); ++i) {
      if (lat.is_char[i] || !keep[i]) continue;
      const double alt = detail::best_without(lat, lat.pieces[i], static_cast<int>(i));
      loss.push_back({counts[i] * (lat.logp[i] - alt), i});
    }
    std::stable_sort(loss.begin(), loss.end());
    const std::size_t excess = alive - target;
    const std::size_t step = std::max<std::size_t>(1, static_cast<std::size_t>(cfg.prune_fraction * static_cast<double>(loss.size())));
    const std::size_t n_remove = std::min({excess, step, loss.size()});
    for (std::size_t k = 0; k < n_remove; ++k) keep[loss[k].second] = false;
    detail::drop_pieces(lat, keep);
    if (loss.size() == n_remove && alive - n_remove > target) break;  // only characters left
  }
  if (cfg.final_em_iterations > 0) {
    run_em(cfg.final_em_iterations);
    std::vector<bool> keep(lat.pieces.size(), true);
    for (std::size_t i = 0; i < lat.pieces.size(); ++i)
      if (!lat.is_char[i] && !std::isfinite(lat.logp[i])) keep[i] = false;
    detail::drop_pieces(lat, keep);
  }

  std::vector<std::size_t> order(lat.pieces.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (lat.logp[a] != lat.logp[b]) return lat.logp[a] > lat.logp[b];
    return lat.pieces[a] < lat.pieces[b];
  });
  std::vector<std::pair<std::u32string, double>> final_pieces;
  for (std::size_t i : order) final_pieces.push_back({lat.pieces[i], lat.logp[i]});
  result.model = TokenizerModel(std::move(final_pieces), cfg.character_coverage);
  return result;
}

}  // namespace mdm::tok
