#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "mdm/numerics/rng.hpp"
#include "mdm/tokenizer/unigram.hpp"

namespace testing_support {

/// Lines of 3-9 words drawn from a fixed word list (Zipf-like weights).
inline std::vector<std::string> synthetic_corpus(std::size_t lines, std::uint64_t seed) {
  static const char* words[] = {"the",    "a",       "shape",  "square", "cross",  "small", "large",
                                "white",  "dark",    "image",  "with",   "on",     "of",    "centre",
                                "corner", "bright",  "filled", "lines",  "thin",   "wide",  "left",
                                "right",  "top",     "bottom", "plain",  "simple", "grid",  "pixel",
                                "drawn",  "picture", "shows",  "near",   "edge",   "bold",  "faint"};
  const std::size_t nw = sizeof(words) / sizeof(words[0]);
  mdm::num::Rng rng(seed);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < lines; ++i) {
    const std::size_t n = 3 + rng.uniform_int(0, 6);
    std::string line;
    for (std::size_t k = 0; k < n; ++k) {
      // index ~ floor(nw * u^2) favours early words
      const double u = rng.uniform();
      const auto w = static_cast<std::size_t>(static_cast<double>(nw) * u * u);
      if (k) line += ' ';
      line += words[w];
    }
    out.push_back(line);
  }
  return out;
}

/// Max log-likelihood over every segmentation of every string of length n over
/// `alphabet`, found by enumerating piece sequences. Calls visit(string, best) for
/// each string whose first symbol is alphabet[first].
inline void exhaustive_best(const mdm::tok::TokenizerModel& m, const std::u32string& alphabet, std::size_t n,
                            std::size_t first,
                            const std::function<void(const std::u32string&, double)>& visit) {
  const std::size_t k = alphabet.size();
  std::vector<std::pair<std::vector<std::size_t>, double>> pieces;
  for (std::size_t id = mdm::tok::Specials::kCount; id < m.vocab_size(); ++id) {
    const auto& p = m.piece(static_cast<int>(id));
    std::vector<std::size_t> digits;
    bool ok = true;
    for (char32_t c : p.cps) {
      const auto pos = alphabet.find(c);
      if (pos == std::u32string::npos) ok = false;
      digits.push_back(pos);
    }
    if (ok) pieces.push_back({digits, p.log_prob});
  }
  std::size_t block = 1;
  for (std::size_t i = 1; i < n; ++i) block *= k;
  const double ninf = -std::numeric_limits<double>::infinity();
  std::vector<double> best(block, ninf);
  // code of the string without its first symbol, base k
  std::function<void(std::size_t, std::size_t, double)> dfs = [&](std::size_t pos, std::size_t code, double score) {
    if (pos == n) {
      best[code] = std::max(best[code], score);
      return;
    }
    for (const auto& [digits, lp] : pieces) {
      if (pos + digits.size() > n) continue;
      if (pos == 0 && digits[0] != first) continue;
      std::size_t c = code;
      for (std::size_t d = (pos == 0 ? 1 : 0); d < digits.size(); ++d) c = c * k + digits[d];
      dfs(pos + digits.size(), c, score + lp);
    }
  };
  dfs(0, 0, 0.0);
  std::u32string s(n, alphabet[first]);
  for (std::size_t code = 0; code < block; ++code) {
    std::size_t c = code;
    for (std::size_t i = n; i-- > 1;) {
      s[i] = alphabet[c % k];
      c /= k;
    }
    visit(s, best[code]);
  }
}

}  // namespace testing_support
