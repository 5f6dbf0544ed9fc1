// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bbo/error.hpp"

namespace bbo {

/// Byte-pair encoding over raw bytes. Ids 0..255 are the bytes, each merge
/// adds one id, and one extra end-of-sequence id follows the merged tokens.
///
/// Text is pre-split into pieces that end after `|` or a newline; merges never
/// cross a piece boundary, so a trial (or header line) always starts a fresh
/// token.
class Tokenizer {
 public:
  static constexpr int kByteTokens = 256;

  Tokenizer() { rebuild(); }

  static Tokenizer from_merges(std::vector<std::pair<int, int>> merges) {
    Tokenizer t;
    t.merges_ = std::move(merges);
    t.rebuild();
    return t;
  }

  static std::vector<std::string_view> split_pieces(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
      if (text[i] == '|' || text[i] == '\n') {
        out.push_back(text.substr(start, i + 1 - start));
        start = i + 1;
      }
    }
    if (start < text.size()) out.push_back(text.substr(start));
    return out;
  }

  /// Greedy most-frequent-pair merging until `vocab_size` tokens (bytes plus
  /// merges) exist or no pair occurs twice. Ties go to the lexicographically
  /// smallest (left, right) pair of byte strings.
  static Tokenizer train(const std::vector<std::string>& corpus,
                         std::size_t vocab_size);

  std::size_t vocab_size() const { return expansions_.size(); }
  int eos_id() const { return static_cast<int>(expansions_.size()); }
  /// Number of ids a model must cover, including end-of-sequence.
  std::size_t n_tokens() const { return expansions_.size() + 1; }

  const std::vector<std::pair<int, int>>& merges() const { return merges_; }
  const std::string& expansion(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= expansions_.size()) {
      throw DomainError("token id " + std::to_string(id) +
                        " has no byte expansion");
    }
    return expansions_[static_cast<std::size_t>(id)];
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> out;
    out.reserve(text.size());
    for (auto piece : split_pieces(text)) {
      const auto ids = encode_piece(piece);
      out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
      if (id == eos_id()) continue;
      out += expansion(id);
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json m = nlohmann::json::array();
    for (auto [l, r] : merges_) m.push_back({l, r});
    return {{"merges", m}, {"vocab_size", vocab_size()}};
  }

  static Tokenizer from_json(const nlohmann::json& j) {
    std::vector<std::pair<int, int>> merges;
    try {
      for (const auto& m : j.at("merges")) {
        merges.emplace_back(m.at(0).get<int>(), m.at(1).get<int>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("invalid vocabulary JSON: ") + e.what(), 0);
    }
    for (std::size_t i = 0; i < merges.size(); ++i) {
      const int limit = kByteTokens + static_cast<int>(i);
      if (merges[i].first < 0 || merges[i].first >= limit ||
          merges[i].second < 0 || merges[i].second >= limit) {
        throw ParseError("merge " + std::to_string(i) +
                             " references an undefined token",
                         i);
      }
    }
    auto t = from_merges(std::move(merges));
    if (j.contains("vocab_size") &&
        j.at("vocab_size").get<std::size_t>() != t.vocab_size()) {
      throw ParseError("vocab_size does not match the merge list", 0);
    }
    return t;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write '" + path + "'");
    out << to_json().dump() << '\n';
  }

  static Tokenizer load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "'");
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("'" + path + "': " + e.what(), 0);
    }
  }

 private:
  static std::uint64_t key(int a, int b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  void rebuild() {
    expansions_.clear();
    for (int b = 0; b < kByteTokens; ++b) {
      expansions_.emplace_back(1, static_cast<char>(b));
    }
    rank_.clear();
    for (std::size_t i = 0; i < merges_.size(); ++i) {
      const auto [l, r] = merges_[i];
      expansions_.push_back(expansions_[static_cast<std::size_t>(l)] +
                            expansions_[static_cast<std::size_t>(r)]);
      rank_[key(l, r)] = static_cast<int>(i);
    }
    std::lock_guard lock(cache_mutex_);
    cache_.clear();
  }

  std::vector<int> encode_piece(std::string_view piece) const {
    {
      std::lock_guard lock(cache_mutex_);
      auto it = cache_.find(std::string(piece));
      if (it != cache_.end()) return it->second;
    }
    std::vector<int> syms;
    syms.reserve(piece.size());
    for (unsigned char c : piece) syms.push_back(c);
    while (syms.size() > 1) {
      int best_rank = -1;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = rank_.find(key(syms[i], syms[i + 1]));
        if (it != rank_.end() && (best_rank < 0 || it->second < best_rank)) {
          best_rank = it->second;
        }
      }
      if (best_rank < 0) break;
      const auto [l, r] = merges_[static_cast<std::size_t>(best_rank)];
      const int merged = kByteTokens + best_rank;
      std::vector<int> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size(); ++i) {
        if (i + 1 < syms.size() && syms[i] == l && syms[i + 1] == r) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(syms[i]);
        }
      }
      syms = std::move(next);
    }
    std::lock_guard lock(cache_mutex_);
    if (cache_.size() < (1u << 20)) cache_.emplace(std::string(piece), syms);
    return syms;
  }

  std::vector<std::pair<int, int>> merges_;
  std::vector<std::string> expansions_;
  std::unordered_map<std::uint64_t, int> rank_;
  mutable std::unordered_map<std::string, std::vector<int>> cache_;
  mutable std::mutex cache_mutex_;

 public:
  Tokenizer(const Tokenizer& o) : merges_(o.merges_) { rebuild(); }
  Tokenizer& operator=(const Tokenizer& o) {
    if (this != &o) {
      merges_ = o.merges_;
      rebuild();
    }
    return *this;
  }
  Tokenizer(Tokenizer&& o) noexcept
      : merges_(std::move(o.merges_)),
        expansions_(std::move(o.expansions_)),
        rank_(std::move(o.rank_)),
        cache_(std::move(o.cache_)) {}
  Tokenizer& operator=(Tokenizer&& o) noexcept {
    merges_ = std::move(o.merges_);
    expansions_ = std::move(o.expansions_);
    rank_ = std::move(o.rank_);
    cache_ = std::move(o.cache_);
    return *this;
  }
};

inline Tokenizer Tokenizer::train(const std::vector<std::string>& corpus,
                                  std::size_t vocab_size) {
  if (corpus.empty()) throw DomainError("cannot train BPE on an empty corpus");
  if (vocab_size < kByteTokens + 1) {
    throw DomainError("vocab_size must be at least 257");
  }
  std::unordered_map<std::string, std::int64_t> piece_counts;
  for (const auto& text : corpus) {
    for (auto piece : split_pieces(text)) ++piece_counts[std::string(piece)];
  }
  // Deterministic word order regardless of hash iteration order.
  std::vector<std::pair<std::string, std::int64_t>> sorted(piece_counts.begin(),
                                                           piece_counts.end());
  std::sort(sorted.begin(), sorted.end());

  struct Word {
    std::vector<int> syms;
    std::int64_t count;
  };
  std::vector<Word> words;
  words.reserve(sorted.size());
  for (auto& [s, c] : sorted) {
    Word w{{}, c};
    for (unsigned char ch : s) w.syms.push_back(ch);
    words.push_back(std::move(w));
  }

  Tokenizer tok;
  auto& exp = tok.expansions_;

  std::unordered_map<std::uint64_t, std::int64_t> counts;
  std::unordered_map<std::uint64_t, std::vector<std::size_t>> where;
  for (std::size_t w = 0; w < words.size(); ++w) {
    const auto& s = words[w].syms;
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      const auto k = key(s[i], s[i + 1]);
      counts[k] += words[w].count;
      where[k].push_back(w);
    }
  }
  // Ordered by descending count, then ascending (left, right) expansion.
  using Entry = std::tuple<std::int64_t, std::string, std::string, std::uint64_t>;
  auto make_entry = [&](std::uint64_t k, std::int64_t c) {
    const int l = static_cast<int>(k >> 32);
    const int r = static_cast<int>(k & 0xffffffffu);
    return Entry{-c, exp[static_cast<std::size_t>(l)],
                 exp[static_cast<std::size_t>(r)], k};
  };
  std::set<Entry> queue;
  std::unordered_map<std::uint64_t, std::int64_t> queued;  // count in queue
  for (const auto& [k, c] : counts) {
    queue.insert(make_entry(k, c));
    queued[k] = c;
  }

  std::vector<std::size_t> seen(words.size(), 0);
  std::size_t stamp = 0;
  while (exp.size() < vocab_size && !queue.empty()) {
    const auto best = *queue.begin();
    if (-std::get<0>(best) < 2) break;
    const std::uint64_t bk = std::get<3>(best);
    const int l = static_cast<int>(bk >> 32);
    const int r = static_cast<int>(bk & 0xffffffffu);
    const int merged = static_cast<int>(exp.size());
    tok.merges_.emplace_back(l, r);
    exp.push_back(exp[static_cast<std::size_t>(l)] +
                  exp[static_cast<std::size_t>(r)]);

    std::set<std::uint64_t> dirty;
    ++stamp;
    const auto affected = where[bk];
    for (auto w : affected) {
      if (seen[w] == stamp) continue;
      seen[w] = stamp;
      auto& word = words[w];
      bool has = false;
      for (std::size_t i = 0; i + 1 < word.syms.size(); ++i) {
        if (word.syms[i] == l && word.syms[i + 1] == r) {
          has = true;
          break;
        }
      }
      if (!has) continue;
      for (std::size_t i = 0; i + 1 < word.syms.size(); ++i) {
        const auto k = key(word.syms[i], word.syms[i + 1]);
        counts[k] -= word.count;
        dirty.insert(k);
      }
      std::vector<int> next;
      next.reserve(word.syms.size());
      for (std::size_t i = 0; i < word.syms.size(); ++i) {
        if (i + 1 < word.syms.size() && word.syms[i] == l &&
            word.syms[i + 1] == r) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(word.syms[i]);
        }
      }
      word.syms = std::move(next);
      for (std::size_t i = 0; i + 1 < word.syms.size(); ++i) {
        const auto k = key(word.syms[i], word.syms[i + 1]);
        counts[k] += word.count;
        where[k].push_back(w);
        dirty.insert(k);
      }
    }
    for (auto k : dirty) {
      auto q = queued.find(k);
      if (q != queued.end()) {
        queue.erase(make_entry(k, q->second));
        queued.erase(q);
      }
      const auto c = counts[k];
      if (c > 0) {
        queue.insert(make_entry(k, c));
        queued[k] = c;
      } else {
        counts.erase(k);
        where.erase(k);
      }
    }
  }
  tok.rebuild();
  return tok;
}

}  // namespace bbo
