// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bbo/error.hpp"
#include "bbo/rng.hpp"
#include "bbo/runner.hpp"
#include "bbo/space.hpp"

namespace bbo {

// Text layout of one encoded trajectory:
//
//   <algorithm>:RS
//   <type>:<UNI>,<min_value>:0.01,<max_value>:1.0,<log-scale>&
//   <type>:<INT>,<min_value>:1,<max_value>:5,<linear-scale>&
//   <type>:<CATEGORICAL>,<categories>:[0, 1]
//   120,200,<1>*300|60,50,<0>*200|
//
// A trial lists numerical values first (quantized unit coordinates), then
// categorical indices as <i>, all comma-separated; `*` closes the
// configuration and `|` closes the quantized, min-max scaled objective.

struct QuantizationConfig {
  int levels = 1000;

  QuantizationConfig() = default;
  explicit QuantizationConfig(int q) : levels(q) {
    if (levels < 2) throw DomainError("quantization needs at least 2 levels");
  }
};

inline int quantize(double u, const QuantizationConfig& quant = {}) {
  if (!(u >= 0.0 && u <= 1.0)) {
    throw DomainError("quantize: value " + std::to_string(u) +
                      " outside [0, 1]");
  }
  const double top = quant.levels - 1;
  return static_cast<int>(std::clamp(std::floor(u * top + 0.5), 0.0, top));
}

inline double dequantize(int q, const QuantizationConfig& quant = {}) {
  if (q < 0 || q >= quant.levels) {
    throw DomainError("dequantize: token " + std::to_string(q) +
                      " outside [0, " + std::to_string(quant.levels - 1) +
                      "]");
  }
  return static_cast<double>(q) / static_cast<double>(quant.levels - 1);
}

/// Min-max scaling to [0, 1]; a constant list maps to all zeros.
inline std::vector<double> scale_objectives(const std::vector<double>& ys) {
  if (ys.empty()) throw DomainError("scale_objectives: empty list");
  const auto [lo_it, hi_it] = std::minmax_element(ys.begin(), ys.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<double> out(ys.size(), 0.0);
  if (hi > lo) {
    for (std::size_t i = 0; i < ys.size(); ++i) {
      out[i] = std::clamp((ys[i] - lo) / (hi - lo), 0.0, 1.0);
    }
  }
  return out;
}

struct EncodedTrajectory {
  std::string text;
  std::string task_id;
  std::string space_id;
  std::string optimizer;
  std::uint64_t seed = 0;
  std::size_t trials = 0;
  std::string augmentation;
};

inline std::string encode_prompt(std::string_view algorithm,
                                 const SearchSpace& space) {
  std::string out = "<algorithm>:";
  out += algorithm;
  out += '\n';
  out += encode_space_header(space);
  out += '\n';
  return out;
}

/// Configuration part of a trial, up to and including `*`.
inline std::string encode_config(const SearchSpace& space,
                                 const Configuration& config,
                                 const QuantizationConfig& quant = {}) {
  std::string out;
  bool first = true;
  for (auto i : canonical_order(space)) {
    if (!first) out += ',';
    first = false;
    if (space[i].is_categorical()) {
      out += '<' + std::to_string(static_cast<long>(config[i])) + '>';
    } else {
      out += std::to_string(quantize(to_unit(space[i], config[i]), quant));
    }
  }
  out += '*';
  return out;
}

inline std::string encode_trials(const SearchSpace& space,
                                 const std::vector<Trial>& trials,
                                 const QuantizationConfig& quant = {}) {
  if (trials.empty()) return {};
  std::vector<double> ys;
  ys.reserve(trials.size());
  for (const auto& t : trials) ys.push_back(t.objective);
  const auto scaled = scale_objectives(ys);
  std::string out;
  for (std::size_t t = 0; t < trials.size(); ++t) {
    out += encode_config(space, trials[t].config, quant);
    out += std::to_string(quantize(scaled[t], quant));
    out += '|';
  }
  return out;
}

inline EncodedTrajectory encode_trajectory(const Trajectory& traj,
                                           const QuantizationConfig& quant = {},
                                           std::string augmentation = {}) {
  for (const auto& t : traj.trials) traj.space.validate(t.config);
  EncodedTrajectory e;
  e.text = encode_prompt(traj.optimizer, traj.space) +
           encode_trials(traj.space, traj.trials, quant);
  e.task_id = traj.task_id;
  e.space_id = traj.space.id();
  e.optimizer = traj.optimizer;
  e.seed = traj.seed;
  e.trials = traj.trials.size();
  e.augmentation = std::move(augmentation);
  return e;
}

struct DecodedTrial {
  Configuration config;
  double scaled_objective = 0.0;
};

namespace detail {

// Parses an unsigned decimal without leading zeros that must stay below
// `limit`. Returns the value or throws with the byte offset of the fault.
inline int parse_bounded(std::string_view s, std::size_t base, int limit,
                         const char* what) {
  if (s.empty()) {
    throw ParseError(std::string("empty ") + what + " at byte " +
                         std::to_string(base),
                     base);
  }
  if (s.size() > 1 && s[0] == '0') {
    throw ParseError(std::string("leading zero in ") + what + " at byte " +
                         std::to_string(base),
                     base);
  }
  long v = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] < '0' || s[i] > '9') {
      throw ParseError(std::string("unexpected character in ") + what +
                           " at byte " + std::to_string(base + i),
                       base + i);
    }
    v = v * 10 + (s[i] - '0');
    if (v >= limit) {
      throw ParseError(std::string(what) + " out of range at byte " +
                           std::to_string(base + i),
                       base + i);
    }
  }
  return static_cast<int>(v);
}

}  // namespace detail

/// Parses the configuration part of a trial ("d1,d2,<c>*"). Values come back
/// in the space's own parameter order.
inline Configuration decode_config(const SearchSpace& space,
                                   const QuantizationConfig& quant,
                                   std::string_view s) {
  if (s.empty() || s.back() != '*') {
    throw ParseError("configuration must end with '*'", s.size());
  }
  const auto order = canonical_order(space);
  Configuration c;
  c.values.assign(space.dimension(), 0.0);
  std::size_t pos = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const char sep = k + 1 < order.size() ? ',' : '*';
    const auto end = s.find(sep, pos);
    if (end == std::string_view::npos) {
      throw ParseError("expected '" + std::string(1, sep) + "' after byte " +
                           std::to_string(pos),
                       s.size());
    }
    const auto field = s.substr(pos, end - pos);
    const auto& p = space[order[k]];
    if (p.is_categorical()) {
      if (field.size() < 3 || field.front() != '<' || field.back() != '>') {
        throw ParseError("expected <index> at byte " + std::to_string(pos),
                         pos);
      }
      c[order[k]] = detail::parse_bounded(field.substr(1, field.size() - 2),
                                          pos + 1, p.cardinality(),
                                          "category index");
    } else {
      const int q =
          detail::parse_bounded(field, pos, quant.levels, "numerical token");
      c[order[k]] = from_unit(p, dequantize(q, quant));
    }
    pos = end + 1;
  }
  if (pos != s.size()) {
    throw ParseError("trailing bytes after configuration at byte " +
                         std::to_string(pos),
                     pos);
  }
  return c;
}

/// Parses one complete trial string "config*objective|".
inline DecodedTrial decode_trial(const SearchSpace& space,
                                 const QuantizationConfig& quant,
                                 std::string_view s) {
  const auto star = s.find('*');
  if (star == std::string_view::npos) {
    throw ParseError("missing '*' in trial", s.size());
  }
  DecodedTrial out;
  out.config = decode_config(space, quant, s.substr(0, star + 1));
  if (s.empty() || s.back() != '|') {
    throw ParseError("trial must end with '|'", s.size());
  }
  const auto obj = s.substr(star + 1, s.size() - star - 2);
  out.scaled_objective = dequantize(
      detail::parse_bounded(obj, star + 1, quant.levels, "objective token"),
      quant);
  return out;
}

/// Splits the trial stream of an encoded trajectory into trial strings.
inline std::vector<std::string_view> split_trials(std::string_view stream) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (pos < stream.size()) {
    auto end = stream.find('|', pos);
    if (end == std::string_view::npos) {
      throw ParseError("unterminated trial at byte " + std::to_string(pos),
                       pos);
    }
    out.push_back(stream.substr(pos, end - pos + 1));
    pos = end + 1;
  }
  return out;
}

/// The trial stream of an encoded trajectory text (everything after the
/// header block).
inline std::string_view trial_stream(std::string_view text,
                                     const SearchSpace& space) {
  // algorithm line + one line per parameter
  std::size_t pos = 0;
  for (std::size_t line = 0; line < space.dimension() + 1; ++line) {
    pos = text.find('\n', pos);
    if (pos == std::string_view::npos) {
      throw ParseError("encoded trajectory truncated in header", text.size());
    }
    ++pos;
  }
  return text.substr(pos);
}

// ---------------------------------------------------------------------------
// Augmentation.

/// Randomly permutes numerical parameters among themselves and categorical
/// parameters among themselves, consistently for the space and every trial.
/// The result lists all numerical parameters first.
inline Trajectory permute_augment(const Trajectory& traj, Rng& rng) {
  const auto order = canonical_order(traj.space);
  const std::size_t n_num = traj.space.num_numerical();
  std::vector<std::size_t> num(order.begin(),
                               order.begin() + static_cast<std::ptrdiff_t>(n_num));
  std::vector<std::size_t> cat(order.begin() + static_cast<std::ptrdiff_t>(n_num),
                               order.end());
  rng.shuffle(num);
  rng.shuffle(cat);
  std::vector<std::size_t> perm = num;
  perm.insert(perm.end(), cat.begin(), cat.end());

  std::vector<ParameterDomain> params;
  for (auto i : perm) params.push_back(traj.space[i]);
  Trajectory out{traj.task_id, SearchSpace(traj.space.id(), std::move(params)),
                 traj.optimizer, traj.seed, {}};
  out.trials.reserve(traj.trials.size());
  for (const auto& t : traj.trials) {
    Configuration c;
    for (auto i : perm) c.values.push_back(t.config[i]);
    out.trials.push_back({std::move(c), t.objective});
  }
  return out;
}

/// The first `length` trials. Objectives are rescaled at encoding time, so
/// the prefix is quantized against its own min and max.
inline Trajectory prefix_augment(const Trajectory& traj, std::size_t length) {
  if (length < 1 || length > traj.trials.size()) {
    throw DomainError("prefix length " + std::to_string(length) +
                      " outside [1, " + std::to_string(traj.trials.size()) +
                      "]");
  }
  Trajectory out = traj;
  out.trials.resize(length);
  return out;
}

struct AugmentConfig {
  std::size_t permutations = 1;  // permuted copies per trajectory
  std::vector<std::size_t> prefix_lengths = {5, 10, 20, 50, 100};
  bool keep_original = true;
};

struct AugmentedTrajectory {
  Trajectory trajectory;
  std::string label;
};

/// Original (optionally) plus permuted copies, each also cut to every
/// configured prefix length shorter than the trajectory.
inline std::vector<AugmentedTrajectory> augment(const Trajectory& traj,
                                                const AugmentConfig& cfg,
                                                Rng& rng) {
  std::vector<AugmentedTrajectory> bases;
  if (cfg.keep_original) bases.push_back({traj, "orig"});
  for (std::size_t p = 0; p < cfg.permutations; ++p) {
    bases.push_back({permute_augment(traj, rng), "perm" + std::to_string(p)});
  }
  std::vector<AugmentedTrajectory> out;
  for (auto& b : bases) {
    for (auto len : cfg.prefix_lengths) {
      if (len < b.trajectory.length()) {
        out.push_back({prefix_augment(b.trajectory, len),
                       b.label + "/prefix" + std::to_string(len)});
      }
    }
    out.push_back(std::move(b));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Byte-level trial grammar.

/// Deterministic automaton over bytes accepting exactly the trial strings the
/// encoder emits for one space. States are small values; `advance` returns
/// nullopt on reject.
class TrialGrammar {
 public:
  enum class Phase : std::uint8_t {
    kStart,      // expecting the first byte of a value
    kDigits,     // inside a number with a nonzero leading digit
    kZero,       // number "0"; only a separator may follow
    kCatOpen,    // after '<'
    kCatDigits,  // inside a category index
    kCatZero,    // index "0"; only '>' may follow
    kCatClosed,  // after '>'
  };

  struct State {
    std::uint16_t slot = 0;  // parameter position; == n_params: objective
    Phase phase = Phase::kStart;
    std::int32_t acc = 0;
    bool operator==(const State&) const = default;
  };

  TrialGrammar(const SearchSpace& space, const QuantizationConfig& quant = {})
      : levels_(quant.levels) {
    for (auto i : canonical_order(space)) {
      limits_.push_back(space[i].is_categorical() ? space[i].cardinality()
                                                  : quant.levels);
      categorical_.push_back(space[i].is_categorical());
    }
  }

  State start() const { return {}; }
  std::size_t num_params() const { return limits_.size(); }

  /// True at the start of a trial (initially and right after `|`).
  bool at_trial_start(const State& s) const {
    return s.slot == 0 && s.phase == Phase::kStart;
  }
  /// True right after the `*` closing a configuration.
  bool config_complete(const State& s) const {
    return s.slot == num_params() && s.phase == Phase::kStart;
  }

  std::optional<State> advance(State s, unsigned char b) const {
    const bool objective = s.slot == num_params();
    const bool cat = !objective && categorical_[s.slot];
    const int limit = objective ? levels_ : limits_[s.slot];
    const bool digit = b >= '0' && b <= '9';
    const int d = b - '0';
    switch (s.phase) {
      case Phase::kStart:
        if (cat) {
          if (b != '<') return std::nullopt;
          s.phase = Phase::kCatOpen;
          return s;
        }
        if (!digit || d >= limit) return std::nullopt;
        s.acc = d;
        s.phase = d == 0 ? Phase::kZero : Phase::kDigits;
        return s;
      case Phase::kCatOpen:
        if (!digit || d >= limit) return std::nullopt;
        s.acc = d;
        s.phase = d == 0 ? Phase::kCatZero : Phase::kCatDigits;
        return s;
      case Phase::kCatDigits:
      case Phase::kCatZero:
        if (b == '>') {
          s.phase = Phase::kCatClosed;
          return s;
        }
        if (!digit || s.phase == Phase::kCatZero) return std::nullopt;
        s.acc = s.acc * 10 + d;
        if (s.acc >= limit) return std::nullopt;
        return s;
      case Phase::kDigits:
      case Phase::kZero:
        if (digit) {
          if (s.phase == Phase::kZero) return std::nullopt;
          s.acc = s.acc * 10 + d;
          if (s.acc >= limit) return std::nullopt;
          return s;
        }
        return close_value(s, b);
      case Phase::kCatClosed:
        return close_value(s, b);
    }
    return std::nullopt;
  }

  std::optional<State> advance(State s, std::string_view bytes) const {
    for (unsigned char b : bytes) {
      auto next = advance(s, b);
      if (!next) return std::nullopt;
      s = *next;
    }
    return s;
  }

  /// True iff `s` is exactly one complete trial.
  bool accepts_trial(std::string_view s) const {
    State st = start();
    for (std::size_t i = 0; i < s.size(); ++i) {
      auto next = advance(st, static_cast<unsigned char>(s[i]));
      if (!next) return false;
      st = *next;
      if (at_trial_start(st) && i + 1 != s.size()) return false;
    }
    return !s.empty() && at_trial_start(st);
  }

 private:
  std::optional<State> close_value(State s, unsigned char b) const {
    const std::size_t n = num_params();
    const std::size_t next = s.slot + 1u;
    const char expected = next < n ? ',' : (next == n ? '*' : '|');
    if (b != static_cast<unsigned char>(expected)) return std::nullopt;
    s.slot = s.slot == n ? 0 : static_cast<std::uint16_t>(s.slot + 1);
    s.phase = Phase::kStart;
    s.acc = 0;
    return s;
  }

  int levels_;
  std::vector<int> limits_;
  std::vector<bool> categorical_;
};

// ---------------------------------------------------------------------------
// Corpus files: records separated by one blank line, plus a JSON manifest
// listing their provenance in the same order.

inline void write_corpus(std::ostream& out,
                         const std::vector<EncodedTrajectory>& records) {
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (i > 0) out << "\n\n";
    out << records[i].text;
  }
  if (!records.empty()) out << '\n';
}

inline std::vector<std::string> read_corpus(std::istream& in) {
  std::stringstream ss;
  ss << in.rdbuf();
  std::string all = ss.str();
  while (!all.empty() && all.back() == '\n') all.pop_back();
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos < all.size()) {
    auto end = all.find("\n\n", pos);
    if (end == std::string::npos) end = all.size();
    out.push_back(all.substr(pos, end - pos));
    pos = end + 2;
  }
  return out;
}

inline nlohmann::json corpus_manifest(
    const std::vector<EncodedTrajectory>& records) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : records) {
    j.push_back({{"task_id", r.task_id},
                 {"space_id", r.space_id},
                 {"optimizer", r.optimizer},
                 {"seed", r.seed},
                 {"trials", r.trials},
                 {"augmentation", r.augmentation}});
  }
  return j;
}

}  // namespace bbo
