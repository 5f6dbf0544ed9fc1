// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "bbo/bench.hpp"
#include "bbo/codec.hpp"
#include "bbo/error.hpp"
#include "bbo/model.hpp"
#include "bbo/rng.hpp"
#include "bbo/runner.hpp"
#include "bbo/tokenizer.hpp"
#include "bbo/train.hpp"

namespace bbo {

/// Trie over the byte expansions of every non-EOS token.
class TokenTrie {
 public:
  struct Node {
    std::vector<std::pair<unsigned char, std::uint32_t>> edges;  // sorted
    int token = -1;
  };

  explicit TokenTrie(const Tokenizer& tok) : nodes_(1) {
    for (int id = 0; id < static_cast<int>(tok.vocab_size()); ++id) {
      std::uint32_t cur = 0;
      for (unsigned char b : tok.expansion(id)) {
        auto& edges = nodes_[cur].edges;
        auto it = std::lower_bound(
            edges.begin(), edges.end(), b,
            [](const auto& e, unsigned char v) { return e.first < v; });
        if (it != edges.end() && it->first == b) {
          cur = it->second;
        } else {
          const auto next = static_cast<std::uint32_t>(nodes_.size());
          edges.insert(it, {b, next});
          nodes_.emplace_back();
          cur = next;
        }
      }
      nodes_[cur].token = id;
    }
  }

  std::size_t size() const { return nodes_.size(); }

  /// Appends to `out` every token whose full expansion the grammar accepts
  /// from `state`. Subtrees are pruned at the first rejected byte.
  void allowed(const TrialGrammar& g, TrialGrammar::State state,
               std::vector<int>& out) const {
    out.clear();
    walk(g, 0, state, out);
  }

 private:
  void walk(const TrialGrammar& g, std::uint32_t node,
            TrialGrammar::State state, std::vector<int>& out) const {
    for (const auto& [b, child] : nodes_[node].edges) {
      auto next = g.advance(state, b);
      if (!next) continue;
      if (nodes_[child].token >= 0) out.push_back(nodes_[child].token);
      walk(g, child, *next, out);
    }
  }

  std::vector<Node> nodes_;
};

/// Checks that trie-based masking agrees with direct per-byte grammar
/// evaluation for every token, from every grammar state visited while
/// scanning the smallest, largest and a middle configuration of the space.
/// Returns the number of disagreements.
inline std::size_t verify_token_mask(const Tokenizer& tok,
                                     const TokenTrie& trie,
                                     const SearchSpace& space,
                                     const QuantizationConfig& quant = {}) {
  const TrialGrammar g(space, quant);
  std::vector<TrialGrammar::State> states;
  for (double u : {0.0, 0.5, 1.0}) {
    std::vector<double> coords(space.dimension(), u);
    Configuration c;
    for (std::size_t i = 0; i < space.dimension(); ++i) {
      const auto& p = space[i];
      c.values.push_back(p.is_categorical()
                             ? std::floor(u * (p.cardinality() - 1))
                             : from_unit(p, u));
    }
    const std::string trial =
        encode_config(space, c, quant) + std::to_string(quant.levels - 1) + "|";
    auto st = g.start();
    states.push_back(st);
    for (unsigned char b : trial) {
      st = *g.advance(st, b);
      states.push_back(st);
    }
  }
  std::size_t mismatches = 0;
  std::vector<int> via_trie;
  std::vector<char> ok(tok.vocab_size());
  for (const auto& st : states) {
    trie.allowed(g, st, via_trie);
    std::fill(ok.begin(), ok.end(), 0);
    for (int id : via_trie) ok[static_cast<std::size_t>(id)] = 1;
    for (std::size_t id = 0; id < tok.vocab_size(); ++id) {
      const bool direct =
          g.advance(st, tok.expansion(static_cast<int>(id))).has_value();
      if (direct != static_cast<bool>(ok[id])) ++mismatches;
    }
  }
  return mismatches;
}

/// Temperature softmax restricted to `allowed`; every other entry is 0.
inline std::vector<double> masked_distribution(std::span<const float> logits,
                                               const std::vector<int>& allowed,
                                               double temperature) {
  if (!(temperature > 0)) throw DomainError("temperature must be > 0");
  if (allowed.empty()) throw Error("every token is masked");
  std::vector<double> p(logits.size(), 0.0);
  double mx = -std::numeric_limits<double>::infinity();
  for (int id : allowed) mx = std::max(mx, static_cast<double>(logits[id]));
  double z = 0.0;
  for (int id : allowed) {
    p[id] = std::exp((logits[id] - mx) / temperature);
    z += p[id];
  }
  for (int id : allowed) p[id] /= z;
  return p;
}

struct SamplerConfig {
  double temperature = 1.0;
  std::size_t max_trial_bytes = 0;  // 0: derived from the space
  std::uint64_t seed = 0;
};

inline std::size_t default_max_trial_bytes(const SearchSpace& space,
                                           const QuantizationConfig& quant) {
  std::size_t n = std::to_string(quant.levels - 1).size() + 2;  // objective
  for (std::size_t i = 0; i < space.dimension(); ++i) {
    const auto& p = space[i];
    n += p.is_categorical() ? std::to_string(p.cardinality() - 1).size() + 3
                            : std::to_string(quant.levels - 1).size() + 1;
  }
  return n;
}

/// Samples one configuration string (up to and including `*`) continuing the
/// token history held in `session`. Tokens the grammar would reject are
/// masked out. A sampled token that runs past `*` is cut there. Leaves the
/// sampled tokens in the session.
inline std::string constrained_sample_trial(InferenceSession<float>& session,
                                            std::vector<float> logits,
                                            const Tokenizer& tok,
                                            const TokenTrie& trie,
                                            const TrialGrammar& grammar,
                                            const SamplerConfig& cfg,
                                            std::size_t max_bytes, Rng& rng) {
  std::string out;
  auto state = grammar.start();
  std::vector<int> allowed;
  while (true) {
    trie.allowed(grammar, state, allowed);
    if (allowed.empty()) {
      throw Error("all tokens masked after '" + out +
                  "': tokenizer and grammar disagree");
    }
    const auto probs = masked_distribution(
        std::span<const float>(logits.data(), tok.vocab_size()), allowed,
        cfg.temperature);
    double u = rng.uniform();
    int pick = allowed.back();
    for (int id : allowed) {
      u -= probs[id];
      if (u < 0) {
        pick = id;
        break;
      }
    }
    for (unsigned char b : tok.expansion(pick)) {
      state = *grammar.advance(state, b);
      out.push_back(static_cast<char>(b));
      if (grammar.config_complete(state)) return out;
    }
    if (out.size() > max_bytes) {
      throw Error("trial exceeded " + std::to_string(max_bytes) + " bytes");
    }
    logits = session.append(std::span<const int>(&pick, 1));
  }
}

/// Encoded history the model conditions on: prompt plus re-encoded trials.
/// When the token sequence would not leave `reserve` free positions, the
/// oldest trials are dropped in blocks of `drop_block`.
struct HistoryEncoding {
  std::vector<int> tokens;
  std::size_t dropped = 0;
};

inline HistoryEncoding encode_history(const Tokenizer& tok,
                                      std::string_view algorithm,
                                      const SearchSpace& space,
                                      const std::vector<Trial>& trials,
                                      const QuantizationConfig& quant,
                                      std::size_t context, std::size_t reserve,
                                      std::size_t drop_block = 8) {
  const auto prompt = tok.encode(encode_prompt(algorithm, space));
  if (prompt.size() + reserve > context) {
    throw DomainError("prompt alone does not fit the context window");
  }
  HistoryEncoding h;
  while (true) {
    std::vector<Trial> kept(trials.begin() + static_cast<long>(h.dropped),
                            trials.end());
    h.tokens = prompt;
    const auto body = tok.encode(encode_trials(space, kept, quant));
    h.tokens.insert(h.tokens.end(), body.begin(), body.end());
    if (h.tokens.size() + reserve <= context) return h;
    h.dropped = std::min(trials.size(), h.dropped + drop_block);
  }
}

/// Uses the checkpoint as an optimizer on `task`: each step re-encodes the
/// full history, samples a configuration under the grammar mask, and
/// evaluates it with the task's own oracle.
inline Trajectory optimize_with_model(const ModelCheckpoint& ck,
                                      const Tokenizer& tok,
                                      const BenchmarkTask& task,
                                      const std::string& algorithm,
                                      std::size_t budget,
                                      const SamplerConfig& cfg,
                                      const QuantizationConfig& quant = {},
                                      const TokenTrie* shared_trie = nullptr) {
  if (budget < 1) throw DomainError("budget must be >= 1");
  if (static_cast<std::size_t>(ck.config.vocab_size) != tok.n_tokens()) {
    throw ConfigError("checkpoint vocabulary (" +
                      std::to_string(ck.config.vocab_size) +
                      ") does not match tokenizer (" +
                      std::to_string(tok.n_tokens()) + ")");
  }
  std::optional<TokenTrie> own;
  if (!shared_trie) own.emplace(tok);
  const TokenTrie& trie = shared_trie ? *shared_trie : *own;
  const TrialGrammar grammar(task.space, quant);
  const std::size_t max_bytes = cfg.max_trial_bytes
                                    ? cfg.max_trial_bytes
                                    : default_max_trial_bytes(task.space, quant);
  const auto ctx = static_cast<std::size_t>(ck.config.context_length);

  Trajectory traj{task.id, task.space,
                  "model:" + algorithm + "@" + checkpoint_id(ck), cfg.seed, {}};
  InferenceSession<float> session(ck.model);
  Rng rng(cfg.seed);
  std::vector<float> logits;
  for (std::size_t t = 0; t < budget; ++t) {
    const auto hist = encode_history(tok, algorithm, task.space, traj.trials,
                                     quant, ctx, max_bytes);
    // reuse the cached prefix shared with the previous step
    const auto& cached = session.tokens();
    std::size_t common = 0;
    while (common < cached.size() && common < hist.tokens.size() &&
           cached[common] == hist.tokens[common]) {
      ++common;
    }
    if (common == hist.tokens.size()) --common;  // need fresh logits
    session.truncate(common);
    logits = session.append(std::span<const int>(hist.tokens).subspan(common));
    std::string text;
    try {
      text = constrained_sample_trial(session, logits, tok, trie, grammar, cfg,
                                      max_bytes, rng);
    } catch (const std::exception& e) {
      throw Error("trial " + std::to_string(t) + ": " + e.what());
    }
    Configuration c = decode_config(task.space, quant, text);
    const double y = task(c);
    if (!std::isfinite(y)) {
      throw Error("trial " + std::to_string(t) + ": non-finite objective");
    }
    traj.trials.push_back({std::move(c), y});
  }
  return traj;
}

/// Runs optimize_with_model for each seed, `jobs` loops at a time. Results
/// are ordered like `seeds`.
inline std::vector<Trajectory> optimize_many(
    const ModelCheckpoint& ck, const Tokenizer& tok, const BenchmarkTask& task,
    const std::string& algorithm, std::size_t budget,
    const std::vector<std::uint64_t>& seeds, SamplerConfig cfg,
    std::size_t jobs = 1, const QuantizationConfig& quant = {}) {
  const TokenTrie trie(tok);
  std::vector<std::optional<Trajectory>> slots(seeds.size());
  std::vector<std::string> errors(seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < seeds.size();) {
      SamplerConfig c = cfg;
      c.seed = seeds[i];
      try {
        slots[i] = optimize_with_model(ck, tok, task, algorithm, budget, c,
                                       quant, &trie);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, seeds.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  std::vector<Trajectory> out;
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (!slots[i]) {
      throw Error("seed " + std::to_string(seeds[i]) + ": " + errors[i]);
    }
    out.push_back(std::move(*slots[i]));
  }
  return out;
}

}  // namespace bbo
