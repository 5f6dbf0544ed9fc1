// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "bbo/infer.hpp"
#include "test_util.hpp"

namespace {

using bbo::Configuration;
using bbo::ModelCheckpoint;
using bbo::ParameterDomain;
using bbo::SearchSpace;
using bbo::Tokenizer;

SearchSpace mixed_space() {
  return SearchSpace("mixed", {ParameterDomain::log_uniform("a", 0.01, 1.0),
                             ParameterDomain::integer("b", 1, 5),
                             ParameterDomain::categorical("c", 2)});
}

bbo::BenchmarkTask mixed_task() {
  return {"mixed-task", mixed_space(),
          [](const Configuration& c) { return std::log(c[0]) + c[1] + 3 * c[2]; }, "test"};
}

std::vector<std::string> corpus_for(const bbo::BenchmarkTask& task, std::size_t n, std::size_t T) {
  std::vector<std::string> docs;
  for (std::size_t i = 0; i < n; ++i) {
    const auto kind = i % 2 ? bbo::OptimizerKind::kRS : bbo::OptimizerKind::kTPE;
    docs.push_back(bbo::encode_trajectory(bbo::run_trajectory(task, kind, T, i)).text);
  }
  return docs;
}

ModelCheckpoint untrained(const Tokenizer& tok, int ctx) {
  bbo::ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.n_kv_groups = 1;
  c.model_dim = 32;
  c.head_dim = 16;
  c.ffn_dim = 64;
  c.vocab_size = static_cast<int>(tok.n_tokens());
  c.context_length = ctx;
  ModelCheckpoint ck(c);
  ck.model.init(1);
  return ck;
}

TEST(Infer, TrieMaskMatchesDirectGrammar) {
  const auto tok = Tokenizer::train(corpus_for(mixed_task(), 20, 20), 450);
  const bbo::TokenTrie trie(tok);
  EXPECT_EQ(bbo::verify_token_mask(tok, trie, mixed_space()), 0u);
  bbo::Rng rng(2);
  for (std::size_t s = 0; s < 20; ++s) {
    const auto space = bbo::testing::random_space(rng, s);
    EXPECT_EQ(bbo::verify_token_mask(tok, trie, space), 0u);
    EXPECT_EQ(bbo::verify_token_mask(tok, trie, space, bbo::QuantizationConfig(37)), 0u);
  }
}

TEST(Infer, MaskedDistribution) {
  const std::vector<float> logits = {1.0f, 2.0f, 3.0f, 100.0f};
  const auto p = bbo::masked_distribution(logits, {0, 2}, 1.0);
  EXPECT_EQ(p[1], 0.0);
  EXPECT_EQ(p[3], 0.0);
  EXPECT_NEAR(p[0], 1 / (1 + std::exp(2.0)), 1e-12);
  EXPECT_NEAR(p[0] + p[2], 1.0, 1e-12);
  const auto hot = bbo::masked_distribution(logits, {0, 2}, 0.5);
  EXPECT_NEAR(hot[0], 1 / (1 + std::exp(4.0)), 1e-12);
  EXPECT_THROW(bbo::masked_distribution(logits, {}, 1.0), bbo::Error);
  EXPECT_THROW(bbo::masked_distribution(logits, {0}, 0.0), bbo::DomainError);
}

TEST(Infer, HistoryDropsOldestTrialsInBlocks) {
  const auto task = mixed_task();
  const auto tok = Tokenizer::train(corpus_for(task, 6, 10), 300);
  const auto traj = bbo::run_trajectory(task, bbo::OptimizerKind::kRS, 40, 3);
  const auto full = bbo::encode_history(tok, "RS", task.space, traj.trials, {}, 100000, 0);
  EXPECT_EQ(full.dropped, 0u);
  EXPECT_EQ(tok.decode(full.tokens), bbo::encode_prompt("RS", task.space) +
                                         bbo::encode_trials(task.space, traj.trials));
  const std::size_t ctx = full.tokens.size() / 2;
  const auto cut = bbo::encode_history(tok, "RS", task.space, traj.trials, {}, ctx, 20);
  EXPECT_GT(cut.dropped, 0u);
  EXPECT_EQ(cut.dropped % 8, 0u);
  EXPECT_LE(cut.tokens.size() + 20, ctx);
  const std::vector<bbo::Trial> kept(traj.trials.begin() + static_cast<long>(cut.dropped - 8),
                                     traj.trials.end());
  EXPECT_GT(tok.encode(bbo::encode_prompt("RS", task.space) + bbo::encode_trials(task.space, kept)).size() +
                20,
            ctx);
  EXPECT_THROW(bbo::encode_history(tok, "RS", task.space, {}, {}, 10, 5), bbo::DomainError);
}

TEST(Infer, SampledTrialsAlwaysParse) {
  const auto task = mixed_task();
  const auto tok = Tokenizer::train(corpus_for(task, 20, 20), 400);
  const auto ck = untrained(tok, 256);
  bbo::SamplerConfig cfg;
  std::vector<int> cat_counts(2);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    cfg.seed = seed;
    const auto traj = bbo::optimize_with_model(ck, tok, task, "RS", 25, cfg);
    ASSERT_EQ(traj.trials.size(), 25u);
    EXPECT_EQ(traj.optimizer, "model:RS@" + bbo::checkpoint_id(ck));
    for (const auto& t : traj.trials) {
      EXPECT_TRUE(task.space.contains(t.config));
      EXPECT_TRUE(t.config[2] == 0.0 || t.config[2] == 1.0);
      cat_counts[static_cast<std::size_t>(t.config[2])]++;
      EXPECT_EQ(t.objective, task(t.config));
    }
  }
  EXPECT_GT(cat_counts[0] + cat_counts[1], 0);
}

TEST(Infer, DeterministicAcrossJobs) {
  const auto task = mixed_task();
  const auto tok = Tokenizer::train(corpus_for(task, 10, 10), 350);
  const auto ck = untrained(tok, 128);
  const std::vector<std::uint64_t> seeds = {5, 6, 7};
  const auto a = bbo::optimize_many(ck, tok, task, "TPE", 12, seeds, {}, 1);
  const auto b = bbo::optimize_many(ck, tok, task, "TPE", 12, seeds, {}, 3);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a[1].seed, 6u);
}

TEST(Infer, RejectsMismatchedVocabulary) {
  const auto task = mixed_task();
  const auto tok = Tokenizer::train(corpus_for(task, 4, 5), 300);
  auto ck = untrained(tok, 64);
  const auto other = Tokenizer::train(corpus_for(task, 4, 5), 290);
  EXPECT_THROW(bbo::optimize_with_model(ck, other, task, "RS", 1, {}), bbo::ConfigError);
  EXPECT_THROW(bbo::optimize_with_model(ck, tok, task, "RS", 0, {}), bbo::DomainError);
}

TEST(Infer, GreedyDecodingReproducesMemorizedTrial) {
  const auto task = bbo::SyntheticRegistry::standard().task("forrester");
  const auto traj = bbo::run_trajectory(task, bbo::OptimizerKind::kRS, 6, 11);
  const std::string doc = bbo::encode_trajectory(traj).text;
  const auto tok = Tokenizer::train({doc}, 300);
  bbo::ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.n_kv_groups = 1;
  c.model_dim = 64;
  c.head_dim = 32;
  c.ffn_dim = 128;
  c.vocab_size = static_cast<int>(tok.n_tokens());
  c.context_length = 64;
  ModelCheckpoint ck(c);
  ck.model.init(2);
  std::vector<std::vector<int>> docs(30, tok.encode(doc));
  const auto stream = bbo::pack_documents(docs, tok.eos_id());
  ck.train.global_batch_size = 4;
  ck.train.learning_rate = 1e-2;
  ck.train.weight_decay = 0;
  ck.train.total_tokens = 4 * 64 * 250;
  ck.train.eval_interval = 1000;
  bbo::train_model(ck, stream, {});
  ASSERT_LT(bbo::evaluate_loss(ck.model, stream), 0.3);

  bbo::SamplerConfig cfg;
  cfg.temperature = 0.01;
  const auto out = bbo::optimize_with_model(ck, tok, task, "RS", 1, cfg);
  const std::string want = bbo::encode_config(task.space, traj.trials[0].config);
  EXPECT_EQ(bbo::encode_config(task.space, out.trials[0].config), want);
}

}  // namespace
