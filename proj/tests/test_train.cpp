// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <numbers>
#include <sstream>

#include <gtest/gtest.h>

#include "bbo/train.hpp"

namespace {

using bbo::ModelCheckpoint;
using bbo::ModelConfig;
using bbo::TrainConfig;

ModelConfig tiny(int vocab, int ctx) {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.n_kv_groups = 1;
  c.model_dim = 32;
  c.head_dim = 16;
  c.ffn_dim = 64;
  c.vocab_size = vocab;
  c.context_length = ctx;
  return c;
}

std::vector<int> random_tokens(std::size_t n, int vocab, std::uint64_t seed) {
  bbo::Rng rng(seed);
  std::vector<int> out(n);
  for (auto& t : out) t = static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab)));
  return out;
}

TEST(Train, Flops) {
  EXPECT_DOUBLE_EQ(bbo::flops_estimate(2e6, 2e8), 2.4e15);
  EXPECT_DOUBLE_EQ(bbo::flops_estimate(8e7, 2e9), 9.6e17);
  EXPECT_DOUBLE_EQ(bbo::flops_estimate(3e5, 2e7), 2 * bbo::flops_estimate(3e5, 1e7));
  EXPECT_THROW(bbo::flops_estimate(0, 1), bbo::DomainError);
}

TEST(Train, ScheduleEndpoints) {
  const double peak = 3e-3;
  for (std::size_t total : {10u, 50u, 100u, 1000u}) {
    const std::size_t warm = total / 10;
    EXPECT_DOUBLE_EQ(bbo::learning_rate_at(warm - 1, total, peak, 0.1), peak);
    EXPECT_DOUBLE_EQ(bbo::learning_rate_at(0, total, peak, 0.1), peak / static_cast<double>(warm));
    EXPECT_NEAR(bbo::learning_rate_at(total - 1, total, peak, 0.1), 0.0, 1e-18);
    double prev = peak;
    for (std::size_t s = warm; s < total; ++s) {
      const double lr = bbo::learning_rate_at(s, total, peak, 0.1);
      EXPECT_LE(lr, prev + 1e-18);
      prev = lr;
      const double progress = static_cast<double>(s - warm) / static_cast<double>(total - 1 - warm);
      EXPECT_NEAR(lr, peak * 0.5 * (1 + std::cos(std::numbers::pi * progress)), 1e-15);
    }
  }
  EXPECT_EQ(bbo::warmup_steps(5, 0.1), 1u);
}

TEST(Train, Windows) {
  EXPECT_EQ(bbo::window_starts(9, 4), (std::vector<std::size_t>{0, 4}));
  EXPECT_EQ(bbo::window_starts(3, 4), (std::vector<std::size_t>{0}));
  EXPECT_TRUE(bbo::window_starts(1, 4).empty());
  EXPECT_EQ(bbo::pack_documents({{1, 2}, {3}}, 9), (std::vector<int>{1, 2, 9, 3, 9}));
}

TEST(Train, ClipGlobalNorm) {
  std::vector<float> g = {3, 4};
  EXPECT_DOUBLE_EQ(bbo::clip_global_norm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0], 0.6, 1e-6);
  EXPECT_NEAR(g[1], 0.8, 1e-6);
  std::vector<float> small = {0.1f};
  bbo::clip_global_norm(small, 1.0);
  EXPECT_EQ(small[0], 0.1f);
}

TEST(Train, AdamWMatchesHandComputation) {
  ModelConfig c = tiny(8, 4);
  bbo::ParamLayout layout(c);
  TrainConfig tc;
  bbo::AdamW opt(layout, tc);
  std::vector<float> p(layout.total(), 0.5f), g(layout.total(), 0.2f);
  opt.step(p, g, 0.01);
  // first step: m_hat = g, v_hat = g^2, so the update is lr * g / (|g| + eps)
  const auto& emb = layout.tensors().front();
  const auto& norm = layout.tensors()[1];
  ASSERT_TRUE(emb.is_matrix());
  ASSERT_FALSE(norm.is_matrix());
  const double adam = 0.01 * 0.2 / (0.2 + 1e-8);
  EXPECT_NEAR(p[emb.offset], 0.5 - 0.01 * 0.1 * 0.5 - adam, 1e-6);
  EXPECT_NEAR(p[norm.offset], 0.5 - adam, 1e-6);
}

TEST(Train, UntrainedLossNearLogVocab) {
  ModelConfig c = tiny(64, 32);
  bbo::Transformer<float> m(c);
  m.init(1);
  const auto stream = random_tokens(32 * 20 + 1, 64, 2);
  const double a = bbo::evaluate_loss(m, stream);
  EXPECT_NEAR(a, std::log(64.0), 0.1);
  EXPECT_EQ(a, bbo::evaluate_loss(m, stream));
  EXPECT_THROW(bbo::evaluate_loss(m, std::vector<int>{}), bbo::DomainError);
}

TEST(Train, ZeroStepsKeepsInitialization) {
  ModelCheckpoint ck(tiny(16, 8));
  ck.model.init(3);
  const auto before = ck.model.params();
  ck.train.total_tokens = 10;  // below one batch of 8 windows x 8 tokens
  const auto stream = random_tokens(200, 16, 4);
  bbo::train_model(ck, stream, stream);
  EXPECT_EQ(ck.model.params(), before);
  ASSERT_EQ(ck.history.size(), 1u);
  EXPECT_EQ(ck.history[0].step, 0u);
  EXPECT_FALSE(std::isnan(ck.history[0].val_loss));
}

TEST(Train, CorpusTooSmall) {
  ModelCheckpoint ck(tiny(16, 8));
  ck.model.init(0);
  EXPECT_THROW(bbo::train_model(ck, std::vector<int>{1, 2, 3}, {}), bbo::DomainError);
}

ModelCheckpoint trained(std::uint64_t seed, const std::vector<int>& stream) {
  ModelCheckpoint ck(tiny(16, 16));
  ck.model.init(seed);
  ck.train.seed = seed;
  ck.train.global_batch_size = 4;
  ck.train.total_tokens = 4 * 16 * 30;
  ck.train.learning_rate = 1e-2;
  ck.train.eval_interval = 10;
  bbo::train_model(ck, stream, stream);
  return ck;
}

TEST(Train, DeterministicAndRecordsHistory) {
  const auto stream = random_tokens(16 * 12 + 1, 16, 5);
  const auto a = trained(7, stream);
  const auto b = trained(7, stream);
  EXPECT_EQ(a.model.params(), b.model.params());
  EXPECT_EQ(bbo::checkpoint_id(a), bbo::checkpoint_id(b));
  EXPECT_EQ(a.step, 30u);
  ASSERT_EQ(a.history.size(), 31u);
  std::size_t evals = 0;
  for (const auto& r : a.history) evals += !std::isnan(r.val_loss);
  EXPECT_EQ(evals, 4u);  // steps 0, 10, 20, 30
  EXPECT_EQ(a.history.back().tokens, 30u * 4 * 16);
  EXPECT_NE(bbo::checkpoint_id(a), bbo::checkpoint_id(trained(8, stream)));
}

TEST(Train, OverfitsTenSequences) {
  ModelConfig c = tiny(12, 16);
  c.n_layers = 2;
  c.model_dim = 64;
  c.head_dim = 32;
  c.ffn_dim = 128;
  ModelCheckpoint ck(c);
  ck.model.init(1);
  std::vector<std::vector<int>> docs;
  for (int d = 0; d < 10; ++d) docs.push_back(random_tokens(15, 11, 100 + static_cast<std::uint64_t>(d)));
  const auto stream = bbo::pack_documents(docs, 11);
  ck.train.global_batch_size = 10;
  ck.train.total_tokens = 10 * 16 * 400;
  ck.train.learning_rate = 1e-2;
  ck.train.weight_decay = 0.0;
  ck.train.eval_interval = 1000;
  bbo::train_model(ck, stream, stream);
  EXPECT_LT(bbo::evaluate_loss(ck.model, stream), 0.1);
}

TEST(Train, CheckpointRoundTrip) {
  const auto stream = random_tokens(16 * 12 + 1, 16, 6);
  const auto ck = trained(3, stream);
  std::stringstream ss;
  bbo::save_checkpoint(ck, ss);
  const auto back = bbo::load_checkpoint(ss);
  EXPECT_EQ(back.model.params(), ck.model.params());
  EXPECT_EQ(back.step, ck.step);
  EXPECT_EQ(back.history.size(), ck.history.size());
  EXPECT_EQ(bbo::to_json(back.config), bbo::to_json(ck.config));
  EXPECT_EQ(bbo::checkpoint_id(back), bbo::checkpoint_id(ck));
  EXPECT_TRUE(std::isnan(back.history[1].val_loss));

  std::string bytes = ss.str();
  bytes[0] = 'X';
  std::istringstream bad(bytes);
  EXPECT_THROW(bbo::load_checkpoint(bad), bbo::Error);
  std::istringstream cut(ss.str().substr(0, ss.str().size() - 3));
  EXPECT_THROW(bbo::load_checkpoint(cut), bbo::Error);
}

TEST(Train, ConfigValidation) {
  TrainConfig t;
  t.warmup_fraction = 1.0;
  EXPECT_THROW(t.validate(), bbo::ConfigError);
  t = {};
  t.total_tokens = 0;
  EXPECT_THROW(t.validate(), bbo::ConfigError);
  const auto j = bbo::to_json(TrainConfig{});
  EXPECT_EQ(bbo::to_json(bbo::train_config_from_json(j)), j);
}

}  // namespace
