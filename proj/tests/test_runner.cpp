// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "bbo/runner.hpp"

namespace {

using bbo::OptimizerKind;

const bbo::BenchmarkTask& branin() {
  static const auto t = bbo::SyntheticRegistry::standard().task("branin");
  return t;
}

TEST(Runner, SingleTrial) {
  const auto traj = bbo::run_trajectory(branin(), OptimizerKind::kRS, 1, 3);
  ASSERT_EQ(traj.length(), 1u);
  EXPECT_EQ(traj.optimizer, "RS");
  EXPECT_EQ(traj.task_id, "synthetic:branin");
  EXPECT_THROW(bbo::run_trajectory(branin(), OptimizerKind::kRS, 0, 3), bbo::DomainError);
}

TEST(Runner, Deterministic) {
  for (auto k : bbo::kAllOptimizerKinds) {
    const auto a = bbo::run_trajectory(branin(), k, 30, 99);
    const auto b = bbo::run_trajectory(branin(), k, 30, 99);
    std::ostringstream sa, sb;
    bbo::write_trajectory(sa, a);
    bbo::write_trajectory(sb, b);
    EXPECT_EQ(sa.str(), sb.str()) << bbo::to_string(k);
    for (const auto& t : a.trials) EXPECT_TRUE(a.space.contains(t.config));
  }
}

TEST(Runner, BestSoFarNonIncreasing) {
  const auto traj = bbo::run_trajectory(branin(), OptimizerKind::kRS, 100, 1);
  double best = traj.trials[0].objective;
  for (const auto& t : traj.trials) {
    const double next = std::min(best, t.objective);
    EXPECT_LE(next, best);
    best = next;
  }
}

TEST(Runner, OracleErrorsCarryTrialIndex) {
  auto task = branin();
  int calls = 0;
  task.oracle = [&](const bbo::Configuration&) {
    if (++calls == 3) throw std::runtime_error("boom");
    return 1.0;
  };
  try {
    bbo::run_trajectory(task, OptimizerKind::kRS, 5, 0);
    FAIL();
  } catch (const bbo::Error& e) {
    EXPECT_NE(std::string(e.what()).find("trial 2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("boom"), std::string::npos);
  }
}

TEST(Runner, TrajectoryRoundTrip) {
  for (auto k : bbo::kAllOptimizerKinds) {
    const auto traj = bbo::run_trajectory(branin(), k, 20, 5);
    std::stringstream ss;
    bbo::write_trajectory(ss, traj);
    EXPECT_EQ(bbo::read_trajectory(ss), traj);
  }
  std::istringstream truncated(
      R"({"task_id":"a","space_id":"s","optimizer":"RS","seed":0,"T":2,"space":{"id":"s","parameters":[{"name":"x","kind":"uniform","lo":0,"hi":1}]}})"
      "\n"
      R"({"t":0,"config":{"x":0.5},"objective":1})");
  EXPECT_THROW(bbo::read_trajectory(truncated), bbo::ParseError);
}

TEST(Runner, GridCardinality) {
  std::vector<std::string> tasks;
  for (int i = 0; i < 3095; ++i) tasks.push_back("t" + std::to_string(i));
  std::vector<std::uint64_t> seeds(30);
  std::iota(seeds.begin(), seeds.end(), 0);
  const auto big = bbo::plan_grid(tasks, {"RS", "REA", "TPE", "BORE", "CQR", "HEBO"}, seeds, 0);
  EXPECT_EQ(big.runs.size(), 557100u);

  bbo::Rng rng(4);
  for (int k = 0; k < 30; ++k) {
    const std::size_t no = 1 + rng.below(4), nt = 1 + rng.below(6), ns = 1 + rng.below(7);
    std::vector<std::string> o(no), t(nt);
    std::vector<std::uint64_t> s(ns);
    for (std::size_t i = 0; i < no; ++i) o[i] = "o" + std::to_string(i);
    for (std::size_t i = 0; i < nt; ++i) t[i] = "t" + std::to_string(i);
    std::iota(s.begin(), s.end(), 0);
    EXPECT_EQ(bbo::plan_grid(t, o, s, 1).runs.size(), no * nt * ns);
  }
  EXPECT_THROW(bbo::plan_grid({}, {"RS"}, {0}, 0), bbo::ConfigError);
}

TEST(Runner, RunGrid) {
  const auto& reg = bbo::SyntheticRegistry::standard();
  const std::vector<bbo::BenchmarkTask> tasks = {reg.task("branin"), reg.task("forrester"),
                                                 reg.task("hartmann3")};
  const std::vector<OptimizerKind> kinds = {OptimizerKind::kRS, OptimizerKind::kTPE};
  const std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  const auto one = bbo::run_grid(tasks, kinds, seeds, 8, 7, 1);
  const auto par = bbo::run_grid(tasks, kinds, seeds, 8, 7, 3);
  ASSERT_EQ(one.manifest.runs.size(), 30u);
  EXPECT_EQ(one.manifest.runs, par.manifest.runs);
  EXPECT_EQ(one.trajectories, par.trajectories);
  for (const auto& r : one.manifest.runs) EXPECT_EQ(r.status, "ok");

  const auto single = bbo::run_grid({tasks[0]}, {OptimizerKind::kRS}, {0}, 3);
  EXPECT_EQ(single.manifest.runs.size(), 1u);
}

TEST(Runner, SeedsIndependentOfGridShape) {
  const auto small = bbo::plan_grid({"a"}, {"RS"}, {0, 1}, 5);
  const auto large = bbo::plan_grid({"a", "b", "c"}, {"RS", "TPE"}, {0, 1, 2}, 5);
  EXPECT_EQ(small.runs[1].seed, large.runs[1].seed);
  std::set<std::uint64_t> distinct;
  for (const auto& r : large.runs) distinct.insert(r.seed);
  EXPECT_EQ(distinct.size(), large.runs.size());
}

TEST(Runner, FailedRunsRecorded) {
  auto bad = branin();
  bad.id = "bad";
  bad.oracle = [](const bbo::Configuration&) { return std::nan(""); };
  const auto g = bbo::run_grid({branin(), bad}, {OptimizerKind::kRS}, {0}, 4);
  EXPECT_EQ(g.manifest.runs[0].status, "ok");
  EXPECT_EQ(g.manifest.runs[1].status, "failed");
  EXPECT_FALSE(g.trajectories[1].has_value());
  EXPECT_NE(g.manifest.runs[1].error.find("non-finite"), std::string::npos);

  std::stringstream ss;
  bbo::write_manifest(ss, g.manifest);
  EXPECT_EQ(bbo::read_manifest(ss), g.manifest.runs);
}

std::vector<bbo::TaskInfo> tasks_in(const std::string& space, int n, const std::string& family = "f") {
  std::vector<bbo::TaskInfo> out;
  for (int i = 0; i < n; ++i) out.push_back({space + "/t" + std::to_string(i), space, family});
  return out;
}

TEST(Runner, SplitsFraction) {
  bbo::SplitConfig cfg;
  cfg.holdout_fraction = 0.2;
  const auto s = bbo::make_splits(tasks_in("s", 10), cfg);
  EXPECT_EQ(s.val_unseen_task.size(), 2u);
  EXPECT_EQ(s.train.size(), 8u);
  EXPECT_TRUE(s.val_unseen_space.empty());
}

TEST(Runner, SplitsHeldOutSpace) {
  auto tasks = tasks_in("a", 6);
  const auto held = tasks_in("b", 3);
  tasks.insert(tasks.end(), held.begin(), held.end());
  bbo::SplitConfig cfg;
  cfg.held_out_spaces = {"b"};
  const auto s = bbo::make_splits(tasks, cfg);
  EXPECT_EQ(s.val_unseen_space.size(), 3u);
  for (const auto& t : held) EXPECT_EQ(s.split_of(t.task_id), "val-unseen-space");

  cfg.train_spaces = {"b"};
  EXPECT_THROW(bbo::make_splits(tasks, cfg), bbo::ConfigError);
}

TEST(Runner, SplitsPerFamilyAndNoLeakage) {
  bbo::Rng rng(6);
  for (int k = 0; k < 20; ++k) {
    std::vector<bbo::TaskInfo> tasks;
    for (int f = 0; f < 3; ++f) {
      const auto more = tasks_in("s" + std::to_string(f), 5 + static_cast<int>(rng.below(10)),
                                 "fam" + std::to_string(f));
      tasks.insert(tasks.end(), more.begin(), more.end());
    }
    bbo::SplitConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(k);
    cfg.holdout_per_family = {{"fam0", 2}, {"fam1", 3}};
    cfg.held_out_spaces = {"s2"};
    const auto s = bbo::make_splits(tasks, cfg);
    EXPECT_EQ(s.val_unseen_task.size(), 5u);
    std::set<std::string> seen;
    for (const auto* v : {&s.train, &s.val_unseen_task, &s.val_unseen_space})
      for (const auto& id : *v) EXPECT_TRUE(seen.insert(id).second) << id;
    EXPECT_EQ(seen.size(), tasks.size());
    const auto back = bbo::splits_from_json(bbo::to_json(s));
    EXPECT_EQ(back.train, s.train);
  }
}

}  // namespace
