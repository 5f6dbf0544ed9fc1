// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bbo/bench.hpp"
#include "bbo/error.hpp"
#include "bbo/optimizers.hpp"
#include "bbo/rng.hpp"
#include "bbo/space.hpp"

namespace bbo {

struct Trial {
  Configuration config;
  double objective;
  bool operator==(const Trial&) const = default;
};

/// One optimizer run: trials in evaluation order plus provenance.
struct Trajectory {
  std::string task_id;
  SearchSpace space;
  std::string optimizer;
  std::uint64_t seed = 0;
  std::vector<Trial> trials;

  std::size_t length() const { return trials.size(); }
  const std::string& space_id() const { return space.id(); }
  bool operator==(const Trajectory&) const = default;
};

inline Trajectory run_trajectory(const BenchmarkTask& task, OptimizerKind kind,
                                 std::size_t budget, std::uint64_t seed,
                                 const OptimizerSettings& settings = {}) {
  if (budget < 1) throw DomainError("trajectory budget must be >= 1");
  Optimizer opt(kind, task.space, seed, settings);
  Trajectory traj{task.id, task.space, std::string(to_string(kind)), seed, {}};
  traj.trials.reserve(budget);
  for (std::size_t t = 0; t < budget; ++t) {
    Configuration c = opt.suggest();
    double y;
    try {
      y = task(c);
    } catch (const std::exception& e) {
      throw Error("task '" + task.id + "', trial " + std::to_string(t) + ": " +
                  e.what());
    }
    if (!std::isfinite(y)) {
      throw Error("task '" + task.id + "', trial " + std::to_string(t) +
                  ": non-finite objective");
    }
    opt.observe(c, y);
    traj.trials.push_back({std::move(c), y});
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Persistence. Line 1 holds metadata and the space; each further line one
// trial: {"t": i, "config": {...}, "objective": y}.

inline void write_trajectory(std::ostream& out, const Trajectory& traj) {
  nlohmann::json meta = {{"task_id", traj.task_id},
                         {"space_id", traj.space.id()},
                         {"optimizer", traj.optimizer},
                         {"seed", traj.seed},
                         {"T", traj.trials.size()},
                         {"space", to_json(traj.space)}};
  out << meta.dump() << '\n';
  for (std::size_t t = 0; t < traj.trials.size(); ++t) {
    nlohmann::json row = {
        {"t", t},
        {"config", config_to_json(traj.space, traj.trials[t].config)},
        {"objective", traj.trials[t].objective}};
    out << row.dump() << '\n';
  }
}

inline Trajectory read_trajectory(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  std::optional<Trajectory> traj;
  std::size_t expected = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!traj) {
        traj = Trajectory{j.at("task_id").get<std::string>(),
                          space_from_json(j.at("space")),
                          j.at("optimizer").get<std::string>(),
                          j.at("seed").get<std::uint64_t>(),
                          {}};
        expected = j.at("T").get<std::size_t>();
        continue;
      }
      if (j.at("t").get<std::size_t>() != traj->trials.size()) {
        throw ParseError("trial index out of order", line_no);
      }
      traj->trials.push_back({config_from_json(traj->space, j.at("config")),
                              j.at("objective").get<double>()});
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("trajectory line " + std::to_string(line_no) + ": " +
                           e.what(),
                       line_no);
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError("trajectory line " + std::to_string(line_no) + ": " +
                           e.what(),
                       line_no);
    }
  }
  if (!traj) throw ParseError("empty trajectory file", 0);
  if (traj->trials.size() != expected || expected == 0) {
    throw ParseError("trajectory declares T=" + std::to_string(expected) +
                         " but holds " + std::to_string(traj->trials.size()) +
                         " trials",
                     line_no);
  }
  return std::move(*traj);
}

inline void save_trajectory(const std::filesystem::path& path,
                            const Trajectory& traj) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  write_trajectory(out, traj);
}

inline Trajectory load_trajectory(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return read_trajectory(in);
}

// ---------------------------------------------------------------------------
// Grids.

struct RunRecord {
  std::string task_id;
  std::string optimizer;
  std::uint64_t seed_index = 0;
  std::uint64_t seed = 0;
  std::string status = "pending";  // pending | ok | failed
  std::string path;
  std::string error;
  bool operator==(const RunRecord&) const = default;
};

struct RunManifest {
  std::vector<std::string> tasks;
  std::vector<std::string> optimizers;
  std::vector<std::uint64_t> seeds;
  std::vector<RunRecord> runs;

  static std::size_t expected_runs(std::size_t n_optimizers,
                                   std::size_t n_tasks, std::size_t n_seeds) {
    return n_optimizers * n_tasks * n_seeds;
  }
};

/// Every (optimizer, task, seed) run of a grid with its derived seed, without
/// executing anything. Ordered optimizer-major, then task, then seed.
inline RunManifest plan_grid(const std::vector<std::string>& task_ids,
                             const std::vector<std::string>& optimizers,
                             const std::vector<std::uint64_t>& seeds,
                             std::uint64_t master_seed) {
  if (task_ids.empty() || optimizers.empty() || seeds.empty()) {
    throw ConfigError("grid needs at least one task, optimizer and seed");
  }
  RunManifest m{task_ids, optimizers, seeds, {}};
  m.runs.reserve(RunManifest::expected_runs(optimizers.size(), task_ids.size(),
                                            seeds.size()));
  for (const auto& opt : optimizers) {
    for (const auto& task : task_ids) {
      for (auto s : seeds) {
        m.runs.push_back(
            {task, opt, s, derive_seed(master_seed, opt, task, s), "pending",
             "", ""});
      }
    }
  }
  return m;
}

inline std::string sanitize_filename(std::string s) {
  for (char& c : s) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '-' ||
                    c == '_' || c == '.';
    if (!ok) c = '_';
  }
  return s;
}

inline std::string trajectory_filename(const RunRecord& r) {
  return sanitize_filename(r.task_id) + "__" + sanitize_filename(r.optimizer) +
         "__s" + std::to_string(r.seed_index) + ".jsonl";
}

struct GridResult {
  RunManifest manifest;
  // aligned with manifest.runs; empty for failed runs
  std::vector<std::optional<Trajectory>> trajectories;
};

/// Executes every run of the grid. Runs are independent; with jobs > 1 they
/// are spread over worker threads and the result does not depend on
/// scheduling. Failures are recorded in the manifest and the grid continues.
inline GridResult run_grid(const std::vector<BenchmarkTask>& tasks,
                           const std::vector<OptimizerKind>& kinds,
                           const std::vector<std::uint64_t>& seeds,
                           std::size_t budget, std::uint64_t master_seed = 0,
                           std::size_t jobs = 1,
                           const OptimizerSettings& settings = {}) {
  std::vector<std::string> ids, names;
  std::map<std::string, const BenchmarkTask*> by_id;
  for (const auto& t : tasks) {
    ids.push_back(t.id);
    if (!by_id.emplace(t.id, &t).second) {
      throw ConfigError("duplicate task id '" + t.id + "' in grid");
    }
  }
  for (auto k : kinds) names.emplace_back(to_string(k));
  GridResult out{plan_grid(ids, names, seeds, master_seed), {}};
  out.trajectories.resize(out.manifest.runs.size());

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < out.manifest.runs.size(); i = next++) {
      auto& rec = out.manifest.runs[i];
      try {
        out.trajectories[i] =
            run_trajectory(*by_id.at(rec.task_id),
                           parse_optimizer_kind(rec.optimizer), budget,
                           rec.seed, settings);
        rec.status = "ok";
        rec.path = trajectory_filename(rec);
      } catch (const std::exception& e) {
        rec.status = "failed";
        rec.error = e.what();
      }
    }
  };
  jobs = std::max<std::size_t>(jobs, 1);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  return out;
}

inline nlohmann::json to_json(const RunRecord& r) {
  return {{"task_id", r.task_id}, {"optimizer", r.optimizer},
          {"seed_index", r.seed_index}, {"seed", r.seed},
          {"status", r.status}, {"path", r.path}, {"error", r.error}};
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  return {j.at("task_id").get<std::string>(),
          j.at("optimizer").get<std::string>(),
          j.at("seed_index").get<std::uint64_t>(),
          j.at("seed").get<std::uint64_t>(),
          j.at("status").get<std::string>(),
          j.value("path", std::string()),
          j.value("error", std::string())};
}

inline void write_manifest(std::ostream& out, const RunManifest& m) {
  for (const auto& r : m.runs) out << to_json(r).dump() << '\n';
}

inline std::vector<RunRecord> read_manifest(std::istream& in) {
  std::vector<RunRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(run_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("manifest line " + std::to_string(line_no) + ": " +
                           e.what(),
                       line_no);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Train / validation splits.

struct TaskInfo {
  std::string task_id;
  std::string space_id;
  std::string family;
};

struct SplitConfig {
  // Fraction of remaining tasks held out when no per-family counts are given.
  double holdout_fraction = 0.1;
  // Exact number of held-out tasks per family; overrides the fraction.
  std::map<std::string, std::size_t> holdout_per_family;
  // Spaces whose tasks all go to the unseen-space validation split.
  std::vector<std::string> held_out_spaces;
  // Spaces that must appear in training.
  std::vector<std::string> train_spaces;
  std::uint64_t seed = 0;
};

struct Splits {
  std::vector<std::string> train;
  std::vector<std::string> val_unseen_task;
  std::vector<std::string> val_unseen_space;

  /// "train", "val-unseen-task", "val-unseen-space" or "" when unknown.
  std::string split_of(const std::string& task_id) const {
    auto has = [&](const std::vector<std::string>& v) {
      return std::find(v.begin(), v.end(), task_id) != v.end();
    };
    if (has(train)) return "train";
    if (has(val_unseen_task)) return "val-unseen-task";
    if (has(val_unseen_space)) return "val-unseen-space";
    return "";
  }
};

/// Assigns whole tasks to splits: every task of a held-out space goes to the
/// unseen-space split, then a seeded shuffle picks the unseen-task hold-outs
/// among the rest.
inline Splits make_splits(const std::vector<TaskInfo>& tasks,
                          const SplitConfig& cfg) {
  std::map<std::string, TaskInfo> unique;
  for (const auto& t : tasks) {
    auto [it, inserted] = unique.emplace(t.task_id, t);
    if (!inserted && it->second.space_id != t.space_id) {
      throw ConfigError("task '" + t.task_id +
                        "' appears with two different spaces");
    }
  }
  std::set<std::string> spaces;
  for (const auto& [_, t] : unique) spaces.insert(t.space_id);
  const std::set<std::string> held(cfg.held_out_spaces.begin(),
                                   cfg.held_out_spaces.end());
  for (const auto& s : cfg.train_spaces) {
    if (held.count(s)) {
      throw ConfigError("space '" + s +
                        "' is both required for training and held out");
    }
  }
  for (const auto& s : held) {
    if (!spaces.count(s)) {
      throw ConfigError("held-out space '" + s + "' has no tasks");
    }
  }
  if (!(cfg.holdout_fraction >= 0.0 && cfg.holdout_fraction <= 1.0)) {
    throw ConfigError("holdout_fraction must lie in [0, 1]");
  }

  Splits out;
  std::map<std::string, std::vector<std::string>> candidates;  // by family
  std::vector<std::string> all_candidates;
  for (const auto& [id, t] : unique) {
    if (held.count(t.space_id)) {
      out.val_unseen_space.push_back(id);
    } else {
      candidates[t.family].push_back(id);
      all_candidates.push_back(id);
    }
  }

  std::set<std::string> val;
  Rng rng(mix64(cfg.seed ^ 0x5eed5011ULL));
  if (!cfg.holdout_per_family.empty()) {
    for (const auto& [family, count] : cfg.holdout_per_family) {
      auto ids = candidates[family];
      if (count > ids.size()) {
        throw ConfigError("family '" + family + "' has " +
                          std::to_string(ids.size()) +
                          " eligible tasks, cannot hold out " +
                          std::to_string(count));
      }
      rng.shuffle(ids);
      val.insert(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(count));
    }
  } else {
    auto ids = all_candidates;
    rng.shuffle(ids);
    const auto count = static_cast<std::size_t>(
        std::llround(cfg.holdout_fraction * static_cast<double>(ids.size())));
    val.insert(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(count));
  }
  for (const auto& id : all_candidates) {
    (val.count(id) ? out.val_unseen_task : out.train).push_back(id);
  }
  for (const auto& s : cfg.train_spaces) {
    const bool present = std::any_of(
        out.train.begin(), out.train.end(),
        [&](const std::string& id) { return unique.at(id).space_id == s; });
    if (!present) {
      throw ConfigError("space '" + s + "' ends up with no training task");
    }
  }
  return out;
}

inline nlohmann::json to_json(const Splits& s) {
  return {{"train", s.train},
          {"val-unseen-task", s.val_unseen_task},
          {"val-unseen-space", s.val_unseen_space}};
}

inline Splits splits_from_json(const nlohmann::json& j) {
  return {j.at("train").get<std::vector<std::string>>(),
          j.at("val-unseen-task").get<std::vector<std::string>>(),
          j.at("val-unseen-space").get<std::vector<std::string>>()};
}

}  // namespace bbo
