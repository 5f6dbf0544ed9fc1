// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

// bbo-forge: one entry point for the whole pipeline.
//
//   generate -> augment -> encode -> tokenize -> split -> train -> optimize
//   -> evaluate -> scaling-fit
//
// Stages read a TOML config (one table per stage plus a shared [tasks]
// table), accept `--set section.key=value` overrides and resolve relative
// paths against the data directory.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "bbo/bench.hpp"
#include "bbo/codec.hpp"
#include "bbo/eval.hpp"
#include "bbo/infer.hpp"
#include "bbo/runner.hpp"
#include "bbo/tokenizer.hpp"
#include "bbo/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Configuration.

json from_toml(const toml::node& n) {
  if (const auto* t = n.as_table()) {
    json j = json::object();
    for (const auto& [k, v] : *t) j[std::string(k.str())] = from_toml(v);
    return j;
  }
  if (const auto* a = n.as_array()) {
    json j = json::array();
    for (const auto& v : *a) j.push_back(from_toml(v));
    return j;
  }
  if (const auto* s = n.as_string()) return s->get();
  if (const auto* i = n.as_integer()) return i->get();
  if (const auto* f = n.as_floating_point()) return f->get();
  if (const auto* b = n.as_boolean()) return b->get();
  throw bbo::ConfigError("dates and times are not valid config values");
}

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    return from_toml(toml::parse_file(path));
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "config '" << path << "': " << e.description() << " at line "
       << e.source().begin.line;
    throw bbo::ConfigError(os.str());
  }
}

// `a.b.c=value`; the value is read as a TOML value and falls back to a bare
// string, so `--set generate.optimizers=["RS","TPE"]` and
// `--set train.out=run1` both work.
void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw bbo::ConfigError("--set expects key=value, got '" + assignment +
                           "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = from_toml(*toml::parse("v = " + raw).get("v"));
  } catch (const toml::parse_error&) {
    value = raw;
  }
  json* node = &config;
  std::size_t pos = 0;
  while (true) {
    const auto dot = key.find('.', pos);
    const std::string part = key.substr(pos, dot - pos);
    if (part.empty()) throw bbo::ConfigError("bad --set key '" + key + "'");
    if (!node->is_object()) {
      throw bbo::ConfigError("--set " + key + ": '" + part +
                             "' is inside a non-table value");
    }
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    pos = dot + 1;
  }
}

/// One config table. Every key read is recorded so that `finish` can reject
/// misspelled ones.
class Section {
 public:
  Section(std::string name, const json& j) : name_(std::move(name)) {
    if (j.is_null()) {
      j_ = json::object();
    } else if (!j.is_object()) {
      throw bbo::ConfigError("[" + name_ + "] must be a table");
    } else {
      j_ = j;
    }
  }

  bool has(const std::string& key) {
    used_.insert(key);
    return j_.contains(key);
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return convert<T>(key);
  }

  template <class T>
  T require(const std::string& key) {
    if (!has(key)) {
      throw bbo::ConfigError("missing required key '" + name_ + "." + key +
                             "'");
    }
    return convert<T>(key);
  }

  Section sub(const std::string& key) {
    used_.insert(key);
    return Section(name_ + "." + key, j_.contains(key) ? j_.at(key) : json());
  }

  const json& raw(const std::string& key) {
    used_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!used_.count(k)) {
        throw bbo::ConfigError("unknown key '" + name_ + "." + k + "'");
      }
    }
  }

  const std::string& name() const { return name_; }

 private:
  template <class T>
  T convert(const std::string& key) {
    const json& v = j_.at(key);
    if constexpr (std::is_unsigned_v<T>) {
      if (v.is_number_integer() && v.get<long long>() < 0) {
        throw bbo::ConfigError(name_ + "." + key + " must be >= 0");
      }
    }
    try {
      return v.get<T>();
    } catch (const json::exception&) {
      throw bbo::ConfigError(name_ + "." + key + ": unexpected value " +
                             v.dump());
    }
  }

  std::string name_;
  json j_;
  std::set<std::string> used_;
};

struct Context {
  json config;
  fs::path data_dir;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  bool dry_run = false;
  bool verify = false;

  Section section(const std::string& name) const {
    return Section(name, config.contains(name) ? config.at(name) : json());
  }

  fs::path resolve(const std::string& p) const {
    const fs::path q(p);
    return q.is_absolute() ? q : data_dir / q;
  }
};

// ---------------------------------------------------------------------------
// File helpers.

std::ifstream open_in(const fs::path& p, const std::string& what) {
  std::ifstream in(p, std::ios::binary);
  if (!in) {
    throw bbo::Error("missing " + what + " '" + p.string() +
                     "'; run the stage that produces it first");
  }
  return in;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw bbo::Error("cannot write '" + p.string() + "'");
  return out;
}

void write_json(const fs::path& p, const json& j) {
  auto out = open_out(p);
  out << j.dump(2) << '\n';
}

json read_json(const fs::path& p, const std::string& what) {
  auto in = open_in(p, what);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw bbo::ParseError(p.string() + ": " + e.what(), 0);
  }
}

// Manifest lines are RunRecord objects, optionally with an "augmentation"
// label.
std::vector<json> read_manifest_lines(const fs::path& dir) {
  auto in = open_in(dir / "manifest.jsonl", "manifest");
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw bbo::ParseError((dir / "manifest.jsonl").string() + " line " +
                                std::to_string(n) + ": " + e.what(),
                            n);
    }
  }
  return out;
}

struct LoadedRun {
  json record;
  bbo::Trajectory trajectory;
};

std::vector<LoadedRun> load_runs(const fs::path& dir) {
  std::vector<LoadedRun> out;
  for (auto& rec : read_manifest_lines(dir)) {
    if (rec.value("status", "") != "ok") continue;
    auto traj = bbo::load_trajectory(dir / rec.at("path").get<std::string>());
    out.push_back({std::move(rec), std::move(traj)});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tasks.
//
//   [tasks]
//   synthetic = ["branin", "forrester"]
//   [[tasks.surrogate]]
//   function = "branin"     # tabulate a registered function, or
//   table = "tables/x.jsonl" # load an offline table
//   rows = 10000
//   k = 3
//   id = "surrogate:branin" # optional
//   mask = ["x1"]           # optional; yields the masked task instead

struct TaskSet {
  std::vector<bbo::BenchmarkTask> tasks;
  std::vector<bbo::TaskInfo> info;

  const bbo::BenchmarkTask& at(const std::string& id) const {
    for (const auto& t : tasks) {
      if (t.id == id) return t;
    }
    throw bbo::ConfigError("task '" + id + "' is not defined in [tasks]");
  }
};

TaskSet build_tasks(const Context& ctx) {
  auto sec = ctx.section("tasks");
  TaskSet out;
  auto push = [&](bbo::BenchmarkTask t) {
    out.info.push_back({t.id, t.space.id(), t.family});
    out.tasks.push_back(std::move(t));
  };
  const auto& reg = bbo::SyntheticRegistry::standard();
  for (const auto& name :
       sec.get<std::vector<std::string>>("synthetic", {})) {
    push(reg.task(name));
  }
  if (sec.has("surrogate")) {
    const json& list = sec.raw("surrogate");
    if (!list.is_array()) {
      throw bbo::ConfigError("tasks.surrogate must be an array of tables");
    }
    for (std::size_t i = 0; i < list.size(); ++i) {
      Section s("tasks.surrogate[" + std::to_string(i) + "]", list[i]);
      const auto fn = s.get<std::string>("function", "");
      const auto table_path = s.get<std::string>("table", "");
      if (fn.empty() == table_path.empty()) {
        throw bbo::ConfigError(s.name() +
                               ": give exactly one of 'function' or 'table'");
      }
      std::string id = s.get<std::string>(
          "id", "surrogate:" +
                    (fn.empty() ? fs::path(table_path).stem().string() : fn));
      const auto rows = s.get<std::size_t>("rows", 10000);
      const auto k = s.get<std::size_t>("k", bbo::kDefaultSurrogateNeighbors);
      const auto mask = s.get<std::vector<std::string>>("mask", {});
      s.finish();
      std::shared_ptr<const bbo::OfflineTable> table;
      if (!fn.empty()) {
        bbo::Rng rng(bbo::derive_seed(ctx.seed, "table", id, 0));
        table = std::make_shared<const bbo::OfflineTable>(
            bbo::tabulate(reg.task(fn), rows, rng));
      } else {
        table = std::make_shared<const bbo::OfflineTable>(
            bbo::load_offline_table(ctx.resolve(table_path).string()));
      }
      auto sur = std::make_shared<const bbo::SurrogateBenchmark>(table, k);
      if (mask.empty()) {
        push(bbo::make_surrogate_task(sur, id));
      } else {
        push(bbo::mask_task(sur, {mask.begin(), mask.end()}, id));
      }
    }
  }
  sec.finish();
  if (out.tasks.empty()) {
    throw bbo::ConfigError(
        "no tasks defined; add [tasks] synthetic = [...] or "
        "[[tasks.surrogate]] entries");
  }
  std::set<std::string> ids;
  for (const auto& t : out.tasks) {
    if (!ids.insert(t.id).second) {
      throw bbo::ConfigError("task id '" + t.id + "' defined twice");
    }
  }
  return out;
}

json task_info_json(const TaskSet& ts) {
  json j = json::array();
  for (std::size_t i = 0; i < ts.tasks.size(); ++i) {
    j.push_back({{"task_id", ts.info[i].task_id},
                 {"space_id", ts.info[i].space_id},
                 {"family", ts.info[i].family},
                 {"space", bbo::to_json(ts.tasks[i].space)}});
  }
  return j;
}

std::vector<std::uint64_t> seed_indices(std::size_t n) {
  std::vector<std::uint64_t> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = i;
  return out;
}

// ---------------------------------------------------------------------------
// Stages.

int cmd_generate(const Context& ctx) {
  auto sec = ctx.section("generate");
  std::vector<std::string> all;
  for (auto k : bbo::kAllOptimizerKinds) all.emplace_back(bbo::to_string(k));
  const auto names = sec.get<std::vector<std::string>>("optimizers", all);
  const auto n_seeds = sec.get<std::size_t>("seeds", 30);
  const auto budget = sec.get<std::size_t>("budget", 100);
  const auto out = ctx.resolve(sec.get<std::string>("out", "trajectories"));
  bbo::OptimizerSettings settings;
  auto os = sec.sub("optimizer");
  settings.gamma = os.get("gamma", settings.gamma);
  settings.n_init = os.get("n_init", settings.n_init);
  settings.pool_size = os.get("pool_size", settings.pool_size);
  settings.rea_capacity = os.get("rea_capacity", settings.rea_capacity);
  settings.rea_tournament = os.get("rea_tournament", settings.rea_tournament);
  settings.bore_neighbors = os.get("bore_neighbors", settings.bore_neighbors);
  settings.cqr_neighbors = os.get("cqr_neighbors", settings.cqr_neighbors);
  os.finish();
  sec.finish();
  if (n_seeds == 0 || budget == 0) {
    throw bbo::ConfigError("generate.seeds and generate.budget must be >= 1");
  }
  std::vector<bbo::OptimizerKind> kinds;
  for (const auto& n : names) kinds.push_back(bbo::parse_optimizer_kind(n));
  const auto tasks = build_tasks(ctx);

  std::cout << "generate: " << kinds.size() << " optimizers x "
            << tasks.tasks.size() << " tasks x " << n_seeds << " seeds = "
            << bbo::RunManifest::expected_runs(kinds.size(),
                                               tasks.tasks.size(), n_seeds)
            << " runs of T=" << budget << " -> " << out.string() << '\n';
  if (ctx.dry_run) return 0;

  const auto grid = bbo::run_grid(tasks.tasks, kinds, seed_indices(n_seeds),
                                  budget, ctx.seed, ctx.jobs, settings);
  fs::create_directories(out);
  std::size_t failed = 0;
  for (std::size_t i = 0; i < grid.manifest.runs.size(); ++i) {
    const auto& rec = grid.manifest.runs[i];
    if (rec.status != "ok") {
      ++failed;
      std::cerr << "run failed: " << rec.task_id << " " << rec.optimizer
                << " seed " << rec.seed_index << ": " << rec.error << '\n';
      continue;
    }
    bbo::save_trajectory(out / rec.path, *grid.trajectories[i]);
  }
  auto mf = open_out(out / "manifest.jsonl");
  bbo::write_manifest(mf, grid.manifest);
  write_json(out / "tasks.json", task_info_json(tasks));
  std::cout << "wrote " << grid.manifest.runs.size() - failed
            << " trajectories";
  if (failed) std::cout << " (" << failed << " failed)";
  std::cout << '\n';
  return 0;
}

int cmd_augment(const Context& ctx) {
  auto sec = ctx.section("augment");
  const auto in = ctx.resolve(sec.get<std::string>("input", "trajectories"));
  const auto out = ctx.resolve(sec.get<std::string>("out", "augmented"));
  bbo::AugmentConfig cfg;
  cfg.permutations = sec.get("permutations", cfg.permutations);
  cfg.prefix_lengths = sec.get("prefix_lengths", cfg.prefix_lengths);
  cfg.keep_original = sec.get("keep_original", cfg.keep_original);
  sec.finish();

  const auto runs = load_runs(in);
  std::size_t total = 0;
  for (const auto& r : runs) {
    const std::size_t bases = cfg.permutations + (cfg.keep_original ? 1 : 0);
    std::size_t per = 1;
    for (auto len : cfg.prefix_lengths) per += len < r.trajectory.length();
    total += bases * per;
  }
  std::cout << "augment: " << runs.size() << " trajectories -> " << total
            << " records (" << cfg.permutations << " permutations, "
            << cfg.prefix_lengths.size() << " prefix lengths) -> "
            << out.string() << '\n';
  if (ctx.dry_run) return 0;

  fs::create_directories(out);
  auto mf = open_out(out / "manifest.jsonl");
  for (const auto& r : runs) {
    const auto src = r.record.at("path").get<std::string>();
    bbo::Rng rng(bbo::derive_seed(ctx.seed, "augment", src, 0));
    const auto stem = fs::path(src).stem().string();
    for (const auto& a : bbo::augment(r.trajectory, cfg, rng)) {
      const std::string path =
          stem + "__" + bbo::sanitize_filename(a.label) + ".jsonl";
      bbo::save_trajectory(out / path, a.trajectory);
      json rec = r.record;
      rec["path"] = path;
      rec["augmentation"] = a.label;
      mf << rec.dump() << '\n';
    }
  }
  if (fs::exists(in / "tasks.json")) {
    fs::copy_file(in / "tasks.json", out / "tasks.json",
                  fs::copy_options::overwrite_existing);
  }
  std::cout << "wrote " << total << " records\n";
  return 0;
}

// Decodes every trial back and counts disagreements with the source
// trajectory: grammar rejections, decode failures, categorical mismatches and
// numerical drift beyond half a quantization step.
std::size_t verify_record(const bbo::EncodedTrajectory& e,
                          const bbo::Trajectory& t,
                          const bbo::QuantizationConfig& quant) {
  const bbo::TrialGrammar grammar(t.space, quant);
  std::size_t bad = 0;
  std::vector<std::string_view> trials;
  try {
    trials = bbo::split_trials(bbo::trial_stream(e.text, t.space));
  } catch (const bbo::Error&) {
    return t.trials.size();
  }
  if (trials.size() != t.trials.size()) {
    return std::max(trials.size(), t.trials.size());
  }
  std::vector<double> ys;
  for (const auto& tr : t.trials) ys.push_back(tr.objective);
  const auto scaled = bbo::scale_objectives(ys);
  const double half = 1.0 / (2.0 * (quant.levels - 1));
  for (std::size_t i = 0; i < trials.size(); ++i) {
    if (!grammar.accepts_trial(trials[i])) {
      ++bad;
      continue;
    }
    bbo::DecodedTrial d;
    try {
      d = bbo::decode_trial(t.space, quant, trials[i]);
    } catch (const bbo::Error&) {
      ++bad;
      continue;
    }
    bool ok = std::abs(d.scaled_objective - scaled[i]) <= half + 1e-12;
    for (std::size_t p = 0; p < t.space.dimension(); ++p) {
      const auto& dom = t.space[p];
      const double got = d.config[p], want = t.trials[i].config[p];
      if (dom.is_categorical()) {
        ok = ok && got == want;
        continue;
      }
      // integers are additionally rounded after dequantization
      double tol = half + 1e-12;
      if (dom.kind() == bbo::ParamKind::kInteger) {
        tol += 0.5 / (dom.hi() - dom.lo());
      }
      ok = ok &&
           std::abs(bbo::to_unit(dom, got) - bbo::to_unit(dom, want)) <= tol;
    }
    bad += !ok;
  }
  return bad;
}

int cmd_encode(const Context& ctx) {
  auto sec = ctx.section("encode");
  const auto in = ctx.resolve(sec.get<std::string>("input", "augmented"));
  const auto out = ctx.resolve(sec.get<std::string>("out", "corpus"));
  const bbo::QuantizationConfig quant(sec.get("levels", 1000));
  const bool verify = sec.get("verify", false) || ctx.verify;
  sec.finish();

  const auto runs = load_runs(in);
  std::cout << "encode: " << runs.size() << " trajectories, Q="
            << quant.levels << (verify ? ", verifying" : "") << " -> "
            << out.string() << '\n';
  if (ctx.dry_run) return 0;

  std::vector<bbo::EncodedTrajectory> records;
  std::size_t violations = 0, trials = 0;
  for (const auto& r : runs) {
    records.push_back(bbo::encode_trajectory(
        r.trajectory, quant, r.record.value("augmentation", "")));
    trials += r.trajectory.length();
    if (verify) violations += verify_record(records.back(), r.trajectory, quant);
  }
  fs::create_directories(out);
  auto text = open_out(out / "corpus.txt");
  bbo::write_corpus(text, records);
  write_json(out / "corpus.json", bbo::corpus_manifest(records));
  if (fs::exists(in / "tasks.json")) {
    fs::copy_file(in / "tasks.json", out / "tasks.json",
                  fs::copy_options::overwrite_existing);
  }
  std::cout << "wrote " << records.size() << " records\n";
  if (verify) {
    std::cout << "verify: " << trials << " trials, " << violations
              << " round-trip violations\n";
    if (violations) return 1;
  }
  return 0;
}

std::vector<std::string> load_corpus(const fs::path& dir) {
  auto in = open_in(dir / "corpus.txt", "corpus");
  return bbo::read_corpus(in);
}

int cmd_tokenize(const Context& ctx) {
  auto sec = ctx.section("tokenize");
  const auto in = ctx.resolve(sec.get<std::string>("input", "corpus"));
  const auto out = ctx.resolve(sec.get<std::string>("out", "tokenizer.json"));
  const auto vocab = sec.get<std::size_t>("vocab_size", 512);
  sec.finish();
  const auto docs = load_corpus(in);
  std::cout << "tokenize: " << docs.size() << " documents, vocab " << vocab
            << " -> " << out.string() << '\n';
  if (ctx.dry_run) return 0;
  const auto tok = bbo::Tokenizer::train(docs, vocab);
  std::size_t bytes = 0, tokens = 0;
  for (const auto& d : docs) {
    bytes += d.size();
    tokens += tok.encode(d).size();
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  tok.save(out.string());
  std::cout << "learned " << tok.merges().size() << " merges, "
            << static_cast<double>(bytes) / static_cast<double>(tokens)
            << " bytes per token\n";
  return 0;
}

int cmd_split(const Context& ctx) {
  auto sec = ctx.section("split");
  const auto in = ctx.resolve(sec.get<std::string>("input", "trajectories"));
  const auto out = ctx.resolve(sec.get<std::string>("out", "splits.json"));
  bbo::SplitConfig cfg;
  cfg.holdout_fraction = sec.get("holdout_fraction", cfg.holdout_fraction);
  cfg.holdout_per_family = sec.get("holdout_per_family", cfg.holdout_per_family);
  cfg.held_out_spaces = sec.get("held_out_spaces", cfg.held_out_spaces);
  cfg.train_spaces = sec.get("train_spaces", cfg.train_spaces);
  cfg.seed = ctx.seed;
  sec.finish();

  std::vector<bbo::TaskInfo> tasks;
  for (const auto& t : read_json(in / "tasks.json", "task list")) {
    tasks.push_back({t.at("task_id").get<std::string>(),
                     t.at("space_id").get<std::string>(),
                     t.at("family").get<std::string>()});
  }
  const auto splits = bbo::make_splits(tasks, cfg);
  std::cout << "split: " << tasks.size() << " tasks -> "
            << splits.train.size() << " train, "
            << splits.val_unseen_task.size() << " unseen-task, "
            << splits.val_unseen_space.size() << " unseen-space -> "
            << out.string() << '\n';
  if (ctx.dry_run) return 0;
  write_json(out, bbo::to_json(splits));
  return 0;
}

bbo::ModelConfig model_config(Section sec, int vocab) {
  const auto ctx_len = sec.get("context_length", 512);
  bbo::ModelConfig c;
  if (sec.has("preset")) {
    c = bbo::architecture_preset(sec.require<std::string>("preset"), vocab,
                                 ctx_len);
  }
  c.vocab_size = vocab;
  c.context_length = ctx_len;
  c.n_layers = sec.get("n_layers", c.n_layers);
  c.n_heads = sec.get("n_heads", c.n_heads);
  c.n_kv_groups = sec.get("n_kv_groups", c.n_kv_groups);
  c.model_dim = sec.get("model_dim", c.model_dim);
  c.head_dim = sec.get("head_dim", c.head_dim);
  c.ffn_dim = sec.get("ffn_dim", c.ffn_dim);
  c.rope_base = sec.get("rope_base", c.rope_base);
  sec.finish();
  c.validate();
  return c;
}

int cmd_train(const Context& ctx) {
  auto sec = ctx.section("train");
  const auto corpus = ctx.resolve(sec.get<std::string>("corpus", "corpus"));
  const auto tok_path =
      ctx.resolve(sec.get<std::string>("tokenizer", "tokenizer.json"));
  const auto splits_path = sec.get<std::string>("splits", "splits.json");
  const auto out = ctx.resolve(sec.get<std::string>("out", "model"));
  bbo::TrainConfig tc;
  tc.learning_rate = sec.get("learning_rate", tc.learning_rate);
  tc.global_batch_size = sec.get("global_batch_size", tc.global_batch_size);
  tc.total_tokens = sec.get("total_tokens", tc.total_tokens);
  tc.warmup_fraction = sec.get("warmup_fraction", tc.warmup_fraction);
  tc.beta1 = sec.get("beta1", tc.beta1);
  tc.beta2 = sec.get("beta2", tc.beta2);
  tc.weight_decay = sec.get("weight_decay", tc.weight_decay);
  tc.grad_clip_norm = sec.get("grad_clip_norm", tc.grad_clip_norm);
  tc.eval_interval = sec.get("eval_interval", tc.eval_interval);
  tc.max_eval_windows = sec.get("max_eval_windows", tc.max_eval_windows);
  tc.seed = ctx.seed;
  tc.validate();
  auto msec = sec.sub("model");

  if (!fs::exists(tok_path)) {
    throw bbo::Error("missing tokenizer '" + tok_path.string() +
                     "'; run `bbo-forge tokenize` first");
  }
  const auto tok = bbo::Tokenizer::load(tok_path.string());
  const auto mc = model_config(msec, static_cast<int>(tok.n_tokens()));
  sec.finish();

  const auto docs = load_corpus(corpus);
  const auto meta = read_json(corpus / "corpus.json", "corpus manifest");
  if (meta.size() != docs.size()) {
    throw bbo::ParseError("corpus manifest lists " +
                              std::to_string(meta.size()) + " records, corpus has " +
                              std::to_string(docs.size()),
                          0);
  }
  std::optional<bbo::Splits> splits;
  if (!splits_path.empty() && fs::exists(ctx.resolve(splits_path))) {
    splits = bbo::splits_from_json(
        read_json(ctx.resolve(splits_path), "splits"));
  }
  std::vector<std::vector<int>> train_docs, val_docs;
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto task = meta[i].at("task_id").get<std::string>();
    const bool is_train = !splits || splits->split_of(task) == "train";
    (is_train ? train_docs : val_docs).push_back(tok.encode(docs[i]));
  }
  // no validation tasks: hold out every tenth training document instead
  if (val_docs.empty()) {
    std::vector<std::vector<int>> kept;
    for (std::size_t i = 0; i < train_docs.size(); ++i) {
      (i % 10 == 9 ? val_docs : kept).push_back(std::move(train_docs[i]));
    }
    train_docs = std::move(kept);
  }
  const auto train_stream = bbo::pack_documents(train_docs, tok.eos_id());
  const auto val_stream = bbo::pack_documents(val_docs, tok.eos_id());

  bbo::ModelCheckpoint ck(mc);
  ck.train = tc;
  const bbo::ParamLayout layout(mc);
  const auto steps = bbo::train_steps(mc, tc);
  const double tokens = static_cast<double>(steps) * tc.global_batch_size *
                        mc.context_length;
  std::cout << "train: " << layout.total() << " parameters ("
            << layout.non_embedding() << " non-embedding), " << steps
            << " steps, " << train_docs.size() << " train / "
            << val_docs.size() << " validation documents, "
            << train_stream.size() << " train tokens, C~"
            << bbo::flops_estimate(static_cast<double>(layout.non_embedding()),
                                   std::max(tokens, 1.0))
            << " -> " << out.string() << '\n';
  if (ctx.dry_run) return 0;

  ck.model.init(bbo::derive_seed(ctx.seed, "init", "", 0));
  bbo::train_model(ck, train_stream, val_stream, [](const bbo::LossRecord& r) {
    if (std::isfinite(r.val_loss)) {
      std::cout << "step " << r.step << " lr " << r.learning_rate
                << " train " << r.train_loss << " val " << r.val_loss
                << '\n';
    }
  });
  fs::create_directories(out);
  bbo::save_checkpoint(ck, out / "checkpoint.bin");
  auto loss = open_out(out / "loss.csv");
  bbo::write_loss_csv(loss, ck.history);
  double first = NAN, last = NAN;
  for (const auto& r : ck.history) {
    if (!std::isfinite(r.val_loss)) continue;
    if (!std::isfinite(first)) first = r.val_loss;
    last = r.val_loss;
  }
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(); };
  write_json(out / "model.json",
             {{"checkpoint_id", bbo::checkpoint_id(ck)},
              {"parameters", layout.total()},
              {"non_embedding_parameters", layout.non_embedding()},
              {"tokens", ck.history.empty() ? 0 : ck.history.back().tokens},
              {"steps", ck.step},
              {"initial_val_loss", num(first)},
              {"final_val_loss", num(last)},
              {"model", bbo::to_json(mc)},
              {"train", bbo::to_json(tc)}});
  std::cout << "checkpoint " << bbo::checkpoint_id(ck) << ", val loss "
            << first << " -> " << last << '\n';
  return 0;
}

int cmd_optimize(const Context& ctx) {
  auto sec = ctx.section("optimize");
  const auto ck_path =
      ctx.resolve(sec.get<std::string>("checkpoint", "model/checkpoint.bin"));
  const auto tok_path =
      ctx.resolve(sec.get<std::string>("tokenizer", "tokenizer.json"));
  const auto algorithm = sec.get<std::string>("algorithm", "RS");
  const auto task_ids = sec.get<std::vector<std::string>>("tasks", {});
  const auto n_seeds = sec.get<std::size_t>("seeds", 30);
  const auto budget = sec.get<std::size_t>("budget", 100);
  const auto out = ctx.resolve(sec.get<std::string>("out", "model_runs"));
  bbo::SamplerConfig sc;
  sc.temperature = sec.get("temperature", sc.temperature);
  const bbo::QuantizationConfig quant(sec.get("levels", 1000));
  sec.finish();
  bbo::parse_optimizer_kind(algorithm);
  if (n_seeds == 0 || budget == 0) {
    throw bbo::ConfigError("optimize.seeds and optimize.budget must be >= 1");
  }
  const auto all = build_tasks(ctx);
  std::vector<const bbo::BenchmarkTask*> tasks;
  if (task_ids.empty()) {
    for (const auto& t : all.tasks) tasks.push_back(&t);
  } else {
    for (const auto& id : task_ids) tasks.push_back(&all.at(id));
  }
  std::cout << "optimize: <algorithm>:" << algorithm << " on " << tasks.size()
            << " tasks x " << n_seeds << " seeds, T=" << budget << " -> "
            << out.string() << '\n';
  if (ctx.dry_run) return 0;

  auto ck_in = open_in(ck_path, "checkpoint");
  const auto ck = bbo::load_checkpoint(ck_in);
  if (!fs::exists(tok_path)) {
    throw bbo::Error("missing tokenizer '" + tok_path.string() + "'");
  }
  const auto tok = bbo::Tokenizer::load(tok_path.string());
  const std::string kind = "model:" + algorithm;
  fs::create_directories(out);
  auto mf = open_out(out / "manifest.jsonl");
  for (const auto* task : tasks) {
    std::vector<std::uint64_t> seeds;
    for (std::uint64_t s = 0; s < n_seeds; ++s) {
      seeds.push_back(bbo::derive_seed(ctx.seed, kind, task->id, s));
    }
    const auto trajs = bbo::optimize_many(ck, tok, *task, algorithm, budget,
                                          seeds, sc, ctx.jobs, quant);
    for (std::size_t s = 0; s < trajs.size(); ++s) {
      bbo::RunRecord rec{task->id, trajs[s].optimizer, s, seeds[s], "ok",
                         "", ""};
      rec.path = bbo::trajectory_filename(rec);
      bbo::save_trajectory(out / rec.path, trajs[s]);
      mf << bbo::to_json(rec).dump() << '\n';
    }
  }
  TaskSet used;
  for (const auto* t : tasks) {
    used.tasks.push_back(*t);
    used.info.push_back({t->id, t->space.id(), t->family});
  }
  write_json(out / "tasks.json", task_info_json(used));
  std::cout << "wrote " << tasks.size() * n_seeds << " trajectories\n";
  return 0;
}

int cmd_evaluate(const Context& ctx) {
  auto sec = ctx.section("evaluate");
  const auto inputs =
      sec.get<std::vector<std::string>>("inputs", {"trajectories"});
  const auto out = ctx.resolve(sec.get<std::string>("out", "eval"));
  const auto reference = sec.get<std::string>("density_reference", "");
  sec.finish();

  std::vector<bbo::Trajectory> trajs;
  for (const auto& dir : inputs) {
    for (auto& r : load_runs(ctx.resolve(dir))) {
      trajs.push_back(std::move(r.trajectory));
    }
  }
  if (trajs.empty()) {
    throw bbo::Error("no successful trajectories under the evaluate inputs");
  }
  bbo::CurveSet curves;
  for (const auto& t : trajs) curves.add(t.optimizer, t);
  const auto stats = bbo::task_stats(trajs);
  std::cout << "evaluate: " << trajs.size() << " trajectories, "
            << curves.methods().size() << " methods, " << stats.size()
            << " tasks -> " << out.string() << '\n';
  if (ctx.dry_run) return 0;

  const auto rows = bbo::summarize(curves, stats);
  fs::create_directories(out);
  {
    auto f = open_out(out / "curves.csv");
    bbo::write_curves_csv(f, curves, stats);
  }
  {
    auto f = open_out(out / "summary.csv");
    bbo::write_summary_csv(f, rows);
  }
  write_json(out / "summary.json", bbo::to_json(rows));

  if (!reference.empty()) {
    // configurations per (task, method), compared against the reference
    // method's configurations on the same task
    std::map<std::pair<std::string, std::string>,
             std::vector<bbo::Configuration>>
        configs;
    std::map<std::string, bbo::SearchSpace> spaces;
    for (const auto& t : trajs) {
      auto& v = configs[{t.task_id, t.optimizer}];
      for (const auto& tr : t.trials) v.push_back(tr.config);
      spaces.emplace(t.task_id, t.space);
    }
    auto f = open_out(out / "density.csv");
    f << "task,method,reference,parameter,tv\n";
    for (const auto& [key, cs] : configs) {
      const auto& [task, method] = key;
      if (method == reference) continue;
      auto ref = configs.find({task, reference});
      if (ref == configs.end()) continue;
      const auto& space = spaces.at(task);
      const auto tv = bbo::marginal_density_compare(ref->second, cs, space);
      for (std::size_t p = 0; p < tv.size(); ++p) {
        f << task << ',' << method << ',' << reference << ','
          << space[p].name() << ',' << tv[p] << '\n';
      }
    }
  }
  for (const auto& r : rows) {
    std::cout << r.method << ": rank " << r.average_rank << ", regret "
              << r.normalized_regret << '\n';
  }
  return 0;
}

std::vector<bbo::ScalingPoint> read_points_csv(const fs::path& p) {
  auto in = open_in(p, "scaling points");
  std::vector<bbo::ScalingPoint> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (n == 1 || line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;  // header N,D,L
    }
    std::istringstream ss(line);
    bbo::ScalingPoint pt{};
    char c1 = 0, c2 = 0;
    if (!(ss >> pt.N >> c1 >> pt.D >> c2 >> pt.L) || c1 != ',' || c2 != ',') {
      throw bbo::ParseError(p.string() + " line " + std::to_string(n) +
                                ": expected N,D,L",
                            n);
    }
    out.push_back(pt);
  }
  return out;
}

int cmd_scaling_fit(const Context& ctx) {
  auto sec = ctx.section("scaling-fit");
  const auto models = sec.get<std::vector<std::string>>("models", {});
  const auto points_csv = sec.get<std::string>("points", "");
  const auto min_compute = sec.get("min_compute", 0.0);
  const auto out = ctx.resolve(sec.get<std::string>("out", "scaling.json"));
  sec.finish();

  std::vector<bbo::ScalingPoint> points;
  if (!points_csv.empty()) points = read_points_csv(ctx.resolve(points_csv));
  for (const auto& m : models) {
    const auto j = read_json(ctx.resolve(m) / "model.json", "model summary");
    if (j.at("final_val_loss").is_null()) {
      throw bbo::Error("model '" + m + "' has no validation loss");
    }
    points.push_back({j.at("non_embedding_parameters").get<double>(),
                      j.at("tokens").get<double>(),
                      j.at("final_val_loss").get<double>()});
  }
  if (points.empty()) {
    throw bbo::ConfigError(
        "scaling-fit needs scaling-fit.models or scaling-fit.points");
  }
  const auto front = bbo::pareto_points(points, min_compute);
  std::cout << "scaling-fit: " << points.size() << " points, "
            << front.size() << " on the Pareto front -> " << out.string()
            << '\n';
  if (ctx.dry_run) return 0;
  const auto fit = bbo::fit_power_law(front);
  json jp = json::array(), jf = json::array();
  for (const auto& p : points) jp.push_back(bbo::to_json(p));
  for (const auto& p : front) jf.push_back(bbo::to_json(p));
  write_json(out, {{"points", jp},
                   {"pareto", jf},
                   {"fit", {{"a", fit.a}, {"b", fit.b}}}});
  std::cout << "L = " << fit.a << " * C^-" << fit.b << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bbo-forge: trajectory corpora and models as optimizers"};
  app.require_subcommand(0, 1);
  app.allow_extras();
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  std::string data_dir;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  bool dry_run = false, verify = false;
  app.add_option("-c,--config", config_path, "TOML config file")
      ->check(CLI::ExistingFile);
  app.add_option("--set", overrides, "override a config value: key=value")
      ->take_all()
      ->allow_extra_args(false);
  app.add_option("--data-dir", data_dir,
                 "artifact root (default $BBO_FORGE_DATA_DIR or ./bbo-data)");
  auto* seed_opt = app.add_option("--seed", seed, "master seed");
  app.add_option("-j,--jobs", jobs, "parallel runs for generate and optimize")
      ->check(CLI::PositiveNumber);
  app.add_flag("--dry-run", dry_run, "validate config and print the plan");

  using Handler = int (*)(const Context&);
  const std::vector<std::tuple<std::string, std::string, Handler>> commands = {
      {"generate", "run the optimizer grid into trajectory files", cmd_generate},
      {"augment", "permutation and prefix augmentation", cmd_augment},
      {"encode", "encode trajectories into a text corpus", cmd_encode},
      {"tokenize", "train a BPE vocabulary on the corpus", cmd_tokenize},
      {"split", "train / validation task splits", cmd_split},
      {"train", "train a model checkpoint", cmd_train},
      {"optimize", "run a checkpoint as an optimizer", cmd_optimize},
      {"evaluate", "rank and regret reports", cmd_evaluate},
      {"scaling-fit", "Pareto front and power-law fit", cmd_scaling_fit}};
  std::map<CLI::App*, Handler> handlers;
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    if (name == "encode") {
      sub->add_flag("--verify", verify,
                    "decode every record back and count violations");
    }
    handlers[sub] = fn;
  }

  CLI11_PARSE(app, argc, argv);
  if (app.get_subcommands().empty() || !app.remaining().empty()) {
    std::string names;
    for (const auto& [name, help, fn] : commands) names += " " + name;
    if (!app.remaining().empty()) {
      std::cerr << "bbo-forge: unknown subcommand or argument '"
                << app.remaining().front() << "'\n";
    } else {
      std::cerr << "bbo-forge: a subcommand is required\n";
    }
    std::cerr << "subcommands:" << names << '\n';
    return 2;
  }

  try {
    Context ctx;
    ctx.config = load_config(config_path);
    for (const auto& o : overrides) apply_override(ctx.config, o);
    if (data_dir.empty()) {
      const char* env = std::getenv("BBO_FORGE_DATA_DIR");
      data_dir = env && *env ? env : "bbo-data";
    }
    ctx.data_dir = data_dir;
    if (*seed_opt) {
      ctx.seed = seed;
    } else if (ctx.config.contains("seed")) {
      ctx.seed = ctx.config.at("seed").get<std::uint64_t>();
    }
    ctx.jobs = jobs;
    ctx.dry_run = dry_run;
    ctx.verify = verify;
    for (const auto& [key, _] : ctx.config.items()) {
      static const std::set<std::string> known = {
          "seed",  "tasks", "generate", "augment",  "encode",   "tokenize",
          "split", "train", "optimize", "evaluate", "scaling-fit"};
      if (!known.count(key)) {
        throw bbo::ConfigError("unknown config table '" + key + "'");
      }
    }
    return handlers.at(app.get_subcommands().front())(ctx);
  } catch (const bbo::ConfigError& e) {
    std::cerr << "bbo-forge: " << e.what() << '\n';
    return 2;
  } catch (const bbo::Error& e) {
    std::cerr << "bbo-forge: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "bbo-forge: " << e.what() << '\n';
    return 1;
  }
}
