// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bbo/error.hpp"
#include "bbo/rng.hpp"
#include "bbo/space.hpp"

namespace bbo {

/// An objective to be minimized. The oracle must be deterministic.
struct BenchmarkTask {
  std::string id;
  SearchSpace space;
  std::function<double(const Configuration&)> oracle;
  std::string family;

  double operator()(const Configuration& c) const {
    space.validate(c);
    return oracle(c);
  }
};

// ---------------------------------------------------------------------------
// Analytic global-optimization functions.

struct SyntheticFunction {
  std::string name;
  SearchSpace space;
  std::function<double(const std::vector<double>&)> fn;
};

namespace synthetic {

inline double branin(const std::vector<double>& x) {
  constexpr double pi = std::numbers::pi;
  const double b = 5.1 / (4.0 * pi * pi);
  const double c = 5.0 / pi;
  const double t = 1.0 / (8.0 * pi);
  const double u = x[1] - b * x[0] * x[0] + c * x[0] - 6.0;
  return u * u + 10.0 * (1.0 - t) * std::cos(x[0]) + 10.0;
}

inline double eggholder(const std::vector<double>& x) {
  const double a = x[1] + 47.0;
  return -a * std::sin(std::sqrt(std::abs(x[0] / 2.0 + a))) -
         x[0] * std::sin(std::sqrt(std::abs(x[0] - a)));
}

inline double forrester(const std::vector<double>& x) {
  const double u = 6.0 * x[0] - 2.0;
  return u * u * std::sin(12.0 * x[0] - 4.0);
}

inline double goldstein_price(const std::vector<double>& x) {
  const double x1 = x[0], x2 = x[1];
  const double s = x1 + x2 + 1.0;
  const double d = 2.0 * x1 - 3.0 * x2;
  const double a = 1.0 + s * s *
                             (19.0 - 14.0 * x1 + 3.0 * x1 * x1 - 14.0 * x2 +
                              6.0 * x1 * x2 + 3.0 * x2 * x2);
  const double b = 30.0 + d * d *
                              (18.0 - 32.0 * x1 + 12.0 * x1 * x1 + 48.0 * x2 -
                               36.0 * x1 * x2 + 27.0 * x2 * x2);
  return a * b;
}

inline double six_hump_camel(const std::vector<double>& x) {
  const double x1 = x[0], x2 = x[1];
  return (4.0 - 2.1 * x1 * x1 + x1 * x1 * x1 * x1 / 3.0) * x1 * x1 +
         x1 * x2 + (-4.0 + 4.0 * x2 * x2) * x2 * x2;
}

inline double rosenbrock(const std::vector<double>& x) {
  double f = 0.0;
  for (std::size_t i = 0; i + 1 < x.size(); ++i) {
    const double a = x[i + 1] - x[i] * x[i];
    const double b = 1.0 - x[i];
    f += 100.0 * a * a + b * b;
  }
  return f;
}

inline double ackley(const std::vector<double>& x) {
  constexpr double pi = std::numbers::pi;
  double sq = 0.0, cs = 0.0;
  for (double v : x) {
    sq += v * v;
    cs += std::cos(2.0 * pi * v);
  }
  const double n = static_cast<double>(x.size());
  return -20.0 * std::exp(-0.2 * std::sqrt(sq / n)) - std::exp(cs / n) +
         20.0 + std::numbers::e;
}

inline double hartmann3(const std::vector<double>& x) {
  static constexpr double alpha[4] = {1.0, 1.2, 3.0, 3.2};
  static constexpr double A[4][3] = {
      {3.0, 10, 30}, {0.1, 10, 35}, {3.0, 10, 30}, {0.1, 10, 35}};
  static constexpr double P[4][3] = {{0.3689, 0.1170, 0.2673},
                                     {0.4699, 0.4387, 0.7470},
                                     {0.1091, 0.8732, 0.5547},
                                     {0.0381, 0.5743, 0.8828}};
  double f = 0.0;
  for (int i = 0; i < 4; ++i) {
    double inner = 0.0;
    for (int j = 0; j < 3; ++j) {
      const double d = x[j] - P[i][j];
      inner += A[i][j] * d * d;
    }
    f -= alpha[i] * std::exp(-inner);
  }
  return f;
}

}  // namespace synthetic

/// Name -> analytic function on its standard domain. `standard()` holds the
/// built-in set; further functions can be added to a registry instance.
class SyntheticRegistry {
 public:
  static const SyntheticRegistry& standard() {
    static const SyntheticRegistry registry = [] {
      SyntheticRegistry r;
      auto box = [](std::string id, std::vector<std::pair<double, double>> b) {
        std::vector<ParameterDomain> params;
        for (std::size_t i = 0; i < b.size(); ++i) {
          params.push_back(ParameterDomain::uniform(
              "x" + std::to_string(i + 1), b[i].first, b[i].second));
        }
        return SearchSpace(std::move(id), std::move(params));
      };
      r.add({"branin", box("branin", {{-5, 10}, {0, 15}}), synthetic::branin});
      r.add({"eggholder", box("eggholder", {{-512, 512}, {-512, 512}}),
             synthetic::eggholder});
      r.add({"forrester", box("forrester", {{0, 1}}), synthetic::forrester});
      r.add({"goldstein_price", box("goldstein_price", {{-2, 2}, {-2, 2}}),
             synthetic::goldstein_price});
      r.add({"six_hump_camel", box("six_hump_camel", {{-3, 3}, {-2, 2}}),
             synthetic::six_hump_camel});
      r.add({"rosenbrock", box("rosenbrock", {{-5, 10}, {-5, 10}}),
             synthetic::rosenbrock});
      r.add({"ackley", box("ackley", {{-32.768, 32.768}, {-32.768, 32.768}}),
             synthetic::ackley});
      r.add({"hartmann3", box("hartmann3", {{0, 1}, {0, 1}, {0, 1}}),
             synthetic::hartmann3});
      return r;
    }();
    return registry;
  }

  void add(SyntheticFunction f) {
    const std::string name = f.name;
    if (!functions_.emplace(name, std::move(f)).second) {
      throw ConfigError("synthetic function '" + name + "' already registered");
    }
  }

  bool contains(const std::string& name) const {
    return functions_.count(name) > 0;
  }

  const SyntheticFunction& at(const std::string& name) const {
    auto it = functions_.find(name);
    if (it == functions_.end()) {
      throw ConfigError("unknown synthetic function '" + name + "'");
    }
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : functions_) out.push_back(name);
    return out;
  }

  double evaluate(const std::string& name, const Configuration& c) const {
    const auto& f = at(name);
    if (c.size() != f.space.dimension()) {
      throw DomainError("synthetic function '" + name + "' expects " +
                        std::to_string(f.space.dimension()) +
                        " inputs, got " + std::to_string(c.size()));
    }
    return f.fn(c.values);
  }

  BenchmarkTask task(const std::string& name) const {
    const auto& f = at(name);
    auto fn = f.fn;
    return {"synthetic:" + name, f.space,
            [fn](const Configuration& c) { return fn(c.values); },
            "global-optimization"};
  }

 private:
  std::map<std::string, SyntheticFunction> functions_;
};

inline double evaluate_synthetic(const std::string& name,
                                 const Configuration& c) {
  return SyntheticRegistry::standard().evaluate(name, c);
}

// ---------------------------------------------------------------------------
// Offline tables and kNN surrogates.

struct TableRow {
  Configuration config;
  double objective;
};

class OfflineTable {
 public:
  OfflineTable(SearchSpace space, std::vector<TableRow> rows)
      : space_(std::move(space)), rows_(std::move(rows)) {
    if (rows_.empty()) throw DomainError("offline table has no rows");
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      if (!space_.contains(rows_[i].config)) {
        throw ParseError("row " + std::to_string(i) +
                             ": configuration invalid in space '" +
                             space_.id() + "'",
                         i);
      }
      if (!std::isfinite(rows_[i].objective)) {
        throw ParseError("row " + std::to_string(i) + ": non-finite objective",
                         i);
      }
    }
    const double first = rows_.front().objective;
    if (std::all_of(rows_.begin(), rows_.end(),
                    [&](const TableRow& r) { return r.objective == first; })) {
      throw DomainError("offline table for space '" + space_.id() +
                        "': all configurations have identical objective");
    }
  }

  const SearchSpace& space() const { return space_; }
  const std::vector<TableRow>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }

 private:
  SearchSpace space_;
  std::vector<TableRow> rows_;
};

/// Distance in unit-cube coordinates; categorical entries contribute 0 when
/// equal and 1 otherwise.
inline double squared_mixed_distance(const SearchSpace& space,
                                     const UnitPoint& a, const UnitPoint& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (space[i].is_categorical()) {
      d += a[i] == b[i] ? 0.0 : 1.0;
    } else {
      const double t = a[i] - b[i];
      d += t * t;
    }
  }
  return d;
}

/// Indices of the k nearest points to `query` among `points`, nearest first,
/// ties broken by index.
inline std::vector<std::size_t> nearest_indices(
    const SearchSpace& space, const std::vector<UnitPoint>& points,
    const UnitPoint& query, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> d(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    d[i] = {squared_mixed_distance(space, points[i], query), i};
  }
  k = std::min(k, d.size());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(k),
                    d.end());
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) out[i] = d[i].second;
  return out;
}

inline constexpr std::size_t kDefaultSurrogateNeighbors = 3;

class SurrogateBenchmark {
 public:
  explicit SurrogateBenchmark(std::shared_ptr<const OfflineTable> table,
                              std::size_t k = kDefaultSurrogateNeighbors)
      : table_(std::move(table)), k_(k) {
    if (k_ < 1 || k_ > table_->size()) {
      throw DomainError("surrogate k must lie in [1, " +
                        std::to_string(table_->size()) + "]");
    }
    unit_rows_.reserve(table_->size());
    for (const auto& r : table_->rows()) {
      unit_rows_.push_back(to_unit(table_->space(), r.config));
    }
  }

  const OfflineTable& table() const { return *table_; }
  std::shared_ptr<const OfflineTable> table_ptr() const { return table_; }
  std::size_t k() const { return k_; }

  double predict(const Configuration& c) const {
    const auto q = to_unit(table_->space(), c);
    const auto idx = nearest_indices(table_->space(), unit_rows_, q, k_);
    double sum = 0.0;
    for (auto i : idx) sum += table_->rows()[i].objective;
    return sum / static_cast<double>(idx.size());
  }

 private:
  std::shared_ptr<const OfflineTable> table_;
  std::size_t k_;
  std::vector<UnitPoint> unit_rows_;
};

inline double knn_predict(const SurrogateBenchmark& s, const Configuration& c) {
  return s.predict(c);
}

inline BenchmarkTask make_surrogate_task(
    std::shared_ptr<const SurrogateBenchmark> surrogate, std::string id) {
  auto space = surrogate->table().space();
  return {std::move(id), std::move(space),
          [surrogate](const Configuration& c) { return surrogate->predict(c); },
          "surrogate"};
}

/// Observed value of `param` with the lowest mean objective over all rows
/// sharing it. Ties go to the smaller value.
inline double marginal_best(const OfflineTable& table,
                            const std::string& param) {
  const std::size_t p = table.space().index_of(param);
  std::map<double, std::pair<double, std::size_t>> groups;
  for (const auto& r : table.rows()) {
    auto& g = groups[r.config[p]];
    g.first += r.objective;
    g.second += 1;
  }
  double best_value = 0.0;
  double best_mean = 0.0;
  bool first = true;
  for (const auto& [value, g] : groups) {
    const double mean = g.first / static_cast<double>(g.second);
    if (first || mean < best_mean) {
      best_value = value;
      best_mean = mean;
      first = false;
    }
  }
  return best_value;
}

/// Task over the space with `params` removed; each removed parameter is pinned
/// to its marginal-best value and the parent surrogate evaluated.
inline BenchmarkTask mask_task(
    std::shared_ptr<const SurrogateBenchmark> surrogate,
    const std::set<std::string>& params, const std::string& parent_id) {
  const auto& space = surrogate->table().space();
  if (params.empty() || params.size() > 2) {
    throw DomainError("mask_task masks one or two parameters, got " +
                      std::to_string(params.size()));
  }
  std::vector<double> pinned(space.dimension(), 0.0);
  std::vector<bool> masked(space.dimension(), false);
  for (const auto& name : params) {
    const auto i = space.index_of(name);
    masked[i] = true;
    pinned[i] = marginal_best(surrogate->table(), name);
  }
  if (params.size() >= space.dimension()) {
    throw DomainError("masking " + std::to_string(params.size()) +
                      " parameters would leave space '" + space.id() +
                      "' empty");
  }
  std::vector<ParameterDomain> free;
  std::string suffix;
  for (std::size_t i = 0; i < space.dimension(); ++i) {
    if (!masked[i]) {
      free.push_back(space[i]);
    } else {
      suffix += (suffix.empty() ? "" : ",") + space[i].name();
    }
  }
  SearchSpace reduced(space.id() + "/masked:" + suffix, std::move(free));
  auto oracle = [surrogate, pinned, masked](const Configuration& c) {
    Configuration full;
    full.values.reserve(masked.size());
    std::size_t k = 0;
    for (std::size_t i = 0; i < masked.size(); ++i) {
      full.values.push_back(masked[i] ? pinned[i] : c[k++]);
    }
    return surrogate->predict(full);
  };
  return {parent_id + "/masked:" + suffix, std::move(reduced),
          std::move(oracle), "masked-surrogate"};
}

// Offline table file: a header line with the SearchSpace JSON followed by one
// `{"config": {name: value}, "objective": number}` object per line.

inline OfflineTable read_offline_table(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  std::optional<SearchSpace> space;
  std::vector<TableRow> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) +
                           ": invalid JSON: " + e.what(),
                       line_no);
    }
    if (!space) {
      space = space_from_json(j);
      continue;
    }
    const std::size_t row = rows.size();
    try {
      Configuration c = config_from_json(*space, j.at("config"));
      rows.push_back({std::move(c), j.at("objective").get<double>()});
    } catch (const Error& e) {
      throw ParseError("row " + std::to_string(row) + " (line " +
                           std::to_string(line_no) + "): " + e.what(),
                       row);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError("row " + std::to_string(row) + " (line " +
                           std::to_string(line_no) + "): " + e.what(),
                       row);
    }
  }
  if (!space) throw ParseError("offline table is empty", 0);
  return OfflineTable(std::move(*space), std::move(rows));
}

inline OfflineTable load_offline_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open offline table '" + path + "'");
  return read_offline_table(in);
}

inline void write_offline_table(std::ostream& out, const OfflineTable& table) {
  out << to_json(table.space()).dump() << '\n';
  for (const auto& r : table.rows()) {
    nlohmann::json j = {{"config", config_to_json(table.space(), r.config)},
                        {"objective", r.objective}};
    out << j.dump() << '\n';
  }
}

/// Table of `n` uniformly sampled evaluations of `task`.
inline OfflineTable tabulate(const BenchmarkTask& task, std::size_t n,
                             Rng& rng) {
  std::vector<TableRow> rows;
  rows.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto c = sample_uniform(task.space, rng);
    const double y = task(c);
    rows.push_back({std::move(c), y});
  }
  return OfflineTable(task.space, std::move(rows));
}

}  // namespace bbo
