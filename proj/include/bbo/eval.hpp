// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bbo/error.hpp"
#include "bbo/optimizers.hpp"
#include "bbo/runner.hpp"
#include "bbo/space.hpp"

namespace bbo {

/// Running minimum.
inline std::vector<double> best_so_far(const std::vector<double>& ys) {
  std::vector<double> out(ys.size());
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ys.size(); ++i) out[i] = best = std::min(best, ys[i]);
  return out;
}

inline std::vector<double> best_so_far(const Trajectory& traj) {
  if (traj.trials.empty()) throw DomainError("best_so_far: empty trajectory");
  std::vector<double> ys;
  for (const auto& t : traj.trials) ys.push_back(t.objective);
  return best_so_far(ys);
}

/// Best-so-far curves keyed by (method, task), one per seed.
class CurveSet {
 public:
  using Key = std::pair<std::string, std::string>;

  void add(const std::string& method, const std::string& task,
           std::vector<double> curve) {
    if (curve.empty()) throw DomainError("CurveSet: empty curve");
    auto& slot = curves_[{method, task}];
    if (!slot.empty() && slot.front().size() != curve.size()) {
      throw DomainError("CurveSet: curves of " + method + " on " + task +
                        " differ in length");
    }
    slot.push_back(std::move(curve));
  }

  void add(const std::string& method, const Trajectory& traj) {
    add(method, traj.task_id, best_so_far(traj));
  }

  std::vector<std::string> methods() const {
    std::set<std::string> s;
    for (const auto& [k, v] : curves_) s.insert(k.first);
    return {s.begin(), s.end()};
  }
  std::vector<std::string> tasks(const std::string& method) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : curves_) {
      if (k.first == method) out.push_back(k.second);
    }
    return out;
  }
  const std::vector<std::vector<double>>& curves(const std::string& method,
                                                 const std::string& task) const {
    auto it = curves_.find({method, task});
    if (it == curves_.end()) {
      throw DomainError("no curves for " + method + " on " + task);
    }
    return it->second;
  }
  std::size_t length(const std::string& method, const std::string& task) const {
    return curves(method, task).front().size();
  }

  std::vector<double> mean(const std::string& method,
                           const std::string& task) const {
    const auto& cs = curves(method, task);
    std::vector<double> out(cs.front().size(), 0.0);
    for (const auto& c : cs) {
      for (std::size_t i = 0; i < c.size(); ++i) out[i] += c[i];
    }
    for (double& v : out) v /= static_cast<double>(cs.size());
    return out;
  }

  /// Sample standard deviation per step; 0 for a single seed.
  std::vector<double> stddev(const std::string& method,
                             const std::string& task) const {
    const auto& cs = curves(method, task);
    const auto m = mean(method, task);
    std::vector<double> out(m.size(), 0.0);
    if (cs.size() < 2) return out;
    for (const auto& c : cs) {
      for (std::size_t i = 0; i < c.size(); ++i) {
        out[i] += (c[i] - m[i]) * (c[i] - m[i]);
      }
    }
    for (double& v : out) v = std::sqrt(v / static_cast<double>(cs.size() - 1));
    return out;
  }

 private:
  std::map<Key, std::vector<std::vector<double>>> curves_;
};

/// Ranks with ties sharing the mean of their positions (1 = smallest).
inline std::vector<double> midranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = rank;
    i = j + 1;
  }
  return r;
}

/// Average over tasks of each method's rank of its mean best-so-far value at
/// 0-based `step`.
inline std::map<std::string, double> average_rank(const CurveSet& curves,
                                                  std::size_t step) {
  const auto methods = curves.methods();
  if (methods.size() < 2) throw DomainError("average_rank needs >= 2 methods");
  const auto tasks = curves.tasks(methods.front());
  for (const auto& m : methods) {
    if (curves.tasks(m) != tasks) {
      throw DomainError("average_rank: method " + m +
                        " was run on a different task set");
    }
  }
  std::map<std::string, double> out;
  for (const auto& task : tasks) {
    std::vector<double> vals;
    for (const auto& m : methods) {
      const auto mean = curves.mean(m, task);
      if (step >= mean.size()) {
        throw DomainError("step " + std::to_string(step) + " beyond curve of " +
                          m + " on " + task);
      }
      vals.push_back(mean[step]);
    }
    const auto r = midranks(vals);
    for (std::size_t i = 0; i < methods.size(); ++i) out[methods[i]] += r[i];
  }
  for (auto& [m, r] : out) r /= static_cast<double>(tasks.size());
  return out;
}

struct TaskStats {
  double y_min;
  double y_max;
};

/// Pooled min/max over every observation of every method on each task.
inline std::map<std::string, TaskStats> task_stats(
    const std::vector<Trajectory>& trajectories) {
  std::map<std::string, TaskStats> out;
  for (const auto& t : trajectories) {
    for (const auto& tr : t.trials) {
      auto [it, fresh] =
          out.try_emplace(t.task_id, TaskStats{tr.objective, tr.objective});
      if (!fresh) {
        it->second.y_min = std::min(it->second.y_min, tr.objective);
        it->second.y_max = std::max(it->second.y_max, tr.objective);
      }
    }
  }
  return out;
}

/// (best_so_far - y_min) / (y_max - y_min), clamped to [0, 1]; all zeros when
/// the task range is degenerate.
inline std::vector<double> normalized_regret(const std::vector<double>& curve,
                                             const TaskStats& s) {
  std::vector<double> out(curve.size(), 0.0);
  if (!(s.y_max > s.y_min)) return out;
  const auto best = best_so_far(curve);
  for (std::size_t i = 0; i < best.size(); ++i) {
    out[i] = std::clamp((best[i] - s.y_min) / (s.y_max - s.y_min), 0.0, 1.0);
  }
  return out;
}

inline constexpr std::size_t kDensityGrid = 50;
inline constexpr double kDensityBandwidthFloor = 1e-3;

/// Gaussian KDE (Scott bandwidth, floored) evaluated on kDensityGrid evenly
/// spaced points of [0, 1] and normalized to sum to one.
inline std::vector<double> grid_density(const std::vector<double>& xs) {
  if (xs.empty()) throw DomainError("grid_density: no samples");
  const double h = detail::scott_bandwidth(xs, kDensityBandwidthFloor);
  std::vector<double> logp(kDensityGrid);
  for (std::size_t g = 0; g < kDensityGrid; ++g) {
    const double x = static_cast<double>(g) / (kDensityGrid - 1);
    logp[g] = detail::log_gaussian_kde(xs, h, x);
  }
  const double mx = *std::max_element(logp.begin(), logp.end());
  double z = 0.0;
  for (double& v : logp) z += (v = std::exp(v - mx));
  for (double& v : logp) v /= z;
  return logp;
}

inline double total_variation(const std::vector<double>& p,
                              const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

/// Per-parameter total-variation distance (space order) between the marginal
/// densities of two configuration samples, on unit coordinates for numerical
/// parameters and index frequencies for categorical ones.
inline std::vector<double> marginal_density_compare(
    const std::vector<Configuration>& reference,
    const std::vector<Configuration>& model, const SearchSpace& space) {
  if (reference.empty() || model.empty()) {
    throw DomainError("marginal_density_compare: empty sample set");
  }
  std::vector<double> out;
  for (std::size_t i = 0; i < space.dimension(); ++i) {
    const auto& p = space[i];
    if (p.is_categorical()) {
      std::vector<double> a(static_cast<std::size_t>(p.cardinality()), 0.0),
          b(a.size(), 0.0);
      for (const auto& c : reference) a[static_cast<std::size_t>(c[i])] += 1.0;
      for (const auto& c : model) b[static_cast<std::size_t>(c[i])] += 1.0;
      for (double& v : a) v /= static_cast<double>(reference.size());
      for (double& v : b) v /= static_cast<double>(model.size());
      out.push_back(total_variation(a, b));
      continue;
    }
    std::vector<double> a, b;
    for (const auto& c : reference) a.push_back(to_unit(p, c[i]));
    for (const auto& c : model) b.push_back(to_unit(p, c[i]));
    out.push_back(total_variation(grid_density(a), grid_density(b)));
  }
  return out;
}

struct ScalingPoint {
  double N;  // parameters
  double D;  // tokens
  double L;  // validation loss
  double C() const { return 6.0 * N * D; }
};

/// Points not dominated in (compute, loss). Points with compute below
/// `min_compute` are dropped first. Input order is preserved.
inline std::vector<ScalingPoint> pareto_points(
    const std::vector<ScalingPoint>& points, double min_compute = 0.0) {
  std::vector<ScalingPoint> kept;
  for (const auto& p : points) {
    if (p.C() >= min_compute) kept.push_back(p);
  }
  std::vector<ScalingPoint> out;
  for (const auto& p : kept) {
    bool dominated = false;
    for (const auto& q : kept) {
      if (q.C() <= p.C() && q.L <= p.L && (q.C() < p.C() || q.L < p.L)) {
        dominated = true;
        break;
      }
    }
    if (!dominated) out.push_back(p);
  }
  return out;
}

struct PowerLaw {
  double a;
  double b;  // L = a * C^(-b)
};

/// Least squares on ln L = ln a - b ln C.
inline PowerLaw fit_power_law(const std::vector<ScalingPoint>& points) {
  std::set<double> cs;
  for (const auto& p : points) {
    if (!(p.N > 0 && p.D > 0 && p.L > 0)) {
      throw DomainError("fit_power_law: N, D and L must be positive");
    }
    cs.insert(p.C());
  }
  if (cs.size() < 2) {
    throw DomainError("fit_power_law needs >= 2 distinct compute values");
  }
  const auto n = static_cast<double>(points.size());
  double mx = 0, my = 0;
  for (const auto& p : points) {
    mx += std::log(p.C());
    my += std::log(p.L);
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0;
  for (const auto& p : points) {
    const double dx = std::log(p.C()) - mx;
    sxy += dx * (std::log(p.L) - my);
    sxx += dx * dx;
  }
  const double slope = sxy / sxx;
  return {std::exp(my - slope * mx), -slope};
}

// ---------------------------------------------------------------------------
// Reports.

/// One row per (method, task, step): mean and std of best-so-far plus mean
/// normalized regret.
inline void write_curves_csv(std::ostream& os, const CurveSet& curves,
                             const std::map<std::string, TaskStats>& stats) {
  os << "method,task,step,mean_best,std_best,normalized_regret\n";
  os << std::setprecision(10);
  for (const auto& m : curves.methods()) {
    for (const auto& task : curves.tasks(m)) {
      const auto mean = curves.mean(m, task);
      const auto sd = curves.stddev(m, task);
      std::vector<double> regret(mean.size(), 0.0);
      if (auto it = stats.find(task); it != stats.end()) {
        const auto& cs = curves.curves(m, task);
        for (const auto& c : cs) {
          const auto r = normalized_regret(c, it->second);
          for (std::size_t i = 0; i < r.size(); ++i) regret[i] += r[i];
        }
        for (double& v : regret) v /= static_cast<double>(cs.size());
      }
      for (std::size_t i = 0; i < mean.size(); ++i) {
        os << m << ',' << task << ',' << i + 1 << ',' << mean[i] << ','
           << sd[i] << ',' << regret[i] << '\n';
      }
    }
  }
}

struct MethodSummary {
  std::string method;
  double average_rank = std::numeric_limits<double>::quiet_NaN();
  double normalized_regret = 0.0;  // final step, averaged over tasks
  std::size_t tasks = 0;
  std::size_t runs = 0;
};

inline std::vector<MethodSummary> summarize(
    const CurveSet& curves, const std::map<std::string, TaskStats>& stats) {
  const auto methods = curves.methods();
  std::map<std::string, double> ranks;
  if (methods.size() >= 2) {
    std::size_t step = std::numeric_limits<std::size_t>::max();
    for (const auto& m : methods) {
      for (const auto& t : curves.tasks(m)) {
        step = std::min(step, curves.length(m, t) - 1);
      }
    }
    ranks = average_rank(curves, step);
  }
  std::vector<MethodSummary> out;
  for (const auto& m : methods) {
    MethodSummary s;
    s.method = m;
    if (auto it = ranks.find(m); it != ranks.end()) s.average_rank = it->second;
    for (const auto& task : curves.tasks(m)) {
      const auto& cs = curves.curves(m, task);
      ++s.tasks;
      s.runs += cs.size();
      double r = 0.0;
      if (auto it = stats.find(task); it != stats.end()) {
        for (const auto& c : cs) r += normalized_regret(c, it->second).back();
      }
      s.normalized_regret += r / static_cast<double>(cs.size());
    }
    s.normalized_regret /= static_cast<double>(s.tasks);
    out.push_back(s);
  }
  return out;
}

inline void write_summary_csv(std::ostream& os,
                              const std::vector<MethodSummary>& rows) {
  os << "method,average_rank,normalized_regret,tasks,runs\n";
  os << std::setprecision(10);
  for (const auto& r : rows) {
    os << r.method << ',';
    if (std::isfinite(r.average_rank)) os << r.average_rank;
    os << ',' << r.normalized_regret << ',' << r.tasks << ',' << r.runs << '\n';
  }
}

inline nlohmann::json to_json(const std::vector<MethodSummary>& rows) {
  auto arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back(
        {{"method", r.method},
         {"average_rank", std::isfinite(r.average_rank)
                              ? nlohmann::json(r.average_rank)
                              : nlohmann::json(nullptr)},
         {"normalized_regret", r.normalized_regret},
         {"tasks", r.tasks},
         {"runs", r.runs}});
  }
  return arr;
}

inline nlohmann::json to_json(const ScalingPoint& p) {
  return {{"N", p.N}, {"D", p.D}, {"L", p.L}, {"C", p.C()}};
}

}  // namespace bbo
