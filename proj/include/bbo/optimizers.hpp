// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <numbers>
#include <numeric>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bbo/bench.hpp"
#include "bbo/error.hpp"
#include "bbo/rng.hpp"
#include "bbo/space.hpp"

namespace bbo {

enum class OptimizerKind { kRS, kREA, kTPE, kBORE, kCQR };

inline constexpr OptimizerKind kAllOptimizerKinds[] = {
    OptimizerKind::kRS, OptimizerKind::kREA, OptimizerKind::kTPE,
    OptimizerKind::kBORE, OptimizerKind::kCQR};

inline std::string_view to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::kRS: return "RS";
    case OptimizerKind::kREA: return "REA";
    case OptimizerKind::kTPE: return "TPE";
    case OptimizerKind::kBORE: return "BORE";
    case OptimizerKind::kCQR: return "CQR";
  }
  return "?";
}

inline OptimizerKind parse_optimizer_kind(std::string_view s) {
  for (auto k : kAllOptimizerKinds) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown optimizer '" + std::string(s) +
                    "' (expected RS, REA, TPE, BORE or CQR)");
}

struct OptimizerSettings {
  // good/bad split quantile for TPE and BORE
  double gamma = 0.25;
  std::size_t n_init = 4;
  std::size_t pool_size = 64;
  double bandwidth_floor = 1e-3;
  std::size_t rea_capacity = 10;
  std::size_t rea_tournament = 3;
  std::size_t bore_neighbors = 5;
  std::size_t cqr_neighbors = 7;
  std::vector<double> cqr_levels = {0.1, 0.2, 0.3, 0.4, 0.5,
                                    0.6, 0.7, 0.8, 0.9};
};

struct Observation {
  Configuration config;
  double y;
};

namespace detail {

/// Linearly interpolated empirical quantile of `v` (sorted in place).
inline double empirical_quantile(std::vector<double>& v, double q) {
  std::sort(v.begin(), v.end());
  if (v.size() == 1) return v[0];
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

inline double scott_bandwidth(const std::vector<double>& xs, double floor) {
  const auto n = static_cast<double>(xs.size());
  if (xs.size() < 2) return floor;
  const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return std::max(sd * std::pow(n, -0.2), floor);
}

inline double log_gaussian_kde(const std::vector<double>& centers, double h,
                               double x) {
  // log-sum-exp over kernels
  double m = -std::numeric_limits<double>::infinity();
  std::vector<double> e(centers.size());
  for (std::size_t i = 0; i < centers.size(); ++i) {
    const double z = (x - centers[i]) / h;
    e[i] = -0.5 * z * z;
    m = std::max(m, e[i]);
  }
  double s = 0.0;
  for (double v : e) s += std::exp(v - m);
  return m + std::log(s / static_cast<double>(centers.size())) -
         std::log(h * std::sqrt(2.0 * std::numbers::pi));
}

/// Adaptive Parzen estimator on [0, 1]: a prior N(0.5, 1) plus one truncated
/// Gaussian per observation, each with sigma equal to the larger gap to its
/// sorted neighbours, clipped to [1/min(100, n+1), 1]. Equal weights.
struct ParzenEstimator {
  std::vector<double> mu, sigma;

  ParzenEstimator() = default;
  ParzenEstimator(std::vector<double> xs, double floor) {
    xs.push_back(0.5);
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](auto a, auto b) { return xs[a] < xs[b]; });
    const std::size_t prior = xs.size() - 1;
    const double lo_clip = std::max(
        floor, 1.0 / std::min(100.0, static_cast<double>(xs.size())));
    mu = xs;
    sigma.assign(xs.size(), 1.0);
    for (std::size_t r = 0; r < order.size(); ++r) {
      const std::size_t i = order[r];
      if (i == prior) continue;
      const double left = r > 0 ? xs[i] - xs[order[r - 1]] : xs[i];
      const double right =
          r + 1 < order.size() ? xs[order[r + 1]] - xs[i] : 1.0 - xs[i];
      sigma[i] = std::clamp(std::max(left, right), lo_clip, 1.0);
    }
  }

  std::size_t size() const { return mu.size(); }

  double sample(std::size_t k, Rng& rng) const {
    for (int attempt = 0; attempt < 64; ++attempt) {
      const double v = mu[k] + sigma[k] * rng.normal();
      if (v >= 0.0 && v <= 1.0) return v;
    }
    return std::clamp(mu[k], 0.0, 1.0);
  }

  double log_pdf(double x) const {
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> e(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) {
      const double z = (x - mu[i]) / sigma[i];
      const double mass = normal_cdf((1.0 - mu[i]) / sigma[i]) -
                          normal_cdf((0.0 - mu[i]) / sigma[i]);
      e[i] = -0.5 * z * z -
             std::log(sigma[i] * std::sqrt(2.0 * std::numbers::pi) * mass);
      m = std::max(m, e[i]);
    }
    double s = 0.0;
    for (double v : e) s += std::exp(v - m);
    return m + std::log(s / static_cast<double>(mu.size()));
  }

  static double normal_cdf(double z) {
    return 0.5 * std::erfc(-z / std::numbers::sqrt2);
  }
};

}  // namespace detail

/// Conformal correction for one quantile level: the level-quantile of the
/// calibration residuals y - prediction.
inline double conformal_offset(std::vector<double> residuals, double level) {
  if (residuals.empty()) return 0.0;
  return detail::empirical_quantile(residuals, level);
}

/// Ask/tell optimizer. `suggest()` proposes, `observe()` records the result.
/// Output depends only on the seed and the observation history.
class Optimizer {
 public:
  struct Member {
    Configuration config;
    double y;
    std::size_t age;
  };

  Optimizer(OptimizerKind kind, SearchSpace space, std::uint64_t seed,
            OptimizerSettings settings = {})
      : kind_(kind), space_(std::move(space)), rng_(seed),
        settings_(std::move(settings)) {}

  OptimizerKind kind() const { return kind_; }
  const SearchSpace& space() const { return space_; }
  const OptimizerSettings& settings() const { return settings_; }
  const std::vector<Observation>& history() const { return history_; }
  const std::deque<Member>& population() const { return population_; }
  const Rng& rng() const { return rng_; }

  Configuration suggest() {
    switch (kind_) {
      case OptimizerKind::kRS: return sample_uniform(space_, rng_);
      case OptimizerKind::kREA: return suggest_rea();
      case OptimizerKind::kTPE: return suggest_tpe();
      case OptimizerKind::kBORE: return suggest_bore();
      case OptimizerKind::kCQR: return suggest_cqr();
    }
    return sample_uniform(space_, rng_);
  }

  void observe(const Configuration& config, double y) {
    space_.validate(config);
    history_.push_back({config, y});
    unit_history_.push_back(to_unit(space_, config));
    if (kind_ == OptimizerKind::kREA) {
      population_.push_back({config, y, next_age_++});
      while (population_.size() > settings_.rea_capacity) {
        population_.pop_front();
      }
    }
  }

  /// Indices of the good set: the ceil(gamma * n) lowest objectives, ties by
  /// insertion order. Empty when the split is degenerate.
  std::vector<std::size_t> good_indices() const {
    const std::size_t n = history_.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (n < 2) return {};
    const double y0 = history_[0].y;
    if (std::all_of(history_.begin(), history_.end(),
                    [&](const Observation& o) { return o.y == y0; })) {
      return {};
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return history_[a].y < history_[b].y;
    });
    auto n_good = static_cast<std::size_t>(
        std::ceil(settings_.gamma * static_cast<double>(n)));
    n_good = std::clamp<std::size_t>(n_good, 1, n - 1);
    idx.resize(n_good);
    return idx;
  }

 private:
  Configuration mutate(const Configuration& parent) {
    Configuration child = parent;
    const std::size_t d = rng_.index(space_.dimension());
    const auto& p = space_[d];
    const bool single_valued =
        (p.is_categorical() && p.cardinality() == 1) ||
        (p.kind() == ParamKind::kInteger && p.lo() == p.hi());
    for (int attempt = 0; attempt < 64; ++attempt) {
      child[d] = draw_from_unit(p, rng_.uniform());
      if (single_valued || child[d] != parent[d]) break;
    }
    return child;
  }

  Configuration suggest_rea() {
    if (population_.empty()) return sample_uniform(space_, rng_);
    std::vector<std::size_t> idx(population_.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t s = std::min(settings_.rea_tournament, idx.size());
    for (std::size_t i = 0; i < s; ++i) {
      std::swap(idx[i], idx[i + rng_.index(idx.size() - i)]);
    }
    std::size_t best = idx[0];
    for (std::size_t i = 1; i < s; ++i) {
      const auto c = idx[i];
      if (population_[c].y < population_[best].y ||
          (population_[c].y == population_[best].y && c < best)) {
        best = c;
      }
    }
    return mutate(population_[best].config);
  }

  Configuration suggest_tpe() {
    if (history_.size() < std::max<std::size_t>(settings_.n_init, 2)) {
      return sample_uniform(space_, rng_);
    }
    const auto good = good_indices();
    if (good.empty()) return sample_uniform(space_, rng_);
    std::vector<bool> is_good(history_.size(), false);
    for (auto i : good) is_good[i] = true;

    const std::size_t dim = space_.dimension();
    struct Marginal {
      detail::ParzenEstimator good, bad;
      std::vector<double> p_good, p_bad;  // categorical probabilities
    };
    std::vector<Marginal> m(dim);
    for (std::size_t d = 0; d < dim; ++d) {
      const auto& p = space_[d];
      if (p.is_categorical()) {
        const auto k = static_cast<std::size_t>(p.cardinality());
        std::vector<double> cg(k, 1.0), cb(k, 1.0);
        double ng = static_cast<double>(k), nb = static_cast<double>(k);
        for (std::size_t i = 0; i < history_.size(); ++i) {
          const auto c = static_cast<std::size_t>(unit_history_[i][d]);
          if (is_good[i]) {
            cg[c] += 1;
            ng += 1;
          } else {
            cb[c] += 1;
            nb += 1;
          }
        }
        for (auto& v : cg) v /= ng;
        for (auto& v : cb) v /= nb;
        m[d].p_good = std::move(cg);
        m[d].p_bad = std::move(cb);
      } else {
        std::vector<double> g, b;
        for (std::size_t i = 0; i < history_.size(); ++i) {
          (is_good[i] ? g : b).push_back(unit_history_[i][d]);
        }
        m[d].good = detail::ParzenEstimator(std::move(g), settings_.bandwidth_floor);
        m[d].bad = detail::ParzenEstimator(std::move(b), settings_.bandwidth_floor);
      }
    }

    const std::size_t pool = std::max<std::size_t>(settings_.pool_size, 1);
    std::vector<UnitPoint> candidates;
    candidates.reserve(pool);
    for (std::size_t c = 0; c < pool; ++c) {
      // one mixture component of l, shared across dimensions; the last one
      // is the prior
      const std::size_t slot = rng_.index(good.size() + 1);
      const bool from_prior = slot == good.size();
      UnitPoint u;
      u.coords.resize(dim);
      for (std::size_t d = 0; d < dim; ++d) {
        if (space_[d].is_categorical() && from_prior) {
          u[d] = static_cast<double>(rng_.index(m[d].p_good.size()));
        } else if (space_[d].is_categorical()) {
          const double r = rng_.uniform();
          double acc = 0.0;
          std::size_t pick = m[d].p_good.size() - 1;
          for (std::size_t k = 0; k < m[d].p_good.size(); ++k) {
            acc += m[d].p_good[k];
            if (r < acc) {
              pick = k;
              break;
            }
          }
          u[d] = static_cast<double>(pick);
        } else {
          u[d] = m[d].good.sample(slot, rng_);
        }
      }
      candidates.push_back(std::move(u));
    }

    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < candidates.size(); ++c) {
      double score = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        const double x = candidates[c][d];
        if (space_[d].is_categorical()) {
          const auto k = static_cast<std::size_t>(x);
          score += std::log(m[d].p_good[k]) - std::log(m[d].p_bad[k]);
        } else {
          score += m[d].good.log_pdf(x) - m[d].bad.log_pdf(x);
        }
      }
      if (score > best_score) {
        best_score = score;
        best = c;
      }
    }
    return from_unit(space_, candidates[best]);
  }

  std::vector<UnitPoint> uniform_pool(std::vector<Configuration>& configs) {
    const std::size_t pool = std::max<std::size_t>(settings_.pool_size, 1);
    std::vector<UnitPoint> out;
    out.reserve(pool);
    configs.clear();
    for (std::size_t c = 0; c < pool; ++c) {
      configs.push_back(sample_uniform(space_, rng_));
      out.push_back(to_unit(space_, configs.back()));
    }
    return out;
  }

  Configuration suggest_bore() {
    if (history_.size() < std::max<std::size_t>(settings_.n_init, 2)) {
      return sample_uniform(space_, rng_);
    }
    const auto good = good_indices();
    if (good.empty()) return sample_uniform(space_, rng_);
    std::vector<double> label(history_.size(), 0.0);
    for (auto i : good) label[i] = 1.0;

    std::vector<Configuration> configs;
    const auto pool = uniform_pool(configs);
    // Distance-weighted k-NN class probability, shrunk towards the base rate
    // gamma by one pseudo-observation.
    std::size_t best = 0;
    double best_p = -1.0;
    for (std::size_t c = 0; c < pool.size(); ++c) {
      const auto nn = nearest_indices(space_, unit_history_, pool[c],
                                      settings_.bore_neighbors);
      double num = settings_.gamma, den = 1.0;
      for (auto i : nn) {
        const double d = std::sqrt(
            squared_mixed_distance(space_, unit_history_[i], pool[c]));
        const double w = 1.0 / (d + 1e-6);
        num += w * label[i];
        den += w;
      }
      const double p = num / den;
      if (p > best_p) {
        best_p = p;
        best = c;
      }
    }
    return configs[best];
  }

  Configuration suggest_cqr() {
    const std::size_t n = history_.size();
    if (n < std::max<std::size_t>(settings_.n_init, 2)) {
      return sample_uniform(space_, rng_);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng_.shuffle(order);
    const std::size_t n_fit = (n + 1) / 2;
    std::vector<UnitPoint> fit_x;
    std::vector<double> fit_y;
    for (std::size_t i = 0; i < n_fit; ++i) {
      fit_x.push_back(unit_history_[order[i]]);
      fit_y.push_back(history_[order[i]].y);
    }
    const std::size_t k = std::min(settings_.cqr_neighbors, n_fit);
    auto predict = [&](const UnitPoint& x, double level) {
      const auto nn = nearest_indices(space_, fit_x, x, k);
      std::vector<double> ys;
      ys.reserve(nn.size());
      for (auto i : nn) ys.push_back(fit_y[i]);
      return detail::empirical_quantile(ys, level);
    };

    const auto& levels = settings_.cqr_levels;
    const std::size_t j = rng_.index(levels.size());
    const double level = levels[j];
    // Conformal offset: the level-quantile of calibration residuals.
    double offset = 0.0;
    if (n_fit < n) {
      std::vector<double> residuals;
      for (std::size_t i = n_fit; i < n; ++i) {
        const auto idx = order[i];
        residuals.push_back(history_[idx].y -
                            predict(unit_history_[idx], level));
      }
      offset = conformal_offset(std::move(residuals), level);
    }

    std::vector<Configuration> configs;
    const auto pool = uniform_pool(configs);
    std::size_t best = 0;
    double best_v = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < pool.size(); ++c) {
      const double v = predict(pool[c], level) + offset;
      if (v < best_v) {
        best_v = v;
        best = c;
      }
    }
    return configs[best];
  }

  OptimizerKind kind_;
  SearchSpace space_;
  Rng rng_;
  OptimizerSettings settings_;
  std::vector<Observation> history_;
  std::vector<UnitPoint> unit_history_;
  std::deque<Member> population_;
  std::size_t next_age_ = 0;
};

}  // namespace bbo
