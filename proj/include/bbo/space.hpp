// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bbo/error.hpp"
#include "bbo/rng.hpp"

namespace bbo {

enum class ParamKind { kUniform, kLogUniform, kInteger, kCategorical };

inline std::string_view to_string(ParamKind kind) {
  switch (kind) {
    case ParamKind::kUniform: return "uniform";
    case ParamKind::kLogUniform: return "log-uniform";
    case ParamKind::kInteger: return "integer";
    case ParamKind::kCategorical: return "categorical";
  }
  return "?";
}

inline ParamKind parse_param_kind(std::string_view s) {
  if (s == "uniform") return ParamKind::kUniform;
  if (s == "log-uniform") return ParamKind::kLogUniform;
  if (s == "integer") return ParamKind::kInteger;
  if (s == "categorical") return ParamKind::kCategorical;
  throw ConfigError("unknown parameter kind '" + std::string(s) + "'");
}

/// Domain of a single parameter. Construct through the named factories;
/// invariants are checked there.
class ParameterDomain {
 public:
  static ParameterDomain uniform(std::string name, double lo, double hi) {
    return {std::move(name), ParamKind::kUniform, lo, hi, 0};
  }
  static ParameterDomain log_uniform(std::string name, double lo, double hi) {
    return {std::move(name), ParamKind::kLogUniform, lo, hi, 0};
  }
  static ParameterDomain integer(std::string name, long lo, long hi) {
    return {std::move(name), ParamKind::kInteger, static_cast<double>(lo),
            static_cast<double>(hi), 0};
  }
  static ParameterDomain categorical(std::string name, int cardinality) {
    return {std::move(name), ParamKind::kCategorical, 0.0, 0.0, cardinality};
  }

  const std::string& name() const { return name_; }
  ParamKind kind() const { return kind_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  int cardinality() const { return cardinality_; }

  bool is_categorical() const { return kind_ == ParamKind::kCategorical; }
  bool is_numerical() const { return !is_categorical(); }

  bool contains(double v) const {
    if (!std::isfinite(v)) return false;
    if (is_categorical()) {
      return v == std::floor(v) && v >= 0 && v < cardinality_;
    }
    if (kind_ == ParamKind::kInteger && v != std::floor(v)) return false;
    return v >= lo_ && v <= hi_;
  }

  bool operator==(const ParameterDomain&) const = default;

 private:
  ParameterDomain(std::string name, ParamKind kind, double lo, double hi,
                  int cardinality)
      : name_(std::move(name)), kind_(kind), lo_(lo), hi_(hi),
        cardinality_(cardinality) {
    if (name_.empty()) throw DomainError("parameter name must not be empty");
    switch (kind_) {
      case ParamKind::kUniform:
      case ParamKind::kLogUniform:
        if (!(std::isfinite(lo_) && std::isfinite(hi_) && lo_ < hi_)) {
          throw DomainError("parameter '" + name_ + "': requires lo < hi");
        }
        if (kind_ == ParamKind::kLogUniform && !(lo_ > 0)) {
          throw DomainError("parameter '" + name_ +
                            "': log-uniform requires lo > 0");
        }
        break;
      case ParamKind::kInteger:
        if (lo_ != std::floor(lo_) || hi_ != std::floor(hi_) || lo_ > hi_) {
          throw DomainError("parameter '" + name_ +
                            "': integer bounds must satisfy lo <= hi");
        }
        break;
      case ParamKind::kCategorical:
        if (cardinality_ < 1) {
          throw DomainError("parameter '" + name_ +
                            "': cardinality must be >= 1");
        }
        break;
    }
  }

  std::string name_;
  ParamKind kind_;
  double lo_;
  double hi_;
  int cardinality_;
};

/// A point of a search space. Entries are aligned with the space's
/// parameters; categorical entries hold the category index.
struct Configuration {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  double& operator[](std::size_t i) { return values[i]; }
  bool operator==(const Configuration&) const = default;
};

/// Unit-cube coordinates of a configuration. Numerical entries lie in [0, 1];
/// categorical entries are passed through as indices.
struct UnitPoint {
  std::vector<double> coords;

  std::size_t size() const { return coords.size(); }
  double operator[](std::size_t i) const { return coords[i]; }
  double& operator[](std::size_t i) { return coords[i]; }
  bool operator==(const UnitPoint&) const = default;
};

class SearchSpace {
 public:
  SearchSpace(std::string id, std::vector<ParameterDomain> parameters)
      : id_(std::move(id)), parameters_(std::move(parameters)) {
    if (parameters_.empty()) {
      throw DomainError("search space '" + id_ + "' has no parameters");
    }
    std::set<std::string> names;
    for (const auto& p : parameters_) {
      if (!names.insert(p.name()).second) {
        throw DomainError("search space '" + id_ +
                          "': duplicate parameter name '" + p.name() + "'");
      }
    }
  }

  const std::string& id() const { return id_; }
  const std::vector<ParameterDomain>& parameters() const { return parameters_; }
  const ParameterDomain& operator[](std::size_t i) const {
    return parameters_[i];
  }
  std::size_t dimension() const { return parameters_.size(); }

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < parameters_.size(); ++i) {
      if (parameters_[i].name() == name) return i;
    }
    throw DomainError("search space '" + id_ + "' has no parameter '" +
                      std::string(name) + "'");
  }

  std::size_t num_numerical() const {
    return static_cast<std::size_t>(
        std::count_if(parameters_.begin(), parameters_.end(),
                      [](const auto& p) { return p.is_numerical(); }));
  }

  bool contains(const Configuration& c) const {
    if (c.size() != parameters_.size()) return false;
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (!parameters_[i].contains(c[i])) return false;
    }
    return true;
  }

  void validate(const Configuration& c) const {
    if (c.size() != parameters_.size()) {
      throw DomainError("configuration has " + std::to_string(c.size()) +
                        " values, space '" + id_ + "' has " +
                        std::to_string(parameters_.size()) + " parameters");
    }
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (!parameters_[i].contains(c[i])) {
        throw DomainError("value " + std::to_string(c[i]) +
                          " outside domain of parameter '" +
                          parameters_[i].name() + "'");
      }
    }
  }

  bool operator==(const SearchSpace&) const = default;

 private:
  std::string id_;
  std::vector<ParameterDomain> parameters_;
};

/// Inverse CDF of the uniform prior of `p` evaluated at u in [0, 1).
inline double draw_from_unit(const ParameterDomain& p, double u) {
  switch (p.kind()) {
    case ParamKind::kUniform:
      return std::min(p.hi(), p.lo() + u * (p.hi() - p.lo()));
    case ParamKind::kLogUniform:
      return std::clamp(p.lo() * std::pow(p.hi() / p.lo(), u), p.lo(), p.hi());
    case ParamKind::kInteger: {
      const double n = p.hi() - p.lo() + 1.0;
      return std::min(p.hi(), p.lo() + std::floor(u * n));
    }
    case ParamKind::kCategorical:
      return std::min<double>(p.cardinality() - 1,
                              std::floor(u * p.cardinality()));
  }
  return 0.0;
}

inline Configuration sample_uniform(const SearchSpace& space, Rng& rng) {
  Configuration c;
  c.values.reserve(space.dimension());
  for (const auto& p : space.parameters()) {
    c.values.push_back(draw_from_unit(p, rng.uniform()));
  }
  return c;
}

inline double to_unit(const ParameterDomain& p, double v) {
  const bool in_range = p.is_categorical()
                            ? p.contains(v)
                            : (std::isfinite(v) && v >= p.lo() && v <= p.hi());
  if (!in_range) {
    throw DomainError("value " + std::to_string(v) +
                      " outside domain of parameter '" + p.name() + "'");
  }
  switch (p.kind()) {
    case ParamKind::kUniform:
      return (v - p.lo()) / (p.hi() - p.lo());
    case ParamKind::kLogUniform:
      return std::log(v / p.lo()) / std::log(p.hi() / p.lo());
    case ParamKind::kInteger:
      return p.hi() > p.lo() ? (v - p.lo()) / (p.hi() - p.lo()) : 0.0;
    case ParamKind::kCategorical:
      return v;
  }
  return 0.0;
}

inline double from_unit(const ParameterDomain& p, double u) {
  if (p.is_categorical()) {
    if (!p.contains(u)) {
      throw DomainError("category index " + std::to_string(u) +
                        " outside parameter '" + p.name() + "'");
    }
    return u;
  }
  if (!(u >= 0.0 && u <= 1.0)) {
    throw DomainError("unit coordinate " + std::to_string(u) +
                      " outside [0, 1] for parameter '" + p.name() + "'");
  }
  switch (p.kind()) {
    case ParamKind::kUniform:
      return std::clamp(p.lo() + u * (p.hi() - p.lo()), p.lo(), p.hi());
    case ParamKind::kLogUniform:
      return std::clamp(p.lo() * std::exp(u * std::log(p.hi() / p.lo())),
                        p.lo(), p.hi());
    case ParamKind::kInteger:
      return std::clamp(std::round(p.lo() + u * (p.hi() - p.lo())), p.lo(),
                        p.hi());
    case ParamKind::kCategorical:
      break;
  }
  return u;
}

inline UnitPoint to_unit(const SearchSpace& space, const Configuration& c) {
  if (c.size() != space.dimension()) {
    throw DomainError("configuration dimension does not match space '" +
                      space.id() + "'");
  }
  UnitPoint u;
  u.coords.reserve(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    u.coords.push_back(to_unit(space[i], c[i]));
  }
  return u;
}

inline Configuration from_unit(const SearchSpace& space, const UnitPoint& u) {
  if (u.size() != space.dimension()) {
    throw DomainError("unit point dimension does not match space '" +
                      space.id() + "'");
  }
  Configuration c;
  c.values.reserve(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    c.values.push_back(from_unit(space[i], u[i]));
  }
  return c;
}

/// Positions of the parameters with all numerical ones first, stable within
/// each group.
inline std::vector<std::size_t> canonical_order(const SearchSpace& space) {
  std::vector<std::size_t> order(space.dimension());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_partition(order.begin(), order.end(), [&](std::size_t i) {
    return space[i].is_numerical();
  });
  return order;
}

/// Shortest decimal that round-trips, always carrying a fractional part or
/// exponent so reals stay distinguishable from integers.
inline std::string format_real(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, end);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

inline std::string format_integer(double v) {
  return std::to_string(static_cast<long long>(v));
}

inline std::string encode_parameter_header(const ParameterDomain& p) {
  std::string line = "<type>:";
  switch (p.kind()) {
    case ParamKind::kUniform:
    case ParamKind::kLogUniform:
      line += "<UNI>,<min_value>:" + format_real(p.lo()) +
              ",<max_value>:" + format_real(p.hi());
      line += p.kind() == ParamKind::kLogUniform ? ",<log-scale>"
                                                 : ",<linear-scale>";
      break;
    case ParamKind::kInteger:
      line += "<INT>,<min_value>:" + format_integer(p.lo()) +
              ",<max_value>:" + format_integer(p.hi()) + ",<linear-scale>";
      break;
    case ParamKind::kCategorical: {
      line += "<CATEGORICAL>,<categories>:[";
      for (int i = 0; i < p.cardinality(); ++i) {
        if (i > 0) line += ", ";
        line += std::to_string(i);
      }
      line += "]";
      break;
    }
  }
  return line;
}

/// One line per parameter in canonical order; lines end with `&` except the
/// last. No trailing newline.
inline std::string encode_space_header(const SearchSpace& space) {
  std::string out;
  const auto order = canonical_order(space);
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (k > 0) out += "&\n";
    out += encode_parameter_header(space[order[k]]);
  }
  return out;
}

// JSON: {"id": str, "parameters": [{"name", "kind", "lo", "hi",
// "cardinality"}]}

inline nlohmann::json to_json(const ParameterDomain& p) {
  nlohmann::json j = {{"name", p.name()}, {"kind", to_string(p.kind())}};
  if (p.is_categorical()) {
    j["cardinality"] = p.cardinality();
  } else if (p.kind() == ParamKind::kInteger) {
    j["lo"] = static_cast<long long>(p.lo());
    j["hi"] = static_cast<long long>(p.hi());
  } else {
    j["lo"] = p.lo();
    j["hi"] = p.hi();
  }
  return j;
}

inline ParameterDomain parameter_from_json(const nlohmann::json& j) {
  try {
    const auto name = j.at("name").get<std::string>();
    const auto kind = parse_param_kind(j.at("kind").get<std::string>());
    switch (kind) {
      case ParamKind::kUniform:
        return ParameterDomain::uniform(name, j.at("lo").get<double>(),
                                        j.at("hi").get<double>());
      case ParamKind::kLogUniform:
        return ParameterDomain::log_uniform(name, j.at("lo").get<double>(),
                                            j.at("hi").get<double>());
      case ParamKind::kInteger: {
        const double lo = j.at("lo").get<double>();
        const double hi = j.at("hi").get<double>();
        if (lo != std::floor(lo) || hi != std::floor(hi)) {
          throw DomainError("parameter '" + name +
                            "': integer bounds must be integers");
        }
        return ParameterDomain::integer(name, static_cast<long>(lo),
                                        static_cast<long>(hi));
      }
      case ParamKind::kCategorical:
        return ParameterDomain::categorical(name,
                                            j.at("cardinality").get<int>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid parameter JSON: ") + e.what(), 0);
  }
  throw ParseError("invalid parameter JSON", 0);
}

inline nlohmann::json to_json(const SearchSpace& space) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : space.parameters()) params.push_back(to_json(p));
  return {{"id", space.id()}, {"parameters", std::move(params)}};
}

inline SearchSpace space_from_json(const nlohmann::json& j) {
  try {
    std::vector<ParameterDomain> params;
    for (const auto& p : j.at("parameters")) {
      params.push_back(parameter_from_json(p));
    }
    return SearchSpace(j.at("id").get<std::string>(), std::move(params));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid search space JSON: ") + e.what(), 0);
  }
}

/// Configuration as a {name: value} object. Integer and categorical values
/// are written as JSON integers.
inline nlohmann::json config_to_json(const SearchSpace& space,
                                     const Configuration& c) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < space.dimension(); ++i) {
    if (space[i].kind() == ParamKind::kUniform ||
        space[i].kind() == ParamKind::kLogUniform) {
      j[space[i].name()] = c[i];
    } else {
      j[space[i].name()] = static_cast<long long>(c[i]);
    }
  }
  return j;
}

inline Configuration config_from_json(const SearchSpace& space,
                                      const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("configuration must be an object", 0);
  if (j.size() != space.dimension()) {
    throw DomainError("configuration has " + std::to_string(j.size()) +
                      " entries, expected " +
                      std::to_string(space.dimension()));
  }
  Configuration c;
  for (const auto& p : space.parameters()) {
    auto it = j.find(p.name());
    if (it == j.end() || !it->is_number()) {
      throw DomainError("configuration lacks numeric value for '" + p.name() +
                        "'");
    }
    c.values.push_back(it->get<double>());
  }
  space.validate(c);
  return c;
}

}  // namespace bbo
