// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "bbo/space.hpp"
#include "test_util.hpp"

namespace {

using bbo::Configuration;
using bbo::ParameterDomain;
using bbo::SearchSpace;

SearchSpace mixed_space() {
  return SearchSpace("mixed", {ParameterDomain::log_uniform("a", 0.01, 1.0),
                             ParameterDomain::integer("b", 1, 5),
                             ParameterDomain::categorical("c", 2)});
}

TEST(Space, DrawFromUnitExamples) {
  EXPECT_NEAR(bbo::draw_from_unit(ParameterDomain::log_uniform("a", 0.01, 1.0), 0.5),
              0.1, 1e-12);
  const auto cat = ParameterDomain::categorical("c", 2);
  EXPECT_EQ(bbo::draw_from_unit(cat, 0.0), 0.0);
  EXPECT_EQ(bbo::draw_from_unit(cat, 0.4999), 0.0);
  EXPECT_EQ(bbo::draw_from_unit(cat, 0.5), 1.0);
  EXPECT_EQ(bbo::draw_from_unit(ParameterDomain::integer("i", 1, 5),
                                std::nextafter(1.0, 0.0)),
            5.0);
}

TEST(Space, ToUnitExamples) {
  EXPECT_NEAR(bbo::to_unit(ParameterDomain::log_uniform("a", 0.01, 1.0), 0.1), 0.5, 1e-12);
  const auto u = ParameterDomain::uniform("u", 1, 5);
  EXPECT_EQ(bbo::to_unit(u, 1.0), 0.0);
  EXPECT_EQ(bbo::to_unit(u, 3.0), 0.5);
  EXPECT_THROW(bbo::to_unit(u, 5.5), bbo::DomainError);
  EXPECT_EQ(bbo::to_unit(ParameterDomain::integer("i", 3, 3), 3.0), 0.0);
  EXPECT_EQ(bbo::to_unit(ParameterDomain::categorical("c", 4), 2.0), 2.0);
}

TEST(Space, FromUnitExamples) {
  EXPECT_EQ(bbo::from_unit(ParameterDomain::uniform("u", 1, 5), 0.5), 3.0);
  EXPECT_EQ(bbo::from_unit(ParameterDomain::integer("i", 1, 5), 0.49), 3.0);
  EXPECT_THROW(bbo::from_unit(ParameterDomain::uniform("u", 1, 5), 1.5), bbo::DomainError);
  EXPECT_THROW(bbo::from_unit(ParameterDomain::categorical("c", 2), 2.0), bbo::DomainError);
}

TEST(Space, RoundTripOnRandomSpaces) {
  bbo::Rng rng(3);
  for (std::size_t s = 0; s < 200; ++s) {
    const auto space = bbo::testing::random_space(rng, s);
    for (int k = 0; k < 20; ++k) {
      const auto c = bbo::sample_uniform(space, rng);
      ASSERT_TRUE(space.contains(c));
      const auto back = bbo::from_unit(space, bbo::to_unit(space, c));
      for (std::size_t i = 0; i < space.dimension(); ++i) {
        if (space[i].kind() == bbo::ParamKind::kLogUniform ||
            space[i].kind() == bbo::ParamKind::kUniform) {
          EXPECT_NEAR(back[i], c[i], 1e-12 * (1 + std::abs(c[i])));
        } else {
          EXPECT_EQ(back[i], c[i]);
        }
      }
    }
  }
}

TEST(Space, LogUniformPassesKolmogorovSmirnov) {
  const auto p = ParameterDomain::log_uniform("a", 1e-4, 10.0);
  SearchSpace space("ks", {p});
  bbo::Rng rng(17);
  const int n = 10000;
  std::vector<double> z;
  for (int i = 0; i < n; ++i) {
    const double v = bbo::sample_uniform(space, rng)[0];
    z.push_back((std::log(v) - std::log(1e-4)) / (std::log(10.0) - std::log(1e-4)));
  }
  std::sort(z.begin(), z.end());
  double d = 0;
  for (int i = 0; i < n; ++i) {
    d = std::max({d, (i + 1.0) / n - z[i], z[i] - static_cast<double>(i) / n});
  }
  EXPECT_LT(d, 1.6276 / std::sqrt(static_cast<double>(n)));  // alpha = 0.01
}

TEST(Space, IntegerAndCategoricalEqualMass) {
  SearchSpace space("m", {ParameterDomain::integer("i", 1, 5),
                          ParameterDomain::categorical("c", 3)});
  bbo::Rng rng(5);
  std::vector<int> ci(5), cc(3);
  const int n = 30000;
  for (int k = 0; k < n; ++k) {
    auto c = bbo::sample_uniform(space, rng);
    ci[static_cast<int>(c[0]) - 1]++;
    cc[static_cast<int>(c[1])]++;
  }
  for (int v : ci) EXPECT_NEAR(v, n / 5.0, 4 * std::sqrt(n * 0.2 * 0.8));
  for (int v : cc) EXPECT_NEAR(v, n / 3.0, 4 * std::sqrt(n * (1 / 3.0) * (2 / 3.0)));
}

TEST(Space, CanonicalOrder) {
  EXPECT_EQ(bbo::canonical_order(mixed_space()), (std::vector<std::size_t>{0, 1, 2}));
  SearchSpace cn("cn", {ParameterDomain::categorical("c", 2), ParameterDomain::uniform("x", 0, 1)});
  EXPECT_EQ(bbo::canonical_order(cn), (std::vector<std::size_t>{1, 0}));
  SearchSpace cc("cc", {ParameterDomain::categorical("c", 2), ParameterDomain::categorical("d", 3)});
  EXPECT_EQ(bbo::canonical_order(cc), (std::vector<std::size_t>{0, 1}));

  bbo::Rng rng(8);
  for (std::size_t s = 0; s < 100; ++s) {
    const auto space = bbo::testing::random_space(rng, s);
    auto order = bbo::canonical_order(space);
    auto sorted = order;
    std::sort(sorted.begin(), sorted.end());
    std::vector<std::size_t> iota(space.dimension());
    std::iota(iota.begin(), iota.end(), 0);
    EXPECT_EQ(sorted, iota);
    bool seen_cat = false;
    for (auto i : order) {
      if (space[i].is_categorical()) seen_cat = true;
      else EXPECT_FALSE(seen_cat);
    }
    // applying the order to a reordered space is the identity
    std::vector<ParameterDomain> ps;
    for (auto i : order) ps.push_back(space[i]);
    std::vector<std::size_t> id(space.dimension());
    std::iota(id.begin(), id.end(), 0);
    EXPECT_EQ(bbo::canonical_order(SearchSpace("r", ps)), id);
  }
}

TEST(Space, HeaderLayout) {
  EXPECT_EQ(bbo::encode_space_header(mixed_space()),
            "<type>:<UNI>,<min_value>:0.01,<max_value>:1.0,<log-scale>&\n"
            "<type>:<INT>,<min_value>:1,<max_value>:5,<linear-scale>&\n"
            "<type>:<CATEGORICAL>,<categories>:[0, 1]");
  EXPECT_EQ(bbo::encode_parameter_header(ParameterDomain::uniform("u", 0, 1)),
            "<type>:<UNI>,<min_value>:0.0,<max_value>:1.0,<linear-scale>");
  EXPECT_EQ(bbo::encode_parameter_header(ParameterDomain::categorical("c", 2)),
            "<type>:<CATEGORICAL>,<categories>:[0, 1]");
}

TEST(Space, FormatReal) {
  EXPECT_EQ(bbo::format_real(0.1), "0.1");
  EXPECT_EQ(bbo::format_real(-5.0), "-5.0");
  EXPECT_EQ(bbo::format_real(1e-7), "1e-07");
  EXPECT_EQ(std::stod(bbo::format_real(0.1 + 0.2)), 0.1 + 0.2);
}

TEST(Space, Validation) {
  EXPECT_THROW(ParameterDomain::uniform("u", 1, 1), bbo::DomainError);
  EXPECT_THROW(ParameterDomain::log_uniform("l", 0, 1), bbo::DomainError);
  EXPECT_THROW(ParameterDomain::categorical("c", 0), bbo::DomainError);
  EXPECT_THROW(SearchSpace("e", {}), bbo::DomainError);
  EXPECT_THROW(SearchSpace("d", {ParameterDomain::uniform("x", 0, 1),
                                 ParameterDomain::uniform("x", 0, 2)}),
               bbo::DomainError);
  const auto s = mixed_space();
  EXPECT_TRUE(s.contains(Configuration{{0.5, 3, 1}}));
  EXPECT_FALSE(s.contains(Configuration{{0.5, 3.5, 1}}));
  EXPECT_FALSE(s.contains(Configuration{{0.5, 3, 2}}));
  EXPECT_FALSE(s.contains(Configuration{{0.5, 3}}));
}

TEST(Space, JsonRoundTrip) {
  bbo::Rng rng(4);
  for (std::size_t k = 0; k < 50; ++k) {
    const auto s = bbo::testing::random_space(rng, k);
    const auto back = bbo::space_from_json(nlohmann::json::parse(bbo::to_json(s).dump()));
    EXPECT_EQ(back, s);
    const auto c = bbo::sample_uniform(s, rng);
    EXPECT_EQ(bbo::config_from_json(s, bbo::config_to_json(s, c)), c);
  }
  const auto j = bbo::to_json(mixed_space());
  EXPECT_EQ(j.at("id"), "mixed");
  EXPECT_EQ(j.at("parameters")[0].at("kind"), "log-uniform");
  EXPECT_EQ(j.at("parameters")[2].at("cardinality"), 2);
}

}  // namespace
