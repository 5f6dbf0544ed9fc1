// Copyright 2026 The bbo-forge Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "bbo/codec.hpp"
#include "test_util.hpp"

namespace {

using bbo::Configuration;
using bbo::ParameterDomain;
using bbo::QuantizationConfig;
using bbo::SearchSpace;
using bbo::Trajectory;

SearchSpace mixed_space() {
  return SearchSpace("mixed", {ParameterDomain::log_uniform("a", 0.01, 1.0),
                             ParameterDomain::integer("b", 1, 5),
                             ParameterDomain::categorical("c", 2)});
}

Trajectory random_trajectory(bbo::Rng& rng, const SearchSpace& space, std::size_t n) {
  Trajectory t{"task", space, "RS", 0, {}};
  for (std::size_t i = 0; i < n; ++i) t.trials.push_back({bbo::sample_uniform(space, rng), rng.uniform(-5, 5)});
  return t;
}

TEST(Codec, Quantize) {
  EXPECT_EQ(bbo::quantize(0.0), 0);
  EXPECT_EQ(bbo::quantize(1.0), 999);
  EXPECT_EQ(bbo::quantize(0.5), 500);
  EXPECT_THROW(bbo::quantize(1.01), bbo::DomainError);
  EXPECT_THROW(bbo::quantize(std::nan("")), bbo::DomainError);
  EXPECT_THROW(QuantizationConfig(1), bbo::DomainError);
  EXPECT_EQ(bbo::quantize(0.5, QuantizationConfig(3)), 1);
}

TEST(Codec, Dequantize) {
  EXPECT_EQ(bbo::dequantize(0), 0.0);
  EXPECT_EQ(bbo::dequantize(999), 1.0);
  EXPECT_DOUBLE_EQ(bbo::dequantize(500), 500.0 / 999.0);
  EXPECT_THROW(bbo::dequantize(1000), bbo::DomainError);
  bbo::Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = rng.uniform();
    EXPECT_LE(std::abs(bbo::dequantize(bbo::quantize(u)) - u), 1.0 / (2 * 999) + 1e-15);
  }
}

TEST(Codec, ScaleObjectives) {
  EXPECT_EQ(bbo::scale_objectives({5.0, 1.0}), (std::vector<double>{1.0, 0.0}));
  EXPECT_EQ(bbo::scale_objectives({2.0, 2.0}), (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(bbo::scale_objectives({1, 2, 3}), (std::vector<double>{0.0, 0.5, 1.0}));
  EXPECT_THROW(bbo::scale_objectives({}), bbo::DomainError);
}

TEST(Codec, MixedSpaceShape) {
  Trajectory t{"task", mixed_space(), "RS", 0,
               {{Configuration{{0.1, 2, 1}}, 3.0}, {Configuration{{0.01, 5, 0}}, 1.0}}};
  const auto e = bbo::encode_trajectory(t);
  EXPECT_EQ(e.text,
            "<algorithm>:RS\n"
            "<type>:<UNI>,<min_value>:0.01,<max_value>:1.0,<log-scale>&\n"
            "<type>:<INT>,<min_value>:1,<max_value>:5,<linear-scale>&\n"
            "<type>:<CATEGORICAL>,<categories>:[0, 1]\n"
            "500,250,<1>*999|0,999,<0>*0|");
  EXPECT_EQ(e.trials, 2u);
  EXPECT_EQ(bbo::split_trials(bbo::trial_stream(e.text, t.space)).size(), 2u);
}

TEST(Codec, ObjectiveTokens) {
  Trajectory one{"task", mixed_space(), "RS", 0, {{Configuration{{0.1, 2, 1}}, 7.0}}};
  EXPECT_TRUE(bbo::encode_trials(one.space, one.trials).ends_with("*0|"));
  bbo::Rng rng(2);
  for (int k = 0; k < 50; ++k) {
    const auto t = random_trajectory(rng, mixed_space(), 2 + rng.below(30));
    const auto trials = bbo::testing::owned_trials(bbo::encode_trials(t.space, t.trials));
    std::vector<int> tok;
    for (auto s : trials) {
      tok.push_back(std::stoi(std::string(s.substr(s.find('*') + 1))));
    }
    for (std::size_t a = 0; a < tok.size(); ++a) {
      for (std::size_t b = 0; b < tok.size(); ++b) {
        if (t.trials[a].objective < t.trials[b].objective) {
          EXPECT_LE(tok[a], tok[b]);
        }
      }
    }
    EXPECT_EQ(*std::min_element(tok.begin(), tok.end()), 0);
    EXPECT_EQ(*std::max_element(tok.begin(), tok.end()), 999);
  }
}

TEST(Codec, DecodeExamples) {
  const auto d = bbo::decode_trial(mixed_space(), {}, "0,0,<0>*0|");
  EXPECT_DOUBLE_EQ(d.config[0], 0.01);
  EXPECT_EQ(d.config[1], 1.0);
  EXPECT_EQ(d.config[2], 0.0);
  EXPECT_EQ(d.scaled_objective, 0.0);
  EXPECT_EQ(bbo::decode_trial(mixed_space(), {}, "0,0,<1>*0|").config[2], 1.0);

  for (const char* bad : {"1200,0,<0>*0|", "0,0,<5>*0|", "00,0,<0>*0|", "0,0,<0>*0",
                          "0,0,0*0|", "0,0,<0>0|", "0,0,<0>*1000|", "0,0,<0>*|", ""}) {
    EXPECT_THROW(bbo::decode_trial(mixed_space(), {}, bad), bbo::ParseError) << bad;
  }
  try {
    bbo::decode_trial(mixed_space(), {}, "0,1200,<0>*0|");
    FAIL();
  } catch (const bbo::ParseError& e) {
    EXPECT_EQ(e.offset(), 5u);
  }
}

TEST(Codec, RoundTripOnRandomSpaces) {
  bbo::Rng rng(3);
  for (std::size_t s = 0; s < 100; ++s) {
    const auto space = bbo::testing::random_space(rng, s);
    const auto t = random_trajectory(rng, space, 1 + rng.below(10));
    const auto e = bbo::encode_trajectory(t);
    const auto trials = bbo::split_trials(bbo::trial_stream(e.text, space));
    ASSERT_EQ(trials.size(), t.trials.size());
    const auto scaled = bbo::scale_objectives([&] {
      std::vector<double> ys;
      for (const auto& tr : t.trials) ys.push_back(tr.objective);
      return ys;
    }());
    for (std::size_t i = 0; i < trials.size(); ++i) {
      const auto d = bbo::decode_trial(space, {}, trials[i]);
      for (std::size_t p = 0; p < space.dimension(); ++p) {
        if (space[p].is_categorical()) {
          EXPECT_EQ(d.config[p], t.trials[i].config[p]);
        } else {
          EXPECT_LE(std::abs(bbo::to_unit(space[p], d.config[p]) -
                             bbo::to_unit(space[p], t.trials[i].config[p])),
                    1.0 / (2 * 999) + 1e-12);
        }
      }
      EXPECT_LE(std::abs(d.scaled_objective - scaled[i]), 1.0 / (2 * 999) + 1e-12);
    }
  }
}

TEST(Codec, GrammarRejectExamples) {
  const bbo::TrialGrammar g(mixed_space());
  auto s = g.start();
  auto r = g.advance(s, std::string_view("120"));
  ASSERT_TRUE(r);
  EXPECT_FALSE(g.advance(*r, static_cast<unsigned char>('0')));
  r = g.advance(s, std::string_view("0,0,<"));
  ASSERT_TRUE(r);
  EXPECT_FALSE(g.advance(*r, static_cast<unsigned char>('5')));
  EXPECT_TRUE(g.advance(*r, static_cast<unsigned char>('1')));
  r = g.advance(s, std::string_view("0,0,<1>*"));
  ASSERT_TRUE(r);
  EXPECT_TRUE(g.config_complete(*r));
  r = g.advance(*r, std::string_view("999|"));
  ASSERT_TRUE(r);
  EXPECT_TRUE(g.at_trial_start(*r));
}

// Flips, inserts and deletes bytes of valid trials over the trial alphabet.
std::string mutate(std::string s, bbo::Rng& rng) {
  static const std::string alphabet = "0123456789,*|<>";
  const int edits = 1 + static_cast<int>(rng.below(3));
  for (int e = 0; e < edits; ++e) {
    const auto op = rng.below(3);
    const char c = alphabet[rng.index(alphabet.size())];
    if (op == 0 && !s.empty()) s[rng.index(s.size())] = c;
    else if (op == 1) s.insert(s.begin() + static_cast<std::ptrdiff_t>(rng.index(s.size() + 1)), c);
    else if (!s.empty()) s.erase(rng.index(s.size()), 1);
  }
  return s;
}

TEST(Codec, GrammarAcceptsExactlyDecodableTrials) {
  bbo::Rng rng(4);
  int accepted_mutants = 0, rejected_mutants = 0;
  for (std::size_t s = 0; s < 100; ++s) {
    const auto space = bbo::testing::random_space(rng, s);
    const bbo::TrialGrammar g(space);
    const auto t = random_trajectory(rng, space, 5);
    for (auto trial : bbo::testing::owned_trials(bbo::encode_trials(space, t.trials))) {
      ASSERT_TRUE(g.accepts_trial(trial)) << trial;
      for (int m = 0; m < 20; ++m) {
        const auto mutant = mutate(std::string(trial), rng);
        bool decodes = true;
        try {
          bbo::decode_trial(space, {}, mutant);
        } catch (const bbo::ParseError&) {
          decodes = false;
        }
        EXPECT_EQ(g.accepts_trial(mutant), decodes) << mutant;
        (decodes ? accepted_mutants : rejected_mutants)++;
      }
    }
  }
  EXPECT_GT(accepted_mutants, 0);
  EXPECT_GT(rejected_mutants, 0);
}

TEST(Codec, PermuteAugment) {
  SearchSpace s("p", {ParameterDomain::categorical("c", 3), ParameterDomain::uniform("x", 0, 1),
                      ParameterDomain::uniform("y", 0, 2)});
  bbo::Rng rng(5);
  const auto t = random_trajectory(rng, s, 6);
  std::set<std::string> headers;
  for (int i = 0; i < 200; ++i) {
    const auto p = bbo::permute_augment(t, rng);
    headers.insert(bbo::encode_space_header(p.space));
    bool seen_cat = false;
    for (const auto& prm : p.space.parameters()) {
      if (prm.is_categorical()) seen_cat = true;
      else EXPECT_FALSE(seen_cat);
    }
    for (std::size_t k = 0; k < t.trials.size(); ++k) {
      EXPECT_EQ(p.trials[k].objective, t.trials[k].objective);
      EXPECT_EQ(p.trials[k].config[p.space.index_of("x")], t.trials[k].config[1]);
      EXPECT_EQ(p.trials[k].config[p.space.index_of("c")], t.trials[k].config[0]);
    }
  }
  EXPECT_EQ(headers.size(), 2u);

  SearchSpace one("o", {ParameterDomain::uniform("x", 0, 1)});
  const auto t1 = random_trajectory(rng, one, 3);
  EXPECT_EQ(bbo::permute_augment(t1, rng), t1);
}

TEST(Codec, PrefixAugment) {
  bbo::Rng rng(6);
  auto t = random_trajectory(rng, mixed_space(), 10);
  EXPECT_EQ(bbo::encode_trajectory(bbo::prefix_augment(t, 10)).text, bbo::encode_trajectory(t).text);
  EXPECT_THROW(bbo::prefix_augment(t, 11), bbo::DomainError);
  EXPECT_THROW(bbo::prefix_augment(t, 0), bbo::DomainError);

  const auto two = bbo::testing::owned_trials(bbo::encode_trials(t.space, bbo::prefix_augment(t, 2).trials));
  std::set<std::string> toks;
  for (auto s : two) toks.insert(std::string(s.substr(s.find('*') + 1, s.size() - s.find('*') - 2)));
  EXPECT_EQ(toks, (std::set<std::string>{"0", "999"}));

  // monotone objectives: the prefix rescales against its own maximum
  for (std::size_t i = 0; i < t.trials.size(); ++i) t.trials[i].objective = static_cast<double>(i);
  const auto p5 = bbo::testing::owned_trials(bbo::encode_trials(t.space, bbo::prefix_augment(t, 5).trials));
  const auto full = bbo::testing::owned_trials(bbo::encode_trials(t.space, t.trials));
  EXPECT_TRUE(p5[4].ends_with("*999|"));
  EXPECT_TRUE(full[4].ends_with("*" + std::to_string(bbo::quantize(4.0 / 9.0)) + "|"));
}

TEST(Codec, AugmentLabels) {
  bbo::Rng rng(7);
  const auto t = random_trajectory(rng, mixed_space(), 20);
  bbo::AugmentConfig cfg;
  const auto out = bbo::augment(t, cfg, rng);
  // orig + perm0, each with prefixes 5 and 10 and itself
  EXPECT_EQ(out.size(), 6u);
  EXPECT_EQ(out[0].label, "orig/prefix5");
  EXPECT_EQ(out[2].label, "orig");
  EXPECT_EQ(out[2].trajectory, t);
}

TEST(Codec, CorpusRoundTrip) {
  bbo::Rng rng(8);
  std::vector<bbo::EncodedTrajectory> recs;
  for (int i = 0; i < 5; ++i) recs.push_back(bbo::encode_trajectory(random_trajectory(rng, mixed_space(), 3)));
  std::stringstream ss;
  bbo::write_corpus(ss, recs);
  const auto back = bbo::read_corpus(ss);
  ASSERT_EQ(back.size(), recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) EXPECT_EQ(back[i], recs[i].text);
  EXPECT_EQ(bbo::corpus_manifest(recs).size(), 5u);
}

}  // namespace
