// Copyright 2026 The usmoe-lab Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <set>

#include "oracles.hpp"
#include "usmoe/routing.hpp"

namespace usmoe {
namespace {

CompatibilityMatrix scored(std::initializer_list<std::initializer_list<double>> rows,
                           Basis b = Basis::unified) {
  return {Matrix::from_rows(rows), b};
}

std::vector<std::vector<int>> mask_rows(const RoutingPlan& p) {
  std::vector<std::vector<int>> out(p.tokens, std::vector<int>(p.experts));
  for (std::size_t i = 0; i < p.tokens; ++i)
    for (std::size_t j = 0; j < p.experts; ++j) out[i][j] = p.selected(i, j);
  return out;
}

using Rows = std::vector<std::vector<int>>;

TEST(TopK, TieResolvesTowardSmallerIndex) {
  const std::vector<double> v{1, 3, 3, 2, 3};
  EXPECT_EQ(top_k_indices(v, 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(top_k_indices(v, 4), (std::vector<std::size_t>{1, 2, 4, 3}));
}

TEST(TokenChoice, RowArgmax) {
  const auto p = route_token_choice(scored({{0.9, 0.1}, {0.4, 0.8}}, Basis::softmax_rows), 1);
  EXPECT_EQ(mask_rows(p), (Rows{{1, 0}, {0, 1}}));
  EXPECT_EQ(p.gates(0, 0), 0.9);
  EXPECT_EQ(p.gates(0, 1), 0.0);
}

TEST(TokenChoice, FullSelection) {
  const auto p = route_token_choice(scored({{0.2, 0.5, 0.3}, {0.1, 0.1, 0.8}}), 3);
  EXPECT_EQ(mask_rows(p), (Rows{{1, 1, 1}, {1, 1, 1}}));
}

TEST(TokenChoice, MatchesSortOracle) {
  Rng rng(12);
  for (int rep = 0; rep < 50; ++rep) {
    const CompatibilityMatrix s{random_normal(5, 4, rng), Basis::softmax_rows};
    const auto p = route_token_choice(s, 2);
    for (std::size_t i = 0; i < 5; ++i) {
      std::vector<std::size_t> got;
      for (std::size_t j = 0; j < 4; ++j)
        if (p.selected(i, j)) got.push_back(j);
      const std::vector<double> row(s.scores.row(i).begin(), s.scores.row(i).end());
      EXPECT_EQ(got, oracle::sorted_top_k(row, 2));
    }
  }
}

TEST(TokenChoice, RejectsInvalidK) {
  const auto s = scored({{0.1, 0.2}});
  EXPECT_THROW(route_token_choice(s, 0), std::invalid_argument);
  EXPECT_THROW(route_token_choice(s, 3), std::invalid_argument);
}

TEST(ExpertChoice, DropsTokenOnHandInstance) {
  const auto p = route_expert_choice(scored({{0.9, 0.8}, {0.2, 0.1}}, Basis::sigmoid), 1);
  EXPECT_EQ(mask_rows(p), (Rows{{1, 1}, {0, 0}}));
  EXPECT_EQ(p.row_count(1), 0u);
}

TEST(ExpertChoice, FullCapacity) {
  const auto p = route_expert_choice(scored({{0.9, 0.8}, {0.2, 0.1}, {0.5, 0.5}}), 3);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(p.row_count(i), 2u);
}

TEST(ExpertChoice, SequenceScopeIsolatesSequences) {
  Rng rng(4);
  Matrix m = random_normal(8, 3, rng);
  const CompatibilityMatrix s{m, Basis::sigmoid};
  const auto p = route_expert_choice(s, 2, Scope::sequence, 2);
  // Perturbing sequence 1 must not change sequence 0.
  for (std::size_t f = 4 * 3; f < m.size(); ++f) m.data()[f] += 100.0;
  const auto q = route_expert_choice({m, Basis::sigmoid}, 2, Scope::sequence, 2);
  for (std::size_t f = 0; f < 4 * 3; ++f) EXPECT_EQ(p.mask[f], q.mask[f]);
  for (std::size_t j = 0; j < 3; ++j) {
    std::size_t a = 0, b = 0;
    for (std::size_t t = 0; t < 4; ++t) {
      a += p.selected(t, j);
      b += p.selected(4 + t, j);
    }
    EXPECT_EQ(a, 2u);
    EXPECT_EQ(b, 2u);
  }
}

TEST(ExpertChoice, BatchScopePoolsCapacity) {
  // Sequence 0 holds every high score; batch scope lets it take all slots.
  const auto s = scored({{9, 9}, {8, 8}, {1, 1}, {0, 0}});
  const auto p = route_expert_choice(s, 1, Scope::batch, 2);
  EXPECT_EQ(mask_rows(p), (Rows{{1, 1}, {1, 1}, {0, 0}, {0, 0}}));
  const auto q = route_expert_choice(s, 1, Scope::sequence, 2);
  EXPECT_EQ(mask_rows(q), (Rows{{1, 1}, {0, 0}, {1, 1}, {0, 0}}));
}

TEST(Usmoe, TwoByTwoExample) {
  const auto s = scored({{0.9, 0.8}, {0.2, 0.1}});
  const auto p = route_usmoe(s, 2);
  EXPECT_EQ(mask_rows(p), (Rows{{1, 1}, {0, 0}}));
  EXPECT_NEAR(p.objective(s.scores), 1.7, 1e-15);
  const auto tc = route_token_choice(s, 1);
  EXPECT_NEAR(tc.objective(s.scores), 1.1, 1e-15);
  EXPECT_NEAR(oracle::brute_force(s.scores, 2).best, 1.7, 1e-15);
}

TEST(Usmoe, ThreeByTwoExample) {
  const auto s = scored({{0.9, 0.1}, {0.4, 0.8}, {0.7, 0.2}});
  const auto p = route_usmoe(s, 3);
  EXPECT_EQ(p.selected_flat(), (std::vector<std::size_t>{0, 3, 4}));
  EXPECT_NEAR(p.objective(s.scores), 2.4, 1e-15);
  EXPECT_NEAR(oracle::brute_force(s.scores, 3).best, 2.4, 1e-15);
  EXPECT_EQ(p.budget_used, 3u);
}

TEST(Usmoe, FullBudget) {
  const auto p = route_usmoe(scored({{0.1, 0.2}, {0.3, 0.4}}), 4);
  EXPECT_EQ(mask_rows(p), (Rows{{1, 1}, {1, 1}}));
}

TEST(Usmoe, BudgetClampsAtMatrixSize) {
  const auto p = route_usmoe(scored({{0.1, 0.2}}), 10);
  EXPECT_EQ(p.budget_used, 2u);
}

TEST(Usmoe, FractionalBudgetSelectsRoundedCount) {
  Rng rng(21);
  const CompatibilityMatrix s{random_uniform(16, 4, rng), Basis::unified};
  EXPECT_EQ(route_usmoe(s, RoutingBudget::fractional(1.5)).budget_used, 24u);
  const CompatibilityMatrix s5{random_uniform(5, 4, rng), Basis::unified};
  // 1.5 * 5 = 7.5 rounds half up.
  EXPECT_EQ(route_usmoe(s5, RoutingBudget::fractional(1.5)).budget_used, 8u);
}

TEST(Usmoe, BatchScopeTakesGlobalTopAcrossSequences) {
  const auto s = scored({{9, 8}, {7, 6}, {1, 2}, {0, 3}});
  const auto p = route_usmoe(s, 2, Scope::batch, 2);
  EXPECT_EQ(p.selected_flat(), (std::vector<std::size_t>{0, 1, 2, 3}));
  const auto q = route_usmoe(s, 2, Scope::sequence, 2);
  EXPECT_EQ(q.selected_flat(), (std::vector<std::size_t>{0, 1, 5, 7}));
}

TEST(Usmoe, CertificateHoldsOnRandomInstances) {
  Rng rng(5);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t T = rng.uniform_int(1, 8), N = rng.uniform_int(1, 6);
    const CompatibilityMatrix s{random_normal(T, N, rng), Basis::unified};
    const std::size_t c = rng.uniform_int(0, int(T * N));
    const auto p = route_usmoe(s, c);
    EXPECT_TRUE(satisfies_topk_certificate(p, s.scores));
    EXPECT_EQ(p.budget_used, c);
  }
}

TEST(Certificate, DetectsViolation) {
  const auto s = scored({{0.9, 0.1}});
  RoutingPlan p(1, 2, Mode::usmoe, Scope::sequence, 1);
  p.select(1, 0.1);
  EXPECT_FALSE(satisfies_topk_certificate(p, s.scores));
}

TEST(Route, DerivesPerTokenAndPerExpertBudgets) {
  Rng rng(6);
  const CompatibilityMatrix s{random_uniform(4, 2, rng), Basis::unified};
  const auto tc = route(Mode::token_choice, s, RoutingBudget::global_pairs(4));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(tc.row_count(i), 1u);
  const auto ec = route(Mode::expert_choice, s, RoutingBudget::global_pairs(4));
  EXPECT_EQ(ec.budget_used, 4u);
  const auto us = route(Mode::usmoe, s, RoutingBudget::per_token(1));
  EXPECT_EQ(us.budget_used, 4u);
}

TEST(Budget, ParseAndPrint) {
  EXPECT_EQ(RoutingBudget::parse("3"), RoutingBudget::global_pairs(3));
  EXPECT_EQ(RoutingBudget::parse("1.5x"), RoutingBudget::fractional(1.5));
  EXPECT_EQ(RoutingBudget::parse("1.5x").to_string(), "1.5x");
  EXPECT_EQ(RoutingBudget::per_token(2).pairs_per_sequence(16, 4), 32u);
  EXPECT_EQ(RoutingBudget::per_expert(3).pairs_per_sequence(16, 4), 12u);
  EXPECT_THROW(RoutingBudget::parse("abc"), std::invalid_argument);
  EXPECT_THROW(RoutingBudget::parse("-1"), std::invalid_argument);
}

TEST(Modes, ParseNames) {
  EXPECT_EQ(parse_mode("tc"), Mode::token_choice);
  EXPECT_EQ(parse_mode("expert_choice"), Mode::expert_choice);
  EXPECT_EQ(parse_mode("usmoe"), Mode::usmoe);
  EXPECT_THROW(parse_mode("soft"), std::invalid_argument);
  EXPECT_EQ(parse_scope("batch"), Scope::batch);
}

TEST(Dominance, FullBudgetProfilesCoincide) {
  const auto p = dominance_profile({Matrix::from_rows({{1, 2}, {3, 4}}), Basis::raw_logits}, 4);
  EXPECT_EQ(p.token_choice, p.usmoe);
  EXPECT_EQ(p.expert_choice, p.usmoe);
}

TEST(Dominance, HandInstances) {
  auto p = dominance_profile({Matrix::from_rows({{5, 1}, {2, 4}}), Basis::raw_logits}, 2);
  EXPECT_EQ(p.token_choice, (std::vector<double>{4, 5}));
  EXPECT_EQ(p.expert_choice, (std::vector<double>{4, 5}));
  EXPECT_EQ(p.usmoe, (std::vector<double>{4, 5}));
  p = dominance_profile({Matrix::from_rows({{5, 4}, {1, 2}}), Basis::raw_logits}, 2);
  EXPECT_EQ(p.token_choice, (std::vector<double>{2, 5}));
  EXPECT_EQ(p.usmoe, (std::vector<double>{4, 5}));
  EXPECT_TRUE(p.dominates());
}

TEST(Dominance, RejectsBudgetNotMultipleOfShape) {
  EXPECT_THROW(dominance_profile({Matrix::from_rows({{5, 1}, {2, 4}}), Basis::raw_logits}, 3),
               std::invalid_argument);
}

}  // namespace
}  // namespace usmoe
