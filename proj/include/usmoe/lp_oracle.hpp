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

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "usmoe/numerics.hpp"
#include "usmoe/routing.hpp"

namespace usmoe {

// Largest instance (T*N entries) the exhaustive solver accepts.
inline constexpr std::size_t kMaxEnumerationEntries = 24;

// Tolerance for treating two objectives as the same optimum.
inline constexpr double kObjectiveTolerance = 1e-12;

struct OracleResult {
  std::vector<std::uint8_t> optimal_mask;  // row-major T x N
  double optimal_objective = 0.0;
  std::size_t num_masks_enumerated = 0;
  std::size_t num_optima = 0;
  bool exact_count = false;  // true when only |mask| == min(c, T*N) was enumerated
};

namespace detail {

// Depth-first walk over masks in lexicographic order (0 before 1 at each
// position). `visit` receives the running objective at each leaf.
class MaskEnumerator {
 public:
  MaskEnumerator(std::span<const double> s, std::size_t lo, std::size_t hi)
      : s_(s), lo_(lo), hi_(hi), mask_(s.size(), 0) {}

  template <typename Visit>
  void run(Visit&& visit) {
    walk(0, 0, 0.0, visit);
  }

  const std::vector<std::uint8_t>& mask() const { return mask_; }

 private:
  template <typename Visit>
  void walk(std::size_t pos, std::size_t count, double sum, Visit& visit) {
    if (pos == s_.size()) {
      visit(sum);
      return;
    }
    const std::size_t remaining = s_.size() - pos;
    if (count + remaining - 1 >= lo_) walk(pos + 1, count, sum, visit);
    if (count + 1 <= hi_) {
      mask_[pos] = 1;
      walk(pos + 1, count + 1, sum + s_[pos], visit);
      mask_[pos] = 0;
    }
  }

  std::span<const double> s_;
  std::size_t lo_;
  std::size_t hi_;
  std::vector<std::uint8_t> mask_;
};

}  // namespace detail

// Exhaustive maximizer of <S, X> subject to sum(X) <= c, X binary. With
// strictly positive scores only masks of exactly min(c, T*N) entries can be
// optimal, so only those are enumerated.
inline OracleResult solve_exact(const Matrix& scores, std::size_t c) {
  const std::size_t n = scores.size();
  if (n > kMaxEnumerationEntries) {
    throw std::invalid_argument("solve_exact: " + std::to_string(n) + " entries exceed the " +
                                std::to_string(kMaxEnumerationEntries) +
                                "-entry enumeration bound; use satisfies_topk_certificate on the "
                                "greedy top-c plan instead");
  }
  if (c > n) throw std::invalid_argument("solve_exact: c exceeds T*N");
  if (!scores.all_finite()) throw std::invalid_argument("solve_exact: non-finite score");

  const bool all_positive =
      std::all_of(scores.data().begin(), scores.data().end(), [](double v) { return v > 0.0; });
  const std::size_t hi = std::min(c, n);
  const std::size_t lo = all_positive ? hi : 0;

  OracleResult res;
  res.exact_count = all_positive;

  // Pass 1: the maximum.
  double best = -std::numeric_limits<double>::infinity();
  {
    detail::MaskEnumerator e(scores.data(), lo, hi);
    e.run([&](double sum) {
      ++res.num_masks_enumerated;
      best = std::max(best, sum);
    });
  }
  // Pass 2: count optima and keep the lexicographically first.
  const double tol = kObjectiveTolerance * std::max(1.0, std::abs(best));
  {
    detail::MaskEnumerator e(scores.data(), lo, hi);
    e.run([&](double sum) {
      if (sum >= best - tol) {
        if (res.num_optima == 0) res.optimal_mask = e.mask();
        ++res.num_optima;
      }
    });
  }
  res.optimal_objective = 0.0;
  for (std::size_t f = 0; f < n; ++f)
    if (res.optimal_mask[f]) res.optimal_objective += scores.data()[f];
  return res;
}

// Global top-c attains the exhaustive optimum.
inline bool verify_proposition(const Matrix& scores, std::size_t c) {
  const OracleResult oracle = solve_exact(scores, c);
  const RoutingPlan plan = route_usmoe(CompatibilityMatrix{scores, Basis::raw_logits}, c);
  const double tol = kObjectiveTolerance * std::max(1.0, std::abs(oracle.optimal_objective));
  return std::abs(plan.objective(scores) - oracle.optimal_objective) <= tol;
}

struct MechanismGap {
  double m_tc = 0.0;
  double m_ec = 0.0;
  double m_usmoe = 0.0;

  bool holds() const { return m_usmoe >= m_tc && m_usmoe >= m_ec; }
};

// Objectives of the three mechanisms on the same raw scores with c pairs:
// token choice k = c/T, expert choice cap = c/N, unified top-c.
inline MechanismGap verify_mechanism_gap(const Matrix& scores, std::size_t c) {
  const std::size_t T = scores.rows();
  const std::size_t N = scores.cols();
  if (c == 0 || c % T != 0 || c % N != 0 || c > T * N) {
    throw std::invalid_argument("verify_mechanism_gap: c=" + std::to_string(c) +
                                " must be a positive multiple of T and N not exceeding T*N");
  }
  const CompatibilityMatrix raw{scores, Basis::raw_logits};
  MechanismGap gap;
  gap.m_tc = route_token_choice(raw, c / T).objective(scores);
  gap.m_ec = route_expert_choice(raw, c / N).objective(scores);
  gap.m_usmoe = route_usmoe(raw, c).objective(scores);
  return gap;
}

}  // namespace usmoe
