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
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "usmoe/numerics.hpp"
#include "usmoe/scoring.hpp"

namespace usmoe {

enum class Mode { token_choice, expert_choice, usmoe };
enum class Scope { sequence, batch };

inline const char* to_string(Mode m) {
  switch (m) {
    case Mode::token_choice: return "tc";
    case Mode::expert_choice: return "ec";
    case Mode::usmoe: return "usmoe";
  }
  return "?";
}

inline const char* to_string(Scope s) { return s == Scope::sequence ? "sequence" : "batch"; }

inline Mode parse_mode(const std::string& s) {
  if (s == "tc" || s == "token_choice") return Mode::token_choice;
  if (s == "ec" || s == "expert_choice") return Mode::expert_choice;
  if (s == "usmoe" || s == "unified") return Mode::usmoe;
  throw std::invalid_argument("unknown routing mode '" + s + "'");
}

inline Scope parse_scope(const std::string& s) {
  if (s == "sequence") return Scope::sequence;
  if (s == "batch") return Scope::batch;
  throw std::invalid_argument("unknown scope '" + s + "'");
}

// Computational budget. Every kind resolves to a number of token/expert
// pairs per sequence of T tokens.
class RoutingBudget {
 public:
  enum class Kind { global_pairs, per_token, per_expert, fractional };

  static RoutingBudget global_pairs(std::size_t c) { return {Kind::global_pairs, double(c)}; }
  static RoutingBudget per_token(std::size_t k) { return {Kind::per_token, double(k)}; }
  static RoutingBudget per_expert(std::size_t cap) { return {Kind::per_expert, double(cap)}; }
  static RoutingBudget fractional(double k_frac) {
    if (!(k_frac > 0.0) || !std::isfinite(k_frac)) {
      throw std::invalid_argument("fractional budget must be positive");
    }
    return {Kind::fractional, k_frac};
  }

  // "3" is a global pair count; "1.5x" is k_frac experts per token.
  static RoutingBudget parse(const std::string& text) {
    if (text.empty()) throw std::invalid_argument("empty budget");
    std::size_t used = 0;
    if (text.back() == 'x' || text.back() == 'X') {
      const std::string num = text.substr(0, text.size() - 1);
      double v = 0.0;
      try {
        v = std::stod(num, &used);
      } catch (const std::exception&) {
        throw std::invalid_argument("bad budget '" + text + "'");
      }
      if (used != num.size()) throw std::invalid_argument("bad budget '" + text + "'");
      return fractional(v);
    }
    if (text.find_first_not_of("0123456789") != std::string::npos) {
      throw std::invalid_argument("bad budget '" + text + "'");
    }
    return global_pairs(std::stoull(text));
  }

  Kind kind() const noexcept { return kind_; }
  double value() const noexcept { return value_; }

  // Pairs per sequence, clamped to [0, T*N]. Fractional budgets round half up.
  std::size_t pairs_per_sequence(std::size_t T, std::size_t N) const {
    double c = 0.0;
    switch (kind_) {
      case Kind::global_pairs: c = value_; break;
      case Kind::per_token: c = value_ * double(T); break;
      case Kind::per_expert: c = value_ * double(N); break;
      case Kind::fractional: c = std::floor(value_ * double(T) + 0.5); break;
    }
    return std::min<std::size_t>(static_cast<std::size_t>(c), T * N);
  }

  std::string to_string() const {
    switch (kind_) {
      case Kind::global_pairs: return std::to_string(static_cast<std::size_t>(value_));
      case Kind::per_token: return "k=" + std::to_string(static_cast<std::size_t>(value_));
      case Kind::per_expert: return "cap=" + std::to_string(static_cast<std::size_t>(value_));
      case Kind::fractional: return format_double(value_) + "x";
    }
    return "?";
  }

  friend bool operator==(const RoutingBudget&, const RoutingBudget&) = default;

 private:
  RoutingBudget(Kind k, double v) : kind_(k), value_(v) {}
  Kind kind_;
  double value_;
};

// Binary T x N selection plus the gate value used for each selected pair.
struct RoutingPlan {
  std::size_t tokens = 0;
  std::size_t experts = 0;
  std::vector<std::uint8_t> mask;  // row-major
  Matrix gates;                    // zero where mask is zero
  Mode mode = Mode::usmoe;
  Scope scope = Scope::sequence;
  std::size_t num_sequences = 1;
  std::size_t budget_used = 0;

  RoutingPlan() = default;
  RoutingPlan(std::size_t t, std::size_t n, Mode m, Scope s, std::size_t seqs)
      : tokens(t), experts(n), mask(t * n, 0), gates(t, n), mode(m), scope(s),
        num_sequences(seqs) {}

  bool selected(std::size_t i, std::size_t j) const { return mask[i * experts + j] != 0; }

  void select(std::size_t flat, double gate) {
    if (!mask[flat]) ++budget_used;
    mask[flat] = 1;
    gates.data()[flat] = gate;
  }

  std::size_t row_count(std::size_t i) const {
    return static_cast<std::size_t>(
        std::count(mask.begin() + i * experts, mask.begin() + (i + 1) * experts, 1));
  }

  std::size_t seq_len() const { return tokens / num_sequences; }

  // Sum of `scores` over selected pairs.
  double objective(const Matrix& scores) const {
    double m = 0.0;
    for (std::size_t f = 0; f < mask.size(); ++f)
      if (mask[f]) m += scores.data()[f];
    return m;
  }

  std::vector<std::size_t> selected_flat() const {
    std::vector<std::size_t> out;
    for (std::size_t f = 0; f < mask.size(); ++f)
      if (mask[f]) out.push_back(f);
    return out;
  }
};

// Indices of the k largest values among `candidates`, ordered best first.
// Equal values resolve toward the smaller index.
inline std::vector<std::size_t> top_k_indices(std::span<const double> values,
                                              std::vector<std::size_t> candidates, std::size_t k) {
  k = std::min(k, candidates.size());
  auto better = [&](std::size_t a, std::size_t b) {
    return values[a] > values[b] || (values[a] == values[b] && a < b);
  };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k),
                    candidates.end(), better);
  candidates.resize(k);
  return candidates;
}

inline std::vector<std::size_t> top_k_indices(std::span<const double> values, std::size_t k) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return top_k_indices(values, std::move(idx), k);
}

namespace detail {
inline std::size_t checked_seq_len(const CompatibilityMatrix& s, std::size_t num_sequences,
                                   const char* op) {
  if (num_sequences == 0 || s.tokens() % num_sequences != 0) {
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(s.tokens()) +
                                " rows do not split into " + std::to_string(num_sequences) +
                                " sequences");
  }
  if (!s.scores.all_finite()) throw std::invalid_argument(std::string(op) + ": non-finite score");
  return s.tokens() / num_sequences;
}
}  // namespace detail

// Each token keeps its k best experts. Never drops a token.
inline RoutingPlan route_token_choice(const CompatibilityMatrix& scores, std::size_t k,
                                      std::size_t num_sequences = 1) {
  detail::checked_seq_len(scores, num_sequences, "route_token_choice");
  const std::size_t N = scores.experts();
  if (k < 1 || k > N) {
    throw std::invalid_argument("route_token_choice: k=" + std::to_string(k) +
                                " outside [1, " + std::to_string(N) + "]");
  }
  RoutingPlan plan(scores.tokens(), N, Mode::token_choice, Scope::sequence, num_sequences);
  for (std::size_t i = 0; i < scores.tokens(); ++i) {
    for (std::size_t j : top_k_indices(scores.scores.row(i), k)) {
      plan.select(i * N + j, scores.scores(i, j));
    }
  }
  return plan;
}

// Each expert keeps its `cap` best tokens per sequence. In batch scope the
// pooled capacity cap * num_sequences is filled from all rows jointly.
inline RoutingPlan route_expert_choice(const CompatibilityMatrix& scores, std::size_t cap,
                                       Scope scope = Scope::sequence,
                                       std::size_t num_sequences = 1) {
  const std::size_t T = detail::checked_seq_len(scores, num_sequences, "route_expert_choice");
  const std::size_t N = scores.experts();
  if (cap < 1 || cap > T) {
    throw std::invalid_argument("route_expert_choice: cap=" + std::to_string(cap) +
                                " outside [1, " + std::to_string(T) + "]");
  }
  RoutingPlan plan(scores.tokens(), N, Mode::expert_choice, scope, num_sequences);
  const std::size_t groups = scope == Scope::sequence ? num_sequences : 1;
  const std::size_t rows_per_group = scores.tokens() / groups;
  const std::size_t take = cap * (num_sequences / groups);
  std::vector<std::size_t> cand(rows_per_group);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t j = 0; j < N; ++j) {
      for (std::size_t t = 0; t < rows_per_group; ++t) cand[t] = (g * rows_per_group + t) * N + j;
      for (std::size_t f : top_k_indices(scores.scores.data(), cand, take)) {
        plan.select(f, scores.scores.data()[f]);
      }
    }
  }
  return plan;
}

// Global top-c over the flattened score matrix of each sequence (or of the
// whole batch). Gates are the selected scores, not renormalized.
inline RoutingPlan route_usmoe(const CompatibilityMatrix& scores, const RoutingBudget& budget,
                               Scope scope = Scope::sequence, std::size_t num_sequences = 1) {
  const std::size_t T = detail::checked_seq_len(scores, num_sequences, "route_usmoe");
  const std::size_t N = scores.experts();
  const std::size_t c = budget.pairs_per_sequence(T, N);
  RoutingPlan plan(scores.tokens(), N, Mode::usmoe, scope, num_sequences);
  const std::size_t groups = scope == Scope::sequence ? num_sequences : 1;
  const std::size_t pairs_per_group = scores.tokens() * N / groups;
  const std::size_t take = c * (num_sequences / groups);
  std::vector<std::size_t> cand(pairs_per_group);
  for (std::size_t g = 0; g < groups; ++g) {
    std::iota(cand.begin(), cand.end(), g * pairs_per_group);
    for (std::size_t f : top_k_indices(scores.scores.data(), cand, take)) {
      plan.select(f, scores.scores.data()[f]);
    }
  }
  return plan;
}

inline RoutingPlan route_usmoe(const CompatibilityMatrix& scores, std::size_t c,
                               Scope scope = Scope::sequence, std::size_t num_sequences = 1) {
  return route_usmoe(scores, RoutingBudget::global_pairs(c), scope, num_sequences);
}

// General routing function: the budget resolves to c pairs per sequence,
// token choice takes floor(c/T) experts per token and expert choice takes
// floor(c/N) tokens per expert.
inline RoutingPlan route(Mode mode, const CompatibilityMatrix& scores, const RoutingBudget& budget,
                         Scope scope = Scope::sequence, std::size_t num_sequences = 1) {
  const std::size_t T = detail::checked_seq_len(scores, num_sequences, "route");
  const std::size_t N = scores.experts();
  const std::size_t c = budget.pairs_per_sequence(T, N);
  switch (mode) {
    case Mode::token_choice: return route_token_choice(scores, c / T, num_sequences);
    case Mode::expert_choice: return route_expert_choice(scores, c / N, scope, num_sequences);
    case Mode::usmoe: return route_usmoe(scores, budget, scope, num_sequences);
  }
  throw std::invalid_argument("route: unknown mode");
}

// True when, within every selection group of the plan, the smallest selected
// score is >= the largest unselected score.
inline bool satisfies_topk_certificate(const RoutingPlan& plan, const Matrix& scores) {
  const std::size_t groups = plan.scope == Scope::sequence ? plan.num_sequences : 1;
  const std::size_t per_group = plan.mask.size() / groups;
  for (std::size_t g = 0; g < groups; ++g) {
    double min_sel = std::numeric_limits<double>::infinity();
    double max_unsel = -std::numeric_limits<double>::infinity();
    for (std::size_t f = g * per_group; f < (g + 1) * per_group; ++f) {
      const double v = scores.data()[f];
      if (plan.mask[f]) {
        min_sel = std::min(min_sel, v);
      } else {
        max_unsel = std::max(max_unsel, v);
      }
    }
    if (min_sel < max_unsel) return false;
  }
  return true;
}

// Ascending raw scores picked by each mechanism under the same budget c.
struct DominanceProfile {
  std::vector<double> token_choice;
  std::vector<double> expert_choice;
  std::vector<double> usmoe;

  // usmoe[i] >= token_choice[i] and usmoe[i] >= expert_choice[i] for all i.
  bool dominates() const {
    for (std::size_t i = 0; i < usmoe.size(); ++i) {
      if (usmoe[i] < token_choice[i] || usmoe[i] < expert_choice[i]) return false;
    }
    return true;
  }
};

inline std::vector<double> sorted_selected(const RoutingPlan& plan, const Matrix& scores) {
  std::vector<double> v;
  for (std::size_t f : plan.selected_flat()) v.push_back(scores.data()[f]);
  std::sort(v.begin(), v.end());
  return v;
}

inline DominanceProfile dominance_profile(const CompatibilityMatrix& raw, std::size_t c) {
  const std::size_t T = raw.tokens();
  const std::size_t N = raw.experts();
  if (c == 0 || c % T != 0 || c % N != 0 || c > T * N) {
    throw std::invalid_argument("dominance_profile: c=" + std::to_string(c) +
                                " must be a positive multiple of T=" + std::to_string(T) +
                                " and N=" + std::to_string(N) + " not exceeding T*N");
  }
  const CompatibilityMatrix basis{raw.scores, Basis::raw_logits};
  DominanceProfile p;
  p.token_choice = sorted_selected(route_token_choice(basis, c / T), raw.scores);
  p.expert_choice = sorted_selected(route_expert_choice(basis, c / N), raw.scores);
  p.usmoe = sorted_selected(route_usmoe(basis, c), raw.scores);
  return p;
}

}  // namespace usmoe
