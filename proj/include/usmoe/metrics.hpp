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
#include <set>
#include <stdexcept>
#include <vector>

#include "usmoe/routing.hpp"

namespace usmoe {

struct RoutingDiagnostics {
  double drop_ratio = 0.0;             // tokens with an empty plan row / all tokens
  double experts_per_sequence = 0.0;   // mean distinct experts used per sequence
  std::vector<std::size_t> load_per_expert;
  double load_cv = 0.0;                // population stddev / mean of load
  std::size_t budget_used = 0;
  std::size_t dropped_tokens = 0;
};

inline RoutingDiagnostics diagnostics(const RoutingPlan& plan, std::size_t T, std::size_t N,
                                      std::size_t num_sequences = 1) {
  if (num_sequences == 0 || plan.tokens != T * num_sequences || plan.experts != N ||
      plan.mask.size() != plan.tokens * N) {
    throw std::invalid_argument("diagnostics: plan shape does not match T*sequences x N");
  }
  RoutingDiagnostics r;
  r.load_per_expert.assign(N, 0);
  double distinct_total = 0.0;
  for (std::size_t s = 0; s < num_sequences; ++s) {
    std::vector<bool> used(N, false);
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t i = s * T + t;
      std::size_t row = 0;
      for (std::size_t j = 0; j < N; ++j) {
        if (plan.selected(i, j)) {
          ++row;
          ++r.load_per_expert[j];
          used[j] = true;
        }
      }
      if (row == 0) ++r.dropped_tokens;
      r.budget_used += row;
    }
    distinct_total += double(std::count(used.begin(), used.end(), true));
  }
  const double tokens = double(T * num_sequences);
  r.drop_ratio = tokens > 0 ? double(r.dropped_tokens) / tokens : 0.0;
  r.experts_per_sequence = distinct_total / double(num_sequences);

  const double mean = double(r.budget_used) / double(N);
  if (mean > 0.0) {
    double var = 0.0;
    for (std::size_t l : r.load_per_expert) var += (double(l) - mean) * (double(l) - mean);
    r.load_cv = std::sqrt(var / double(N)) / mean;
  }
  return r;
}

struct LayerDims {
  std::size_t d = 0;
  std::size_t d_ff = 0;
  std::size_t num_experts = 0;
  std::size_t tokens = 0;
  // Compute outside the MoE layer (attention etc.) charged to every config.
  std::uint64_t fixed_flops = 0;
};

// Multiply-add counted as 2 FLOPs; activations and biases ignored.
struct FlopsEstimate {
  std::size_t selected_pairs = 0;
  std::uint64_t expert_flops = 0;
  std::uint64_t router_flops = 0;
  std::uint64_t fixed_flops = 0;
  std::uint64_t total_flops = 0;

  // Ratios against a baseline estimate (1.0 when the baseline is zero).
  double expert_ratio(const FlopsEstimate& base) const {
    return base.expert_flops ? double(expert_flops) / double(base.expert_flops) : 1.0;
  }
  double total_ratio(const FlopsEstimate& base) const {
    return base.total_flops ? double(total_flops) / double(base.total_flops) : 1.0;
  }
};

inline std::uint64_t flops_per_pair(const LayerDims& dims) {
  return 2ull * dims.d * dims.d_ff + 2ull * dims.d_ff * dims.d;
}

inline FlopsEstimate flops_estimate(const LayerDims& dims, const RoutingBudget& budget) {
  if (dims.d == 0 || dims.d_ff == 0 || dims.num_experts == 0 || dims.tokens == 0) {
    throw std::invalid_argument("flops_estimate: dims must be positive");
  }
  FlopsEstimate f;
  f.selected_pairs = budget.pairs_per_sequence(dims.tokens, dims.num_experts);
  f.expert_flops = f.selected_pairs * flops_per_pair(dims);
  f.router_flops = 2ull * dims.tokens * dims.d * dims.num_experts;
  f.fixed_flops = dims.fixed_flops;
  f.total_flops = f.fixed_flops + f.router_flops + f.expert_flops;
  return f;
}

// Non-expert share r_fixed / r_expert_per_token implied by an observed total
// ratio between two per-token expert counts: solves
//   ratio = (x + k_lo) / (x + k_hi)  for x.
inline double implied_fixed_share(double ratio, double k_lo, double k_hi) {
  if (!(ratio < 1.0) || !(k_lo < k_hi)) throw std::invalid_argument("implied_fixed_share: bad input");
  return (ratio * k_hi - k_lo) / (1.0 - ratio);
}

}  // namespace usmoe
