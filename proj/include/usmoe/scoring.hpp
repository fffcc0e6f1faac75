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

#include <stdexcept>
#include <string>

#include "usmoe/numerics.hpp"

namespace usmoe {

// Which mapping produced a score matrix.
enum class Basis { raw_logits, softmax_rows, sigmoid, unified, softmax_columns };

inline const char* to_string(Basis b) {
  switch (b) {
    case Basis::raw_logits: return "raw_logits";
    case Basis::softmax_rows: return "softmax_rows";
    case Basis::sigmoid: return "sigmoid";
    case Basis::unified: return "unified";
    case Basis::softmax_columns: return "softmax_columns";
  }
  return "?";
}

// T x N token/expert scores tagged with the mapping that produced them.
struct CompatibilityMatrix {
  Matrix scores;
  Basis basis = Basis::raw_logits;

  std::size_t tokens() const noexcept { return scores.rows(); }
  std::size_t experts() const noexcept { return scores.cols(); }
};

// Mixing weight for the unified score. alpha weights the sigmoid
// (expert-choice) term, 1 - alpha the row-softmax (token-choice) term.
class UnifiedScoreConfig {
 public:
  static constexpr double kDefaultAlpha = 0.5;

  explicit UnifiedScoreConfig(double alpha = kDefaultAlpha) : alpha_(alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
      throw std::invalid_argument("unified score: alpha must lie in [0, 1], got " +
                                  std::to_string(alpha));
    }
  }

  double alpha() const noexcept { return alpha_; }
  double beta() const noexcept { return 1.0 - alpha_; }

 private:
  double alpha_;
};

namespace detail {
inline void require_raw(const CompatibilityMatrix& m, const char* op) {
  if (m.basis != Basis::raw_logits) {
    throw std::invalid_argument(std::string(op) + ": expected raw_logits, got " +
                                to_string(m.basis));
  }
}
}  // namespace detail

inline CompatibilityMatrix logits(const Matrix& h, const Matrix& router_weights) {
  return {matmul(h, router_weights), Basis::raw_logits};
}

// Row-wise softmax over experts.
inline CompatibilityMatrix token_choice_scores(const CompatibilityMatrix& raw) {
  detail::require_raw(raw, "token_choice_scores");
  Matrix out(raw.tokens(), raw.experts());
  for (std::size_t i = 0; i < raw.tokens(); ++i) {
    const auto p = stable_softmax(raw.scores.row(i));
    std::copy(p.begin(), p.end(), out.row(i).begin());
  }
  return {std::move(out), Basis::softmax_rows};
}

// Elementwise sigmoid; each entry depends only on its own logit.
inline CompatibilityMatrix expert_choice_scores(const CompatibilityMatrix& raw) {
  detail::require_raw(raw, "expert_choice_scores");
  Matrix out(raw.tokens(), raw.experts());
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = sigmoid(raw.scores.data()[i]);
  return {std::move(out), Basis::sigmoid};
}

// Legacy expert-choice mapping: softmax down each expert column, computed
// separately within each block of seq_len consecutive rows. Kept only for
// comparison against the sigmoid mapping; it couples tokens of a sequence.
inline CompatibilityMatrix expert_choice_softmax_columns(const CompatibilityMatrix& raw,
                                                         std::size_t num_sequences = 1) {
  detail::require_raw(raw, "expert_choice_softmax_columns");
  if (num_sequences == 0 || raw.tokens() % num_sequences != 0) {
    throw std::invalid_argument("expert_choice_softmax_columns: rows not divisible by sequences");
  }
  const std::size_t T = raw.tokens() / num_sequences;
  Matrix out(raw.tokens(), raw.experts());
  std::vector<double> col(T);
  for (std::size_t s = 0; s < num_sequences; ++s) {
    for (std::size_t j = 0; j < raw.experts(); ++j) {
      for (std::size_t t = 0; t < T; ++t) col[t] = raw.scores(s * T + t, j);
      const auto p = stable_softmax(col);
      for (std::size_t t = 0; t < T; ++t) out(s * T + t, j) = p[t];
    }
  }
  return {std::move(out), Basis::softmax_columns};
}

// (1 - alpha) * row softmax + alpha * sigmoid, entrywise.
inline CompatibilityMatrix unified_scores(const CompatibilityMatrix& raw,
                                          const UnifiedScoreConfig& cfg = UnifiedScoreConfig{}) {
  const auto tc = token_choice_scores(raw);
  const auto ec = expert_choice_scores(raw);
  Matrix out(raw.tokens(), raw.experts());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data()[i] = cfg.beta() * tc.scores.data()[i] + cfg.alpha() * ec.scores.data()[i];
  }
  return {std::move(out), Basis::unified};
}

// Applies the mapping named by `target` to raw logits.
inline CompatibilityMatrix map_scores(const CompatibilityMatrix& raw, Basis target,
                                      double alpha = UnifiedScoreConfig::kDefaultAlpha,
                                      std::size_t num_sequences = 1) {
  switch (target) {
    case Basis::raw_logits: detail::require_raw(raw, "map_scores"); return raw;
    case Basis::softmax_rows: return token_choice_scores(raw);
    case Basis::sigmoid: return expert_choice_scores(raw);
    case Basis::unified: return unified_scores(raw, UnifiedScoreConfig{alpha});
    case Basis::softmax_columns: return expert_choice_softmax_columns(raw, num_sequences);
  }
  throw std::invalid_argument("map_scores: unknown basis");
}

}  // namespace usmoe
