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

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "usmoe/numerics.hpp"
#include "usmoe/routing.hpp"
#include "usmoe/scoring.hpp"

namespace usmoe {

enum class Activation { tanh, linear };

inline const char* to_string(Activation a) { return a == Activation::tanh ? "tanh" : "linear"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "linear") return Activation::linear;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

// One expert: x -> act(x W1 + b1) W2 + b2, with W1 d x d_ff and W2 d_ff x d.
struct ExpertParams {
  Matrix w1;
  std::vector<double> b1;
  Matrix w2;
  std::vector<double> b2;

  static ExpertParams zeros(std::size_t d, std::size_t d_ff) {
    return {Matrix(d, d_ff), std::vector<double>(d_ff, 0.0), Matrix(d_ff, d),
            std::vector<double>(d, 0.0)};
  }

  friend bool operator==(const ExpertParams&, const ExpertParams&) = default;
};

struct MoeLayerParams {
  Matrix router;  // d x N; column j is the embedding of expert j
  std::vector<ExpertParams> experts;
  Activation activation = Activation::tanh;

  std::size_t d() const noexcept { return router.rows(); }
  std::size_t num_experts() const noexcept { return router.cols(); }
  std::size_t d_ff() const noexcept { return experts.empty() ? 0 : experts.front().w1.cols(); }

  void validate() const {
    if (d() < 1 || num_experts() < 1) throw std::invalid_argument("moe layer: need d >= 1, N >= 1");
    if (experts.size() != num_experts()) {
      throw std::invalid_argument("moe layer: router has " + std::to_string(num_experts()) +
                                  " columns but " + std::to_string(experts.size()) + " experts");
    }
    if (!router.all_finite()) throw std::invalid_argument("moe layer: non-finite router weight");
    const std::size_t f = d_ff();
    for (const auto& e : experts) {
      if (e.w1.rows() != d() || e.w1.cols() != f || e.b1.size() != f || e.w2.rows() != f ||
          e.w2.cols() != d() || e.b2.size() != d()) {
        throw std::invalid_argument("moe layer: inconsistent expert shapes");
      }
      auto finite = [](std::span<const double> v) {
        return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
      };
      if (!finite(e.w1.data()) || !finite(e.b1) || !finite(e.w2.data()) || !finite(e.b2)) {
        throw std::invalid_argument("moe layer: non-finite expert weight");
      }
    }
  }

  // Router ~ N(0, 1/d), W1 ~ N(0, 1/d), W2 ~ N(0, 1/d_ff), zero biases.
  static MoeLayerParams random(std::size_t d, std::size_t d_ff, std::size_t n, Rng& rng,
                               Activation act = Activation::tanh) {
    MoeLayerParams p;
    p.activation = act;
    p.router = random_normal(d, n, rng, 1.0 / std::sqrt(double(d)));
    for (std::size_t j = 0; j < n; ++j) {
      ExpertParams e = ExpertParams::zeros(d, d_ff);
      e.w1 = random_normal(d, d_ff, rng, 1.0 / std::sqrt(double(d)));
      e.w2 = random_normal(d_ff, d, rng, 1.0 / std::sqrt(double(d_ff)));
      p.experts.push_back(std::move(e));
    }
    return p;
  }

  friend bool operator==(const MoeLayerParams&, const MoeLayerParams&) = default;
};

// How gate values are produced from router logits during differentiation.
// `detached` freezes the gates stored in the plan.
struct Gating {
  Basis basis = Basis::unified;
  double alpha = UnifiedScoreConfig::kDefaultAlpha;
  bool detached = false;
};

inline Gating gating_for(Mode mode, double alpha = UnifiedScoreConfig::kDefaultAlpha) {
  switch (mode) {
    case Mode::token_choice: return {Basis::softmax_rows, alpha, false};
    case Mode::expert_choice: return {Basis::sigmoid, alpha, false};
    case Mode::usmoe: return {Basis::unified, alpha, false};
  }
  throw std::invalid_argument("gating_for: unknown mode");
}

inline CompatibilityMatrix compute_scores(const Matrix& h, const MoeLayerParams& params,
                                          const Gating& gating, std::size_t num_sequences = 1) {
  return map_scores(logits(h, params.router), gating.basis, gating.alpha, num_sequences);
}

struct LayerOutput {
  Matrix output;
  RoutingPlan plan;
  // contributions[j] is T x d: gate_ij * FFN_j(h_i) for selected pairs.
  std::optional<std::vector<Matrix>> per_token_expert_contributions;
};

namespace detail {

inline double activate(Activation a, double x) { return a == Activation::tanh ? std::tanh(x) : x; }

// Derivative expressed through the pre-activation value.
inline double activate_grad(Activation a, double pre) {
  if (a == Activation::linear) return 1.0;
  const double t = std::tanh(pre);
  return 1.0 - t * t;
}

struct FfnTrace {
  std::vector<double> pre;
  std::vector<double> hidden;
  std::vector<double> out;
};

// Loop order matches matmul so dispatch and dense paths agree bitwise.
inline FfnTrace ffn_forward(const ExpertParams& e, Activation act, std::span<const double> x) {
  const std::size_t d = e.w1.rows();
  const std::size_t f = e.w1.cols();
  FfnTrace t;
  t.pre.assign(f, 0.0);
  for (std::size_t k = 0; k < d; ++k) {
    const double xk = x[k];
    auto wrow = e.w1.row(k);
    for (std::size_t j = 0; j < f; ++j) t.pre[j] += xk * wrow[j];
  }
  for (std::size_t j = 0; j < f; ++j) t.pre[j] += e.b1[j];
  t.hidden.resize(f);
  for (std::size_t j = 0; j < f; ++j) t.hidden[j] = activate(act, t.pre[j]);
  t.out.assign(d, 0.0);
  for (std::size_t k = 0; k < f; ++k) {
    const double hk = t.hidden[k];
    auto wrow = e.w2.row(k);
    for (std::size_t j = 0; j < d; ++j) t.out[j] += hk * wrow[j];
  }
  for (std::size_t j = 0; j < d; ++j) t.out[j] += e.b2[j];
  return t;
}

inline Matrix ffn_batch(const ExpertParams& e, Activation act, const Matrix& x) {
  Matrix pre = matmul(x, e.w1);
  for (std::size_t i = 0; i < pre.rows(); ++i) {
    auto r = pre.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = activate(act, r[j] + e.b1[j]);
  }
  Matrix out = matmul(pre, e.w2);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += e.b2[j];
  }
  return out;
}

inline void check_shapes(const Matrix& h, const MoeLayerParams& params, const RoutingPlan& plan) {
  params.validate();
  if (h.cols() != params.d()) {
    throw std::invalid_argument("moe forward: token width " + std::to_string(h.cols()) +
                                " != d=" + std::to_string(params.d()));
  }
  if (plan.tokens != h.rows() || plan.experts != params.num_experts() ||
      plan.mask.size() != plan.tokens * plan.experts || plan.gates.rows() != plan.tokens ||
      plan.gates.cols() != plan.experts) {
    throw std::invalid_argument("moe forward: plan shape does not match T x N");
  }
}

}  // namespace detail

inline std::vector<double> expert_forward(const ExpertParams& e, Activation act,
                                          std::span<const double> x) {
  return detail::ffn_forward(e, act, x).out;
}

// Dispatch/combine: each expert runs once on the rows routed to it; results
// are scattered back in ascending expert order.
inline LayerOutput forward(const Matrix& h, const MoeLayerParams& params, const RoutingPlan& plan,
                           bool with_contributions = false) {
  detail::check_shapes(h, params, plan);
  const std::size_t T = h.rows();
  const std::size_t d = params.d();
  LayerOutput res{Matrix(T, d), plan, std::nullopt};
  if (with_contributions) {
    res.per_token_expert_contributions.emplace(params.num_experts(), Matrix(T, d));
  }
  std::vector<std::size_t> routed;
  for (std::size_t j = 0; j < params.num_experts(); ++j) {
    routed.clear();
    for (std::size_t i = 0; i < T; ++i)
      if (plan.selected(i, j)) routed.push_back(i);
    if (routed.empty()) continue;
    Matrix x(routed.size(), d);
    for (std::size_t r = 0; r < routed.size(); ++r) {
      std::copy(h.row(routed[r]).begin(), h.row(routed[r]).end(), x.row(r).begin());
    }
    const Matrix y = detail::ffn_batch(params.experts[j], params.activation, x);
    for (std::size_t r = 0; r < routed.size(); ++r) {
      const std::size_t i = routed[r];
      const double g = plan.gates(i, j);
      auto orow = res.output.row(i);
      for (std::size_t k = 0; k < d; ++k) orow[k] += g * y(r, k);
      if (with_contributions) {
        auto crow = (*res.per_token_expert_contributions)[j].row(i);
        for (std::size_t k = 0; k < d; ++k) crow[k] = g * y(r, k);
      }
    }
  }
  return res;
}

// Evaluates every expert on every token, then masks. Ground truth for forward.
inline LayerOutput forward_dense_reference(const Matrix& h, const MoeLayerParams& params,
                                           const RoutingPlan& plan) {
  detail::check_shapes(h, params, plan);
  const std::size_t T = h.rows();
  const std::size_t d = params.d();
  LayerOutput res{Matrix(T, d), plan, std::nullopt};
  for (std::size_t i = 0; i < T; ++i) {
    auto orow = res.output.row(i);
    for (std::size_t j = 0; j < params.num_experts(); ++j) {
      const auto y = expert_forward(params.experts[j], params.activation, h.row(i));
      const double m = plan.selected(i, j) ? 1.0 : 0.0;
      if (m == 0.0) continue;
      for (std::size_t k = 0; k < d; ++k) orow[k] += plan.gates(i, j) * y[k];
    }
  }
  return res;
}

// Same selection, gates re-derived from the current router weights.
inline RoutingPlan regate(const RoutingPlan& plan, const Matrix& h, const MoeLayerParams& params,
                          const Gating& gating) {
  if (gating.detached) return plan;
  const auto scores = compute_scores(h, params, gating, plan.num_sequences);
  RoutingPlan out = plan;
  for (std::size_t f = 0; f < out.mask.size(); ++f) {
    out.gates.data()[f] = out.mask[f] ? scores.scores.data()[f] : 0.0;
  }
  return out;
}

// Forward under a frozen mask with gates recomputed from (h, params).
inline Matrix gated_forward(const Matrix& h, const MoeLayerParams& params, const RoutingPlan& plan,
                            const Gating& gating) {
  return forward(h, params, regate(plan, h, params, gating)).output;
}

struct LayerGradients {
  Matrix h;
  Matrix router;
  std::vector<ExpertParams> experts;
};

// Reverse pass of gated_forward for loss L with dL/doutput = upstream. The
// mask is a constant; gradients reach the router only through the gates.
inline LayerGradients backward(const Matrix& h, const MoeLayerParams& params,
                               const RoutingPlan& plan, const Gating& gating,
                               const Matrix& upstream) {
  detail::check_shapes(h, params, plan);
  const std::size_t T = h.rows();
  const std::size_t d = params.d();
  const std::size_t N = params.num_experts();
  const std::size_t F = params.d_ff();
  if (upstream.rows() != T || upstream.cols() != d) {
    throw std::invalid_argument("backward: upstream gradient must be T x d");
  }

  LayerGradients g{Matrix(T, d), Matrix(d, N), {}};
  for (std::size_t j = 0; j < N; ++j) g.experts.push_back(ExpertParams::zeros(d, F));

  const RoutingPlan gated = regate(plan, h, params, gating);
  Matrix dgate(T, N);

  std::vector<double> dhidden(F);
  for (std::size_t i = 0; i < T; ++i) {
    auto up = upstream.row(i);
    for (std::size_t j = 0; j < N; ++j) {
      if (!plan.selected(i, j)) continue;
      const auto& e = params.experts[j];
      auto& ge = g.experts[j];
      const auto tr = detail::ffn_forward(e, params.activation, h.row(i));
      const double gate = gated.gates(i, j);

      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += up[k] * tr.out[k];
      dgate(i, j) = dot;

      // dy = gate * up
      for (std::size_t k = 0; k < d; ++k) ge.b2[k] += gate * up[k];
      for (std::size_t a = 0; a < F; ++a) {
        auto gw2 = ge.w2.row(a);
        auto w2 = e.w2.row(a);
        double acc = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          gw2[k] += tr.hidden[a] * gate * up[k];
          acc += w2[k] * gate * up[k];
        }
        dhidden[a] = acc * detail::activate_grad(params.activation, tr.pre[a]);
        ge.b1[a] += dhidden[a];
      }
      auto hrow = h.row(i);
      auto gh = g.h.row(i);
      for (std::size_t b = 0; b < d; ++b) {
        auto gw1 = ge.w1.row(b);
        auto w1 = e.w1.row(b);
        double acc = 0.0;
        for (std::size_t a = 0; a < F; ++a) {
          gw1[a] += hrow[b] * dhidden[a];
          acc += w1[a] * dhidden[a];
        }
        gh[b] += acc;
      }
    }
  }

  if (gating.detached) return g;

  // Chain rule from gates back to logits z = h W.
  const auto raw = logits(h, params.router);
  Matrix dz(T, N);
  auto add_row_softmax = [&](const Matrix& s, double w) {
    for (std::size_t i = 0; i < T; ++i) {
      double inner = 0.0;
      for (std::size_t j = 0; j < N; ++j) inner += s(i, j) * dgate(i, j);
      for (std::size_t j = 0; j < N; ++j) dz(i, j) += w * s(i, j) * (dgate(i, j) - inner);
    }
  };
  auto add_sigmoid = [&](const Matrix& s, double w) {
    for (std::size_t f = 0; f < dz.size(); ++f) {
      const double v = s.data()[f];
      dz.data()[f] += w * dgate.data()[f] * v * (1.0 - v);
    }
  };
  switch (gating.basis) {
    case Basis::raw_logits: dz = dgate; break;
    case Basis::softmax_rows: add_row_softmax(token_choice_scores(raw).scores, 1.0); break;
    case Basis::sigmoid: add_sigmoid(expert_choice_scores(raw).scores, 1.0); break;
    case Basis::unified: {
      const UnifiedScoreConfig cfg{gating.alpha};
      add_row_softmax(token_choice_scores(raw).scores, cfg.beta());
      add_sigmoid(expert_choice_scores(raw).scores, cfg.alpha());
      break;
    }
    case Basis::softmax_columns: {
      const Matrix s = expert_choice_softmax_columns(raw, plan.num_sequences).scores;
      const std::size_t L = T / plan.num_sequences;
      for (std::size_t q = 0; q < plan.num_sequences; ++q) {
        for (std::size_t j = 0; j < N; ++j) {
          double inner = 0.0;
          for (std::size_t t = q * L; t < (q + 1) * L; ++t) inner += s(t, j) * dgate(t, j);
          for (std::size_t t = q * L; t < (q + 1) * L; ++t)
            dz(t, j) += s(t, j) * (dgate(t, j) - inner);
        }
      }
      break;
    }
  }

  g.router = matmul(h.transposed(), dz);
  const Matrix dh_route = matmul(dz, params.router.transposed());
  for (std::size_t f = 0; f < g.h.size(); ++f) g.h.data()[f] += dh_route.data()[f];
  return g;
}

// One rank-one summand coeff * e_j^T of the routing-sensitivity part of a
// single-token Jacobian.
struct RankOneTerm {
  enum class Branch { softmax, sigmoid };
  std::size_t expert = 0;
  Branch branch = Branch::softmax;
  std::vector<double> coeff;  // length d
};

// Jacobian of one token's layer output with respect to its input under top-1
// routing, split as
//   J = S_k J_FFN_k + sum_j c_j e_j^T  (+ sum_j d_j e_j^T for the unified score)
// where k is the selected expert, E = FFN_k(x) and e_j = router column j:
//   softmax branch  c_j = w_t S^t_k (delta_kj - S^t_j) E
//   sigmoid branch  d_j = w_e delta_kj S^e_k (1 - S^e_k) E
// with (w_t, w_e) = (1, 0) for the row softmax, (0, 1) for the sigmoid and
// (1 - alpha, alpha) for the unified score. E is read as the selected
// expert's output for this token.
struct JacobianReport {
  Matrix analytic;     // d x d, J(a, b) = d out_a / d x_b, from backward
  Matrix numeric;      // d x d, central differences
  Matrix gate_frozen;  // S_k J_FFN_k
  std::vector<RankOneTerm> routing_terms;
  std::size_t selected_expert = 0;
  double gate = 0.0;
  double max_rel_error = 0.0;        // analytic vs numeric
  double decomposition_error = 0.0;  // analytic vs closed form, absolute

  Matrix routing_sensitivity(const Matrix& router) const {
    const std::size_t d = gate_frozen.rows();
    Matrix m(d, d);
    for (const auto& t : routing_terms)
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) m(a, b) += t.coeff[a] * router(b, t.expert);
    return m;
  }

  std::size_t count_terms(RankOneTerm::Branch b) const {
    return static_cast<std::size_t>(std::count_if(routing_terms.begin(), routing_terms.end(),
                                                  [b](const RankOneTerm& t) { return t.branch == b; }));
  }
};

inline constexpr double kFiniteDifferenceStep = 1e-5;

inline JacobianReport jacobian_report(std::span<const double> x, const MoeLayerParams& params,
                                      const RoutingPlan& plan, const Gating& gating) {
  params.validate();
  const std::size_t d = params.d();
  const std::size_t N = params.num_experts();
  if (x.size() != d) throw std::invalid_argument("jacobian_report: token width != d");
  if (plan.tokens != 1 || plan.experts != N || plan.budget_used != 1) {
    throw std::invalid_argument("jacobian_report: requires a single token routed to exactly one expert");
  }
  if (gating.detached || (gating.basis != Basis::softmax_rows && gating.basis != Basis::sigmoid &&
                          gating.basis != Basis::unified)) {
    throw std::invalid_argument(
        "jacobian_report: gating must be softmax_rows, sigmoid or unified and not detached");
  }
  const Matrix h(1, d, std::vector<double>(x.begin(), x.end()));

  JacobianReport rep;
  rep.analytic = Matrix(d, d);
  for (std::size_t a = 0; a < d; ++a) {
    Matrix up(1, d);
    up(0, a) = 1.0;
    const auto g = backward(h, params, plan, gating, up);
    for (std::size_t b = 0; b < d; ++b) rep.analytic(a, b) = g.h(0, b);
  }

  rep.numeric = Matrix(d, d);
  for (std::size_t b = 0; b < d; ++b) {
    Matrix hp = h, hm = h;
    hp(0, b) += kFiniteDifferenceStep;
    hm(0, b) -= kFiniteDifferenceStep;
    const Matrix yp = gated_forward(hp, params, plan, gating);
    const Matrix ym = gated_forward(hm, params, plan, gating);
    for (std::size_t a = 0; a < d; ++a)
      rep.numeric(a, b) = (yp(0, a) - ym(0, a)) / (2.0 * kFiniteDifferenceStep);
  }

  std::size_t k = 0;
  while (!plan.selected(0, k)) ++k;
  rep.selected_expert = k;

  const CompatibilityMatrix raw = logits(h, params.router);
  const auto st = token_choice_scores(raw).scores;
  const auto se = expert_choice_scores(raw).scores;
  double w_t = 0.0, w_e = 0.0;
  switch (gating.basis) {
    case Basis::softmax_rows: w_t = 1.0; break;
    case Basis::sigmoid: w_e = 1.0; break;
    default: {
      const UnifiedScoreConfig cfg{gating.alpha};
      w_t = cfg.beta();
      w_e = cfg.alpha();
    }
  }
  rep.gate = w_t * st(0, k) + w_e * se(0, k);

  const auto& ek = params.experts[k];
  const auto tr = detail::ffn_forward(ek, params.activation, x);
  rep.gate_frozen = Matrix(d, d);
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = 0; b < d; ++b) {
      double acc = 0.0;
      for (std::size_t f = 0; f < params.d_ff(); ++f) {
        acc += ek.w2(f, a) * detail::activate_grad(params.activation, tr.pre[f]) * ek.w1(b, f);
      }
      rep.gate_frozen(a, b) = rep.gate * acc;
    }
  }

  auto scaled_output = [&](double s) {
    std::vector<double> v(tr.out);
    for (double& c : v) c *= s;
    return v;
  };
  if (gating.basis != Basis::sigmoid) {
    for (std::size_t j = 0; j < N; ++j) {
      const double delta = j == k ? 1.0 : 0.0;
      rep.routing_terms.push_back(
          {j, RankOneTerm::Branch::softmax, scaled_output(w_t * st(0, k) * (delta - st(0, j)))});
    }
  }
  if (gating.basis != Basis::softmax_rows) {
    for (std::size_t j = 0; j < N; ++j) {
      const double delta = j == k ? 1.0 : 0.0;
      rep.routing_terms.push_back(
          {j, RankOneTerm::Branch::sigmoid, scaled_output(w_e * delta * se(0, k) * (1.0 - se(0, k)))});
    }
  }

  Matrix closed = rep.routing_sensitivity(params.router);
  for (std::size_t f = 0; f < closed.size(); ++f) closed.data()[f] += rep.gate_frozen.data()[f];
  rep.decomposition_error = max_abs_diff(rep.analytic, closed);

  const double scale = std::max({max_abs(rep.analytic.data()), max_abs(rep.numeric.data()), 1e-300});
  rep.max_rel_error = max_abs_diff(rep.analytic, rep.numeric) / scale;
  return rep;
}

// Builds the top-1 plan for a single token and reports its Jacobian.
// Only token choice (row softmax) and the unified mechanism are supported.
inline JacobianReport jacobian_report(std::span<const double> x, const MoeLayerParams& params,
                                      Mode mode, double alpha = UnifiedScoreConfig::kDefaultAlpha) {
  if (mode == Mode::expert_choice) {
    throw std::invalid_argument("jacobian_report: expert choice has no per-token top-1 plan");
  }
  const Gating gating = gating_for(mode, alpha);
  const Matrix h(1, params.d(), std::vector<double>(x.begin(), x.end()));
  const auto scores = compute_scores(h, params, gating);
  const RoutingPlan plan =
      mode == Mode::token_choice ? route_token_choice(scores, 1) : route_usmoe(scores, 1);
  return jacobian_report(x, params, plan, gating);
}

}  // namespace usmoe
