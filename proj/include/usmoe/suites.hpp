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
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "usmoe/lp_oracle.hpp"
#include "usmoe/metrics.hpp"
#include "usmoe/moe_layer.hpp"
#include "usmoe/routing.hpp"
#include "usmoe/train.hpp"

// Seeded property suites. Instance i of every suite draws from
// Rng(seed).split(i), so results do not depend on evaluation order.
namespace usmoe::suites {

struct SuiteReport {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t instances = 0;
  std::size_t passed = 0;
  std::size_t certificate_checks = 0;
  std::size_t certificate_violations = 0;
  double worst_error = 0.0;  // suite-specific; 0 when not applicable
  nlohmann::json failures = nlohmann::json::array();
  nlohmann::json details = nlohmann::json::object();

  bool ok() const { return passed == instances && certificate_violations == 0; }
};

inline nlohmann::json to_json(const SuiteReport& r) {
  return {{"suite", r.name},
          {"seed", r.seed},
          {"instances", r.instances},
          {"passed", r.passed},
          {"failed", r.instances - r.passed},
          {"certificate_checks", r.certificate_checks},
          {"certificate_violations", r.certificate_violations},
          {"worst_error", r.worst_error},
          {"ok", r.ok()},
          {"failures", r.failures},
          {"details", r.details}};
}

inline nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    rows.push_back(std::vector<double>(m.row(i).begin(), m.row(i).end()));
  }
  return rows;
}

inline void check_certificate(SuiteReport& r, const RoutingPlan& plan, const Matrix& scores) {
  if (plan.mode != Mode::usmoe) return;
  ++r.certificate_checks;
  if (!satisfies_topk_certificate(plan, scores)) ++r.certificate_violations;
}

// Random (T, N) with T in [2, 6], N in [2, 5], redrawn until T*N fits the
// enumeration bound; c in [1, 12] clamped to T*N; scores uniform in (0, 1).
struct PropositionInstance {
  Matrix scores;
  std::size_t c = 0;
};

inline PropositionInstance proposition_instance(const Rng& root, std::size_t i) {
  Rng rng = root.split(i);
  std::size_t T = 0, N = 0;
  do {
    T = rng.uniform_int(2, 6);
    N = rng.uniform_int(2, 5);
  } while (T * N > kMaxEnumerationEntries);
  const std::size_t c = std::min(rng.uniform_int(1, 12), T * N);
  Matrix s(T, N);
  for (double& v : s.data()) {
    do v = rng.uniform(); while (v == 0.0);
  }
  return {std::move(s), c};
}

inline SuiteReport proposition_suite(std::size_t instances, std::uint64_t seed) {
  SuiteReport r{.name = "proposition", .seed = seed, .instances = instances};
  const Rng root(seed);
  for (std::size_t i = 0; i < instances; ++i) {
    const auto inst = proposition_instance(root, i);
    const RoutingPlan plan = route_usmoe(CompatibilityMatrix{inst.scores, Basis::raw_logits}, inst.c);
    check_certificate(r, plan, inst.scores);
    if (verify_proposition(inst.scores, inst.c)) {
      ++r.passed;
    } else {
      const auto oracle = solve_exact(inst.scores, inst.c);
      r.failures.push_back({{"instance", i},
                            {"scores", matrix_json(inst.scores)},
                            {"c", inst.c},
                            {"usmoe_objective", plan.objective(inst.scores)},
                            {"oracle_objective", oracle.optimal_objective}});
    }
  }
  return r;
}

// Square T = N in [2, 6], c = m*T with m in [1, N], normal raw logits.
inline SuiteReport dominance_suite(std::size_t instances, std::uint64_t seed) {
  SuiteReport r{.name = "dominance", .seed = seed, .instances = instances};
  const Rng root(seed);
  double min_margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < instances; ++i) {
    Rng rng = root.split(i);
    const std::size_t T = rng.uniform_int(2, 6);
    const std::size_t c = T * rng.uniform_int(1, T);
    const Matrix s = random_normal(T, T, rng);
    const CompatibilityMatrix raw{s, Basis::raw_logits};
    check_certificate(r, route_usmoe(raw, c), s);
    const auto gap = verify_mechanism_gap(s, c);
    const auto prof = dominance_profile(raw, c);
    min_margin = std::min(min_margin, gap.m_usmoe - std::max(gap.m_tc, gap.m_ec));
    if (gap.holds() && prof.dominates()) {
      ++r.passed;
    } else {
      r.failures.push_back({{"instance", i},
                            {"scores", matrix_json(s)},
                            {"c", c},
                            {"m_tc", gap.m_tc},
                            {"m_ec", gap.m_ec},
                            {"m_usmoe", gap.m_usmoe},
                            {"profile_tc", prof.token_choice},
                            {"profile_ec", prof.expert_choice},
                            {"profile_usmoe", prof.usmoe}});
    }
  }
  r.details["min_objective_margin"] = instances ? min_margin : 0.0;
  return r;
}

inline std::vector<std::size_t> sorted_top_k(std::span<const double> v, std::size_t k) {
  auto idx = top_k_indices(v, k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Rows of N in [2, 12] experts; odd instances draw from {-2..2} so ties
// occur. Every k in [1, N] is checked.
inline SuiteReport topk_invariance_suite(std::size_t instances, std::uint64_t seed) {
  SuiteReport r{.name = "topk-invariance", .seed = seed, .instances = instances};
  const Rng root(seed);
  std::size_t comparisons = 0;
  for (std::size_t i = 0; i < instances; ++i) {
    Rng rng = root.split(i);
    const std::size_t N = rng.uniform_int(2, 12);
    Matrix raw(1, N);
    for (double& v : raw.data()) {
      v = (i % 2) ? double(rng.uniform_int(0, 4)) - 2.0 : rng.normal(0.0, 3.0);
    }
    const CompatibilityMatrix logit{raw, Basis::raw_logits};
    const CompatibilityMatrix soft = token_choice_scores(logit);
    bool ok = true;
    for (std::size_t k = 1; k <= N; ++k) {
      ++comparisons;
      const auto a = sorted_top_k(raw.row(0), k);
      const auto b = sorted_top_k(soft.scores.row(0), k);
      const auto pa = route_token_choice(logit, k).mask;
      const auto pb = route_token_choice(soft, k).mask;
      if (a != b || pa != pb) {
        ok = false;
        r.failures.push_back({{"instance", i},
                              {"row", std::vector<double>(raw.data().begin(), raw.data().end())},
                              {"k", k},
                              {"raw_indices", a},
                              {"softmax_indices", b}});
      }
    }
    if (ok) ++r.passed;
  }
  r.details["row_k_pairs"] = comparisons;
  return r;
}

// Random layer, batch and mechanism (cycled by instance index).
inline SuiteReport forward_equivalence_suite(std::size_t instances, std::uint64_t seed,
                                             double tolerance = 1e-12) {
  SuiteReport r{.name = "forward-equivalence", .seed = seed, .instances = instances};
  const Rng root(seed);
  std::size_t tc_drop_violations = 0, ec_load_violations = 0;
  for (std::size_t i = 0; i < instances; ++i) {
    Rng rng = root.split(i);
    const std::size_t d = rng.uniform_int(2, 8);
    const std::size_t f = rng.uniform_int(2, 16);
    const std::size_t N = rng.uniform_int(2, 6);
    const std::size_t B = rng.uniform_int(1, 3);
    const std::size_t T = rng.uniform_int(2, 8);
    const Mode mode = static_cast<Mode>(i % 3);
    const Scope scope = rng.uniform_index(2) ? Scope::batch : Scope::sequence;
    const double alpha = rng.uniform();
    const auto params = MoeLayerParams::random(
        d, f, N, rng, rng.uniform_index(2) ? Activation::tanh : Activation::linear);
    const Matrix h = random_normal(B * T, d, rng);

    RoutingBudget budget = RoutingBudget::global_pairs(0);
    switch (mode) {
      case Mode::token_choice: budget = RoutingBudget::per_token(rng.uniform_int(1, N)); break;
      case Mode::expert_choice: budget = RoutingBudget::per_expert(rng.uniform_int(1, T)); break;
      case Mode::usmoe:
        budget = rng.uniform_index(2) ? RoutingBudget::global_pairs(rng.uniform_int(0, T * N))
                                      : RoutingBudget::fractional(rng.uniform(0.5, 2.5));
        break;
    }
    const auto scores = compute_scores(h, params, gating_for(mode, alpha), B);
    const RoutingPlan plan = route(mode, scores, budget, scope, B);
    check_certificate(r, plan, scores.scores);
    const auto diag = diagnostics(plan, T, N, B);
    if (mode == Mode::token_choice && diag.drop_ratio != 0.0) ++tc_drop_violations;
    if (mode == Mode::expert_choice && diag.load_cv != 0.0) ++ec_load_violations;

    const double err = max_abs_diff(forward(h, params, plan).output,
                                    forward_dense_reference(h, params, plan).output);
    r.worst_error = std::max(r.worst_error, err);
    if (err <= tolerance) {
      ++r.passed;
    } else {
      r.failures.push_back({{"instance", i}, {"mode", to_string(mode)}, {"max_abs_diff", err}});
    }
  }
  r.details["tc_drop_violations"] = tc_drop_violations;
  r.details["ec_load_cv_violations"] = ec_load_violations;
  if (tc_drop_violations || ec_load_violations) r.passed = 0;
  return r;
}

// Relative error of one parameter block: max |a - n| / max(|a|_inf, |n|_inf).
inline double block_rel_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
  const double scale = std::max(max_abs(analytic), max_abs(numeric));
  return scale > 0.0 ? diff / scale : diff;
}

struct GradcheckResult {
  double h = 0, router = 0, w1 = 0, b1 = 0, w2 = 0, b2 = 0;
  double worst() const { return std::max({h, router, w1, b1, w2, b2}); }
};

// Analytic backward vs central differences of L = sum(upstream .* output)
// under a frozen mask, for every parameter block.
inline GradcheckResult gradcheck(const Matrix& h, const MoeLayerParams& params,
                                 const RoutingPlan& plan, const Gating& gating,
                                 const Matrix& upstream, double step = kFiniteDifferenceStep) {
  const auto g = backward(h, params, plan, gating, upstream);
  auto loss = [&](const Matrix& hh, const MoeLayerParams& pp) {
    const Matrix out = gated_forward(hh, pp, plan, gating);
    double s = 0.0;
    for (std::size_t f = 0; f < out.size(); ++f) s += out.data()[f] * upstream.data()[f];
    return s;
  };
  auto numeric = [&](auto&& slot, std::size_t n) {
    std::vector<double> out(n);
    for (std::size_t idx = 0; idx < n; ++idx) {
      Matrix hp = h, hm = h;
      MoeLayerParams pp = params, pm = params;
      slot(hp, pp, idx) += step;
      slot(hm, pm, idx) -= step;
      out[idx] = (loss(hp, pp) - loss(hm, pm)) / (2.0 * step);
    }
    return out;
  };
  GradcheckResult res;
  res.h = block_rel_error(
      g.h.data(), numeric([](Matrix& hh, MoeLayerParams&, std::size_t i) -> double& { return hh.data()[i]; },
                          h.size()));
  res.router = block_rel_error(
      g.router.data(),
      numeric([](Matrix&, MoeLayerParams& p, std::size_t i) -> double& { return p.router.data()[i]; },
              params.router.size()));
  const std::size_t d = params.d(), F = params.d_ff();
  std::vector<double> a_w1, a_b1, a_w2, a_b2;
  for (const auto& e : g.experts) {
    a_w1.insert(a_w1.end(), e.w1.data().begin(), e.w1.data().end());
    a_b1.insert(a_b1.end(), e.b1.begin(), e.b1.end());
    a_w2.insert(a_w2.end(), e.w2.data().begin(), e.w2.data().end());
    a_b2.insert(a_b2.end(), e.b2.begin(), e.b2.end());
  }
  const std::size_t N = params.num_experts();
  res.w1 = block_rel_error(a_w1, numeric([&](Matrix&, MoeLayerParams& p, std::size_t i) -> double& {
                             return p.experts[i / (d * F)].w1.data()[i % (d * F)];
                           }, N * d * F));
  res.b1 = block_rel_error(a_b1, numeric([&](Matrix&, MoeLayerParams& p, std::size_t i) -> double& {
                             return p.experts[i / F].b1[i % F];
                           }, N * F));
  res.w2 = block_rel_error(a_w2, numeric([&](Matrix&, MoeLayerParams& p, std::size_t i) -> double& {
                             return p.experts[i / (d * F)].w2.data()[i % (d * F)];
                           }, N * d * F));
  res.b2 = block_rel_error(a_b2, numeric([&](Matrix&, MoeLayerParams& p, std::size_t i) -> double& {
                             return p.experts[i / d].b2[i % d];
                           }, N * d));
  return res;
}

struct GradcheckSuiteOptions {
  std::size_t d = 8, d_ff = 16, num_experts = 4, tokens = 5;
  double gradient_tolerance = 1e-4;
  double decomposition_tolerance = 1e-10;
};

// Per instance: a block-wise gradient check (mechanism cycled by index) and
// top-1 Jacobian reports for token choice and the unified score.
inline SuiteReport gradcheck_suite(std::size_t instances, std::uint64_t seed,
                                   const GradcheckSuiteOptions& opt = {}) {
  SuiteReport r{.name = "gradcheck", .seed = seed, .instances = instances};
  const Rng root(seed);
  double worst_decomp = 0.0, worst_jac = 0.0;
  bool term_counts_ok = true;
  for (std::size_t i = 0; i < instances; ++i) {
    Rng rng = root.split(i);
    const auto params = MoeLayerParams::random(opt.d, opt.d_ff, opt.num_experts, rng);
    const Matrix h = random_normal(opt.tokens, opt.d, rng);
    const Matrix up = random_normal(opt.tokens, opt.d, rng);
    const Mode mode = static_cast<Mode>(i % 3);
    const Gating gating = gating_for(mode, rng.uniform(0.2, 0.8));
    const auto scores = compute_scores(h, params, gating);
    const std::size_t c = opt.tokens * 2 > opt.num_experts ? opt.tokens * 2 : opt.num_experts;
    const RoutingPlan plan =
        mode == Mode::expert_choice
            ? route_expert_choice(scores, std::min<std::size_t>(2, opt.tokens))
            : route(mode, scores, RoutingBudget::global_pairs(c));
    check_certificate(r, plan, scores.scores);
    const auto gc = gradcheck(h, params, plan, gating, up);

    const auto jt = jacobian_report(h.row(0), params, Mode::token_choice);
    const auto ju = jacobian_report(h.row(0), params, Mode::usmoe, gating.alpha);
    const bool counts = jt.routing_terms.size() == opt.num_experts &&
                        ju.routing_terms.size() == 2 * opt.num_experts;
    term_counts_ok = term_counts_ok && counts;
    worst_decomp = std::max({worst_decomp, jt.decomposition_error, ju.decomposition_error});
    worst_jac = std::max({worst_jac, jt.max_rel_error, ju.max_rel_error});
    r.worst_error = std::max(r.worst_error, gc.worst());

    const bool pass = gc.worst() < opt.gradient_tolerance && counts &&
                      jt.decomposition_error <= opt.decomposition_tolerance &&
                      ju.decomposition_error <= opt.decomposition_tolerance &&
                      jt.max_rel_error < opt.gradient_tolerance &&
                      ju.max_rel_error < opt.gradient_tolerance;
    if (pass) {
      ++r.passed;
    } else {
      r.failures.push_back({{"instance", i},
                            {"mode", to_string(mode)},
                            {"rel_error",
                             {{"h", gc.h}, {"router", gc.router}, {"w1", gc.w1},
                              {"b1", gc.b1}, {"w2", gc.w2}, {"b2", gc.b2}}},
                            {"jacobian_rel_error_tc", jt.max_rel_error},
                            {"jacobian_rel_error_usmoe", ju.max_rel_error},
                            {"decomposition_error_tc", jt.decomposition_error},
                            {"decomposition_error_usmoe", ju.decomposition_error}});
    }
  }
  r.details["worst_decomposition_error"] = worst_decomp;
  r.details["worst_jacobian_rel_error"] = worst_jac;
  r.details["routing_term_counts_ok"] = term_counts_ok;
  return r;
}

inline SuiteReport run_suite(const std::string& name, std::size_t instances, std::uint64_t seed) {
  if (name == "proposition") return proposition_suite(instances, seed);
  if (name == "dominance") return dominance_suite(instances, seed);
  if (name == "topk-invariance") return topk_invariance_suite(instances, seed);
  if (name == "forward-equivalence") return forward_equivalence_suite(instances, seed);
  if (name == "gradcheck") return gradcheck_suite(instances, seed);
  throw std::invalid_argument("unknown suite '" + name + "'");
}

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"proposition", "dominance", "topk-invariance",
                                                 "forward-equivalence", "gradcheck"};
  return names;
}

}  // namespace usmoe::suites
