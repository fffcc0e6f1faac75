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
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "usmoe/metrics.hpp"
#include "usmoe/moe_layer.hpp"
#include "usmoe/routing.hpp"

namespace usmoe {

inline constexpr const char* kVersion = "usmoe-lab 0.1.0";

// Regression task whose inputs cluster around `num_clusters` centers; each
// cluster has its own linear map, so one expert per cluster is sufficient.
struct SyntheticTask {
  std::uint64_t seed = 0;
  std::size_t num_clusters = 0;
  std::size_t d = 0;
  Matrix centers;            // num_clusters x d
  std::vector<Matrix> maps;  // d x d, target = x * map
  double noise_std = 0.0;
  double corrupt_fraction = 0.0;
  double spread = 0.25;      // stddev of tokens around their center
};

inline SyntheticTask make_task(std::uint64_t seed, std::size_t num_clusters, std::size_t d,
                               double noise_std, double corrupt_fraction) {
  if (num_clusters == 0 || d == 0) throw std::invalid_argument("make_task: empty task");
  if (!(corrupt_fraction >= 0.0 && corrupt_fraction < 1.0)) {
    throw std::invalid_argument("make_task: corrupt_fraction must lie in [0, 1)");
  }
  if (!(noise_std >= 0.0)) throw std::invalid_argument("make_task: noise_std must be >= 0");
  SyntheticTask t;
  t.seed = seed;
  t.num_clusters = num_clusters;
  t.d = d;
  t.noise_std = noise_std;
  t.corrupt_fraction = corrupt_fraction;
  Rng rng = Rng(seed).split(0x7a5c);
  t.centers = random_normal(num_clusters, d, rng);
  for (std::size_t c = 0; c < num_clusters; ++c) {
    t.maps.push_back(random_normal(d, d, rng, 1.0 / std::sqrt(double(d))));
  }
  return t;
}

struct Batch {
  std::size_t num_sequences = 0;
  std::size_t seq_len = 0;
  Matrix inputs;              // (num_sequences * seq_len) x d
  Matrix targets;             // same shape
  std::vector<int> clusters;  // -1 marks a corrupted token
};

inline std::size_t corrupted_per_sequence(const SyntheticTask& task, std::size_t seq_len) {
  return static_cast<std::size_t>(std::floor(task.corrupt_fraction * double(seq_len) + 0.5));
}

// Corrupted tokens are pure N(0, 1) noise with zero targets; exactly
// round(corrupt_fraction * seq_len) of them land in each sequence.
inline Batch sample_batch(const SyntheticTask& task, Rng rng, std::size_t num_sequences,
                          std::size_t seq_len) {
  const std::size_t d = task.d;
  Batch b;
  b.num_sequences = num_sequences;
  b.seq_len = seq_len;
  b.inputs = Matrix(num_sequences * seq_len, d);
  b.targets = Matrix(num_sequences * seq_len, d);
  b.clusters.assign(num_sequences * seq_len, -1);
  const std::size_t n_bad = corrupted_per_sequence(task, seq_len);
  std::vector<std::size_t> pos(seq_len);
  for (std::size_t s = 0; s < num_sequences; ++s) {
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    rng.shuffle(pos.begin(), pos.end());
    std::vector<bool> bad(seq_len, false);
    for (std::size_t q = 0; q < n_bad; ++q) bad[pos[q]] = true;
    for (std::size_t t = 0; t < seq_len; ++t) {
      const std::size_t i = s * seq_len + t;
      auto x = b.inputs.row(i);
      if (bad[t]) {
        for (std::size_t k = 0; k < d; ++k) x[k] = rng.normal();
        continue;
      }
      const std::size_t c = rng.uniform_index(task.num_clusters);
      b.clusters[i] = static_cast<int>(c);
      for (std::size_t k = 0; k < d; ++k) x[k] = task.centers(c, k) + task.spread * rng.normal();
      auto y = b.targets.row(i);
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t k = 0; k < d; ++k) y[k] += x[a] * task.maps[c](a, k);
      if (task.noise_std > 0.0)
        for (double& v : y) v += task.noise_std * rng.normal();
    }
  }
  return b;
}

struct TrainConfig {
  Mode mode = Mode::usmoe;
  double alpha = UnifiedScoreConfig::kDefaultAlpha;
  RoutingBudget budget = RoutingBudget::per_token(1);
  Scope scope = Scope::sequence;
  std::size_t steps = 2000;
  std::size_t batch = 8;
  std::size_t seq_len = 16;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;
  std::size_t eval_every = 100;
  std::size_t eval_sequences = 64;

  void validate(std::size_t num_experts) const {
    if (batch == 0 || seq_len == 0 || eval_sequences == 0 || eval_every == 0) {
      throw std::invalid_argument("train config: batch, seq_len and eval settings must be positive");
    }
    if (!(learning_rate >= 0.0) || !(alpha >= 0.0 && alpha <= 1.0)) {
      throw std::invalid_argument("train config: need learning_rate >= 0 and alpha in [0, 1]");
    }
    const std::size_t c = budget.pairs_per_sequence(seq_len, num_experts);
    if ((mode == Mode::token_choice && c / seq_len < 1) ||
        (mode == Mode::expert_choice && c / num_experts < 1)) {
      throw std::invalid_argument("train config: budget " + budget.to_string() +
                                  " is infeasible for " + to_string(mode));
    }
  }

  // Everything except the routing choice itself.
  bool same_shared(const TrainConfig& o) const {
    return budget == o.budget && scope == o.scope && steps == o.steps && batch == o.batch &&
           seq_len == o.seq_len && learning_rate == o.learning_rate && seed == o.seed &&
           eval_every == o.eval_every && eval_sequences == o.eval_sequences;
  }
};

struct StepDiagnostics {
  double drop_ratio = 0.0;
  double experts_per_sequence = 0.0;
  double load_cv = 0.0;
  std::size_t budget_used = 0;
};

struct RunReport {
  TrainConfig config;
  std::size_t d = 0, d_ff = 0, num_experts = 0;
  std::vector<double> train_loss;  // minibatch loss before each update
  std::vector<std::pair<std::size_t, double>> eval_loss;  // (step, held-out loss)
  double final_eval_loss = 0.0;
  std::vector<StepDiagnostics> diagnostics;
  std::size_t certificate_checks = 0;
  std::size_t certificate_violations = 0;
  bool diverged = false;
  std::string message;
};

inline double mse(const Matrix& out, const Matrix& target) {
  double s = 0.0;
  for (std::size_t f = 0; f < out.size(); ++f) {
    const double e = out.data()[f] - target.data()[f];
    s += e * e;
  }
  return s / double(out.size());
}

// Routes with the configured mechanism and runs the layer.
inline LayerOutput route_and_forward(const Matrix& x, const MoeLayerParams& model,
                                     const TrainConfig& cfg, std::size_t num_sequences) {
  const auto scores = compute_scores(x, model, gating_for(cfg.mode, cfg.alpha), num_sequences);
  return forward(x, model, route(cfg.mode, scores, cfg.budget, cfg.scope, num_sequences));
}

inline double evaluate(const MoeLayerParams& model, const Batch& batch, const TrainConfig& cfg) {
  return mse(route_and_forward(batch.inputs, model, cfg, batch.num_sequences).output, batch.targets);
}

inline void sgd_step(MoeLayerParams& model, const LayerGradients& g, double lr) {
  auto upd = [lr](std::span<double> p, std::span<const double> gp) {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * gp[i];
  };
  upd(model.router.data(), g.router.data());
  for (std::size_t j = 0; j < model.experts.size(); ++j) {
    upd(model.experts[j].w1.data(), g.experts[j].w1.data());
    upd(model.experts[j].b1, g.experts[j].b1);
    upd(model.experts[j].w2.data(), g.experts[j].w2.data());
    upd(model.experts[j].b2, g.experts[j].b2);
  }
}

// Data streams derived from the run seed: stream 1 gives per-step batches
// (child stream = step index), stream 2 gives the held-out set.
inline Batch training_batch(const SyntheticTask& task, const TrainConfig& cfg, std::size_t step) {
  return sample_batch(task, Rng(cfg.seed).split(1).split(step), cfg.batch, cfg.seq_len);
}

inline Batch eval_batch(const SyntheticTask& task, const TrainConfig& cfg) {
  return sample_batch(task, Rng(cfg.seed).split(2), cfg.eval_sequences, cfg.seq_len);
}

// Plain SGD on mean-squared error. Routing is recomputed from the current
// router weights every step; the selection mask is constant inside each
// gradient computation.
// `final_model`, when given, receives the parameters after the last update.
inline RunReport train(const SyntheticTask& task, MoeLayerParams model, const TrainConfig& cfg,
                       MoeLayerParams* final_model = nullptr) {
  model.validate();
  if (model.d() != task.d) throw std::invalid_argument("train: model width != task width");
  cfg.validate(model.num_experts());

  RunReport rep;
  rep.config = cfg;
  rep.d = model.d();
  rep.d_ff = model.d_ff();
  rep.num_experts = model.num_experts();
  const Gating gating = gating_for(cfg.mode, cfg.alpha);
  const Batch held_out = eval_batch(task, cfg);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    if (step % cfg.eval_every == 0) rep.eval_loss.emplace_back(step, evaluate(model, held_out, cfg));

    const Batch b = training_batch(task, cfg, step);
    const auto scores = compute_scores(b.inputs, model, gating, cfg.batch);
    const RoutingPlan plan = route(cfg.mode, scores, cfg.budget, cfg.scope, cfg.batch);
    if (cfg.mode == Mode::usmoe) {
      ++rep.certificate_checks;
      if (!satisfies_topk_certificate(plan, scores.scores)) ++rep.certificate_violations;
    }
    const Matrix out = forward(b.inputs, model, plan).output;
    const double loss = mse(out, b.targets);
    rep.train_loss.push_back(loss);

    const auto diag = diagnostics(plan, cfg.seq_len, model.num_experts(), cfg.batch);
    rep.diagnostics.push_back(
        {diag.drop_ratio, diag.experts_per_sequence, diag.load_cv, diag.budget_used});

    if (!std::isfinite(loss)) {
      rep.diverged = true;
      rep.message = "loss became non-finite at step " + std::to_string(step);
      rep.final_eval_loss = std::numeric_limits<double>::quiet_NaN();
      if (final_model) *final_model = model;
      return rep;
    }

    Matrix up(out.rows(), out.cols());
    const double scale = 2.0 / double(out.size());
    for (std::size_t f = 0; f < up.size(); ++f)
      up.data()[f] = scale * (out.data()[f] - b.targets.data()[f]);
    sgd_step(model, backward(b.inputs, model, plan, gating, up), cfg.learning_rate);
  }
  rep.final_eval_loss = evaluate(model, held_out, cfg);
  rep.eval_loss.emplace_back(cfg.steps, rep.final_eval_loss);
  if (!std::isfinite(rep.final_eval_loss)) {
    rep.diverged = true;
    rep.message = "final evaluation loss is non-finite";
  }
  if (final_model) *final_model = std::move(model);
  return rep;
}

struct ModelShape {
  std::size_t d_ff = 16;
  std::size_t num_experts = 4;
  Activation activation = Activation::tanh;
};

inline MoeLayerParams init_model(std::size_t d, const ModelShape& shape, std::uint64_t seed) {
  Rng rng = Rng(seed).split(0x30de1);
  return MoeLayerParams::random(d, shape.d_ff, shape.num_experts, rng, shape.activation);
}

struct ComparisonReport {
  std::uint64_t model_seed = 0;
  std::vector<RunReport> runs;
};

// Trains every config from the same initial parameters on the same data.
inline ComparisonReport compare_modes(const SyntheticTask& task, std::uint64_t model_seed,
                                      const std::vector<TrainConfig>& cfgs,
                                      const ModelShape& shape = {}) {
  if (cfgs.empty()) throw std::invalid_argument("compare_modes: no configs");
  for (const auto& c : cfgs) {
    if (!c.same_shared(cfgs.front())) {
      throw std::invalid_argument("compare_modes: configs differ in non-routing hyperparameters");
    }
  }
  ComparisonReport rep;
  rep.model_seed = model_seed;
  const MoeLayerParams init = init_model(task.d, shape, model_seed);
  for (const auto& c : cfgs) rep.runs.push_back(train(task, init, c));
  return rep;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"mode", to_string(c.mode)},
          {"alpha", c.alpha},
          {"budget", c.budget.to_string()},
          {"scope", to_string(c.scope)},
          {"steps", c.steps},
          {"batch", c.batch},
          {"seq_len", c.seq_len},
          {"learning_rate", c.learning_rate},
          {"seed", c.seed},
          {"eval_every", c.eval_every},
          {"eval_sequences", c.eval_sequences}};
}

inline nlohmann::json to_json(const RunReport& r) {
  nlohmann::json diag = {{"drop_ratio", nlohmann::json::array()},
                         {"experts_per_sequence", nlohmann::json::array()},
                         {"load_cv", nlohmann::json::array()},
                         {"budget_used", nlohmann::json::array()}};
  for (const auto& s : r.diagnostics) {
    diag["drop_ratio"].push_back(s.drop_ratio);
    diag["experts_per_sequence"].push_back(s.experts_per_sequence);
    diag["load_cv"].push_back(s.load_cv);
    diag["budget_used"].push_back(s.budget_used);
  }
  nlohmann::json eval = nlohmann::json::array();
  for (const auto& [step, loss] : r.eval_loss) eval.push_back({{"step", step}, {"loss", loss}});
  nlohmann::json j = {{"version", kVersion},
                      {"config", to_json(r.config)},
                      {"seed", r.config.seed},
                      {"model", {{"d", r.d}, {"d_ff", r.d_ff}, {"num_experts", r.num_experts}}},
                      {"train_loss", r.train_loss},
                      {"eval_loss", eval},
                      {"diagnostics", diag},
                      {"certificate_checks", r.certificate_checks},
                      {"certificate_violations", r.certificate_violations},
                      {"diverged", r.diverged},
                      {"message", r.message}};
  // NaN is not representable in JSON; a diverged run reports null.
  if (std::isfinite(r.final_eval_loss)) {
    j["final_eval_loss"] = r.final_eval_loss;
  } else {
    j["final_eval_loss"] = nullptr;
  }
  return j;
}

inline nlohmann::json to_json(const ComparisonReport& c) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : c.runs) runs.push_back(to_json(r));
  return {{"version", kVersion}, {"model_seed", c.model_seed}, {"runs", runs}};
}

}  // namespace usmoe
