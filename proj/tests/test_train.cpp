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

#include <sstream>

#include "usmoe/checkpoint.hpp"
#include "usmoe/report.hpp"
#include "usmoe/train.hpp"

namespace usmoe {
namespace {

TEST(Task, RealizableOptimumGivesZeroLoss) {
  const auto task = make_task(3, 4, 8, 0.0, 0.0);
  MoeLayerParams model;
  model.activation = Activation::linear;
  model.router = Matrix(8, 4);
  for (std::size_t c = 0; c < 4; ++c) {
    ExpertParams e = ExpertParams::zeros(8, 8);
    e.w1 = task.maps[c];
    e.w2 = Matrix::identity(8);
    model.experts.push_back(e);
  }
  const Batch b = sample_batch(task, Rng(1), 4, 16);
  RoutingPlan plan(64, 4, Mode::usmoe, Scope::sequence, 4);
  for (std::size_t i = 0; i < 64; ++i) plan.select(i * 4 + std::size_t(b.clusters[i]), 1.0);
  EXPECT_LE(mse(forward(b.inputs, model, plan).output, b.targets), 1e-28);
}

TEST(Task, SameSeedSameBatches) {
  const auto t1 = make_task(5, 3, 6, 0.1, 0.25);
  const auto t2 = make_task(5, 3, 6, 0.1, 0.25);
  EXPECT_EQ(t1.centers, t2.centers);
  const Batch a = sample_batch(t1, Rng(9), 3, 16), b = sample_batch(t2, Rng(9), 3, 16);
  EXPECT_EQ(a.inputs, b.inputs);
  EXPECT_EQ(a.targets, b.targets);
  EXPECT_EQ(a.clusters, b.clusters);
  EXPECT_NE(sample_batch(t1, Rng(10), 3, 16).inputs, a.inputs);
}

TEST(Task, CorruptedTokensPerSequence) {
  const auto task = make_task(2, 4, 8, 0.0, 0.25);
  EXPECT_EQ(corrupted_per_sequence(task, 16), 4u);
  const Batch b = sample_batch(task, Rng(3), 5, 16);
  for (std::size_t s = 0; s < 5; ++s) {
    std::size_t bad = 0;
    for (std::size_t t = 0; t < 16; ++t) {
      const std::size_t i = s * 16 + t;
      if (b.clusters[i] < 0) {
        ++bad;
        for (double v : b.targets.row(i)) EXPECT_EQ(v, 0.0);
      }
    }
    EXPECT_EQ(bad, 4u);
  }
}

TEST(Task, RejectsBadArguments) {
  EXPECT_THROW(make_task(1, 0, 8, 0.0, 0.0), std::invalid_argument);
  EXPECT_THROW(make_task(1, 4, 8, 0.0, 1.0), std::invalid_argument);
  EXPECT_THROW(make_task(1, 4, 8, -1.0, 0.0), std::invalid_argument);
}

TrainConfig small_config(Mode m) {
  TrainConfig c;
  c.mode = m;
  c.steps = 60;
  c.eval_every = 20;
  c.batch = 4;
  c.eval_sequences = 8;
  c.seed = 4;
  return c;
}

TEST(Train, ZeroLearningRateKeepsModelAndEvalLoss) {
  const auto task = make_task(1, 4, 8, 0.0, 0.0);
  const auto init = init_model(8, {}, 2);
  auto cfg = small_config(Mode::usmoe);
  cfg.learning_rate = 0.0;
  MoeLayerParams fin;
  const auto rep = train(task, init, cfg, &fin);
  EXPECT_EQ(fin, init);
  ASSERT_EQ(rep.eval_loss.size(), 4u);
  for (const auto& [step, loss] : rep.eval_loss) EXPECT_EQ(loss, rep.eval_loss.front().second);
  EXPECT_EQ(rep.train_loss.size(), 60u);
}

TEST(Train, LossDecreases) {
  const auto task = make_task(1, 4, 8, 0.0, 0.0);
  auto cfg = small_config(Mode::usmoe);
  cfg.steps = 400;
  cfg.eval_every = 400;
  const auto rep = train(task, init_model(8, {}, 2), cfg);
  EXPECT_LT(rep.final_eval_loss, 0.5 * rep.eval_loss.front().second);
  EXPECT_EQ(rep.certificate_violations, 0u);
  EXPECT_EQ(rep.certificate_checks, 400u);
}

TEST(Train, DivergenceIsReported) {
  const auto task = make_task(1, 4, 8, 0.0, 0.0);
  auto cfg = small_config(Mode::token_choice);
  cfg.learning_rate = 1e6;
  const auto rep = train(task, init_model(8, {}, 2), cfg);
  EXPECT_TRUE(rep.diverged);
  EXPECT_FALSE(rep.message.empty());
}

TEST(Train, RejectsInfeasibleBudget) {
  const auto task = make_task(1, 4, 8, 0.0, 0.0);
  auto cfg = small_config(Mode::token_choice);
  cfg.budget = RoutingBudget::global_pairs(3);  // < seq_len
  EXPECT_THROW(train(task, init_model(8, {}, 2), cfg), std::invalid_argument);
}

TEST(Train, DiagnosticInvariants) {
  const auto task = make_task(1, 4, 8, 0.0, 0.25);
  const auto init = init_model(8, {}, 2);
  const auto tc = train(task, init, small_config(Mode::token_choice));
  const auto ec = train(task, init, small_config(Mode::expert_choice));
  for (const auto& d : tc.diagnostics) EXPECT_EQ(d.drop_ratio, 0.0);
  for (const auto& d : ec.diagnostics) EXPECT_EQ(d.load_cv, 0.0);
}

TEST(Compare, AlphaZeroMatchesTokenChoiceSelection) {
  // Row-dominant logits: each token's best score beats every other entry.
  const std::size_t T = 6, N = 3;
  Matrix h = Matrix::identity(N);
  Matrix x(T, N);
  for (std::size_t i = 0; i < T; ++i) x(i, i % N) = 4.0 + 0.1 * double(i);
  MoeLayerParams p;
  p.router = h;
  p.experts.assign(N, ExpertParams::zeros(N, 2));
  const auto tc_scores = compute_scores(x, p, gating_for(Mode::token_choice));
  const auto u0 = compute_scores(x, p, gating_for(Mode::usmoe, 0.0));
  const auto u5 = compute_scores(x, p, gating_for(Mode::usmoe, 0.5));
  const auto budget = RoutingBudget::per_token(1);
  const auto tc = route(Mode::token_choice, tc_scores, budget);
  const auto us0 = route(Mode::usmoe, u0, budget);
  const auto us5 = route(Mode::usmoe, u5, budget);
  EXPECT_EQ(tc.mask, us0.mask);
  EXPECT_EQ(tc.mask, us5.mask);
  EXPECT_EQ(tc.gates, us0.gates);
  EXPECT_GT(max_abs_diff(tc.gates, us5.gates), 1e-3);
}

TEST(Compare, SingleModeDegeneratesToTrain) {
  const auto task = make_task(1, 4, 8, 0.0, 0.0);
  const auto cfg = small_config(Mode::usmoe);
  const auto cmp = compare_modes(task, 7, {cfg});
  const auto rep = train(task, init_model(8, {}, 7), cfg);
  ASSERT_EQ(cmp.runs.size(), 1u);
  EXPECT_EQ(to_json(cmp.runs[0]).dump(), to_json(rep).dump());
}

TEST(Compare, Deterministic) {
  const auto task = make_task(1, 4, 8, 0.0, 0.25);
  std::vector<TrainConfig> cfgs;
  for (Mode m : {Mode::token_choice, Mode::expert_choice, Mode::usmoe}) cfgs.push_back(small_config(m));
  EXPECT_EQ(to_json(compare_modes(task, 7, cfgs)).dump(), to_json(compare_modes(task, 7, cfgs)).dump());
}

TEST(Compare, RejectsDifferentSharedSettings) {
  const auto task = make_task(1, 4, 8, 0.0, 0.0);
  auto a = small_config(Mode::usmoe), b = small_config(Mode::token_choice);
  b.learning_rate = 0.1;
  EXPECT_THROW(compare_modes(task, 7, {a, b}), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(5);
  const auto p = MoeLayerParams::random(5, 7, 3, rng, Activation::linear);
  EXPECT_EQ(checkpoint::load(checkpoint::save(p)), p);
}

TEST(Checkpoint, Base64KnownVectors) {
  EXPECT_EQ(checkpoint::detail::base64_encode({'f', 'o', 'o', 'b'}), "Zm9vYg==");
  EXPECT_EQ(checkpoint::detail::base64_decode("Zm9vYg=="), (std::vector<std::uint8_t>{'f', 'o', 'o', 'b'}));
  EXPECT_THROW(checkpoint::detail::base64_decode("Zm9v*g=="), std::invalid_argument);
}

TEST(Checkpoint, RejectsWrongFormat) {
  Rng rng(5);
  auto j = checkpoint::to_json(MoeLayerParams::random(2, 3, 2, rng));
  j["format"] = "something-else";
  EXPECT_THROW(checkpoint::from_json(j), std::invalid_argument);
}

TEST(Report, LossCsvHasOneRowPerStep) {
  const auto task = make_task(1, 4, 8, 0.0, 0.0);
  const auto rep = train(task, init_model(8, {}, 2), small_config(Mode::usmoe));
  const auto csv = report::loss_csv(rep);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 61);
}

TEST(Report, CompareCsvHasAlignedColumns) {
  const auto task = make_task(1, 4, 8, 0.0, 0.0);
  std::vector<TrainConfig> cfgs;
  for (Mode m : {Mode::token_choice, Mode::expert_choice, Mode::usmoe}) cfgs.push_back(small_config(m));
  const auto csv = report::compare_loss_csv(compare_modes(task, 7, cfgs));
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "step,tc,ec,usmoe");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 3);
    ++rows;
  }
  EXPECT_EQ(rows, 60u);
}

TEST(Report, JsonRoundTripReproducesFiles) {
  const auto task = make_task(1, 4, 8, 0.0, 0.0);
  const auto rep = train(task, init_model(8, {}, 2), small_config(Mode::expert_choice));
  const auto back = report::run_report_from_json(to_json(rep));
  EXPECT_EQ(report::loss_csv(back), report::loss_csv(rep));
  EXPECT_EQ(report::diagnostics_csv(back), report::diagnostics_csv(rep));
  EXPECT_EQ(to_json(back).dump(), to_json(rep).dump());
}

TEST(Report, SvgIsWellFormed) {
  const auto svg = report::svg_line_chart("t", {{"a", {1, 0.5, 0.25}}}, "step");
  EXPECT_EQ(svg.rfind("<svg", 0), 0u);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
}

}  // namespace
}  // namespace usmoe
