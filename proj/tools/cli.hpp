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

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "usmoe/checkpoint.hpp"
#include "usmoe/metrics.hpp"
#include "usmoe/report.hpp"
#include "usmoe/routing.hpp"
#include "usmoe/scoring.hpp"
#include "usmoe/suites.hpp"
#include "usmoe/train.hpp"

namespace usmoe::cli {

// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kPropertyFailure = 1;
inline constexpr int kUsageError = 2;

// Raised for bad user input discovered after argument parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

namespace fs = std::filesystem;

inline std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_json(const fs::path& p, const nlohmann::json& j) {
  report::write_file(p, j.dump(2) + "\n");
}

struct Shared {
  std::uint64_t seed = 0;
  std::string out = "usmoe_out";
};

inline void add_shared(CLI::App* sub, Shared& s) {
  sub->add_option("--seed", s.seed, "Seed from which every instance/run seed is derived")
      ->capture_default_str();
  sub->add_option("--out", s.out, "Output directory")->capture_default_str();
}

// Writes the fully resolved options (re-loadable with --config) and a
// version/seed stamp into the output directory.
inline void echo_config(const CLI::App& app, const CLI::App& sub, const Shared& s) {
  fs::create_directories(s.out);
  std::istringstream all(app.config_to_str(true, false));
  std::string text = std::string("# ") + kVersion + "\n", line;
  const std::string prefix = sub.get_name() + ".";
  while (std::getline(all, line)) {
    if (line.rfind(prefix, 0) == 0) text += line + "\n";
  }
  report::write_file(fs::path(s.out) / "config.toml", text);
  write_json(fs::path(s.out) / "run_info.json",
             {{"version", kVersion}, {"subcommand", sub.get_name()}, {"seed", s.seed}});
}

struct TrainFlags {
  std::string mode = "usmoe";
  std::string modes = "tc,ec,usmoe";
  double alpha = UnifiedScoreConfig::kDefaultAlpha;
  std::string budget = "1x";
  std::string scope = "sequence";
  std::size_t steps = 2000;
  std::size_t batch = 8;
  std::size_t seq_len = 16;
  double lr = 0.05;
  std::size_t eval_every = 100;
  std::size_t eval_sequences = 64;
  std::size_t d = 8;
  std::size_t d_ff = 16;
  std::size_t experts = 4;
  std::size_t clusters = 4;
  double noise = 0.0;
  double corrupt = 0.0;
  std::string activation = "tanh";
  std::string init;  // optional checkpoint
};

inline void add_train_flags(CLI::App* sub, TrainFlags& f, bool multi_mode) {
  if (multi_mode) {
    sub->add_option("--modes", f.modes, "Comma-separated routing mechanisms")->capture_default_str();
  } else {
    sub->add_option("--mode", f.mode, "Routing mechanism: tc, ec or usmoe")->capture_default_str();
  }
  sub->add_option("--alpha", f.alpha, "Sigmoid weight of the unified score")->capture_default_str();
  sub->add_option("--budget", f.budget, "Pairs per sequence: c, or k_frac experts per token as '1.5x'")
      ->capture_default_str();
  sub->add_option("--scope", f.scope, "sequence or batch")->capture_default_str();
  sub->add_option("--steps", f.steps)->capture_default_str();
  sub->add_option("--batch", f.batch, "Sequences per step")->capture_default_str();
  sub->add_option("--seq-len", f.seq_len, "Tokens per sequence")->capture_default_str();
  sub->add_option("--lr", f.lr, "SGD learning rate")->capture_default_str();
  sub->add_option("--eval-every", f.eval_every)->capture_default_str();
  sub->add_option("--eval-sequences", f.eval_sequences)->capture_default_str();
  sub->add_option("--d", f.d, "Token width")->capture_default_str();
  sub->add_option("--d-ff", f.d_ff, "Expert hidden width")->capture_default_str();
  sub->add_option("--experts", f.experts)->capture_default_str();
  sub->add_option("--clusters", f.clusters)->capture_default_str();
  sub->add_option("--noise", f.noise, "Target noise stddev")->capture_default_str();
  sub->add_option("--corrupt", f.corrupt, "Fraction of corrupted tokens per sequence")
      ->capture_default_str();
  sub->add_option("--activation", f.activation, "tanh or linear")->capture_default_str();
  sub->add_option("--init", f.init, "Initial parameter checkpoint (JSON)");
}

inline TrainConfig make_config(const TrainFlags& f, Mode mode, std::uint64_t seed) {
  TrainConfig c;
  c.mode = mode;
  c.alpha = f.alpha;
  c.budget = RoutingBudget::parse(f.budget);
  c.scope = parse_scope(f.scope);
  c.steps = f.steps;
  c.batch = f.batch;
  c.seq_len = f.seq_len;
  c.learning_rate = f.lr;
  c.seed = seed;
  c.eval_every = f.eval_every;
  c.eval_sequences = f.eval_sequences;
  return c;
}

// Task, model and data seeds are fixed children of --seed.
inline SyntheticTask make_task_from(const TrainFlags& f, std::uint64_t seed) {
  return make_task(Rng(seed).split(11).next_u64(), f.clusters, f.d, f.noise, f.corrupt);
}

inline std::uint64_t model_seed(std::uint64_t seed) { return Rng(seed).split(12).next_u64(); }

inline MoeLayerParams initial_model(const TrainFlags& f, std::uint64_t seed) {
  if (!f.init.empty()) return checkpoint::load(read_text(f.init));
  return init_model(f.d, {f.d_ff, f.experts, parse_activation(f.activation)}, model_seed(seed));
}

inline std::vector<Mode> parse_modes(const std::string& list) {
  std::vector<Mode> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_mode(item));
  }
  if (out.empty()) throw std::invalid_argument("--modes is empty");
  return out;
}

inline int cmd_route(const std::string& scores_path, const std::string& mode_s, double alpha,
                     const std::string& budget_s, const std::string& scope_s,
                     std::size_t sequences, const std::string& input, const std::string& ec_map,
                     const Shared& s, std::ostream& out) {
  Matrix m;
  try {
    m = read_csv_file(scores_path);
  } catch (const std::runtime_error& e) {
    throw UsageError(e.what());
  }
  const Mode mode = parse_mode(mode_s);
  const Scope scope = parse_scope(scope_s);
  const RoutingBudget budget = RoutingBudget::parse(budget_s);
  CompatibilityMatrix scores{m, Basis::raw_logits};
  if (input == "logits") {
    switch (mode) {
      case Mode::token_choice: scores = token_choice_scores(scores); break;
      case Mode::expert_choice:
        if (ec_map == "softmax-columns") {
          scores = expert_choice_softmax_columns(scores, sequences);
        } else if (ec_map == "sigmoid") {
          scores = expert_choice_scores(scores);
        } else {
          throw std::invalid_argument("--ec-mapping must be sigmoid or softmax-columns");
        }
        break;
      case Mode::usmoe: scores = unified_scores(scores, UnifiedScoreConfig{alpha}); break;
    }
  } else if (input != "scores") {
    throw std::invalid_argument("--input must be logits or scores");
  }
  const RoutingPlan plan = route(mode, scores, budget, scope, sequences);
  const std::size_t T = plan.seq_len();
  const auto diag = diagnostics(plan, T, plan.experts, sequences);

  Matrix mask(plan.tokens, plan.experts);
  for (std::size_t f = 0; f < plan.mask.size(); ++f) mask.data()[f] = plan.mask[f];
  fs::create_directories(s.out);
  report::write_file(fs::path(s.out) / "mask.csv", to_csv(mask));
  report::write_file(fs::path(s.out) / "gates.csv", to_csv(plan.gates));

  nlohmann::json pairs = nlohmann::json::array();
  for (std::size_t f : plan.selected_flat()) pairs.push_back({f / plan.experts, f % plan.experts});
  nlohmann::json summary = {{"mode", to_string(mode)},
                            {"scope", to_string(scope)},
                            {"score_basis", to_string(scores.basis)},
                            {"budget", budget.to_string()},
                            {"budget_used", plan.budget_used},
                            {"objective", plan.objective(scores.scores)},
                            {"drops", diag.dropped_tokens},
                            {"drop_ratio", diag.drop_ratio},
                            {"experts_per_sequence", diag.experts_per_sequence},
                            {"load_per_expert", diag.load_per_expert},
                            {"load_cv", diag.load_cv},
                            {"selected_pairs", pairs}};
  bool ok = true;
  if (mode == Mode::usmoe) {
    ok = satisfies_topk_certificate(plan, scores.scores);
    summary["certificate"] = ok;
  }
  write_json(fs::path(s.out) / "summary.json", summary);
  out << summary.dump(2) << "\n";
  return ok ? kOk : kPropertyFailure;
}

inline std::size_t default_instances(const std::string& suite) {
  if (suite == "proposition") return 500;
  if (suite == "forward-equivalence") return 200;
  if (suite == "gradcheck") return 20;
  return 1000;
}

inline int write_suite(const suites::SuiteReport& r, const Shared& s, std::ostream& out) {
  fs::create_directories(s.out);
  const std::string stem = r.name == "gradcheck" ? "gradcheck" : "verify_" + r.name;
  write_json(fs::path(s.out) / (stem + ".json"), suites::to_json(r));
  if (!r.failures.empty()) {
    write_json(fs::path(s.out) / ("counterexamples_" + r.name + ".json"), r.failures);
  }
  out << r.name << ": " << r.passed << "/" << r.instances << " passed, certificate violations "
      << r.certificate_violations << "/" << r.certificate_checks << (r.ok() ? "  [PASS]" : "  [FAIL]")
      << "\n";
  return r.ok() ? kOk : kPropertyFailure;
}

inline int cmd_verify(const std::string& suite, std::size_t instances, const Shared& s,
                      std::ostream& out) {
  std::vector<std::string> names;
  if (suite == "all") {
    names = {"proposition", "dominance", "topk-invariance", "forward-equivalence"};
  } else {
    names = {suite};
  }
  int code = kOk;
  nlohmann::json all = nlohmann::json::array();
  for (std::size_t k = 0; k < names.size(); ++k) {
    const std::size_t n = instances ? instances : default_instances(names[k]);
    const auto r = suites::run_suite(names[k], n, Rng(s.seed).split(k).next_u64());
    all.push_back(suites::to_json(r));
    if (write_suite(r, s, out) != kOk) code = kPropertyFailure;
  }
  write_json(fs::path(s.out) / "verify_report.json",
             {{"version", kVersion}, {"seed", s.seed}, {"ok", code == kOk}, {"suites", all}});
  return code;
}

inline int cmd_gradcheck(std::size_t instances, const suites::GradcheckSuiteOptions& opt,
                         const Shared& s, std::ostream& out) {
  return write_suite(suites::gradcheck_suite(instances, s.seed, opt), s, out);
}

inline int cmd_train(const TrainFlags& f, const Shared& s, std::ostream& out) {
  const auto task = make_task_from(f, s.seed);
  const auto init = initial_model(f, s.seed);
  const auto cfg = make_config(f, parse_mode(f.mode), s.seed);
  MoeLayerParams final_model;
  const auto rep = train(task, init, cfg, &final_model);
  const fs::path dir(s.out);
  fs::create_directories(dir);
  write_json(dir / "run_report.json", to_json(rep));
  report::write_file(dir / "init_checkpoint.json", checkpoint::save(init) + "\n");
  report::write_file(dir / "final_checkpoint.json", checkpoint::save(final_model) + "\n");
  report::emit_plots(rep, dir);
  out << to_string(cfg.mode) << ": final eval loss " << format_double(rep.final_eval_loss)
      << (rep.diverged ? " (diverged: " + rep.message + ")" : "") << "\n";
  return rep.diverged || rep.certificate_violations ? kPropertyFailure : kOk;
}

inline int cmd_compare(const TrainFlags& f, const Shared& s, std::ostream& out) {
  const auto task = make_task_from(f, s.seed);
  std::vector<TrainConfig> cfgs;
  for (Mode m : parse_modes(f.modes)) cfgs.push_back(make_config(f, m, s.seed));
  ComparisonReport rep;
  if (f.init.empty()) {
    rep = compare_modes(task, model_seed(s.seed), cfgs,
                        {f.d_ff, f.experts, parse_activation(f.activation)});
  } else {
    const auto init = initial_model(f, s.seed);
    rep.model_seed = 0;
    for (const auto& c : cfgs) rep.runs.push_back(train(task, init, c));
  }
  const fs::path dir(s.out);
  fs::create_directories(dir);
  write_json(dir / "compare.json", to_json(rep));
  report::emit_plots(rep, dir);
  int code = kOk;
  for (const auto& r : rep.runs) {
    out << to_string(r.config.mode) << ": final eval loss " << format_double(r.final_eval_loss)
        << "\n";
    if (r.diverged || r.certificate_violations) code = kPropertyFailure;
  }
  return code;
}

inline int cmd_report(const std::string& in, const std::string& mask_path, std::size_t sequences,
                      const Shared& s, std::ostream& out) {
  const fs::path dir(s.out);
  if (!mask_path.empty()) {
    Matrix m;
    try {
      m = read_csv_file(mask_path);
    } catch (const std::runtime_error& e) {
      throw UsageError(e.what());
    }
    if (sequences == 0 || m.rows() % sequences != 0) {
      throw std::invalid_argument("mask rows do not split into --sequences");
    }
    RoutingPlan plan(m.rows(), m.cols(), Mode::usmoe, Scope::sequence, sequences);
    for (std::size_t f = 0; f < m.size(); ++f) {
      const double v = m.data()[f];
      if (v != 0.0 && v != 1.0) throw std::invalid_argument("mask entries must be 0 or 1");
      if (v == 1.0) plan.select(f, 1.0);
    }
    const auto d = diagnostics(plan, m.rows() / sequences, m.cols(), sequences);
    const nlohmann::json j = {{"drop_ratio", d.drop_ratio},
                              {"dropped_tokens", d.dropped_tokens},
                              {"experts_per_sequence", d.experts_per_sequence},
                              {"load_per_expert", d.load_per_expert},
                              {"load_cv", d.load_cv},
                              {"budget_used", d.budget_used}};
    fs::create_directories(dir);
    write_json(dir / "diagnostics.json", j);
    out << j.dump(2) << "\n";
    return kOk;
  }
  if (in.empty()) throw UsageError("report needs --in <report.json> or --mask <csv>");
  const auto j = read_json(in);
  try {
    if (j.contains("runs")) {
      for (const auto& p : report::emit_plots(report::comparison_from_json(j), dir))
        out << p.string() << "\n";
    } else {
      for (const auto& p : report::emit_plots(report::run_report_from_json(j), dir))
        out << p.string() << "\n";
    }
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("'" + in + "' is not a run or comparison report: " + e.what());
  }
  return kOk;
}

}  // namespace detail

// Entry point. Returns 0 on success, 1 when a checked property fails and 2 on
// usage errors (bad flags, unreadable or malformed inputs).
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  using namespace detail;
  CLI::App app{"Sparse mixture-of-experts routing laboratory", "usmoe"};
  app.set_config("--config", "", "TOML/INI file supplying option values; flags override it");
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();

  Shared shared;

  auto* route_cmd = app.add_subcommand("route", "Route one score matrix and emit mask/gates CSV");
  std::string scores_path, mode = "usmoe", budget, scope = "sequence", input = "logits",
                           ec_map = "sigmoid";
  double alpha = UnifiedScoreConfig::kDefaultAlpha;
  std::size_t sequences = 1;
  route_cmd->add_option("--scores", scores_path, "CSV matrix, one token per row")->required();
  route_cmd->add_option("--mode", mode, "tc, ec or usmoe")->capture_default_str();
  route_cmd->add_option("--alpha", alpha)->capture_default_str();
  route_cmd->add_option("--budget", budget, "Pairs per sequence c, or '1.5x'")->required();
  route_cmd->add_option("--scope", scope, "sequence or batch")->capture_default_str();
  route_cmd->add_option("--sequences", sequences, "Number of stacked sequences")->capture_default_str();
  route_cmd->add_option("--input", input, "logits (map by mode) or scores (use as-is)")
      ->capture_default_str();
  route_cmd->add_option("--ec-mapping", ec_map, "sigmoid or softmax-columns")->capture_default_str();
  add_shared(route_cmd, shared);

  auto* verify_cmd = app.add_subcommand("verify", "Run seeded property suites");
  std::string suite = "all";
  std::size_t instances = 0;
  verify_cmd
      ->add_option("--suite", suite,
                   "proposition, dominance, topk-invariance, forward-equivalence, gradcheck or all")
      ->capture_default_str();
  verify_cmd->add_option("--instances", instances, "Instances per suite (0 = suite default)");
  add_shared(verify_cmd, shared);

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient and Jacobian checks");
  suites::GradcheckSuiteOptions gopt;
  std::size_t grad_instances = 20;
  grad_cmd->add_option("--instances", grad_instances)->capture_default_str();
  grad_cmd->add_option("--d", gopt.d)->capture_default_str();
  grad_cmd->add_option("--d-ff", gopt.d_ff)->capture_default_str();
  grad_cmd->add_option("--experts", gopt.num_experts)->capture_default_str();
  grad_cmd->add_option("--tokens", gopt.tokens)->capture_default_str();
  add_shared(grad_cmd, shared);

  TrainFlags tflags;
  auto* train_cmd = app.add_subcommand("train", "Train one routing mechanism on the synthetic task");
  add_train_flags(train_cmd, tflags, false);
  add_shared(train_cmd, shared);

  TrainFlags cflags;
  auto* compare_cmd = app.add_subcommand("compare", "Train several mechanisms from one initialization");
  add_train_flags(compare_cmd, cflags, true);
  add_shared(compare_cmd, shared);

  auto* report_cmd = app.add_subcommand("report", "Emit CSV/SVG curves or routing diagnostics");
  std::string report_in, mask_path;
  std::size_t report_sequences = 1;
  report_cmd->add_option("--in", report_in, "run_report.json or compare.json");
  report_cmd->add_option("--mask", mask_path, "0/1 mask CSV to summarize");
  report_cmd->add_option("--sequences", report_sequences)->capture_default_str();
  add_shared(report_cmd, shared);

  if (argc <= 1) {
    out << app.help();
    return kUsageError;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "usmoe: " << e.what() << "\n";
    return kUsageError;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    echo_config(app, *sub, shared);
    if (sub == route_cmd) {
      return cmd_route(scores_path, mode, alpha, budget, scope, sequences, input, ec_map, shared, out);
    }
    if (sub == verify_cmd) return cmd_verify(suite, instances, shared, out);
    if (sub == grad_cmd) return cmd_gradcheck(grad_instances, gopt, shared, out);
    if (sub == train_cmd) return cmd_train(tflags, shared, out);
    if (sub == compare_cmd) return cmd_compare(cflags, shared, out);
    if (sub == report_cmd) return cmd_report(report_in, mask_path, report_sequences, shared, out);
  } catch (const UsageError& e) {
    err << "usmoe: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::invalid_argument& e) {
    err << "usmoe: " << e.what() << "\n";
    return kUsageError;
  }
  return kUsageError;
}

inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  std::vector<const char*> argv;
  argv.push_back("usmoe");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace usmoe::cli
