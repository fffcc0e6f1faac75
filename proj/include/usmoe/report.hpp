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
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "usmoe/train.hpp"

namespace usmoe::report {

struct Series {
  std::string name;
  std::vector<double> values;
};

namespace detail {
inline std::string fixed(double v, int prec = 2) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}
}  // namespace detail

// Minimal SVG line chart; x is the sample index. Non-finite samples are skipped.
inline std::string svg_line_chart(const std::string& title, const std::vector<Series>& series,
                                  const std::string& x_label = "step") {
  constexpr double W = 640, H = 400, L = 70, R = 130, Tm = 40, B = 50;
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (const auto& s : series) {
    n = std::max(n, s.values.size());
    for (double v : s.values)
      if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
  }
  if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  if (hi - lo < 1e-12) hi = lo + 1.0;
  const double xs = n > 1 ? (W - L - R) / double(n - 1) : 0.0;
  auto px = [&](std::size_t i) { return L + xs * double(i); };
  auto py = [&](double v) { return Tm + (H - Tm - B) * (1.0 - (v - lo) / (hi - lo)); };
  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n";
  out += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
  out += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" +
         title + "</text>\n";
  out += "<line x1=\"70\" y1=\"350\" x2=\"510\" y2=\"350\" stroke=\"black\"/>\n";
  out += "<line x1=\"70\" y1=\"40\" x2=\"70\" y2=\"350\" stroke=\"black\"/>\n";
  out += "<text x=\"290\" y=\"385\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
         x_label + "</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = lo + (hi - lo) * t / 4.0;
    out += "<text x=\"64\" y=\"" + detail::fixed(py(v) + 4) +
           "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" +
           detail::fixed(v, 4) + "</text>\n";
  }
  out += "<text x=\"510\" y=\"365\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" +
         std::to_string(n ? n - 1 : 0) + "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = kColors[k % 6];
    std::string pts;
    for (std::size_t i = 0; i < series[k].values.size(); ++i) {
      const double v = series[k].values[i];
      if (!std::isfinite(v)) continue;
      pts += detail::fixed(px(i)) + "," + detail::fixed(py(v)) + " ";
    }
    out += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"1.2\" points=\"" + pts + "\"/>\n";
    out += "<text x=\"520\" y=\"" + std::to_string(60 + 18 * k) + "\" fill=\"" + color +
           "\" font-family=\"sans-serif\" font-size=\"12\">" + series[k].name + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

inline std::string loss_csv(const RunReport& r) {
  std::string s = "step,train_loss\n";
  for (std::size_t i = 0; i < r.train_loss.size(); ++i)
    s += std::to_string(i) + "," + format_double(r.train_loss[i]) + "\n";
  return s;
}

inline std::string eval_csv(const RunReport& r) {
  std::string s = "step,eval_loss\n";
  for (const auto& [step, loss] : r.eval_loss)
    s += std::to_string(step) + "," + format_double(loss) + "\n";
  return s;
}

inline std::string diagnostics_csv(const RunReport& r) {
  std::string s = "step,drop_ratio,experts_per_sequence,load_cv,budget_used\n";
  for (std::size_t i = 0; i < r.diagnostics.size(); ++i) {
    const auto& d = r.diagnostics[i];
    s += std::to_string(i) + "," + format_double(d.drop_ratio) + "," +
         format_double(d.experts_per_sequence) + "," + format_double(d.load_cv) + "," +
         std::to_string(d.budget_used) + "\n";
  }
  return s;
}

// Column labels are mode names, suffixed with the run index when repeated.
inline std::vector<std::string> run_labels(const ComparisonReport& c) {
  std::vector<std::string> labels;
  for (std::size_t k = 0; k < c.runs.size(); ++k) {
    std::string name = to_string(c.runs[k].config.mode);
    const bool repeated = std::count_if(c.runs.begin(), c.runs.end(), [&](const RunReport& r) {
                            return r.config.mode == c.runs[k].config.mode;
                          }) > 1;
    labels.push_back(repeated ? name + "_" + std::to_string(k) : name);
  }
  return labels;
}

// One row per step, one column per run.
inline std::string compare_loss_csv(const ComparisonReport& c) {
  const auto labels = run_labels(c);
  std::string s = "step";
  for (const auto& l : labels) s += "," + l;
  s += "\n";
  std::size_t steps = 0;
  for (const auto& r : c.runs) steps = std::max(steps, r.train_loss.size());
  for (std::size_t i = 0; i < steps; ++i) {
    s += std::to_string(i);
    for (const auto& r : c.runs) s += "," + (i < r.train_loss.size() ? format_double(r.train_loss[i]) : "");
    s += "\n";
  }
  return s;
}

inline std::string compare_diagnostics_csv(const ComparisonReport& c) {
  const auto labels = run_labels(c);
  std::string s = "step";
  for (const auto& l : labels) s += "," + l + "_drop_ratio," + l + "_experts_per_sequence";
  s += "\n";
  std::size_t steps = 0;
  for (const auto& r : c.runs) steps = std::max(steps, r.diagnostics.size());
  for (std::size_t i = 0; i < steps; ++i) {
    s += std::to_string(i);
    for (const auto& r : c.runs) {
      if (i < r.diagnostics.size()) {
        s += "," + format_double(r.diagnostics[i].drop_ratio) + "," +
             format_double(r.diagnostics[i].experts_per_sequence);
      } else {
        s += ",,";
      }
    }
    s += "\n";
  }
  return s;
}

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  out << content;
}

// Writes curve CSVs and one SVG chart per curve; returns the files written.
inline std::vector<std::filesystem::path> emit_plots(const RunReport& r,
                                                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<double> drop, eps, cv;
  for (const auto& d : r.diagnostics) {
    drop.push_back(d.drop_ratio);
    eps.push_back(d.experts_per_sequence);
    cv.push_back(d.load_cv);
  }
  std::vector<double> eval;
  for (const auto& e : r.eval_loss) eval.push_back(e.second);
  const std::string tag = to_string(r.config.mode);
  const std::vector<std::pair<std::string, std::string>> files = {
      {"loss.csv", loss_csv(r)},
      {"eval_loss.csv", eval_csv(r)},
      {"diagnostics.csv", diagnostics_csv(r)},
      {"train_loss.svg", svg_line_chart("train loss (" + tag + ")", {{tag, r.train_loss}})},
      {"eval_loss.svg", svg_line_chart("held-out loss (" + tag + ")", {{tag, eval}}, "evaluation")},
      {"drop_ratio.svg", svg_line_chart("token drop ratio (" + tag + ")", {{tag, drop}})},
      {"experts_per_sequence.svg",
       svg_line_chart("experts per sequence (" + tag + ")", {{tag, eps}})},
      {"load_cv.svg", svg_line_chart("expert load CV (" + tag + ")", {{tag, cv}})}};
  std::vector<std::filesystem::path> written;
  for (const auto& [name, content] : files) {
    write_file(dir / name, content);
    written.push_back(dir / name);
  }
  return written;
}

inline std::vector<std::filesystem::path> emit_plots(const ComparisonReport& c,
                                                     const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto labels = run_labels(c);
  std::vector<Series> loss, drop;
  for (std::size_t k = 0; k < c.runs.size(); ++k) {
    loss.push_back({labels[k], c.runs[k].train_loss});
    Series s{labels[k], {}};
    for (const auto& d : c.runs[k].diagnostics) s.values.push_back(d.drop_ratio);
    drop.push_back(std::move(s));
  }
  const std::vector<std::pair<std::string, std::string>> files = {
      {"compare_loss.csv", compare_loss_csv(c)},
      {"compare_diagnostics.csv", compare_diagnostics_csv(c)},
      {"compare_loss.svg", svg_line_chart("train loss by routing mechanism", loss)},
      {"compare_drop_ratio.svg", svg_line_chart("token drop ratio by routing mechanism", drop)}};
  std::vector<std::filesystem::path> written;
  for (const auto& [name, content] : files) {
    write_file(dir / name, content);
    written.push_back(dir / name);
  }
  return written;
}

// Inverse of to_json(TrainConfig).
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.mode = parse_mode(j.at("mode"));
  c.alpha = j.at("alpha");
  c.budget = [&] {
    const std::string b = j.at("budget");
    if (b.rfind("k=", 0) == 0) return RoutingBudget::per_token(std::stoull(b.substr(2)));
    if (b.rfind("cap=", 0) == 0) return RoutingBudget::per_expert(std::stoull(b.substr(4)));
    return RoutingBudget::parse(b);
  }();
  c.scope = parse_scope(j.at("scope"));
  c.steps = j.at("steps");
  c.batch = j.at("batch");
  c.seq_len = j.at("seq_len");
  c.learning_rate = j.at("learning_rate");
  c.seed = j.at("seed");
  c.eval_every = j.at("eval_every");
  c.eval_sequences = j.at("eval_sequences");
  return c;
}

inline RunReport run_report_from_json(const nlohmann::json& j) {
  RunReport r;
  r.config = train_config_from_json(j.at("config"));
  r.d = j.at("model").at("d");
  r.d_ff = j.at("model").at("d_ff");
  r.num_experts = j.at("model").at("num_experts");
  for (const auto& v : j.at("train_loss"))
    r.train_loss.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>());
  for (const auto& e : j.at("eval_loss")) {
    const auto& l = e.at("loss");
    r.eval_loss.emplace_back(e.at("step").get<std::size_t>(),
                             l.is_null() ? std::numeric_limits<double>::quiet_NaN() : l.get<double>());
  }
  const auto& d = j.at("diagnostics");
  for (std::size_t i = 0; i < d.at("drop_ratio").size(); ++i) {
    r.diagnostics.push_back({d["drop_ratio"][i], d["experts_per_sequence"][i], d["load_cv"][i],
                             d["budget_used"][i]});
  }
  const auto& f = j.at("final_eval_loss");
  r.final_eval_loss = f.is_null() ? std::numeric_limits<double>::quiet_NaN() : f.get<double>();
  r.certificate_checks = j.at("certificate_checks");
  r.certificate_violations = j.at("certificate_violations");
  r.diverged = j.at("diverged");
  r.message = j.at("message");
  return r;
}

inline ComparisonReport comparison_from_json(const nlohmann::json& j) {
  ComparisonReport c;
  c.model_seed = j.at("model_seed");
  for (const auto& r : j.at("runs")) c.runs.push_back(run_report_from_json(r));
  return c;
}

}  // namespace usmoe::report
