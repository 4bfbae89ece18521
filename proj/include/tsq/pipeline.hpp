// Copyright 2026 The tsq Authors.
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

// End-to-end orchestration: fisher -> calibrate -> search -> report, with
// every stage persisting its artifacts so later stages can be rerun alone.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tsq/calib.hpp"
#include "tsq/error.hpp"
#include "tsq/fisher.hpp"
#include "tsq/io.hpp"
#include "tsq/quant.hpp"
#include "tsq/runtime.hpp"
#include "tsq/search.hpp"
#include "tsq/toy_dit.hpp"

namespace tsq {

/// A block of `count` consecutive seeds starting at `base`.
struct SeedBlock {
  std::uint64_t base = 0;
  std::size_t count = 1;

  std::vector<std::uint64_t> seeds() const {
    std::vector<std::uint64_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = base + i;
    return out;
  }
};

struct PipelineConfig {
  ModelSpec model;
  int weight_bits = 4;
  double damping = kDefaultDamping;
  double tau = 1.0;
  SearchConfig search;
  SeedBlock fisher{100, 8};
  SeedBlock calibration{200, 16};
  SeedBlock step_loss{300, 8};
  SeedBlock selection{400, 8};
  SeedBlock evaluation{500, 64};
  std::filesystem::path output_dir = "tsq_out";

  void validate() const {
    model.validate();
    QuantSpec::weights(weight_bits).validate();
    if (!(damping >= 0.0) || !std::isfinite(damping))
      throw ParameterError("quant.damping must be finite and >= 0");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ParameterError("fisher.tau must be > 0");
    search.validate();
    for (const auto* block : {&fisher, &calibration, &step_loss, &selection, &evaluation}) {
      if (block->count < 1) throw ParameterError("every sample count must be >= 1");
    }
  }
};

namespace detail {

/// Reads an object's keys, rejecting any that were not consumed.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ParameterError(path_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const Json::exception&) {
      throw ParameterError(path_ + "." + key + " has the wrong type");
    }
  }

  std::optional<StrictObject> child(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return StrictObject(j_.at(key), path_ + "." + key);
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ParameterError("unknown config key " + path_ + "." + key);
    }
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

/// Parses the JSON config document. Absent keys keep their defaults;
/// unknown keys and ill-typed values are errors.
inline PipelineConfig parse_config(const Json& j) {
  PipelineConfig c;
  detail::StrictObject root(j, "config");
  if (auto m = root.child("model")) {
    m->get("num_layers", c.model.num_layers);
    m->get("hidden_dim", c.model.hidden_dim);
    m->get("num_timesteps", c.model.num_timesteps);
    m->get("token_count", c.model.token_count);
    m->get("seed", c.model.seed);
    m->get("shift_scale", c.model.shift_scale);
    m->get("outlier_scale", c.model.outlier_scale);
    m->finish();
  }
  if (auto q = root.child("quant")) {
    q->get("palette", c.search.palette);
    q->get("weight_bits", c.weight_bits);
    q->get("damping", c.damping);
    q->finish();
  }
  if (auto f = root.child("fisher")) {
    f->get("tau", c.tau);
    f->finish();
  }
  if (auto s = root.child("search")) {
    s->get("beam_width", c.search.beam_width);
    s->get("candidates", c.search.num_candidates);
    s->get("b_target", c.search.b_target);
    s->finish();
  }
  struct Block {
    const char* name;
    SeedBlock* block;
  };
  const Block blocks[] = {{"fisher", &c.fisher},
                          {"calibration", &c.calibration},
                          {"step_loss", &c.step_loss},
                          {"selection", &c.selection},
                          {"evaluation", &c.evaluation}};
  if (auto s = root.child("seeds")) {
    for (const auto& b : blocks) s->get(b.name, b.block->base);
    s->finish();
  }
  if (auto s = root.child("samples")) {
    for (const auto& b : blocks) s->get(b.name, b.block->count);
    s->finish();
  }
  std::string out = c.output_dir.string();
  root.get("output_dir", out);
  c.output_dir = out;
  root.finish();
  c.validate();
  return c;
}

inline Json config_to_json(const PipelineConfig& c) {
  Json seeds, samples;
  const std::pair<const char*, const SeedBlock*> blocks[] = {{"fisher", &c.fisher},
                                                             {"calibration", &c.calibration},
                                                             {"step_loss", &c.step_loss},
                                                             {"selection", &c.selection},
                                                             {"evaluation", &c.evaluation}};
  for (const auto& [name, b] : blocks) {
    seeds[name] = b->base;
    samples[name] = b->count;
  }
  return {{"model", model_spec_to_json(c.model)},
          {"quant",
           {{"palette", c.search.palette}, {"weight_bits", c.weight_bits}, {"damping", c.damping}}},
          {"fisher", {{"tau", c.tau}}},
          {"search",
           {{"beam_width", c.search.beam_width},
            {"candidates", c.search.num_candidates},
            {"b_target", c.search.b_target}}},
          {"seeds", seeds},
          {"samples", samples},
          {"output_dir", c.output_dir.string()}};
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  Json j;
  try {
    j = Json::parse(read_text_file(path));
  } catch (const Json::parse_error& e) {
    throw ParameterError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

/// Decimal rendering with 17 significant digits.
inline std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Rendering with `digits` significant figures, e.g. 16/3.1 -> "5.16".
inline std::string sig_figs(double v, int digits) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

/// Full-precision bits over quantized bits.
inline double reduction_ratio(double average_bits) {
  if (!(average_bits > 0.0)) throw ParameterError("average bit-width must be positive");
  return 16.0 / average_bits;
}

enum class WeightMode { kMinMax, kUniformCalib, kFisherCalib };

inline const char* to_string(WeightMode m) {
  switch (m) {
    case WeightMode::kMinMax: return "minmax";
    case WeightMode::kUniformCalib: return "uniform_calib";
    case WeightMode::kFisherCalib: return "fisher_calib";
  }
  return "?";
}

struct CompareRow {
  std::string schedule;
  WeightMode weights;
  double avg_bits;
  double error;
};

/// End-to-end error of each schedule under each weight variant.
inline std::vector<CompareRow> compare_policies(
    const Model& reference, const std::map<WeightMode, const Model*>& variants,
    const ActivationQuantTable& table,
    const std::vector<std::pair<std::string, BitSchedule>>& schedules,
    std::span<const std::uint64_t> seeds) {
  for (const auto& [name, s] : schedules) {
    if (s.timesteps != reference.num_timesteps() || s.layers != reference.num_layers()) {
      throw ShapeError("schedule '" + name + "' is " + std::to_string(s.timesteps) + "x" +
                       std::to_string(s.layers) + ", model is " +
                       std::to_string(reference.num_timesteps()) + "x" +
                       std::to_string(reference.num_layers()));
    }
  }
  std::vector<CompareRow> rows;
  for (const auto& [name, s] : schedules) {
    for (const auto& [mode, model] : variants) {
      rows.push_back({name, mode, s.avg_bits,
                      trajectory_error(reference, *model, table, s, seeds)});
    }
  }
  return rows;
}

inline void write_compare_csv(std::ostream& os, std::span<const CompareRow> rows) {
  os << "schedule,weights,avg_bits,end_to_end_error\n";
  for (const auto& r : rows) {
    os << r.schedule << ',' << to_string(r.weights) << ',' << num(r.avg_bits) << ','
       << num(r.error) << '\n';
  }
}

/// Holds every intermediate the stages produce. Anything missing is loaded
/// from the output directory or recomputed deterministically on demand.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config) : config_(std::move(config)) {
    config_.validate();
    std::filesystem::create_directories(config_.output_dir);
  }

  const PipelineConfig& config() const { return config_; }
  std::filesystem::path path(const char* name) const { return config_.output_dir / name; }

  const Model& model() {
    if (!model_) model_ = init_model(config_.model);
    return *model_;
  }

  const std::vector<ActivationTrace>& traces() {
    if (!traces_) {
      const auto seeds = config_.calibration.seeds();
      traces_ = collect_traces(model(), seeds);
    }
    return *traces_;
  }

  const ActivationQuantTable& activation_table() {
    if (!table_) {
      table_ = ActivationQuantTable(traces(), config_.search.palette, model().num_timesteps(),
                                    model().num_layers());
    }
    return *table_;
  }

  // --- fisher -------------------------------------------------------------

  const FisherMap& run_fisher() {
    timed("fisher", [&] {
      const auto seeds = config_.fisher.seeds();
      fisher_ = estimate_fisher(model(), seeds);
      save_model(path("model.json"), model());
      write_json(path("fisher_map.json"), fisher_to_json(*fisher_));
      std::ostringstream csv;
      write_heatmap_csv(csv, normalize_heatmap(*fisher_), model());
      write_text_file(path("fisher.csv"), csv.str());
    });
    return *fisher_;
  }

  const FisherMap& fisher() {
    if (!fisher_) {
      if (!std::filesystem::exists(path("fisher_map.json"))) {
        throw IoError("fisher_map.json not found in " + config_.output_dir.string() +
                      "; run the fisher stage first");
      }
      FisherMap f = fisher_from_json(read_json(path("fisher_map.json")));
      if (f.model_fingerprint != model_fingerprint(model())) {
        throw IoError("fisher_map.json was computed for a different model");
      }
      fisher_ = std::move(f);
    }
    return *fisher_;
  }

  TemporalWeights weights() { return temporal_weights(fisher(), config_.tau); }

  // --- calibrate ----------------------------------------------------------

  const CalibratedModel& run_calibrate() {
    timed("calibrate", [&] {
      fisher_calib_ = calibrate(weights());
      save_model(path("calibrated_model.json"), fisher_calib_->model);
      std::ostringstream csv;
      write_calib_report_csv(csv, fisher_calib_->report);
      write_text_file(path("calib_report.csv"), csv.str());
    });
    return *fisher_calib_;
  }

  const CalibratedModel& fisher_calibrated() {
    if (!fisher_calib_) fisher_calib_ = calibrate(weights());
    return *fisher_calib_;
  }

  /// Fisher-calibrated weights, read from calibrated_model.json when the
  /// calibrate stage ran in an earlier process.
  const Model& fisher_quantized() {
    if (fisher_calib_) return fisher_calib_->model;
    if (!loaded_quantized_) {
      if (!std::filesystem::exists(path("calibrated_model.json"))) return fisher_calibrated().model;
      Model q = load_model(path("calibrated_model.json"));
      if (!(q.spec == model().spec)) {
        throw IoError("calibrated_model.json was produced from a different model spec");
      }
      loaded_quantized_ = std::move(q);
    }
    return *loaded_quantized_;
  }

  const CalibratedModel& uniform_calibrated() {
    if (!uniform_calib_) {
      uniform_calib_ =
          calibrate(TemporalWeights::uniform(model().num_timesteps(), model().num_layers()));
    }
    return *uniform_calib_;
  }

  const Model& minmax_model() {
    if (!minmax_) minmax_ = minmax_quantize_model(model(), config_.weight_bits);
    return *minmax_;
  }

  // --- search -------------------------------------------------------------

  const BitSchedule& run_search() {
    timed("search", [&] {
      const Model& quantized = fisher_quantized();
      const auto loss_seeds = config_.step_loss.seeds();
      const auto sel_seeds = config_.selection.seeds();
      StepLossEvaluator evaluator(model(), quantized, activation_table(), loss_seeds);
      const auto candidates = candidates_for_all_steps(fisher(), config_.search);
      const auto frontier = beam_search(candidates, evaluator.as_function(),
                                        config_.search.beam_width, config_.search.b_target);
      const auto counts = parameter_counts(model());
      const EndToEndFn e2e = [&](const BitSchedule& s) {
        return trajectory_error(model(), quantized, activation_table(), s, sel_seeds);
      };
      BitSchedule s = final_select(frontier, config_.search, model().num_timesteps(),
                                   model().num_layers(), counts, e2e, evaluator.as_function());
      s.seeds = loss_seeds;
      s.seeds.insert(s.seeds.end(), sel_seeds.begin(), sel_seeds.end());
      frontier_size_ = frontier.size();
      schedule_ = std::move(s);
      write_json(path("schedule.json"), schedule_to_json(*schedule_));
    });
    return *schedule_;
  }

  const BitSchedule& schedule() {
    if (!schedule_) {
      if (!std::filesystem::exists(path("schedule.json"))) {
        throw IoError("schedule.json not found; run the search stage first");
      }
      schedule_ = schedule_from_json(read_json(path("schedule.json")));
    }
    return *schedule_;
  }

  /// All-layers, all-timesteps schedule at the widest palette entry that
  /// still fits the budget.
  BitSchedule uniform_baseline() {
    int bits = config_.search.palette.front();
    for (int b : config_.search.palette)
      if (b <= config_.search.b_target) bits = b;
    return uniform_schedule(model(), bits);
  }

  std::vector<CompareRow> compare(const BitSchedule& a, const BitSchedule& b,
                                  const std::string& name_a = "searched",
                                  const std::string& name_b = "uniform") {
    const std::map<WeightMode, const Model*> variants = {
        {WeightMode::kMinMax, &minmax_model()},
        {WeightMode::kUniformCalib, &uniform_calibrated().model},
        {WeightMode::kFisherCalib, &fisher_calibrated().model}};
    const auto seeds = config_.evaluation.seeds();
    return compare_policies(model(), variants, activation_table(), {{name_a, a}, {name_b, b}},
                            seeds);
  }

  // --- report -------------------------------------------------------------

  Json run_report() {
    Json report;
    timed("report", [&] { report = build_report(); });
    Json seconds = Json::object();
    for (const auto& [stage, s] : stage_seconds_) seconds[stage] = num(s);
    report["stage_seconds"] = seconds;
    write_json(path("report.json"), report);
    return report;
  }

  /// Runs all stages in order, recording progress in MANIFEST.
  Json run_all() {
    completed_.clear();
    run_stage("fisher", [&] { run_fisher(); });
    run_stage("calibrate", [&] { run_calibrate(); });
    run_stage("search", [&] { run_search(); });
    Json report;
    run_stage("report", [&] { report = run_report(); });
    write_manifest("complete");
    return report;
  }

  /// Runs one stage; on failure writes a MANIFEST naming the stage and
  /// rethrows.
  void run_stage(const std::string& name, const std::function<void()>& body) {
    try {
      body();
      std::erase(completed_, name);
      completed_.push_back(name);
      write_manifest("running");
    } catch (const std::exception& e) {
      write_manifest("failed at " + name + ": " + e.what());
      throw;
    }
  }

  /// Picks up the stage list of an earlier MANIFEST, so single-stage runs
  /// extend the record instead of replacing it.
  void resume_manifest() {
    const auto p = config_.output_dir / "MANIFEST";
    if (!std::filesystem::exists(p)) return;
    std::istringstream is(read_text_file(p));
    const std::string prefix = "completed: ";
    for (std::string line; std::getline(is, line);) {
      if (line.rfind(prefix, 0) == 0) {
        const std::string stage = line.substr(prefix.size());
        std::erase(completed_, stage);
        completed_.push_back(stage);
      }
    }
  }

  void write_manifest(const std::string& status) const {
    std::ostringstream os;
    os << "status: " << status << '\n';
    for (const auto& s : completed_) os << "completed: " << s << '\n';
    write_text_file(config_.output_dir / "MANIFEST", os.str());
  }

 private:
  CalibratedModel calibrate(const TemporalWeights& w) {
    const std::vector<QuantSpec> specs(model().num_layers(), QuantSpec::weights(config_.weight_bits));
    return calibrate_model(model(), traces(), w, specs, config_.damping);
  }

  void timed(const std::string& stage, const std::function<void()>& body) {
    const auto start = std::chrono::steady_clock::now();
    body();
    stage_seconds_[stage] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }

  Json build_report() {
    const Model& m = model();
    const FisherMap& f = fisher();
    const BitSchedule& s = schedule();
    const auto heat = normalize_heatmap(f);

    double fmin = f.scores.at(1, 0), fmax = fmin, fsum = 0.0;
    std::size_t heterogeneous = 0;
    for (std::size_t l = 0; l < f.layers(); ++l) {
      bool varies = false;
      for (std::size_t t = 1; t <= f.timesteps(); ++t) {
        fmin = std::min(fmin, f.scores.at(t, l));
        fmax = std::max(fmax, f.scores.at(t, l));
        fsum += f.scores.at(t, l);
        varies = varies || heat.at(t, l) != heat.at(1, l);
      }
      heterogeneous += varies ? 1 : 0;
    }

    const TemporalWeights w = weights();
    const auto& fc = fisher_calibrated();
    const auto& uc = uniform_calibrated();
    Json layers = Json::array();
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
      auto mean_of = [](const std::vector<double>& v) {
        double t = 0.0;
        for (double x : v) t += x;
        return t / static_cast<double>(v.size());
      };
      layers.push_back({{"layer", std::to_string(l)},
                        {"name", m.layer_name(l)},
                        {"mean_error_fisher", num(mean_of(fc.layers[l].timestep_errors))},
                        {"mean_error_uniform", num(mean_of(uc.layers[l].timestep_errors))}});
    }

    std::map<int, std::size_t> histogram;
    for (const auto& row : s.grid)
      for (int b : row) ++histogram[b];
    Json fractions = Json::object();
    for (const auto& [b, n] : histogram) {
      fractions[std::to_string(b)] =
          num(static_cast<double>(n) / static_cast<double>(s.timesteps * s.layers));
    }

    const auto eval_seeds = config_.evaluation.seeds();
    const BitSchedule baseline = uniform_baseline();
    const double searched_err =
        trajectory_error(m, fc.model, activation_table(), s, eval_seeds);
    const double baseline_err =
        trajectory_error(m, fc.model, activation_table(), baseline, eval_seeds);

    // Weights are static, so every parameter shares one bit-width.
    const double weight_bits = static_cast<double>(config_.weight_bits);
    const double flops = reduction_ratio(s.param_weighted_avg_bits);
    const double size = reduction_ratio(weight_bits);

    return {
        {"format", "tsq-report"},
        {"model",
         {{"num_layers", std::to_string(m.num_layers())},
          {"hidden_dim", std::to_string(m.spec.hidden_dim)},
          {"num_timesteps", std::to_string(m.num_timesteps())},
          {"token_count", std::to_string(m.spec.token_count)},
          {"seed", std::to_string(m.spec.seed)},
          {"fingerprint", std::to_string(model_fingerprint(m))}}},
        {"fisher",
         {{"min", num(fmin)},
          {"max", num(fmax)},
          {"mean", num(fsum / static_cast<double>(f.timesteps() * f.layers()))},
          {"heterogeneous_layers", std::to_string(heterogeneous)},
          {"tau", num(config_.tau)}}},
        {"calibration",
         {{"weight_bits", std::to_string(config_.weight_bits)},
          {"top20_error_fisher", num(top_alpha_mean_error(fc, w, 0.2))},
          {"top20_error_uniform", num(top_alpha_mean_error(uc, w, 0.2))},
          {"layers", layers}}},
        {"schedule",
         {{"avg_bits", num(s.avg_bits)},
          {"param_weighted_avg_bits", num(s.param_weighted_avg_bits)},
          {"cumulative_loss", num(s.cumulative_loss)},
          {"selection_error", num(s.end_to_end_error)},
          {"bit_fractions", fractions},
          {"frontier_size", std::to_string(frontier_size_)}}},
        {"evaluation",
         {{"searched_error", num(searched_err)},
          {"baseline_bits", std::to_string(baseline.grid.front().front())},
          {"baseline_error", num(baseline_err)},
          {"relative_improvement", num(1.0 - searched_err / baseline_err)}}},
        {"avg_bits", num(s.avg_bits)},
        {"param_weighted_avg_bits", num(s.param_weighted_avg_bits)},
        {"weight_avg_bits", num(weight_bits)},
        {"flops_reduction", num(flops)},
        {"flops_reduction_uniform_avg", num(reduction_ratio(s.avg_bits))},
        {"size_reduction", num(size)},
        {"flops_reduction_3sf", sig_figs(flops, 3)},
        {"size_reduction_3sf", sig_figs(size, 3)},
    };
  }

  PipelineConfig config_;
  std::optional<Model> model_;
  std::optional<std::vector<ActivationTrace>> traces_;
  std::optional<ActivationQuantTable> table_;
  std::optional<FisherMap> fisher_;
  std::optional<CalibratedModel> fisher_calib_;
  std::optional<CalibratedModel> uniform_calib_;
  std::optional<Model> loaded_quantized_;
  std::optional<Model> minmax_;
  std::optional<BitSchedule> schedule_;
  std::size_t frontier_size_ = 0;
  std::map<std::string, double> stage_seconds_;
  std::vector<std::string> completed_;
};

/// Exit status for an error raised anywhere in the pipeline.
inline int exit_code_for(const Error& e) {
  switch (e.kind()) {
    case ErrorKind::kParameter: return 2;
    case ErrorKind::kNumerical: return 3;
    case ErrorKind::kInfeasible: return 4;
    default: return 1;
  }
}

}  // namespace tsq
