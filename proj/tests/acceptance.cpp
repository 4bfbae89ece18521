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


// Acceptance checks. One PASS/FAIL line per criterion, exit status 1 if any
// fails. The CLI checks shell out to the real binary.
//
//   acceptance --cli path/to/tsq --work scratch_dir [--config cfg.json]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "oracles.hpp"
#include "tsq/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tsq;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void criterion(int id, const char* name, double limit_seconds, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome out;
  try {
    out = body();
  } catch (const std::exception& e) {
    out = {false, std::string("exception: ") + e.what()};
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (limit_seconds > 0 && secs >= limit_seconds) {
    out.pass = false;
    out.detail += " (over time limit " + sig_figs(limit_seconds, 3) + " s)";
  }
  if (!out.pass) ++failures;
  std::printf("%s %2d %-28s %7.2fs  %s\n", out.pass ? "PASS" : "FAIL", id, name, secs,
              out.detail.c_str());
  std::fflush(stdout);
}

std::string quote(const fs::path& p) { return "'" + p.string() + "'"; }

int run_cli(const fs::path& cli, const std::string& args, const fs::path& log) {
  const std::string cmd = quote(cli) + " " + args + " > " + quote(log) + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string fmt(double v) { return sig_figs(v, 4); }

// ---- 1 ----------------------------------------------------------------------

Outcome gradient_check() {
  const double h = 1e-5;
  double worst = 0.0;
  std::size_t models = 0;
  for (std::uint64_t seed = 1; seed <= 24; ++seed) {
    Rng rng(seed * 7919);
    ModelSpec s;
    s.num_layers = 2 + seed % 3;
    s.hidden_dim = 4 + seed % 5;
    s.num_timesteps = 3;
    s.token_count = 1 + seed % 4;
    s.seed = seed;
    Model m = init_model(s);
    const DenoiseState st{initial_latent(m, seed + 1000), 1 + seed % 3};
    const Matrix target = Matrix::random_normal(s.hidden_dim, s.token_count, rng);
    const auto grads = backward_weight_grads(m, st, target);
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
      for (std::size_t i = 0; i < s.hidden_dim; ++i) {
        for (std::size_t j = 0; j < s.hidden_dim; ++j) {
          double& w = m.layers[l].weight(i, j);
          const double w0 = w;
          w = w0 + h;
          const double up = frobenius_sq(forward(m, st) - target);
          w = w0 - h;
          const double down = frobenius_sq(forward(m, st) - target);
          w = w0;
          const double fd = (up - down) / (2 * h);
          const double g = grads[l](i, j);
          // Relative error, with a floor well above finite-difference noise.
          worst = std::max(worst, std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-6}));
        }
      }
    }
    ++models;
  }
  return {worst <= 1e-4, std::to_string(models) + " models, max rel err " + fmt(worst)};
}

// ---- 2 ----------------------------------------------------------------------

Outcome hessian_equivalence() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed + 77);
    const std::size_t d = 2 + seed % 9, steps = 1 + seed % 7, cols = 1 + seed % 11;
    TemporalWeights w{TimestepLayerGrid(steps, 1), 1.0};
    std::vector<ActivationTrace> traces;
    std::vector<Matrix> xs;
    std::vector<double> alphas;
    double sum = 0.0;
    for (std::size_t t = 1; t <= steps; ++t) {
      xs.push_back(Matrix::random_normal(d, cols, rng) * (1.0 + 3.0 * rng.uniform()));
      traces.push_back({t, 0, {xs.back()}});
      w.alpha.at(t, 0) = rng.uniform();
      sum += w.alpha.at(t, 0);
    }
    for (std::size_t t = 1; t <= steps; ++t) {
      w.alpha.at(t, 0) /= sum;
      alphas.push_back(w.alpha.at(t, 0));
    }
    const auto h = accumulate_hessian(traces, w, 0);
    worst = std::max(worst, max_abs_diff(h.h, oracle::direct_weighted_hessian(xs, alphas)));
  }
  return {worst <= 1e-10, "100 trace sets, max abs diff " + fmt(worst)};
}

// ---- 3, 4 -------------------------------------------------------------------

struct LayerInstance {
  Matrix w;
  std::vector<ActivationTrace> traces;
  TemporalWeights alpha;
};

LayerInstance random_layer(std::uint64_t seed, std::size_t rows, std::size_t d, std::size_t steps,
                           std::size_t cols, bool uniform) {
  Rng rng(seed);
  LayerInstance in;
  in.w = Matrix::random_normal(rows, d, rng);
  const Matrix mix = Matrix::random_normal(d, d, rng);
  in.alpha = uniform ? TemporalWeights::uniform(steps, 1)
                     : TemporalWeights{TimestepLayerGrid(steps, 1), 1.0};
  double sum = 0.0;
  for (std::size_t t = 1; t <= steps; ++t) {
    in.traces.push_back({t, 0, {matmul(mix, Matrix::random_normal(d, cols, rng))}});
    if (!uniform) {
      in.alpha.alpha.at(t, 0) = 0.05 + rng.uniform();
      sum += in.alpha.alpha.at(t, 0);
    }
  }
  if (!uniform)
    for (std::size_t t = 1; t <= steps; ++t) in.alpha.alpha.at(t, 0) /= sum;
  return in;
}

Outcome gptq_reduction() {
  std::size_t identical = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t d = 6 + seed % 5;
    const LayerInstance in = random_layer(seed + 9000, 4 + seed % 4, d, 5, 12, true);
    const auto h = accumulate_hessian(in.traces, in.alpha, 0);
    Matrix plain(d, d);
    for (const auto& tr : in.traces) {
      plain += oracle::naive_matmul(tr.inputs[0], tr.inputs[0].transpose());
    }
    plain *= 1.0 / 5.0;
    const auto res = gptq_quantize(in.w, h, QuantSpec::weights(4));
    if (res.weight == oracle::reference_gptq(in.w, plain, 4, kDefaultDamping, true)) ++identical;
  }
  return {identical == 10, std::to_string(identical) + "/10 layers bit-identical"};
}

Outcome never_worse_than_rtn() {
  std::size_t violations = 0;
  double mean_gain = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const LayerInstance in =
        random_layer(seed + 12000, 1 + seed % 8, 2 + seed % 12, 1 + seed % 6, 2 + seed % 15, false);
    const auto h = accumulate_hessian(in.traces, in.alpha, 0);
    const auto res = gptq_quantize(in.w, h, QuantSpec::weights(3));
    const Matrix rtn = fake_quant(in.w, res.params);
    const double eg = weighted_objective(in.w, res.weight, in.traces, in.alpha, 0);
    const double er = weighted_objective(in.w, rtn, in.traces, in.alpha, 0);
    if (eg > er) ++violations;
    if (er > 0) mean_gain += (er - eg) / er / 100.0;
  }
  return {violations == 0, std::to_string(violations) + " violations in 100, mean gain " +
                               fmt(100.0 * mean_gain) + "%"};
}

// ---- 5 ----------------------------------------------------------------------

Outcome beam_vs_brute_force() {
  std::size_t matches = 0;
  std::string first_mismatch;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ModelSpec s;
    s.num_layers = 2;
    s.hidden_dim = 4 + seed % 5;
    s.num_timesteps = 3;
    s.token_count = 2 + seed % 3;
    s.seed = 500 + seed;
    const Model m = init_model(s);
    const std::vector<std::uint64_t> seeds = {seed * 3 + 1, seed * 3 + 2};
    const auto traces = collect_traces(m, seeds);
    const std::vector<int> palette = {3, 8};
    const ActivationQuantTable table(traces, palette, 3, 2);
    const FisherMap f = estimate_fisher(m, seeds);

    SearchConfig cfg;
    cfg.palette = palette;
    cfg.num_candidates = 2;
    cfg.beam_width = 64;
    Rng rng(seed + 31);
    cfg.b_target = 3.0 + 5.0 * rng.uniform();

    const Model wq = minmax_quantize_model(m, 4);
    const StepLossEvaluator eval(m, wq, table, seeds);
    const StepLossFn loss = eval.as_function();
    const auto cands = candidates_for_all_steps(f, cfg);
    const auto frontier = beam_search(cands, loss, cfg.beam_width, cfg.b_target);
    const SearchPath* best = best_feasible(frontier, 3, 2, cfg.b_target);
    const SearchPath brute = brute_force_optimum(cands, loss, 2, cfg.b_target);
    if (best && best->loss == brute.loss) {
      ++matches;
    } else if (first_mismatch.empty()) {
      first_mismatch = ", first mismatch at instance " + std::to_string(seed);
    }
  }
  return {matches == 20, std::to_string(matches) + "/20 exact matches" + first_mismatch};
}

// ---- 6 ----------------------------------------------------------------------

Outcome pareto_oracle() {
  std::size_t agree = 0;
  Rng rng(4242);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform() * 100.0);
    const bool coarse = rep % 2 == 0;  // coarse grids force ties
    std::vector<SearchPath> paths;
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 0; i < n; ++i) {
      double b = rng.uniform() * 10.0, e = rng.uniform();
      if (coarse) {
        b = std::floor(b);
        e = std::floor(e * 8.0);
      }
      SearchPath p;
      p.bits = b;
      p.loss = e;
      p.steps.push_back(CandidateConfig{i, {}});
      paths.push_back(p);
      pts.emplace_back(b, e);
    }
    std::vector<std::size_t> got;
    for (const auto& p : pareto_prune(paths, 1000)) got.push_back(p.steps[0].timestep);
    std::sort(got.begin(), got.end());
    auto want = oracle::pareto_survivors(pts);
    std::sort(want.begin(), want.end());
    if (got == want) ++agree;
  }
  return {agree == 200, std::to_string(agree) + "/200 clouds agree"};
}

// ---- 7, 8 -------------------------------------------------------------------

Outcome searched_vs_uniform(Pipeline& p) {
  p.run_fisher();
  p.run_calibrate();
  const BitSchedule& s = p.run_search();
  const BitSchedule u = p.uniform_baseline();
  if (u.avg_bits != 4.0) return {false, "uniform baseline is not all-4-bit"};
  const auto rows = p.compare(s, u);
  std::map<std::pair<std::string, WeightMode>, double> err;
  for (const auto& r : rows) err[{r.schedule, r.weights}] = r.error;
  // Same weights on both sides: the ones the search was run against.
  const double es = err[{"searched", WeightMode::kFisherCalib}];
  const double eu = err[{"uniform", WeightMode::kFisherCalib}];
  const double gain = 1.0 - es / eu;
  const double gain_minmax = 1.0 - err[{"searched", WeightMode::kMinMax}] /
                                       err[{"uniform", WeightMode::kMinMax}];
  return {es <= eu && gain >= 0.05,
          "avg bits " + fmt(s.avg_bits) + ", MSE " + fmt(es) + " vs " + fmt(eu) + " (" +
              fmt(100 * gain) + "% better; minmax weights " + fmt(100 * gain_minmax) + "%)"};
}

Outcome fisher_calibration(Pipeline& p) {
  const auto w = temporal_weights(p.fisher(), p.config().tau);
  const double ef = top_alpha_mean_error(p.fisher_calibrated(), w, 0.2);
  const double eu = top_alpha_mean_error(p.uniform_calibrated(), w, 0.2);
  return {ef <= eu, "top-20% error fisher " + fmt(ef) + " vs uniform " + fmt(eu)};
}

// ---- 9, 10, 11 --------------------------------------------------------------

double field(const Json& j, const char* key) { return std::stod(j.at(key).get<std::string>()); }

Outcome report_arithmetic(const fs::path& dir) {
  const Json r = read_json(dir / "report.json");
  const double pw = field(r, "param_weighted_avg_bits");
  const double avg = field(r, "avg_bits");
  const double wb = field(r, "weight_avg_bits");
  const double d1 = std::abs(field(r, "flops_reduction") - 16.0 / pw);
  const double d2 = std::abs(field(r, "flops_reduction_uniform_avg") - 16.0 / avg);
  const double d3 = std::abs(field(r, "size_reduction") - 16.0 / wb);
  const bool printed = r.at("flops_reduction_3sf").get<std::string>() == sig_figs(16.0 / pw, 3) &&
                       r.at("size_reduction_3sf").get<std::string>() == sig_figs(16.0 / wb, 3);
  const std::string ex = sig_figs(reduction_ratio(3.1), 3);
  const double worst = std::max({d1, d2, d3});
  return {worst <= 1e-6 && printed && ex == "5.16",
          "max ratio deviation " + fmt(worst) + ", 16/3.1 prints " + ex + ", report flops " +
              r.at("flops_reduction_3sf").get<std::string>() + "x"};
}

Outcome determinism(const fs::path& a, const fs::path& b) {
  const bool same_schedule =
      read_text_file(a / "schedule.json") == read_text_file(b / "schedule.json");
  Json ra = read_json(a / "report.json");
  Json rb = read_json(b / "report.json");
  ra.erase("stage_seconds");
  rb.erase("stage_seconds");
  const bool same_report = ra == rb;
  return {same_schedule && same_report,
          std::string("schedule.json ") + (same_schedule ? "identical" : "differs") +
              ", report.json payload " + (same_report ? "identical" : "differs")};
}

Outcome ablation_order(const fs::path& cli, const std::string& config_arg, const fs::path& dir) {
  const int rc = run_cli(cli, "compare " + config_arg + " -o " + quote(dir), dir / "compare.log");
  if (rc != 0) return {false, "compare exited " + std::to_string(rc)};
  std::istringstream csv(read_text_file(dir / "compare.csv"));
  std::string line;
  std::getline(csv, line);
  std::map<std::string, double> err;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() == 4) err[f[0] + "/" + f[1]] = std::stod(f[3]);
  }
  for (const char* k : {"searched/fisher_calib", "searched/minmax", "uniform/minmax"}) {
    if (!err.count(k)) return {false, std::string("compare.csv lacks ") + k};
  }
  const double full = err["searched/fisher_calib"];
  const double pareto = err["searched/minmax"];
  const double base = err["uniform/minmax"];
  return {full <= pareto && pareto <= base,
          "full " + fmt(full) + " <= pareto-only " + fmt(pareto) + " <= baseline " + fmt(base)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::string cli_path, work_path, config_path;
  app.add_option("--cli", cli_path, "tsq binary")->required()->check(CLI::ExistingFile);
  app.add_option("--work", work_path, "scratch directory")->required();
  app.add_option("--config", config_path, "pipeline config (defaults if omitted)")
      ->check(CLI::ExistingFile);
  CLI11_PARSE(app, argc, argv);

  const fs::path cli = fs::absolute(cli_path);
  const fs::path work = fs::absolute(work_path);
  fs::remove_all(work);
  fs::create_directories(work);
  const std::string config_arg = config_path.empty() ? "" : "-c " + quote(fs::absolute(config_path));

  criterion(1, "gradient correctness", 10, gradient_check);
  criterion(2, "weighted hessian", 5, hessian_equivalence);
  criterion(3, "gptq reduction", 10, gptq_reduction);
  criterion(4, "never worse than rtn", 30, never_worse_than_rtn);
  criterion(5, "beam vs brute force", 60, beam_vs_brute_force);
  criterion(6, "pareto oracle", 5, pareto_oracle);

  PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : load_config(config_path);
  cfg.output_dir = work / "inproc";
  Pipeline pipeline(cfg);
  criterion(7, "searched beats uniform-4", 300, [&] { return searched_vs_uniform(pipeline); });
  criterion(8, "fisher-weighted calibration", 120, [&] { return fisher_calibration(pipeline); });

  // Two independent CLI runs feed criteria 9 to 11.
  const fs::path run_a = work / "run_a", run_b = work / "run_b";
  int rc_a = -1, rc_b = -1;
  criterion(9, "report arithmetic", 0, [&]() -> Outcome {
    rc_a = run_cli(cli, "run " + config_arg + " -o " + quote(run_a), work / "run_a.log");
    if (rc_a != 0) return {false, "tsq run exited " + std::to_string(rc_a)};
    return report_arithmetic(run_a);
  });
  criterion(10, "determinism", 0, [&]() -> Outcome {
    rc_b = run_cli(cli, "run " + config_arg + " -o " + quote(run_b), work / "run_b.log");
    if (rc_a != 0 || rc_b != 0) return {false, "tsq run failed"};
    return determinism(run_a, run_b);
  });
  criterion(11, "ablation ordering", 0, [&]() -> Outcome {
    if (rc_a != 0) return {false, "tsq run failed"};
    return ablation_order(cli, config_arg, run_a);
  });

  std::printf("%s: %d of 11 criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
