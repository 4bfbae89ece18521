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

// tsq: command line front end for the quantization pipeline.
//
//   tsq run       --config cfg.json
//   tsq fisher    --config cfg.json
//   tsq calibrate --config cfg.json        (reuses fisher_map.json)
//   tsq search    --config cfg.json        (reuses fisher_map.json, calibrated_model.json)
//   tsq compare   --config cfg.json [--schedule-a a.json] [--schedule-b b.json]
//
// Exit codes: 0 ok, 1 other failure, 2 config error, 3 numerical failure,
// 4 infeasible budget.

#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "tsq/pipeline.hpp"

namespace {

tsq::PipelineConfig resolve_config(const std::string& config_path, const std::string& out_dir) {
  tsq::PipelineConfig cfg = config_path.empty() ? tsq::PipelineConfig{} : tsq::load_config(config_path);
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  cfg.validate();
  return cfg;
}

void print_schedule(const tsq::BitSchedule& s) {
  std::printf("schedule (rows t=%zu..1, columns layers):\n", s.timesteps);
  for (std::size_t t = s.timesteps; t >= 1; --t) {
    std::printf("  t=%2zu ", t);
    for (int b : s.grid[t - 1]) std::printf(" %d", b);
    std::printf("\n");
  }
  std::printf("avg bits %.4f, param-weighted %.4f, selection error %.6g\n", s.avg_bits,
              s.param_weighted_avg_bits, s.end_to_end_error);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Timestep-aware post-training quantization on a toy diffusion transformer"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string schedule_a;
  std::string schedule_b;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "JSON config file (defaults if omitted)")
        ->check(CLI::ExistingFile);
    sub->add_option("-o,--output-dir", out_dir, "override output_dir from the config");
  };

  auto* run = app.add_subcommand("run", "all stages: fisher, calibrate, search, report");
  auto* fisher = app.add_subcommand("fisher", "estimate the timestep x layer Fisher map");
  auto* calibrate = app.add_subcommand("calibrate", "Fisher-weighted GPTQ weight calibration");
  auto* search = app.add_subcommand("search", "beam search for the activation bit schedule");
  auto* compare = app.add_subcommand("compare", "ablation grid of schedules x weight variants");
  for (auto* sub : {run, fisher, calibrate, search, compare}) add_common(sub);
  compare->add_option("--schedule-a", schedule_a, "schedule (default: <output_dir>/schedule.json)")
      ->check(CLI::ExistingFile);
  compare->add_option("--schedule-b", schedule_b, "schedule (default: uniform baseline)")
      ->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  std::optional<tsq::Pipeline> pipeline;
  try {
    pipeline.emplace(resolve_config(config_path, out_dir));
    tsq::Pipeline& p = *pipeline;
    if (!run->parsed()) p.resume_manifest();

    if (run->parsed()) {
      const tsq::Json report = p.run_all();
      print_schedule(p.schedule());
      std::printf("FLOPs reduction %sx, size reduction %sx\n",
                  report.at("flops_reduction_3sf").get<std::string>().c_str(),
                  report.at("size_reduction_3sf").get<std::string>().c_str());
      std::printf("artifacts in %s\n", p.config().output_dir.string().c_str());
    } else if (fisher->parsed()) {
      p.run_stage("fisher", [&] { p.run_fisher(); });
      p.write_manifest("complete");
      std::printf("wrote %s\n", p.path("fisher.csv").string().c_str());
    } else if (calibrate->parsed()) {
      p.run_stage("calibrate", [&] { p.run_calibrate(); });
      p.write_manifest("complete");
      std::printf("wrote %s\n", p.path("calib_report.csv").string().c_str());
    } else if (search->parsed()) {
      p.run_stage("search", [&] { p.run_search(); });
      p.write_manifest("complete");
      print_schedule(p.schedule());
    } else if (compare->parsed()) {
      p.run_stage("compare", [&] {
        const tsq::BitSchedule a = schedule_a.empty()
                                       ? p.schedule()
                                       : tsq::schedule_from_json(tsq::read_json(schedule_a));
        const tsq::BitSchedule b = schedule_b.empty()
                                       ? p.uniform_baseline()
                                       : tsq::schedule_from_json(tsq::read_json(schedule_b));
        const auto rows = p.compare(a, b, "searched", schedule_b.empty() ? "uniform" : "b");
        std::ostringstream csv;
        tsq::write_compare_csv(csv, rows);
        tsq::write_text_file(p.path("compare.csv"), csv.str());
        std::cout << csv.str();
      });
      p.write_manifest("complete");
    }
  } catch (const tsq::Error& e) {
    std::fprintf(stderr, "tsq: %s\n", e.what());
    return tsq::exit_code_for(e);
  } catch (const tsq::Json::exception& e) {
    std::fprintf(stderr, "tsq: malformed artifact: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "tsq: %s\n", e.what());
    return 1;
  }
  return 0;
}
