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

// JSON persistence for models, Fisher maps and bit schedules. Doubles are
// written with round-trip precision, so save followed by load is exact.

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>

#include "json.hpp"
#include "tsq/error.hpp"
#include "tsq/fisher.hpp"
#include "tsq/search.hpp"
#include "tsq/toy_dit.hpp"

namespace tsq {

using Json = nlohmann::json;

inline Json matrix_to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.values()}};
}

inline Matrix matrix_from_json(const Json& j) {
  return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                j.at("data").get<std::vector<double>>());
}

inline Json model_spec_to_json(const ModelSpec& s) {
  return {{"num_layers", s.num_layers},       {"hidden_dim", s.hidden_dim},
          {"num_timesteps", s.num_timesteps}, {"token_count", s.token_count},
          {"seed", s.seed},                   {"shift_scale", s.shift_scale},
          {"outlier_scale", s.outlier_scale}};
}

inline ModelSpec model_spec_from_json(const Json& j) {
  ModelSpec s;
  s.num_layers = j.at("num_layers").get<std::size_t>();
  s.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  s.num_timesteps = j.at("num_timesteps").get<std::size_t>();
  s.token_count = j.at("token_count").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.shift_scale = j.at("shift_scale").get<double>();
  s.outlier_scale = j.at("outlier_scale").get<double>();
  return s;
}

inline Json model_to_json(const Model& model) {
  Json layers = Json::array();
  for (const auto& l : model.layers) {
    layers.push_back({{"index", l.index},
                      {"kind", to_string(l.kind)},
                      {"weight", matrix_to_json(l.weight)},
                      {"bias", l.bias},
                      {"shifts", matrix_to_json(l.shifts)}});
  }
  return {{"format", "tsq-model"},
          {"version", 1},
          {"spec", model_spec_to_json(model.spec)},
          {"layers", layers},
          {"mixing", matrix_to_json(model.mixing)}};
}

inline Model model_from_json(const Json& j) {
  if (j.value("format", "") != "tsq-model") throw IoError("not a tsq model checkpoint");
  Model m;
  m.spec = model_spec_from_json(j.at("spec"));
  m.spec.validate();
  for (const auto& jl : j.at("layers")) {
    LayerWeights l;
    l.index = jl.at("index").get<std::size_t>();
    const auto kind = jl.at("kind").get<std::string>();
    if (kind != "attn" && kind != "mlp") throw IoError("unknown layer kind '" + kind + "'");
    l.kind = kind == "attn" ? LayerKind::kAttentionProxy : LayerKind::kMlp;
    l.weight = matrix_from_json(jl.at("weight"));
    l.bias = jl.at("bias").get<std::vector<double>>();
    l.shifts = matrix_from_json(jl.at("shifts"));
    m.layers.push_back(std::move(l));
  }
  m.mixing = matrix_from_json(j.at("mixing"));

  const std::size_t d = m.spec.hidden_dim;
  if (m.layers.size() != m.spec.num_layers) throw IoError("checkpoint layer count mismatch");
  for (const auto& l : m.layers) {
    if (l.weight.rows() != d || l.weight.cols() != d || l.bias.size() != d ||
        l.shifts.rows() != m.spec.num_timesteps || l.shifts.cols() != d) {
      throw IoError("checkpoint layer " + std::to_string(l.index) + " has wrong shape");
    }
  }
  if (m.mixing.rows() != m.spec.token_count || m.mixing.cols() != m.spec.token_count) {
    throw IoError("checkpoint mixing matrix has wrong shape");
  }
  return m;
}

inline Json fisher_to_json(const FisherMap& f) {
  return {{"format", "tsq-fisher"},
          {"timesteps", f.timesteps()},
          {"layers", f.layers()},
          {"scores", f.scores.matrix().values()},
          {"samples", f.samples},
          {"model_fingerprint", f.model_fingerprint}};
}

inline FisherMap fisher_from_json(const Json& j) {
  if (j.value("format", "") != "tsq-fisher") throw IoError("not a tsq Fisher map");
  FisherMap f;
  const auto t = j.at("timesteps").get<std::size_t>();
  const auto l = j.at("layers").get<std::size_t>();
  f.scores = TimestepLayerGrid(Matrix(t, l, j.at("scores").get<std::vector<double>>()));
  f.samples = j.at("samples").get<std::vector<std::size_t>>();
  f.model_fingerprint = j.at("model_fingerprint").get<std::uint64_t>();
  return f;
}

inline Json search_config_to_json(const SearchConfig& c) {
  return {{"beam_width", c.beam_width},
          {"candidates", c.num_candidates},
          {"b_target", c.b_target},
          {"palette", c.palette}};
}

inline SearchConfig search_config_from_json(const Json& j) {
  SearchConfig c;
  c.beam_width = j.at("beam_width").get<std::size_t>();
  c.num_candidates = j.at("candidates").get<std::size_t>();
  c.b_target = j.at("b_target").get<double>();
  c.palette = j.at("palette").get<std::vector<int>>();
  return c;
}

namespace detail {

inline Json nullable(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline double from_nullable(const Json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

}  // namespace detail

inline Json schedule_to_json(const BitSchedule& s) {
  return {{"T", s.timesteps},
          {"L", s.layers},
          {"grid", s.grid},
          {"avg_bits", s.avg_bits},
          {"param_weighted_avg_bits", s.param_weighted_avg_bits},
          {"per_step_loss", s.per_step_loss},
          {"cumulative_loss", s.cumulative_loss},
          {"end_to_end_error", detail::nullable(s.end_to_end_error)},
          {"search_config", search_config_to_json(s.search_config)},
          {"seeds", s.seeds}};
}

inline BitSchedule schedule_from_json(const Json& j) {
  BitSchedule s;
  s.timesteps = j.at("T").get<std::size_t>();
  s.layers = j.at("L").get<std::size_t>();
  s.grid = j.at("grid").get<std::vector<std::vector<int>>>();
  if (s.grid.size() != s.timesteps) throw IoError("schedule grid has wrong number of rows");
  for (const auto& row : s.grid) {
    if (row.size() != s.layers) throw IoError("schedule grid row has wrong length");
    for (int b : row) QuantSpec::activations(b).validate();
  }
  s.avg_bits = j.at("avg_bits").get<double>();
  s.param_weighted_avg_bits = j.at("param_weighted_avg_bits").get<double>();
  s.per_step_loss = j.at("per_step_loss").get<std::vector<double>>();
  s.cumulative_loss = j.value("cumulative_loss", 0.0);
  s.end_to_end_error =
      j.contains("end_to_end_error") ? detail::from_nullable(j.at("end_to_end_error"))
                                     : std::numeric_limits<double>::quiet_NaN();
  s.search_config = search_config_from_json(j.at("search_config"));
  s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  return s;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_json(const std::filesystem::path& path, const Json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

inline Json read_json(const std::filesystem::path& path) {
  try {
    return Json::parse(read_text_file(path));
  } catch (const Json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void save_model(const std::filesystem::path& path, const Model& m) {
  write_json(path, model_to_json(m));
}

inline Model load_model(const std::filesystem::path& path) {
  try {
    return model_from_json(read_json(path));
  } catch (const Json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace tsq
