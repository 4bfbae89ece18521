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

// Per-(timestep, layer) Fisher sensitivity and the temporal weights derived
// from it.

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "tsq/error.hpp"
#include "tsq/numerics.hpp"
#include "tsq/rng.hpp"
#include "tsq/toy_dit.hpp"

namespace tsq {

/// Row-major T x L grid indexed by (timestep 1..T, layer 0..L-1).
class TimestepLayerGrid {
 public:
  TimestepLayerGrid() = default;
  TimestepLayerGrid(std::size_t timesteps, std::size_t layers, double fill = 0.0)
      : values_(timesteps, layers, fill) {}
  explicit TimestepLayerGrid(Matrix values) : values_(std::move(values)) {}

  std::size_t timesteps() const noexcept { return values_.rows(); }
  std::size_t layers() const noexcept { return values_.cols(); }

  double& at(std::size_t t, std::size_t l) { return values_(t - 1, l); }
  double at(std::size_t t, std::size_t l) const { return values_(t - 1, l); }

  /// All T values of one layer, ordered by timestep.
  std::vector<double> layer_column(std::size_t l) const {
    std::vector<double> col(timesteps());
    for (std::size_t t = 1; t <= timesteps(); ++t) col[t - 1] = at(t, l);
    return col;
  }

  const Matrix& matrix() const noexcept { return values_; }

  friend bool operator==(const TimestepLayerGrid&, const TimestepLayerGrid&) = default;

 private:
  Matrix values_;
};

struct FisherMap {
  TimestepLayerGrid scores;
  std::vector<std::size_t> samples;  // per timestep
  std::uint64_t model_fingerprint = 0;

  std::size_t timesteps() const noexcept { return scores.timesteps(); }
  std::size_t layers() const noexcept { return scores.layers(); }
};

struct TemporalWeights {
  TimestepLayerGrid alpha;
  double tau = 1.0;

  std::size_t timesteps() const noexcept { return alpha.timesteps(); }
  std::size_t layers() const noexcept { return alpha.layers(); }

  static TemporalWeights uniform(std::size_t timesteps, std::size_t layers) {
    return {TimestepLayerGrid(timesteps, layers, 1.0 / static_cast<double>(timesteps)), 0.0};
  }
};

/// Loss target used inside the Fisher expectation.
enum class FisherTarget {
  // eps + xi with xi ~ N(0, I): samples the model's own predictive
  // distribution, giving the true (not empirical) Fisher.
  kSampledNoise,
  // eps itself. The residual is zero, so the map is identically zero.
  kSelf,
};

struct FisherOptions {
  FisherTarget target = FisherTarget::kSampledNoise;
  std::uint64_t noise_seed = 0x5eed;
};

/// Target matrix for one Fisher sample. Exposed so tests can rebuild the
/// exact same loss independently.
inline Matrix fisher_target(const Matrix& prediction, const FisherOptions& opts,
                            std::uint64_t sample_seed, std::size_t timestep) {
  if (opts.target == FisherTarget::kSelf) return prediction;
  Rng rng = Rng(opts.noise_seed).fork(sample_seed).fork(timestep);
  return prediction + Matrix::random_normal(prediction.rows(), prediction.cols(), rng);
}

/// I_{t,l} = E_{z_t ~ D_t}[ mean((dL/dW_l)^2) ], with D_t the full-precision
/// sampler's state distribution at t and one trajectory per seed.
inline FisherMap estimate_fisher(const Model& model, std::span<const std::uint64_t> seeds,
                                 const FisherOptions& opts = {}) {
  if (seeds.empty()) throw ParameterError("estimate_fisher: zero calibration samples");
  const std::size_t steps = model.num_timesteps();
  const std::size_t num_layers = model.num_layers();
  FisherMap map;
  map.scores = TimestepLayerGrid(steps, num_layers);
  map.samples.assign(steps, 0);
  map.model_fingerprint = model_fingerprint(model);

  for (std::uint64_t seed : seeds) {
    const Trajectory traj = sample_trajectory(model, nullptr, seed);
    for (const DenoiseState& state : traj.states) {
      const Matrix eps = forward(model, state);
      const Matrix target = fisher_target(eps, opts, seed, state.timestep);
      const auto grads = backward_weight_grads(model, state, target);
      for (std::size_t l = 0; l < num_layers; ++l) {
        map.scores.at(state.timestep, l) +=
            frobenius_sq(grads[l]) / static_cast<double>(grads[l].size());
      }
      ++map.samples[state.timestep - 1];
    }
  }
  for (std::size_t t = 1; t <= steps; ++t)
    for (std::size_t l = 0; l < num_layers; ++l)
      map.scores.at(t, l) /= static_cast<double>(map.samples[t - 1]);
  return map;
}

/// Per-layer min-max scaling to [0, 1]; constant layers map to zero.
inline TimestepLayerGrid normalize_heatmap(const FisherMap& map) {
  if (map.timesteps() == 0 || map.layers() == 0) {
    throw ParameterError("normalize_heatmap: empty map");
  }
  TimestepLayerGrid out(map.timesteps(), map.layers());
  for (std::size_t l = 0; l < map.layers(); ++l) {
    const auto col = map.scores.layer_column(l);
    const auto [lo, hi] = std::minmax_element(col.begin(), col.end());
    const double range = *hi - *lo;
    for (std::size_t t = 1; t <= map.timesteps(); ++t)
      out.at(t, l) = range > 0.0 ? (col[t - 1] - *lo) / range : 0.0;
  }
  return out;
}

/// alpha_{t,l} = softmax_t(I_{t,l} / tau), independently for each layer.
inline TemporalWeights temporal_weights(const FisherMap& map, double tau) {
  if (!(tau > 0.0)) throw ParameterError("temporal_weights: tau must be > 0");
  TemporalWeights w{TimestepLayerGrid(map.timesteps(), map.layers()), tau};
  for (std::size_t l = 0; l < map.layers(); ++l) {
    const auto alpha = softmax_with_temperature(map.scores.layer_column(l), tau);
    for (std::size_t t = 1; t <= map.timesteps(); ++t) w.alpha.at(t, l) = alpha[t - 1];
  }
  return w;
}

/// CSV with a header of layer names and one row per timestep (1..T).
inline void write_heatmap_csv(std::ostream& os, const TimestepLayerGrid& grid,
                              const Model& model) {
  for (std::size_t l = 0; l < grid.layers(); ++l) {
    if (l) os << ',';
    os << model.layer_name(l);
  }
  os << '\n';
  char buf[64];
  for (std::size_t t = 1; t <= grid.timesteps(); ++t) {
    for (std::size_t l = 0; l < grid.layers(); ++l) {
      if (l) os << ',';
      std::snprintf(buf, sizeof buf, "%.17g", grid.at(t, l));
      os << buf;
    }
    os << '\n';
  }
}

}  // namespace tsq
