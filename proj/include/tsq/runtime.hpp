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

// Simulated low-precision execution of the toy model: static per-timestep
// activation quantizers, the teacher-forced step loss used by the search,
// and end-to-end trajectory error used for final selection.

#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsq/error.hpp"
#include "tsq/quant.hpp"
#include "tsq/search.hpp"
#include "tsq/toy_dit.hpp"

namespace tsq {

/// Asymmetric per-tensor activation quantizers, one per (timestep, layer,
/// bit-width), calibrated by min-max over full-precision traces.
class ActivationQuantTable {
 public:
  ActivationQuantTable() = default;

  ActivationQuantTable(std::span<const ActivationTrace> traces, std::span<const int> palette,
                       std::size_t timesteps, std::size_t layers)
      : timesteps_(timesteps), layers_(layers) {
    std::vector<std::vector<std::pair<double, double>>> range(
        timesteps, std::vector<std::pair<double, double>>(layers));
    std::vector<bool> seen(timesteps, false);
    for (const auto& tr : traces) {
      if (tr.timestep < 1 || tr.timestep > timesteps || tr.inputs.size() != layers) {
        throw ShapeError("activation trace does not match model dimensions");
      }
      for (std::size_t l = 0; l < layers; ++l) {
        const auto& x = tr.inputs[l];
        const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
        auto& r = range[tr.timestep - 1][l];
        if (!seen[tr.timestep - 1]) {
          r = {*lo, *hi};
        } else {
          r = {std::min(r.first, *lo), std::max(r.second, *hi)};
        }
      }
      seen[tr.timestep - 1] = true;
    }
    for (std::size_t t = 1; t <= timesteps; ++t) {
      if (!seen[t - 1]) {
        throw ParameterError("activation calibration missing timestep " + std::to_string(t));
      }
      for (std::size_t l = 0; l < layers; ++l) {
        const auto [lo, hi] = range[t - 1][l];
        const Matrix probe = Matrix::from_rows({{lo, hi}});
        for (int b : palette) {
          if (b == kPassThroughBits) continue;
          params_[{t, l, b}] = calibrate_minmax(probe, QuantSpec::activations(b));
        }
      }
    }
  }

  std::size_t timesteps() const noexcept { return timesteps_; }
  std::size_t layers() const noexcept { return layers_; }

  const QuantParams& at(std::size_t t, std::size_t l, int bits) const {
    auto it = params_.find({t, l, bits});
    if (it == params_.end()) {
      throw ParameterError("no activation quantizer for (t=" + std::to_string(t) +
                           ", l=" + std::to_string(l) + ", bits=" + std::to_string(bits) + ")");
    }
    return it->second;
  }

  Matrix apply(std::size_t t, std::size_t l, int bits, const Matrix& x) const {
    if (bits == kPassThroughBits) return x;
    return fake_quant(x, at(t, l, bits));
  }

 private:
  struct Key {
    std::size_t t, l;
    int bits;
    auto operator<=>(const Key&) const = default;
  };
  std::size_t timesteps_ = 0;
  std::size_t layers_ = 0;
  std::map<Key, QuantParams> params_;
};

/// Hook that quantizes layer inputs at the bit-widths `bits_of(t, l)`.
template <typename BitsOf>
ExecutionHook activation_hook(const ActivationQuantTable& table, BitsOf bits_of) {
  ExecutionHook hook;
  hook.input = [&table, bits_of](const LayerContext& ctx, const Matrix& x) {
    return table.apply(ctx.timestep, ctx.layer, bits_of(ctx.timestep, ctx.layer), x);
  };
  return hook;
}

inline ExecutionHook schedule_hook(const ActivationQuantTable& table, const BitSchedule& s) {
  return activation_hook(table, [&s](std::size_t t, std::size_t l) { return s.bits_at(t, l); });
}

/// Mean over seeds of the MSE between the final latent of the quantized
/// trajectory (weights from `quantized`, activations per `schedule`) and
/// the full-precision one.
inline double trajectory_error(const Model& reference, const Model& quantized,
                               const ActivationQuantTable& table, const BitSchedule& schedule,
                               std::span<const std::uint64_t> seeds) {
  if (seeds.empty()) throw ParameterError("trajectory_error: no seeds");
  if (schedule.timesteps != reference.num_timesteps() ||
      schedule.layers != reference.num_layers()) {
    throw ShapeError("schedule is " + std::to_string(schedule.timesteps) + "x" +
                     std::to_string(schedule.layers) + " but model is " +
                     std::to_string(reference.num_timesteps()) + "x" +
                     std::to_string(reference.num_layers()));
  }
  const ExecutionHook hook = schedule_hook(table, schedule);
  double total = 0.0;
  for (std::uint64_t seed : seeds) {
    const Matrix fp = sample_trajectory(reference, nullptr, seed).final_latent;
    const Matrix q = sample_trajectory(quantized, &hook, seed).final_latent;
    total += mse(fp, q);
  }
  return total / static_cast<double>(seeds.size());
}

/// Teacher-forced step loss: MSE between full-precision and simulated
/// quantized predictions on reference-trajectory latents at t. Results are
/// cached per (t, configuration).
class StepLossEvaluator {
 public:
  StepLossEvaluator(const Model& reference, const Model& quantized,
                    const ActivationQuantTable& table, std::span<const std::uint64_t> seeds)
      : reference_(reference), quantized_(quantized), table_(table) {
    if (seeds.empty()) throw ParameterError("StepLossEvaluator: no seeds");
    const std::size_t steps = reference.num_timesteps();
    states_.resize(steps);
    targets_.resize(steps);
    for (std::uint64_t seed : seeds) {
      const Trajectory traj = sample_trajectory(reference, nullptr, seed);
      for (const auto& state : traj.states) {
        targets_[state.timestep - 1].push_back(forward(reference, state));
        states_[state.timestep - 1].push_back(state);
      }
    }
  }

  double operator()(const CandidateConfig& c) const {
    if (c.timestep < 1 || c.timestep > states_.size()) {
      throw ParameterError("step loss requested for timestep " + std::to_string(c.timestep));
    }
    if (c.bits.size() != reference_.num_layers()) {
      throw ShapeError("candidate has " + std::to_string(c.bits.size()) + " layers, model has " +
                       std::to_string(reference_.num_layers()));
    }
    {
      std::lock_guard lock(mu_);
      auto it = cache_.find({c.timestep, c.bits});
      if (it != cache_.end()) return it->second;
    }
    const auto& bits = c.bits;
    const ExecutionHook hook =
        activation_hook(table_, [&bits](std::size_t, std::size_t l) { return bits[l]; });
    const auto& states = states_[c.timestep - 1];
    const auto& targets = targets_[c.timestep - 1];
    double total = 0.0;
    for (std::size_t i = 0; i < states.size(); ++i) {
      total += mse(targets[i], forward(quantized_, states[i], &hook));
    }
    const double loss = total / static_cast<double>(states.size());
    std::lock_guard lock(mu_);
    cache_.emplace(std::make_pair(c.timestep, c.bits), loss);
    return loss;
  }

  StepLossFn as_function() const {
    return [this](const CandidateConfig& c) { return (*this)(c); };
  }

  std::size_t cache_size() const {
    std::lock_guard lock(mu_);
    return cache_.size();
  }

 private:
  const Model& reference_;
  const Model& quantized_;
  const ActivationQuantTable& table_;
  std::vector<std::vector<DenoiseState>> states_;
  std::vector<std::vector<Matrix>> targets_;
  mutable std::mutex mu_;
  mutable std::map<std::pair<std::size_t, std::vector<int>>, double> cache_;
};

}  // namespace tsq
