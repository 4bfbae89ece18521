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

// A small deterministic diffusion-transformer stand-in.
//
// Each block l at timestep t computes
//
//   x_l     = (h_l + c_{t,l} 1^T) A_l          (A_l = token mixing on even
//                                              blocks, identity on odd ones)
//   h_{l+1} = h_l + tanh(W_l x_l + b_l 1^T)
//
// and the predicted noise is h_L. The per-timestep shifts c_{t,l} play the
// role of adaLN conditioning and make the input statistics of every layer
// drift along the denoising trajectory. x_l is the quantity that activation
// quantization and Hessian calibration operate on.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tsq/error.hpp"
#include "tsq/numerics.hpp"
#include "tsq/rng.hpp"

namespace tsq {

struct ModelSpec {
  std::size_t num_layers = 8;
  std::size_t hidden_dim = 16;
  std::size_t num_timesteps = 10;
  std::size_t token_count = 8;
  std::uint64_t seed = 7;
  // Magnitude of the timestep conditioning shifts; 0 disables them.
  double shift_scale = 1.0;
  // Peak size of the per-layer outlier channel relative to shift_scale.
  double outlier_scale = 40.0;

  void validate() const {
    if (num_layers < 2) throw ParameterError("model needs at least 2 layers");
    if (hidden_dim < 4) throw ParameterError("hidden_dim must be >= 4");
    if (num_timesteps < 1) throw ParameterError("num_timesteps must be >= 1");
    if (token_count < 1) throw ParameterError("token_count must be >= 1");
    if (!(shift_scale >= 0.0) || !std::isfinite(shift_scale))
      throw ParameterError("shift_scale must be finite and >= 0");
    if (!(outlier_scale >= 0.0) || !std::isfinite(outlier_scale))
      throw ParameterError("outlier_scale must be finite and >= 0");
  }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class LayerKind { kAttentionProxy, kMlp };

inline const char* to_string(LayerKind kind) {
  return kind == LayerKind::kAttentionProxy ? "attn" : "mlp";
}

struct LayerWeights {
  std::size_t index = 0;
  LayerKind kind = LayerKind::kMlp;
  Matrix weight;               // d x d
  std::vector<double> bias;    // d
  Matrix shifts;               // T x d, row t-1 holds c_{t,l}

  std::size_t parameter_count() const { return weight.size() + bias.size(); }
};

struct Model {
  ModelSpec spec;
  std::vector<LayerWeights> layers;
  Matrix mixing;  // n x n, columns sum to one

  std::size_t num_layers() const { return layers.size(); }
  std::size_t num_timesteps() const { return spec.num_timesteps; }

  std::string layer_name(std::size_t l) const {
    return "l" + std::to_string(l) + "_" + to_string(layers.at(l).kind);
  }
};

struct DenoiseState {
  Matrix latent;        // d x n
  std::size_t timestep = 0;  // 1..T
};

/// Inputs to every layer recorded at one timestep, batch concatenated along
/// columns (d x n*batch).
struct ActivationTrace {
  std::size_t timestep = 0;
  std::uint64_t batch_id = 0;
  std::vector<Matrix> inputs;
};

struct LayerContext {
  std::size_t timestep;
  std::size_t layer;
};

/// Interception points for simulated low-precision execution. Either member
/// may be empty, in which case the value passes through untouched.
struct ExecutionHook {
  std::function<Matrix(const LayerContext&, const Matrix&)> input;
  std::function<Matrix(const LayerContext&, const Matrix&)> weight;
};

inline Model init_model(const ModelSpec& spec) {
  spec.validate();
  const std::size_t d = spec.hidden_dim;
  const std::size_t n = spec.token_count;
  const std::size_t steps = spec.num_timesteps;
  const Rng root(spec.seed);

  Model model;
  model.spec = spec;
  model.layers.reserve(spec.num_layers);
  for (std::size_t l = 0; l < spec.num_layers; ++l) {
    Rng rng = root.fork(l + 1);
    LayerWeights lw;
    lw.index = l;
    lw.kind = (l % 2 == 0) ? LayerKind::kAttentionProxy : LayerKind::kMlp;
    lw.weight = Matrix::random_normal(d, d, rng, 1.0 / std::sqrt(static_cast<double>(d)));
    lw.bias.resize(d);
    for (double& b : lw.bias) b = 0.1 * rng.normal();

    // Each layer gets a preferred phase of the trajectory where its shift
    // peaks. Around that phase one channel turns into an outlier, which is
    // what widens the activation range at some timesteps and not others.
    std::vector<double> direction(d);
    for (double& v : direction) v = rng.normal();
    const double phase = rng.uniform();
    const double width = 0.15 + 0.25 * rng.uniform();
    const auto outlier = static_cast<std::size_t>(rng.uniform() * static_cast<double>(d));
    const double outlier_sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    lw.shifts = Matrix(steps, d);
    for (std::size_t t = 1; t <= steps; ++t) {
      const double s = steps == 1 ? 0.0
                                  : static_cast<double>(t - 1) / static_cast<double>(steps - 1);
      const double z = (s - phase) / width;
      const double bump = std::exp(-z * z);
      const double amp = spec.shift_scale * (0.2 + 0.8 * bump);
      for (std::size_t i = 0; i < d; ++i) {
        lw.shifts(t - 1, i) = amp * direction[i] + 0.1 * spec.shift_scale * rng.normal();
      }
      lw.shifts(t - 1, std::min(outlier, d - 1)) +=
          outlier_sign * spec.shift_scale * spec.outlier_scale * bump * bump;
    }
    // Massive-activation channels read through small weights, so the
    // outlier widens the quantization range without saturating the block.
    const double damp_col = 1.0 / (1.0 + spec.shift_scale * spec.outlier_scale);
    for (std::size_t i = 0; i < d; ++i) lw.weight(i, std::min(outlier, d - 1)) *= damp_col;
    model.layers.push_back(std::move(lw));
  }

  Rng mix_rng = root.fork(0);
  model.mixing = Matrix(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<double> logits(n);
    for (double& v : logits) v = mix_rng.normal();
    const auto col = softmax_with_temperature(logits, 1.0);
    for (std::size_t i = 0; i < n; ++i) model.mixing(i, j) = col[i];
  }
  return model;
}

/// FNV-1a over the raw bits of every parameter.
inline std::uint64_t model_fingerprint(const Model& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](std::span<const double> xs) {
    for (double x : xs) {
      std::uint64_t bits;
      std::memcpy(&bits, &x, sizeof bits);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffu;
        h *= 0x100000001b3ULL;
      }
    }
  };
  for (const auto& layer : model.layers) {
    feed(layer.weight.data());
    feed(layer.bias);
    feed(layer.shifts.data());
  }
  feed(model.mixing.data());
  return h;
}

namespace detail {

struct ForwardCache {
  std::vector<Matrix> inputs;       // x_l after hook
  std::vector<Matrix> activations;  // tanh(W x + b)
  std::vector<Matrix> weights;      // W_l after hook
  Matrix output;
};

inline void check_state(const Model& model, const DenoiseState& state) {
  const std::size_t d = model.spec.hidden_dim;
  const std::size_t n = model.spec.token_count;
  if (state.latent.rows() != d || state.latent.cols() != n) {
    throw ShapeError("latent " + state.latent.shape_string() + " does not match model " +
                     std::to_string(d) + "x" + std::to_string(n));
  }
  if (state.timestep < 1 || state.timestep > model.spec.num_timesteps) {
    throw ParameterError("timestep " + std::to_string(state.timestep) + " outside 1.." +
                         std::to_string(model.spec.num_timesteps));
  }
}

inline Matrix layer_input(const Model& model, std::size_t l, std::size_t t,
                          const Matrix& h) {
  const auto& layer = model.layers[l];
  Matrix u = h;
  auto shift = layer.shifts.row(t - 1);
  for (std::size_t i = 0; i < u.rows(); ++i)
    for (std::size_t j = 0; j < u.cols(); ++j) u(i, j) += shift[i];
  if (layer.kind == LayerKind::kAttentionProxy) u = matmul(u, model.mixing);
  return u;
}

inline ForwardCache forward_cached(const Model& model, const DenoiseState& state,
                                   const ExecutionHook* hook, bool keep) {
  check_state(model, state);
  const std::size_t t = state.timestep;
  ForwardCache cache;
  Matrix h = state.latent;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const LayerContext ctx{t, l};
    Matrix x = layer_input(model, l, t, h);
    if (hook && hook->input) {
      Matrix hooked = hook->input(ctx, x);
      if (!hooked.same_shape(x)) {
        throw ShapeError("hook returned input " + hooked.shape_string() + " at (t=" +
                         std::to_string(t) + ", l=" + std::to_string(l) + "), expected " +
                         x.shape_string());
      }
      x = std::move(hooked);
    }
    const Matrix* w = &model.layers[l].weight;
    Matrix hooked_w;
    if (hook && hook->weight) {
      hooked_w = hook->weight(ctx, *w);
      if (!hooked_w.same_shape(*w)) {
        throw ShapeError("hook returned weight " + hooked_w.shape_string() + " at (t=" +
                         std::to_string(t) + ", l=" + std::to_string(l) + "), expected " +
                         w->shape_string());
      }
      w = &hooked_w;
    }
    Matrix a = matmul(*w, x);
    const auto& bias = model.layers[l].bias;
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < a.cols(); ++j) a(i, j) = std::tanh(a(i, j) + bias[i]);
    h += a;
    if (keep) {
      cache.inputs.push_back(std::move(x));
      cache.activations.push_back(std::move(a));
      cache.weights.push_back(*w);
    } else {
      cache.inputs.push_back(std::move(x));
    }
  }
  cache.output = std::move(h);
  return cache;
}

inline Matrix hconcat(const Matrix& a, const Matrix& b) {
  if (a.empty()) return b;
  if (a.rows() != b.rows()) {
    throw ShapeError("hconcat: " + a.shape_string() + " vs " + b.shape_string());
  }
  Matrix out(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::copy(a.row(i).begin(), a.row(i).end(), out.row(i).begin());
    std::copy(b.row(i).begin(), b.row(i).end(), out.row(i).begin() + a.cols());
  }
  return out;
}

}  // namespace detail

/// Predicted noise eps(z_t, t). When `trace` is non-null it receives the L
/// layer inputs in layer order.
inline Matrix forward(const Model& model, const DenoiseState& state,
                      const ExecutionHook* hook = nullptr,
                      std::vector<Matrix>* trace = nullptr) {
  auto cache = detail::forward_cached(model, state, hook, false);
  if (trace) {
    for (auto& x : cache.inputs) trace->push_back(std::move(x));
  }
  return std::move(cache.output);
}

/// Exact gradients of ||forward(state) - target||_F^2 with respect to every
/// W_l, in full precision.
inline std::vector<Matrix> backward_weight_grads(const Model& model,
                                                 const DenoiseState& state,
                                                 const Matrix& target) {
  auto cache = detail::forward_cached(model, state, nullptr, true);
  if (!target.same_shape(cache.output)) {
    throw ShapeError("target " + target.shape_string() + " does not match output " +
                     cache.output.shape_string());
  }
  const std::size_t num_layers = model.num_layers();
  std::vector<Matrix> grads(num_layers);
  Matrix g = cache.output - target;  // dL/dh, up to the factor 2
  g *= 2.0;
  for (std::size_t l = num_layers; l-- > 0;) {
    const Matrix& a = cache.activations[l];
    Matrix dpre = g;
    for (std::size_t i = 0; i < dpre.size(); ++i) {
      const double av = a.data()[i];
      dpre.data()[i] *= 1.0 - av * av;
    }
    grads[l] = matmul(dpre, cache.inputs[l].transpose());
    Matrix dx = matmul(cache.weights[l].transpose(), dpre);
    if (model.layers[l].kind == LayerKind::kAttentionProxy) {
      dx = matmul(dx, model.mixing.transpose());
    }
    g += dx;
  }
  return grads;
}

struct Trajectory {
  std::vector<DenoiseState> states;  // timesteps T, T-1, ..., 1
  Matrix final_latent;               // z_0
};

inline Matrix initial_latent(const Model& model, std::uint64_t seed) {
  Rng rng(seed);
  return Matrix::random_normal(model.spec.hidden_dim, model.spec.token_count, rng);
}

/// Euler sampler z_{t-1} = z_t - eps(z_t, t) / T starting from N(0, I).
/// The hook sees the timestep in its LayerContext, so schedules that vary
/// per step are expressed through a single hook.
inline Trajectory sample_trajectory(
    const Model& model, const ExecutionHook* hook, std::uint64_t seed,
    std::vector<ActivationTrace>* traces = nullptr) {
  const std::size_t steps = model.spec.num_timesteps;
  const double dt = 1.0 / static_cast<double>(steps);
  Trajectory traj;
  traj.states.reserve(steps);
  Matrix z = initial_latent(model, seed);
  for (std::size_t t = steps; t >= 1; --t) {
    DenoiseState state{z, t};
    std::vector<Matrix> inputs;
    Matrix eps = forward(model, state, hook, traces ? &inputs : nullptr);
    if (traces) traces->push_back(ActivationTrace{t, seed, std::move(inputs)});
    traj.states.push_back(std::move(state));
    z -= eps * dt;
  }
  traj.final_latent = std::move(z);
  return traj;
}

/// Full-precision traces for a calibration batch: one ActivationTrace per
/// timestep (T first), each layer input holding n * seeds.size() columns.
inline std::vector<ActivationTrace> collect_traces(const Model& model,
                                                   std::span<const std::uint64_t> seeds,
                                                   std::uint64_t batch_id = 0) {
  if (seeds.empty()) throw ParameterError("collect_traces needs at least one seed");
  const std::size_t steps = model.spec.num_timesteps;
  std::vector<ActivationTrace> merged(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    merged[k].timestep = steps - k;
    merged[k].batch_id = batch_id;
    merged[k].inputs.resize(model.num_layers());
  }
  for (std::uint64_t seed : seeds) {
    std::vector<ActivationTrace> per_seed;
    sample_trajectory(model, nullptr, seed, &per_seed);
    for (std::size_t k = 0; k < steps; ++k) {
      for (std::size_t l = 0; l < model.num_layers(); ++l) {
        merged[k].inputs[l] = detail::hconcat(merged[k].inputs[l], per_seed[k].inputs[l]);
      }
    }
  }
  return merged;
}

}  // namespace tsq
