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

// Uniform affine fake quantization.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tsq/error.hpp"
#include "tsq/numerics.hpp"
#include "tsq/toy_dit.hpp"

namespace tsq {

/// Bit-width that means "leave the tensor in full precision".
inline constexpr int kPassThroughBits = 16;

/// Smallest scale ever produced by calibration.
inline constexpr double kMinScale = 1e-12;

enum class Granularity { kPerTensor, kPerChannel };

struct QuantSpec {
  int bits = 8;
  bool symmetric = true;
  Granularity granularity = Granularity::kPerTensor;

  bool pass_through() const noexcept { return bits == kPassThroughBits; }

  void validate() const {
    if (!(pass_through() || (bits >= 2 && bits <= 8))) {
      throw ParameterError("unsupported bit-width " + std::to_string(bits) +
                           " (expected 2..8 or 16)");
    }
  }

  static QuantSpec weights(int bits) {
    return {bits, true, Granularity::kPerChannel};
  }
  static QuantSpec activations(int bits) {
    return {bits, false, Granularity::kPerTensor};
  }
};

/// One (scale, zero_point) per group; a single group for per-tensor, one
/// per matrix row for per-channel.
struct QuantParams {
  int bits = kPassThroughBits;
  std::vector<double> scale;
  std::vector<std::int64_t> zero_point;
  std::int64_t qmin = 0;
  std::int64_t qmax = 0;
  Granularity granularity = Granularity::kPerTensor;

  bool pass_through() const noexcept { return bits == kPassThroughBits; }

  std::size_t group_of(std::size_t row) const noexcept {
    return granularity == Granularity::kPerChannel ? row : 0;
  }

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

inline std::pair<std::int64_t, std::int64_t> quant_range(int bits, bool symmetric) {
  if (symmetric) {
    const std::int64_t half = std::int64_t{1} << (bits - 1);
    return {-half, half - 1};
  }
  return {0, (std::int64_t{1} << bits) - 1};
}

namespace detail {

inline void calibrate_group(double lo, double hi, const QuantSpec& spec,
                            QuantParams& out) {
  if (spec.symmetric) {
    const double amax = std::max(std::abs(lo), std::abs(hi));
    out.scale.push_back(std::max(amax / static_cast<double>(out.qmax), kMinScale));
    out.zero_point.push_back(0);
    return;
  }
  // Extend the range to cover zero so that real 0 is exactly representable.
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  const double scale =
      std::max((hi - lo) / static_cast<double>(out.qmax - out.qmin), kMinScale);
  const double zp = static_cast<double>(out.qmin) - std::nearbyint(lo / scale);
  out.scale.push_back(scale);
  out.zero_point.push_back(std::clamp(static_cast<std::int64_t>(zp), out.qmin, out.qmax));
}

}  // namespace detail

/// Min-max calibration. Per-channel groups are matrix rows.
inline QuantParams calibrate_minmax(const Matrix& x, const QuantSpec& spec) {
  spec.validate();
  if (x.empty()) throw ParameterError("calibrate_minmax: empty input");
  if (!x.all_finite()) throw ParameterError("calibrate_minmax: non-finite input");
  QuantParams p;
  p.bits = spec.bits;
  p.granularity = spec.granularity;
  if (spec.pass_through()) {
    p.scale = {1.0};
    p.zero_point = {0};
    return p;
  }
  std::tie(p.qmin, p.qmax) = quant_range(spec.bits, spec.symmetric);
  if (spec.granularity == Granularity::kPerTensor) {
    const auto [lo, hi] = std::minmax_element(x.data().begin(), x.data().end());
    detail::calibrate_group(*lo, *hi, spec, p);
  } else {
    for (std::size_t r = 0; r < x.rows(); ++r) {
      const auto row = x.row(r);
      const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
      detail::calibrate_group(*lo, *hi, spec, p);
    }
  }
  return p;
}

/// Integer code of one value. Ties round to even.
inline std::int64_t quantize_value(double x, double scale, std::int64_t zero_point,
                                   std::int64_t qmin, std::int64_t qmax) {
  const double q = std::nearbyint(x / scale) + static_cast<double>(zero_point);
  return std::clamp(static_cast<std::int64_t>(std::clamp(q, -1e18, 1e18)), qmin, qmax);
}

inline double dequantize_value(std::int64_t code, double scale, std::int64_t zero_point) {
  return static_cast<double>(code - zero_point) * scale;
}

/// Quantize-dequantize a single value with group parameters.
inline double fake_quant_value(double x, double scale, std::int64_t zero_point,
                               std::int64_t qmin, std::int64_t qmax) {
  return dequantize_value(quantize_value(x, scale, zero_point, qmin, qmax), scale,
                          zero_point);
}

inline Matrix fake_quant(const Matrix& x, const QuantParams& p) {
  if (p.pass_through()) return x;
  const std::size_t groups = p.granularity == Granularity::kPerChannel ? x.rows() : 1;
  if (p.scale.size() != groups || p.zero_point.size() != groups) {
    throw ShapeError("fake_quant: " + std::to_string(p.scale.size()) +
                     " parameter groups for a " + x.shape_string() + " tensor");
  }
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const std::size_t g = p.group_of(r);
    const double s = p.scale[g];
    const std::int64_t zp = p.zero_point[g];
    auto in = x.row(r);
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c)
      o[c] = fake_quant_value(in[c], s, zp, p.qmin, p.qmax);
  }
  return out;
}

struct QuantizedWeights {
  Matrix weight;
  QuantParams params;
};

/// Static min-max weight quantization (the "round to nearest" baseline).
inline QuantizedWeights quantize_layer_weights(const LayerWeights& w, const QuantSpec& spec) {
  QuantParams params = calibrate_minmax(w.weight, spec);
  Matrix q = fake_quant(w.weight, params);
  return {std::move(q), std::move(params)};
}

inline double mse(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("mse: " + a.shape_string() + " vs " + b.shape_string());
  }
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = a.data()[i] - b.data()[i];
    s += e * e;
  }
  return s / static_cast<double>(a.size());
}

}  // namespace tsq
