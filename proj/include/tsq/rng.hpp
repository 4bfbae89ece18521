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

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace tsq {

/// Counter-based generator: draw k of stream `seed` is a pure function of
/// (seed, k), so a state can be copied, forked or replayed without any
/// hidden global. The mixing function is SplitMix64.
class Rng {
 public:
  explicit constexpr Rng(std::uint64_t seed, std::uint64_t position = 0)
      : seed_(seed), position_(position) {}

  constexpr std::uint64_t seed() const noexcept { return seed_; }
  constexpr std::uint64_t position() const noexcept { return position_; }

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  constexpr std::uint64_t next_u64() noexcept {
    ++position_;
    return mix(mix(seed_) + position_ * 0x9e3779b97f4a7c15ULL);
  }

  /// Uniform on [0, 1) with 53 random bits.
  constexpr double uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller; consumes exactly two draws.
  double normal() noexcept {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent stream derived from this one's seed and a stream id.
  constexpr Rng fork(std::uint64_t stream) const noexcept {
    return Rng(mix(seed_ ^ mix(stream + 0x632be59bd9b4e019ULL)));
  }

 private:
  std::uint64_t seed_;
  std::uint64_t position_;
};

}  // namespace tsq
