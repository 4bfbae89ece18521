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

// Timestep-dynamic activation bit-width allocation.
//
// A schedule assigns every (timestep, layer) an activation bit-width. The
// search walks the trajectory in sampler order (t = T down to 1), extends
// each retained partial schedule with every candidate configuration of the
// current step and keeps the Pareto frontier of (cumulative bits,
// cumulative step loss). Step losses are measured on teacher-forced
// reference latents, so they depend only on (t, configuration) and are
// cached.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsq/error.hpp"
#include "tsq/fisher.hpp"
#include "tsq/quant.hpp"
#include "tsq/toy_dit.hpp"

namespace tsq {

struct SearchConfig {
  std::size_t beam_width = 32;     // M
  std::size_t num_candidates = 9;  // M_c
  double b_target = 4.0;
  std::vector<int> palette = {3, 4, 8};

  void validate() const {
    if (beam_width < 1) throw ParameterError("beam_width must be >= 1");
    if (num_candidates < 1) throw ParameterError("num_candidates must be >= 1");
    if (palette.empty()) throw ParameterError("palette must not be empty");
    if (!std::is_sorted(palette.begin(), palette.end()) ||
        std::adjacent_find(palette.begin(), palette.end()) != palette.end()) {
      throw ParameterError("palette must be strictly increasing");
    }
    for (int b : palette) QuantSpec::activations(b).validate();
    if (!(b_target >= palette.front() && b_target <= palette.back())) {
      throw ParameterError("b_target must lie within the palette range");
    }
  }
};

struct CandidateConfig {
  std::size_t timestep = 0;
  std::vector<int> bits;  // one per layer

  long bit_sum() const { return std::accumulate(bits.begin(), bits.end(), 0L); }
  double average() const {
    return static_cast<double>(bit_sum()) / static_cast<double>(bits.size());
  }
};

/// Layer order by descending Fisher score at t; ties keep the lower index
/// first.
inline std::vector<std::size_t> rank_layers(const FisherMap& fisher, std::size_t t) {
  std::vector<std::size_t> order(fisher.layers());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return fisher.scores.at(t, a) > fisher.scores.at(t, b);
  });
  return order;
}

/// Quantile sweep over the Fisher ranking at t. Candidate k spends
/// u_k = round(k / (M_c - 1) * (P - 1) * L) single-level upgrades, handed
/// out one palette level at a time and most sensitive layer first: every
/// layer first climbs from palette[0] to palette[1] in rank order, then
/// from palette[1] to palette[2], and so on. With a two-entry palette this
/// is exactly "top q_k fraction gets the high bit". Candidate 0 is all-base
/// and candidate M_c-1 is all-top. Duplicates are dropped.
inline std::vector<CandidateConfig> generate_candidates(const FisherMap& fisher, std::size_t t,
                                                        const SearchConfig& cfg) {
  if (cfg.num_candidates < 1) throw ParameterError("num_candidates must be >= 1");
  if (t < 1 || t > fisher.timesteps()) {
    throw ParameterError("generate_candidates: timestep " + std::to_string(t) + " out of range");
  }
  const std::size_t num_layers = fisher.layers();
  const std::size_t levels = cfg.palette.size();
  const std::size_t total = (levels - 1) * num_layers;
  const auto order = rank_layers(fisher, t);
  std::vector<std::size_t> rank(num_layers);
  for (std::size_t r = 0; r < num_layers; ++r) rank[order[r]] = r;

  std::vector<CandidateConfig> out;
  const std::size_t mc = cfg.num_candidates;
  for (std::size_t k = 0; k < mc; ++k) {
    const std::size_t upgrades = mc == 1 ? 0 : (k * total + (mc - 1) / 2) / (mc - 1);
    const std::size_t full = num_layers == 0 ? 0 : upgrades / num_layers;
    const std::size_t partial = num_layers == 0 ? 0 : upgrades % num_layers;
    CandidateConfig c{t, std::vector<int>(num_layers)};
    for (std::size_t l = 0; l < num_layers; ++l) {
      const std::size_t level = std::min(levels - 1, full + (rank[l] < partial ? 1 : 0));
      c.bits[l] = cfg.palette[level];
    }
    const bool dup = std::any_of(out.begin(), out.end(),
                                 [&](const CandidateConfig& o) { return o.bits == c.bits; });
    if (!dup) out.push_back(std::move(c));
  }
  return out;
}

struct SearchPath {
  std::vector<CandidateConfig> steps;  // in search order (t = T first)
  double loss = 0.0;  // E: cumulative step loss
  double bits = 0.0;  // B: cumulative per-step average bits
  long bit_sum = 0;   // exact integer total of all entries so far
};

/// Budget check: mean over all T x L entries <= b_target.
inline bool within_budget(long bit_sum, std::size_t timesteps, std::size_t layers,
                          double b_target) {
  return static_cast<double>(bit_sum) /
             static_cast<double>(timesteps * layers) <= b_target;
}

inline bool dominates(const SearchPath& a, const SearchPath& b) {
  return a.bits <= b.bits && a.loss <= b.loss;
}

/// Drops dominated paths (exact duplicates keep their earliest copy), then
/// if more than `beam_width` survive keeps those closest to the origin
/// after scaling both axes by the survivors' maxima. Output is sorted by
/// ascending bits, which makes loss strictly decreasing.
inline std::vector<SearchPath> pareto_prune(std::vector<SearchPath> paths,
                                            std::size_t beam_width) {
  if (beam_width < 1) throw ParameterError("pareto_prune: beam width must be >= 1");
  std::vector<std::size_t> order(paths.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (paths[a].bits != paths[b].bits) return paths[a].bits < paths[b].bits;
    return paths[a].loss < paths[b].loss;
  });

  std::vector<std::size_t> survivors;
  double best_loss = std::numeric_limits<double>::infinity();
  for (std::size_t i : order) {
    if (paths[i].loss < best_loss) {
      survivors.push_back(i);
      best_loss = paths[i].loss;
    }
  }

  if (survivors.size() > beam_width) {
    double max_bits = 0.0, max_loss = 0.0;
    for (std::size_t i : survivors) {
      max_bits = std::max(max_bits, paths[i].bits);
      max_loss = std::max(max_loss, paths[i].loss);
    }
    auto dist = [&](std::size_t i) {
      const double b = max_bits > 0.0 ? paths[i].bits / max_bits : 0.0;
      const double e = max_loss > 0.0 ? paths[i].loss / max_loss : 0.0;
      return std::sqrt(b * b + e * e);
    };
    std::vector<std::pair<double, std::size_t>> ranked;  // (distance, position)
    for (std::size_t k = 0; k < survivors.size(); ++k) ranked.emplace_back(dist(survivors[k]), k);
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    ranked.resize(beam_width);
    std::sort(ranked.begin(), ranked.end(),
              [](const auto& a, const auto& b) { return a.second < b.second; });
    std::vector<std::size_t> kept;
    for (const auto& [d, k] : ranked) kept.push_back(survivors[k]);
    survivors = std::move(kept);
  }

  std::vector<SearchPath> out;
  out.reserve(survivors.size());
  for (std::size_t i : survivors) out.push_back(std::move(paths[i]));
  return out;
}

using StepLossFn = std::function<double(const CandidateConfig&)>;

/// Candidate sets per step in search order (t = T, T-1, ..., 1).
using CandidateSchedule = std::vector<std::vector<CandidateConfig>>;

inline CandidateSchedule candidates_for_all_steps(const FisherMap& fisher,
                                                  const SearchConfig& cfg) {
  CandidateSchedule out;
  for (std::size_t t = fisher.timesteps(); t >= 1; --t)
    out.push_back(generate_candidates(fisher, t, cfg));
  return out;
}

inline SearchPath extend(const SearchPath& path, const CandidateConfig& c, double step_loss) {
  SearchPath next = path;
  next.loss = path.loss + step_loss;
  next.bits = path.bits + c.average();
  next.bit_sum = path.bit_sum + c.bit_sum();
  next.steps.push_back(c);
  return next;
}

/// Beam search over the given candidate sets. Returns the final frontier.
///
/// With a budget, a partial path is dropped as soon as it cannot meet the
/// budget even if every remaining step takes its cheapest candidate. The
/// all-cheapest continuation of any surviving path stays feasible, so the
/// frontier never empties when the all-base schedule meets the budget.
inline std::vector<SearchPath> beam_search(const CandidateSchedule& candidates,
                                           const StepLossFn& step_loss,
                                           std::size_t beam_width,
                                           std::optional<double> b_target = std::nullopt) {
  const std::size_t steps = candidates.size();
  const std::size_t layers =
      steps && !candidates.front().empty() ? candidates.front().front().bits.size() : 0;
  // cheapest_rest[s] = minimal bit total of steps s..end
  std::vector<long> cheapest_rest(steps + 1, 0);
  for (std::size_t s = steps; s-- > 0;) {
    if (candidates[s].empty()) throw InternalError("beam_search: step without candidates");
    long lo = candidates[s].front().bit_sum();
    for (const auto& c : candidates[s]) lo = std::min(lo, c.bit_sum());
    cheapest_rest[s] = cheapest_rest[s + 1] + lo;
  }
  if (b_target && !within_budget(cheapest_rest[0], steps, layers, *b_target)) {
    throw InfeasibleBudgetError(
        "b_target " + std::to_string(*b_target) + " is below the cheapest schedule",
        static_cast<double>(cheapest_rest[0]) / static_cast<double>(steps * layers));
  }

  std::vector<SearchPath> frontier{SearchPath{}};
  for (std::size_t s = 0; s < steps; ++s) {
    const auto& step = candidates[s];
    std::vector<double> losses;
    losses.reserve(step.size());
    for (const auto& c : step) losses.push_back(step_loss(c));
    std::vector<SearchPath> expanded;
    expanded.reserve(frontier.size() * step.size());
    for (const auto& path : frontier) {
      for (std::size_t k = 0; k < step.size(); ++k) {
        if (b_target && !within_budget(path.bit_sum + step[k].bit_sum() + cheapest_rest[s + 1],
                                       steps, layers, *b_target)) {
          continue;
        }
        expanded.push_back(extend(path, step[k], losses[k]));
      }
    }
    if (expanded.empty()) throw InternalError("beam_search: empty frontier");
    frontier = pareto_prune(std::move(expanded), beam_width);
  }
  return frontier;
}

struct BitSchedule {
  std::size_t timesteps = 0;
  std::size_t layers = 0;
  std::vector<std::vector<int>> grid;  // grid[t-1][l]
  double avg_bits = 0.0;
  double param_weighted_avg_bits = 0.0;
  std::vector<double> per_step_loss;   // index t-1
  double cumulative_loss = 0.0;
  double end_to_end_error = std::numeric_limits<double>::quiet_NaN();
  SearchConfig search_config;
  std::vector<std::uint64_t> seeds;

  int bits_at(std::size_t t, std::size_t l) const { return grid.at(t - 1).at(l); }

  long bit_sum() const {
    long s = 0;
    for (const auto& row : grid) s = std::accumulate(row.begin(), row.end(), s);
    return s;
  }
};

/// Uniform mean and parameter-count-weighted mean of the bit grid.
inline void fill_averages(BitSchedule& s, std::span<const std::size_t> param_counts) {
  if (param_counts.size() != s.layers) {
    throw ShapeError("fill_averages: parameter counts do not match layers");
  }
  s.avg_bits = static_cast<double>(s.bit_sum()) / static_cast<double>(s.timesteps * s.layers);
  double weighted = 0.0, total = 0.0;
  for (std::size_t t = 1; t <= s.timesteps; ++t) {
    for (std::size_t l = 0; l < s.layers; ++l) {
      weighted += static_cast<double>(s.bits_at(t, l)) * static_cast<double>(param_counts[l]);
      total += static_cast<double>(param_counts[l]);
    }
  }
  s.param_weighted_avg_bits = weighted / total;
}

inline std::vector<std::size_t> parameter_counts(const Model& model) {
  std::vector<std::size_t> out;
  for (const auto& layer : model.layers) out.push_back(layer.parameter_count());
  return out;
}

inline BitSchedule uniform_schedule(const Model& model, int bits) {
  BitSchedule s;
  s.timesteps = model.num_timesteps();
  s.layers = model.num_layers();
  s.grid.assign(s.timesteps, std::vector<int>(s.layers, bits));
  s.per_step_loss.assign(s.timesteps, 0.0);
  fill_averages(s, parameter_counts(model));
  return s;
}

inline BitSchedule schedule_from_path(const SearchPath& path, std::size_t timesteps,
                                      std::size_t layers,
                                      std::span<const std::size_t> param_counts,
                                      const StepLossFn& step_loss = {}) {
  if (path.steps.size() != timesteps) {
    throw ShapeError("schedule_from_path: path covers " + std::to_string(path.steps.size()) +
                     " of " + std::to_string(timesteps) + " timesteps");
  }
  BitSchedule s;
  s.timesteps = timesteps;
  s.layers = layers;
  s.grid.assign(timesteps, std::vector<int>(layers, 0));
  s.per_step_loss.assign(timesteps, 0.0);
  for (const auto& c : path.steps) {
    if (c.bits.size() != layers) throw ShapeError("schedule_from_path: layer count mismatch");
    s.grid[c.timestep - 1] = c.bits;
    if (step_loss) s.per_step_loss[c.timestep - 1] = step_loss(c);
  }
  s.cumulative_loss = path.loss;
  fill_averages(s, param_counts);
  return s;
}

/// Lowest-loss path that meets the budget, or nullptr.
inline const SearchPath* best_feasible(std::span<const SearchPath> frontier,
                                       std::size_t timesteps, std::size_t layers,
                                       double b_target) {
  const SearchPath* best = nullptr;
  for (const auto& p : frontier) {
    if (!within_budget(p.bit_sum, timesteps, layers, b_target)) continue;
    if (!best || p.loss < best->loss || (p.loss == best->loss && p.bit_sum < best->bit_sum))
      best = &p;
  }
  return best;
}

inline constexpr std::size_t kBruteForceLimit = 10000;

/// Exhaustive enumeration of every candidate sequence. Losses are summed in
/// the same order as beam_search so the two agree to the bit.
inline SearchPath brute_force_optimum(const CandidateSchedule& candidates,
                                      const StepLossFn& step_loss, std::size_t layers,
                                      double b_target) {
  double count = 1.0;
  for (const auto& step : candidates) count *= static_cast<double>(step.size());
  if (count > static_cast<double>(kBruteForceLimit)) {
    throw ParameterError("brute_force_optimum: " + std::to_string(static_cast<long>(count)) +
                         " sequences exceed the limit of " + std::to_string(kBruteForceLimit));
  }
  const std::size_t steps = candidates.size();
  std::vector<std::vector<double>> losses(steps);
  for (std::size_t s = 0; s < steps; ++s)
    for (const auto& c : candidates[s]) losses[s].push_back(step_loss(c));

  SearchPath best;
  bool found = false;
  double closest = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> idx(steps, 0);
  bool more = true;
  while (more) {
    SearchPath p;
    for (std::size_t s = 0; s < steps; ++s) p = extend(p, candidates[s][idx[s]], losses[s][idx[s]]);
    const double avg = static_cast<double>(p.bit_sum) / static_cast<double>(steps * layers);
    closest = std::min(closest, avg);
    if (within_budget(p.bit_sum, steps, layers, b_target) &&
        (!found || p.loss < best.loss || (p.loss == best.loss && p.bit_sum < best.bit_sum))) {
      best = std::move(p);
      found = true;
    }
    // odometer increment, last step fastest
    more = false;
    for (std::size_t s = steps; s-- > 0;) {
      if (++idx[s] < candidates[s].size()) {
        more = true;
        break;
      }
      idx[s] = 0;
    }
  }
  if (!found) {
    throw InfeasibleBudgetError("no candidate sequence meets b_target " +
                                    std::to_string(b_target) + "; closest average is " +
                                    std::to_string(closest),
                                closest);
  }
  return best;
}

using EndToEndFn = std::function<double(const BitSchedule&)>;

/// Keeps frontier paths within budget, scores each with an end-to-end
/// generation test and returns the best (ties: fewer bits).
inline BitSchedule final_select(std::span<const SearchPath> frontier, const SearchConfig& cfg,
                                std::size_t timesteps, std::size_t layers,
                                std::span<const std::size_t> param_counts,
                                const EndToEndFn& end_to_end, const StepLossFn& step_loss = {}) {
  if (frontier.empty()) throw ParameterError("final_select: empty frontier");
  std::optional<BitSchedule> best;
  double closest = std::numeric_limits<double>::infinity();
  for (const auto& path : frontier) {
    const double avg =
        static_cast<double>(path.bit_sum) / static_cast<double>(timesteps * layers);
    closest = std::min(closest, avg);
    if (!within_budget(path.bit_sum, timesteps, layers, cfg.b_target)) continue;
    BitSchedule s = schedule_from_path(path, timesteps, layers, param_counts, step_loss);
    s.end_to_end_error = end_to_end(s);
    if (!best || s.end_to_end_error < best->end_to_end_error ||
        (s.end_to_end_error == best->end_to_end_error && s.avg_bits < best->avg_bits)) {
      best = std::move(s);
    }
  }
  if (!best) {
    throw InfeasibleBudgetError("no frontier path meets b_target " +
                                    std::to_string(cfg.b_target) +
                                    "; closest feasible average is " + std::to_string(closest),
                                closest);
  }
  best->search_config = cfg;
  return *best;
}

}  // namespace tsq
