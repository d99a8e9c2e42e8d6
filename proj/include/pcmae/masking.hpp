// Copyright (c) 2026 The pcmae Authors
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

// Multi-scale point representation and cross-scale consistent masking.
//
// Scale 0 is the raw input. Scale i (1..S) holds N_i seeds picked by FPS
// from scale i-1 together with the k_i-NN table into scale i-1. A random
// mask is drawn at scale S only; visibility is then back-projected: a
// scale-i point is visible iff it is a neighbor of some visible scale-(i+1)
// seed.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pcmae/geometry.hpp"
#include "pcmae/rng.hpp"

namespace pcmae {

struct ScaleLevel {
  PointSet seeds;                         // P_i
  std::vector<std::uint32_t> seed_index;  // position of each seed in scale i-1
  NeighborIndex neighbors;                // I_i, entries index scale i-1
};

struct MultiScaleRepr {
  PointSet input;
  std::vector<ScaleLevel> levels;  // levels[i - 1] is scale i

  std::size_t num_scales() const noexcept { return levels.size(); }
  /// Scale i >= 1.
  const ScaleLevel& level(std::size_t i) const { return levels.at(i - 1); }
  /// Points of scale i; scale 0 is the input.
  const PointSet& points(std::size_t i) const { return i == 0 ? input : levels.at(i - 1).seeds; }
};

/// Requires N > N_1 > ... > N_S >= 1 and 1 <= k_i <= N_{i-1}; throws
/// ConfigError otherwise.
MultiScaleRepr build_scales(const PointSet& points, std::span<const std::size_t> counts,
                            std::span<const std::size_t> ks);

struct MaskAssignment {
  std::vector<std::vector<bool>> visible;  // visible[i - 1] for scale i

  std::size_t num_scales() const noexcept { return visible.size(); }
  const std::vector<bool>& at(std::size_t i) const { return visible.at(i - 1); }
  std::size_t visible_count(std::size_t i) const;
  std::size_t masked_count(std::size_t i) const { return at(i).size() - visible_count(i); }
  std::vector<std::uint32_t> visible_indices(std::size_t i) const;
  std::vector<std::uint32_t> masked_indices(std::size_t i) const;
};

/// floor(ratio * n), with a 1e-9 guard against representation error in the
/// product (so 0.29 * 100 gives 29).
std::size_t masked_count_for(std::size_t n, double ratio);

/// Exactly masked_count_for(n, ratio) entries are false (masked), chosen
/// uniformly without replacement by a partial Fisher-Yates shuffle.
std::vector<bool> sample_scale_mask(std::size_t n, double ratio, Rng& rng);

/// Propagates scale-S visibility down to scale 1. When no scale-S point is
/// masked every point of every scale is visible. Throws ContractError when
/// no scale-S point is visible or the length does not match N_S.
MaskAssignment back_project(const MultiScaleRepr& repr, std::vector<bool> scale_s_visible);

/// Ablation: an independent random mask per scale (no back-projection).
MaskAssignment independent_masks(const MultiScaleRepr& repr, double ratio, Rng& rng);

/// Draws the scale-S mask and back-projects it, or draws independent masks
/// when `multi_scale` is false.
MaskAssignment make_mask(const MultiScaleRepr& repr, double ratio, Rng& rng, bool multi_scale = true);

/// Every neighbor of a visible scale-(i+1) seed is visible at scale i.
bool satisfies_closure(const MultiScaleRepr& repr, const MaskAssignment& mask);

/// Every visible scale-i point (i < S) is a neighbor of a visible
/// scale-(i+1) seed. Holds for back-projected masks with at least one masked
/// scale-S point.
bool satisfies_minimality(const MultiScaleRepr& repr, const MaskAssignment& mask);

}  // namespace pcmae
