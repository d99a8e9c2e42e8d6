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

#include "pcmae/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace pcmae {

MultiScaleRepr build_scales(const PointSet& points, std::span<const std::size_t> counts,
                            std::span<const std::size_t> ks) {
  if (counts.empty() || counts.size() != ks.size())
    throw ConfigError("build_scales: need one k per scale (" + std::to_string(counts.size()) +
                      " counts, " + std::to_string(ks.size()) + " ks)");
  std::size_t prev = points.size();
  for (std::size_t i = 0; i < counts.size(); ++i) {
    if (counts[i] < 1 || counts[i] >= prev)
      throw ConfigError("build_scales: scale " + std::to_string(i + 1) + " has " +
                        std::to_string(counts[i]) + " points, need 1 <= N_i < " + std::to_string(prev));
    if (ks[i] < 1 || ks[i] > prev)
      throw ConfigError("build_scales: k_" + std::to_string(i + 1) + " = " + std::to_string(ks[i]) +
                        " exceeds the " + std::to_string(prev) + " points of the parent scale");
    prev = counts[i];
  }
  MultiScaleRepr repr;
  repr.input = points;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const PointSet& parent = repr.points(i);
    ScaleLevel lvl;
    lvl.seed_index = fps(parent, counts[i]);
    lvl.seeds = gather(parent, lvl.seed_index);
    lvl.neighbors = knn(lvl.seeds, parent, ks[i]);
    repr.levels.push_back(std::move(lvl));
  }
  return repr;
}

std::size_t MaskAssignment::visible_count(std::size_t i) const {
  const auto& v = at(i);
  return static_cast<std::size_t>(std::count(v.begin(), v.end(), true));
}

std::vector<std::uint32_t> MaskAssignment::visible_indices(std::size_t i) const {
  std::vector<std::uint32_t> out;
  const auto& v = at(i);
  for (std::size_t j = 0; j < v.size(); ++j)
    if (v[j]) out.push_back(static_cast<std::uint32_t>(j));
  return out;
}

std::vector<std::uint32_t> MaskAssignment::masked_indices(std::size_t i) const {
  std::vector<std::uint32_t> out;
  const auto& v = at(i);
  for (std::size_t j = 0; j < v.size(); ++j)
    if (!v[j]) out.push_back(static_cast<std::uint32_t>(j));
  return out;
}

std::size_t masked_count_for(std::size_t n, double ratio) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
}

std::vector<bool> sample_scale_mask(std::size_t n, double ratio, Rng& rng) {
  if (!(ratio >= 0.0 && ratio < 1.0))
    throw ConfigError("mask ratio must lie in [0, 1), got " + std::to_string(ratio));
  const std::size_t masked = masked_count_for(n, ratio);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<bool> visible(n, true);
  for (std::size_t i = 0; i < masked; ++i) {
    const std::size_t j = i + rng.below(n - i);
    std::swap(order[i], order[j]);
    visible[order[i]] = false;
  }
  return visible;
}

MaskAssignment back_project(const MultiScaleRepr& repr, std::vector<bool> scale_s_visible) {
  const std::size_t s = repr.num_scales();
  if (s == 0) throw ContractError("back_project: empty representation");
  if (scale_s_visible.size() != repr.level(s).seeds.size())
    throw ContractError("back_project: mask length " + std::to_string(scale_s_visible.size()) +
                        " does not match N_S = " + std::to_string(repr.level(s).seeds.size()));
  if (std::find(scale_s_visible.begin(), scale_s_visible.end(), true) == scale_s_visible.end())
    throw ContractError("back_project: no visible point at the coarsest scale");
  MaskAssignment mask;
  mask.visible.resize(s);
  // Nothing masked: the unmasked cloud, every point of every scale visible.
  if (std::find(scale_s_visible.begin(), scale_s_visible.end(), false) == scale_s_visible.end()) {
    for (std::size_t i = 1; i <= s; ++i) mask.visible[i - 1].assign(repr.level(i).seeds.size(), true);
    return mask;
  }
  mask.visible[s - 1] = std::move(scale_s_visible);
  for (std::size_t i = s - 1; i >= 1; --i) {
    std::vector<bool> vis(repr.level(i).seeds.size(), false);
    const ScaleLevel& coarse = repr.level(i + 1);
    const auto& coarse_vis = mask.visible[i];
    for (std::size_t j = 0; j < coarse.seeds.size(); ++j) {
      if (!coarse_vis[j]) continue;
      for (std::uint32_t nb : coarse.neighbors.row(j)) vis[nb] = true;
    }
    mask.visible[i - 1] = std::move(vis);
  }
  return mask;
}

MaskAssignment independent_masks(const MultiScaleRepr& repr, double ratio, Rng& rng) {
  MaskAssignment mask;
  for (std::size_t i = 1; i <= repr.num_scales(); ++i)
    mask.visible.push_back(sample_scale_mask(repr.level(i).seeds.size(), ratio, rng));
  return mask;
}

MaskAssignment make_mask(const MultiScaleRepr& repr, double ratio, Rng& rng, bool multi_scale) {
  if (!multi_scale) return independent_masks(repr, ratio, rng);
  return back_project(repr, sample_scale_mask(repr.level(repr.num_scales()).seeds.size(), ratio, rng));
}

bool satisfies_closure(const MultiScaleRepr& repr, const MaskAssignment& mask) {
  for (std::size_t i = 1; i < repr.num_scales(); ++i) {
    const ScaleLevel& coarse = repr.level(i + 1);
    for (std::size_t j = 0; j < coarse.seeds.size(); ++j) {
      if (!mask.at(i + 1)[j]) continue;
      for (std::uint32_t nb : coarse.neighbors.row(j))
        if (!mask.at(i)[nb]) return false;
    }
  }
  return true;
}

bool satisfies_minimality(const MultiScaleRepr& repr, const MaskAssignment& mask) {
  for (std::size_t i = 1; i < repr.num_scales(); ++i) {
    std::vector<bool> covered(mask.at(i).size(), false);
    const ScaleLevel& coarse = repr.level(i + 1);
    for (std::size_t j = 0; j < coarse.seeds.size(); ++j)
      if (mask.at(i + 1)[j])
        for (std::uint32_t nb : coarse.neighbors.row(j)) covered[nb] = true;
    for (std::size_t p = 0; p < covered.size(); ++p)
      if (mask.at(i)[p] && !covered[p]) return false;
  }
  return true;
}

}  // namespace pcmae
