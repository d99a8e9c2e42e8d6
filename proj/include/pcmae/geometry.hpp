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

// Deterministic point-set kernels. Everything is brute force O(N*M) with
// distances accumulated in double precision.
//
// Tie-breaking is coordinate based so that results do not depend on input
// point order: among candidates with equal distance the one with the
// lexicographically smallest (x, y, z) wins, then the smallest index.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pcmae/tensor.hpp"

namespace pcmae {

using Vec3 = std::array<float, 3>;

struct PointSet {
  std::vector<Vec3> coords;

  PointSet() = default;
  explicit PointSet(std::vector<Vec3> c) : coords(std::move(c)) {}

  std::size_t size() const noexcept { return coords.size(); }
  bool empty() const noexcept { return coords.empty(); }
  const Vec3& operator[](std::size_t i) const { return coords[i]; }
  Vec3& operator[](std::size_t i) { return coords[i]; }
  auto begin() const { return coords.begin(); }
  auto end() const { return coords.end(); }

  friend bool operator==(const PointSet&, const PointSet&) = default;
};

/// Row j lists the k source indices nearest to query j, nearest first.
struct NeighborIndex {
  std::size_t rows = 0;
  std::size_t k = 0;
  std::vector<std::uint32_t> indices;

  std::span<const std::uint32_t> row(std::size_t j) const { return {indices.data() + j * k, k}; }
  std::uint32_t at(std::size_t j, std::size_t q) const { return indices[j * k + q]; }
};

/// Dense n x n boolean attention mask, row-major, 1 = allowed.
struct AdjacencyMask {
  std::size_t n = 0;
  std::vector<std::uint8_t> allow;

  bool at(std::size_t a, std::size_t b) const { return allow[a * n + b] != 0; }
};

double squared_distance(const Vec3& a, const Vec3& b);

PointSet gather(const PointSet& points, std::span<const std::uint32_t> index);

/// Furthest point sampling. Starts from the point farthest from the
/// centroid; each further pick maximizes the distance to the selected set.
/// Returns indices in selection order. Requires 1 <= m <= N.
std::vector<std::uint32_t> fps(const PointSet& points, std::size_t m);

/// Exact k nearest sources per query. Requires 1 <= k <= sources.size().
NeighborIndex knn(const PointSet& queries, const PointSet& sources, std::size_t k);

/// mask[a][b] = |p_a - p_b| <= radius; the diagonal is always set.
AdjacencyMask ball_adjacency(const PointSet& points, double radius);

/// Inverse squared-distance weights over the k nearest sources of each
/// target: w_j = (1 / (d_j^2 + eps)) / sum_i (1 / (d_i^2 + eps)). A target
/// that coincides with one or more of its neighbors copies them instead
/// (equal shares, others 0).
struct InterpolationWeights {
  NeighborIndex neighbors;
  std::vector<double> weights;  // rows x k, each row sums to 1
};

inline constexpr double kInterpolationEps = 1e-8;

InterpolationWeights interpolation_weights(const PointSet& targets, const PointSet& sources,
                                           std::size_t k);

/// Feature propagation from sources to targets; differentiable in `feats`.
template <typename T>
Tensor<T> interpolate(const PointSet& targets, const PointSet& sources, const Tensor<T>& feats,
                      std::size_t k);

/// Symmetric squared-distance Chamfer:
///   mean_a min_b |a - b|^2 + mean_b min_a |a - b|^2
double chamfer_l2(const PointSet& a, const PointSet& b);

/// Same quantity with `pred` [n x 3] on the tape. Gradients flow to the
/// matched predicted points.
template <typename T>
Tensor<T> chamfer_l2(const Tensor<T>& pred, const PointSet& target);

/// Mean over groups of chamfer_l2(pred rows of group g, targets[g]); `pred`
/// holds targets.size() consecutive groups of `group_size` rows.
template <typename T>
Tensor<T> grouped_chamfer_l2(const Tensor<T>& pred, std::size_t group_size,
                             const std::vector<PointSet>& targets);

}  // namespace pcmae
