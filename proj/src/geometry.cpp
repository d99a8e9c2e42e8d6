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

#include "pcmae/geometry.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace pcmae {

double squared_distance(const Vec3& a, const Vec3& b) {
  const double dx = static_cast<double>(a[0]) - b[0];
  const double dy = static_cast<double>(a[1]) - b[1];
  const double dz = static_cast<double>(a[2]) - b[2];
  return dx * dx + dy * dy + dz * dz;
}

PointSet gather(const PointSet& points, std::span<const std::uint32_t> index) {
  PointSet out;
  out.coords.reserve(index.size());
  for (std::uint32_t i : index) out.coords.push_back(points.coords.at(i));
  return out;
}

namespace {

// Candidate i beats j: larger key, then smaller coordinates, then smaller index.
bool beats_far(const PointSet& p, const std::vector<double>& key, std::size_t i, std::size_t j) {
  if (key[i] != key[j]) return key[i] > key[j];
  if (p[i] != p[j]) return p[i] < p[j];
  return i < j;
}

// Centroid from sorted per-axis sums so the result is independent of point order.
Vec3 order_free_centroid(const PointSet& points) {
  std::array<double, 3> c{};
  std::vector<float> axis(points.size());
  for (int d = 0; d < 3; ++d) {
    for (std::size_t i = 0; i < points.size(); ++i) axis[i] = points[i][d];
    std::sort(axis.begin(), axis.end());
    double s = 0;
    for (float v : axis) s += v;
    c[d] = s / static_cast<double>(points.size());
  }
  return {static_cast<float>(c[0]), static_cast<float>(c[1]), static_cast<float>(c[2])};
}

}  // namespace

std::vector<std::uint32_t> fps(const PointSet& points, std::size_t m) {
  const std::size_t n = points.size();
  if (m < 1 || m > n)
    throw ContractError("fps: cannot select " + std::to_string(m) + " of " + std::to_string(n) +
                        " points");
  const Vec3 centroid = order_free_centroid(points);
  std::vector<double> key(n);
  for (std::size_t i = 0; i < n; ++i) key[i] = squared_distance(points[i], centroid);
  std::size_t first = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (beats_far(points, key, i, first)) first = i;

  std::vector<std::uint32_t> out{static_cast<std::uint32_t>(first)};
  out.reserve(m);
  std::vector<char> taken(n, 0);
  taken[first] = 1;
  for (std::size_t i = 0; i < n; ++i) key[i] = squared_distance(points[i], points[first]);
  while (out.size() < m) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      if (best == n || beats_far(points, key, i, best)) best = i;
    }
    taken[best] = 1;
    out.push_back(static_cast<std::uint32_t>(best));
    for (std::size_t i = 0; i < n; ++i)
      key[i] = std::min(key[i], squared_distance(points[i], points[best]));
  }
  return out;
}

NeighborIndex knn(const PointSet& queries, const PointSet& sources, std::size_t k) {
  const std::size_t n = sources.size();
  if (k < 1 || k > n)
    throw ContractError("knn: k = " + std::to_string(k) + " with " + std::to_string(n) +
                        " source points");
  NeighborIndex out{queries.size(), k, std::vector<std::uint32_t>(queries.size() * k)};
  std::vector<double> d(n);
  std::vector<std::uint32_t> order(n);
  for (std::size_t q = 0; q < queries.size(); ++q) {
    for (std::size_t i = 0; i < n; ++i) d[i] = squared_distance(queries[q], sources[i]);
    std::iota(order.begin(), order.end(), 0u);
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::uint32_t a, std::uint32_t b) {
                        if (d[a] != d[b]) return d[a] < d[b];
                        if (sources[a] != sources[b]) return sources[a] < sources[b];
                        return a < b;
                      });
    std::copy_n(order.begin(), k, out.indices.begin() + static_cast<std::ptrdiff_t>(q * k));
  }
  return out;
}

AdjacencyMask ball_adjacency(const PointSet& points, double radius) {
  if (!(radius > 0)) throw ContractError("ball_adjacency: radius must be positive");
  const std::size_t n = points.size();
  const double r2 = radius * radius;
  AdjacencyMask mask{n, std::vector<std::uint8_t>(n * n, 0)};
  for (std::size_t a = 0; a < n; ++a) {
    mask.allow[a * n + a] = 1;
    for (std::size_t b = a + 1; b < n; ++b) {
      const std::uint8_t near = squared_distance(points[a], points[b]) <= r2 ? 1 : 0;
      mask.allow[a * n + b] = near;
      mask.allow[b * n + a] = near;
    }
  }
  return mask;
}

InterpolationWeights interpolation_weights(const PointSet& targets, const PointSet& sources,
                                           std::size_t k) {
  InterpolationWeights out{knn(targets, sources, k), std::vector<double>(targets.size() * k)};
  for (std::size_t t = 0; t < targets.size(); ++t) {
    double* w = out.weights.data() + t * k;
    // Coincident sources take the whole weight; otherwise eps would still
    // leak a little to the other neighbors.
    std::size_t hits = 0;
    for (std::size_t j = 0; j < k; ++j)
      hits += squared_distance(targets[t], sources[out.neighbors.at(t, j)]) == 0.0;
    if (hits > 0) {
      for (std::size_t j = 0; j < k; ++j)
        w[j] = squared_distance(targets[t], sources[out.neighbors.at(t, j)]) == 0.0 ? 1.0 / double(hits) : 0.0;
      continue;
    }
    double total = 0;
    for (std::size_t j = 0; j < k; ++j) {
      w[j] = 1.0 / (squared_distance(targets[t], sources[out.neighbors.at(t, j)]) + kInterpolationEps);
      total += w[j];
    }
    for (std::size_t j = 0; j < k; ++j) w[j] /= total;
  }
  return out;
}

template <typename T>
Tensor<T> interpolate(const PointSet& targets, const PointSet& sources, const Tensor<T>& feats,
                      std::size_t k) {
  if (feats.rank() != 2 || feats.rows() != sources.size())
    throw DimensionError("interpolate: features " + shape_str(feats.shape()) + " for " +
                         std::to_string(sources.size()) + " sources");
  const InterpolationWeights iw = interpolation_weights(targets, sources, k);
  std::vector<std::size_t> index(iw.neighbors.indices.begin(), iw.neighbors.indices.end());
  return weighted_gather<T>(feats, index, iw.weights, k);
}

namespace {

// Mean of nearest squared distances from x into y. Minima are summed in
// ascending order so the value is independent of point order.
double directed_chamfer(const PointSet& x, const PointSet& y) {
  std::vector<double> minima(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double best = squared_distance(x[i], y[0]);
    for (const Vec3& q : y) best = std::min(best, squared_distance(x[i], q));
    minima[i] = best;
  }
  std::sort(minima.begin(), minima.end());
  double s = 0;
  for (double v : minima) s += v;
  return s / static_cast<double>(x.size());
}

}  // namespace

double chamfer_l2(const PointSet& a, const PointSet& b) {
  if (a.empty() || b.empty()) throw ContractError("chamfer_l2: empty point set");
  return directed_chamfer(a, b) + directed_chamfer(b, a);
}

template <typename T>
Tensor<T> grouped_chamfer_l2(const Tensor<T>& pred, std::size_t group_size,
                             const std::vector<PointSet>& targets) {
  if (pred.rank() != 2 || pred.cols() != 3)
    throw DimensionError("chamfer_l2: predictions must be n x 3, got " + shape_str(pred.shape()));
  const std::size_t groups = targets.size();
  if (groups == 0 || group_size == 0) throw ContractError("chamfer_l2: empty point set");
  if (pred.rows() != groups * group_size)
    throw DimensionError("chamfer_l2: " + std::to_string(pred.rows()) + " predicted rows for " +
                         std::to_string(groups) + " groups of " + std::to_string(group_size));
  for (const auto& t : targets)
    if (t.empty()) throw ContractError("chamfer_l2: empty point set");

  const bool rec = detail::should_record({&pred});
  Tensor<T> out = make_result<T>({1}, rec);
  auto p = pred.data();
  auto dist = [&](std::size_t row, const Vec3& q) {
    T s = 0;
    for (int d = 0; d < 3; ++d) {
      const T diff = p[row * 3 + d] - static_cast<T>(q[d]);
      s += diff * diff;
    }
    return s;
  };
  // Matched pairs (pred row, target point) with their weight in the loss.
  struct Match {
    std::size_t row;
    Vec3 target;
    T weight;
  };
  std::vector<Match> matches;
  matches.reserve(groups * group_size * 2);
  T total = 0;
  const T inv_groups = T(1) / static_cast<T>(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    const PointSet& tgt = targets[g];
    const std::size_t base = g * group_size;
    const T wa = inv_groups / static_cast<T>(group_size);
    const T wb = inv_groups / static_cast<T>(tgt.size());
    for (std::size_t i = 0; i < group_size; ++i) {
      std::size_t best = 0;
      T bd = dist(base + i, tgt[0]);
      for (std::size_t j = 1; j < tgt.size(); ++j) {
        const T dj = dist(base + i, tgt[j]);
        if (dj < bd) {
          bd = dj;
          best = j;
        }
      }
      total += wa * bd;
      matches.push_back({base + i, tgt[best], wa});
    }
    for (std::size_t j = 0; j < tgt.size(); ++j) {
      std::size_t best = 0;
      T bd = dist(base, tgt[j]);
      for (std::size_t i = 1; i < group_size; ++i) {
        const T di = dist(base + i, tgt[j]);
        if (di < bd) {
          bd = di;
          best = i;
        }
      }
      total += wb * bd;
      matches.push_back({base + best, tgt[j], wb});
    }
  }
  out.data()[0] = total;
  if (rec) {
    detail::record(out, [pred, out, matches = std::move(matches)]() mutable {
      const T g = out.grad()[0];
      auto p = pred.data();
      auto gp = pred.mutable_grad();
      for (const Match& m : matches)
        for (int d = 0; d < 3; ++d)
          gp[m.row * 3 + d] += g * m.weight * T(2) * (p[m.row * 3 + d] - static_cast<T>(m.target[d]));
    });
  }
  return out;
}

template <typename T>
Tensor<T> chamfer_l2(const Tensor<T>& pred, const PointSet& target) {
  return grouped_chamfer_l2(pred, pred.rank() == 2 ? pred.rows() : 0, std::vector<PointSet>{target});
}

template Tensor<float> interpolate(const PointSet&, const PointSet&, const Tensor<float>&, std::size_t);
template Tensor<double> interpolate(const PointSet&, const PointSet&, const Tensor<double>&, std::size_t);
template Tensor<float> chamfer_l2(const Tensor<float>&, const PointSet&);
template Tensor<double> chamfer_l2(const Tensor<double>&, const PointSet&);
template Tensor<float> grouped_chamfer_l2(const Tensor<float>&, std::size_t, const std::vector<PointSet>&);
template Tensor<double> grouped_chamfer_l2(const Tensor<double>&, std::size_t, const std::vector<PointSet>&);

}  // namespace pcmae
