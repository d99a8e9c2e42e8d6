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

// Point-cloud files, normalization and the synthetic shape dataset.
//
// XYZ: ASCII, one "x y z" line per point, '#' starts a comment.
// PCB: "PCB1", u32 LE point count, then count*3 f32 LE.
// labels.tsv: "id<TAB>label" per line.
// Dataset directories: <root>/<class>/<id>.pcb, optional <root>/labels.tsv.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pcmae/config.hpp"
#include "pcmae/geometry.hpp"
#include "pcmae/rng.hpp"

namespace pcmae {

struct DatasetRecord {
  PointSet points;
  int label = 0;
  std::string id;
};

enum class ShapeKind { sphere, cube, cylinder, torus, plane };

inline constexpr std::size_t kNumShapeKinds = 5;

std::string shape_kind_name(ShapeKind kind);
/// Accepts "sphere", "cube-surface" (or "cube"), "cylinder", "torus", "plane".
ShapeKind parse_shape_kind(const std::string& name);
std::vector<std::string> all_shape_kind_names();

/// Surface parameterizations (all centered at the origin):
///   sphere    radius = size
///   cube      surface of [-size, size]^3
///   cylinder  radius = size, height = 2 * size * aspect, lateral + caps
///   torus     major radius = size, minor radius = size * aspect / 2
///   plane     square [-size, size]^2 at z = 0
/// aspect <= 0 draws it from the shape's own stream: U[1.5, 2.5] for
/// cylinders, U[0.6, 1.0] otherwise.
struct SyntheticShapeSpec {
  ShapeKind kind = ShapeKind::sphere;
  double size = 1.0;
  double aspect = 0.0;
  double noise = 0.0;  // Gaussian stddev per coordinate
  std::size_t count = 2048;
  std::uint64_t seed = 0;
};

/// Label = kind index; id = "<kind>-<seed>".
DatasetRecord gen_synthetic(const SyntheticShapeSpec& spec);

/// Subtracts the centroid and divides by the largest norm (1 if zero).
PointSet normalize_unit_sphere(const PointSet& points);

/// Exactly n points: FPS when the cloud is longer, the original points plus
/// random duplicates when shorter.
PointSet resample(const PointSet& points, std::size_t n, Rng& rng);

/// Random rotation (uniform on SO(3)).
PointSet random_rotation(const PointSet& points, Rng& rng);

// File formats. Loaders throw ParseError (line number for text, byte offset
// for binary) on malformed content, including NaN/Inf coordinates.
void save_xyz(const std::filesystem::path& path, const PointSet& points);
PointSet load_xyz(const std::filesystem::path& path);
PointSet parse_xyz(const std::string& text);
void save_pcb(const std::filesystem::path& path, const PointSet& points);
PointSet load_pcb(const std::filesystem::path& path);
PointSet parse_pcb(const std::string& bytes);
std::string encode_pcb(const PointSet& points);
void save_labels(const std::filesystem::path& path, const std::vector<std::pair<std::string, int>>& labels);
std::map<std::string, int> load_labels(const std::filesystem::path& path);

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or a dataset directory
  std::vector<std::string> kinds = all_shape_kind_names();
  std::size_t per_class = 64;
  std::size_t points = 1024;
  double noise = 0.01;
  bool rotate = false;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
  std::uint64_t seed = 0;

  void validate() const;
  void to_ini(IniDocument& doc) const;
  static DataConfig from_ini(const IniDocument& doc, const DataConfig& defaults);
};

struct Dataset {
  std::vector<std::string> class_names;
  std::vector<DatasetRecord> train;
  std::vector<DatasetRecord> val;

  std::size_t num_classes() const noexcept { return class_names.size(); }
};

/// Deterministic split: train iff hash(id, split_seed) maps below the train
/// fraction.
bool in_train_split(const std::string& id, std::uint64_t split_seed, double train_fraction);

/// Synthetic: `per_class` shapes per kind (label = position in `kinds`).
/// Directory: every <class>/*.pcb, labels from labels.tsv when present,
/// otherwise from the sorted class directory names. Every cloud is resampled
/// to `points` and normalized to the unit sphere. Records are ordered by id.
Dataset make_dataset(const DataConfig& config);

/// Writes records under `root` in the directory layout plus labels.tsv.
void write_dataset_dir(const std::filesystem::path& root, const std::vector<std::string>& class_names,
                       const std::vector<DatasetRecord>& records);

}  // namespace pcmae
