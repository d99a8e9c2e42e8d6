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

// Checkpoint container (little-endian):
//   "PM2A"  u16 version
//   u32 len + model config text (INI)
//   u32 len + metadata text (key=value lines)
//   u32 record count, then per record:
//     u32 name len, name, u32 rank, rank x u32 extents, f32 data
// Model parameters use their own names; optimizer moments are stored as
// "adamw.m.<name>" / "adamw.v.<name>"; a classification head as "cls.*".

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pcmae/model.hpp"
#include "pcmae/tensor.hpp"

namespace pcmae {

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  ModelConfig config;
  std::map<std::string, std::string> meta;
  std::vector<CheckpointRecord> records;

  const CheckpointRecord* find(const std::string& name) const;
  void put(std::string name, Shape shape, std::vector<float> data);
};

std::string encode_checkpoint(const Checkpoint& ckpt);
/// Throws ParseError ("bad magic", truncation, bad version) with a byte offset.
Checkpoint decode_checkpoint(const std::string& bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Appends every model parameter as a record.
template <typename T>
void put_params(Checkpoint& ckpt, const ParamStore<T>& params, const std::string& prefix = "");

/// Rebuilds a model from the config and parameter records; extra records
/// are ignored. Missing or mis-shaped parameters throw ConfigError.
PointMAE<float> model_from_checkpoint(const Checkpoint& ckpt);

/// Copies records named prefix + entry name into `params` (shapes must match).
template <typename T>
void get_params(const Checkpoint& ckpt, ParamStore<T>& params, const std::string& prefix = "");

}  // namespace pcmae
