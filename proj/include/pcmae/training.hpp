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

// Pretraining loop: warmup + cosine schedule, AdamW, augmentation and
// step-keyed randomness so a resumed run continues bit-for-bit.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pcmae/checkpoint.hpp"
#include "pcmae/config.hpp"
#include "pcmae/data.hpp"
#include "pcmae/model.hpp"

namespace pcmae {

struct Schedule {
  double base_lr = 1e-4;
  double min_lr = 1e-6;
  std::size_t warmup_epochs = 10;
  std::size_t total_epochs = 300;
  std::size_t steps_per_epoch = 1;

  std::size_t warmup_steps() const noexcept { return warmup_epochs * steps_per_epoch; }
  std::size_t total_steps() const noexcept { return total_epochs * steps_per_epoch; }
  void validate() const;
};

/// Linear ramp 0 -> base over the warmup steps, then cosine base -> min_lr
/// over the remaining steps. Steps past the end return min_lr.
double lr_at(std::size_t step, const Schedule& sched);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

template <typename T>
struct OptimizerState {
  AdamWConfig hyper;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;  // one per parameter, in store order
  std::vector<std::vector<T>> v;

  static OptimizerState for_params(const ParamStore<T>& params, AdamWConfig hyper);
};

/// One decoupled-weight-decay Adam update. `grads[i]` belongs to
/// params.entries()[i]; decay is skipped for entries flagged decay=false.
template <typename T>
void adamw_step(ParamStore<T>& params, const std::vector<std::vector<T>>& grads, OptimizerState<T>& state,
                double lr);

struct AugmentConfig {
  double scale_lo = 0.8;
  double scale_hi = 1.25;
  double shift = 0.1;  // translation drawn from U[-shift, shift]^3
};

/// Uniform scale (shared by all axes), then uniform translation.
PointSet augment(const PointSet& points, Rng& rng, const AugmentConfig& cfg = {});

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 300;
  std::size_t warmup_epochs = 10;
  double base_lr = 1e-4;
  double min_lr = 1e-6;
  AdamWConfig adamw;
  double clip_norm = 0.0;  // 0 disables clipping
  bool augment = true;
  AugmentConfig aug;
  std::size_t checkpoint_every = 0;  // in steps; 0 = only at the end
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool test_mode = false;  // wall_ms reported as 0

  void validate() const;
  void to_ini(IniDocument& doc) const;
  static TrainConfig from_ini(const IniDocument& doc, const TrainConfig& defaults);
  Schedule schedule(std::size_t steps_per_epoch) const;
};

struct MetricRecord {
  std::uint64_t step = 0;  // optimizer steps completed
  std::uint64_t epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;

  std::string to_json() const;
};

struct TrainState {
  PointMAE<float> model;
  OptimizerState<float> opt;
  std::uint64_t step = 0;

  TrainState(PointMAE<float> m, const AdamWConfig& hyper);

  Checkpoint to_checkpoint(std::uint64_t seed, std::size_t steps_per_epoch) const;
  static TrainState from_checkpoint(const Checkpoint& ckpt, const AdamWConfig& hyper);
};

using MetricSink = std::function<void(const MetricRecord&)>;
using CheckpointSink = std::function<void(const TrainState&)>;

/// Optimizer steps per epoch under drop-last batching.
std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size);

/// Runs from state.step until the schedule ends or `stop_step` is reached.
/// `data` must already be in a canonical order (make_dataset sorts by id).
/// Throws NumericError naming the step when the loss is not finite.
void train(TrainState& state, const std::vector<DatasetRecord>& data, const TrainConfig& cfg,
           const MetricSink& on_metric = {}, const CheckpointSink& on_checkpoint = {},
           std::uint64_t stop_step = UINT64_MAX);

/// Pretraining loss of one sample with its gradient accumulated into the
/// model's parameters (used by train and by tests).
float sample_loss_and_grad(PointMAE<float>& model, const PointSet& points, Rng& rng);

}  // namespace pcmae
