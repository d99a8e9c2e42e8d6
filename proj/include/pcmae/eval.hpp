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

// Evaluation protocols on frozen or fine-tuned encoders: linear probe
// (multinomial logistic regression), few-shot episodes and a fine-tuned
// MLP classification head.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "pcmae/checkpoint.hpp"
#include "pcmae/data.hpp"
#include "pcmae/model.hpp"
#include "pcmae/training.hpp"

namespace pcmae {

struct FeatureSet {
  std::vector<std::vector<double>> x;
  std::vector<int> y;

  std::size_t size() const noexcept { return x.size(); }
};

/// Global features of every record (no masking), computed in parallel;
/// the result does not depend on the thread count.
FeatureSet extract_features(const PointMAE<float>& model, const std::vector<DatasetRecord>& records,
                            std::size_t threads = 1);

// Full-batch gradient descent, run until the largest gradient entry drops
// below tolerance or the iteration cap is hit.
struct ProbeConfig {
  std::size_t iterations = 5000;
  double lr = 0.1;
  double weight_decay = 1e-4;
  double tolerance = 1e-5;
};

struct ProbeResult {
  double accuracy = 0.0;
  std::vector<double> per_class;  // NaN-free: classes absent from the test set report 0
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t num_train = 0;
  std::size_t num_test = 0;

  std::string to_json(const std::string& config_digest) const;
};

ProbeResult score(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t num_classes,
                  std::size_t num_train);

/// Standardizes with training statistics, then fits softmax regression by
/// full-batch gradient descent from zero. Throws ConfigError when the
/// training labels cover a single class or there are fewer samples than
/// classes.
ProbeResult linear_probe(const FeatureSet& train, const FeatureSet& test, std::size_t num_classes,
                         const ProbeConfig& cfg = {});

struct FewShotEpisode {
  std::vector<int> classes;           // original labels, episode label = position
  std::vector<std::size_t> train_ids;  // indices into the pool
  std::vector<std::size_t> test_ids;
};

/// K classes among those with at least N + test_per_class samples, then N
/// training and test_per_class test samples per class without overlap.
FewShotEpisode sample_episode(const std::vector<int>& labels, std::size_t way, std::size_t shot,
                              std::size_t test_per_class, Rng& rng);

struct FewShotResult {
  std::size_t way = 0, shot = 0, runs = 0;
  double mean = 0.0;
  double stddev = 0.0;  // population standard deviation over runs
  std::vector<double> accuracies;

  std::string to_json(const std::string& config_digest) const;
};

FewShotResult few_shot_eval(const FeatureSet& pool, std::size_t way, std::size_t shot, std::size_t runs,
                            std::uint64_t seed, std::size_t test_per_class = 20, const ProbeConfig& cfg = {});

struct FinetuneConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 16;
  std::size_t warmup_epochs = 2;
  double base_lr = 5e-4;
  double min_lr = 1e-6;
  double weight_decay = 0.05;
  std::size_t hidden = 256;
  bool freeze_encoder = false;
  bool augment = true;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
  void to_ini(IniDocument& doc) const;
  static FinetuneConfig from_ini(const IniDocument& doc, const FinetuneConfig& defaults);
};

/// Three-layer MLP over the pooled global feature:
/// C_S -> hidden -> hidden -> classes, GELU between layers.
class Classifier {
 public:
  Classifier(PointMAE<float> encoder, std::size_t num_classes, std::size_t hidden, std::uint64_t seed);
  Classifier(PointMAE<float> encoder, ParamStore<float> head);

  PointMAE<float>& encoder() noexcept { return encoder_; }
  const PointMAE<float>& encoder() const noexcept { return encoder_; }
  ParamStore<float>& head() noexcept { return head_; }
  const ParamStore<float>& head() const noexcept { return head_; }
  std::size_t num_classes() const;

  Tensor<float> logits(const PointSet& points) const;  // [1 x classes]
  int predict(const PointSet& points) const;
  Classifier clone() const { return Classifier(encoder_.clone(), head_.clone()); }

  Checkpoint to_checkpoint() const;
  static Classifier from_checkpoint(const Checkpoint& ckpt);

 private:
  PointMAE<float> encoder_;
  ParamStore<float> head_;
};

struct FinetuneResult {
  ProbeResult result;
  std::vector<double> epoch_loss;
};

/// Trains encoder and head end to end (head only when frozen) on ds.train
/// and scores ds.val.
FinetuneResult finetune_classifier(Classifier& clf, const Dataset& ds, const FinetuneConfig& cfg);

std::string csv_header();
std::string csv_row(const std::string& experiment, const ProbeResult& r, const std::string& config_digest);

}  // namespace pcmae
