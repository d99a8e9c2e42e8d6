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

// Hierarchical masked autoencoder for point clouds.
//
// Encoder: mini-PointNet token embedding at scale 1, then per stage i a
// stack of pre-norm transformer blocks whose attention is restricted to
// tokens within radius r_i, followed by token merging (k_i-NN gather, MLP,
// max-pool) into the next scale. Only visible tokens enter the encoder.
//
// Decoder: S-1 stages from scale S down to scale 2. Stage 1 sees the
// visible scale-S tokens plus a shared mask token at every masked scale-S
// position. Between stages all tokens are propagated to the finer scale by
// inverse-distance interpolation (k = 3) and a linear projection, then the
// visible ones are fused with the encoder tokens of that scale (skip
// connection). Attention in the decoder is global.
//
// Reconstruction: a linear head maps each masked scale-2 token to k_2
// offsets relative to its seed; the loss is the mean per-token Chamfer
// distance to the seed's k_2 scale-1 neighbors (also seed relative).

#include <cstddef>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pcmae/config.hpp"
#include "pcmae/geometry.hpp"
#include "pcmae/masking.hpp"
#include "pcmae/rng.hpp"
#include "pcmae/tensor.hpp"

namespace pcmae {

struct ModelConfig {
  std::vector<std::size_t> counts{512, 256, 64};
  std::vector<std::size_t> dims{96, 192, 384};
  std::vector<double> radii{0.32, 0.64, 1.28};
  std::vector<std::size_t> ks{16, 8, 8};
  std::size_t encoder_blocks = 5;  // per stage
  std::size_t decoder_blocks = 1;  // per stage
  std::size_t heads = 6;
  std::size_t mlp_ratio = 4;  // FFN hidden width = mlp_ratio * C
  std::size_t interp_k = 3;
  double mask_ratio = 0.8;
  bool hierarchical_encoder = true;
  bool hierarchical_decoder = true;
  bool skip_connections = true;
  bool local_attention = true;
  bool multi_scale_mask = true;

  std::size_t stages() const noexcept { return counts.size(); }

  /// Settings used for ShapeNet-scale pretraining (3 stages, 5 blocks).
  static ModelConfig paper();
  /// Desk-scale profile: counts {64, 32, 8}, dims {32, 64, 128}, 1 block
  /// per stage, 4 heads.
  static ModelConfig small();

  /// Throws ConfigError on any violated invariant.
  void validate() const;

  void to_ini(IniDocument& doc) const;
  static ModelConfig from_ini(const IniDocument& doc, const ModelConfig& defaults);
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Named parameter arrays in registration order.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    bool decay = true;  // false for norm parameters and the mask token
  };

  Tensor<T> add(const std::string& name, Shape shape, bool decay = true);
  /// Registers an existing tensor handle (shares storage with the caller).
  void adopt(const std::string& name, Tensor<T> value, bool decay);
  const Tensor<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Entry>& entries() noexcept { return entries_; }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t scalar_count() const;

  /// Deep copy of every value; gradient state is not copied.
  ParamStore clone() const;
  void set_requires_grad(bool on);
  void zero_grad();

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Tokens at one scale. `index` gives each token's position within the
/// scale's points; rows of `feats` follow the same order.
template <typename T>
struct TokenSet {
  PointSet coords;
  std::vector<std::uint32_t> index;
  std::vector<bool> visible;
  Tensor<T> feats;

  std::size_t size() const noexcept { return index.size(); }
};

template <typename T>
struct Encoded {
  MultiScaleRepr repr;
  MaskAssignment mask;
  std::vector<TokenSet<T>> tokens;  // tokens[i - 1] holds the visible scale-i tokens
};

template <typename T>
struct Reconstruction {
  Tensor<T> predictions;         // [N_2^m * k_2 x 3], seed-relative offsets
  std::vector<PointSet> targets;  // per masked scale-2 token, seed-relative
  Tensor<T> loss;
};

/// Attention probabilities per head ([n x n] each) recorded by a block.
template <typename T>
struct AttentionTrace {
  std::vector<Tensor<T>> probs;
};

template <typename T>
class PointMAE {
 public:
  explicit PointMAE(ModelConfig config, std::uint64_t init_seed = 0);
  PointMAE(ModelConfig config, ParamStore<T> params);

  const ModelConfig& config() const noexcept { return config_; }
  ParamStore<T>& params() noexcept { return params_; }
  const ParamStore<T>& params() const noexcept { return params_; }

  /// Independent copy of the parameters (for per-sample gradient buffers).
  PointMAE clone() const { return PointMAE(config_, params_.clone()); }

  TokenSet<T> embed_tokens(const MultiScaleRepr& repr, const MaskAssignment& mask) const;

  /// Visible scale-`scale` tokens from the visible tokens of scale-1.
  TokenSet<T> merge_tokens(const TokenSet<T>& prev, const MultiScaleRepr& repr,
                           const MaskAssignment& mask, std::size_t scale) const;

  /// One pre-norm block of encoder stage `stage` (1-based). radius <= 0
  /// disables the locality restriction.
  TokenSet<T> encoder_block(const TokenSet<T>& tokens, std::size_t stage, std::size_t block,
                            double radius, AttentionTrace<T>* trace = nullptr) const;

  /// Same block with an explicit attention mask (nullptr = unrestricted).
  Tensor<T> block_forward(const Tensor<T>& x, const std::string& prefix,
                          const AdjacencyMask* allow, AttentionTrace<T>* trace = nullptr) const;

  Encoded<T> encode(const PointSet& points, Rng& rng) const;
  Encoded<T> encode(const PointSet& points, double mask_ratio, Rng& rng) const;
  Encoded<T> encode_with(MultiScaleRepr repr, MaskAssignment mask) const;

  /// Final decoder tokens at scale 2 (all N_2 positions, in scale order).
  TokenSet<T> decode(const Encoded<T>& encoded) const;

  Reconstruction<T> reconstruct(const TokenSet<T>& final_tokens, const Encoded<T>& encoded) const;

  Tensor<T> forward_pretrain(const PointSet& points, Rng& rng) const;

  /// max-pool + mean-pool of the unmasked scale-S tokens, shape [C_S].
  Tensor<T> extract_global_feature(const PointSet& points) const;

  std::size_t global_feature_dim() const { return config_.dims.back(); }

 private:
  void register_params(std::uint64_t init_seed);
  const Tensor<T>& p(const std::string& name) const { return params_.get(name); }
  Tensor<T> lin(const Tensor<T>& x, const std::string& prefix) const;
  Tensor<T> mlp2(const Tensor<T>& x, const std::string& prefix) const;
  Tensor<T> positional(const PointSet& coords, const std::string& prefix) const;
  Tensor<T> run_stage_blocks(Tensor<T> x, const PointSet& coords, const std::string& prefix,
                             std::size_t blocks, const AdjacencyMask* allow) const;
  std::size_t encoder_stage_blocks(std::size_t stage) const;
  std::size_t encoder_stage_dim(std::size_t stage) const;

  ModelConfig config_;
  ParamStore<T> params_;
};

/// Closed-form count of scalar parameters for a configuration.
std::size_t parameter_count(const ModelConfig& config);

Tensor<double> points_tensor(const PointSet& points);

}  // namespace pcmae
