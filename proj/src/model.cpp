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

#include "pcmae/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <utility>

#include "pcmae/errors.hpp"

namespace pcmae {

namespace {

constexpr const char* kSection = "model";

std::string stage_name(const char* base, std::size_t i) { return std::string(base) + std::to_string(i); }

// Relative offsets of each row's neighbors: row-major [rows*k x 3].
template <typename T>
Tensor<T> relative_offsets(const PointSet& sources, const PointSet& centers,
                           const std::vector<std::uint32_t>& rows_nbr, std::size_t k) {
  std::vector<T> out(centers.size() * k * 3);
  for (std::size_t j = 0; j < centers.size(); ++j)
    for (std::size_t q = 0; q < k; ++q) {
      const Vec3& p = sources[rows_nbr[j * k + q]];
      for (int a = 0; a < 3; ++a)
        out[(j * k + q) * 3 + a] = static_cast<T>(p[a]) - static_cast<T>(centers[j][a]);
    }
  return Tensor<T>({centers.size() * k, 3}, std::move(out));
}

template <typename T>
Tensor<T> coords_tensor(const PointSet& pts) {
  std::vector<T> data(pts.size() * 3);
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int a = 0; a < 3; ++a) data[i * 3 + a] = static_cast<T>(pts[i][a]);
  return Tensor<T>({pts.size(), 3}, std::move(data));
}

std::vector<std::size_t> to_size(const std::vector<std::uint32_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

// ---------------------------------------------------------------- config

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::small() {
  ModelConfig c;
  c.counts = {64, 32, 8};
  c.dims = {32, 64, 128};
  c.radii = {0.32, 0.64, 1.28};
  c.ks = {16, 8, 8};
  c.encoder_blocks = 1;
  c.decoder_blocks = 1;
  c.heads = 4;
  return c;
}

void ModelConfig::validate() const {
  const std::size_t s = counts.size();
  if (s < 2) throw ConfigError("model: at least 2 stages required, got " + std::to_string(s));
  if (dims.size() != s || radii.size() != s || ks.size() != s)
    throw ConfigError("model: counts, dims, radii and ks must all have " + std::to_string(s) + " entries");
  for (std::size_t i = 0; i < s; ++i) {
    if (counts[i] == 0) throw ConfigError("model: counts must be positive");
    if (dims[i] == 0) throw ConfigError("model: dims must be positive");
    if (ks[i] == 0) throw ConfigError("model: ks must be positive");
    if (!(radii[i] > 0.0) || !std::isfinite(radii[i])) throw ConfigError("model: radii must be positive");
    if (heads == 0 || dims[i] % heads != 0)
      throw ConfigError("model: heads=" + std::to_string(heads) + " does not divide dim " +
                        std::to_string(dims[i]));
    if (i > 0) {
      if (counts[i] >= counts[i - 1]) throw ConfigError("model: counts must be strictly decreasing");
      if (dims[i] < dims[i - 1]) throw ConfigError("model: dims must be non-decreasing");
      if (radii[i] <= radii[i - 1]) throw ConfigError("model: radii must be increasing");
      if (ks[i] > counts[i - 1])
        throw ConfigError("model: k_" + std::to_string(i + 1) + "=" + std::to_string(ks[i]) +
                          " exceeds N_" + std::to_string(i) + "=" + std::to_string(counts[i - 1]));
    }
  }
  if (encoder_blocks == 0) throw ConfigError("model: encoder_blocks must be positive");
  if (decoder_blocks == 0) throw ConfigError("model: decoder_blocks must be positive");
  if (mlp_ratio == 0) throw ConfigError("model: mlp_ratio must be positive");
  if (interp_k == 0 || interp_k > counts.back())
    throw ConfigError("model: interp_k must be in [1, N_S]");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) throw ConfigError("model: mask_ratio must be in [0, 1)");
}

void ModelConfig::to_ini(IniDocument& doc) const {
  doc.set(kSection, "counts", join_sizes(counts));
  doc.set(kSection, "dims", join_sizes(dims));
  doc.set(kSection, "radii", join_doubles(radii));
  doc.set(kSection, "ks", join_sizes(ks));
  doc.set(kSection, "encoder_blocks", std::to_string(encoder_blocks));
  doc.set(kSection, "decoder_blocks", std::to_string(decoder_blocks));
  doc.set(kSection, "heads", std::to_string(heads));
  doc.set(kSection, "mlp_ratio", std::to_string(mlp_ratio));
  doc.set(kSection, "interp_k", std::to_string(interp_k));
  doc.set(kSection, "mask_ratio", format_double(mask_ratio));
  doc.set(kSection, "hierarchical_encoder", format_bool(hierarchical_encoder));
  doc.set(kSection, "hierarchical_decoder", format_bool(hierarchical_decoder));
  doc.set(kSection, "skip_connections", format_bool(skip_connections));
  doc.set(kSection, "local_attention", format_bool(local_attention));
  doc.set(kSection, "multi_scale_mask", format_bool(multi_scale_mask));
}

ModelConfig ModelConfig::from_ini(const IniDocument& doc, const ModelConfig& d) {
  ModelConfig c;
  c.counts = doc.get_size_list(kSection, "counts", d.counts);
  c.dims = doc.get_size_list(kSection, "dims", d.dims);
  c.radii = doc.get_double_list(kSection, "radii", d.radii);
  c.ks = doc.get_size_list(kSection, "ks", d.ks);
  c.encoder_blocks = doc.get_size(kSection, "encoder_blocks", d.encoder_blocks);
  c.decoder_blocks = doc.get_size(kSection, "decoder_blocks", d.decoder_blocks);
  c.heads = doc.get_size(kSection, "heads", d.heads);
  c.mlp_ratio = doc.get_size(kSection, "mlp_ratio", d.mlp_ratio);
  c.interp_k = doc.get_size(kSection, "interp_k", d.interp_k);
  c.mask_ratio = doc.get_double(kSection, "mask_ratio", d.mask_ratio);
  c.hierarchical_encoder = doc.get_bool(kSection, "hierarchical_encoder", d.hierarchical_encoder);
  c.hierarchical_decoder = doc.get_bool(kSection, "hierarchical_decoder", d.hierarchical_decoder);
  c.skip_connections = doc.get_bool(kSection, "skip_connections", d.skip_connections);
  c.local_attention = doc.get_bool(kSection, "local_attention", d.local_attention);
  c.multi_scale_mask = doc.get_bool(kSection, "multi_scale_mask", d.multi_scale_mask);
  return c;
}

std::string ModelConfig::to_text() const {
  IniDocument doc;
  to_ini(doc);
  return doc.to_string();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  return from_ini(IniDocument::parse(text), ModelConfig{});
}

// ---------------------------------------------------------------- params

template <typename T>
Tensor<T> ParamStore<T>::add(const std::string& name, Shape shape, bool decay) {
  if (index_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({name, Tensor<T>::zeros(std::move(shape), true), decay});
  return entries_.back().value;
}

template <typename T>
void ParamStore<T>::adopt(const std::string& name, Tensor<T> value, bool decay) {
  if (index_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back({name, std::move(value), decay});
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
  return entries_[it->second].value;
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

template <typename T>
ParamStore<T> ParamStore<T>::clone() const {
  ParamStore out;
  out.entries_.reserve(entries_.size());
  for (const auto& e : entries_) {
    Tensor<T> v = e.value.clone();
    v.set_requires_grad(e.value.requires_grad());
    out.entries_.push_back({e.name, std::move(v), e.decay});
  }
  out.index_ = index_;
  return out;
}

template <typename T>
void ParamStore<T>::set_requires_grad(bool on) {
  for (auto& e : entries_) e.value.set_requires_grad(on);
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

// ---------------------------------------------------------------- registration
//
// Both the model and parameter_count() walk the same layout through this
// visitor so the closed form and the allocated store cannot drift apart.

namespace {

struct LayoutVisitor {
  virtual ~LayoutVisitor() = default;
  virtual void linear(const std::string& prefix, std::size_t in, std::size_t out) = 0;
  virtual void norm(const std::string& prefix, std::size_t c) = 0;
  virtual void vector(const std::string& name, std::size_t c) = 0;
};

void visit_mlp2(LayoutVisitor& v, const std::string& prefix, std::size_t in, std::size_t hidden,
                std::size_t out) {
  v.linear(prefix + ".l1", in, hidden);
  v.linear(prefix + ".l2", hidden, out);
}

void visit_block(LayoutVisitor& v, const std::string& prefix, std::size_t c, std::size_t ratio) {
  v.norm(prefix + ".ln1", c);
  v.linear(prefix + ".attn.q", c, c);
  v.linear(prefix + ".attn.k", c, c);
  v.linear(prefix + ".attn.v", c, c);
  v.linear(prefix + ".attn.o", c, c);
  v.norm(prefix + ".ln2", c);
  v.linear(prefix + ".ffn.l1", c, ratio * c);
  v.linear(prefix + ".ffn.l2", ratio * c, c);
}

void visit_layout(const ModelConfig& cfg, LayoutVisitor& v) {
  const std::size_t S = cfg.stages();
  const auto& C = cfg.dims;
  visit_mlp2(v, "embed.mlp1", 3, C[0], C[0]);
  visit_mlp2(v, "embed.mlp2", C[0], C[0], C[0]);
  for (std::size_t i = 1; i <= S; ++i) {
    const std::string pre = stage_name("enc.s", i);
    if (i > 1) visit_mlp2(v, pre + ".merge", C[i - 2] + 3, C[i - 1], C[i - 1]);
    const std::size_t blocks = cfg.hierarchical_encoder ? cfg.encoder_blocks : (i == 1 ? S * cfg.encoder_blocks : 0);
    if (blocks > 0) {
      visit_mlp2(v, pre + ".pos", 3, C[i - 1], C[i - 1]);
      for (std::size_t b = 0; b < blocks; ++b) visit_block(v, pre + ".b" + std::to_string(b), C[i - 1], cfg.mlp_ratio);
    }
    v.norm(pre + ".norm", C[i - 1]);
  }
  v.vector("dec.mask_token", C[S - 1]);
  if (cfg.hierarchical_decoder) {
    for (std::size_t j = 1; j <= S - 1; ++j) {
      const std::size_t s = S + 1 - j;  // scale handled by decoder stage j
      const std::size_t c = C[s - 1];
      const std::string pre = stage_name("dec.s", j);
      if (j > 1) {
        v.linear(pre + ".prop", C[s], c);
        if (cfg.skip_connections) v.linear(pre + ".skip", 2 * c, c);
      }
      visit_mlp2(v, pre + ".pos", 3, c, c);
      for (std::size_t b = 0; b < cfg.decoder_blocks; ++b) visit_block(v, pre + ".b" + std::to_string(b), c, cfg.mlp_ratio);
    }
  } else {
    const std::size_t c = C[1];
    v.linear("dec.s1.prop", C[S - 1], c);
    if (cfg.skip_connections) v.linear("dec.s1.skip", 2 * c, c);
    visit_mlp2(v, "dec.s1.pos", 3, c, c);
    for (std::size_t b = 0; b < (S - 1) * cfg.decoder_blocks; ++b)
      visit_block(v, "dec.s1.b" + std::to_string(b), c, cfg.mlp_ratio);
  }
  v.norm("dec.norm", C[1]);
  v.linear("recon.head", C[1], cfg.ks[1] * 3);
}

struct Counter final : LayoutVisitor {
  std::size_t n = 0;
  void linear(const std::string&, std::size_t in, std::size_t out) override { n += in * out + out; }
  void norm(const std::string&, std::size_t c) override { n += 2 * c; }
  void vector(const std::string&, std::size_t c) override { n += c; }
};

template <typename T>
struct Allocator final : LayoutVisitor {
  ParamStore<T>& store;
  Rng rng;
  Allocator(ParamStore<T>& s, std::uint64_t seed) : store(s), rng(seed) {}

  void linear(const std::string& prefix, std::size_t in, std::size_t out) override {
    Tensor<T> w = store.add(prefix + ".w", {in, out});
    const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
    for (T& x : w.data()) x = static_cast<T>(rng.uniform(-bound, bound));
    store.add(prefix + ".b", {out});
  }
  void norm(const std::string& prefix, std::size_t c) override {
    Tensor<T> g = store.add(prefix + ".g", {c}, false);
    std::fill(g.data().begin(), g.data().end(), T(1));
    store.add(prefix + ".b", {c}, false);
  }
  void vector(const std::string& name, std::size_t c) override {
    Tensor<T> t = store.add(name, {c}, false);
    for (T& x : t.data()) x = static_cast<T>(rng.normal(0.0, 0.02));
  }
};

}  // namespace

std::size_t parameter_count(const ModelConfig& config) {
  config.validate();
  Counter c;
  visit_layout(config, c);
  return c.n;
}

Tensor<double> points_tensor(const PointSet& points) { return coords_tensor<double>(points); }

// ---------------------------------------------------------------- model

template <typename T>
PointMAE<T>::PointMAE(ModelConfig config, std::uint64_t init_seed) : config_(std::move(config)) {
  config_.validate();
  register_params(init_seed);
}

template <typename T>
PointMAE<T>::PointMAE(ModelConfig config, ParamStore<T> params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  ParamStore<T> layout;
  Allocator<T> alloc(layout, 0);
  visit_layout(config_, alloc);
  if (layout.size() != params_.size())
    throw ContractError("parameter store has " + std::to_string(params_.size()) + " arrays, config needs " +
                        std::to_string(layout.size()));
  for (const auto& e : layout.entries()) {
    if (!params_.contains(e.name)) throw ContractError("missing parameter '" + e.name + "'");
    if (params_.get(e.name).shape() != e.value.shape())
      throw DimensionError("parameter '" + e.name + "' has shape " + shape_str(params_.get(e.name).shape()) +
                           ", expected " + shape_str(e.value.shape()));
  }
}

template <typename T>
void PointMAE<T>::register_params(std::uint64_t init_seed) {
  Allocator<T> alloc(params_, init_seed);
  visit_layout(config_, alloc);
}

template <typename T>
Tensor<T> PointMAE<T>::lin(const Tensor<T>& x, const std::string& prefix) const {
  return linear(x, p(prefix + ".w"), p(prefix + ".b"));
}

template <typename T>
Tensor<T> PointMAE<T>::mlp2(const Tensor<T>& x, const std::string& prefix) const {
  return lin(gelu(lin(x, prefix + ".l1")), prefix + ".l2");
}

template <typename T>
Tensor<T> PointMAE<T>::positional(const PointSet& coords, const std::string& prefix) const {
  return mlp2(coords_tensor<T>(coords), prefix);
}

template <typename T>
std::size_t PointMAE<T>::encoder_stage_blocks(std::size_t stage) const {
  if (config_.hierarchical_encoder) return config_.encoder_blocks;
  return stage == 1 ? config_.stages() * config_.encoder_blocks : 0;
}

template <typename T>
std::size_t PointMAE<T>::encoder_stage_dim(std::size_t stage) const {
  return config_.dims.at(stage - 1);
}

template <typename T>
Tensor<T> PointMAE<T>::block_forward(const Tensor<T>& x, const std::string& prefix, const AdjacencyMask* allow,
                                     AttentionTrace<T>* trace) const {
  const std::size_t n = x.rows(), c = x.cols();
  const std::size_t heads = config_.heads, d = c / heads;
  std::vector<std::uint8_t> all;
  std::span<const std::uint8_t> mask;
  if (allow != nullptr) {
    if (allow->n != n) throw DimensionError("attention mask size does not match token count");
    mask = allow->allow;
  } else {
    all.assign(n * n, 1);
    mask = all;
  }

  Tensor<T> h = layer_norm(x, p(prefix + ".ln1.g"), p(prefix + ".ln1.b"));
  Tensor<T> q = lin(h, prefix + ".attn.q");
  Tensor<T> k = lin(h, prefix + ".attn.k");
  Tensor<T> v = lin(h, prefix + ".attn.v");
  const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    Tensor<T> qh = slice_cols(q, hd * d, d);
    Tensor<T> kh = slice_cols(k, hd * d, d);
    Tensor<T> vh = slice_cols(v, hd * d, d);
    Tensor<T> probs = masked_softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_d), mask);
    if (trace != nullptr) trace->probs.push_back(probs);
    outs.push_back(matmul(probs, vh));
  }
  Tensor<T> y = add(x, lin(heads == 1 ? outs.front() : concat_cols(outs), prefix + ".attn.o"));
  Tensor<T> f = lin(gelu(lin(layer_norm(y, p(prefix + ".ln2.g"), p(prefix + ".ln2.b")), prefix + ".ffn.l1")),
                    prefix + ".ffn.l2");
  return add(y, f);
}

template <typename T>
Tensor<T> PointMAE<T>::run_stage_blocks(Tensor<T> x, const PointSet& coords, const std::string& prefix,
                                        std::size_t blocks, const AdjacencyMask* allow) const {
  if (blocks == 0) return x;
  const Tensor<T> pos = positional(coords, prefix + ".pos");
  for (std::size_t b = 0; b < blocks; ++b) x = block_forward(add(x, pos), prefix + ".b" + std::to_string(b), allow);
  return x;
}

template <typename T>
TokenSet<T> PointMAE<T>::encoder_block(const TokenSet<T>& tokens, std::size_t stage, std::size_t block,
                                       double radius, AttentionTrace<T>* trace) const {
  const std::string pre = stage_name("enc.s", stage);
  if (block >= encoder_stage_blocks(stage))
    throw ContractError("encoder stage " + std::to_string(stage) + " has no block " + std::to_string(block));
  std::optional<AdjacencyMask> allow;
  if (radius > 0.0) allow = ball_adjacency(tokens.coords, radius);
  TokenSet<T> out = tokens;
  out.feats = block_forward(add(tokens.feats, positional(tokens.coords, pre + ".pos")), pre + ".b" + std::to_string(block),
                            allow ? &*allow : nullptr, trace);
  return out;
}

template <typename T>
TokenSet<T> PointMAE<T>::embed_tokens(const MultiScaleRepr& repr, const MaskAssignment& mask) const {
  const ScaleLevel& lvl = repr.level(1);
  const std::size_t k = lvl.neighbors.k;
  TokenSet<T> out;
  out.index = mask.visible_indices(1);
  out.visible.assign(out.index.size(), true);
  out.coords = gather(lvl.seeds, out.index);
  std::vector<std::uint32_t> nbr;
  nbr.reserve(out.index.size() * k);
  for (std::uint32_t j : out.index) {
    auto row = lvl.neighbors.row(j);
    nbr.insert(nbr.end(), row.begin(), row.end());
  }
  Tensor<T> rel = relative_offsets<T>(repr.input, out.coords, nbr, k);
  out.feats = mlp2(group_max(mlp2(rel, "embed.mlp1"), k), "embed.mlp2");
  return out;
}

template <typename T>
TokenSet<T> PointMAE<T>::merge_tokens(const TokenSet<T>& prev, const MultiScaleRepr& repr,
                                      const MaskAssignment& mask, std::size_t scale) const {
  if (scale < 2 || scale > repr.num_scales()) throw ContractError("merge_tokens: bad scale " + std::to_string(scale));
  if (prev.size() == 0) throw ContractError("merge_tokens: no tokens at scale " + std::to_string(scale - 1));
  const ScaleLevel& lvl = repr.level(scale);
  TokenSet<T> out;
  out.index = mask.visible_indices(scale);
  out.visible.assign(out.index.size(), true);
  out.coords = gather(lvl.seeds, out.index);

  std::size_t k = lvl.neighbors.k;
  std::vector<std::uint32_t> rows;  // rows of prev.feats
  if (config_.multi_scale_mask) {
    std::vector<std::int64_t> row_of(repr.points(scale - 1).size(), -1);
    for (std::size_t r = 0; r < prev.index.size(); ++r) row_of[prev.index[r]] = static_cast<std::int64_t>(r);
    rows.reserve(out.index.size() * k);
    for (std::uint32_t j : out.index)
      for (std::uint32_t nb : lvl.neighbors.row(j)) {
        if (row_of[nb] < 0)
          throw ContractError("merge_tokens: neighbor " + std::to_string(nb) + " of visible scale-" +
                              std::to_string(scale) + " seed " + std::to_string(j) + " is masked");
        rows.push_back(static_cast<std::uint32_t>(row_of[nb]));
      }
  } else {
    // Independent masks: neighbors are looked up among the visible tokens.
    k = std::min(k, prev.size());
    rows = knn(out.coords, prev.coords, k).indices;
  }
  Tensor<T> rel = relative_offsets<T>(prev.coords, out.coords, rows, k);
  const std::vector<std::size_t> idx = to_size(rows);
  Tensor<T> in = concat_cols(std::vector<Tensor<T>>{gather_rows(prev.feats, idx), rel});
  out.feats = group_max(mlp2(in, stage_name("enc.s", scale) + ".merge"), k);
  return out;
}

template <typename T>
Encoded<T> PointMAE<T>::encode(const PointSet& points, Rng& rng) const {
  return encode(points, config_.mask_ratio, rng);
}

template <typename T>
Encoded<T> PointMAE<T>::encode(const PointSet& points, double mask_ratio, Rng& rng) const {
  MultiScaleRepr repr = build_scales(points, config_.counts, config_.ks);
  MaskAssignment mask = make_mask(repr, mask_ratio, rng, config_.multi_scale_mask);
  return encode_with(std::move(repr), std::move(mask));
}

template <typename T>
Encoded<T> PointMAE<T>::encode_with(MultiScaleRepr repr, MaskAssignment mask) const {
  const std::size_t S = config_.stages();
  if (repr.num_scales() != S || mask.num_scales() != S)
    throw ContractError("encode: representation has " + std::to_string(repr.num_scales()) + " scales, model " +
                        std::to_string(S));
  Encoded<T> enc{std::move(repr), std::move(mask), {}};
  enc.tokens.reserve(S);
  for (std::size_t i = 1; i <= S; ++i) {
    TokenSet<T> tok = i == 1 ? embed_tokens(enc.repr, enc.mask) : merge_tokens(enc.tokens.back(), enc.repr, enc.mask, i);
    const std::string pre = stage_name("enc.s", i);
    const std::size_t blocks = encoder_stage_blocks(i);
    if (blocks > 0) {
      std::optional<AdjacencyMask> allow;
      if (config_.local_attention) allow = ball_adjacency(tok.coords, config_.radii[i - 1]);
      tok.feats = run_stage_blocks(tok.feats, tok.coords, pre, blocks, allow ? &*allow : nullptr);
    }
    tok.feats = layer_norm(tok.feats, p(pre + ".norm.g"), p(pre + ".norm.b"));
    enc.tokens.push_back(std::move(tok));
  }
  return enc;
}

template <typename T>
TokenSet<T> PointMAE<T>::decode(const Encoded<T>& encoded) const {
  const std::size_t S = config_.stages();
  const MaskAssignment& mask = encoded.mask;
  const MultiScaleRepr& repr = encoded.repr;

  // All N_S positions: visible encoder tokens plus the shared mask token.
  const TokenSet<T>& top = encoded.tokens.back();
  const std::size_t ns = repr.points(S).size();
  const Tensor<T>& mask_token = p("dec.mask_token");
  Tensor<T> pool = concat_rows(std::vector<Tensor<T>>{top.feats, reshape(mask_token, {1, mask_token.numel()})});
  std::vector<std::size_t> order(ns, top.size());
  for (std::size_t r = 0; r < top.size(); ++r) order[top.index[r]] = r;
  Tensor<T> x = gather_rows(pool, order);

  // Interpolate from scale `from` to `to`, project, skip-fuse the visible rows.
  auto propagate = [&](const Tensor<T>& feats, std::size_t from, std::size_t to, const std::string& pre) {
    Tensor<T> y = lin(interpolate(repr.points(to), repr.points(from), feats, config_.interp_k), pre + ".prop");
    if (!config_.skip_connections) return y;
    const TokenSet<T>& enc = encoded.tokens[to - 1];
    const std::vector<std::uint32_t> masked = mask.masked_indices(to);
    Tensor<T> fused = lin(concat_cols(std::vector<Tensor<T>>{gather_rows(y, to_size(enc.index)), enc.feats}), pre + ".skip");
    Tensor<T> rest = gather_rows(y, to_size(masked));
    std::vector<std::size_t> back(repr.points(to).size());
    for (std::size_t r = 0; r < enc.size(); ++r) back[enc.index[r]] = r;
    for (std::size_t r = 0; r < masked.size(); ++r) back[masked[r]] = enc.size() + r;
    return gather_rows(concat_rows(std::vector<Tensor<T>>{fused, rest}), back);
  };

  if (config_.hierarchical_decoder) {
    for (std::size_t j = 1; j <= S - 1; ++j) {
      const std::size_t s = S + 1 - j;
      const std::string pre = stage_name("dec.s", j);
      if (j > 1) x = propagate(x, s + 1, s, pre);
      x = run_stage_blocks(x, repr.points(s), pre, config_.decoder_blocks, nullptr);
    }
  } else {
    x = propagate(x, S, 2, "dec.s1");
    x = run_stage_blocks(x, repr.points(2), "dec.s1", (S - 1) * config_.decoder_blocks, nullptr);
  }

  TokenSet<T> out;
  out.coords = repr.points(2);
  out.index.resize(out.coords.size());
  std::iota(out.index.begin(), out.index.end(), 0u);
  out.visible = mask.at(2);
  out.feats = layer_norm(x, p("dec.norm.g"), p("dec.norm.b"));
  return out;
}

template <typename T>
Reconstruction<T> PointMAE<T>::reconstruct(const TokenSet<T>& final_tokens, const Encoded<T>& encoded) const {
  const MultiScaleRepr& repr = encoded.repr;
  const std::vector<std::uint32_t> masked = encoded.mask.masked_indices(2);
  if (masked.empty()) throw ContractError("reconstruct: no masked scale-2 tokens");
  if (final_tokens.size() != repr.points(2).size())
    throw DimensionError("reconstruct: expected " + std::to_string(repr.points(2).size()) + " scale-2 tokens, got " +
                         std::to_string(final_tokens.size()));
  const ScaleLevel& lvl = repr.level(2);
  const std::size_t k = lvl.neighbors.k;

  Reconstruction<T> rec;
  rec.targets.reserve(masked.size());
  for (std::uint32_t j : masked) {
    PointSet t;
    t.coords.reserve(k);
    const Vec3& seed = lvl.seeds[j];
    for (std::uint32_t nb : lvl.neighbors.row(j)) {
      const Vec3& q = repr.points(1)[nb];
      t.coords.push_back({q[0] - seed[0], q[1] - seed[1], q[2] - seed[2]});
    }
    rec.targets.push_back(std::move(t));
  }
  Tensor<T> head = lin(gather_rows(final_tokens.feats, to_size(masked)), "recon.head");
  rec.predictions = reshape(head, {masked.size() * k, 3});
  rec.loss = grouped_chamfer_l2(rec.predictions, k, rec.targets);
  return rec;
}

template <typename T>
Tensor<T> PointMAE<T>::forward_pretrain(const PointSet& points, Rng& rng) const {
  Encoded<T> enc = encode(points, rng);
  return reconstruct(decode(enc), enc).loss;
}

template <typename T>
Tensor<T> PointMAE<T>::extract_global_feature(const PointSet& points) const {
  Rng unused(0);
  Encoded<T> enc = encode(points, 0.0, unused);
  const Tensor<T>& top = enc.tokens.back().feats;
  std::vector<std::vector<std::size_t>> all(1, std::vector<std::size_t>(top.rows()));
  std::iota(all[0].begin(), all[0].end(), std::size_t{0});
  Tensor<T> pooled = add(segment_max(top, all), segment_mean(top, all));
  return reshape(pooled, {top.cols()});
}

template class ParamStore<float>;
template class ParamStore<double>;
template class PointMAE<float>;
template class PointMAE<double>;

}  // namespace pcmae
