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

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "pcmae/errors.hpp"
#include "pcmae/model.hpp"

using namespace pcmae;
using namespace pcmae::testing;

namespace {

PointSet cloud(std::uint64_t seed, std::size_t n) {
  Rng rng(seed);
  return random_cloud(rng, n);
}

template <typename T>
bool same_data(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a.data()[i]) - double(b.data()[i])));
  return m;
}

// Independent closed form of the parameter layout.
std::size_t expected_params(const ModelConfig& c) {
  const std::size_t S = c.counts.size(), r = c.mlp_ratio;
  auto lin = [](std::size_t i, std::size_t o) { return i * o + o; };
  auto block = [&](std::size_t C) { return 4 * C + 4 * lin(C, C) + lin(C, r * C) + lin(r * C, C); };
  auto pos = [&](std::size_t C) { return lin(3, C) + lin(C, C); };
  const auto& C = c.dims;
  std::size_t n = lin(3, C[0]) + 3 * lin(C[0], C[0]);
  for (std::size_t i = 0; i < S; ++i) {
    if (i > 0) n += lin(C[i - 1] + 3, C[i]) + lin(C[i], C[i]);
    const std::size_t blocks = c.hierarchical_encoder ? c.encoder_blocks : (i == 0 ? S * c.encoder_blocks : 0);
    if (blocks) n += pos(C[i]) + blocks * block(C[i]);
    n += 2 * C[i];
  }
  n += C[S - 1];
  const std::size_t skip = c.skip_connections ? 1 : 0;
  if (c.hierarchical_decoder) {
    for (std::size_t s = S; s >= 2; --s) {
      const std::size_t Cs = C[s - 1];
      if (s < S) n += lin(C[s], Cs) + skip * lin(2 * Cs, Cs);
      n += pos(Cs) + c.decoder_blocks * block(Cs);
    }
  } else {
    n += lin(C[S - 1], C[1]) + skip * lin(2 * C[1], C[1]) + pos(C[1]) + (S - 1) * c.decoder_blocks * block(C[1]);
  }
  return n + 2 * C[1] + lin(C[1], 3 * c.ks[1]);
}

}  // namespace

TEST_CASE("config presets validate and round-trip through text") {
  for (const ModelConfig& c : {ModelConfig::paper(), ModelConfig::small()}) {
    CHECK_NOTHROW(c.validate());
    CHECK(ModelConfig::from_text(c.to_text()) == c);
  }
  ModelConfig c = ModelConfig::paper();
  c.mask_ratio = 0.6;
  c.local_attention = false;
  CHECK(ModelConfig::from_text(c.to_text()) == c);
}

TEST_CASE("config validation rejects broken invariants") {
  auto bad = [](auto mutate) {
    ModelConfig c = ModelConfig::paper();
    mutate(c);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  bad([](ModelConfig& c) { c.counts = {512}; c.dims = {96}; c.radii = {0.3}; c.ks = {16}; });
  bad([](ModelConfig& c) { c.dims = {96, 64, 384}; });
  bad([](ModelConfig& c) { c.radii = {0.32, 0.32, 1.28}; });
  bad([](ModelConfig& c) { c.heads = 5; });
  bad([](ModelConfig& c) { c.counts = {512, 512, 64}; });
  bad([](ModelConfig& c) { c.ks = {16, 600, 8}; });
  bad([](ModelConfig& c) { c.mask_ratio = 1.0; });
  bad([](ModelConfig& c) { c.interp_k = 65; });
  bad([](ModelConfig& c) { c.radii = {0.3, 0.6}; });
  CHECK_THROWS_AS(ModelConfig::from_text("[model]\nheads = six\n"), ConfigError);
}

TEST_CASE("parameter count is a closed-form function of the config") {
  ModelConfig c = ModelConfig::paper();
  CHECK(parameter_count(c) == expected_params(c));
  CHECK(parameter_count(c) == 14721528);  // frozen regression value
  PointMAE<float> m(c, 1);
  CHECK(m.params().scalar_count() == parameter_count(c));

  // Each structural toggle changes the layout in the documented way; the
  // attention-range and masking toggles do not touch parameters.
  for (int flag = 0; flag < 5; ++flag) {
    ModelConfig a = c;
    switch (flag) {
      case 0: a.hierarchical_encoder = false; break;
      case 1: a.hierarchical_decoder = false; break;
      case 2: a.skip_connections = false; break;
      case 3: a.local_attention = false; break;
      case 4: a.multi_scale_mask = false; break;
    }
    CAPTURE(flag);
    CHECK(parameter_count(a) == expected_params(a));
    if (flag <= 2) CHECK(parameter_count(a) != parameter_count(c));
    else CHECK(parameter_count(a) == parameter_count(c));
  }
  ModelConfig s = ModelConfig::small();
  CHECK(PointMAE<double>(s, 3).params().scalar_count() == expected_params(s));
}

TEST_CASE("initialization follows the documented scheme") {
  PointMAE<float> m(ModelConfig::small(), 5);
  const auto& ps = m.params();
  const Tensor<float>& w = ps.get("enc.s2.b0.attn.q.w");
  const double bound = std::sqrt(6.0 / (64 + 64));
  for (float x : w.data()) CHECK(std::abs(x) <= bound);
  for (float x : ps.get("enc.s2.b0.attn.q.b").data()) CHECK(x == 0.0f);
  for (float x : ps.get("enc.s1.norm.g").data()) CHECK(x == 1.0f);
  for (const auto& e : ps.entries()) {
    const bool is_norm = e.name.ends_with(".g") ||
                         (e.name.ends_with(".b") && ps.contains(e.name.substr(0, e.name.size() - 2) + ".g"));
    CHECK_MESSAGE(e.decay == !(is_norm || e.name == "dec.mask_token"), e.name);
  }
  double var = 0;
  for (float x : ps.get("dec.mask_token").data()) var += double(x) * x;
  var /= 128;
  CHECK(std::sqrt(var) == doctest::Approx(0.02).epsilon(0.3));
  // Same seed, same parameters.
  PointMAE<float> m2(ModelConfig::small(), 5);
  for (std::size_t i = 0; i < ps.size(); ++i) CHECK(same_data(ps.entries()[i].value, m2.params().entries()[i].value));
}

TEST_CASE("default encoder: per-scale dims and unmasked token counts") {
  PointMAE<float> m(ModelConfig::paper(), 7);
  const PointSet pts = cloud(11, 2048);
  Rng rng(0);
  Encoded<float> e = m.encode(pts, 0.0, rng);
  REQUIRE(e.tokens.size() == 3);
  const std::size_t dims[] = {96, 192, 384}, counts[] = {512, 256, 64};
  for (int i = 0; i < 3; ++i) {
    CHECK(e.tokens[i].feats.cols() == dims[i]);
    CHECK(e.tokens[i].size() == counts[i]);
    CHECK(e.tokens[i].feats.rows() == counts[i]);
  }
}

TEST_CASE("default pipeline shapes under 80% masking") {
  PointMAE<float> m(ModelConfig::paper(), 7);
  const PointSet pts = cloud(12, 2048);
  Rng rng(42);
  Encoded<float> e = m.encode(pts, rng);
  // Frozen counts for this cloud and seed.
  CHECK(e.tokens[2].size() == 13);
  CHECK(e.mask.masked_count(3) == 51);
  CHECK(e.tokens[1].size() == 87);
  CHECK(e.tokens[0].size() == 298);
  CHECK(e.tokens[1].feats.cols() == 192);
  CHECK(e.tokens[1].feats.rows() == e.tokens[1].size());

  TokenSet<float> d = m.decode(e);
  CHECK(d.feats.rows() == 256);
  CHECK(d.feats.cols() == 192);
  Reconstruction<float> r = m.reconstruct(d, e);
  CHECK(r.predictions.rows() == e.mask.masked_count(2) * 8);
  CHECK(r.predictions.cols() == 3);
  CHECK(r.targets.size() == e.mask.masked_count(2));
  CHECK(r.loss.item() >= 0.0f);
  CHECK(std::isfinite(r.loss.item()));
}

TEST_CASE("embedding ignores a global translation") {
  PointMAE<double> m(ModelConfig::small(), 2);
  const PointSet pts = cloud(3, 256);
  MultiScaleRepr repr = build_scales(pts, m.config().counts, m.config().ks);
  Rng rng(9);
  MaskAssignment mask = make_mask(repr, 0.6, rng);
  MultiScaleRepr moved = repr;
  auto shift = [](PointSet& p) {
    for (auto& v : p.coords) v = {v[0] + 0.37f, v[1] - 0.81f, v[2] + 0.125f};
  };
  shift(moved.input);
  for (auto& l : moved.levels) shift(l.seeds);
  const Tensor<double> a = m.embed_tokens(repr, mask).feats;
  const Tensor<double> b = m.embed_tokens(moved, mask).feats;
  CHECK(a.rows() == mask.visible_count(1));
  CHECK(max_abs_diff(a, b) <= 1e-5);
}

TEST_CASE("degenerate neighborhood embeds the zero offset") {
  ModelConfig c = ModelConfig::small();
  PointMAE<double> m(c, 4);
  // Every raw point duplicated 16 times: each neighborhood collapses on its seed.
  PointSet base = cloud(5, 80), pts;
  for (const auto& p : base) for (int r = 0; r < 16; ++r) pts.coords.push_back(p);
  MultiScaleRepr repr = build_scales(pts, c.counts, c.ks);
  Rng rng(1);
  MaskAssignment mask = make_mask(repr, 0.0, rng);
  const Tensor<double> f = m.embed_tokens(repr, mask).feats;
  // Reference: MLP2(maxpool(MLP1(0))) computed by hand.
  auto mlp = [&](const Tensor<double>& x, const std::string& pre) {
    const auto& P = m.params();
    return linear(gelu(linear(x, P.get(pre + ".l1.w"), P.get(pre + ".l1.b"))), P.get(pre + ".l2.w"),
                  P.get(pre + ".l2.b"));
  };
  const Tensor<double> ref = mlp(mlp(Tensor<double>::zeros({1, 3}), "embed.mlp1"), "embed.mlp2");
  for (std::size_t r = 0; r < f.rows(); ++r)
    for (std::size_t j = 0; j < f.cols(); ++j) CHECK(f.at(r, j) == doctest::Approx(ref.at(0, j)).epsilon(1e-12));
}

TEST_CASE("merging: constant features and neighbor order") {
  ModelConfig c = ModelConfig::small();
  PointMAE<double> m(c, 6);
  const PointSet pts = cloud(8, 200);
  MultiScaleRepr repr = build_scales(pts, c.counts, c.ks);
  Rng rng(2);
  MaskAssignment mask = make_mask(repr, 0.5, rng);
  TokenSet<double> prev = m.embed_tokens(repr, mask);
  TokenSet<double> out = m.merge_tokens(prev, repr, mask, 2);
  CHECK(out.size() == mask.visible_count(2));
  CHECK(out.feats.cols() == 64);

  // Reversing each I_2 row does not change the pooled output.
  MultiScaleRepr rev = repr;
  auto& nb = rev.levels[1].neighbors;
  for (std::size_t j = 0; j < nb.rows; ++j) std::reverse(nb.indices.begin() + j * nb.k, nb.indices.begin() + (j + 1) * nb.k);
  CHECK(same_data(out.feats, m.merge_tokens(prev, rev, mask, 2).feats));

  // A masked required neighbor is an internal invariant violation.
  MaskAssignment broken = mask;
  const auto vis2 = mask.visible_indices(2);
  broken.visible[0][repr.level(2).neighbors.at(vis2[0], 0)] = false;
  TokenSet<double> fewer = m.embed_tokens(repr, broken);
  CHECK_THROWS_AS(m.merge_tokens(fewer, repr, broken, 2), ContractError);
}

TEST_CASE("merging identical neighbor features reduces to per-neighbor MLP then max") {
  ModelConfig c = ModelConfig::small();
  PointMAE<double> m(c, 6);
  const PointSet pts = cloud(8, 200);
  MultiScaleRepr repr = build_scales(pts, c.counts, c.ks);
  Rng rng(2);
  MaskAssignment mask = make_mask(repr, 0.0, rng);
  TokenSet<double> prev = m.embed_tokens(repr, mask);
  std::vector<double> f(prev.size() * 32);
  for (std::size_t r = 0; r < prev.size(); ++r)
    for (std::size_t j = 0; j < 32; ++j) f[r * 32 + j] = 0.1 * double(j % 7) - 0.2;
  prev.feats = Tensor<double>({prev.size(), 32}, f);
  TokenSet<double> out = m.merge_tokens(prev, repr, mask, 2);
  const auto& P = m.params();
  const auto& lvl = repr.level(2);
  for (std::size_t j : {std::size_t{0}, std::size_t{17}}) {
    std::vector<double> ref(64, -1e300);
    for (std::uint32_t q : lvl.neighbors.row(j)) {
      std::vector<double> in(f.begin(), f.begin() + 32);
      for (int a = 0; a < 3; ++a) in.push_back(double(repr.points(1)[q][a]) - double(lvl.seeds[j][a]));
      Tensor<double> x({1, 35}, in);
      Tensor<double> y = linear(gelu(linear(x, P.get("enc.s2.merge.l1.w"), P.get("enc.s2.merge.l1.b"))),
                                P.get("enc.s2.merge.l2.w"), P.get("enc.s2.merge.l2.b"));
      for (std::size_t o = 0; o < 64; ++o) ref[o] = std::max(ref[o], y.at(0, o));
    }
    for (std::size_t o = 0; o < 64; ++o) CHECK(out.feats.at(j, o) == doctest::Approx(ref[o]).epsilon(1e-12));
  }
}

TEST_CASE("local attention: far tokens get zero weight and do not influence each other") {
  ModelConfig c = ModelConfig::small();
  PointMAE<double> m(c, 10);
  TokenSet<double> t;
  t.coords.coords = {{0, 0, 0}, {0.1f, 0, 0}, {2, 0, 0}, {2, 0.1f, 0}};
  t.index = {0, 1, 2, 3};
  t.visible.assign(4, true);
  Rng rng(3);
  t.feats = random_tensor({4, 32}, rng);
  AttentionTrace<double> trace;
  TokenSet<double> out = m.encoder_block(t, 1, 0, 0.32, &trace);
  CHECK(out.feats.shape() == t.feats.shape());
  REQUIRE(trace.probs.size() == 4);
  for (const auto& p : trace.probs) {
    CHECK(p.at(0, 2) == 0.0);
    CHECK(p.at(2, 0) == 0.0);
    CHECK(p.at(1, 3) == 0.0);
    CHECK(p.at(0, 1) > 0.0);
  }
  TokenSet<double> perturbed = t;
  perturbed.feats = t.feats.clone();
  for (std::size_t j = 0; j < 32; ++j) perturbed.feats.at(2, j) += 3.0;
  TokenSet<double> out2 = m.encoder_block(perturbed, 1, 0, 0.32);
  for (std::size_t j = 0; j < 32; ++j) {
    CHECK(out2.feats.at(0, j) == out.feats.at(0, j));
    CHECK(out2.feats.at(1, j) == out.feats.at(1, j));
  }
  CHECK(out2.feats.at(2, 0) != out.feats.at(2, 0));
}

TEST_CASE("a radius covering the whole set equals unrestricted attention") {
  ModelConfig c = ModelConfig::small();
  PointMAE<float> m(c, 10);
  TokenSet<float> t;
  Rng rng(4);
  t.coords = random_cloud(rng, 20);
  t.index.resize(20);
  t.visible.assign(20, true);
  std::vector<float> f(20 * 32);
  for (float& x : f) x = float(rng.uniform(-1, 1));
  t.feats = Tensor<float>({20, 32}, f);
  const TokenSet<float> a = m.encoder_block(t, 1, 0, 4.0);
  const TokenSet<float> b = m.encoder_block(t, 1, 0, 0.0);
  CHECK(same_data(a.feats, b.feats));
}

TEST_CASE("decoder with zero weights keeps masked positions at zero") {
  ModelConfig c = ModelConfig::small();
  PointMAE<double> m(c, 12);
  for (auto& e : m.params().entries())
    if (e.name.starts_with("dec.")) std::fill(e.value.data().begin(), e.value.data().end(), 0.0);
  const PointSet pts = cloud(13, 256);
  Rng rng(5);
  Encoded<double> enc = m.encode(pts, rng);
  TokenSet<double> d = m.decode(enc);
  CHECK(d.feats.rows() == 32);
  for (std::uint32_t j : enc.mask.masked_indices(2))
    for (std::size_t o = 0; o < d.feats.cols(); ++o) CHECK(d.feats.at(j, o) == 0.0);
}

TEST_CASE("zero reconstruction head: loss matches the brute-force Chamfer oracle") {
  ModelConfig c = ModelConfig::small();
  PointMAE<double> m(c, 14);
  for (auto& e : m.params().entries())
    if (e.name.starts_with("recon.head")) std::fill(e.value.data().begin(), e.value.data().end(), 0.0);
  const PointSet pts = cloud(15, 300);
  Rng rng(6);
  Encoded<double> enc = m.encode(pts, rng);
  Reconstruction<double> r = m.reconstruct(m.decode(enc), enc);
  for (double x : r.predictions.data()) CHECK(x == 0.0);

  const auto& lvl = enc.repr.level(2);
  const PointSet zeros{std::vector<Vec3>(8, Vec3{0, 0, 0})};
  double ref = 0;
  const auto masked = enc.mask.masked_indices(2);
  for (std::uint32_t j : masked) {
    PointSet gt;
    for (std::uint32_t q : lvl.neighbors.row(j)) {
      const Vec3& p = enc.repr.points(1)[q];
      gt.coords.push_back({p[0] - lvl.seeds[j][0], p[1] - lvl.seeds[j][1], p[2] - lvl.seeds[j][2]});
    }
    ref += chamfer_oracle(zeros, gt);
  }
  ref /= double(masked.size());
  CHECK(r.loss.item() == doctest::Approx(ref).epsilon(1e-9));
}

TEST_CASE("reconstruction needs a masked token") {
  PointMAE<float> m(ModelConfig::small(), 1);
  Rng rng(0);
  Encoded<float> e = m.encode(cloud(1, 200), 0.0, rng);
  CHECK_THROWS_AS(m.reconstruct(m.decode(e), e), ContractError);
}

TEST_CASE("pretraining loss: non-negative, finite, deterministic") {
  PointMAE<float> m(ModelConfig::small(), 21);
  for (std::uint64_t s = 0; s < 100; ++s) {
    const PointSet pts = cloud(100 + s, 160);
    Rng rng(s);
    const float loss = m.forward_pretrain(pts, rng).item();
    CHECK(loss >= 0.0f);
    CHECK(std::isfinite(loss));
  }
  const PointSet pts = cloud(7, 200);
  Rng r1(77), r2(77);
  const float a = m.forward_pretrain(pts, r1).item();
  const float b = m.clone().forward_pretrain(pts, r2).item();
  CHECK(std::memcmp(&a, &b, sizeof a) == 0);
}

TEST_CASE("pretraining loss gradient matches finite differences") {
  PointMAE<double> m(ModelConfig::small(), 31);
  const PointSet pts = cloud(32, 128);
  auto loss_fn = [&] {
    Rng rng(5);
    return m.forward_pretrain(pts, rng);
  };
  m.params().zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(loss_fn());
  }
  auto& entries = m.params().entries();
  Rng pick(99);
  double worst = 0;
  std::size_t nonzero = 0;
  for (int t = 0; t < 100; ++t) {
    auto& e = entries[pick.below(entries.size())];
    const std::size_t i = pick.below(e.value.numel());
    const double analytic = e.value.has_grad() ? e.value.grad()[i] : 0.0;
    const double orig = e.value.data()[i], h = 1e-6;
    e.value.data()[i] = orig + h;
    const double fp = loss_fn().item();
    e.value.data()[i] = orig - h;
    const double fm = loss_fn().item();
    e.value.data()[i] = orig;
    const double numeric = (fp - fm) / (2 * h);
    if (analytic != 0.0) ++nonzero;
    const double err = rel_error(analytic, numeric);
    CAPTURE(e.name);
    CAPTURE(analytic);
    CAPTURE(numeric);
    CHECK(err <= 1e-3);
    worst = std::max(worst, err);
  }
  MESSAGE("max relative error " << worst << ", nonzero " << nonzero);
  CHECK(nonzero >= 50);
}

TEST_CASE("global feature: length, permutation invariance, single token pooling") {
  {
    PointMAE<float> m(ModelConfig::paper(), 3);
    CHECK(m.extract_global_feature(cloud(40, 2048)).shape() == Shape{384});
  }
  PointMAE<double> m(ModelConfig::small(), 3);
  Rng rng(41);
  const PointSet pts = random_cloud(rng, 300);
  const Tensor<double> a = m.extract_global_feature(pts);
  const Tensor<double> b = m.extract_global_feature(permuted(pts, random_permutation(rng, 300)));
  CHECK(a.shape() == Shape{128});
  double scale = 0;
  for (double x : a.data()) scale = std::max(scale, std::abs(x));
  CHECK(max_abs_diff(a, b) <= 1e-5 * scale);

  ModelConfig one;
  one.counts = {4, 1};
  one.dims = {8, 8};
  one.radii = {0.5, 1.0};
  one.ks = {2, 2};
  one.heads = 2;
  one.encoder_blocks = 1;
  one.interp_k = 1;
  PointMAE<double> tiny(one, 8);
  const PointSet few = cloud(42, 10);
  Rng unused(0);
  const Tensor<double> token = tiny.encode(few, 0.0, unused).tokens.back().feats;
  REQUIRE(token.rows() == 1);
  const Tensor<double> g = tiny.extract_global_feature(few);
  for (std::size_t j = 0; j < 8; ++j) CHECK(g.data()[j] == doctest::Approx(2 * token.at(0, j)).epsilon(1e-12));
}

TEST_CASE("ablation variants run end to end") {
  const PointSet pts = cloud(50, 256);
  for (int flag = 0; flag < 5; ++flag) {
    ModelConfig c = ModelConfig::small();
    switch (flag) {
      case 0: c.hierarchical_encoder = false; break;
      case 1: c.hierarchical_decoder = false; break;
      case 2: c.skip_connections = false; break;
      case 3: c.local_attention = false; break;
      case 4: c.multi_scale_mask = false; break;
    }
    CAPTURE(flag);
    PointMAE<float> m(c, 9);
    Rng rng(1);
    const float loss = m.forward_pretrain(pts, rng).item();
    CHECK(std::isfinite(loss));
    CHECK(loss >= 0.0f);
  }
}
