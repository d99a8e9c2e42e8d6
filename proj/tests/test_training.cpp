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

#include <cmath>
#include <cstring>

#include "oracles.hpp"
#include "pcmae/checkpoint.hpp"
#include "pcmae/errors.hpp"
#include "pcmae/training.hpp"

using namespace pcmae;
using namespace pcmae::testing;

namespace {

std::vector<DatasetRecord> tiny_dataset(std::size_t n, std::size_t points = 128) {
  DataConfig cfg;
  cfg.per_class = (n + 4) / 5;
  cfg.points = points;
  cfg.train_fraction = 1.0;
  auto ds = make_dataset(cfg).train;
  ds.resize(n);
  return ds;
}

TrainConfig quick_config() {
  TrainConfig t;
  t.batch_size = 4;
  t.epochs = 3;
  t.warmup_epochs = 1;
  t.base_lr = 1e-3;
  t.seed = 17;
  t.test_mode = true;
  return t;
}

bool same_params(const ParamStore<float>& a, const ParamStore<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.entries()[i].value;
    const auto& y = b.entries()[i].value;
    if (x.numel() != y.numel() || std::memcmp(x.data().data(), y.data().data(), x.numel() * sizeof(float)) != 0)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("schedule closed forms") {
  Schedule s;
  s.base_lr = 1e-4;
  s.min_lr = 1e-6;
  s.warmup_epochs = 10;
  s.total_epochs = 300;
  s.steps_per_epoch = 7;
  CHECK(lr_at(0, s) == 0.0);
  CHECK(lr_at(70, s) == 1e-4);
  CHECK(lr_at(2100, s) == 1e-6);
  CHECK(lr_at(69, s) == doctest::Approx(1e-4).epsilon(0.02));
  CHECK(lr_at(71, s) == doctest::Approx(1e-4).epsilon(1e-4));
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    const std::size_t step = rng.below(2101);
    long double ref;
    if (step < 70) ref = 1e-4L * step / 70.0L;
    else ref = 1e-6L + 0.5L * (1e-4L - 1e-6L) * (1.0L + std::cos(3.141592653589793238462643383279L * (step - 70) / 2030.0L));
    CHECK(std::abs(lr_at(step, s) - static_cast<double>(ref)) <= 1e-12);
  }
  Schedule bad = s;
  bad.warmup_epochs = 300;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.min_lr = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("AdamW first step and symmetry") {
  ParamStore<double> p;
  Tensor<double> w = p.add("w", {1});
  Tensor<double> n = p.add("n", {1}, false);
  w.data()[0] = 1.0;
  n.data()[0] = 1.0;
  AdamWConfig h;
  h.weight_decay = 0.0;
  auto st = OptimizerState<double>::for_params(p, h);
  adamw_step(p, {{1.0}, {0.0}}, st, 0.1);
  CHECK(std::abs(w.data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))) <= 1e-10);
  CHECK(w.data()[0] == doctest::Approx(0.9));
  CHECK(n.data()[0] == 1.0);  // zero gradient, no decay: fixed point
  CHECK(st.step == 1);

  // +g and -g from identical states move symmetrically.
  ParamStore<double> a, b;
  a.add("x", {3}).data()[1] = 0.5;
  b.add("x", {3}).data()[1] = 0.5;
  auto sa = OptimizerState<double>::for_params(a, h), sb = sa;
  adamw_step(a, {{0.3, -2.0, 1e-3}}, sa, 0.01);
  adamw_step(b, {{-0.3, 2.0, -1e-3}}, sb, 0.01);
  CHECK(a.entries()[0].value.data()[0] == -b.entries()[0].value.data()[0]);
  CHECK(a.entries()[0].value.data()[1] - 0.5 == doctest::Approx(0.5 - b.entries()[0].value.data()[1]));

  // Decoupled decay: zero gradient shrinks decayed params only.
  h.weight_decay = 0.05;
  ParamStore<double> d;
  d.add("w", {1}).data()[0] = 2.0;
  d.add("g", {1}, false).data()[0] = 2.0;
  auto sd = OptimizerState<double>::for_params(d, h);
  adamw_step(d, {{0.0}, {0.0}}, sd, 0.1);
  CHECK(d.entries()[0].value.data()[0] == doctest::Approx(2.0 * (1 - 0.1 * 0.05)).epsilon(1e-14));
  CHECK(d.entries()[1].value.data()[0] == 2.0);

  CHECK_THROWS_AS(adamw_step(d, {{0.0}}, sd, 0.1), ContractError);
  CHECK_THROWS_AS(adamw_step(d, {{0.0, 1.0}, {0.0}}, sd, 0.1), ContractError);
}

TEST_CASE("AdamW reduces a quadratic") {
  ParamStore<double> p;
  Tensor<double> x = p.add("x", {4});
  const double target[4] = {1, -2, 0.5, 3};
  auto loss = [&] {
    double l = 0;
    for (int i = 0; i < 4; ++i) l += (x.data()[i] - target[i]) * (x.data()[i] - target[i]);
    return l;
  };
  AdamWConfig h;
  h.weight_decay = 0;
  auto st = OptimizerState<double>::for_params(p, h);
  double prev = loss();
  for (int t = 0; t < 20; ++t) {
    std::vector<double> g(4);
    for (int i = 0; i < 4; ++i) g[i] = 2 * (x.data()[i] - target[i]);
    adamw_step(p, {g}, st, 0.05);
    const double now = loss();
    CHECK(now < prev);
    prev = now;
  }
}

TEST_CASE("augmentation is a shared-scale affine map") {
  Rng src(2);
  PointSet c = random_cloud(src, 50);
  Rng r1(5), r2(5);
  PointSet a = augment(c, r1), b = augment(c, r2);
  CHECK(a == b);
  const double s = (double(a[1][0]) - a[0][0]) / (double(c[1][0]) - c[0][0]);
  CHECK(s >= 0.8 - 1e-6);
  CHECK(s <= 1.25 + 1e-6);
  double cin[3] = {}, cout[3] = {};
  for (std::size_t i = 0; i < c.size(); ++i)
    for (int k = 0; k < 3; ++k) {
      CHECK(double(a[i][k]) - a[0][k] == doctest::Approx(s * (double(c[i][k]) - c[0][k])).epsilon(1e-5));
      cin[k] += c[i][k] / 50.0;
      cout[k] += a[i][k] / 50.0;
    }
  for (int k = 0; k < 3; ++k) {
    const double t = cout[k] - s * cin[k];
    CHECK(std::abs(t) <= 0.1 + 1e-5);
  }
  AugmentConfig id;
  id.scale_lo = id.scale_hi = 1.0;
  id.shift = 0.0;
  CHECK(augment(c, r1, id) == c);
}

TEST_CASE("one epoch over 8 samples at batch 4 is two optimizer steps") {
  CHECK(steps_per_epoch(8, 4) == 2);
  CHECK(steps_per_epoch(9, 4) == 2);
  auto data = tiny_dataset(8);
  TrainConfig cfg = quick_config();
  cfg.epochs = 1;
  cfg.warmup_epochs = 0;
  TrainState st(PointMAE<float>(ModelConfig::small(), 1), cfg.adamw);
  std::vector<MetricRecord> metrics;
  int checkpoints = 0;
  train(st, data, cfg, [&](const MetricRecord& m) { metrics.push_back(m); }, [&](const TrainState&) { ++checkpoints; });
  CHECK(st.step == 2);
  CHECK(metrics.size() == 2);
  CHECK(checkpoints == 1);
  CHECK(metrics[0].step == 1);
  CHECK(metrics[1].epoch == 0);
  CHECK(metrics[0].lr == cfg.base_lr);
  CHECK(metrics[1].wall_ms == 0.0);
  CHECK(metrics[0].to_json().starts_with("{\"step\":1,\"epoch\":0,\"loss\":"));

  cfg.batch_size = 16;
  CHECK_THROWS_AS(train(st, data, cfg), ConfigError);
}

TEST_CASE("resume from a checkpoint continues bit-for-bit") {
  auto data = tiny_dataset(8);
  TrainConfig cfg = quick_config();
  cfg.checkpoint_every = 2;

  TrainState full(PointMAE<float>(ModelConfig::small(), 3), cfg.adamw);
  std::vector<std::string> full_metrics;
  train(full, data, cfg, [&](const MetricRecord& m) { full_metrics.push_back(m.to_json()); });
  CHECK(full.step == 6);

  TrainState part(PointMAE<float>(ModelConfig::small(), 3), cfg.adamw);
  std::vector<std::string> metrics;
  std::string saved;
  train(part, data, cfg, [&](const MetricRecord& m) { metrics.push_back(m.to_json()); },
        [&](const TrainState& s) { saved = encode_checkpoint(s.to_checkpoint(cfg.seed, 2)); }, 3);
  CHECK(part.step == 3);
  REQUIRE_FALSE(saved.empty());  // written at step 2

  TrainState resumed = TrainState::from_checkpoint(decode_checkpoint(saved), cfg.adamw);
  CHECK(resumed.step == 2);
  metrics.resize(2);
  train(resumed, data, cfg, [&](const MetricRecord& m) { metrics.push_back(m.to_json()); });
  CHECK(resumed.step == 6);
  CHECK(metrics == full_metrics);
  CHECK(same_params(resumed.model.params(), full.model.params()));
  CHECK(encode_checkpoint(resumed.to_checkpoint(cfg.seed, 2)) == encode_checkpoint(full.to_checkpoint(cfg.seed, 2)));
}

TEST_CASE("worker count does not change the result") {
  auto data = tiny_dataset(8);
  TrainConfig cfg = quick_config();
  cfg.epochs = 2;
  TrainState a(PointMAE<float>(ModelConfig::small(), 4), cfg.adamw);
  TrainState b(PointMAE<float>(ModelConfig::small(), 4), cfg.adamw);
  train(a, data, cfg);
  cfg.threads = 3;
  train(b, data, cfg);
  CHECK(same_params(a.model.params(), b.model.params()));
}

TEST_CASE("a non-finite loss aborts naming the step") {
  auto data = tiny_dataset(8);
  TrainConfig cfg = quick_config();
  TrainState st(PointMAE<float>(ModelConfig::small(), 5), cfg.adamw);
  st.model.params().entries().back().value.data()[0] = std::nanf("");
  CHECK_THROWS_WITH_AS(train(st, data, cfg), doctest::Contains("step 0"), NumericError);
}

TEST_CASE("gradient descent on one fixed sample halves the loss within 50 steps") {
  PointMAE<float> model(ModelConfig::small(), 6);
  const PointSet pts = tiny_dataset(1, 256)[0].points;
  AdamWConfig h;
  h.weight_decay = 0.0;
  auto st = OptimizerState<float>::for_params(model.params(), h);
  float first = 0, last = 0;
  for (int t = 0; t < 50; ++t) {
    Rng rng(123);
    model.params().zero_grad();
    last = sample_loss_and_grad(model, pts, rng);
    if (t == 0) first = last;
    std::vector<std::vector<float>> g;
    for (const auto& e : model.params().entries()) {
      if (e.value.has_grad()) g.emplace_back(e.value.grad().begin(), e.value.grad().end());
      else g.emplace_back(e.value.numel(), 0.0f);
    }
    adamw_step(model.params(), g, st, 1e-3);
  }
  MESSAGE("loss " << first << " -> " << last);
  CHECK(last <= 0.5f * first);
}

TEST_CASE("checkpoint container round trip and errors") {
  PointMAE<float> m(ModelConfig::small(), 8);
  Checkpoint c;
  c.config = m.config();
  c.meta["step"] = "12";
  put_params(c, m.params());
  const std::string bytes = encode_checkpoint(c);
  CHECK(bytes.substr(0, 4) == "PM2A");
  const Checkpoint back = decode_checkpoint(bytes);
  CHECK(back.config == c.config);
  CHECK(back.meta == c.meta);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(same_params(model_from_checkpoint(back).params(), m.params()));

  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_WITH_AS(decode_checkpoint(bad), doctest::Contains("bad magic"), ParseError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), ParseError);
  CHECK_THROWS_AS(decode_checkpoint(bytes + "z"), ParseError);
  std::string ver = bytes;
  ver[4] = 9;
  CHECK_THROWS_WITH_AS(decode_checkpoint(ver), doctest::Contains("version"), ParseError);

  Checkpoint missing = back;
  missing.records.pop_back();
  CHECK_THROWS_AS(model_from_checkpoint(missing), ConfigError);
  Checkpoint other = back;
  other.config = ModelConfig::paper();
  CHECK_THROWS_AS(model_from_checkpoint(other), ConfigError);
}
