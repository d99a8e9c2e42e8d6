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

#include "pcmae/training.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "pcmae/errors.hpp"

namespace pcmae {

namespace {

constexpr const char* kSection = "train";
constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::derive(seed, {kShuffleStream, epoch});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

}  // namespace

// ---------------------------------------------------------------- schedule

void Schedule::validate() const {
  if (steps_per_epoch == 0) throw ConfigError("schedule: steps_per_epoch must be >= 1");
  if (total_epochs == 0) throw ConfigError("schedule: total_epochs must be >= 1");
  if (warmup_epochs >= total_epochs) throw ConfigError("schedule: warmup must be shorter than training");
  if (!(base_lr > 0.0)) throw ConfigError("schedule: base_lr must be > 0");
  if (!(min_lr >= 0.0 && min_lr <= base_lr)) throw ConfigError("schedule: need 0 <= min_lr <= base_lr");
}

double lr_at(std::size_t step, const Schedule& s) {
  const std::size_t warm = s.warmup_steps(), total = s.total_steps();
  if (step < warm) return s.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  if (step >= total) return s.min_lr;
  const double t = static_cast<double>(step - warm) / static_cast<double>(total - warm);
  return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------- AdamW

template <typename T>
OptimizerState<T> OptimizerState<T>::for_params(const ParamStore<T>& params, AdamWConfig hyper) {
  OptimizerState s;
  s.hyper = hyper;
  for (const auto& e : params.entries()) {
    s.m.emplace_back(e.value.numel(), T(0));
    s.v.emplace_back(e.value.numel(), T(0));
  }
  return s;
}

template <typename T>
void adamw_step(ParamStore<T>& params, const std::vector<std::vector<T>>& grads, OptimizerState<T>& st, double lr) {
  auto& entries = params.entries();
  if (grads.size() != entries.size() || st.m.size() != entries.size() || st.v.size() != entries.size())
    throw ContractError("adamw_step: " + std::to_string(grads.size()) + " gradients / " + std::to_string(st.m.size()) +
                        " moments for " + std::to_string(entries.size()) + " parameters");
  const AdamWConfig& h = st.hyper;
  st.step += 1;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.step));
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto data = entries[p].value.data();
    const auto& g = grads[p];
    auto& m = st.m[p];
    auto& v = st.v[p];
    if (g.size() != data.size() || m.size() != data.size() || v.size() != data.size())
      throw ContractError("adamw_step: size mismatch for '" + entries[p].name + "'");
    const double decay = entries[p].decay ? lr * h.weight_decay : 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double gi = g[i];
      const double mi = h.beta1 * m[i] + (1.0 - h.beta1) * gi;
      const double vi = h.beta2 * v[i] + (1.0 - h.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      double x = static_cast<double>(data[i]);
      x -= decay * x;
      x -= lr * (mi / c1) / (std::sqrt(vi / c2) + h.eps);
      data[i] = static_cast<T>(x);
    }
  }
}

// ---------------------------------------------------------------- augmentation

PointSet augment(const PointSet& points, Rng& rng, const AugmentConfig& cfg) {
  const double s = rng.uniform(cfg.scale_lo, cfg.scale_hi);
  double t[3];
  for (double& v : t) v = rng.uniform(-cfg.shift, cfg.shift);
  PointSet out;
  out.coords.reserve(points.size());
  for (const auto& p : points)
    out.coords.push_back({static_cast<float>(s * p[0] + t[0]), static_cast<float>(s * p[1] + t[1]),
                          static_cast<float>(s * p[2] + t[2])});
  return out;
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
  if (epochs == 0) throw ConfigError("train: epochs must be >= 1");
  if (warmup_epochs >= epochs) throw ConfigError("train: warmup_epochs must be < epochs");
  if (!(base_lr > 0.0)) throw ConfigError("train: base_lr must be > 0");
  if (!(min_lr >= 0.0 && min_lr <= base_lr)) throw ConfigError("train: need 0 <= min_lr <= base_lr");
  if (!(adamw.beta1 >= 0.0 && adamw.beta1 < 1.0 && adamw.beta2 >= 0.0 && adamw.beta2 < 1.0))
    throw ConfigError("train: betas must be in [0, 1)");
  if (!(adamw.eps > 0.0)) throw ConfigError("train: eps must be > 0");
  if (!(adamw.weight_decay >= 0.0)) throw ConfigError("train: weight_decay must be >= 0");
  if (!(clip_norm >= 0.0)) throw ConfigError("train: clip_norm must be >= 0");
  if (!(aug.scale_lo > 0.0 && aug.scale_lo <= aug.scale_hi)) throw ConfigError("train: need 0 < scale_lo <= scale_hi");
  if (!(aug.shift >= 0.0)) throw ConfigError("train: shift must be >= 0");
  if (threads == 0) throw ConfigError("train: threads must be >= 1");
}

void TrainConfig::to_ini(IniDocument& doc) const {
  doc.set(kSection, "batch_size", std::to_string(batch_size));
  doc.set(kSection, "epochs", std::to_string(epochs));
  doc.set(kSection, "warmup_epochs", std::to_string(warmup_epochs));
  doc.set(kSection, "base_lr", format_double(base_lr));
  doc.set(kSection, "min_lr", format_double(min_lr));
  doc.set(kSection, "beta1", format_double(adamw.beta1));
  doc.set(kSection, "beta2", format_double(adamw.beta2));
  doc.set(kSection, "eps", format_double(adamw.eps));
  doc.set(kSection, "weight_decay", format_double(adamw.weight_decay));
  doc.set(kSection, "clip_norm", format_double(clip_norm));
  doc.set(kSection, "augment", format_bool(augment));
  doc.set(kSection, "scale_lo", format_double(aug.scale_lo));
  doc.set(kSection, "scale_hi", format_double(aug.scale_hi));
  doc.set(kSection, "shift", format_double(aug.shift));
  doc.set(kSection, "checkpoint_every", std::to_string(checkpoint_every));
}

TrainConfig TrainConfig::from_ini(const IniDocument& doc, const TrainConfig& d) {
  TrainConfig c = d;
  c.batch_size = doc.get_size(kSection, "batch_size", d.batch_size);
  c.epochs = doc.get_size(kSection, "epochs", d.epochs);
  c.warmup_epochs = doc.get_size(kSection, "warmup_epochs", d.warmup_epochs);
  c.base_lr = doc.get_double(kSection, "base_lr", d.base_lr);
  c.min_lr = doc.get_double(kSection, "min_lr", d.min_lr);
  c.adamw.beta1 = doc.get_double(kSection, "beta1", d.adamw.beta1);
  c.adamw.beta2 = doc.get_double(kSection, "beta2", d.adamw.beta2);
  c.adamw.eps = doc.get_double(kSection, "eps", d.adamw.eps);
  c.adamw.weight_decay = doc.get_double(kSection, "weight_decay", d.adamw.weight_decay);
  c.clip_norm = doc.get_double(kSection, "clip_norm", d.clip_norm);
  c.augment = doc.get_bool(kSection, "augment", d.augment);
  c.aug.scale_lo = doc.get_double(kSection, "scale_lo", d.aug.scale_lo);
  c.aug.scale_hi = doc.get_double(kSection, "scale_hi", d.aug.scale_hi);
  c.aug.shift = doc.get_double(kSection, "shift", d.aug.shift);
  c.checkpoint_every = doc.get_size(kSection, "checkpoint_every", d.checkpoint_every);
  return c;
}

Schedule TrainConfig::schedule(std::size_t spe) const {
  Schedule s;
  s.base_lr = base_lr;
  s.min_lr = min_lr;
  s.warmup_epochs = warmup_epochs;
  s.total_epochs = epochs;
  s.steps_per_epoch = spe;
  return s;
}

std::string MetricRecord::to_json() const {
  nlohmann::ordered_json j;
  j["step"] = step;
  j["epoch"] = epoch;
  j["loss"] = loss;
  j["lr"] = lr;
  j["wall_ms"] = wall_ms;
  return j.dump();
}

// ---------------------------------------------------------------- state

TrainState::TrainState(PointMAE<float> m, const AdamWConfig& hyper)
    : model(std::move(m)), opt(OptimizerState<float>::for_params(model.params(), hyper)) {}

Checkpoint TrainState::to_checkpoint(std::uint64_t seed, std::size_t spe) const {
  Checkpoint c;
  c.config = model.config();
  c.meta["step"] = std::to_string(step);
  c.meta["epoch"] = std::to_string(spe ? step / spe : 0);
  c.meta["seed"] = std::to_string(seed);
  c.meta["steps_per_epoch"] = std::to_string(spe);
  c.meta["adamw_step"] = std::to_string(opt.step);
  put_params(c, model.params());
  const auto& entries = model.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    c.put("adamw.m." + entries[i].name, entries[i].value.shape(), opt.m[i]);
    c.put("adamw.v." + entries[i].name, entries[i].value.shape(), opt.v[i]);
  }
  return c;
}

TrainState TrainState::from_checkpoint(const Checkpoint& ckpt, const AdamWConfig& hyper) {
  TrainState st(model_from_checkpoint(ckpt), hyper);
  auto meta_u64 = [&](const char* key) -> std::uint64_t {
    auto it = ckpt.meta.find(key);
    if (it == ckpt.meta.end()) return 0;
    try {
      return std::stoull(it->second);
    } catch (const std::exception&) {
      throw ConfigError(std::string("checkpoint metadata '") + key + "' is not an integer");
    }
  };
  st.step = meta_u64("step");
  st.opt.step = meta_u64("adamw_step");
  const auto& entries = st.model.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const CheckpointRecord* m = ckpt.find("adamw.m." + entries[i].name);
    const CheckpointRecord* v = ckpt.find("adamw.v." + entries[i].name);
    if (m == nullptr || v == nullptr) {
      if (st.opt.step != 0) throw ConfigError("checkpoint has no optimizer state for '" + entries[i].name + "'");
      continue;
    }
    if (m->data.size() != entries[i].value.numel() || v->data.size() != entries[i].value.numel())
      throw ConfigError("optimizer state for '" + entries[i].name + "' has the wrong size");
    st.opt.m[i] = m->data;
    st.opt.v[i] = v->data;
  }
  return st;
}

// ---------------------------------------------------------------- loop

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch_size) {
  return batch_size == 0 ? 0 : samples / batch_size;
}

float sample_loss_and_grad(PointMAE<float>& model, const PointSet& points, Rng& rng) {
  Tape<float> tape;
  TapeScope<float> scope(tape);
  Tensor<float> loss = model.forward_pretrain(points, rng);
  tape.backward(loss);
  return loss.item();
}

void train(TrainState& state, const std::vector<DatasetRecord>& data, const TrainConfig& cfg,
           const MetricSink& on_metric, const CheckpointSink& on_checkpoint, std::uint64_t stop_step) {
  cfg.validate();
  const std::size_t spe = steps_per_epoch(data.size(), cfg.batch_size);
  if (spe == 0)
    throw ConfigError("train: " + std::to_string(data.size()) + " samples are fewer than one batch of " +
                      std::to_string(cfg.batch_size));
  const Schedule sched = cfg.schedule(spe);
  sched.validate();
  const std::uint64_t total = sched.total_steps();
  const std::uint64_t end = std::min<std::uint64_t>(total, stop_step);
  const std::size_t B = cfg.batch_size;
  const std::size_t nparams = state.model.params().size();
  const std::size_t workers = std::max<std::size_t>(1, std::min(cfg.threads, B));

  std::uint64_t cached_epoch = UINT64_MAX;
  std::vector<std::size_t> order;
  std::vector<std::vector<std::vector<float>>> slot_grads(B, std::vector<std::vector<float>>(nparams));
  std::vector<float> slot_loss(B);

  while (state.step < end) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::uint64_t step = state.step;
    const std::uint64_t epoch = step / spe;
    if (epoch != cached_epoch) {
      order = epoch_order(cfg.seed, epoch, data.size());
      cached_epoch = epoch;
    }
    const std::size_t first = static_cast<std::size_t>(step % spe) * B;

    // Each slot is computed independently; slots are reduced in index order
    // afterwards, so the result does not depend on the worker count.
    auto run_slot = [&](PointMAE<float>& model, std::size_t slot) {
      Rng rng = Rng::derive(cfg.seed, {step, slot});
      const PointSet& raw = data[order[first + slot]].points;
      const PointSet pts = cfg.augment ? augment(raw, rng, cfg.aug) : raw;
      model.params().zero_grad();
      slot_loss[slot] = sample_loss_and_grad(model, pts, rng);
      auto& entries = model.params().entries();
      for (std::size_t p = 0; p < nparams; ++p) {
        auto& g = slot_grads[slot][p];
        if (entries[p].value.has_grad()) g.assign(entries[p].value.grad().begin(), entries[p].value.grad().end());
        else g.assign(entries[p].value.numel(), 0.0f);
      }
      model.params().zero_grad();
    };

    if (workers == 1) {
      for (std::size_t s = 0; s < B; ++s) run_slot(state.model, s);
    } else {
      std::atomic<std::size_t> next{0};
      std::exception_ptr failure;
      std::mutex failure_mu;
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&] {
          try {
            PointMAE<float> local = state.model.clone();
            for (std::size_t s = next++; s < B; s = next++) run_slot(local, s);
          } catch (...) {
            std::lock_guard<std::mutex> lock(failure_mu);
            if (!failure) failure = std::current_exception();
          }
        });
      for (auto& t : pool) t.join();
      if (failure) std::rethrow_exception(failure);
    }

    double loss = 0.0;
    for (float l : slot_loss) loss += l;
    loss /= static_cast<double>(B);
    if (!std::isfinite(loss))
      throw NumericError("non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) + ")");

    std::vector<std::vector<float>> grads(nparams);
    double sq = 0.0;
    for (std::size_t p = 0; p < nparams; ++p) {
      grads[p] = slot_grads[0][p];
      for (std::size_t s = 1; s < B; ++s)
        for (std::size_t i = 0; i < grads[p].size(); ++i) grads[p][i] += slot_grads[s][p][i];
      for (float& g : grads[p]) {
        g /= static_cast<float>(B);
        sq += static_cast<double>(g) * g;
      }
    }
    if (!std::isfinite(sq)) throw NumericError("non-finite gradient at step " + std::to_string(step));
    if (cfg.clip_norm > 0.0 && std::sqrt(sq) > cfg.clip_norm) {
      const float f = static_cast<float>(cfg.clip_norm / std::sqrt(sq));
      for (auto& g : grads)
        for (float& x : g) x *= f;
    }

    const double lr = lr_at(step, sched);
    adamw_step(state.model.params(), grads, state.opt, lr);
    state.step = step + 1;

    if (on_metric) {
      MetricRecord rec;
      rec.step = state.step;
      rec.epoch = epoch;
      rec.loss = loss;
      rec.lr = lr;
      rec.wall_ms = cfg.test_mode
                        ? 0.0
                        : std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      on_metric(rec);
    }
    if (on_checkpoint && ((cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) || state.step == total))
      on_checkpoint(state);
  }
}

template struct OptimizerState<float>;
template struct OptimizerState<double>;
template void adamw_step(ParamStore<float>&, const std::vector<std::vector<float>>&, OptimizerState<float>&, double);
template void adamw_step(ParamStore<double>&, const std::vector<std::vector<double>>&, OptimizerState<double>&, double);

}  // namespace pcmae
