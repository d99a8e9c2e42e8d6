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

#include "pcmae/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <thread>

#include <json.hpp>

#include "pcmae/errors.hpp"

namespace pcmae {

namespace {

constexpr const char* kSection = "finetune";
constexpr std::uint64_t kFinetuneShuffle = 0x46494e45ULL;

// Runs fn(worker_state, i) for i in [0, n) across `threads` workers.
// make_state() builds each worker's private state.
template <typename State>
void parallel_for(std::size_t n, std::size_t threads, const std::function<State()>& make_state,
                  const std::function<void(State&, std::size_t)>& fn) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, n));
  if (workers == 1) {
    State s = make_state();
    for (std::size_t i = 0; i < n; ++i) fn(s, i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      try {
        State s = make_state();
        for (std::size_t i = next++; i < n; i = next++) fn(s, i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

void init_linear(ParamStore<float>& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng) {
  Tensor<float> w = store.add(prefix + ".w", {in, out});
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  for (float& x : w.data()) x = static_cast<float>(rng.uniform(-bound, bound));
  store.add(prefix + ".b", {out});
}

}  // namespace

// ---------------------------------------------------------------- features

FeatureSet extract_features(const PointMAE<float>& model, const std::vector<DatasetRecord>& records,
                            std::size_t threads) {
  FeatureSet fs;
  fs.x.resize(records.size());
  fs.y.resize(records.size());
  parallel_for<int>(
      records.size(), threads, [] { return 0; },
      [&](int&, std::size_t i) {
        const Tensor<float> f = model.extract_global_feature(records[i].points);
        fs.x[i].assign(f.data().begin(), f.data().end());
        fs.y[i] = records[i].label;
      });
  return fs;
}

// ---------------------------------------------------------------- probe

ProbeResult score(const std::vector<int>& truth, const std::vector<int>& predicted, std::size_t k,
                  std::size_t num_train) {
  if (truth.size() != predicted.size()) throw ContractError("score: size mismatch");
  ProbeResult r;
  r.num_train = num_train;
  r.num_test = truth.size();
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    r.confusion.at(static_cast<std::size_t>(truth[i])).at(static_cast<std::size_t>(predicted[i])) += 1;
    correct += truth[i] == predicted[i];
  }
  r.accuracy = truth.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(truth.size());
  r.per_class.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t row = std::accumulate(r.confusion[c].begin(), r.confusion[c].end(), std::size_t{0});
    r.per_class[c] = row ? static_cast<double>(r.confusion[c][c]) / static_cast<double>(row) : 0.0;
  }
  return r;
}

ProbeResult linear_probe(const FeatureSet& train, const FeatureSet& test, std::size_t K, const ProbeConfig& cfg) {
  const std::size_t M = train.size();
  if (K < 2) throw ConfigError("linear probe: need at least 2 classes");
  if (M < K) throw ConfigError("linear probe: " + std::to_string(M) + " training samples for " + std::to_string(K) + " classes");
  const std::size_t C = train.x.front().size();
  for (const auto& set : {&train, &test})
    for (std::size_t i = 0; i < set->size(); ++i) {
      if (set->x[i].size() != C) throw DimensionError("linear probe: inconsistent feature width");
      if (set->y[i] < 0 || static_cast<std::size_t>(set->y[i]) >= K) throw ConfigError("linear probe: label out of range");
    }
  if (std::all_of(train.y.begin(), train.y.end(), [&](int y) { return y == train.y.front(); }))
    throw ConfigError("linear probe: training labels cover a single class");

  std::vector<double> mu(C, 0.0), sd(C, 0.0);
  for (const auto& x : train.x)
    for (std::size_t j = 0; j < C; ++j) mu[j] += x[j];
  for (double& v : mu) v /= static_cast<double>(M);
  for (const auto& x : train.x)
    for (std::size_t j = 0; j < C; ++j) sd[j] += (x[j] - mu[j]) * (x[j] - mu[j]);
  for (double& v : sd) {
    v = std::sqrt(v / static_cast<double>(M));
    if (v < 1e-12) v = 1.0;
  }
  auto standardize = [&](const FeatureSet& s) {
    std::vector<double> z(s.size() * C);
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t j = 0; j < C; ++j) z[i * C + j] = (s.x[i][j] - mu[j]) / sd[j];
    return z;
  };
  const std::vector<double> X = standardize(train);

  std::vector<double> W(C * K, 0.0), b(K, 0.0), gW(C * K), gb(K), p(K);
  auto logits_of = [&](const double* x, std::vector<double>& out) {
    for (std::size_t c = 0; c < K; ++c) out[c] = b[c];
    for (std::size_t j = 0; j < C; ++j) {
      const double xj = x[j];
      const double* wr = &W[j * K];
      for (std::size_t c = 0; c < K; ++c) out[c] += xj * wr[c];
    }
  };
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    std::fill(gW.begin(), gW.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i = 0; i < M; ++i) {
      const double* x = &X[i * C];
      logits_of(x, p);
      const double mx = *std::max_element(p.begin(), p.end());
      double z = 0;
      for (double& v : p) z += (v = std::exp(v - mx));
      for (double& v : p) v /= z;
      p[static_cast<std::size_t>(train.y[i])] -= 1.0;
      for (std::size_t c = 0; c < K; ++c) gb[c] += p[c];
      for (std::size_t j = 0; j < C; ++j) {
        double* g = &gW[j * K];
        for (std::size_t c = 0; c < K; ++c) g[c] += x[j] * p[c];
      }
    }
    const double inv = 1.0 / static_cast<double>(M);
    double gmax = 0;
    for (std::size_t q = 0; q < W.size(); ++q) {
      const double g = gW[q] * inv + cfg.weight_decay * W[q];
      gmax = std::max(gmax, std::abs(g));
      W[q] -= cfg.lr * g;
    }
    for (std::size_t c = 0; c < K; ++c) {
      gmax = std::max(gmax, std::abs(gb[c] * inv));
      b[c] -= cfg.lr * gb[c] * inv;
    }
    if (gmax < cfg.tolerance) break;  // converged
  }

  const std::vector<double> Z = standardize(test);
  std::vector<int> pred(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    logits_of(&Z[i * C], p);
    pred[i] = static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  }
  return score(test.y, pred, K, M);
}

std::string ProbeResult::to_json(const std::string& config_digest) const {
  nlohmann::ordered_json j;
  j["accuracy"] = accuracy;
  j["per_class"] = per_class;
  j["confusion"] = confusion;
  j["num_train"] = num_train;
  j["num_test"] = num_test;
  j["config_digest"] = config_digest;
  return j.dump();
}

// ---------------------------------------------------------------- few-shot

FewShotEpisode sample_episode(const std::vector<int>& labels, std::size_t way, std::size_t shot,
                              std::size_t test_per_class, Rng& rng) {
  if (way < 2) throw ConfigError("few-shot: way must be >= 2");
  if (shot == 0) throw ConfigError("few-shot: shot must be >= 1");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<int> eligible;
  for (const auto& [c, ids] : by_class)
    if (ids.size() >= shot + test_per_class) eligible.push_back(c);
  if (eligible.size() < way)
    throw ConfigError("few-shot: only " + std::to_string(eligible.size()) + " classes have " +
                      std::to_string(shot + test_per_class) + " samples, need " + std::to_string(way));
  FewShotEpisode ep;
  for (std::size_t i = 0; i < way; ++i) {
    std::swap(eligible[i], eligible[i + rng.below(eligible.size() - i)]);
    ep.classes.push_back(eligible[i]);
  }
  for (int c : ep.classes) {
    std::vector<std::size_t> ids = by_class[c];
    for (std::size_t i = 0; i < shot + test_per_class; ++i) {
      std::swap(ids[i], ids[i + rng.below(ids.size() - i)]);
      (i < shot ? ep.train_ids : ep.test_ids).push_back(ids[i]);
    }
  }
  return ep;
}

FewShotResult few_shot_eval(const FeatureSet& pool, std::size_t way, std::size_t shot, std::size_t runs,
                            std::uint64_t seed, std::size_t test_per_class, const ProbeConfig& cfg) {
  if (runs == 0) throw ConfigError("few-shot: runs must be >= 1");
  FewShotResult res;
  res.way = way;
  res.shot = shot;
  res.runs = runs;
  for (std::size_t r = 0; r < runs; ++r) {
    Rng rng = Rng::derive(seed, {r});
    const FewShotEpisode ep = sample_episode(pool.y, way, shot, test_per_class, rng);
    std::map<int, int> remap;
    for (std::size_t i = 0; i < ep.classes.size(); ++i) remap[ep.classes[i]] = static_cast<int>(i);
    auto subset = [&](const std::vector<std::size_t>& ids) {
      FeatureSet s;
      for (std::size_t i : ids) {
        s.x.push_back(pool.x[i]);
        s.y.push_back(remap.at(pool.y[i]));
      }
      return s;
    };
    res.accuracies.push_back(linear_probe(subset(ep.train_ids), subset(ep.test_ids), way, cfg).accuracy);
  }
  for (double a : res.accuracies) res.mean += a;
  res.mean /= static_cast<double>(runs);
  for (double a : res.accuracies) res.stddev += (a - res.mean) * (a - res.mean);
  res.stddev = std::sqrt(res.stddev / static_cast<double>(runs));
  return res;
}

std::string FewShotResult::to_json(const std::string& config_digest) const {
  nlohmann::ordered_json j;
  j["way"] = way;
  j["shot"] = shot;
  j["runs"] = runs;
  j["mean"] = mean;
  j["std"] = stddev;
  j["accuracies"] = accuracies;
  j["config_digest"] = config_digest;
  return j.dump();
}

// ---------------------------------------------------------------- fine-tuning

void FinetuneConfig::validate() const {
  if (epochs == 0) throw ConfigError("finetune: epochs must be >= 1");
  if (batch_size == 0) throw ConfigError("finetune: batch_size must be >= 1");
  if (warmup_epochs >= epochs) throw ConfigError("finetune: warmup_epochs must be < epochs");
  if (!(base_lr > 0.0) || !(min_lr >= 0.0 && min_lr <= base_lr)) throw ConfigError("finetune: bad learning rates");
  if (!(weight_decay >= 0.0)) throw ConfigError("finetune: weight_decay must be >= 0");
  if (hidden == 0) throw ConfigError("finetune: hidden must be >= 1");
  if (threads == 0) throw ConfigError("finetune: threads must be >= 1");
}

void FinetuneConfig::to_ini(IniDocument& doc) const {
  doc.set(kSection, "epochs", std::to_string(epochs));
  doc.set(kSection, "batch_size", std::to_string(batch_size));
  doc.set(kSection, "warmup_epochs", std::to_string(warmup_epochs));
  doc.set(kSection, "base_lr", format_double(base_lr));
  doc.set(kSection, "min_lr", format_double(min_lr));
  doc.set(kSection, "weight_decay", format_double(weight_decay));
  doc.set(kSection, "hidden", std::to_string(hidden));
  doc.set(kSection, "freeze_encoder", format_bool(freeze_encoder));
  doc.set(kSection, "augment", format_bool(augment));
}

FinetuneConfig FinetuneConfig::from_ini(const IniDocument& doc, const FinetuneConfig& d) {
  FinetuneConfig c = d;
  c.epochs = doc.get_size(kSection, "epochs", d.epochs);
  c.batch_size = doc.get_size(kSection, "batch_size", d.batch_size);
  c.warmup_epochs = doc.get_size(kSection, "warmup_epochs", d.warmup_epochs);
  c.base_lr = doc.get_double(kSection, "base_lr", d.base_lr);
  c.min_lr = doc.get_double(kSection, "min_lr", d.min_lr);
  c.weight_decay = doc.get_double(kSection, "weight_decay", d.weight_decay);
  c.hidden = doc.get_size(kSection, "hidden", d.hidden);
  c.freeze_encoder = doc.get_bool(kSection, "freeze_encoder", d.freeze_encoder);
  c.augment = doc.get_bool(kSection, "augment", d.augment);
  return c;
}

Classifier::Classifier(PointMAE<float> encoder, std::size_t num_classes, std::size_t hidden, std::uint64_t seed)
    : encoder_(std::move(encoder)) {
  if (num_classes < 2) throw ConfigError("classifier: need at least 2 classes");
  Rng rng(seed);
  const std::size_t c = encoder_.global_feature_dim();
  init_linear(head_, "cls.l1", c, hidden, rng);
  init_linear(head_, "cls.l2", hidden, hidden, rng);
  init_linear(head_, "cls.l3", hidden, num_classes, rng);
}

Classifier::Classifier(PointMAE<float> encoder, ParamStore<float> head)
    : encoder_(std::move(encoder)), head_(std::move(head)) {
  for (const char* n : {"cls.l1.w", "cls.l1.b", "cls.l2.w", "cls.l2.b", "cls.l3.w", "cls.l3.b"})
    if (!head_.contains(n)) throw ConfigError(std::string("classifier head is missing '") + n + "'");
  if (head_.get("cls.l1.w").dim(0) != encoder_.global_feature_dim())
    throw ConfigError("classifier head input width does not match the encoder");
}

std::size_t Classifier::num_classes() const { return head_.get("cls.l3.b").numel(); }

Tensor<float> Classifier::logits(const PointSet& points) const {
  const Tensor<float> f = encoder_.extract_global_feature(points);
  auto lin = [&](const Tensor<float>& x, const std::string& p) {
    return linear(x, head_.get(p + ".w"), head_.get(p + ".b"));
  };
  return lin(gelu(lin(gelu(lin(reshape(f, {1, f.numel()}), "cls.l1")), "cls.l2")), "cls.l3");
}

int Classifier::predict(const PointSet& points) const {
  const Tensor<float> l = logits(points);
  return static_cast<int>(std::max_element(l.data().begin(), l.data().end()) - l.data().begin());
}

Checkpoint Classifier::to_checkpoint() const {
  Checkpoint c;
  c.config = encoder_.config();
  c.meta["num_classes"] = std::to_string(num_classes());
  put_params(c, encoder_.params());
  put_params(c, head_);
  return c;
}

Classifier Classifier::from_checkpoint(const Checkpoint& ckpt) {
  PointMAE<float> enc = model_from_checkpoint(ckpt);
  const CheckpointRecord* l1 = ckpt.find("cls.l1.b");
  const CheckpointRecord* l3 = ckpt.find("cls.l3.b");
  if (l1 == nullptr || l3 == nullptr) throw ConfigError("checkpoint has no classification head");
  Classifier clf(std::move(enc), l3->data.size(), l1->data.size(), 0);
  get_params(ckpt, clf.head_);
  return clf;
}

namespace {

std::vector<Tensor<float>> trainable(Classifier& clf, bool freeze) {
  std::vector<Tensor<float>> out;
  if (!freeze)
    for (auto& e : clf.encoder().params().entries()) out.push_back(e.value);
  for (auto& e : clf.head().entries()) out.push_back(e.value);
  return out;
}

}  // namespace

FinetuneResult finetune_classifier(Classifier& clf, const Dataset& ds, const FinetuneConfig& cfg) {
  cfg.validate();
  if (clf.num_classes() != ds.num_classes())
    throw ConfigError("classifier has " + std::to_string(clf.num_classes()) + " outputs, dataset " +
                      std::to_string(ds.num_classes()) + " classes");
  const std::size_t B = cfg.batch_size;
  const std::size_t spe = ds.train.size() / B;
  if (spe == 0) throw ConfigError("finetune: fewer training samples than one batch");
  Schedule sched;
  sched.base_lr = cfg.base_lr;
  sched.min_lr = cfg.min_lr;
  sched.warmup_epochs = cfg.warmup_epochs;
  sched.total_epochs = cfg.epochs;
  sched.steps_per_epoch = spe;

  // Freezing turns off gradient tracking for the encoder, so its forward
  // pass records nothing and its parameters stay untouched.
  if (cfg.freeze_encoder) clf.encoder().params().set_requires_grad(false);
  struct Restore {
    Classifier& c;
    ~Restore() { c.encoder().params().set_requires_grad(true); }
  } restore{clf};

  ParamStore<float> all;
  if (!cfg.freeze_encoder)
    for (auto& e : clf.encoder().params().entries()) all.adopt(e.name, e.value, e.decay);
  for (auto& e : clf.head().entries()) all.adopt(e.name, e.value, e.decay);
  AdamWConfig hyper;
  hyper.weight_decay = cfg.weight_decay;
  auto opt = OptimizerState<float>::for_params(all, hyper);
  const std::size_t np = all.size();

  FinetuneResult out;
  std::vector<std::vector<std::vector<float>>> slot_grads(B, std::vector<std::vector<float>>(np));
  std::vector<float> slot_loss(B);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(ds.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuf = Rng::derive(cfg.seed, {kFinetuneShuffle, epoch});
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuf.below(i)]);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < spe; ++b) {
      const std::uint64_t step = epoch * spe + b;
      // A single worker trains clf in place; otherwise each worker owns a copy.
      using Worker = std::optional<Classifier>;
      parallel_for<Worker>(
          B, cfg.threads,
          [&]() -> Worker {
            if (cfg.threads <= 1) return std::nullopt;
            return clf.clone();
          },
          [&](Worker& own, std::size_t slot) {
            Classifier& model = own ? *own : clf;
            const DatasetRecord& rec = ds.train[order[b * B + slot]];
            Rng rng = Rng::derive(cfg.seed, {step, slot});
            const PointSet pts = cfg.augment ? augment(rec.points, rng) : rec.points;
            auto params = trainable(model, cfg.freeze_encoder);
            for (auto& t : params) t.zero_grad();
            {
              Tape<float> tape;
              TapeScope<float> scope(tape);
              const int label = rec.label;
              Tensor<float> loss = softmax_cross_entropy(model.logits(pts), std::span<const int>(&label, 1));
              tape.backward(loss);
              slot_loss[slot] = loss.item();
            }
            for (std::size_t p = 0; p < np; ++p) {
              auto& g = slot_grads[slot][p];
              if (params[p].has_grad()) g.assign(params[p].grad().begin(), params[p].grad().end());
              else g.assign(params[p].numel(), 0.0f);
              params[p].zero_grad();
            }
          });
      double loss = 0.0;
      for (float l : slot_loss) loss += l;
      loss /= static_cast<double>(B);
      if (!std::isfinite(loss)) throw NumericError("non-finite fine-tuning loss at step " + std::to_string(step));
      epoch_loss += loss;
      std::vector<std::vector<float>> grads(np);
      for (std::size_t p = 0; p < np; ++p) {
        grads[p] = slot_grads[0][p];
        for (std::size_t s = 1; s < B; ++s)
          for (std::size_t i = 0; i < grads[p].size(); ++i) grads[p][i] += slot_grads[s][p][i];
        for (float& g : grads[p]) g /= static_cast<float>(B);
      }
      adamw_step(all, grads, opt, lr_at(step, sched));
    }
    out.epoch_loss.push_back(epoch_loss / static_cast<double>(spe));
  }

  std::vector<int> truth(ds.val.size()), pred(ds.val.size());
  parallel_for<int>(
      ds.val.size(), cfg.threads, [] { return 0; },
      [&](int&, std::size_t i) {
        truth[i] = ds.val[i].label;
        pred[i] = clf.predict(ds.val[i].points);
      });
  out.result = score(truth, pred, ds.num_classes(), ds.train.size());
  return out;
}

std::string csv_header() { return "experiment,accuracy,num_train,num_test,config_digest"; }

std::string csv_row(const std::string& experiment, const ProbeResult& r, const std::string& config_digest) {
  return experiment + "," + format_double(r.accuracy) + "," + std::to_string(r.num_train) + "," +
         std::to_string(r.num_test) + "," + config_digest;
}

}  // namespace pcmae
