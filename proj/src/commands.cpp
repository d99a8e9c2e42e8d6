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

#include "pcmae/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "pcmae/checkpoint.hpp"
#include "pcmae/errors.hpp"
#include "pcmae/masking.hpp"

namespace pcmae {

namespace fs = std::filesystem;

namespace {

constexpr const char* kEval = "eval";
constexpr const char* kRun = "run";

std::size_t default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

}  // namespace

// ---------------------------------------------------------------- config

void EvalConfig::validate() const {
  if (way < 2) throw ConfigError("eval: way must be >= 2");
  if (shot == 0) throw ConfigError("eval: shot must be >= 1");
  if (runs == 0) throw ConfigError("eval: runs must be >= 1");
  if (test_per_class == 0) throw ConfigError("eval: test_per_class must be >= 1");
  if (probe.iterations == 0) throw ConfigError("eval: probe_iterations must be >= 1");
  if (!(probe.lr > 0.0)) throw ConfigError("eval: probe_lr must be > 0");
  if (!(probe.weight_decay >= 0.0)) throw ConfigError("eval: probe_weight_decay must be >= 0");
  if (!(probe.tolerance >= 0.0)) throw ConfigError("eval: probe_tolerance must be >= 0");
}

void EvalConfig::to_ini(IniDocument& doc) const {
  doc.set(kEval, "way", std::to_string(way));
  doc.set(kEval, "shot", std::to_string(shot));
  doc.set(kEval, "runs", std::to_string(runs));
  doc.set(kEval, "test_per_class", std::to_string(test_per_class));
  doc.set(kEval, "probe_iterations", std::to_string(probe.iterations));
  doc.set(kEval, "probe_lr", format_double(probe.lr));
  doc.set(kEval, "probe_weight_decay", format_double(probe.weight_decay));
  doc.set(kEval, "probe_tolerance", format_double(probe.tolerance));
}

EvalConfig EvalConfig::from_ini(const IniDocument& doc, const EvalConfig& d) {
  EvalConfig c = d;
  c.way = doc.get_size(kEval, "way", d.way);
  c.shot = doc.get_size(kEval, "shot", d.shot);
  c.runs = doc.get_size(kEval, "runs", d.runs);
  c.test_per_class = doc.get_size(kEval, "test_per_class", d.test_per_class);
  c.probe.iterations = doc.get_size(kEval, "probe_iterations", d.probe.iterations);
  c.probe.lr = doc.get_double(kEval, "probe_lr", d.probe.lr);
  c.probe.weight_decay = doc.get_double(kEval, "probe_weight_decay", d.probe.weight_decay);
  c.probe.tolerance = doc.get_double(kEval, "probe_tolerance", d.probe.tolerance);
  return c;
}

RunConfig RunConfig::desk() {
  RunConfig c;
  c.model = ModelConfig::small();
  c.data.per_class = 64;
  c.data.points = 512;
  c.train.batch_size = 32;
  c.train.epochs = 60;
  c.train.warmup_epochs = 3;
  c.train.base_lr = 1e-3;
  c.train.min_lr = 1e-5;
  c.train.threads = c.finetune.threads = default_threads();
  return c;
}

RunConfig RunConfig::paper() {
  RunConfig c;
  c.model = ModelConfig::paper();
  c.data.points = 2048;
  c.train.batch_size = 128;
  c.train.epochs = 300;
  c.train.warmup_epochs = 10;
  c.train.base_lr = 1e-4;
  c.train.min_lr = 1e-6;
  c.finetune.epochs = 300;
  c.finetune.batch_size = 32;
  c.finetune.warmup_epochs = 10;
  c.train.threads = c.finetune.threads = default_threads();
  return c;
}

RunConfig RunConfig::profile(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper") return paper();
  throw ConfigError("unknown profile '" + name + "' (expected desk or paper)");
}

void RunConfig::validate() const {
  model.validate();
  data.validate();
  train.validate();
  finetune.validate();
  eval.validate();
  if (train.threads == 0) throw ConfigError("run: threads must be >= 1");
  if (data.points < model.counts.front())
    throw ConfigError("data.points (" + std::to_string(data.points) + ") is below the first scale count (" +
                      std::to_string(model.counts.front()) + ")");
}

IniDocument RunConfig::to_ini() const {
  IniDocument doc;
  doc.set(kRun, "seed", std::to_string(train.seed));
  doc.set(kRun, "threads", std::to_string(train.threads));
  doc.set(kRun, "test_mode", format_bool(train.test_mode));
  model.to_ini(doc);
  data.to_ini(doc);
  train.to_ini(doc);
  finetune.to_ini(doc);
  eval.to_ini(doc);
  return doc;
}

RunConfig RunConfig::from_ini(const IniDocument& doc, const RunConfig& d) {
  const IniDocument known = d.to_ini();
  for (const auto& s : doc.sections()) {
    bool section_known = false;
    for (const auto& ks : known.sections()) section_known = section_known || ks.name == s.name;
    if (!section_known) throw ConfigError("config: unknown section [" + s.name + "]");
    for (const auto& [k, v] : s.entries)
      if (!known.has(s.name, k)) throw ConfigError("config: unknown key " + s.name + "." + k);
  }
  RunConfig c;
  c.model = ModelConfig::from_ini(doc, d.model);
  c.data = DataConfig::from_ini(doc, d.data);
  c.train = TrainConfig::from_ini(doc, d.train);
  c.finetune = FinetuneConfig::from_ini(doc, d.finetune);
  c.eval = EvalConfig::from_ini(doc, d.eval);
  const std::uint64_t seed = doc.get_u64(kRun, "seed", d.train.seed);
  const std::size_t threads = doc.get_size(kRun, "threads", d.train.threads);
  c.train.seed = c.finetune.seed = c.eval.seed = seed;
  c.train.threads = c.finetune.threads = threads;
  c.train.test_mode = doc.get_bool(kRun, "test_mode", d.train.test_mode);
  return c;
}

std::vector<Override> parse_overrides(const std::vector<std::string>& tokens) {
  std::vector<Override> out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    if (t.rfind("--", 0) != 0) throw ConfigError("unexpected argument '" + t + "'");
    std::string key = t.substr(2), value;
    if (auto eq = key.find('='); eq != std::string::npos) {
      value = key.substr(eq + 1);
      key.resize(eq);
    } else {
      if (i + 1 >= tokens.size()) throw ConfigError("option " + t + " needs a value");
      value = tokens[++i];
    }
    const auto dot = key.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == key.size())
      throw ConfigError("unknown option '" + t + "'");
    out.emplace_back(key, value);
  }
  return out;
}

RunConfig resolve_config(const std::string& profile, const std::optional<fs::path>& config_path,
                         const std::vector<Override>& overrides) {
  const RunConfig defaults = RunConfig::profile(profile);
  IniDocument doc = config_path ? IniDocument::load(*config_path) : IniDocument{};
  for (const auto& [key, value] : overrides) {
    const auto dot = key.find('.');
    doc.set(key.substr(0, dot), key.substr(dot + 1), value);
  }
  RunConfig c = RunConfig::from_ini(doc, defaults);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- commands

namespace {

struct Options {
  std::string config;
  std::string profile = "desk";
  std::string out;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  bool test_mode = false;
  std::size_t epochs = 0;
  std::string checkpoint;
  bool random_init = false;
  std::string resume;
  std::string csv;
  std::string input;
  std::string data;
  bool no_ms_mask = false;
  std::size_t way = 0, shot = 0, runs = 0;
  std::string kinds;
  std::size_t per_class = 0;

  // set by CLI11 when the flag was given
  bool has_seed = false, has_threads = false, has_epochs = false, has_way = false, has_shot = false,
       has_runs = false, has_per_class = false;
};

struct Context {
  Options opt;
  RunConfig cfg;
  std::ostream& out;
  std::ostream& err;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << text;
  if (!f) throw ConfigError("write failed: " + path.string());
}

fs::path require_out_dir(const Options& o) {
  if (o.out.empty()) throw ConfigError("--out is required");
  std::error_code ec;
  fs::create_directories(o.out, ec);
  if (ec) throw ConfigError("cannot create " + o.out + ": " + ec.message());
  return fs::path(o.out);
}

std::string step_name(std::uint64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "step-%06llu.ckpt", static_cast<unsigned long long>(step));
  return buf;
}

// Epoch-count flag: keep the warmup strictly shorter than training.
void set_epochs(std::size_t& epochs, std::size_t& warmup, std::size_t value) {
  epochs = value;
  if (warmup >= epochs) warmup = epochs - 1;
}

void append_csv(const std::string& path, const std::string& row) {
  if (path.empty()) return;
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ofstream f(path, std::ios::app);
  if (!f) throw ConfigError("cannot open " + path);
  if (fresh) f << csv_header() << '\n';
  f << row << '\n';
}

struct Encoder {
  PointMAE<float> model;
  std::string source;  // "pretrained" or "random-init"
};

Encoder load_encoder(const Context& ctx) {
  const Options& o = ctx.opt;
  if (o.random_init && !o.checkpoint.empty()) throw ConfigError("--checkpoint and --random-init are exclusive");
  if (o.random_init) return {PointMAE<float>(ctx.cfg.model, ctx.cfg.train.seed), "random-init"};
  if (o.checkpoint.empty()) throw ConfigError("need --checkpoint PATH or --random-init");
  Checkpoint ckpt;
  try {
    ckpt = load_checkpoint(o.checkpoint);
  } catch (const ParseError& e) {
    throw ParseError(o.checkpoint + ": " + e.what(), e.position());
  }
  return {model_from_checkpoint(ckpt), "pretrained"};
}

std::vector<DatasetRecord> all_records(const Dataset& ds) {
  std::vector<DatasetRecord> all = ds.train;
  all.insert(all.end(), ds.val.begin(), ds.val.end());
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return all;
}

int cmd_pretrain(Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const fs::path dir = require_out_dir(ctx.opt);
  const Dataset ds = make_dataset(cfg.data);
  const std::size_t spe = steps_per_epoch(ds.train.size(), cfg.train.batch_size);

  std::optional<TrainState> state;
  if (!ctx.opt.resume.empty()) {
    const Checkpoint ckpt = load_checkpoint(ctx.opt.resume);
    if (!(ckpt.config == cfg.model)) throw ConfigError("--resume: checkpoint model config differs from the run config");
    state.emplace(TrainState::from_checkpoint(ckpt, cfg.train.adamw));
  } else {
    state.emplace(PointMAE<float>(cfg.model, cfg.train.seed), cfg.train.adamw);
  }
  write_text(dir / "config.ini", cfg.to_text());

  std::ofstream metrics(dir / "metrics.jsonl", ctx.opt.resume.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw ConfigError("cannot write " + (dir / "metrics.jsonl").string());
  ctx.err << "pretrain: " << ds.train.size() << " shapes, " << spe << " steps/epoch, "
          << parameter_count(cfg.model) << " parameters, " << cfg.train.threads << " threads\n";

  double last_loss = 0.0;
  auto on_metric = [&](const MetricRecord& m) {
    metrics << m.to_json() << '\n';
    metrics.flush();
    last_loss = m.loss;
    if (spe != 0 && m.step % spe == 0)
      ctx.err << "epoch " << m.epoch << " step " << m.step << " loss " << m.loss << " lr " << m.lr << '\n';
  };
  auto on_checkpoint = [&](const TrainState& s) {
    save_checkpoint(dir / step_name(s.step), s.to_checkpoint(cfg.train.seed, spe));
  };
  train(*state, ds.train, cfg.train, on_metric, on_checkpoint);
  save_checkpoint(dir / "final.ckpt", state->to_checkpoint(cfg.train.seed, spe));

  nlohmann::ordered_json j;
  j["command"] = "pretrain";
  j["steps"] = state->step;
  j["final_loss"] = last_loss;
  j["checkpoint"] = (dir / "final.ckpt").string();
  j["config_digest"] = cfg.digest();
  ctx.out << j.dump() << '\n';
  return kExitOk;
}

int cmd_probe(Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const Encoder enc = load_encoder(ctx);
  const Dataset ds = make_dataset(cfg.data);
  const FeatureSet tr = extract_features(enc.model, ds.train, cfg.train.threads);
  const FeatureSet te = extract_features(enc.model, ds.val, cfg.train.threads);
  const ProbeResult r = linear_probe(tr, te, ds.num_classes(), cfg.eval.probe);

  const std::string digest = cfg.digest();
  auto j = nlohmann::ordered_json::parse(r.to_json(digest));
  j["command"] = "probe";
  j["encoder"] = enc.source;
  j["classes"] = ds.class_names;
  ctx.out << j.dump() << '\n';
  append_csv(ctx.opt.csv, csv_row("probe-" + enc.source, r, digest));
  return kExitOk;
}

int cmd_fewshot(Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  const Encoder enc = load_encoder(ctx);
  const Dataset ds = make_dataset(cfg.data);
  const FeatureSet pool = extract_features(enc.model, all_records(ds), cfg.train.threads);
  const EvalConfig& e = cfg.eval;
  const FewShotResult r = few_shot_eval(pool, e.way, e.shot, e.runs, e.seed, e.test_per_class, e.probe);

  const std::string digest = cfg.digest();
  auto j = nlohmann::ordered_json::parse(r.to_json(digest));
  j["command"] = "fewshot";
  j["encoder"] = enc.source;
  ctx.out << j.dump() << '\n';

  ProbeResult row;
  row.accuracy = r.mean;
  row.num_train = e.way * e.shot;
  row.num_test = e.way * e.test_per_class;
  append_csv(ctx.opt.csv, csv_row("fewshot-" + std::to_string(e.way) + "w" + std::to_string(e.shot) + "s-" +
                                      enc.source,
                                  row, digest));
  return kExitOk;
}

int cmd_finetune(Context& ctx) {
  const RunConfig& cfg = ctx.cfg;
  Encoder enc = load_encoder(ctx);
  const Dataset ds = make_dataset(cfg.data);
  Classifier clf(std::move(enc.model), ds.num_classes(), cfg.finetune.hidden, cfg.finetune.seed);
  ctx.err << "finetune: " << ds.train.size() << " train / " << ds.val.size() << " val shapes, "
          << cfg.finetune.epochs << " epochs\n";
  const FinetuneResult r = finetune_classifier(clf, ds, cfg.finetune);

  const std::string digest = cfg.digest();
  auto j = nlohmann::ordered_json::parse(r.result.to_json(digest));
  j["command"] = "finetune";
  j["encoder"] = enc.source;
  j["epoch_loss"] = r.epoch_loss;
  if (!ctx.opt.out.empty()) {
    const fs::path dir = require_out_dir(ctx.opt);
    write_text(dir / "config.ini", cfg.to_text());
    save_checkpoint(dir / "classifier.ckpt", clf.to_checkpoint());
    j["checkpoint"] = (dir / "classifier.ckpt").string();
  }
  ctx.out << j.dump() << '\n';
  append_csv(ctx.opt.csv, csv_row("finetune-" + enc.source, r.result, digest));
  return kExitOk;
}

int cmd_gen_data(Context& ctx) {
  const fs::path dir = require_out_dir(ctx.opt);
  const Dataset ds = make_dataset(ctx.cfg.data);
  // Class directories are read back in sorted order; relabel to match.
  std::vector<std::string> names = ds.class_names;
  std::sort(names.begin(), names.end());
  std::map<int, int> relabel;
  for (std::size_t c = 0; c < ds.class_names.size(); ++c)
    relabel[static_cast<int>(c)] =
        static_cast<int>(std::find(names.begin(), names.end(), ds.class_names[c]) - names.begin());
  std::vector<DatasetRecord> records = all_records(ds);
  for (auto& r : records) r.label = relabel.at(r.label);
  write_dataset_dir(dir, names, records);

  nlohmann::ordered_json j;
  j["command"] = "gen-data";
  j["files"] = records.size();
  j["classes"] = names;
  j["out"] = dir.string();
  ctx.out << j.dump() << '\n';
  return kExitOk;
}

PointSet load_points(const std::string& path) {
  const std::string ext = fs::path(path).extension().string();
  if (ext == ".xyz" || ext == ".txt") return load_xyz(path);
  if (ext == ".pcb") return load_pcb(path);
  throw ConfigError("--input: unsupported extension '" + ext + "' (expected .xyz or .pcb)");
}

int cmd_inspect_mask(Context& ctx) {
  const ModelConfig& mc = ctx.cfg.model;
  if (ctx.opt.input.empty()) throw ConfigError("--input is required");
  const fs::path dir = require_out_dir(ctx.opt);
  const PointSet points = load_points(ctx.opt.input);
  if (points.size() < mc.counts.front())
    throw ConfigError("--input has " + std::to_string(points.size()) + " points; scale 1 needs " +
                      std::to_string(mc.counts.front()));

  const MultiScaleRepr repr = build_scales(points, mc.counts, mc.ks);
  Rng rng(ctx.opt.seed);
  const MaskAssignment mask = make_mask(repr, mc.mask_ratio, rng, mc.multi_scale_mask);

  ctx.out << "counts: " << join_sizes(mc.counts) << '\n';
  ctx.out << "mask: " << (mc.multi_scale_mask ? "multi-scale" : "independent") << ", ratio "
          << format_double(mc.mask_ratio) << '\n';
  for (std::size_t i = 1; i <= repr.num_scales(); ++i) {
    const PointSet& pts = repr.points(i);
    PointSet vis, msk;
    for (std::size_t p = 0; p < pts.size(); ++p) (mask.at(i)[p] ? vis : msk).coords.push_back(pts[p]);
    save_xyz(dir / ("scale" + std::to_string(i) + "_visible.xyz"), vis);
    save_xyz(dir / ("scale" + std::to_string(i) + "_masked.xyz"), msk);
    ctx.out << "scale " << i << ": " << pts.size() << " points, " << vis.size() << " visible, " << msk.size()
            << " masked\n";
  }
  ctx.out << "closure: " << (satisfies_closure(repr, mask) ? "OK" : "VIOLATED") << '\n';
  ctx.out << "minimality: " << (satisfies_minimality(repr, mask) ? "OK" : "VIOLATED") << '\n';
  return kExitOk;
}

using Handler = int (*)(Context&);

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"pcmae: multi-scale masked autoencoding for point clouds", "pcmae"};
  app.require_subcommand(1);
  Options o;
  std::map<CLI::App*, Handler> handlers;

  auto add = [&](const std::string& name, const std::string& desc, Handler h) {
    CLI::App* s = app.add_subcommand(name, desc);
    s->allow_extras();
    s->footer("Any config field can be overridden with --section.key VALUE.");
    s->add_option("--config", o.config, "INI config file")->check(CLI::ExistingFile);
    s->add_option("--profile", o.profile, "default profile")->check(CLI::IsMember({"desk", "paper"}));
    s->add_option("--seed", o.seed, "run seed")->each([&](const std::string&) { o.has_seed = true; });
    s->add_option("--threads", o.threads, "worker threads")->each([&](const std::string&) { o.has_threads = true; });
    s->add_flag("--test-mode", o.test_mode, "report wall_ms as 0 for byte-identical outputs");
    s->add_flag("--no-ms-mask", o.no_ms_mask, "mask every scale independently (ablation)");
    s->add_option("--data", o.data, "dataset directory or 'synthetic'");
    handlers[s] = h;
    return s;
  };

  CLI::App* pre = add("pretrain", "masked-autoencoder pretraining", cmd_pretrain);
  pre->add_option("--out", o.out, "output directory")->required();
  pre->add_option("--epochs", o.epochs)->each([&](const std::string&) { o.has_epochs = true; });
  pre->add_option("--resume", o.resume, "continue from a pretraining checkpoint");

  auto encoder_opts = [&](CLI::App* s) {
    s->add_option("--checkpoint", o.checkpoint, "pretrained checkpoint");
    s->add_flag("--random-init", o.random_init, "use an untrained encoder");
    s->add_option("--csv", o.csv, "append a result row to this CSV file");
  };
  CLI::App* probe = add("probe", "linear probe on frozen features", cmd_probe);
  encoder_opts(probe);
  CLI::App* few = add("fewshot", "K-way N-shot evaluation on frozen features", cmd_fewshot);
  encoder_opts(few);
  few->add_option("--way", o.way)->each([&](const std::string&) { o.has_way = true; });
  few->add_option("--shot", o.shot)->each([&](const std::string&) { o.has_shot = true; });
  few->add_option("--runs", o.runs)->each([&](const std::string&) { o.has_runs = true; });
  CLI::App* ft = add("finetune", "train a classification head (and encoder)", cmd_finetune);
  encoder_opts(ft);
  ft->add_option("--epochs", o.epochs)->each([&](const std::string&) { o.has_epochs = true; });
  ft->add_option("--out", o.out, "write the classifier checkpoint here");
  CLI::App* gen = add("gen-data", "write a synthetic dataset directory", cmd_gen_data);
  gen->add_option("--out", o.out, "output directory")->required();
  gen->add_option("--kinds", o.kinds, "comma-separated shape kinds");
  gen->add_option("--per-class", o.per_class)->each([&](const std::string&) { o.has_per_class = true; });
  CLI::App* insp = add("inspect-mask", "export per-scale visible/masked points", cmd_inspect_mask);
  insp->add_option("--input", o.input, "point cloud (.xyz or .pcb)")->required();
  insp->add_option("--out", o.out, "output directory")->required();

  std::vector<std::string> argv(args.rbegin(), args.rend());  // CLI11 consumes from the back
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    std::vector<Override> overrides = parse_overrides(sub->remaining());
    if (!o.data.empty()) overrides.emplace_back("data.source", o.data);
    if (!o.kinds.empty()) overrides.emplace_back("data.kinds", o.kinds);
    if (o.has_per_class) overrides.emplace_back("data.per_class", std::to_string(o.per_class));
    if (o.has_way) overrides.emplace_back("eval.way", std::to_string(o.way));
    if (o.has_shot) overrides.emplace_back("eval.shot", std::to_string(o.shot));
    if (o.has_runs) overrides.emplace_back("eval.runs", std::to_string(o.runs));
    if (o.no_ms_mask) overrides.emplace_back("model.multi_scale_mask", "false");
    if (o.test_mode) overrides.emplace_back("run.test_mode", "true");
    if (o.has_threads) overrides.emplace_back("run.threads", std::to_string(o.threads));
    if (o.has_seed) {
      // gen-data's seed names the dataset; everywhere else it names the run.
      overrides.emplace_back(sub->get_name() == "gen-data" ? "data.seed" : "run.seed", std::to_string(o.seed));
    }

    const std::optional<fs::path> path = o.config.empty() ? std::nullopt : std::optional<fs::path>(o.config);
    RunConfig cfg = resolve_config(o.profile, path, overrides);
    if (o.has_epochs) {
      if (o.epochs == 0) throw ConfigError("--epochs must be >= 1");
      if (sub->get_name() == "finetune") set_epochs(cfg.finetune.epochs, cfg.finetune.warmup_epochs, o.epochs);
      else set_epochs(cfg.train.epochs, cfg.train.warmup_epochs, o.epochs);
    }
    if (o.profile == "paper") err << "note: the paper profile is not expected to complete at desk scale\n";
    Context ctx{o, cfg, out, err};
    return handlers.at(sub)(ctx);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << " (at " << e.position() << ")\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
}

}  // namespace pcmae
