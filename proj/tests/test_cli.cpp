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

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "pcmae/commands.hpp"
#include "pcmae/data.hpp"
#include "pcmae/errors.hpp"
#include "tempdir.hpp"

using namespace pcmae;
using namespace pcmae::testing;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

// Tiny pretraining run: 5 kinds x 6 shapes, 128 points, batch 4.
std::vector<std::string> tiny_pretrain(const fs::path& out, const std::string& seed) {
  return {"pretrain",          "--out", out.string(), "--seed", seed, "--threads", "1", "--test-mode",
          "--epochs",          "2",     "--data.per_class", "6", "--data.points", "128",
          "--train.batch_size", "4"};
}

std::size_t count_files(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) ++n;
  return n;
}

}  // namespace

TEST_CASE("overrides: parsing and rejection") {
  const auto ov = parse_overrides({"--train.base_lr", "0.01", "--model.heads=2"});
  REQUIRE(ov.size() == 2);
  CHECK(ov[0] == Override{"train.base_lr", "0.01"});
  CHECK(ov[1] == Override{"model.heads", "2"});
  CHECK_THROWS_AS(parse_overrides({"--nodot", "1"}), ConfigError);
  CHECK_THROWS_AS(parse_overrides({"--train.epochs"}), ConfigError);
  CHECK_THROWS_AS(parse_overrides({"stray"}), ConfigError);

  CHECK_THROWS_AS(resolve_config("desk", std::nullopt, {{"train.nonsense", "1"}}), ConfigError);
  CHECK_THROWS_AS(resolve_config("desk", std::nullopt, {{"nosection.key", "1"}}), ConfigError);
  CHECK_THROWS_AS(resolve_config("desk", std::nullopt, {{"model.heads", "three"}}), ConfigError);
  CHECK_THROWS_AS(resolve_config("desk", std::nullopt, {{"model.heads", "5"}}), ConfigError);  // 32 % 5 != 0
  CHECK_THROWS_AS(resolve_config("huge", std::nullopt, {}), ConfigError);
}

TEST_CASE("config: profiles, round trip through the snapshot text") {
  const RunConfig desk = RunConfig::desk();
  CHECK(desk.model == ModelConfig::small());
  CHECK_NOTHROW(desk.validate());
  const RunConfig paper = RunConfig::paper();
  CHECK(paper.model.counts == std::vector<std::size_t>{512, 256, 64});
  CHECK(paper.train.batch_size == 128);
  CHECK(paper.train.epochs == 300);
  CHECK_NOTHROW(paper.validate());

  RunConfig c = resolve_config("desk", std::nullopt, {{"run.seed", "77"}, {"eval.way", "3"}, {"data.noise", "0.02"}});
  CHECK(c.train.seed == 77);
  CHECK(c.finetune.seed == 77);
  CHECK(c.eval.seed == 77);
  const RunConfig back = RunConfig::from_ini(IniDocument::parse(c.to_text()), RunConfig::paper());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.digest() == c.digest());
}

TEST_CASE("cli: usage and config errors exit 2") {
  auto r = run({});
  CHECK(r.code == kExitConfig);
  r = run({"pretrain", "--out", "x", "--config", "/definitely/missing.ini"});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("/definitely/missing.ini") != std::string::npos);
  r = run({"probe", "--random-init", "--model.bogus", "1"});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("model.bogus") != std::string::npos);
  r = run({"probe"});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("--random-init") != std::string::npos);
  CHECK(run({"--help"}).code == kExitOk);
}

TEST_CASE("cli: pretrain writes checkpoint, metrics and snapshot; reruns are byte-identical") {
  TempDir tmp("cli_pretrain");
  auto r = run(tiny_pretrain(tmp / "a", "5"));
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(fs::exists(tmp / "a/final.ckpt"));
  CHECK(fs::exists(tmp / "a/config.ini"));
  const std::string metrics = read_bytes(tmp / "a/metrics.jsonl");
  std::istringstream lines(metrics);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["step"].get<std::size_t>() == ++n);
    CHECK(j["wall_ms"].get<double>() == 0.0);
  }
  CHECK(n == 12);  // 24 train shapes / batch 4 = 6 steps x 2 epochs
  CHECK(fs::exists(tmp / "a/step-000012.ckpt"));

  r = run(tiny_pretrain(tmp / "b", "5"));
  REQUIRE(r.code == kExitOk);
  CHECK(read_bytes(tmp / "b/metrics.jsonl") == metrics);
  CHECK(read_bytes(tmp / "b/final.ckpt") == read_bytes(tmp / "a/final.ckpt"));

  // The snapshot alone reproduces the run.
  r = run({"pretrain", "--out", (tmp / "c").string(), "--config", (tmp / "a/config.ini").string()});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(read_bytes(tmp / "c/metrics.jsonl") == metrics);
  CHECK(read_bytes(tmp / "c/final.ckpt") == read_bytes(tmp / "a/final.ckpt"));

  r = run(tiny_pretrain(tmp / "d", "6"));
  REQUIRE(r.code == kExitOk);
  CHECK(read_bytes(tmp / "d/metrics.jsonl") != metrics);
}

TEST_CASE("cli: resume continues the run bit-for-bit") {
  TempDir tmp("cli_resume");
  REQUIRE(run(tiny_pretrain(tmp / "full", "9")).code == kExitOk);
  auto args = tiny_pretrain(tmp / "half", "9");
  args.insert(args.end(), {"--train.checkpoint_every", "5"});
  REQUIRE(run(args).code == kExitOk);
  // Restart from the step-5 checkpoint in a fresh directory.
  auto resume = tiny_pretrain(tmp / "resumed", "9");
  resume.insert(resume.end(), {"--resume", (tmp / "half/step-000005.ckpt").string()});
  const auto r = run(resume);
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(read_bytes(tmp / "resumed/final.ckpt") == read_bytes(tmp / "full/final.ckpt"));
  const std::string full = read_bytes(tmp / "full/metrics.jsonl");
  const std::string tail = read_bytes(tmp / "resumed/metrics.jsonl");
  CHECK(full.size() > tail.size());
  CHECK(full.substr(full.size() - tail.size()) == tail);
}

TEST_CASE("cli: numeric failure exits 3") {
  TempDir tmp("cli_nan");
  auto args = tiny_pretrain(tmp / "x", "1");
  args.insert(args.end(), {"--train.base_lr", "1e30", "--train.min_lr", "1e29"});
  const auto r = run(args);
  CHECK(r.code == kExitNumeric);
  CHECK(r.err.find("non-finite") != std::string::npos);
}

TEST_CASE("cli: probe with random init and with a checkpoint; corrupted magic") {
  TempDir tmp("cli_probe");
  REQUIRE(run(tiny_pretrain(tmp / "p", "2")).code == kExitOk);
  const std::vector<std::string> data{"--data.per_class", "6", "--data.points", "128", "--threads", "1"};

  auto args = std::vector<std::string>{"probe", "--random-init", "--csv", (tmp / "r.csv").string()};
  args.insert(args.end(), data.begin(), data.end());
  auto r = run(args);
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  auto j = nlohmann::json::parse(r.out);
  CHECK(j["encoder"] == "random-init");
  CHECK(j["num_train"].get<int>() + j["num_test"].get<int>() == 30);
  CHECK(j["accuracy"].get<double>() >= 0.0);

  args = {"probe", "--checkpoint", (tmp / "p/final.ckpt").string(), "--csv", (tmp / "r.csv").string()};
  args.insert(args.end(), data.begin(), data.end());
  r = run(args);
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(nlohmann::json::parse(r.out)["encoder"] == "pretrained");

  const std::string csv = read_bytes(tmp / "r.csv");
  CHECK(csv.rfind(csv_header() + "\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
  CHECK(csv.find("probe-random-init,") != std::string::npos);
  CHECK(csv.find("probe-pretrained,") != std::string::npos);

  std::string bytes = read_bytes(tmp / "p/final.ckpt");
  bytes[0] = 'X';
  std::ofstream(tmp / "bad.ckpt", std::ios::binary) << bytes;
  r = run({"probe", "--checkpoint", (tmp / "bad.ckpt").string()});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("bad magic") != std::string::npos);
}

TEST_CASE("cli: 10-way 20-shot few-shot reports mean and std") {
  TempDir tmp("cli_fewshot");
  // Ten classes: every synthetic kind with and without heavy noise.
  std::vector<std::string> names;
  std::vector<DatasetRecord> records;
  for (std::size_t k = 0; k < kNumShapeKinds; ++k)
    for (int noisy = 0; noisy < 2; ++noisy) {
      names.push_back(shape_kind_name(static_cast<ShapeKind>(k)) + (noisy ? "-noisy" : "-clean"));
      for (std::uint64_t i = 0; i < 40; ++i) {
        SyntheticShapeSpec s;
        s.kind = static_cast<ShapeKind>(k);
        s.noise = noisy ? 0.08 : 0.0;
        s.count = 128;
        s.seed = 1000 * k + 100 * noisy + i;
        DatasetRecord rec = gen_synthetic(s);
        rec.label = static_cast<int>(names.size() - 1);
        rec.id = names.back() + "-" + std::to_string(i);
        records.push_back(std::move(rec));
      }
    }
  write_dataset_dir(tmp / "ds", names, records);

  const auto r = run({"fewshot", "--random-init", "--data", (tmp / "ds").string(), "--data.points", "128",
                      "--way", "10", "--shot", "20", "--runs", "10", "--threads", "1", "--seed", "4"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j["way"] == 10);
  CHECK(j["shot"] == 20);
  CHECK(j["runs"] == 10);
  CHECK(j.contains("mean"));
  CHECK(j.contains("std"));
  CHECK(j["accuracies"].size() == 10);
  CHECK(j["mean"].get<double>() > 0.1);  // above 10-way chance

  // 5 synthetic kinds cannot supply 10 ways.
  CHECK(run({"fewshot", "--random-init", "--way", "10", "--data.per_class", "40", "--data.points", "128"}).code ==
        kExitConfig);
}

TEST_CASE("cli: finetune smoke run") {
  TempDir tmp("cli_finetune");
  const auto r = run({"finetune", "--random-init", "--epochs", "1", "--data.per_class", "6", "--data.points", "128",
                      "--finetune.batch_size", "4", "--finetune.hidden", "16", "--threads", "1", "--out",
                      (tmp / "ft").string()});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  const auto j = nlohmann::json::parse(r.out);
  CHECK(j["epoch_loss"].size() == 1);
  CHECK(j["num_test"].get<int>() > 0);
  CHECK(fs::exists(tmp / "ft/classifier.ckpt"));
  CHECK(fs::exists(tmp / "ft/config.ini"));
}

TEST_CASE("cli: gen-data layout, determinism, unknown kind") {
  TempDir tmp("cli_gen");
  const std::vector<std::string> base{"gen-data", "--kinds", "sphere,cube,cylinder,torus,plane", "--per-class", "8",
                                      "--seed", "11", "--data.points", "256", "--out"};
  auto a = base, b = base;
  a.push_back((tmp / "a").string());
  b.push_back((tmp / "b").string());
  REQUIRE(run(a).code == kExitOk);
  REQUIRE(run(b).code == kExitOk);
  CHECK(count_files(tmp / "a", ".pcb") == 40);
  CHECK(fs::exists(tmp / "a/labels.tsv"));
  for (const auto& e : fs::recursive_directory_iterator(tmp / "a")) {
    if (!e.is_regular_file()) continue;
    const fs::path twin = tmp / "b" / fs::relative(e.path(), tmp / "a");
    CHECK(read_bytes(e.path()) == read_bytes(twin));
  }

  // The directory loads back with the same class structure.
  DataConfig dc;
  dc.source = (tmp / "a").string();
  dc.points = 256;
  const Dataset ds = make_dataset(dc);
  CHECK(ds.num_classes() == 5);
  CHECK(ds.train.size() + ds.val.size() == 40);
  for (const auto& rec : ds.train) CHECK(rec.id.rfind(ds.class_names.at(rec.label), 0) == 0);

  auto bad = base;
  bad[2] = "sphere,blob";
  bad.push_back((tmp / "c").string());
  const auto r = run(bad);
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("blob") != std::string::npos);
}

TEST_CASE("cli: inspect-mask exports per-scale sets and checks closure") {
  TempDir tmp("cli_inspect");
  SyntheticShapeSpec s;
  s.kind = ShapeKind::torus;
  s.count = 2048;
  s.seed = 21;
  save_xyz(tmp / "in.xyz", gen_synthetic(s).points);
  const std::string in = (tmp / "in.xyz").string();

  auto r = run({"inspect-mask", "--input", in, "--out", (tmp / "m").string(), "--seed", "1"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(r.out.find("closure: OK") != std::string::npos);
  CHECK(r.out.find("counts: 64, 32, 8") != std::string::npos);
  CHECK(count_files(tmp / "m", ".xyz") == 6);
  CHECK(load_xyz(tmp / "m/scale3_visible.xyz").size() == 2);  // 8 - floor(0.8 * 8)

  r = run({"inspect-mask", "--profile", "paper", "--input", in, "--out", (tmp / "p").string(), "--seed", "1"});
  REQUIRE_MESSAGE(r.code == kExitOk, r.err);
  CHECK(r.out.find("counts: 512, 256, 64") != std::string::npos);
  CHECK(r.out.find("scale 3: 64 points, 13 visible, 51 masked") != std::string::npos);
  CHECK(r.out.find("closure: OK") != std::string::npos);

  // Fixed seed on which independent masks break closure.
  r = run({"inspect-mask", "--profile", "paper", "--no-ms-mask", "--input", in, "--out", (tmp / "n").string(),
           "--seed", "1"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("closure: VIOLATED") != std::string::npos);

  r = run({"inspect-mask", "--input", (tmp / "missing.xyz").string(), "--out", (tmp / "x").string()});
  CHECK(r.code == kExitConfig);
}
