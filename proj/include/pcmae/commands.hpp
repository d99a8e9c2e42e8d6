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

// Command-line front end. Every command is reachable through run_cli so the
// tests can drive the exact code path the binary uses.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pcmae/config.hpp"
#include "pcmae/data.hpp"
#include "pcmae/eval.hpp"
#include "pcmae/model.hpp"
#include "pcmae/training.hpp"

namespace pcmae {

enum ExitCode : int { kExitOk = 0, kExitInternal = 1, kExitConfig = 2, kExitNumeric = 3 };

struct EvalConfig {
  std::size_t way = 5;
  std::size_t shot = 10;
  std::size_t runs = 10;
  std::size_t test_per_class = 20;
  std::uint64_t seed = 0;
  ProbeConfig probe;

  void validate() const;
  void to_ini(IniDocument& doc) const;
  static EvalConfig from_ini(const IniDocument& doc, const EvalConfig& defaults);
};

struct RunConfig {
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  FinetuneConfig finetune;
  EvalConfig eval;

  /// Small model, small synthetic set; finishes in minutes on one core.
  static RunConfig desk();
  /// Published pretraining settings. Valid, but not expected to complete at
  /// desk scale.
  static RunConfig paper();
  static RunConfig profile(const std::string& name);

  void validate() const;
  IniDocument to_ini() const;
  std::string to_text() const { return to_ini().to_string(); }
  /// Unknown sections or keys are rejected.
  static RunConfig from_ini(const IniDocument& doc, const RunConfig& defaults);
  std::string digest() const { return digest_hex(to_text()); }
};

using Override = std::pair<std::string, std::string>;  // "section.key", value

/// profile defaults <- config file <- overrides, then validated.
RunConfig resolve_config(const std::string& profile, const std::optional<std::filesystem::path>& config_path,
                         const std::vector<Override>& overrides);

/// Parses "--section.key value" / "--section.key=value" tokens; anything else
/// is a ConfigError.
std::vector<Override> parse_overrides(const std::vector<std::string>& tokens);

/// args excludes the program name. Results go to out, logs and errors to err.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pcmae
