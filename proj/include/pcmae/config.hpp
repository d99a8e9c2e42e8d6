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

// INI-style configuration text: `[section]` headers and `key = value`
// lines; `#` and `;` start comment lines. Lists are comma separated.
// Section and key order is preserved so that serialized snapshots diff
// cleanly.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace pcmae {

class IniDocument {
 public:
  struct Section {
    std::string name;
    std::vector<std::pair<std::string, std::string>> entries;
  };

  /// Throws ConfigError naming the offending line.
  static IniDocument parse(std::string_view text);
  /// Throws ConfigError (with the path) when the file cannot be read.
  static IniDocument load(const std::filesystem::path& path);

  std::string to_string() const;

  bool has(std::string_view section, std::string_view key) const;
  std::optional<std::string> get(std::string_view section, std::string_view key) const;
  void set(std::string_view section, std::string_view key, std::string value);
  const std::vector<Section>& sections() const noexcept { return sections_; }

  // Typed accessors; a present but malformed value throws ConfigError.
  std::string get_string(std::string_view section, std::string_view key, std::string fallback) const;
  double get_double(std::string_view section, std::string_view key, double fallback) const;
  std::size_t get_size(std::string_view section, std::string_view key, std::size_t fallback) const;
  std::uint64_t get_u64(std::string_view section, std::string_view key, std::uint64_t fallback) const;
  bool get_bool(std::string_view section, std::string_view key, bool fallback) const;
  std::vector<std::size_t> get_size_list(std::string_view section, std::string_view key,
                                         std::vector<std::size_t> fallback) const;
  std::vector<double> get_double_list(std::string_view section, std::string_view key,
                                      std::vector<double> fallback) const;
  std::vector<std::string> get_string_list(std::string_view section, std::string_view key,
                                           std::vector<std::string> fallback) const;

 private:
  Section* find_section(std::string_view name);
  const Section* find_section(std::string_view name) const;
  std::vector<Section> sections_;
};

// Value formatting shared by every config section writer. Doubles use the
// shortest representation that round-trips.
std::string format_double(double v);
std::string format_bool(bool v);
std::string join_sizes(const std::vector<std::size_t>& v);
std::string join_doubles(const std::vector<double>& v);
std::string join_strings(const std::vector<std::string>& v);

/// FNV-1a 64-bit hash, hex encoded.
std::string digest_hex(std::string_view text);

}  // namespace pcmae
