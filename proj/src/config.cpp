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

#include "pcmae/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "pcmae/errors.hpp"

namespace pcmae {

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::string item;
  std::istringstream is(v);
  while (std::getline(is, item, ',')) out.push_back(trim(item));
  return out;
}

[[noreturn]] void bad_value(std::string_view section, std::string_view key, const std::string& value,
                            const char* expected) {
  throw ConfigError("config " + std::string(section) + "." + std::string(key) + " = '" + value +
                    "' is not " + expected);
}

double parse_double(std::string_view section, std::string_view key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) bad_value(section, key, v, "a number");
    return d;
  } catch (const std::logic_error&) {
    bad_value(section, key, v, "a number");
  }
}

std::uint64_t parse_u64(std::string_view section, std::string_view key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    bad_value(section, key, v, "a non-negative integer");
  return out;
}

}  // namespace

IniDocument IniDocument::parse(std::string_view text) {
  IniDocument doc;
  std::istringstream is{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  std::string current;
  while (std::getline(is, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3)
        throw ConfigError("config line " + std::to_string(line_no) + ": malformed section header");
      current = trim(std::string_view(line).substr(1, line.size() - 2));
      if (doc.find_section(current) == nullptr) doc.sections_.push_back({current, {}});
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    if (current.empty())
      throw ConfigError("config line " + std::to_string(line_no) + ": key outside of a section");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    doc.set(current, key, trim(std::string_view(line).substr(eq + 1)));
  }
  return doc;
}

IniDocument IniDocument::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string IniDocument::to_string() const {
  std::ostringstream os;
  bool first = true;
  for (const auto& s : sections_) {
    if (!first) os << '\n';
    first = false;
    os << '[' << s.name << "]\n";
    for (const auto& [k, v] : s.entries) os << k << " = " << v << '\n';
  }
  return os.str();
}

IniDocument::Section* IniDocument::find_section(std::string_view name) {
  for (auto& s : sections_)
    if (s.name == name) return &s;
  return nullptr;
}

const IniDocument::Section* IniDocument::find_section(std::string_view name) const {
  for (const auto& s : sections_)
    if (s.name == name) return &s;
  return nullptr;
}

bool IniDocument::has(std::string_view section, std::string_view key) const {
  return get(section, key).has_value();
}

std::optional<std::string> IniDocument::get(std::string_view section, std::string_view key) const {
  const Section* s = find_section(section);
  if (s == nullptr) return std::nullopt;
  for (const auto& [k, v] : s->entries)
    if (k == key) return v;
  return std::nullopt;
}

void IniDocument::set(std::string_view section, std::string_view key, std::string value) {
  Section* s = find_section(section);
  if (s == nullptr) {
    sections_.push_back({std::string(section), {}});
    s = &sections_.back();
  }
  for (auto& [k, v] : s->entries)
    if (k == key) {
      v = std::move(value);
      return;
    }
  s->entries.emplace_back(std::string(key), std::move(value));
}

std::string IniDocument::get_string(std::string_view section, std::string_view key,
                                    std::string fallback) const {
  auto v = get(section, key);
  return v ? *v : fallback;
}

double IniDocument::get_double(std::string_view section, std::string_view key, double fallback) const {
  auto v = get(section, key);
  return v ? parse_double(section, key, *v) : fallback;
}

std::size_t IniDocument::get_size(std::string_view section, std::string_view key,
                                  std::size_t fallback) const {
  auto v = get(section, key);
  return v ? static_cast<std::size_t>(parse_u64(section, key, *v)) : fallback;
}

std::uint64_t IniDocument::get_u64(std::string_view section, std::string_view key,
                                   std::uint64_t fallback) const {
  auto v = get(section, key);
  return v ? parse_u64(section, key, *v) : fallback;
}

bool IniDocument::get_bool(std::string_view section, std::string_view key, bool fallback) const {
  auto v = get(section, key);
  if (!v) return fallback;
  std::string s = *v;
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  bad_value(section, key, *v, "a boolean");
}

std::vector<std::size_t> IniDocument::get_size_list(std::string_view section, std::string_view key,
                                                    std::vector<std::size_t> fallback) const {
  auto v = get(section, key);
  if (!v) return fallback;
  std::vector<std::size_t> out;
  for (const auto& item : split_list(*v)) out.push_back(static_cast<std::size_t>(parse_u64(section, key, item)));
  return out;
}

std::vector<double> IniDocument::get_double_list(std::string_view section, std::string_view key,
                                                 std::vector<double> fallback) const {
  auto v = get(section, key);
  if (!v) return fallback;
  std::vector<double> out;
  for (const auto& item : split_list(*v)) out.push_back(parse_double(section, key, item));
  return out;
}

std::vector<std::string> IniDocument::get_string_list(std::string_view section, std::string_view key,
                                                      std::vector<std::string> fallback) const {
  auto v = get(section, key);
  return v ? split_list(*v) : fallback;
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

std::string format_bool(bool v) { return v ? "true" : "false"; }

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + std::to_string(v[i]);
  return out;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + format_double(v[i]);
  return out;
}

std::string join_strings(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + v[i];
  return out;
}

std::string digest_hex(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace pcmae
