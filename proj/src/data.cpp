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

#include "pcmae/data.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "pcmae/errors.hpp"

namespace pcmae {

namespace {

constexpr const char* kSection = "data";
constexpr char kPcbMagic[4] = {'P', 'C', 'B', '1'};

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ConfigError("write failed for " + path.string());
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Vec3 to_vec(double x, double y, double z) {
  return {static_cast<float>(x), static_cast<float>(y), static_cast<float>(z)};
}

}  // namespace

std::string shape_kind_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::sphere: return "sphere";
    case ShapeKind::cube: return "cube-surface";
    case ShapeKind::cylinder: return "cylinder";
    case ShapeKind::torus: return "torus";
    case ShapeKind::plane: return "plane";
  }
  return "?";
}

ShapeKind parse_shape_kind(const std::string& name) {
  if (name == "sphere") return ShapeKind::sphere;
  if (name == "cube-surface" || name == "cube") return ShapeKind::cube;
  if (name == "cylinder") return ShapeKind::cylinder;
  if (name == "torus") return ShapeKind::torus;
  if (name == "plane") return ShapeKind::plane;
  throw ConfigError("unknown shape kind '" + name + "'");
}

std::vector<std::string> all_shape_kind_names() {
  return {"sphere", "cube-surface", "cylinder", "torus", "plane"};
}

DatasetRecord gen_synthetic(const SyntheticShapeSpec& spec) {
  if (spec.count == 0) throw ConfigError("synthetic shape: count must be >= 1");
  if (!(spec.noise >= 0.0)) throw ConfigError("synthetic shape: noise must be >= 0");
  if (!(spec.size > 0.0)) throw ConfigError("synthetic shape: size must be > 0");
  Rng rng(spec.seed);
  const double a = spec.size;
  // Default ranges keep cylinders clearly elongated (height 3-5 radii) so
  // they do not resemble cubes after normalization.
  const double aspect = spec.aspect > 0.0                     ? spec.aspect
                        : spec.kind == ShapeKind::cylinder ? rng.uniform(1.5, 2.5)
                                                             : rng.uniform(0.6, 1.0);
  constexpr double pi = std::numbers::pi;

  DatasetRecord rec;
  rec.label = static_cast<int>(spec.kind);
  rec.id = shape_kind_name(spec.kind) + "-" + std::to_string(spec.seed);
  rec.points.coords.reserve(spec.count);
  while (rec.points.size() < spec.count) {
    double x = 0, y = 0, z = 0;
    switch (spec.kind) {
      case ShapeKind::sphere: {
        double n = 0;
        while (n < 1e-12) {
          x = rng.normal(), y = rng.normal(), z = rng.normal();
          n = std::sqrt(x * x + y * y + z * z);
        }
        x *= a / n, y *= a / n, z *= a / n;
        break;
      }
      case ShapeKind::cube: {
        const std::uint64_t face = rng.below(6);
        const double u = rng.uniform(-a, a), v = rng.uniform(-a, a);
        const double s = (face & 1) ? a : -a;
        if (face < 2) x = s, y = u, z = v;
        else if (face < 4) x = u, y = s, z = v;
        else x = u, y = v, z = s;
        break;
      }
      case ShapeKind::cylinder: {
        const double h = 2.0 * a * aspect;
        const double lateral = 2.0 * pi * a * h, caps = 2.0 * pi * a * a;
        const double t = rng.uniform(0.0, 2.0 * pi);
        if (rng.uniform() * (lateral + caps) < lateral) {
          x = a * std::cos(t), y = a * std::sin(t), z = rng.uniform(-h / 2, h / 2);
        } else {
          const double r = a * std::sqrt(rng.uniform());
          x = r * std::cos(t), y = r * std::sin(t), z = rng.uniform() < 0.5 ? -h / 2 : h / 2;
        }
        break;
      }
      case ShapeKind::torus: {
        // Area element is proportional to (R + r cos(theta)); rejection keeps
        // the surface density uniform.
        const double R = a, r = a * aspect / 2;
        double theta = 0;
        do theta = rng.uniform(0.0, 2.0 * pi);
        while (rng.uniform() * (R + r) > R + r * std::cos(theta));
        const double phi = rng.uniform(0.0, 2.0 * pi);
        x = (R + r * std::cos(theta)) * std::cos(phi);
        y = (R + r * std::cos(theta)) * std::sin(phi);
        z = r * std::sin(theta);
        break;
      }
      case ShapeKind::plane:
        x = rng.uniform(-a, a), y = rng.uniform(-a, a), z = 0;
        break;
    }
    if (spec.noise > 0.0) x += rng.normal(0, spec.noise), y += rng.normal(0, spec.noise), z += rng.normal(0, spec.noise);
    rec.points.coords.push_back(to_vec(x, y, z));
  }
  return rec;
}

PointSet normalize_unit_sphere(const PointSet& points) {
  if (points.empty()) throw ContractError("normalize_unit_sphere: empty cloud");
  std::array<double, 3> c{0, 0, 0};
  for (const auto& p : points)
    for (int a = 0; a < 3; ++a) c[a] += p[a];
  for (double& v : c) v /= static_cast<double>(points.size());
  double max_norm = 0;
  for (const auto& p : points) {
    double n = 0;
    for (int a = 0; a < 3; ++a) n += (p[a] - c[a]) * (p[a] - c[a]);
    max_norm = std::max(max_norm, std::sqrt(n));
  }
  if (max_norm == 0.0) max_norm = 1.0;
  PointSet out;
  out.coords.reserve(points.size());
  for (const auto& p : points) out.coords.push_back(to_vec((p[0] - c[0]) / max_norm, (p[1] - c[1]) / max_norm, (p[2] - c[2]) / max_norm));
  return out;
}

PointSet resample(const PointSet& points, std::size_t n, Rng& rng) {
  if (points.empty()) throw ContractError("resample: empty cloud");
  if (points.size() == n) return points;
  if (points.size() > n) return gather(points, fps(points, n));
  PointSet out = points;
  while (out.size() < n) out.coords.push_back(points[rng.below(points.size())]);
  return out;
}

PointSet random_rotation(const PointSet& points, Rng& rng) {
  // Uniform unit quaternion (Shoemake).
  const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
  constexpr double tau = 2.0 * std::numbers::pi;
  const double w = std::sqrt(1 - u1) * std::sin(tau * u2), x = std::sqrt(1 - u1) * std::cos(tau * u2);
  const double y = std::sqrt(u1) * std::sin(tau * u3), z = std::sqrt(u1) * std::cos(tau * u3);
  const double m[3][3] = {{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
                          {2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
                          {2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}};
  PointSet out;
  out.coords.reserve(points.size());
  for (const auto& p : points) {
    double r[3];
    for (int i = 0; i < 3; ++i) r[i] = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2];
    out.coords.push_back(to_vec(r[0], r[1], r[2]));
  }
  return out;
}

// ---------------------------------------------------------------- XYZ

PointSet parse_xyz(const std::string& text) {
  PointSet out;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    std::string_view line(text.data() + pos, end - pos);
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    double v[3];
    int got = 0;
    std::size_t i = 0;
    auto skip_ws = [&] {
      while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r' || line[i] == ',')) ++i;
    };
    skip_ws();
    while (i < line.size()) {
      if (got == 3) throw ParseError("xyz line " + std::to_string(line_no) + ": more than 3 values", line_no);
      // from_chars rejects a leading '+', accept it explicitly.
      std::size_t start = i + (line[i] == '+' ? 1 : 0);
      auto [ptr, ec] = std::from_chars(line.data() + start, line.data() + line.size(), v[got]);
      if (ec != std::errc() || ptr == line.data() + start)
        throw ParseError("xyz line " + std::to_string(line_no) + ": non-numeric token", line_no);
      if (!std::isfinite(v[got]))
        throw ParseError("xyz line " + std::to_string(line_no) + ": non-finite coordinate", line_no);
      ++got;
      i = static_cast<std::size_t>(ptr - line.data());
      if (i < line.size() && !(line[i] == ' ' || line[i] == '\t' || line[i] == '\r' || line[i] == ','))
        throw ParseError("xyz line " + std::to_string(line_no) + ": non-numeric token", line_no);
      skip_ws();
    }
    if (got != 0 && got != 3)
      throw ParseError("xyz line " + std::to_string(line_no) + ": expected 3 values, got " + std::to_string(got), line_no);
    if (got == 3) out.coords.push_back(to_vec(v[0], v[1], v[2]));
    pos = end + 1;
  }
  return out;
}

PointSet load_xyz(const std::filesystem::path& path) { return parse_xyz(read_file(path)); }

void save_xyz(const std::filesystem::path& path, const PointSet& points) {
  std::string out;
  char buf[96];
  for (const auto& p : points) {
    const int n = std::snprintf(buf, sizeof buf, "%.9g %.9g %.9g\n", p[0], p[1], p[2]);
    out.append(buf, static_cast<std::size_t>(n));
  }
  write_file(path, out);
}

// ---------------------------------------------------------------- PCB

std::string encode_pcb(const PointSet& points) {
  std::string out(kPcbMagic, 4);
  const auto count = static_cast<std::uint32_t>(points.size());
  out.append(reinterpret_cast<const char*>(&count), 4);
  for (const auto& p : points) out.append(reinterpret_cast<const char*>(p.data()), 12);
  return out;
}

PointSet parse_pcb(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kPcbMagic, 4) != 0) throw ParseError("pcb: bad magic at offset 0", 0);
  if (bytes.size() < 8) throw ParseError("pcb: truncated header at offset 4", 4);
  std::uint32_t count = 0;
  std::memcpy(&count, bytes.data() + 4, 4);
  PointSet out;
  out.coords.resize(count);
  std::size_t off = 8;
  for (std::uint32_t i = 0; i < count; ++i, off += 12) {
    if (bytes.size() < off + 12)
      throw ParseError("pcb: truncated at offset " + std::to_string(off) + " (point " + std::to_string(i) + " of " +
                           std::to_string(count) + ")",
                       off);
    std::memcpy(out.coords[i].data(), bytes.data() + off, 12);
    for (float v : out.coords[i])
      if (!std::isfinite(v)) throw ParseError("pcb: non-finite coordinate at offset " + std::to_string(off), off);
  }
  if (off != bytes.size()) throw ParseError("pcb: trailing bytes at offset " + std::to_string(off), off);
  return out;
}

PointSet load_pcb(const std::filesystem::path& path) { return parse_pcb(read_file(path)); }

void save_pcb(const std::filesystem::path& path, const PointSet& points) { write_file(path, encode_pcb(points)); }

// ---------------------------------------------------------------- labels

void save_labels(const std::filesystem::path& path, const std::vector<std::pair<std::string, int>>& labels) {
  std::string out;
  for (const auto& [id, label] : labels) out += id + "\t" + std::to_string(label) + "\n";
  write_file(path, out);
}

std::map<std::string, int> load_labels(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  std::map<std::string, int> out;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0)
      throw ParseError("labels line " + std::to_string(line_no) + ": expected id<TAB>label", line_no);
    int label = 0;
    const char* b = line.data() + tab + 1;
    const char* e = line.data() + line.size();
    auto [ptr, ec] = std::from_chars(b, e, label);
    if (ec != std::errc() || ptr != e || label < 0)
      throw ParseError("labels line " + std::to_string(line_no) + ": bad label", line_no);
    out[line.substr(0, tab)] = label;
  }
  return out;
}

// ---------------------------------------------------------------- datasets

void DataConfig::validate() const {
  if (points == 0) throw ConfigError("data: points must be >= 1");
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) throw ConfigError("data: train_fraction must be in (0, 1]");
  if (!(noise >= 0.0)) throw ConfigError("data: noise must be >= 0");
  if (source == "synthetic") {
    if (kinds.empty()) throw ConfigError("data: no shape kinds");
    if (per_class == 0) throw ConfigError("data: per_class must be >= 1");
    for (const auto& k : kinds) parse_shape_kind(k);
  }
}

void DataConfig::to_ini(IniDocument& doc) const {
  doc.set(kSection, "source", source);
  doc.set(kSection, "kinds", join_strings(kinds));
  doc.set(kSection, "per_class", std::to_string(per_class));
  doc.set(kSection, "points", std::to_string(points));
  doc.set(kSection, "noise", format_double(noise));
  doc.set(kSection, "rotate", format_bool(rotate));
  doc.set(kSection, "train_fraction", format_double(train_fraction));
  doc.set(kSection, "split_seed", std::to_string(split_seed));
  doc.set(kSection, "seed", std::to_string(seed));
}

DataConfig DataConfig::from_ini(const IniDocument& doc, const DataConfig& d) {
  DataConfig c;
  c.source = doc.get_string(kSection, "source", d.source);
  c.kinds = doc.get_string_list(kSection, "kinds", d.kinds);
  c.per_class = doc.get_size(kSection, "per_class", d.per_class);
  c.points = doc.get_size(kSection, "points", d.points);
  c.noise = doc.get_double(kSection, "noise", d.noise);
  c.rotate = doc.get_bool(kSection, "rotate", d.rotate);
  c.train_fraction = doc.get_double(kSection, "train_fraction", d.train_fraction);
  c.split_seed = doc.get_u64(kSection, "split_seed", d.split_seed);
  c.seed = doc.get_u64(kSection, "seed", d.seed);
  return c;
}

bool in_train_split(const std::string& id, std::uint64_t split_seed, double train_fraction) {
  const std::uint64_t h = splitmix64(fnv1a(id) ^ splitmix64(split_seed));
  return static_cast<double>(h >> 11) * 0x1.0p-53 < train_fraction;
}

namespace {

std::string padded(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return buf;
}

void finish(Dataset& ds, std::vector<DatasetRecord> records, const DataConfig& cfg) {
  std::sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  for (std::size_t c = 0; c < ds.class_names.size(); ++c)
    if (std::none_of(records.begin(), records.end(), [&](const auto& r) { return r.label == static_cast<int>(c); }))
      throw ConfigError("data: class '" + ds.class_names[c] + "' has no samples");
  for (auto& r : records) (in_train_split(r.id, cfg.split_seed, cfg.train_fraction) ? ds.train : ds.val).push_back(std::move(r));
}

}  // namespace

Dataset make_dataset(const DataConfig& cfg) {
  cfg.validate();
  Dataset ds;
  std::vector<DatasetRecord> records;
  if (cfg.source == "synthetic") {
    for (std::size_t c = 0; c < cfg.kinds.size(); ++c) {
      const ShapeKind kind = parse_shape_kind(cfg.kinds[c]);
      ds.class_names.push_back(shape_kind_name(kind));
      for (std::size_t i = 0; i < cfg.per_class; ++i) {
        Rng rng = Rng::derive(cfg.seed, {static_cast<std::uint64_t>(kind), i});
        SyntheticShapeSpec spec;
        spec.kind = kind;
        spec.size = rng.uniform(0.5, 1.5);
        spec.noise = cfg.noise * spec.size;
        spec.count = cfg.points;
        spec.seed = rng.next();
        DatasetRecord rec = gen_synthetic(spec);
        if (cfg.rotate) rec.points = random_rotation(rec.points, rng);
        rec.points = normalize_unit_sphere(rec.points);
        rec.label = static_cast<int>(c);
        rec.id = ds.class_names.back() + "-" + padded(i);
        records.push_back(std::move(rec));
      }
    }
    finish(ds, std::move(records), cfg);
    return ds;
  }

  namespace fs = std::filesystem;
  const fs::path root(cfg.source);
  if (!fs::is_directory(root)) throw ConfigError("data: '" + cfg.source + "' is neither 'synthetic' nor a directory");
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) ds.class_names.push_back(e.path().filename().string());
  std::sort(ds.class_names.begin(), ds.class_names.end());
  if (ds.class_names.empty()) throw ConfigError("data: no class directories under " + cfg.source);
  std::map<std::string, int> labels;
  const bool have_labels = fs::exists(root / "labels.tsv");
  if (have_labels) labels = load_labels(root / "labels.tsv");
  for (std::size_t c = 0; c < ds.class_names.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(root / ds.class_names[c]))
      if (e.is_regular_file() && e.path().extension() == ".pcb") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ConfigError("data: class '" + ds.class_names[c] + "' has no samples");
    for (const auto& f : files) {
      DatasetRecord rec;
      rec.id = f.stem().string();
      try {
        rec.points = load_pcb(f);
      } catch (const ParseError& err) {
        throw ParseError(f.string() + ": " + err.what(), err.position());
      }
      if (rec.points.empty()) throw ParseError(f.string() + ": empty point cloud", 8);
      if (have_labels) {
        auto it = labels.find(rec.id);
        if (it == labels.end()) throw ConfigError("data: " + rec.id + " missing from labels.tsv");
        rec.label = it->second;
      } else {
        rec.label = static_cast<int>(c);
      }
      Rng rng = Rng::derive(cfg.seed, {fnv1a(rec.id)});
      rec.points = normalize_unit_sphere(resample(rec.points, cfg.points, rng));
      records.push_back(std::move(rec));
    }
  }
  for (const auto& r : records)
    if (r.label < 0 || static_cast<std::size_t>(r.label) >= ds.class_names.size())
      throw ConfigError("data: label " + std::to_string(r.label) + " of " + r.id + " out of range");
  finish(ds, std::move(records), cfg);
  return ds;
}

void write_dataset_dir(const std::filesystem::path& root, const std::vector<std::string>& class_names,
                       const std::vector<DatasetRecord>& records) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw ConfigError("cannot create " + root.string() + ": " + ec.message());
  std::vector<std::pair<std::string, int>> labels;
  for (const auto& r : records) {
    const fs::path dir = root / class_names.at(static_cast<std::size_t>(r.label));
    fs::create_directories(dir, ec);
    if (ec) throw ConfigError("cannot create " + dir.string() + ": " + ec.message());
    save_pcb(dir / (r.id + ".pcb"), r.points);
    labels.emplace_back(r.id, r.label);
  }
  save_labels(root / "labels.tsv", labels);
}

}  // namespace pcmae
