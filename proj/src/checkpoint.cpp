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

#include "pcmae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pcmae/errors.hpp"

namespace pcmae {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

template <typename U>
void put_raw(std::string& out, U v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_string(std::string& out, const std::string& s) {
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}

  template <typename U>
  U raw(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, b_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }

  std::string str(const char* what) {
    const auto n = raw<std::uint32_t>(what);
    need(n, what);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void floats(float* dst, std::size_t n, const char* what) {
    if (n > (b_.size() - pos_) / 4) need(b_.size() - pos_ + 1, what);
    std::memcpy(dst, b_.data() + pos_, n * 4);
    pos_ += n * 4;
  }

  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n, const char* what) {
    if (b_.size() - pos_ < n)
      throw ParseError("checkpoint truncated reading " + std::string(what) + " at offset " + std::to_string(pos_), pos_);
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

std::string meta_text(const std::map<std::string, std::string>& meta) {
  std::string s;
  for (const auto& [k, v] : meta) s += k + "=" + v + "\n";
  return s;
}

std::map<std::string, std::string> parse_meta(const std::string& text, std::size_t offset) {
  std::map<std::string, std::string> meta;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("checkpoint metadata line without '=' near offset " + std::to_string(offset), offset);
    meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return meta;
}

}  // namespace

const CheckpointRecord* Checkpoint::find(const std::string& name) const {
  for (const auto& r : records)
    if (r.name == name) return &r;
  return nullptr;
}

void Checkpoint::put(std::string name, Shape shape, std::vector<float> data) {
  if (shape_numel(shape) != data.size()) throw DimensionError("checkpoint record '" + name + "': data does not match shape");
  records.push_back({std::move(name), std::move(shape), std::move(data)});
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out = "PM2A";
  put_raw<std::uint16_t>(out, kCheckpointVersion);
  put_string(out, ckpt.config.to_text());
  put_string(out, meta_text(ckpt.meta));
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.records.size()));
  for (const auto& r : ckpt.records) {
    put_string(out, r.name);
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (std::size_t e : r.shape) put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    out.append(reinterpret_cast<const char*>(r.data.data()), r.data.size() * 4);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "PM2A", 4) != 0) throw ParseError("checkpoint: bad magic", 0);
  Reader rd(bytes);
  rd.raw<std::uint32_t>("magic");
  const auto version = rd.raw<std::uint16_t>("version");
  if (version != kCheckpointVersion)
    throw ParseError("checkpoint: unsupported version " + std::to_string(version), 4);
  Checkpoint ckpt;
  const std::size_t cfg_at = rd.pos();
  const std::string cfg = rd.str("config");
  try {
    ckpt.config = ModelConfig::from_text(cfg);
  } catch (const ConfigError& e) {
    throw ParseError(std::string("checkpoint: bad config: ") + e.what(), cfg_at);
  }
  const std::size_t meta_at = rd.pos();
  ckpt.meta = parse_meta(rd.str("metadata"), meta_at);
  const auto count = rd.raw<std::uint32_t>("record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointRecord r;
    r.name = rd.str("record name");
    const auto rank = rd.raw<std::uint32_t>("rank");
    if (rank > 8) throw ParseError("checkpoint: implausible rank " + std::to_string(rank) + " for '" + r.name + "'", rd.pos() - 4);
    std::size_t n = 1;
    for (std::uint32_t a = 0; a < rank; ++a) {
      r.shape.push_back(rd.raw<std::uint32_t>("extent"));
      n *= r.shape.back();
    }
    r.data.resize(n);
    rd.floats(r.data.data(), n, "record data");
    ckpt.records.push_back(std::move(r));
  }
  if (!rd.done()) throw ParseError("checkpoint: trailing bytes at offset " + std::to_string(rd.pos()), rd.pos());
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  // Write to a sibling file first so an interrupted save never leaves a
  // truncated checkpoint behind.
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

template <typename T>
void put_params(Checkpoint& ckpt, const ParamStore<T>& params, const std::string& prefix) {
  for (const auto& e : params.entries())
    ckpt.put(prefix + e.name, e.value.shape(), std::vector<float>(e.value.data().begin(), e.value.data().end()));
}

template <typename T>
void get_params(const Checkpoint& ckpt, ParamStore<T>& params, const std::string& prefix) {
  for (auto& e : params.entries()) {
    const CheckpointRecord* r = ckpt.find(prefix + e.name);
    if (r == nullptr) throw ConfigError("checkpoint is missing '" + prefix + e.name + "'");
    if (r->shape != e.value.shape())
      throw ConfigError("checkpoint record '" + r->name + "' has shape " + shape_str(r->shape) + ", expected " +
                        shape_str(e.value.shape()));
    std::copy(r->data.begin(), r->data.end(), e.value.data().begin());
  }
}

PointMAE<float> model_from_checkpoint(const Checkpoint& ckpt) {
  PointMAE<float> model(ckpt.config, 0);
  get_params(ckpt, model.params());
  return model;
}

template void put_params(Checkpoint&, const ParamStore<float>&, const std::string&);
template void put_params(Checkpoint&, const ParamStore<double>&, const std::string&);
template void get_params(const Checkpoint&, ParamStore<float>&, const std::string&);
template void get_params(const Checkpoint&, ParamStore<double>&, const std::string&);

}  // namespace pcmae
