// Copyright 2026 The ternvit Authors
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

#include "ternvit/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

// The checkpoint wire format is little-endian and numeric payloads are
// memcpy'd; big-endian hosts would need byte swaps that are not implemented.
static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace ternvit {

namespace {

// ---------------------------------------------------------------------------
// config text

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

struct ConfigEntry {
  std::string section, key, value;
  int line = 0;
};

std::vector<ConfigEntry> lex_config(const std::string& text) {
  std::vector<ConfigEntry> out;
  std::istringstream is(text);
  std::string raw, section;
  int line = 0;
  while (std::getline(is, raw)) {
    ++line;
    const std::string s = trim(raw);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']')
        throw ConfigError("config line " + std::to_string(line) + ": unterminated section header");
      section = trim(s.substr(1, s.size() - 2));
      if (section.empty())
        throw ConfigError("config line " + std::to_string(line) + ": empty section name");
      continue;
    }
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line) + ": expected key = value");
    if (section.empty())
      throw ConfigError("config line " + std::to_string(line) + ": key outside any section");
    ConfigEntry e;
    e.section = section;
    e.key = trim(s.substr(0, eq));
    e.value = trim(s.substr(eq + 1));
    e.line = line;
    if (e.key.empty())
      throw ConfigError("config line " + std::to_string(line) + ": empty key");
    out.push_back(std::move(e));
  }
  return out;
}

[[noreturn]] void bad_value(const ConfigEntry& e, const char* want) {
  throw ConfigError("config key " + e.section + "." + e.key + ": expected " + want + ", got \"" +
                    e.value + "\"");
}

Index to_index(const ConfigEntry& e) {
  Index v = 0;
  const auto* first = e.value.data();
  const auto* last = first + e.value.size();
  auto [p, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || p != last) bad_value(e, "an integer");
  return v;
}

std::uint64_t to_u64(const ConfigEntry& e) {
  std::uint64_t v = 0;
  const auto* first = e.value.data();
  const auto* last = first + e.value.size();
  auto [p, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || p != last) bad_value(e, "a nonnegative integer");
  return v;
}

double to_f64(const ConfigEntry& e) {
  double v = 0.0;
  const auto* first = e.value.data();
  const auto* last = first + e.value.size();
  auto [p, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || p != last) bad_value(e, "a number");
  return v;
}

bool to_bool(const ConfigEntry& e) {
  if (e.value == "true") return true;
  if (e.value == "false") return false;
  bad_value(e, "true or false");
}

WeightMode to_mode(const ConfigEntry& e) {
  if (e.value == "real32") return WeightMode::kReal32;
  if (e.value == "int8") return WeightMode::kInt8;
  if (e.value == "ternary") return WeightMode::kTernary;
  bad_value(e, "real32, int8 or ternary");
}

const char* mode_name(WeightMode m) {
  switch (m) {
    case WeightMode::kReal32: return "real32";
    case WeightMode::kInt8: return "int8";
    case WeightMode::kTernary: return "ternary";
  }
  throw ValueError("unknown weight mode");
}

std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, p);
}

// ---------------------------------------------------------------------------
// byte cursors

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

struct Cursor {
  const std::vector<std::uint8_t>& bytes;
  std::size_t at = 0;

  void require(std::size_t n, const char* what) const {
    if (at + n > bytes.size())
      throw FormatError("unexpected end of checkpoint while reading " + std::string(what) +
                        " at byte " + std::to_string(at));
  }
  std::uint16_t u16(const char* what) {
    require(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(bytes[at] | (bytes[at + 1] << 8));
    at += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    require(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
    at += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    require(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[at + i]) << (8 * i);
    at += 8;
    return v;
  }
  std::vector<std::uint8_t> blob(std::size_t n, const char* what) {
    require(n, what);
    std::vector<std::uint8_t> v(bytes.begin() + static_cast<std::ptrdiff_t>(at),
                                bytes.begin() + static_cast<std::ptrdiff_t>(at + n));
    at += n;
    return v;
  }
};

constexpr std::size_t kAlign = 64;
constexpr std::uint8_t kMagic[8] = {'T', 'E', 'R', 'V', 'I', 'T', 0x00, 0x01};

std::size_t align_up(std::size_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

Index dim_product(const std::vector<Index>& dims) {
  Index p = 1;
  for (Index d : dims) p *= d;
  return p;
}

std::size_t expected_record_bytes(const TensorRecord& r) {
  switch (r.dtype) {
    case CkptDtype::kF32: return static_cast<std::size_t>(dim_product(r.dims)) * 4;
    case CkptDtype::kU8: return static_cast<std::size_t>(dim_product(r.dims));
    case CkptDtype::kPacked2:
      if (r.dims.size() != 2)
        throw FormatError("packed2 tensor " + r.name + " must be two-dimensional");
      return packed_size(r.dims[0] * r.dims[1]) + 4 * static_cast<std::size_t>(r.dims[1]);
  }
  throw FormatError("unknown dtype in tensor " + r.name);
}

void append_f32(std::vector<std::uint8_t>& out, const float* p, std::size_t n) {
  const std::size_t base = out.size();
  out.resize(base + n * 4);
  std::memcpy(out.data() + base, p, n * 4);
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  f.seekg(0, std::ios::end);
  const auto size = f.tellg();
  f.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> out(static_cast<std::size_t>(size));
  if (size > 0 && !f.read(reinterpret_cast<char*>(out.data()), size))
    throw IoError("failed reading " + path);
  return out;
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("failed writing " + path);
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t at, const std::string& path) {
  if (at + 4 > b.size()) throw FormatError("unexpected end of IDX file " + path);
  return (static_cast<std::uint32_t>(b[at]) << 24) | (static_cast<std::uint32_t>(b[at + 1]) << 16) |
         (static_cast<std::uint32_t>(b[at + 2]) << 8) | static_cast<std::uint32_t>(b[at + 3]);
}

std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << "0x" << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// config

RunConfig parse_config_text(const std::string& text) {
  RunConfig rc;
  for (const auto& e : lex_config(text)) {
    if (e.section == "model") {
      auto& m = rc.model;
      if (e.key == "image_size") m.image_size = to_index(e);
      else if (e.key == "patch_size") m.patch_size = to_index(e);
      else if (e.key == "in_channels") m.in_channels = to_index(e);
      else if (e.key == "embed_dim") m.embed_dim = to_index(e);
      else if (e.key == "depth") m.depth = to_index(e);
      else if (e.key == "num_heads") m.num_heads = to_index(e);
      else if (e.key == "mlp_ratio") m.mlp_ratio = to_f64(e);
      else if (e.key == "num_classes") m.num_classes = to_index(e);
      else if (e.key == "attn_scale_per_head") m.attn_scale_per_head = to_bool(e);
      else throw ConfigError("unknown key model." + e.key);
    } else if (e.section == "policy") {
      auto& p = rc.policy;
      if (e.key == "weights") p.default_weights = to_mode(e);
      else if (e.key == "activations") p.activation_bits = static_cast<int>(to_index(e));
      else if (e.key == "granularity") {
        if (e.value == "channel") p.granularity = Granularity::kChannel;
        else if (e.value == "layer") p.granularity = Granularity::kLayer;
        else bad_value(e, "channel or layer");
      } else if (e.key.rfind("override.", 0) == 0 && e.key.size() > 9) {
        p.overrides[e.key.substr(9)] = to_mode(e);
      } else {
        throw ConfigError("unknown key policy." + e.key);
      }
    } else if (e.section == "schedule") {
      auto& s = rc.schedule;
      if (e.key == "phase_a_epochs") s.phase_a_epochs = to_index(e);
      else if (e.key == "phase_b_epochs") s.phase_b_epochs = to_index(e);
      else if (e.key == "lr") s.lr = to_f64(e);
      else if (e.key == "weight_decay") s.weight_decay = to_f64(e);
      else if (e.key == "beta1") s.beta1 = to_f64(e);
      else if (e.key == "beta2") s.beta2 = to_f64(e);
      else if (e.key == "eps") s.eps = to_f64(e);
      else if (e.key == "batch_size") s.batch_size = to_index(e);
      else if (e.key == "seed") s.seed = to_u64(e);
      else if (e.key == "from_scratch") s.from_scratch = to_bool(e);
      else throw ConfigError("unknown key schedule." + e.key);
    } else if (e.section == "data") {
      auto& d = rc.data;
      if (e.key == "kind") {
        if (e.value == "synthetic") d.kind = DatasetSource::Kind::kSynthetic;
        else if (e.value == "idx") d.kind = DatasetSource::Kind::kIdx;
        else bad_value(e, "synthetic or idx");
      } else if (e.key == "samples") d.samples = to_index(e);
      else if (e.key == "classes") d.classes = to_index(e);
      else if (e.key == "seed") d.seed = to_u64(e);
      else if (e.key == "eval_samples") d.eval_samples = to_index(e);
      else if (e.key == "eval_seed") d.eval_seed = to_u64(e);
      else if (e.key == "images") d.images_path = e.value;
      else if (e.key == "labels") d.labels_path = e.value;
      else throw ConfigError("unknown key data." + e.key);
    } else {
      throw ConfigError("unknown section [" + e.section + "]");
    }
  }
  rc.model.validate();
  rc.policy.validate();
  rc.schedule.validate();
  rc.data.validate();
  return rc;
}

RunConfig parse_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return parse_config_text(os.str());
}

std::string write_config(const RunConfig& c) {
  std::ostringstream os;
  os << "[model]\n";
  os << "image_size = " << c.model.image_size << '\n';
  os << "patch_size = " << c.model.patch_size << '\n';
  os << "in_channels = " << c.model.in_channels << '\n';
  os << "embed_dim = " << c.model.embed_dim << '\n';
  os << "depth = " << c.model.depth << '\n';
  os << "num_heads = " << c.model.num_heads << '\n';
  os << "mlp_ratio = " << fmt_double(c.model.mlp_ratio) << '\n';
  os << "num_classes = " << c.model.num_classes << '\n';
  os << "attn_scale_per_head = " << (c.model.attn_scale_per_head ? "true" : "false") << '\n';
  os << "\n[policy]\n";
  os << "weights = " << mode_name(c.policy.default_weights) << '\n';
  os << "activations = " << c.policy.activation_bits << '\n';
  os << "granularity = "
     << (c.policy.granularity == Granularity::kChannel ? "channel" : "layer") << '\n';
  for (const auto& [id, mode] : c.policy.overrides)
    os << "override." << id << " = " << mode_name(mode) << '\n';
  os << "\n[schedule]\n";
  os << "phase_a_epochs = " << c.schedule.phase_a_epochs << '\n';
  os << "phase_b_epochs = " << c.schedule.phase_b_epochs << '\n';
  os << "lr = " << fmt_double(c.schedule.lr) << '\n';
  os << "weight_decay = " << fmt_double(c.schedule.weight_decay) << '\n';
  os << "beta1 = " << fmt_double(c.schedule.beta1) << '\n';
  os << "beta2 = " << fmt_double(c.schedule.beta2) << '\n';
  os << "eps = " << fmt_double(c.schedule.eps) << '\n';
  os << "batch_size = " << c.schedule.batch_size << '\n';
  os << "seed = " << c.schedule.seed << '\n';
  os << "from_scratch = " << (c.schedule.from_scratch ? "true" : "false") << '\n';
  os << "\n[data]\n";
  os << "kind = " << (c.data.kind == DatasetSource::Kind::kSynthetic ? "synthetic" : "idx")
     << '\n';
  os << "samples = " << c.data.samples << '\n';
  os << "classes = " << c.data.classes << '\n';
  os << "seed = " << c.data.seed << '\n';
  os << "eval_samples = " << c.data.eval_samples << '\n';
  os << "eval_seed = " << c.data.eval_seed << '\n';
  if (!c.data.images_path.empty()) os << "images = " << c.data.images_path << '\n';
  if (!c.data.labels_path.empty()) os << "labels = " << c.data.labels_path << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// IDX

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto ib = read_file(images_path);
  const std::uint32_t im = be32(ib, 0, images_path);
  if (im != 0x00000803u)
    throw FormatError("bad IDX image magic " + hex32(im) + " in " + images_path +
                      " (expected 0x00000803)");
  const std::uint32_t count = be32(ib, 4, images_path);
  const std::uint32_t rows = be32(ib, 8, images_path);
  const std::uint32_t cols = be32(ib, 12, images_path);
  if (count == 0) throw FormatError("IDX file " + images_path + " has zero samples");
  if (rows == 0 || cols == 0) throw FormatError("IDX file " + images_path + " has empty geometry");
  const std::size_t need = 16 + static_cast<std::size_t>(count) * rows * cols;
  if (ib.size() < need) throw FormatError("unexpected end of IDX file " + images_path);
  if (ib.size() > need) throw FormatError("trailing data in IDX file " + images_path);

  const auto lb = read_file(labels_path);
  const std::uint32_t lm = be32(lb, 0, labels_path);
  if (lm != 0x00000801u)
    throw FormatError("bad IDX label magic " + hex32(lm) + " in " + labels_path +
                      " (expected 0x00000801)");
  const std::uint32_t lcount = be32(lb, 4, labels_path);
  if (lcount != count)
    throw FormatError("IDX count mismatch: " + std::to_string(count) + " images vs " +
                      std::to_string(lcount) + " labels");
  if (lb.size() < 8 + lcount) throw FormatError("unexpected end of IDX file " + labels_path);
  if (lb.size() > 8 + lcount) throw FormatError("trailing data in IDX file " + labels_path);

  Dataset out;
  out.images = Tensor::zeros({static_cast<Index>(count), 1, static_cast<Index>(rows),
                              static_cast<Index>(cols)});
  float* px = out.images.data();
  for (std::size_t i = 0; i < static_cast<std::size_t>(count) * rows * cols; ++i)
    px[i] = static_cast<float>(ib[16 + i]) / 255.0f;
  out.labels.resize(count);
  for (std::uint32_t i = 0; i < count; ++i) out.labels[i] = static_cast<int>(lb[8 + i]);
  return out;
}

Dataset make_dataset(const DatasetSource& source, const ViTConfig& model, bool eval_split) {
  source.validate();
  if (source.kind == DatasetSource::Kind::kSynthetic) {
    const Index n = eval_split ? source.eval_samples : source.samples;
    const std::uint64_t seed = eval_split ? source.eval_seed : source.seed;
    return make_blob_dataset<float>(model, n, source.classes, seed);
  }
  Dataset d = load_idx(source.images_path, source.labels_path);
  if (d.images.dim(2) != model.image_size || d.images.dim(3) != model.image_size ||
      model.in_channels != 1)
    throw ConfigError("idx image geometry " + std::to_string(d.images.dim(2)) + "x" +
                      std::to_string(d.images.dim(3)) +
                      " does not match model image_size/in_channels");
  for (int y : d.labels)
    if (y < 0 || y >= model.num_classes)
      throw ConfigError("idx label " + std::to_string(y) + " outside [0, " +
                        std::to_string(model.num_classes) + ")");
  return d;
}

// ---------------------------------------------------------------------------
// checkpoints

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::size_t table = 0;
  for (const auto& r : ckpt.tensors) {
    if (r.name.size() > 0xffff) throw ContractError("tensor name too long: " + r.name);
    if (r.bytes.size() != expected_record_bytes(r))
      throw ContractError("tensor " + r.name + " payload does not match its dims/dtype");
    table += 2 + r.name.size() + 1 + 1 + 8 * r.dims.size() + 8 + 8;
  }
  const std::size_t header = 8 + 4 + 8 + 4 + ckpt.config_text.size() + 4 + table;
  const std::size_t payload_base = align_up(header);

  std::vector<std::uint64_t> offsets;
  std::size_t cur = 0;
  for (const auto& r : ckpt.tensors) {
    cur = align_up(cur);
    offsets.push_back(cur);
    cur += r.bytes.size();
  }

  std::vector<std::uint8_t> out;
  out.reserve(payload_base + cur);
  for (std::uint8_t b : kMagic) out.push_back(b);
  put_u32(out, ckpt.version);
  put_u64(out, fnv1a64(ckpt.config_text.data(), ckpt.config_text.size()));
  put_u32(out, static_cast<std::uint32_t>(ckpt.config_text.size()));
  out.insert(out.end(), ckpt.config_text.begin(), ckpt.config_text.end());
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    const auto& r = ckpt.tensors[i];
    put_u16(out, static_cast<std::uint16_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    out.push_back(static_cast<std::uint8_t>(r.dtype));
    out.push_back(static_cast<std::uint8_t>(r.dims.size()));
    for (Index d : r.dims) put_u64(out, static_cast<std::uint64_t>(d));
    put_u64(out, offsets[i]);
    put_u64(out, r.bytes.size());
  }
  out.resize(payload_base, 0);
  for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
    out.resize(payload_base + offsets[i], 0);
    out.insert(out.end(), ckpt.tensors[i].bytes.begin(), ckpt.tensors[i].bytes.end());
  }
  return out;
}

Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Cursor cur{bytes};
  cur.require(8, "magic");
  if (!std::equal(kMagic, kMagic + 8, bytes.begin()))
    throw FormatError("bad checkpoint magic");
  cur.at = 8;

  Checkpoint ckpt;
  ckpt.version = cur.u32("version");
  if (ckpt.version != 1)
    throw FormatError("unsupported checkpoint version " + std::to_string(ckpt.version));
  const std::uint64_t digest = cur.u64("config digest");
  const std::uint32_t cfg_len = cur.u32("config length");
  const auto cfg = cur.blob(cfg_len, "config text");
  ckpt.config_text.assign(cfg.begin(), cfg.end());
  if (fnv1a64(ckpt.config_text.data(), ckpt.config_text.size()) != digest)
    throw FormatError("config digest mismatch: checkpoint header does not match its config text");

  const std::uint32_t count = cur.u32("tensor count");
  if (count > 1u << 20) throw FormatError("implausible tensor count " + std::to_string(count));

  struct Meta {
    TensorRecord rec;
    std::uint64_t offset = 0, length = 0;
  };
  std::vector<Meta> metas;
  for (std::uint32_t i = 0; i < count; ++i) {
    Meta m;
    const std::uint16_t name_len = cur.u16("tensor name length");
    const auto name = cur.blob(name_len, "tensor name");
    m.rec.name.assign(name.begin(), name.end());
    cur.require(2, "tensor dtype");
    const std::uint8_t dtype = bytes[cur.at++];
    if (dtype > 2) throw FormatError("unknown dtype " + std::to_string(dtype) + " for tensor " +
                                     m.rec.name);
    m.rec.dtype = static_cast<CkptDtype>(dtype);
    const std::uint8_t ndim = bytes[cur.at++];
    if (ndim > 8) throw FormatError("implausible rank for tensor " + m.rec.name);
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const std::uint64_t v = cur.u64("tensor dim");
      if (v > (1ull << 40)) throw FormatError("implausible dimension in tensor " + m.rec.name);
      m.rec.dims.push_back(static_cast<Index>(v));
    }
    m.offset = cur.u64("tensor offset");
    m.length = cur.u64("tensor length");
    metas.push_back(std::move(m));
  }

  const std::size_t payload_base = align_up(cur.at);
  for (auto& m : metas) {
    if (payload_base + m.offset + m.length > bytes.size())
      throw FormatError("unexpected end of checkpoint payload for tensor " + m.rec.name);
    m.rec.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(payload_base + m.offset),
                       bytes.begin() + static_cast<std::ptrdiff_t>(payload_base + m.offset +
                                                                   m.length));
    if (m.rec.bytes.size() != expected_record_bytes(m.rec))
      throw FormatError("tensor " + m.rec.name + " payload does not match its dims/dtype");
    ckpt.tensors.push_back(std::move(m.rec));
  }
  return ckpt;
}

void save_checkpoint_file(const Checkpoint& ckpt, const std::string& path) {
  write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint_file(const std::string& path) {
  return parse_checkpoint(read_file(path));
}

Checkpoint checkpoint_from_model(VisionTransformer& model, const std::string& config_text,
                                 SaveMode mode, const AdamWState* optimizer) {
  Checkpoint ckpt;
  ckpt.config_text = config_text;

  std::map<std::string, LinearLayerT<float>*> quantized;
  for (auto* layer : model.weight_layers()) quantized[layer->id + ".w"] = layer;

  for (const auto& [name, p] : model.parameters()) {
    if (!p.valid()) throw ContractError("parameter " + name + " is not materialized");
    const auto it = quantized.find(name);
    const WeightMode wm =
        (mode == SaveMode::kDeployed && it != quantized.end()) ? it->second->mode
                                                               : WeightMode::kReal32;
    if (wm == WeightMode::kTernary) {
      const auto t = ternarize(p, it->second->granularity);
      TensorRecord r;
      r.name = name;
      r.dtype = CkptDtype::kPacked2;
      r.dims = {t.rows, t.cols};
      r.bytes = t.packed;
      append_f32(r.bytes, t.alpha.data(), t.alpha.size());
      ckpt.tensors.push_back(std::move(r));
    } else if (wm == WeightMode::kInt8) {
      const auto q = quantize_weights_int8(p);
      TensorRecord r;
      r.name = name;
      r.dtype = CkptDtype::kU8;
      r.dims = {q.rows, q.cols};
      r.bytes = q.codes;
      ckpt.tensors.push_back(std::move(r));
      TensorRecord qp;
      qp.name = name + ".qparam";
      qp.dtype = CkptDtype::kF32;
      qp.dims = {2, q.cols};
      append_f32(qp.bytes, q.scale.data(), q.scale.size());
      append_f32(qp.bytes, q.offset.data(), q.offset.size());
      ckpt.tensors.push_back(std::move(qp));
    } else {
      TensorRecord r;
      r.name = name;
      r.dtype = CkptDtype::kF32;
      r.dims = p.shape();
      append_f32(r.bytes, p.data(), static_cast<std::size_t>(p.count()));
      ckpt.tensors.push_back(std::move(r));
    }
  }

  if (optimizer) {
    const auto& params = model.parameters();
    if (optimizer->m.size() != params.size() || optimizer->v.size() != params.size())
      throw ContractError("optimizer state does not match the model's parameter list");
    TensorRecord step;
    step.name = "optim.step";
    step.dtype = CkptDtype::kF32;
    step.dims = {1};
    const float s = static_cast<float>(optimizer->step);
    append_f32(step.bytes, &s, 1);
    ckpt.tensors.push_back(std::move(step));
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (const char* kind : {"m", "v"}) {
        const auto& buf = kind[0] == 'm' ? optimizer->m[i] : optimizer->v[i];
        TensorRecord r;
        r.name = std::string("optim.") + kind + "." + params[i].first;
        r.dtype = CkptDtype::kF32;
        r.dims = buf.shape();
        append_f32(r.bytes, buf.data(), static_cast<std::size_t>(buf.count()));
        ckpt.tensors.push_back(std::move(r));
      }
    }
  }
  return ckpt;
}

void apply_checkpoint(VisionTransformer& model, const Checkpoint& ckpt,
                      const std::string& expected_config_text, AdamWState* optimizer) {
  if (fnv1a64(expected_config_text.data(), expected_config_text.size()) !=
      fnv1a64(ckpt.config_text.data(), ckpt.config_text.size()))
    throw IoError("checkpoint config digest mismatch: model was built from a different config");

  auto& params = model.parameters();
  std::map<std::string, TensorT<float>> by_name;
  std::map<std::string, std::size_t> param_index;
  for (std::size_t i = 0; i < params.size(); ++i) {
    by_name[params[i].first] = params[i].second;
    param_index[params[i].first] = i;
  }
  std::map<std::string, const TensorRecord*> records;
  for (const auto& r : ckpt.tensors) {
    if (!records.emplace(r.name, &r).second)
      throw FormatError("duplicate tensor " + r.name + " in checkpoint");
  }

  // Validate every record before touching any parameter.
  for (const auto& r : ckpt.tensors) {
    const auto pit = by_name.find(r.name);
    if (pit != by_name.end()) {
      const auto& p = pit->second;
      if (r.dtype == CkptDtype::kF32) {
        if (r.dims != p.shape())
          throw FormatError("tensor " + r.name + " shape does not match the model");
      } else {
        if (p.ndim() != 2 || r.dims != std::vector<Index>{p.dim(0), p.dim(1)})
          throw FormatError("tensor " + r.name + " shape does not match the model");
        if (r.dtype == CkptDtype::kU8 && records.find(r.name + ".qparam") == records.end())
          throw FormatError("tensor " + r.name + " is missing its .qparam companion");
      }
      continue;
    }
    if (r.name.ends_with(".qparam")) {
      const std::string base = r.name.substr(0, r.name.size() - 7);
      const auto bit = records.find(base);
      if (bit == records.end() || bit->second->dtype != CkptDtype::kU8 ||
          by_name.find(base) == by_name.end())
        throw FormatError("orphan qparam record " + r.name);
      if (r.dtype != CkptDtype::kF32 || r.dims != std::vector<Index>{2, bit->second->dims[1]})
        throw FormatError("qparam record " + r.name + " has the wrong shape");
      continue;
    }
    if (r.name.rfind("optim.", 0) == 0) {
      if (r.name == "optim.step") {
        if (r.dtype != CkptDtype::kF32 || r.dims != std::vector<Index>{1})
          throw FormatError("optim.step record has the wrong shape");
        continue;
      }
      const bool is_m = r.name.rfind("optim.m.", 0) == 0;
      const bool is_v = r.name.rfind("optim.v.", 0) == 0;
      if (!is_m && !is_v) throw FormatError("checkpoint names unknown tensor " + r.name);
      const std::string pname = r.name.substr(8);
      const auto pit2 = by_name.find(pname);
      if (pit2 == by_name.end() || r.dtype != CkptDtype::kF32 || r.dims != pit2->second.shape())
        throw FormatError("optimizer record " + r.name + " does not match the model");
      continue;
    }
    throw FormatError("checkpoint names unknown tensor " + r.name);
  }

  if (optimizer) *optimizer = AdamWState::init(params);

  for (const auto& r : ckpt.tensors) {
    const auto pit = by_name.find(r.name);
    if (pit != by_name.end()) {
      auto p = pit->second;
      if (r.dtype == CkptDtype::kF32) {
        std::memcpy(p.data(), r.bytes.data(), r.bytes.size());
      } else if (r.dtype == CkptDtype::kU8) {
        const auto& qp = *records.at(r.name + ".qparam");
        Int8WeightT<float> q;
        q.rows = r.dims[0];
        q.cols = r.dims[1];
        q.codes = r.bytes;
        q.scale.resize(static_cast<std::size_t>(q.cols));
        q.offset.resize(static_cast<std::size_t>(q.cols));
        std::memcpy(q.scale.data(), qp.bytes.data(), q.scale.size() * 4);
        std::memcpy(q.offset.data(), qp.bytes.data() + q.scale.size() * 4, q.offset.size() * 4);
        const auto deq = dequantize_weights_int8(q);
        std::copy_n(deq.data(), deq.count(), p.data());
      } else {
        TernaryTensorT<float> t;
        t.rows = r.dims[0];
        t.cols = r.dims[1];
        const std::size_t packed = packed_size(t.rows * t.cols);
        t.packed.assign(r.bytes.begin(), r.bytes.begin() + static_cast<std::ptrdiff_t>(packed));
        t.alpha.resize(static_cast<std::size_t>(t.cols));
        std::memcpy(t.alpha.data(), r.bytes.data() + packed, t.alpha.size() * 4);
        const auto deq = dequantize_ternary(t);
        std::copy_n(deq.data(), deq.count(), p.data());
      }
      continue;
    }
    if (optimizer && r.name.rfind("optim.", 0) == 0) {
      if (r.name == "optim.step") {
        float s = 0;
        std::memcpy(&s, r.bytes.data(), 4);
        optimizer->step = static_cast<Index>(std::llround(s));
      } else {
        const std::string pname = r.name.substr(8);
        auto& buf = r.name[6] == 'm' ? optimizer->m[param_index.at(pname)]
                                     : optimizer->v[param_index.at(pname)];
        std::memcpy(buf.data(), r.bytes.data(), r.bytes.size());
      }
    }
  }
}

}  // namespace ternvit
