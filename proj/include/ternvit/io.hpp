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

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ternvit/common.hpp"
#include "ternvit/dataset.hpp"
#include "ternvit/quantize.hpp"
#include "ternvit/train.hpp"
#include "ternvit/vit.hpp"

namespace ternvit {

/// Where training and evaluation samples come from. Synthetic sources are
/// fully described by seeds and counts; idx sources point at an IDX image and
/// label file pair.
struct DatasetSource {
  enum class Kind { kSynthetic, kIdx };
  Kind kind = Kind::kSynthetic;
  Index samples = 200;
  Index classes = 2;
  std::uint64_t seed = 7;
  Index eval_samples = 100;
  std::uint64_t eval_seed = 8;
  std::string images_path;
  std::string labels_path;

  void validate() const {
    if (kind == Kind::kSynthetic) {
      if (samples < 1 || eval_samples < 1) throw ConfigError("data sample counts must be >= 1");
      if (classes < 2) throw ConfigError("data classes must be >= 2");
    } else {
      if (images_path.empty()) throw ConfigError("missing required key images for idx data");
      if (labels_path.empty()) throw ConfigError("missing required key labels for idx data");
    }
  }
};

/// Everything a run needs, as parsed from one config file. Sections absent
/// from the file keep these defaults.
struct RunConfig {
  ViTConfig model;
  QuantizationPolicy policy;
  TrainSchedule schedule = [] {
    TrainSchedule s;
    s.phase_b_epochs = 1;
    return s;
  }();
  DatasetSource data;
};

/// Sectioned key-value syntax, documented in FORMATS.md. Unknown sections or
/// keys raise ConfigError naming them; parsed structs are validated before
/// return.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::string& path);

/// Canonical serialization; parse_config_text(write_config(c)) reproduces c
/// and re-serializes to identical bytes.
std::string write_config(const RunConfig& config);

/// Standard IDX pair (big-endian, magic 0x00000803 for images and 0x00000801
/// for labels). Pixels are scaled to [0, 1]; channel count is 1.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Materialize the train or eval split of a dataset source.
Dataset make_dataset(const DatasetSource& source, const ViTConfig& model, bool eval_split = false);

enum class CkptDtype : std::uint8_t { kF32 = 0, kU8 = 1, kPacked2 = 2 };

struct TensorRecord {
  std::string name;
  CkptDtype dtype = CkptDtype::kF32;
  std::vector<Index> dims;
  std::vector<std::uint8_t> bytes;
};

/// In-memory checkpoint. The on-disk layout (FORMATS.md): 8-byte magic
/// "TERVIT\0\x01", little-endian u32 version, u64 FNV-1a digest of the config
/// text, u32 config length and text, u32 record count, table entries, then a
/// 64-byte-aligned payload with every record 64-byte aligned. packed2 payload
/// is the packed code bytes followed by one f32 alpha per output channel.
struct Checkpoint {
  std::uint32_t version = 1;
  std::string config_text;
  std::vector<TensorRecord> tensors;
};

/// kLatent stores every parameter as f32 for training resume. kDeployed
/// stores each policy-quantized weight matrix in its wire dtype (packed2 or
/// u8 codes plus a "<name>.qparam" f32 companion) and the rest as f32.
enum class SaveMode { kLatent, kDeployed };

Checkpoint checkpoint_from_model(VisionTransformer& model, const std::string& config_text,
                                 SaveMode mode, const AdamWState* optimizer = nullptr);

/// Writes records into the model's latent parameters; quantized records are
/// dequantized first. The digest of expected_config_text must match the
/// checkpoint's before any tensor is touched. Optimizer records are applied
/// when `optimizer` is given and skipped otherwise.
void apply_checkpoint(VisionTransformer& model, const Checkpoint& ckpt,
                      const std::string& expected_config_text,
                      AdamWState* optimizer = nullptr);

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint_file(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint_file(const std::string& path);

}  // namespace ternvit
