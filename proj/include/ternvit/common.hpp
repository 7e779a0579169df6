/*
 * Copyright 2026 The ternvit Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>

namespace ternvit {

using Index = std::int64_t;

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Tensor shapes incompatible with the requested operation.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

/// Non-finite or otherwise out-of-domain values.
class ValueError : public Error {
 public:
  explicit ValueError(const std::string& msg) : Error("value error: " + msg) {}
};

/// Malformed binary data (checkpoints, packed codes, IDX files).
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error("format error: " + msg) {}
};

/// Invalid run configuration or policy.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

/// Filesystem failures, always carrying the offending path.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

/// Violated API contract (e.g. backward on a non-scalar loss).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& msg) : Error("contract error: " + msg) {}
};

/// Training loop aborted (non-finite loss); message carries the dump.
class TrainAbort : public Error {
 public:
  explicit TrainAbort(const std::string& msg) : Error("training aborted: " + msg) {}
};

/// FNV-1a 64-bit hash, used for config digests and parameter snapshots.
inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t seed = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

/// Thread cap for internal parallelism: TERNVIT_THREADS, default 1.
inline int thread_cap() {
  if (const char* env = std::getenv("TERNVIT_THREADS")) {
    int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

}  // namespace ternvit
