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
#include <string>
#include <vector>

#include "ternvit/quantize.hpp"
#include "ternvit/tensor.hpp"

namespace ternvit {

/// Execution plan for y = x * W with a ternarized W [k x n]. Codes are held
/// unpacked per channel for streaming; per-channel code sums fold the
/// activation offset analytically on the int8 path. Accumulation precision:
/// 32-bit float on the float path, 32-bit integer on the int8 path. The
/// integer accumulator stays below 2^31 for k <= 2^23 (255 * 2^23 one-sided
/// term bound), enforced at plan build.
struct PackedGemmPlan {
  Index k = 0;
  Index n = 0;
  std::vector<std::int8_t> codes;      // column-major, k per channel
  std::vector<float> alpha;            // n
  std::vector<std::int32_t> code_sums; // n, sum of codes per channel
  Index row_tile = 64;                 // rows of x processed per sweep

  static constexpr Index kMaxK = Index(1) << 23;
};

PackedGemmPlan make_plan(const TernaryTensorT<float>& w);

/// y[m x n] = x[m x k] * dequantize(w), one alpha multiply per output
/// element: (sum of x where code +1, minus sum where code -1) * alpha[j].
/// Sequential reduction over k per output element; parallelism, if any, is
/// across output channels only (TERNVIT_THREADS).
TensorT<float> ternary_gemm_f32(const TensorT<float>& x, const PackedGemmPlan& plan);
TensorT<float> ternary_gemm_f32(const TensorT<float>& x, const TernaryTensorT<float>& w);

/// Integer-path GEMM on raw u8 activation codes:
/// y = alpha[j] * (s * sum(u * t) + x_min * code_sums[j]).
TensorT<float> ternary_gemm_i8(const QuantizedActivationT<float>& xq,
                               const PackedGemmPlan& plan);
TensorT<float> ternary_gemm_i8(const QuantizedActivationT<float>& xq,
                               const TernaryTensorT<float>& w);

/// Bytes of a packed ternary weight [k x n]: 2-bit codes plus f32 alphas.
inline std::size_t packed_weight_bytes(Index k, Index n) {
  return packed_size(k * n) + 4 * static_cast<std::size_t>(n);
}

struct BenchRow {
  Index m = 0, k = 0, n = 0;
  std::string kernel;
  int reps = 0;
  double ns_per_call = 0;
  double eff_gflops = 0;
  std::size_t weight_bytes = 0;
};

struct BenchConfig {
  Index m = 0, k = 0, n = 0;
  int reps = 1;
};

/// Times real32 (dense float), ternary_f32, and ternary_i8 on a seeded
/// random workload per configuration and reports effective GFLOP/s against
/// the 2*m*k*n dense operation count.
std::vector<BenchRow> run_bench(const std::vector<BenchConfig>& configs, std::uint64_t seed);

std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace ternvit
