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

#include "ternvit/kernels.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <sstream>
#include <thread>

namespace ternvit {

PackedGemmPlan make_plan(const TernaryTensorT<float>& w) {
  if (w.rows > PackedGemmPlan::kMaxK)
    throw ValueError("reduction length " + std::to_string(w.rows) +
                     " exceeds the integer-accumulator bound 2^23");
  PackedGemmPlan p;
  p.k = w.rows;
  p.n = w.cols;
  p.codes = unpack_codes(w.packed, w.count());  // raises FormatError on 0b11
  p.alpha = w.alpha;
  p.code_sums.assign(static_cast<std::size_t>(p.n), 0);
  for (Index j = 0; j < p.n; ++j) {
    std::int32_t s = 0;
    for (Index r = 0; r < p.k; ++r) s += p.codes[static_cast<std::size_t>(j * p.k + r)];
    p.code_sums[static_cast<std::size_t>(j)] = s;
  }
  return p;
}

namespace {

// Run fn(j) for every channel j, split across at most thread_cap() threads.
// Channels are disjoint output columns, so the result is identical for any
// thread count.
void for_each_channel(Index n, const std::function<void(Index)>& fn) {
  int threads = static_cast<int>(std::min<Index>(thread_cap(), n));
  if (threads <= 1) {
    for (Index j = 0; j < n; ++j) fn(j);
    return;
  }
  std::vector<std::thread> pool;
  Index chunk = (n + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    Index lo = t * chunk;
    Index hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (Index j = lo; j < hi; ++j) fn(j);
    });
  }
  for (auto& th : pool) th.join();
}

void check_gemm_shapes(Index xk, const PackedGemmPlan& plan) {
  if (xk != plan.k)
    throw ShapeError("gemm reduction mismatch: x has " + std::to_string(xk) +
                     " columns, plan expects " + std::to_string(plan.k));
}

}  // namespace

TensorT<float> ternary_gemm_f32(const TensorT<float>& x, const PackedGemmPlan& plan) {
  if (x.ndim() != 2) throw ShapeError("ternary_gemm_f32 expects 2-D x, got " + shape_str(x.shape()));
  check_gemm_shapes(x.dim(1), plan);
  const Index m = x.dim(0), k = plan.k, n = plan.n;
  TensorT<float> out = TensorT<float>::zeros({m, n});
  const float* xd = x.data();
  float* od = out.data();
  for_each_channel(n, [&](Index j) {
    const std::int8_t* t = plan.codes.data() + j * k;
    const float a = plan.alpha[static_cast<std::size_t>(j)];
    for (Index i = 0; i < m; ++i) {
      const float* row = xd + i * k;
      float sp = 0.0f, sm = 0.0f;
      for (Index kk = 0; kk < k; ++kk) {
        const std::int8_t c = t[kk];
        if (c == 1) sp += row[kk];
        else if (c == -1) sm += row[kk];
      }
      od[i * n + j] = (sp - sm) * a;
    }
  });
  return out;
}

TensorT<float> ternary_gemm_f32(const TensorT<float>& x, const TernaryTensorT<float>& w) {
  return ternary_gemm_f32(x, make_plan(w));
}

TensorT<float> ternary_gemm_i8(const QuantizedActivationT<float>& xq,
                               const PackedGemmPlan& plan) {
  if (xq.shape.size() != 2)
    throw ShapeError("ternary_gemm_i8 expects 2-D activations");
  const Index m = xq.shape[0], k = xq.shape[1];
  check_gemm_shapes(k, plan);
  const Index n = plan.n;
  TensorT<float> out = TensorT<float>::zeros({m, n});
  const std::uint8_t* ud = xq.data.data();
  const double s = static_cast<double>(xq.scale);
  const double x_min = static_cast<double>(xq.offset);
  float* od = out.data();
  for_each_channel(n, [&](Index j) {
    const std::int8_t* t = plan.codes.data() + j * k;
    const double a = static_cast<double>(plan.alpha[static_cast<std::size_t>(j)]);
    const double offs = x_min * plan.code_sums[static_cast<std::size_t>(j)];
    for (Index i = 0; i < m; ++i) {
      const std::uint8_t* row = ud + i * k;
      std::int32_t acc = 0;
      for (Index kk = 0; kk < k; ++kk) acc += static_cast<std::int32_t>(row[kk]) * t[kk];
      od[i * n + j] = static_cast<float>(a * (s * acc + offs));
    }
  });
  return out;
}

TensorT<float> ternary_gemm_i8(const QuantizedActivationT<float>& xq,
                               const TernaryTensorT<float>& w) {
  return ternary_gemm_i8(xq, make_plan(w));
}

namespace {

template <typename F>
double time_best_ns(int reps, F&& body) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    body();
    auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, static_cast<double>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
  }
  return best;
}

}  // namespace

std::vector<BenchRow> run_bench(const std::vector<BenchConfig>& configs, std::uint64_t seed) {
  std::vector<BenchRow> rows;
  for (const auto& cfg : configs) {
    if (cfg.reps < 1) throw ValueError("bench reps must be >= 1");
    std::mt19937 rng(static_cast<std::uint32_t>(seed ^ (cfg.m * 31 + cfg.k * 7 + cfg.n)));
    std::normal_distribution<float> nd(0.0f, 1.0f);
    auto x = TensorT<float>::zeros({cfg.m, cfg.k});
    for (auto& v : x.values()) v = nd(rng);
    auto wreal = TensorT<float>::zeros({cfg.k, cfg.n});
    for (auto& v : wreal.values()) v = nd(rng);
    auto tern = ternarize(wreal);
    auto plan = make_plan(tern);
    auto wd = dequantize_ternary(tern);
    auto xq = quantize_minmax8(x);

    const double flops = 2.0 * cfg.m * cfg.k * cfg.n;
    volatile float sink = 0.0f;

    BenchRow real_row{cfg.m, cfg.k, cfg.n, "real32", cfg.reps, 0, 0,
                      4 * static_cast<std::size_t>(cfg.k * cfg.n)};
    real_row.ns_per_call = time_best_ns(cfg.reps, [&] {
      auto y = TensorT<float>::zeros({cfg.m, cfg.n});
      y.mat().noalias() = x.mat() * wd.mat();
      sink = sink + y.at(0);
    });
    real_row.eff_gflops = flops / real_row.ns_per_call;
    rows.push_back(real_row);

    BenchRow tf{cfg.m, cfg.k, cfg.n, "ternary_f32", cfg.reps, 0, 0,
                packed_weight_bytes(cfg.k, cfg.n)};
    tf.ns_per_call = time_best_ns(cfg.reps, [&] {
      auto y = ternary_gemm_f32(x, plan);
      sink = sink + y.at(0);
    });
    tf.eff_gflops = flops / tf.ns_per_call;
    rows.push_back(tf);

    BenchRow ti{cfg.m, cfg.k, cfg.n, "ternary_i8", cfg.reps, 0, 0,
                packed_weight_bytes(cfg.k, cfg.n)};
    ti.ns_per_call = time_best_ns(cfg.reps, [&] {
      auto y = ternary_gemm_i8(xq, plan);
      sink = sink + y.at(0);
    });
    ti.eff_gflops = flops / ti.ns_per_call;
    rows.push_back(ti);
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  os << "m,k,n,kernel,reps,ns_per_call,eff_gflops,weight_bytes\n";
  for (const auto& r : rows)
    os << r.m << "," << r.k << "," << r.n << "," << r.kernel << "," << r.reps << ","
       << r.ns_per_call << "," << r.eff_gflops << "," << r.weight_bytes << "\n";
  return os.str();
}

}  // namespace ternvit
