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

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ternvit/common.hpp"
#include "ternvit/tensor.hpp"

namespace ternvit {

enum class Granularity : std::uint8_t { kChannel = 0, kLayer = 1 };

// Packed 2-bit code layout, shared with the GEMM kernels and the checkpoint
// format: 4 codes per byte, code i of a byte at bits [2i, 2i+1], column-major
// (channel-contiguous) linear order, no per-channel padding.
// Code map: 0b00 -> 0, 0b01 -> +1, 0b10 -> -1, 0b11 -> invalid.
inline std::size_t packed_size(Index count) {
  return static_cast<std::size_t>((count + 3) / 4);
}

inline std::vector<std::uint8_t> pack_codes(const std::vector<std::int8_t>& codes) {
  std::vector<std::uint8_t> out(packed_size(static_cast<Index>(codes.size())), 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    std::uint8_t bits;
    switch (codes[i]) {
      case 0: bits = 0b00; break;
      case 1: bits = 0b01; break;
      case -1: bits = 0b10; break;
      default:
        throw ValueError("ternary code out of range: " + std::to_string(int(codes[i])));
    }
    out[i / 4] |= static_cast<std::uint8_t>(bits << (2 * (i % 4)));
  }
  return out;
}

inline std::int8_t decode_2bit(std::uint8_t bits) {
  switch (bits & 0b11) {
    case 0b00: return 0;
    case 0b01: return 1;
    case 0b10: return -1;
    default: throw FormatError("invalid packed ternary code 0b11");
  }
}

inline std::vector<std::int8_t> unpack_codes(const std::vector<std::uint8_t>& packed,
                                             Index count) {
  if (packed.size() < packed_size(count))
    throw FormatError("packed code buffer too short: " + std::to_string(packed.size()) +
                      " bytes for " + std::to_string(count) + " codes");
  std::vector<std::int8_t> out(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    std::size_t u = static_cast<std::size_t>(i);
    out[u] = decode_2bit(static_cast<std::uint8_t>(packed[u / 4] >> (2 * (u % 4))));
  }
  return out;
}

/// Ternarized weight matrix: packed codes plus per-channel scale (alpha) and
/// threshold (delta). A channel is an output-feature column of the row-major
/// [n_w x d_out] weight, matching the f*W convention. Layer granularity
/// stores one shared value replicated across channels.
template <typename S>
struct TernaryTensorT {
  Index rows = 0;
  Index cols = 0;
  std::vector<std::uint8_t> packed;
  std::vector<S> alpha;
  std::vector<S> delta;
  Granularity granularity = Granularity::kChannel;

  Index count() const { return rows * cols; }
  std::size_t packed_bytes() const { return packed.size(); }

  std::int8_t code(Index r, Index c) const {
    std::size_t i = static_cast<std::size_t>(c * rows + r);  // column-major
    return decode_2bit(static_cast<std::uint8_t>(packed[i / 4] >> (2 * (i % 4))));
  }
};

/// 8-bit min-max quantized tensor: value = code * scale + offset.
template <typename S>
struct QuantizedActivationT {
  std::vector<Index> shape;
  std::vector<std::uint8_t> data;
  S scale = S(0);   // s in value units per code step
  S offset = S(0);  // x_min
};

/// Per-layer weight bit-width selection. Layers absent from the override map
/// use the default. Normalization and softmax carry no entries here; the
/// model never routes them through a quantizer.
enum class WeightMode : std::uint8_t { kReal32 = 32, kInt8 = 8, kTernary = 2 };

struct QuantizationPolicy {
  WeightMode default_weights = WeightMode::kReal32;
  int activation_bits = 32;  // 32 or 8
  Granularity granularity = Granularity::kChannel;
  std::map<std::string, WeightMode> overrides;

  WeightMode weight_mode(const std::string& layer_id) const {
    auto it = overrides.find(layer_id);
    return it == overrides.end() ? default_weights : it->second;
  }
  bool quantize_activations() const { return activation_bits == 8; }

  void validate() const {
    if (activation_bits != 32 && activation_bits != 8)
      throw ConfigError("activation bit-width must be 32 or 8, got " +
                        std::to_string(activation_bits));
  }
};

namespace detail {

template <typename S>
inline void check_finite_2d(const TensorT<S>& w, const char* op) {
  if (w.ndim() != 2)
    throw ShapeError(std::string(op) + " expects a 2-D matrix, got " + shape_str(w.shape()));
  if (!w.all_finite()) throw ValueError(std::string(op) + ": non-finite input");
}

}  // namespace detail

/// Threshold for one output channel: 0.7 * L1(column) / n_w.
template <typename S>
double channel_threshold(const TensorT<S>& w, Index j) {
  detail::check_finite_2d(w, "channel_threshold");
  if (j < 0 || j >= w.dim(1))
    throw ShapeError("channel index " + std::to_string(j) + " out of " +
                     std::to_string(w.dim(1)));
  double l1 = 0;
  for (Index r = 0; r < w.dim(0); ++r) l1 += std::abs(static_cast<double>(w.at2(r, j)));
  return 0.7 * l1 / static_cast<double>(w.dim(0));
}

/// Three-case code rule: -1 if w < -delta, 0 if -delta <= w < delta, +1 if
/// w >= delta. delta == 0 means an all-zero channel and maps everything to 0.
inline std::int8_t ternary_code(double w, double delta) {
  if (delta == 0.0) return 0;
  if (w < -delta) return -1;
  if (w < delta) return 0;
  return 1;
}

/// Ternarize a weight matrix. Channel granularity gives per-column delta and
/// alpha; layer granularity uses one delta and one alpha computed over the
/// whole matrix (ablation baseline). Thresholds and scales are accumulated
/// in double for determinism, then narrowed to S.
template <typename S>
TernaryTensorT<S> ternarize(const TensorT<S>& w,
                            Granularity granularity = Granularity::kChannel) {
  detail::check_finite_2d(w, "ternarize");
  const Index n = w.dim(0), d = w.dim(1);
  TernaryTensorT<S> t;
  t.rows = n;
  t.cols = d;
  t.granularity = granularity;
  t.alpha.resize(static_cast<std::size_t>(d));
  t.delta.resize(static_cast<std::size_t>(d));

  std::vector<double> delta_d(static_cast<std::size_t>(d));
  if (granularity == Granularity::kChannel) {
    for (Index j = 0; j < d; ++j) {
      double l1 = 0;
      for (Index r = 0; r < n; ++r) l1 += std::abs(static_cast<double>(w.at2(r, j)));
      double mean_abs = l1 / static_cast<double>(n);
      delta_d[static_cast<std::size_t>(j)] = 0.7 * mean_abs;
      t.alpha[static_cast<std::size_t>(j)] = static_cast<S>(mean_abs);
      t.delta[static_cast<std::size_t>(j)] = static_cast<S>(0.7 * mean_abs);
    }
  } else {
    double l1 = 0;
    for (Index j = 0; j < d; ++j)
      for (Index r = 0; r < n; ++r) l1 += std::abs(static_cast<double>(w.at2(r, j)));
    double mean_abs = l1 / static_cast<double>(n * d);
    for (Index j = 0; j < d; ++j) {
      delta_d[static_cast<std::size_t>(j)] = 0.7 * mean_abs;
      t.alpha[static_cast<std::size_t>(j)] = static_cast<S>(mean_abs);
      t.delta[static_cast<std::size_t>(j)] = static_cast<S>(0.7 * mean_abs);
    }
  }

  std::vector<std::int8_t> codes(static_cast<std::size_t>(n * d));
  for (Index j = 0; j < d; ++j)
    for (Index r = 0; r < n; ++r)
      codes[static_cast<std::size_t>(j * n + r)] =
          ternary_code(static_cast<double>(w.at2(r, j)), delta_d[static_cast<std::size_t>(j)]);
  t.packed = pack_codes(codes);
  return t;
}

/// Reconstruct the real-valued matrix: element [r, j] = alpha[j] * code[r, j].
template <typename S>
TensorT<S> dequantize_ternary(const TernaryTensorT<S>& t) {
  TensorT<S> out = TensorT<S>::zeros({t.rows, t.cols});
  auto codes = unpack_codes(t.packed, t.count());
  for (Index j = 0; j < t.cols; ++j) {
    S a = t.alpha[static_cast<std::size_t>(j)];
    for (Index r = 0; r < t.rows; ++r)
      out.at2(r, j) = a * static_cast<S>(codes[static_cast<std::size_t>(j * t.rows + r)]);
  }
  return out;
}

inline double round_half_away(double x) { return std::round(x); }

/// Min-max 8-bit quantization with a caller-supplied range. Values outside
/// [lo, hi] clamp to the nearest code. Degenerate range (hi == lo) stores
/// scale 0 and code 0 everywhere, reconstructing exactly lo.
template <typename S>
QuantizedActivationT<S> quantize_minmax8_range(const TensorT<S>& f, S lo, S hi) {
  if (!f.all_finite()) throw ValueError("quantize_minmax8: non-finite input");
  if (hi < lo) throw ValueError("quantize_minmax8: range max below min");
  QuantizedActivationT<S> q;
  q.shape = f.shape();
  q.offset = lo;
  const double s = (static_cast<double>(hi) - static_cast<double>(lo)) / 255.0;
  q.scale = static_cast<S>(s);
  q.data.resize(static_cast<std::size_t>(f.count()));
  if (s == 0.0) return q;  // all codes already 0
  for (Index i = 0; i < f.count(); ++i) {
    double v = round_half_away((static_cast<double>(f.at(i)) - static_cast<double>(lo)) / s);
    v = std::min(255.0, std::max(0.0, v));
    q.data[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(v);
  }
  return q;
}

/// Dynamic min-max 8-bit quantization over the tensor's own range.
template <typename S>
QuantizedActivationT<S> quantize_minmax8(const TensorT<S>& f) {
  if (f.count() == 0) throw ValueError("quantize_minmax8: empty tensor");
  if (!f.all_finite()) throw ValueError("quantize_minmax8: non-finite input");
  S lo = f.at(0), hi = f.at(0);
  for (Index i = 1; i < f.count(); ++i) {
    lo = std::min(lo, f.at(i));
    hi = std::max(hi, f.at(i));
  }
  return quantize_minmax8_range(f, lo, hi);
}

template <typename S>
TensorT<S> dequantize_minmax8(const QuantizedActivationT<S>& q) {
  TensorT<S> out = TensorT<S>::zeros(q.shape);
  for (Index i = 0; i < out.count(); ++i)
    out.at(i) = static_cast<S>(q.data[static_cast<std::size_t>(i)]) * q.scale + q.offset;
  return out;
}

/// 8-bit weight matrix quantized per output channel: column j carries its
/// own min-max range, stored as (scale, offset) pairs.
template <typename S>
struct Int8WeightT {
  Index rows = 0;
  Index cols = 0;
  std::vector<std::uint8_t> codes;  // row-major, rows x cols
  std::vector<S> scale;             // cols
  std::vector<S> offset;            // cols
};

template <typename S>
Int8WeightT<S> quantize_weights_int8(const TensorT<S>& w) {
  detail::check_finite_2d(w, "quantize_weights_int8");
  const Index n = w.dim(0), d = w.dim(1);
  Int8WeightT<S> q;
  q.rows = n;
  q.cols = d;
  q.codes.resize(static_cast<std::size_t>(n * d));
  q.scale.resize(static_cast<std::size_t>(d));
  q.offset.resize(static_cast<std::size_t>(d));
  for (Index j = 0; j < d; ++j) {
    S lo = w.at2(0, j), hi = w.at2(0, j);
    for (Index r = 1; r < n; ++r) {
      lo = std::min(lo, w.at2(r, j));
      hi = std::max(hi, w.at2(r, j));
    }
    const double s = (static_cast<double>(hi) - static_cast<double>(lo)) / 255.0;
    q.scale[static_cast<std::size_t>(j)] = static_cast<S>(s);
    q.offset[static_cast<std::size_t>(j)] = lo;
    for (Index r = 0; r < n; ++r) {
      double v = 0.0;
      if (s != 0.0) {
        v = std::round((static_cast<double>(w.at2(r, j)) - static_cast<double>(lo)) / s);
        v = std::min(255.0, std::max(0.0, v));
      }
      q.codes[static_cast<std::size_t>(r * d + j)] = static_cast<std::uint8_t>(v);
    }
  }
  return q;
}

template <typename S>
TensorT<S> dequantize_weights_int8(const Int8WeightT<S>& q) {
  TensorT<S> out = TensorT<S>::zeros({q.rows, q.cols});
  for (Index r = 0; r < q.rows; ++r)
    for (Index j = 0; j < q.cols; ++j)
      out.at2(r, j) = static_cast<S>(q.codes[static_cast<std::size_t>(r * q.cols + j)]) *
                          q.scale[static_cast<std::size_t>(j)] +
                      q.offset[static_cast<std::size_t>(j)];
  return out;
}

/// Straight-through gradient of ternarize: the quantizer is treated as the
/// identity scaled by the (detached) channel alpha, so
/// dW[k,j] = upstream[k,j] * alpha[j]. Alpha receives no gradient.
template <typename S>
TensorT<S> ste_backward_ternarize(const TensorT<S>& upstream, const TensorT<S>& w,
                                  Granularity granularity = Granularity::kChannel) {
  if (!upstream.same_shape(w))
    throw ShapeError("ste_backward_ternarize: upstream " + shape_str(upstream.shape()) +
                     " vs W " + shape_str(w.shape()));
  auto t = ternarize(w, granularity);
  TensorT<S> out = TensorT<S>::zeros(w.shape());
  for (Index j = 0; j < w.dim(1); ++j) {
    S a = t.alpha[static_cast<std::size_t>(j)];
    for (Index r = 0; r < w.dim(0); ++r) out.at2(r, j) = upstream.at2(r, j) * a;
  }
  return out;
}

/// Straight-through gradient of round: identity.
template <typename S>
TensorT<S> ste_backward_round(const TensorT<S>& upstream) {
  return upstream.clone();
}

/// Fake-quantized weight: forward is dequantize(ternarize(W)), backward is
/// the straight-through rule above. Recorded on the active tape.
template <typename S>
TensorT<S> fake_quant_ternary(const TensorT<S>& w,
                              Granularity granularity = Granularity::kChannel) {
  auto t = ternarize(w, granularity);
  TensorT<S> out = dequantize_ternary(t);
  if (detail::should_track<S>({&w})) {
    std::vector<S> alpha = t.alpha;
    detail::record<S>(out, [w, out, alpha]() {
      if (!w.tracked()) return;
      w.ensure_grad();
      auto wg = w.grad_mat();
      auto og = out.grad_mat();
      for (Index j = 0; j < out.dim(1); ++j)
        wg.col(j) += og.col(j) * alpha[static_cast<std::size_t>(j)];
    });
  }
  return out;
}

/// Fake-quantized activation: forward is dequantize(quantize_minmax8(x)),
/// backward passes gradients through unchanged (round treated as identity,
/// range parameters detached).
template <typename S>
TensorT<S> fake_quant_minmax8(const TensorT<S>& x) {
  TensorT<S> out = dequantize_minmax8(quantize_minmax8(x));
  if (detail::should_track<S>({&x})) {
    detail::record<S>(out, [x, out]() { detail::acc_vec(x, out.grad_vec()); });
  }
  return out;
}

/// Fake-quantized 8-bit weight (per output channel). Straight-through
/// backward: round is identity, ranges are detached, so gradients pass
/// through unchanged.
template <typename S>
TensorT<S> fake_quant_int8_weights(const TensorT<S>& w) {
  TensorT<S> out = dequantize_weights_int8(quantize_weights_int8(w));
  if (detail::should_track<S>({&w})) {
    detail::record<S>(out, [w, out]() { detail::acc_vec(w, out.grad_vec()); });
  }
  return out;
}

/// Frozen-calibration variant: quantizes against a fixed range instead of
/// the tensor's own min/max. Same straight-through backward.
template <typename S>
TensorT<S> fake_quant_minmax8_range(const TensorT<S>& x, S lo, S hi) {
  TensorT<S> out = dequantize_minmax8(quantize_minmax8_range(x, lo, hi));
  if (detail::should_track<S>({&x})) {
    detail::record<S>(out, [x, out]() { detail::acc_vec(x, out.grad_vec()); });
  }
  return out;
}

}  // namespace ternvit
