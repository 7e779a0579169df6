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
#include <random>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "ternvit/common.hpp"
#include "ternvit/kernels.hpp"
#include "ternvit/quantize.hpp"
#include "ternvit/tensor.hpp"

namespace ternvit {

struct ViTConfig {
  Index image_size = 224;
  Index patch_size = 16;
  Index in_channels = 3;
  Index embed_dim = 192;
  Index depth = 12;
  Index num_heads = 3;
  double mlp_ratio = 4.0;
  Index num_classes = 1000;
  // Attention scores divide by sqrt(embed_dim) by default; this flag selects
  // the conventional per-head sqrt(embed_dim / num_heads) instead.
  bool attn_scale_per_head = false;

  Index grid() const { return image_size / patch_size; }
  Index patches() const { return grid() * grid(); }
  Index tokens() const { return patches() + 1; }  // class token included
  Index head_dim() const { return embed_dim / num_heads; }
  Index patch_dim() const { return patch_size * patch_size * in_channels; }
  Index mlp_hidden() const {
    return static_cast<Index>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
  }

  void validate() const {
    auto positive = [](Index v, const char* name) {
      if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(image_size, "image_size");
    positive(patch_size, "patch_size");
    positive(in_channels, "in_channels");
    positive(embed_dim, "embed_dim");
    positive(depth, "depth");
    positive(num_heads, "num_heads");
    positive(num_classes, "num_classes");
    if (mlp_ratio <= 0) throw ConfigError("mlp_ratio must be positive");
    if (image_size % patch_size != 0)
      throw ConfigError("image_size " + std::to_string(image_size) +
                        " not divisible by patch_size " + std::to_string(patch_size));
    if (embed_dim % num_heads != 0)
      throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                        " not divisible by num_heads " + std::to_string(num_heads));
    if (mlp_hidden() <= 0) throw ConfigError("mlp hidden width must be positive");
  }
};

/// Quantizable linear layer: a latent weight [d_in x d_out], an optional
/// bias, and the policy-selected mode. During training the quantizer is
/// re-applied from the latent weight on every forward.
template <typename S>
struct LinearLayerT {
  std::string id;
  TensorT<S> w;
  TensorT<S> b;  // invalid handle when the layer has no bias
  WeightMode mode = WeightMode::kReal32;
  Granularity granularity = Granularity::kChannel;

  /// Weight as seen by the forward pass under the active mode.
  TensorT<S> effective_weight() const {
    switch (mode) {
      case WeightMode::kReal32: return w;
      case WeightMode::kTernary: return fake_quant_ternary(w, granularity);
      case WeightMode::kInt8: return fake_quant_int8_weights(w);
    }
    throw ContractError("unreachable weight mode");
  }

  TensorT<S> forward(const TensorT<S>& x) const {
    auto y = matmul(x, effective_weight());
    return b.valid() ? add_bias(y, b) : y;
  }
};

struct SizeReport {
  std::size_t real32_bytes = 0;
  std::size_t policy_bytes = 0;
  double ratio = 0.0;
  double real32_mb() const { return static_cast<double>(real32_bytes) / 1.0e6; }
  double policy_mb() const { return static_cast<double>(policy_bytes) / 1.0e6; }
};

/// Quantizable weight-matrix shapes of a configuration, in parameter order.
inline std::vector<std::pair<std::string, std::pair<Index, Index>>> weight_matrix_shapes(
    const ViTConfig& cfg) {
  std::vector<std::pair<std::string, std::pair<Index, Index>>> out;
  out.push_back({"patch_embed", {cfg.patch_dim(), cfg.embed_dim}});
  for (Index i = 0; i < cfg.depth; ++i) {
    std::string p = "block" + std::to_string(i) + ".";
    out.push_back({p + "attn.wq", {cfg.embed_dim, cfg.embed_dim}});
    out.push_back({p + "attn.wk", {cfg.embed_dim, cfg.embed_dim}});
    out.push_back({p + "attn.wv", {cfg.embed_dim, cfg.embed_dim}});
    out.push_back({p + "attn.wo", {cfg.embed_dim, cfg.embed_dim}});
    out.push_back({p + "mlp.fc1", {cfg.embed_dim, cfg.mlp_hidden()}});
    out.push_back({p + "mlp.fc2", {cfg.mlp_hidden(), cfg.embed_dim}});
  }
  out.push_back({"head", {cfg.embed_dim, cfg.num_classes}});
  return out;
}

/// Storage accounting over the policy-governed weight matrices: 4 B per
/// real32 weight; 1 B per int8 weight plus one scale/offset pair per tensor;
/// 2-bit packed codes plus 4 B per-channel alpha for ternary. Biases, norm
/// affines, class token and positional table stay real-valued in every mode
/// and are excluded from both sides of the ratio.
inline SizeReport model_size_bytes(const ViTConfig& cfg, const QuantizationPolicy& policy) {
  cfg.validate();
  SizeReport rep;
  for (const auto& [id, dims] : weight_matrix_shapes(cfg)) {
    const Index k = dims.first, n = dims.second;
    const std::size_t params = static_cast<std::size_t>(k * n);
    rep.real32_bytes += 4 * params;
    switch (policy.weight_mode(id)) {
      case WeightMode::kReal32: rep.policy_bytes += 4 * params; break;
      case WeightMode::kInt8: rep.policy_bytes += params + 8; break;
      case WeightMode::kTernary: rep.policy_bytes += packed_weight_bytes(k, n); break;
    }
  }
  rep.ratio = static_cast<double>(rep.real32_bytes) / static_cast<double>(rep.policy_bytes);
  return rep;
}

/// Total trainable parameter count (weights, biases, norms, class token,
/// positional embeddings).
inline Index parameter_count(const ViTConfig& cfg) {
  const Index d = cfg.embed_dim, h = cfg.mlp_hidden();
  Index n = cfg.patch_dim() * d + d;  // patch embedding
  n += d;                             // class token
  n += cfg.tokens() * d;              // positional embeddings
  n += cfg.depth * (2 * d + 4 * d * d + 2 * d + d * h + h + h * d + d);
  n += 2 * d;                         // final norm
  n += d * cfg.num_classes + cfg.num_classes;
  return n;
}

enum class FwdMode : std::uint8_t {
  kGraph = 0,   // tensor-op graph, differentiable, used for training
  kKernel = 1,  // packed ternary kernels for float inference
};

template <typename S>
class VisionTransformerT {
 public:
  VisionTransformerT(ViTConfig cfg, QuantizationPolicy policy, std::uint64_t seed)
      : cfg_(cfg), policy_(policy) {
    cfg_.validate();
    policy_.validate();
    build(seed);
    apply_policy();
  }

  const ViTConfig& config() const { return cfg_; }
  const QuantizationPolicy& policy() const { return policy_; }

  /// Swap the quantization policy in place; latent weights are untouched, so
  /// a mode switch hands the exact same latents to the new quantizer.
  void set_policy(QuantizationPolicy policy) {
    policy.validate();
    policy_ = policy;
    apply_policy();
  }

  std::vector<std::pair<std::string, TensorT<S>>>& parameters() { return params_; }
  const std::vector<std::pair<std::string, TensorT<S>>>& parameters() const { return params_; }

  TensorT<S> parameter(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw ContractError("unknown parameter " + name);
  }

  std::vector<LinearLayerT<S>*> weight_layers() {
    std::vector<LinearLayerT<S>*> out;
    out.push_back(&patch_embed_);
    for (auto& blk : blocks_) {
      out.push_back(&blk.wq);
      out.push_back(&blk.wk);
      out.push_back(&blk.wv);
      out.push_back(&blk.wo);
      out.push_back(&blk.fc1);
      out.push_back(&blk.fc2);
    }
    out.push_back(&head_);
    return out;
  }

  Index count_parameters() const {
    Index n = 0;
    for (const auto& [name, t] : params_) n += t.count();
    return n;
  }

  /// images: [B, C, H, W]; returns logits [B, num_classes].
  TensorT<S> forward(const TensorT<S>& images, FwdMode mode = FwdMode::kGraph) const {
    check_images(images);
    if (mode == FwdMode::kKernel) return forward_kernel(images);
    const Index batch = images.dim(0);
    std::vector<TensorT<S>> logit_rows;
    logit_rows.reserve(static_cast<std::size_t>(batch));
    for (Index sample = 0; sample < batch; ++sample)
      logit_rows.push_back(forward_one(extract_patches(images, sample)));
    return batch == 1 ? logit_rows[0] : concat_rows(logit_rows);
  }

  /// Self-attention of one block applied to [tokens x d] features.
  TensorT<S> attention_block(const TensorT<S>& f_in, Index block) const {
    check_block(f_in, block);
    return attention(blocks_[static_cast<std::size_t>(block)], f_in);
  }

  /// MLP of one block applied to [tokens x d] features.
  TensorT<S> mlp_block(const TensorT<S>& f_in, Index block) const {
    check_block(f_in, block);
    return mlp(blocks_[static_cast<std::size_t>(block)], f_in);
  }

  /// Per-head attention maps A^i of one block, computed exactly as the
  /// forward pass computes them (softmax output, before the 8-bit input
  /// quantization of the following matmul).
  std::vector<TensorT<S>> attention_maps(const TensorT<S>& f_in, Index block) const {
    check_block(f_in, block);
    const auto& blk = blocks_[static_cast<std::size_t>(block)];
    auto hq = fq_act(f_in);
    auto q = fq_act(blk.wq.forward(hq));
    auto k = fq_act(blk.wk.forward(hq));
    const Index dh = cfg_.head_dim();
    std::vector<TensorT<S>> maps;
    for (Index i = 0; i < cfg_.num_heads; ++i) {
      auto qi = slice_cols(q, i * dh, dh);
      auto ki = slice_cols(k, i * dh, dh);
      maps.push_back(softmax_lastdim(scale(matmul_transB(qi, ki), attn_scale())));
    }
    return maps;
  }

  /// Patch rows [patches x patch_dim] for one sample, channel-major within
  /// each patch, patch grid scanned row-major. Inputs are data, not
  /// parameters, so this is plain untracked rearrangement.
  TensorT<S> extract_patches(const TensorT<S>& images, Index sample) const {
    const Index p = cfg_.patch_size, g = cfg_.grid(), c = cfg_.in_channels;
    const Index hw = cfg_.image_size;
    TensorT<S> out = TensorT<S>::zeros({cfg_.patches(), cfg_.patch_dim()});
    const S* src = images.data() + sample * c * hw * hw;
    for (Index gy = 0; gy < g; ++gy)
      for (Index gx = 0; gx < g; ++gx) {
        S* dst = out.data() + (gy * g + gx) * cfg_.patch_dim();
        Index idx = 0;
        for (Index ch = 0; ch < c; ++ch)
          for (Index py = 0; py < p; ++py)
            for (Index px = 0; px < p; ++px)
              dst[idx++] = src[ch * hw * hw + (gy * p + py) * hw + (gx * p + px)];
      }
    return out;
  }

 private:
  struct Block {
    TensorT<S> ln1_g, ln1_b, ln2_g, ln2_b;
    LinearLayerT<S> wq, wk, wv, wo, fc1, fc2;
  };

  void check_block(const TensorT<S>& f_in, Index block) const {
    if (block < 0 || block >= cfg_.depth)
      throw ShapeError("block index " + std::to_string(block) + " out of " +
                       std::to_string(cfg_.depth));
    if (f_in.ndim() != 2 || f_in.dim(1) != cfg_.embed_dim)
      throw ShapeError("block input " + shape_str(f_in.shape()) + " incompatible with d=" +
                       std::to_string(cfg_.embed_dim));
  }

  void check_images(const TensorT<S>& images) const {
    if (images.ndim() != 4)
      throw ShapeError("expected images [B, C, H, W], got " + shape_str(images.shape()));
    if (images.dim(1) != cfg_.in_channels || images.dim(2) != cfg_.image_size ||
        images.dim(3) != cfg_.image_size)
      throw ShapeError("image dims " + shape_str(images.shape()) + " do not match config [*, " +
                       std::to_string(cfg_.in_channels) + ", " +
                       std::to_string(cfg_.image_size) + ", " +
                       std::to_string(cfg_.image_size) + "]");
  }

  TensorT<S> fq_act(const TensorT<S>& x) const {
    return policy_.quantize_activations() ? fake_quant_minmax8(x) : x;
  }

  S attn_scale() const {
    const double dim = cfg_.attn_scale_per_head ? static_cast<double>(cfg_.head_dim())
                                                : static_cast<double>(cfg_.embed_dim);
    return static_cast<S>(1.0 / std::sqrt(dim));
  }

  TensorT<S> attention(const Block& blk, const TensorT<S>& h) const {
    auto hq = fq_act(h);
    auto q = fq_act(blk.wq.forward(hq));
    auto k = fq_act(blk.wk.forward(hq));
    auto v = fq_act(blk.wv.forward(hq));
    const Index dh = cfg_.head_dim();
    std::vector<TensorT<S>> heads;
    heads.reserve(static_cast<std::size_t>(cfg_.num_heads));
    for (Index i = 0; i < cfg_.num_heads; ++i) {
      auto qi = slice_cols(q, i * dh, dh);
      auto ki = slice_cols(k, i * dh, dh);
      auto vi = slice_cols(v, i * dh, dh);
      auto a = softmax_lastdim(scale(matmul_transB(qi, ki), attn_scale()));
      heads.push_back(matmul(fq_act(a), vi));
    }
    auto cat = cfg_.num_heads == 1 ? heads[0] : concat_cols(heads);
    return blk.wo.forward(fq_act(cat));
  }

  TensorT<S> mlp(const Block& blk, const TensorT<S>& h) const {
    auto mid = gelu(blk.fc1.forward(fq_act(h)));
    return blk.fc2.forward(fq_act(mid));
  }

  TensorT<S> forward_one(const TensorT<S>& patches) const {
    auto emb = patch_embed_.forward(fq_act(patches));
    auto tokens = add(concat_rows(std::vector<TensorT<S>>{cls_, emb}), pos_);
    for (const auto& blk : blocks_) {
      tokens = add(tokens, attention(blk, layernorm(tokens, blk.ln1_g, blk.ln1_b)));
      tokens = add(tokens, mlp(blk, layernorm(tokens, blk.ln2_g, blk.ln2_b)));
    }
    auto cls_row = slice_rows(layernorm(tokens, norm_g_, norm_b_), 0, 1);
    return head_.forward(fq_act(cls_row));
  }

  // Inference path on packed ternary kernels (float only, outside any tape).
  // Ternary-mode layers run ternary_gemm_f32 on plans built once per call;
  // everything else follows the graph-path arithmetic.
  TensorT<S> forward_kernel(const TensorT<S>& images) const {
    if constexpr (!std::is_same_v<S, float>) {
      throw ContractError("kernel forward path requires the float instantiation");
    } else {
      if (GradTape<S>::active() != nullptr)
        throw ContractError("kernel forward path is not differentiable");
      std::vector<std::pair<const LinearLayerT<S>*, PackedGemmPlan>> plans;
      auto self = const_cast<VisionTransformerT*>(this);
      for (auto* layer : self->weight_layers())
        if (layer->mode == WeightMode::kTernary)
          plans.emplace_back(layer, make_plan(ternarize(layer->w, layer->granularity)));
      auto lin = [&](const LinearLayerT<S>& layer, const TensorT<S>& x) {
        for (auto& [lp, plan] : plans)
          if (lp == &layer) {
            auto y = ternary_gemm_f32(x, plan);
            return layer.b.valid() ? add_bias(y, layer.b) : y;
          }
        return layer.forward(x);
      };
      const Index batch = images.dim(0);
      std::vector<TensorT<S>> logit_rows;
      for (Index sample = 0; sample < batch; ++sample) {
        auto emb = lin(patch_embed_, fq_act(extract_patches(images, sample)));
        auto tokens = add(concat_rows(std::vector<TensorT<S>>{cls_, emb}), pos_);
        for (const auto& blk : blocks_) {
          auto h = fq_act(layernorm(tokens, blk.ln1_g, blk.ln1_b));
          auto q = fq_act(lin(blk.wq, h));
          auto k = fq_act(lin(blk.wk, h));
          auto v = fq_act(lin(blk.wv, h));
          const Index dh = cfg_.head_dim();
          std::vector<TensorT<S>> heads;
          for (Index i = 0; i < cfg_.num_heads; ++i) {
            auto qi = slice_cols(q, i * dh, dh);
            auto ki = slice_cols(k, i * dh, dh);
            auto vi = slice_cols(v, i * dh, dh);
            auto a = softmax_lastdim(scale(matmul_transB(qi, ki), attn_scale()));
            heads.push_back(matmul(fq_act(a), vi));
          }
          auto cat = cfg_.num_heads == 1 ? heads[0] : concat_cols(heads);
          tokens = add(tokens, lin(blk.wo, fq_act(cat)));
          auto h2 = fq_act(layernorm(tokens, blk.ln2_g, blk.ln2_b));
          auto mid = fq_act(gelu(lin(blk.fc1, h2)));
          tokens = add(tokens, lin(blk.fc2, mid));
        }
        auto cls_row = slice_rows(layernorm(tokens, norm_g_, norm_b_), 0, 1);
        logit_rows.push_back(lin(head_, fq_act(cls_row)));
      }
      return batch == 1 ? logit_rows[0] : concat_rows(logit_rows);
    }
  }

  TensorT<S> init_normal(std::mt19937& rng, std::vector<Index> shape, double sd) {
    std::normal_distribution<double> d(0.0, sd);
    auto t = TensorT<S>::zeros(std::move(shape));
    for (auto& v : t.values()) v = static_cast<S>(d(rng));
    t.set_requires_grad(true);
    return t;
  }

  TensorT<S> init_const(std::vector<Index> shape, S v) {
    auto t = TensorT<S>::full(std::move(shape), v);
    t.set_requires_grad(true);
    return t;
  }

  void build(std::uint64_t seed) {
    std::mt19937 rng(static_cast<std::uint32_t>(seed));
    const Index d = cfg_.embed_dim, h = cfg_.mlp_hidden();
    const double sd = 0.02;

    auto reg = [&](const std::string& name, TensorT<S> t) {
      params_.push_back({name, t});
      return t;
    };
    auto make_linear = [&](const std::string& id, Index din, Index dout, bool bias) {
      LinearLayerT<S> l;
      l.id = id;
      l.w = reg(id + ".w", init_normal(rng, {din, dout}, sd));
      if (bias) l.b = reg(id + ".b", init_const({dout}, S(0)));
      return l;
    };

    patch_embed_ = make_linear("patch_embed", cfg_.patch_dim(), d, true);
    cls_ = reg("cls", init_normal(rng, {1, d}, sd));
    pos_ = reg("pos", init_normal(rng, {cfg_.tokens(), d}, sd));
    blocks_.resize(static_cast<std::size_t>(cfg_.depth));
    for (Index i = 0; i < cfg_.depth; ++i) {
      auto& blk = blocks_[static_cast<std::size_t>(i)];
      std::string p = "block" + std::to_string(i) + ".";
      blk.ln1_g = reg(p + "ln1.g", init_const({d}, S(1)));
      blk.ln1_b = reg(p + "ln1.b", init_const({d}, S(0)));
      blk.wq = make_linear(p + "attn.wq", d, d, false);
      blk.wk = make_linear(p + "attn.wk", d, d, false);
      blk.wv = make_linear(p + "attn.wv", d, d, false);
      blk.wo = make_linear(p + "attn.wo", d, d, false);
      blk.ln2_g = reg(p + "ln2.g", init_const({d}, S(1)));
      blk.ln2_b = reg(p + "ln2.b", init_const({d}, S(0)));
      blk.fc1 = make_linear(p + "mlp.fc1", d, h, true);
      blk.fc2 = make_linear(p + "mlp.fc2", h, d, true);
    }
    norm_g_ = reg("norm.g", init_const({d}, S(1)));
    norm_b_ = reg("norm.b", init_const({d}, S(0)));
    head_ = make_linear("head", d, cfg_.num_classes, true);
  }

  void apply_policy() {
    std::vector<std::string> known;
    for (auto* layer : weight_layers()) known.push_back(layer->id);
    for (const auto& [id, mode] : policy_.overrides) {
      bool found = false;
      for (const auto& k : known) found = found || k == id;
      if (!found) throw ConfigError("policy references unknown layer-id: " + id);
    }
    for (auto* layer : weight_layers()) {
      layer->mode = policy_.weight_mode(layer->id);
      layer->granularity = policy_.granularity;
    }
  }

  ViTConfig cfg_;
  QuantizationPolicy policy_;
  std::vector<std::pair<std::string, TensorT<S>>> params_;
  LinearLayerT<S> patch_embed_, head_;
  TensorT<S> cls_, pos_, norm_g_, norm_b_;
  std::vector<Block> blocks_;
};

using VisionTransformer = VisionTransformerT<float>;

/// The standard deployment policy: ternary transformer body, 8-bit patch
/// embedding and classification head, 8-bit activations.
inline QuantizationPolicy ternary_policy() {
  QuantizationPolicy p;
  p.default_weights = WeightMode::kTernary;
  p.activation_bits = 8;
  p.overrides["patch_embed"] = WeightMode::kInt8;
  p.overrides["head"] = WeightMode::kInt8;
  return p;
}

inline QuantizationPolicy real32_policy() {
  QuantizationPolicy p;
  p.default_weights = WeightMode::kReal32;
  p.activation_bits = 32;
  return p;
}

/// Intermediate phase of progressive training: everything the deployment
/// policy would quantize runs at 8 bits.
inline QuantizationPolicy int8_policy() {
  QuantizationPolicy p;
  p.default_weights = WeightMode::kInt8;
  p.activation_bits = 8;
  return p;
}

}  // namespace ternvit
