#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "helpers.hpp"
#include "ternvit/vit.hpp"

using namespace ternvit;
using tv_test::max_grad_err;
using tv_test::randn;
using tv_test::rel_err;

using TD = TensorT<double>;
using TF = TensorT<float>;

namespace {

ViTConfig toy_config() {
  ViTConfig c;
  c.image_size = 16;
  c.patch_size = 8;
  c.in_channels = 1;
  c.embed_dim = 16;
  c.depth = 2;
  c.num_heads = 2;
  c.mlp_ratio = 4.0;
  c.num_classes = 10;
  return c;
}

ViTConfig deit(Index d, Index heads) {
  ViTConfig c;
  c.embed_dim = d;
  c.num_heads = heads;
  return c;
}

template <typename S>
TensorT<S> rand_images(std::mt19937& rng, const ViTConfig& c, Index batch) {
  return randn<S>(rng, {batch, c.in_channels, c.image_size, c.image_size});
}

}  // namespace

TEST_CASE("config validation") {
  auto c = toy_config();
  CHECK_NOTHROW(c.validate());
  CHECK(c.patches() == 4);
  CHECK(c.tokens() == 5);
  c.embed_dim = 15;
  CHECK_THROWS_AS(c.validate(), ConfigError);  // not divisible by heads
  c = toy_config();
  c.image_size = 17;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_config();
  c.depth = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = toy_config();
  c.embed_dim = 8;
  c.num_heads = 2;
  CHECK(c.mlp_hidden() == 32);  // expand ratio 4 on d=8
}

TEST_CASE("model size accounting reproduces the published table") {
  auto p = ternary_policy();
  auto r32 = real32_policy();

  auto t_real = model_size_bytes(deit(192, 3), r32);
  auto t_tern = model_size_bytes(deit(192, 3), p);
  CHECK(t_real.policy_bytes == 22591488);
  CHECK(t_tern.policy_bytes == 1749520);
  CHECK(t_real.real32_mb() == doctest::Approx(22.7).epsilon(0.02));
  CHECK(t_tern.policy_mb() == doctest::Approx(1.6).epsilon(0.10));
  CHECK(t_tern.ratio == doctest::Approx(13.35).epsilon(0.04));

  auto s_real = model_size_bytes(deit(384, 6), r32);
  auto s_tern = model_size_bytes(deit(384, 6), p);
  CHECK(s_real.policy_bytes == 87650304);
  CHECK(s_tern.policy_bytes == 6153232);
  CHECK(s_tern.ratio == doctest::Approx(14.70).epsilon(0.035));

  auto b_real = model_size_bytes(deit(768, 12), r32);
  auto b_tern = model_size_bytes(deit(768, 12), p);
  CHECK(b_real.policy_bytes == 345169920);
  CHECK(b_tern.policy_bytes == 22923280);
  CHECK(b_tern.ratio == doctest::Approx(15.25).epsilon(0.02));
}

TEST_CASE("patch-embed and head bit-width sweep orders sizes as published") {
  // Published rounded sizes 2.7 > 2.2 > 2.1 > 1.6 > 1.4 MB for the body kept
  // ternary while the two outer layers sweep 32/8/2 bits.
  auto cfg = deit(192, 3);
  auto policy_with = [](WeightMode pe, WeightMode head) {
    QuantizationPolicy p;
    p.default_weights = WeightMode::kTernary;
    p.activation_bits = 8;
    p.overrides["patch_embed"] = pe;
    p.overrides["head"] = head;
    return p;
  };
  std::vector<std::size_t> sizes = {
      model_size_bytes(cfg, policy_with(WeightMode::kReal32, WeightMode::kReal32)).policy_bytes,
      model_size_bytes(cfg, policy_with(WeightMode::kInt8, WeightMode::kReal32)).policy_bytes,
      model_size_bytes(cfg, policy_with(WeightMode::kReal32, WeightMode::kInt8)).policy_bytes,
      model_size_bytes(cfg, policy_with(WeightMode::kInt8, WeightMode::kInt8)).policy_bytes,
      model_size_bytes(cfg, policy_with(WeightMode::kTernary, WeightMode::kTernary)).policy_bytes,
  };
  CHECK(sizes[0] == 2767872);
  CHECK(sizes[1] == 2325512);
  CHECK(sizes[2] == 2191880);
  CHECK(sizes[3] == 1749520);
  CHECK(sizes[4] == 1499680);
  for (std::size_t i = 1; i < sizes.size(); ++i) CHECK(sizes[i] < sizes[i - 1]);
}

TEST_CASE("attention matches a straight-line evaluation on a tiny case") {
  ViTConfig c = toy_config();
  c.embed_dim = 4;
  c.num_heads = 2;
  VisionTransformerT<double> model(c, real32_policy(), 11);
  std::mt19937 rng(50);
  auto f = randn<double>(rng, {2, 4});

  auto wq = model.parameter("block0.attn.wq.w");
  auto wk = model.parameter("block0.attn.wk.w");
  auto wv = model.parameter("block0.attn.wv.w");
  auto wo = model.parameter("block0.attn.wo.w");

  auto project = [&](const TD& m) {
    TD out = TD::zeros({2, 4});
    for (Index i = 0; i < 2; ++i)
      for (Index j = 0; j < 4; ++j) {
        double acc = 0;
        for (Index k = 0; k < 4; ++k) acc += f.at2(i, k) * m.at2(k, j);
        out.at2(i, j) = acc;
      }
    return out;
  };
  auto fq = project(wq), fk = project(wk), fv = project(wv);
  TD cat = TD::zeros({2, 4});
  for (Index h = 0; h < 2; ++h) {
    double scores[2][2];
    for (Index i = 0; i < 2; ++i)
      for (Index j = 0; j < 2; ++j) {
        double acc = 0;
        for (Index k = 0; k < 2; ++k) acc += fq.at2(i, h * 2 + k) * fk.at2(j, h * 2 + k);
        scores[i][j] = acc / std::sqrt(4.0);  // sqrt(embed_dim), the default scaling
      }
    for (Index i = 0; i < 2; ++i) {
      double mx = std::max(scores[i][0], scores[i][1]);
      double e0 = std::exp(scores[i][0] - mx), e1 = std::exp(scores[i][1] - mx);
      double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
      for (Index k = 0; k < 2; ++k)
        cat.at2(i, h * 2 + k) = a0 * fv.at2(0, h * 2 + k) + a1 * fv.at2(1, h * 2 + k);
    }
  }
  TD expect = TD::zeros({2, 4});
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < 4; ++j) {
      double acc = 0;
      for (Index k = 0; k < 4; ++k) acc += cat.at2(i, k) * wo.at2(k, j);
      expect.at2(i, j) = acc;
    }

  auto got = model.attention_block(f, 0);
  for (Index i = 0; i < 8; ++i) CHECK(got.at(i) == doctest::Approx(expect.at(i)).epsilon(1e-6));

  // per-head scaling flag changes the result and matches sqrt(d / heads)
  ViTConfig c2 = c;
  c2.attn_scale_per_head = true;
  VisionTransformerT<double> model2(c2, real32_policy(), 11);
  auto got2 = model2.attention_block(f, 0);
  bool differs = false;
  for (Index i = 0; i < 8; ++i) differs = differs || got2.at(i) != got.at(i);
  CHECK(differs);
}

TEST_CASE("attention with zero weights returns zero") {
  auto c = toy_config();
  VisionTransformerT<double> model(c, real32_policy(), 3);
  for (const char* name : {"block0.attn.wq.w", "block0.attn.wk.w", "block0.attn.wv.w",
                           "block0.attn.wo.w"}) {
    auto t = model.parameter(name);
    std::fill(t.values().begin(), t.values().end(), 0.0);
  }
  std::mt19937 rng(51);
  auto f = randn<double>(rng, {c.tokens(), c.embed_dim});
  auto out = model.attention_block(f, 0);
  for (Index i = 0; i < out.count(); ++i) CHECK(out.at(i) == 0.0);
}

TEST_CASE("mlp block matches the two-layer GeLU form") {
  auto c = toy_config();
  VisionTransformerT<double> model(c, real32_policy(), 4);
  std::mt19937 rng(52);
  auto f = randn<double>(rng, {3, c.embed_dim});

  auto w1 = model.parameter("block1.mlp.fc1.w");
  auto b1 = model.parameter("block1.mlp.fc1.b");
  auto w2 = model.parameter("block1.mlp.fc2.w");
  auto b2 = model.parameter("block1.mlp.fc2.b");
  // biases initialize to zero; give them content
  for (Index i = 0; i < b1.count(); ++i) b1.at(i) = 0.01 * static_cast<double>(i);
  for (Index i = 0; i < b2.count(); ++i) b2.at(i) = -0.02 * static_cast<double>(i);

  const Index hid = c.mlp_hidden();
  REQUIRE(w1.shape() == std::vector<Index>{16, hid});
  REQUIRE(w2.shape() == std::vector<Index>{hid, 16});
  auto gelu_ref = [](double v) {
    return 0.5 * v * (1.0 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
  };
  auto got = model.mlp_block(f, 1);
  for (Index i = 0; i < 3; ++i)
    for (Index j = 0; j < 16; ++j) {
      double acc = 0;
      for (Index m = 0; m < hid; ++m) {
        double pre = b1.at(m);
        for (Index k = 0; k < 16; ++k) pre += f.at2(i, k) * w1.at2(k, m);
        acc += gelu_ref(pre) * w2.at2(m, j);
      }
      acc += b2.at(j);
      CHECK(got.at2(i, j) == doctest::Approx(acc).epsilon(1e-6));
    }
}

TEST_CASE("mlp with zero weights emits the output bias") {
  auto c = toy_config();
  VisionTransformerT<double> model(c, real32_policy(), 5);
  for (const char* name : {"block0.mlp.fc1.w", "block0.mlp.fc2.w"}) {
    auto t = model.parameter(name);
    std::fill(t.values().begin(), t.values().end(), 0.0);
  }
  auto b2 = model.parameter("block0.mlp.fc2.b");
  std::fill(b2.values().begin(), b2.values().end(), 2.5);
  std::mt19937 rng(53);
  auto f = randn<double>(rng, {4, c.embed_dim});
  auto out = model.mlp_block(f, 0);
  for (Index i = 0; i < out.count(); ++i) CHECK(out.at(i) == 2.5);
}

TEST_CASE("forward emits logits of the right shape and rejects bad images") {
  auto c = toy_config();
  VisionTransformerT<float> model(c, real32_policy(), 6);
  std::mt19937 rng(54);
  auto imgs = rand_images<float>(rng, c, 3);
  auto logits = model.forward(imgs);
  CHECK(logits.shape() == std::vector<Index>{3, 10});
  CHECK(logits.all_finite());
  auto bad = randn<float>(rng, {2, 1, 8, 8});
  CHECK_THROWS_AS(model.forward(bad), ShapeError);
  CHECK_THROWS_AS(model.forward(randn<float>(rng, {4, 16})), ShapeError);
}

TEST_CASE("parameter count matches the closed form") {
  auto c = toy_config();
  VisionTransformerT<float> model(c, real32_policy(), 7);
  // independent symbolic count
  Index d = 16, hid = 64, tokens = 5, classes = 10, patch_dim = 64;
  Index expect = patch_dim * d + d;              // patch embedding
  expect += d + tokens * d;                      // cls + pos
  expect += 2 * (2 * d + 4 * d * d + 2 * d + d * hid + hid + hid * d + d);
  expect += 2 * d + d * classes + classes;
  CHECK(model.count_parameters() == expect);
  CHECK(parameter_count(c) == expect);
  CHECK(expect < 10000);
}

TEST_CASE("every weight participates in the forward pass") {
  auto c = toy_config();
  VisionTransformerT<double> model(c, real32_policy(), 8);
  std::mt19937 rng(55);
  auto imgs = rand_images<double>(rng, c, 1);
  auto base = model.forward(imgs);
  REQUIRE(base.all_finite());
  for (auto& [name, t] : model.parameters()) {
    Index mid = t.count() / 2;
    double saved = t.at(mid);
    t.at(mid) = saved + 0.25;
    auto perturbed = model.forward(imgs);
    t.at(mid) = saved;
    bool changed = false;
    for (Index i = 0; i < base.count(); ++i)
      changed = changed || perturbed.at(i) != base.at(i);
    CHECK_MESSAGE(changed, ("perturbing " + name + " left the logits unchanged"));
  }
}

TEST_CASE("quantized forward equals real forward on dequantized weights") {
  auto c = toy_config();
  for (int act_bits : {32, 8}) {
    auto p = ternary_policy();
    p.activation_bits = act_bits;
    VisionTransformerT<float> qmodel(c, p, 9);
    auto rp = real32_policy();
    rp.activation_bits = act_bits;
    VisionTransformerT<float> rmodel(c, rp, 9);  // same seed, same latents
    // overwrite the real model's weight matrices with dequantized copies
    for (auto* layer : rmodel.weight_layers()) {
      auto src = qmodel.parameter(layer->id + ".w");
      if (qmodel.policy().weight_mode(layer->id) == WeightMode::kTernary)
        layer->w.values() = dequantize_ternary(ternarize(src)).values();
      else
        layer->w.values() = dequantize_weights_int8(quantize_weights_int8(src)).values();
    }
    std::mt19937 rng(56);
    auto imgs = rand_images<float>(rng, c, 2);
    auto ql = qmodel.forward(imgs);
    auto rl = rmodel.forward(imgs);
    for (Index i = 0; i < ql.count(); ++i)
      CHECK(rel_err(ql.at(i), rl.at(i)) < 1e-5);
  }
}

TEST_CASE("attention rows sum to one under both activation policies") {
  auto c = toy_config();
  for (int act_bits : {32, 8}) {
    auto p = real32_policy();
    p.activation_bits = act_bits;
    VisionTransformerT<double> model(c, p, 10);
    std::mt19937 rng(57);
    auto f = randn<double>(rng, {c.tokens(), c.embed_dim});
    for (Index blk = 0; blk < c.depth; ++blk) {
      auto maps = model.attention_maps(f, blk);
      REQUIRE(maps.size() == 2);
      for (const auto& a : maps)
        for (Index r = 0; r < a.rows(); ++r) {
          double s = 0;
          for (Index col = 0; col < a.cols(); ++col) s += a.at2(r, col);
          CHECK(std::abs(s - 1.0) < 1e-6);
        }
    }
  }
}

TEST_CASE("permuting heads and W_O rows leaves logits unchanged") {
  auto c = toy_config();  // 2 heads, head_dim 8
  VisionTransformerT<double> model(c, real32_policy(), 12);
  std::mt19937 rng(58);
  auto imgs = rand_images<double>(rng, c, 2);
  auto base = model.forward(imgs);

  const Index dh = c.head_dim();
  for (Index blk = 0; blk < c.depth; ++blk) {
    std::string p = "block" + std::to_string(blk) + ".attn.";
    for (const char* role : {"wq.w", "wk.w", "wv.w"}) {
      auto w = model.parameter(p + role);  // swap column groups of the heads
      for (Index r = 0; r < w.dim(0); ++r)
        for (Index k = 0; k < dh; ++k) std::swap(w.at2(r, k), w.at2(r, dh + k));
    }
    auto wo = model.parameter(p + "wo.w");  // swap the matching row groups
    for (Index k = 0; k < dh; ++k)
      for (Index col = 0; col < wo.dim(1); ++col)
        std::swap(wo.at2(k, col), wo.at2(dh + k, col));
  }
  auto permuted = model.forward(imgs);
  for (Index i = 0; i < base.count(); ++i)
    CHECK(std::abs(permuted.at(i) - base.at(i)) <
          1e-5 * std::max(1.0, std::abs(base.at(i))));
}

TEST_CASE("end-to-end gradients match finite differences on the toy model") {
  auto c = toy_config();
  VisionTransformerT<double> model(c, real32_policy(), 13);
  std::mt19937 rng(59);
  auto imgs = rand_images<double>(rng, c, 2);
  std::vector<int> labels = {3, 7};
  std::vector<TD> params;
  for (auto& [name, t] : model.parameters()) params.push_back(t);
  double err = max_grad_err<double>(params, [&] {
    return cross_entropy_logits(model.forward(imgs), labels);
  }, 1e-5);
  CHECK(err < 1e-3);
  CHECK(err < 1e-5);  // double precision should do far better than the gate
}

TEST_CASE("linear layer forward equals dequantized-weight matmul") {
  std::mt19937 rng(60);
  LinearLayerT<float> layer;
  layer.id = "probe";
  layer.w = randn<float>(rng, {12, 6});
  layer.b = randn<float>(rng, {6});
  auto x = randn<float>(rng, {5, 12});
  for (auto mode : {WeightMode::kReal32, WeightMode::kTernary, WeightMode::kInt8}) {
    layer.mode = mode;
    auto y = layer.forward(x);
    TF wref = layer.w;
    if (mode == WeightMode::kTernary) wref = dequantize_ternary(ternarize(layer.w));
    if (mode == WeightMode::kInt8) wref = dequantize_weights_int8(quantize_weights_int8(layer.w));
    auto expect = add_bias(matmul(x, wref), layer.b);
    for (Index i = 0; i < y.count(); ++i)
      CHECK(rel_err(y.at(i), expect.at(i)) < 1e-5);
  }
}

TEST_CASE("int8 weight per-channel reconstruction bound") {
  std::mt19937 rng(61);
  auto w = randn<float>(rng, {40, 6}, 1.5);
  auto q = quantize_weights_int8(w);
  auto d = dequantize_weights_int8(q);
  for (Index j = 0; j < 6; ++j) {
    double bound = static_cast<double>(q.scale[static_cast<std::size_t>(j)]) / 2.0 + 1e-6;
    for (Index r = 0; r < 40; ++r)
      CHECK(std::abs(static_cast<double>(w.at2(r, j)) - d.at2(r, j)) <= bound);
  }
  // unit-scale columns reconstruct integer grids exactly
  auto grid = TF::from({3, 2}, {0, 0, 127.5f, 10, 255, 255});
  auto gq = quantize_weights_int8(grid);
  auto gd = dequantize_weights_int8(gq);
  CHECK(gd.at2(0, 0) == 0.0f);
  CHECK(gd.at2(1, 0) == 128.0f);  // half rounds away from zero
  CHECK(gd.at2(2, 0) == 255.0f);
  CHECK(gd.at2(1, 1) == 10.0f);
}

TEST_CASE("policy with unknown layer id is rejected") {
  auto p = ternary_policy();
  p.overrides["block9.attn.wq"] = WeightMode::kReal32;  // depth is 2
  CHECK_THROWS_AS(VisionTransformerT<float>(toy_config(), p, 1), ConfigError);
}

TEST_CASE("policy switch keeps latent weights bit-identical") {
  auto c = toy_config();
  VisionTransformerT<float> model(c, int8_policy(), 14);
  std::vector<std::uint64_t> before;
  for (auto& [name, t] : model.parameters())
    before.push_back(fnv1a64(t.data(), t.values().size() * sizeof(float)));
  model.set_policy(ternary_policy());
  std::size_t i = 0;
  for (auto& [name, t] : model.parameters())
    CHECK(fnv1a64(t.data(), t.values().size() * sizeof(float)) == before[i++]);
  CHECK(model.policy().default_weights == WeightMode::kTernary);
}

TEST_CASE("kernel forward path agrees with the graph path") {
  auto c = toy_config();
  {
    auto p = ternary_policy();
    p.activation_bits = 32;
    VisionTransformerT<float> model(c, p, 15);
    std::mt19937 rng(62);
    auto imgs = rand_images<float>(rng, c, 2);
    auto graph = model.forward(imgs, FwdMode::kGraph);
    auto kern = model.forward(imgs, FwdMode::kKernel);
    for (Index i = 0; i < graph.count(); ++i)
      CHECK(rel_err(kern.at(i), graph.at(i)) < 1e-5);
  }
  {
    VisionTransformerT<float> model(c, ternary_policy(), 15);
    std::mt19937 rng(63);
    auto imgs = rand_images<float>(rng, c, 2);
    auto graph = model.forward(imgs, FwdMode::kGraph);
    auto kern = model.forward(imgs, FwdMode::kKernel);
    for (Index i = 0; i < graph.count(); ++i)
      CHECK(rel_err(kern.at(i), graph.at(i)) < 1e-4);
    GradTape<float> tape;
    CHECK_THROWS_AS(model.forward(imgs, FwdMode::kKernel), ContractError);
  }
  VisionTransformerT<double> dmodel(c, ternary_policy(), 15);
  std::mt19937 rng(64);
  auto dimgs = rand_images<double>(rng, c, 1);
  CHECK_THROWS_AS(dmodel.forward(dimgs, FwdMode::kKernel), ContractError);
}
