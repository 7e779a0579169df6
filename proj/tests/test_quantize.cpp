#include <doctest.h>

#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "helpers.hpp"
#include "ternvit/quantize.hpp"
#include "ternvit/tensor.hpp"

using namespace ternvit;
using tv_test::randn;
using tv_test::uniform;

using TD = TensorT<double>;
using TF = TensorT<float>;

TEST_CASE("channel threshold formula") {
  auto w = TD::from({3, 3}, {1, 0, -1, 1, 0, 0.1, 1, 0, 2});  // cols: [1,1,1],[0,0,0],[-1,0.1,2]
  CHECK(channel_threshold(w, 0) == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(channel_threshold(w, 1) == 0.0);
  CHECK(channel_threshold(w, 2) == doctest::Approx(0.7 * 3.1 / 3.0).epsilon(1e-12));
  CHECK_THROWS_AS(channel_threshold(w, 3), ShapeError);
  CHECK_THROWS_AS(channel_threshold(w, -1), ShapeError);
  CHECK_THROWS_AS(channel_threshold(TD::zeros({4}), 0), ShapeError);
  auto bad = TD::from({1, 1}, {std::nan("")});
  CHECK_THROWS_AS(channel_threshold(bad, 0), ValueError);
}

TEST_CASE("ternarize three-case rule and alpha") {
  auto w = TD::from({3, 1}, {-1.0, 0.1, 2.0});
  auto t = ternarize(w);
  CHECK(t.rows == 3);
  CHECK(t.cols == 1);
  CHECK(t.code(0, 0) == -1);
  CHECK(t.code(1, 0) == 0);
  CHECK(t.code(2, 0) == 1);
  CHECK(t.alpha[0] == doctest::Approx(3.1 / 3.0).epsilon(1e-12));
  CHECK(t.delta[0] == doctest::Approx(0.7 * 3.1 / 3.0).epsilon(1e-12));

  auto z = ternarize(TD::zeros({4, 3}));
  for (Index j = 0; j < 3; ++j) {
    CHECK(z.alpha[static_cast<std::size_t>(j)] == 0.0);
    for (Index r = 0; r < 4; ++r) CHECK(z.code(r, j) == 0);
  }
  CHECK_THROWS_AS(ternarize(TD::zeros({4})), ShapeError);
  CHECK_THROWS_AS(ternarize(TD::from({1, 1}, {INFINITY})), ValueError);
}

TEST_CASE("boundary codes: +delta goes to +1, -delta goes to 0") {
  CHECK(ternary_code(1.4, 1.4) == 1);
  CHECK(ternary_code(-1.4, 1.4) == 0);
  CHECK(ternary_code(std::nextafter(1.4, 0.0), 1.4) == 0);
  CHECK(ternary_code(std::nextafter(-1.4, -2.0), 1.4) == -1);
  CHECK(ternary_code(0.0, 0.0) == 0);  // all-zero channel convention
  CHECK(ternary_code(5.0, 0.0) == 0);
}

TEST_CASE("boundary codes survive the full pipeline") {
  // Drive the first entry of a column to the exact threshold by fixed-point
  // iteration: w0 <- 0.7 * (|w0| + rest_l1) / n converges (contraction 0.7/n)
  // and lands on a double that equals its own channel threshold bit-exactly.
  std::vector<double> col = {1.0, 2.0, -2.0, 0.5, 1.5, -0.25};
  const Index n = static_cast<Index>(col.size());
  bool converged = false;
  for (int it = 0; it < 200; ++it) {
    auto w = TD::from({n, 1}, col);
    double d = channel_threshold(w, 0);
    if (d == col[0]) {
      converged = true;
      break;
    }
    col[0] = d;
  }
  REQUIRE(converged);
  std::vector<double> both(static_cast<std::size_t>(2 * n));
  for (Index r = 0; r < n; ++r) {
    both[static_cast<std::size_t>(r * 2)] = col[static_cast<std::size_t>(r)];
    both[static_cast<std::size_t>(r * 2 + 1)] = -col[static_cast<std::size_t>(r)];
  }
  auto w2 = TD::from({n, 2}, both);
  REQUIRE(channel_threshold(w2, 0) == col[0]);
  REQUIRE(channel_threshold(w2, 1) == col[0]);
  auto t = ternarize(w2);
  CHECK(t.code(0, 0) == 1);   // value == +delta
  CHECK(t.code(0, 1) == 0);   // value == -delta
}

TEST_CASE("dequantize reconstructs alpha-scaled codes") {
  TernaryTensorT<double> t;
  t.rows = 3;
  t.cols = 1;
  t.packed = pack_codes({-1, 0, 1});
  t.alpha = {2.0};
  t.delta = {0.7};
  auto d = dequantize_ternary(t);
  CHECK(d.at2(0, 0) == -2.0);
  CHECK(d.at2(1, 0) == 0.0);
  CHECK(d.at2(2, 0) == 2.0);

  TernaryTensorT<double> z;
  z.rows = 2;
  z.cols = 2;
  z.packed = pack_codes({0, 0, 0, 0});
  z.alpha = {5.0, 9.0};
  z.delta = {0.1, 0.1};
  auto dz = dequantize_ternary(z);
  for (Index i = 0; i < 4; ++i) CHECK(dz.at(i) == 0.0);
}

TEST_CASE("dequantized matrix has at most 2 d_out + 1 distinct values") {
  std::mt19937 rng(5);
  auto w = randn<double>(rng, {17, 6});
  auto d = dequantize_ternary(ternarize(w));
  std::set<double> distinct(d.values().begin(), d.values().end());
  CHECK(static_cast<Index>(distinct.size()) <= 2 * 6 + 1);
}

TEST_CASE("corrupt packed code raises format error") {
  std::mt19937 rng(6);
  auto t = ternarize(randn<double>(rng, {8, 2}));
  t.packed[1] |= 0b11 << 4;  // forge an invalid 0b11 field
  CHECK_THROWS_AS(dequantize_ternary(t), FormatError);
  CHECK_THROWS_AS(t.code(6, 0), FormatError);
}

TEST_CASE("requantizing a dequantized matrix is a code fixed point") {
  std::mt19937 rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    auto w = randn<float>(rng, {24, 5});
    auto t1 = ternarize(w);
    auto d1 = dequantize_ternary(t1);
    auto t2 = ternarize(d1);
    CHECK(t2.packed == t1.packed);
    // Alpha follows the sparsity recurrence, not a fixed point: the mean of
    // |alpha * codes| over a column is alpha * nnz / n.
    for (Index j = 0; j < 5; ++j) {
      Index nnz = 0;
      for (Index r = 0; r < 24; ++r) nnz += t1.code(r, j) != 0 ? 1 : 0;
      double expect = static_cast<double>(t1.alpha[static_cast<std::size_t>(j)]) * nnz / 24.0;
      CHECK(t2.alpha[static_cast<std::size_t>(j)] == doctest::Approx(expect).epsilon(1e-6));
    }
  }
}

TEST_CASE("column scaling by powers of two preserves codes and scales alpha") {
  std::mt19937 rng(8);
  for (double c : {4.0, 0.25}) {
    auto w = randn<float>(rng, {32, 7});
    auto ws = w.clone();
    ws.vec() *= static_cast<float>(c);
    auto t1 = ternarize(w);
    auto t2 = ternarize(ws);
    CHECK(t2.packed == t1.packed);
    for (std::size_t j = 0; j < 7; ++j)
      CHECK(t2.alpha[j] == static_cast<float>(c) * t1.alpha[j]);
  }
}

TEST_CASE("layer granularity uses one shared threshold and scale") {
  auto w = TD::from({2, 2}, {4.0, 0.0, -1.0, 1.0});  // cols [4,-1], [0,1]
  auto t = ternarize(w, Granularity::kLayer);
  double mean_abs = 6.0 / 4.0;
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(t.alpha[j] == doctest::Approx(mean_abs).epsilon(1e-12));
    CHECK(t.delta[j] == doctest::Approx(0.7 * mean_abs).epsilon(1e-12));
  }
  // global delta = 1.05: codes 4 -> +1, -1 -> 0, 0 -> 0, 1 -> 0
  CHECK(t.code(0, 0) == 1);
  CHECK(t.code(1, 0) == 0);
  CHECK(t.code(0, 1) == 0);
  CHECK(t.code(1, 1) == 0);
  CHECK(t.granularity == Granularity::kLayer);
}

TEST_CASE("minmax8 on an exact integer span is lossless") {
  std::vector<float> vals(256);
  for (int i = 0; i < 256; ++i) vals[static_cast<std::size_t>(i)] = static_cast<float>(i);
  auto f = TF::from({16, 16}, vals);
  auto q = quantize_minmax8(f);
  CHECK(q.scale == 1.0f);
  CHECK(q.offset == 0.0f);
  for (int i = 0; i < 256; ++i) CHECK(q.data[static_cast<std::size_t>(i)] == i);
  auto d = dequantize_minmax8(q);
  for (Index i = 0; i < 256; ++i) CHECK(d.at(i) == f.at(i));
}

TEST_CASE("minmax8 degenerate range reconstructs exactly") {
  auto f = TF::full({3, 5}, 2.75f);
  auto q = quantize_minmax8(f);
  CHECK(q.scale == 0.0f);
  CHECK(q.offset == 2.75f);
  for (auto c : q.data) CHECK(c == 0);
  auto d = dequantize_minmax8(q);
  for (Index i = 0; i < 15; ++i) CHECK(d.at(i) == 2.75f);
}

TEST_CASE("minmax8 rounds halves away from zero") {
  auto f = TF::from({4}, {0.0f, 2.5f, 3.5f, 255.0f});
  auto q = quantize_minmax8(f);  // scale exactly 1
  REQUIRE(q.scale == 1.0f);
  CHECK(q.data[1] == 3);  // 2.5 -> 3, not banker's 2
  CHECK(q.data[2] == 4);
}

TEST_CASE("minmax8 reconstruction error bound") {
  std::mt19937 rng(9);
  for (int rep = 0; rep < 100; ++rep) {
    auto f = rep % 2 == 0 ? randn<float>(rng, {13, 11}, 2.5)
                          : uniform<float>(rng, {7, 31}, -8.0, 8.0);
    auto q = quantize_minmax8(f);
    auto d = dequantize_minmax8(q);
    double bound = static_cast<double>(q.scale) / 2.0 + 1e-6;
    for (Index i = 0; i < f.count(); ++i)
      CHECK(std::abs(static_cast<double>(f.at(i)) - static_cast<double>(d.at(i))) <= bound);
  }
}

TEST_CASE("frozen-range minmax8 clamps out-of-range values") {
  auto f = TF::from({4}, {-10.0f, 0.0f, 128.0f, 400.0f});
  auto q = quantize_minmax8_range(f, 0.0f, 255.0f);
  CHECK(q.data[0] == 0);
  CHECK(q.data[1] == 0);
  CHECK(q.data[2] == 128);
  CHECK(q.data[3] == 255);
  CHECK_THROWS_AS(quantize_minmax8_range(f, 1.0f, 0.0f), ValueError);
}

TEST_CASE("quantization policy lookup and validation") {
  QuantizationPolicy p;
  p.default_weights = WeightMode::kTernary;
  p.activation_bits = 8;
  p.overrides["head"] = WeightMode::kReal32;
  CHECK(p.weight_mode("block0.attn.wq") == WeightMode::kTernary);
  CHECK(p.weight_mode("head") == WeightMode::kReal32);
  CHECK(p.quantize_activations());
  p.validate();
  p.activation_bits = 16;
  CHECK_THROWS_AS(p.validate(), ConfigError);
}

TEST_CASE("ste ternarize gradient is upstream scaled by channel alpha") {
  auto w = TD::from({3, 2}, {2, 3, 2, 3, 2, -3});  // alpha = [2, 3]
  auto up = TD::full({3, 2}, 1.0);
  auto g = ste_backward_ternarize(up, w);
  for (Index r = 0; r < 3; ++r) {
    CHECK(g.at2(r, 0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(g.at2(r, 1) == doctest::Approx(3.0).epsilon(1e-12));
  }
  auto gz = ste_backward_ternarize(up, TD::zeros({3, 2}));
  for (Index i = 0; i < 6; ++i) CHECK(gz.at(i) == 0.0);
  CHECK_THROWS_AS(ste_backward_ternarize(TD::zeros({2, 2}), w), ShapeError);
}

TEST_CASE("ste round gradient is identity") {
  auto up = TD::from({2, 2}, {1.5, -2.0, 0.0, 7.0});
  auto g = ste_backward_round(up);
  for (Index i = 0; i < 4; ++i) CHECK(g.at(i) == up.at(i));
  auto z = ste_backward_round(TD::zeros({3}));
  for (Index i = 0; i < 3; ++i) CHECK(z.at(i) == 0.0);
}

// Oracle: the straight-through trick written out of generic autodiff ops.
// value(y) == dequantized forward, gradient flows through W * alpha with
// alpha detached. Any downstream loss sees identical forward values, so the
// fused rule must reproduce this graph's gradients bit for bit.
static TD ste_trick_ternary(const TD& w) {
  auto t = ternarize(w.detach());
  auto deq = dequantize_ternary(t);  // constant, no grad path
  auto alpha = TD::from({w.dim(1)}, t.alpha);
  auto lin = mul_colscale(w, alpha);
  return add(deq, sub(lin, lin.detach()));
}

TEST_CASE("fused ternary fake-quant matches the substitute graph exactly") {
  std::mt19937 rng(10);
  auto w = randn<double>(rng, {6, 4});
  auto x = randn<double>(rng, {4, 3});
  w.set_requires_grad(true);

  auto loss_of = [&](const TD& y) {
    auto h = matmul(y, x);
    return mean_all(mul(h, h));
  };

  w.ensure_grad();
  w.zero_grad();
  double fused_loss, subst_loss;
  std::vector<double> fused_grad, subst_grad;
  {
    GradTape<double> tape;
    auto loss = loss_of(fake_quant_ternary(w));
    fused_loss = loss.value();
    tape.backward(loss);
    fused_grad = w.grad();
  }
  w.zero_grad();
  {
    GradTape<double> tape;
    auto loss = loss_of(ste_trick_ternary(w));
    subst_loss = loss.value();
    tape.backward(loss);
    subst_grad = w.grad();
  }
  CHECK(fused_loss == subst_loss);
  REQUIRE(fused_grad.size() == subst_grad.size());
  for (std::size_t i = 0; i < fused_grad.size(); ++i) CHECK(fused_grad[i] == subst_grad[i]);

  bool any_nonzero = false;
  for (double g : fused_grad) any_nonzero = any_nonzero || g != 0.0;
  CHECK(any_nonzero);
}

TEST_CASE("round fake-quant gradient equals the round-removed identity graph") {
  std::mt19937 rng(11);
  auto x = randn<double>(rng, {5, 4});
  auto w = randn<double>(rng, {5, 4});
  x.set_requires_grad(true);
  x.ensure_grad();
  x.zero_grad();
  std::vector<double> fq_grad, id_grad;
  {
    GradTape<double> tape;
    auto loss = sum_all(mul(fake_quant_minmax8(x), w));
    tape.backward(loss);
    fq_grad = x.grad();
  }
  x.zero_grad();
  {
    // With round removed and the range parameters detached, the
    // quantize-then-dequantize chain collapses to the identity on x.
    GradTape<double> tape;
    auto loss = sum_all(mul(x, w));
    tape.backward(loss);
    id_grad = x.grad();
  }
  for (std::size_t i = 0; i < fq_grad.size(); ++i) CHECK(fq_grad[i] == id_grad[i]);
}

TEST_CASE("packed byte layout golden values") {
  // column-major codes [0, +1, -1, 0] -> bits 00, 01, 10, 00 -> 0b00100100
  auto b = pack_codes({0, 1, -1, 0});
  REQUIRE(b.size() == 1);
  CHECK(b[0] == 0x24);
  auto b2 = pack_codes({1, 1, 1, 1});
  CHECK(b2[0] == 0x55);
  auto b3 = pack_codes({-1, -1, -1, -1});
  CHECK(b3[0] == 0xAA);
  auto b5 = pack_codes({0, 0, 0, 0, 1});  // tail byte zero-padded
  REQUIRE(b5.size() == 2);
  CHECK(b5[0] == 0x00);
  CHECK(b5[1] == 0x01);
  CHECK_THROWS_AS(pack_codes({5}), ValueError);
  CHECK(packed_size(0) == 0);
  CHECK(packed_size(4) == 1);
  CHECK(packed_size(5) == 2);
}

TEST_CASE("pack/unpack round trip over random code streams") {
  std::mt19937 rng(12);
  std::uniform_int_distribution<int> len_d(1, 257);
  std::uniform_int_distribution<int> code_d(-1, 1);
  for (int rep = 0; rep < 200; ++rep) {
    Index n = len_d(rng);
    std::vector<std::int8_t> codes(static_cast<std::size_t>(n));
    for (auto& c : codes) c = static_cast<std::int8_t>(code_d(rng));
    auto packed = pack_codes(codes);
    CHECK(packed.size() == packed_size(n));
    auto back = unpack_codes(packed, n);
    CHECK(back == codes);
    CHECK(pack_codes(back) == packed);
  }
  std::vector<std::uint8_t> corrupt = {0b00001100};
  CHECK_THROWS_AS(unpack_codes(corrupt, 4), FormatError);
  CHECK_THROWS_AS(unpack_codes(corrupt, 8), FormatError);
  CHECK(unpack_codes(corrupt, 1)[0] == 0);  // invalid field beyond count untouched
}

TEST_CASE("ternarize packs to exactly ceil(n d / 4) bytes") {
  std::mt19937 rng(13);
  for (auto [n, d] : {std::pair<Index, Index>{5, 3}, {16, 4}, {7, 7}, {1, 1}}) {
    auto t = ternarize(randn<float>(rng, {n, d}));
    CHECK(t.packed_bytes() == static_cast<std::size_t>((n * d + 3) / 4));
  }
}

TEST_CASE("fake quant ops do not record outside a tape") {
  std::mt19937 rng(14);
  auto w = randn<double>(rng, {4, 4});
  w.set_requires_grad(true);
  auto y = fake_quant_ternary(w);
  CHECK_FALSE(y.from_op());
  auto a = fake_quant_minmax8(w);
  CHECK_FALSE(a.from_op());
}
