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

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ternvit/common.hpp"

namespace ternvit {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;
template <typename S>
using VecMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>;
template <typename S>
using ConstVecMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>;

inline std::string shape_str(const std::vector<Index>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace detail {

template <typename S>
struct TensorStorage {
  std::vector<Index> shape;
  std::vector<S> values;
  std::vector<S> grad;  // persistent for leaves, scratch for op outputs
  bool requires_grad = false;
  bool from_op = false;  // produced by a recorded op
};

}  // namespace detail

/// Dense n-dimensional tensor of scalars with row-major flat storage and an
/// optional gradient buffer. Copying a TensorT copies the handle, not the
/// data; use clone() for a deep copy.
template <typename S>
class TensorT {
 public:
  using Scalar = S;

  TensorT() = default;

  static TensorT zeros(std::vector<Index> shape) {
    TensorT t;
    t.s_ = std::make_shared<detail::TensorStorage<S>>();
    t.s_->shape = std::move(shape);
    t.s_->values.assign(static_cast<std::size_t>(t.count()), S(0));
    return t;
  }

  static TensorT full(std::vector<Index> shape, S v) {
    TensorT t = zeros(std::move(shape));
    std::fill(t.s_->values.begin(), t.s_->values.end(), v);
    return t;
  }

  static TensorT from(std::vector<Index> shape, std::vector<S> values) {
    Index n = 1;
    for (Index d : shape) n *= d;
    if (n != static_cast<Index>(values.size()))
      throw ShapeError("cannot build tensor " + shape_str(shape) + " from " +
                       std::to_string(values.size()) + " values");
    TensorT t;
    t.s_ = std::make_shared<detail::TensorStorage<S>>();
    t.s_->shape = std::move(shape);
    t.s_->values = std::move(values);
    return t;
  }

  static TensorT scalar(S v) { return from({1}, {v}); }

  bool valid() const { return s_ != nullptr; }
  const std::vector<Index>& shape() const { return s_->shape; }
  Index ndim() const { return static_cast<Index>(s_->shape.size()); }
  Index dim(Index i) const { return s_->shape[static_cast<std::size_t>(i)]; }

  Index count() const {
    Index n = 1;
    for (Index d : s_->shape) n *= d;
    return n;
  }

  /// Rows/cols treat the last dimension as columns and everything before it
  /// as rows, so a [B, n, d] tensor maps to a (B*n) x d matrix.
  Index rows() const { return count() / cols(); }
  Index cols() const { return s_->shape.empty() ? 1 : s_->shape.back(); }

  // Handle semantics, like shared_ptr: a const TensorT still grants mutable
  // access to the shared storage. Backward rules run on captured-by-value
  // handles and rely on this.
  S* data() const { return s_->values.data(); }
  std::vector<S>& values() const { return s_->values; }

  S& at(Index i) const { return s_->values[static_cast<std::size_t>(i)]; }
  S& at2(Index r, Index c) const { return s_->values[static_cast<std::size_t>(r * cols() + c)]; }

  S value() const {
    if (count() != 1) throw ContractError("value() on non-scalar tensor " + shape_str(shape()));
    return s_->values[0];
  }

  MatMap<S> mat() const { return MatMap<S>(data(), rows(), cols()); }
  VecMap<S> vec() const { return VecMap<S>(data(), count()); }

  bool requires_grad() const { return s_->requires_grad; }
  TensorT& set_requires_grad(bool b = true) {
    s_->requires_grad = b;
    return *this;
  }

  /// On the differentiable path: either a leaf parameter or an op output.
  bool tracked() const { return s_->requires_grad || s_->from_op; }
  bool from_op() const { return s_->from_op; }
  void mark_from_op() const { s_->from_op = true; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::vector<S>& grad() const {
    if (s_->grad.empty()) throw ContractError("grad accessed before backward()");
    return s_->grad;
  }
  MatMap<S> grad_mat() const { return MatMap<S>(grad().data(), rows(), cols()); }
  VecMap<S> grad_vec() const { return VecMap<S>(grad().data(), count()); }

  void ensure_grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->values.size(), S(0));
  }
  void reset_grad_buffer() const { s_->grad.assign(s_->values.size(), S(0)); }
  void zero_grad() const {
    if (!s_->grad.empty()) std::fill(s_->grad.begin(), s_->grad.end(), S(0));
  }

  /// Deep copy of values only (no grad, no autodiff flags).
  TensorT clone() const {
    TensorT t;
    t.s_ = std::make_shared<detail::TensorStorage<S>>();
    t.s_->shape = s_->shape;
    t.s_->values = s_->values;
    return t;
  }

  /// Same values, detached from the autodiff graph.
  TensorT detach() const { return clone(); }

  /// Value copy with a different shape (element count must match). Not
  /// recorded on the tape; use the free reshape() inside a graph.
  TensorT reshape(std::vector<Index> shape) const {
    Index n = 1;
    for (Index d : shape) n *= d;
    if (n != count())
      throw ShapeError("reshape " + shape_str(s_->shape) + " -> " + shape_str(shape));
    TensorT t;
    t.s_ = std::make_shared<detail::TensorStorage<S>>();
    t.s_->shape = std::move(shape);
    t.s_->values = s_->values;
    return t;
  }

  bool same_shape(const TensorT& o) const { return s_->shape == o.s_->shape; }

  bool all_finite() const {
    for (S v : s_->values)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  bool identical(const detail::TensorStorage<S>* p) const { return s_.get() == p; }
  detail::TensorStorage<S>* storage() const { return s_.get(); }

 private:
  std::shared_ptr<detail::TensorStorage<S>> s_;
};

/// Reverse-mode gradient tape. Constructing a tape makes it the active tape
/// for the current thread; ops executed while it is active record their
/// backward rules. backward() replays the records in reverse.
///
/// Semantics: op-output gradients are scratch buffers reset at the start of
/// every backward() call; leaf (requires_grad) gradients persist and
/// accumulate across calls until zero_grad().
template <typename S>
class GradTape {
 public:
  GradTape() {
    prev_ = active_;
    active_ = this;
  }
  ~GradTape() { active_ = prev_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() { return active_; }

  void record(TensorT<S> out, std::function<void()> back) {
    out.mark_from_op();
    nodes_.push_back(Node{std::move(out), std::move(back)});
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(TensorT<S> loss) {
    if (loss.count() != 1)
      throw ContractError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
    bool on_tape = false;
    for (auto& n : nodes_) on_tape = on_tape || n.out.identical(loss.storage());
    if (!on_tape) throw ContractError("backward() loss was not recorded on this tape");
    for (auto& n : nodes_) n.out.reset_grad_buffer();
    loss.grad()[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->back();
  }

 private:
  struct Node {
    TensorT<S> out;
    std::function<void()> back;
  };
  std::vector<Node> nodes_;
  GradTape* prev_ = nullptr;
  static thread_local GradTape* active_;
};

template <typename S>
thread_local GradTape<S>* GradTape<S>::active_ = nullptr;

namespace detail {

template <typename S>
inline bool should_track(std::initializer_list<const TensorT<S>*> inputs) {
  if (GradTape<S>::active() == nullptr) return false;
  for (const auto* t : inputs)
    if (t->tracked()) return true;
  return false;
}

template <typename S>
inline void record(TensorT<S> out, std::function<void()> back) {
  GradTape<S>::active()->record(std::move(out), std::move(back));
}

// Accumulate an Eigen expression into t's gradient buffer (2-D view).
template <typename S, typename Expr>
inline void acc_mat(TensorT<S> t, const Expr& e) {
  if (!t.tracked()) return;
  t.ensure_grad();
  t.grad_mat() += e;
}

template <typename S, typename Expr>
inline void acc_vec(TensorT<S> t, const Expr& e) {
  if (!t.tracked()) return;
  t.ensure_grad();
  t.grad_vec() += e;
}

template <typename S>
inline void check_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear-algebra operations. Each forward result is a fresh
// tensor; gradient rules are recorded on the active tape when any input is
// tracked.
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape(a, b, "add");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  out.vec() = a.vec() + b.vec();
  if (detail::should_track<S>({&a, &b})) {
    detail::record<S>(out, [a, b, out]() {
      detail::acc_vec(a, out.grad_vec());
      detail::acc_vec(b, out.grad_vec());
    });
  }
  return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape(a, b, "sub");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  out.vec() = a.vec() - b.vec();
  if (detail::should_track<S>({&a, &b})) {
    detail::record<S>(out, [a, b, out]() {
      detail::acc_vec(a, out.grad_vec());
      detail::acc_vec(b, -out.grad_vec());
    });
  }
  return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape(a, b, "mul");
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  out.vec() = a.vec().cwiseProduct(b.vec());
  if (detail::should_track<S>({&a, &b})) {
    detail::record<S>(out, [a, b, out]() {
      detail::acc_vec(a, out.grad_vec().cwiseProduct(b.vec()));
      detail::acc_vec(b, out.grad_vec().cwiseProduct(a.vec()));
    });
  }
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  TensorT<S> out = TensorT<S>::zeros(a.shape());
  out.vec() = a.vec() * c;
  if (detail::should_track<S>({&a})) {
    detail::record<S>(out, [a, out, c]() { detail::acc_vec(a, out.grad_vec() * c); });
  }
  return out;
}

/// y[r, c] = x[r, c] + bias[c]
template <typename S>
TensorT<S> add_bias(const TensorT<S>& x, const TensorT<S>& bias) {
  if (bias.count() != x.cols())
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " vs last dim of " +
                     shape_str(x.shape()));
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  out.mat() = x.mat().rowwise() + bias.vec().transpose();
  if (detail::should_track<S>({&x, &bias})) {
    detail::record<S>(out, [x, bias, out]() {
      detail::acc_mat(x, out.grad_mat());
      detail::acc_vec(bias, out.grad_mat().colwise().sum().transpose());
    });
  }
  return out;
}

/// y[r, c] = x[r, c] * s[c]; the per-column scale also receives gradients.
template <typename S>
TensorT<S> mul_colscale(const TensorT<S>& x, const TensorT<S>& s) {
  if (s.count() != x.cols())
    throw ShapeError("mul_colscale: scale " + shape_str(s.shape()) + " vs last dim of " +
                     shape_str(x.shape()));
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  out.mat() = x.mat().array().rowwise() * s.vec().transpose().array();
  if (detail::should_track<S>({&x, &s})) {
    detail::record<S>(out, [x, s, out]() {
      detail::acc_mat(x, (out.grad_mat().array().rowwise() * s.vec().transpose().array()).matrix());
      detail::acc_vec(s, out.grad_mat().cwiseProduct(x.mat()).colwise().sum().transpose());
    });
  }
  return out;
}

/// Standard matrix product C = A * B with dA = dC * B^T, dB = A^T * dC.
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("matmul expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul inner dimensions: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  TensorT<S> out = TensorT<S>::zeros({a.dim(0), b.dim(1)});
  out.mat().noalias() = a.mat() * b.mat();
  if (detail::should_track<S>({&a, &b})) {
    detail::record<S>(out, [a, b, out]() {
      detail::acc_mat(a, out.grad_mat() * b.mat().transpose());
      detail::acc_mat(b, a.mat().transpose() * out.grad_mat());
    });
  }
  return out;
}

/// C = A * B^T without materializing the transpose.
template <typename S>
TensorT<S> matmul_transB(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("matmul_transB expects 2-D operands, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  if (a.dim(1) != b.dim(1))
    throw ShapeError("matmul_transB inner dimensions: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  TensorT<S> out = TensorT<S>::zeros({a.dim(0), b.dim(0)});
  out.mat().noalias() = a.mat() * b.mat().transpose();
  if (detail::should_track<S>({&a, &b})) {
    detail::record<S>(out, [a, b, out]() {
      detail::acc_mat(a, out.grad_mat() * b.mat());
      detail::acc_mat(b, out.grad_mat().transpose() * a.mat());
    });
  }
  return out;
}

/// Softmax along the last dimension, max-subtracted for stability.
template <typename S>
TensorT<S> softmax_lastdim(const TensorT<S>& x) {
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  auto xm = x.mat();
  auto ym = out.mat();
  for (Index r = 0; r < xm.rows(); ++r) {
    S mx = xm.row(r).maxCoeff();
    ym.row(r) = (xm.row(r).array() - mx).exp();
    ym.row(r) /= ym.row(r).sum();
  }
  if (detail::should_track<S>({&x})) {
    detail::record<S>(out, [x, out]() {
      if (!x.tracked()) return;
      x.ensure_grad();
      auto g = out.grad_mat();
      auto y = out.mat();
      auto xg = x.grad_mat();
      for (Index r = 0; r < y.rows(); ++r) {
        S dot = g.row(r).dot(y.row(r));
        xg.row(r) += (g.row(r).array() - dot).matrix().cwiseProduct(y.row(r));
      }
    });
  }
  return out;
}

/// GeLU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
  static const S kC = static_cast<S>(0.7978845608028654);  // sqrt(2/pi)
  static const S kA = static_cast<S>(0.044715);
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  {
    auto xa = x.vec().array();
    out.vec() = (S(0.5) * xa * (S(1) + (kC * (xa + kA * xa.cube())).tanh())).matrix();
  }
  if (detail::should_track<S>({&x})) {
    detail::record<S>(out, [x, out]() {
      auto xa = x.vec().array();
      auto t = (kC * (xa + kA * xa.cube())).tanh();
      auto du = kC * (S(1) + S(3) * kA * xa.square());
      detail::acc_vec(
          x, (out.grad_vec().array() *
              (S(0.5) * (S(1) + t) + S(0.5) * xa * (S(1) - t.square()) * du))
                 .matrix());
    });
  }
  return out;
}

/// Layer normalization over the last dimension (population variance,
/// eps = 1e-5), then the affine gamma/beta. Always full precision.
template <typename S>
TensorT<S> layernorm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta) {
  const Index d = x.cols();
  if (gamma.count() != d || beta.count() != d)
    throw ShapeError("layernorm: gamma " + shape_str(gamma.shape()) + ", beta " +
                     shape_str(beta.shape()) + " vs last dim of " + shape_str(x.shape()));
  static const S kEps = static_cast<S>(1e-5);
  TensorT<S> out = TensorT<S>::zeros(x.shape());
  TensorT<S> xhat = TensorT<S>::zeros(x.shape());     // saved for backward
  TensorT<S> inv_sd = TensorT<S>::zeros({x.rows()});  // 1/sqrt(var+eps) per row
  auto xm = x.mat();
  auto hm = xhat.mat();
  for (Index r = 0; r < xm.rows(); ++r) {
    S mean = xm.row(r).mean();
    S var = (xm.row(r).array() - mean).square().mean();
    S inv = S(1) / std::sqrt(var + kEps);
    inv_sd.at(r) = inv;
    hm.row(r) = ((xm.row(r).array() - mean) * inv).matrix();
  }
  out.mat() = (hm.array().rowwise() * gamma.vec().transpose().array()).matrix().rowwise() +
              beta.vec().transpose();
  if (detail::should_track<S>({&x, &gamma, &beta})) {
    detail::record<S>(out, [x, gamma, beta, out, xhat, inv_sd]() {
      auto g = out.grad_mat();
      auto hm2 = xhat.mat();
      detail::acc_vec(gamma, g.cwiseProduct(hm2).colwise().sum().transpose());
      detail::acc_vec(beta, g.colwise().sum().transpose());
      if (!x.tracked()) return;
      x.ensure_grad();
      auto xg = x.grad_mat();
      for (Index r = 0; r < g.rows(); ++r) {
        auto gy = (g.row(r).array() * gamma.vec().transpose().array()).eval();
        S m1 = gy.mean();
        S m2 = (gy * hm2.row(r).array()).mean();
        xg.row(r) += ((gy - m1 - hm2.row(r).array() * m2) * inv_sd.at(r)).matrix();
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
  TensorT<S> out = TensorT<S>::scalar(x.vec().sum());
  if (detail::should_track<S>({&x})) {
    detail::record<S>(out, [x, out]() {
      if (!x.tracked()) return;
      x.ensure_grad();
      x.grad_vec().array() += out.grad()[0];
    });
  }
  return out;
}

template <typename S>
TensorT<S> mean_all(const TensorT<S>& x) {
  const S inv = S(1) / static_cast<S>(x.count());
  TensorT<S> out = TensorT<S>::scalar(x.vec().sum() * inv);
  if (detail::should_track<S>({&x})) {
    detail::record<S>(out, [x, out, inv]() {
      if (!x.tracked()) return;
      x.ensure_grad();
      x.grad_vec().array() += out.grad()[0] * inv;
    });
  }
  return out;
}

/// Columns [c0, c0+len) of a 2-D tensor.
template <typename S>
TensorT<S> slice_cols(const TensorT<S>& x, Index c0, Index len) {
  if (x.ndim() != 2) throw ShapeError("slice_cols expects 2-D, got " + shape_str(x.shape()));
  if (c0 < 0 || len <= 0 || c0 + len > x.dim(1))
    throw ShapeError("slice_cols [" + std::to_string(c0) + ", " + std::to_string(c0 + len) +
                     ") out of " + shape_str(x.shape()));
  TensorT<S> out = TensorT<S>::zeros({x.dim(0), len});
  out.mat() = x.mat().middleCols(c0, len);
  if (detail::should_track<S>({&x})) {
    detail::record<S>(out, [x, out, c0, len]() {
      if (!x.tracked()) return;
      x.ensure_grad();
      x.grad_mat().middleCols(c0, len) += out.grad_mat();
    });
  }
  return out;
}

/// Rows [r0, r0+len) of a 2-D tensor.
template <typename S>
TensorT<S> slice_rows(const TensorT<S>& x, Index r0, Index len) {
  if (x.ndim() != 2) throw ShapeError("slice_rows expects 2-D, got " + shape_str(x.shape()));
  if (r0 < 0 || len <= 0 || r0 + len > x.dim(0))
    throw ShapeError("slice_rows [" + std::to_string(r0) + ", " + std::to_string(r0 + len) +
                     ") out of " + shape_str(x.shape()));
  TensorT<S> out = TensorT<S>::zeros({len, x.dim(1)});
  out.mat() = x.mat().middleRows(r0, len);
  if (detail::should_track<S>({&x})) {
    detail::record<S>(out, [x, out, r0, len]() {
      if (!x.tracked()) return;
      x.ensure_grad();
      x.grad_mat().middleRows(r0, len) += out.grad_mat();
    });
  }
  return out;
}

template <typename S>
TensorT<S> concat_cols(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of zero tensors");
  Index rows = parts[0].dim(0);
  Index total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(0) != rows)
      throw ShapeError("concat_cols: inconsistent part " + shape_str(p.shape()));
    total += p.dim(1);
  }
  TensorT<S> out = TensorT<S>::zeros({rows, total});
  Index c = 0;
  for (const auto& p : parts) {
    out.mat().middleCols(c, p.dim(1)) = p.mat();
    c += p.dim(1);
  }
  bool track = GradTape<S>::active() != nullptr &&
               std::any_of(parts.begin(), parts.end(),
                           [](const TensorT<S>& t) { return t.tracked(); });
  if (track) {
    detail::record<S>(out, [parts, out]() {
      Index c2 = 0;
      for (const auto& p : parts) {
        detail::acc_mat(p, out.grad_mat().middleCols(c2, p.dim(1)));
        c2 += p.dim(1);
      }
    });
  }
  return out;
}

template <typename S>
TensorT<S> concat_rows(const std::vector<TensorT<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of zero tensors");
  Index cols = parts[0].dim(1);
  Index total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(1) != cols)
      throw ShapeError("concat_rows: inconsistent part " + shape_str(p.shape()));
    total += p.dim(0);
  }
  TensorT<S> out = TensorT<S>::zeros({total, cols});
  Index r = 0;
  for (const auto& p : parts) {
    out.mat().middleRows(r, p.dim(0)) = p.mat();
    r += p.dim(0);
  }
  bool track = GradTape<S>::active() != nullptr &&
               std::any_of(parts.begin(), parts.end(),
                           [](const TensorT<S>& t) { return t.tracked(); });
  if (track) {
    detail::record<S>(out, [parts, out]() {
      Index r2 = 0;
      for (const auto& p : parts) {
        detail::acc_mat(p, out.grad_mat().middleRows(r2, p.dim(0)));
        r2 += p.dim(0);
      }
    });
  }
  return out;
}

/// Mean cross-entropy of logits [B x C] against integer labels, computed via
/// log-sum-exp with max subtraction.
template <typename S>
TensorT<S> cross_entropy_logits(const TensorT<S>& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2)
    throw ShapeError("cross_entropy_logits expects 2-D logits, got " + shape_str(logits.shape()));
  const Index b = logits.dim(0);
  const Index c = logits.dim(1);
  if (static_cast<Index>(labels.size()) != b)
    throw ShapeError("cross_entropy_logits: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(b) + " rows");
  for (int y : labels)
    if (y < 0 || y >= c) throw ValueError("label " + std::to_string(y) + " out of range");
  TensorT<S> probs = TensorT<S>::zeros(logits.shape());
  auto lm = logits.mat();
  auto pm = probs.mat();
  S total = S(0);
  for (Index r = 0; r < b; ++r) {
    S mx = lm.row(r).maxCoeff();
    pm.row(r) = (lm.row(r).array() - mx).exp();
    S z = pm.row(r).sum();
    pm.row(r) /= z;
    total += -(lm(r, labels[static_cast<std::size_t>(r)]) - mx - std::log(z));
  }
  TensorT<S> out = TensorT<S>::scalar(total / static_cast<S>(b));
  if (detail::should_track<S>({&logits})) {
    detail::record<S>(out, [logits, out, probs, labels, b]() {
      if (!logits.tracked()) return;
      logits.ensure_grad();
      S g = out.grad()[0] / static_cast<S>(b);
      auto lg = logits.grad_mat();
      lg += probs.mat() * g;
      for (Index r = 0; r < b; ++r) lg(r, labels[static_cast<std::size_t>(r)]) -= g;
    });
  }
  return out;
}

/// Shape change as a differentiable op; the flat storage order is unchanged
/// so the backward pass is a flat gradient add.
template <typename S>
TensorT<S> reshape(const TensorT<S>& x, std::vector<Index> shape) {
  TensorT<S> out = x.reshape(std::move(shape));
  if (detail::should_track<S>({&x})) {
    detail::record<S>(out, [x, out]() { detail::acc_vec(x, out.grad_vec()); });
  }
  return out;
}

/// Row-wise argmax, for accuracy computations.
template <typename S>
std::vector<int> argmax_rows(const TensorT<S>& x) {
  std::vector<int> out(static_cast<std::size_t>(x.rows()));
  auto m = x.mat();
  for (Index r = 0; r < m.rows(); ++r) {
    Index best = 0;
    m.row(r).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

using Tensor = TensorT<float>;
using Tape = GradTape<float>;

}  // namespace ternvit
