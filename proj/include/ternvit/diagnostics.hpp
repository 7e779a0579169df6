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

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ternvit/common.hpp"
#include "ternvit/quantize.hpp"
#include "ternvit/tensor.hpp"
#include "ternvit/vit.hpp"

namespace ternvit {

/// Channel-wise absolute mean: cam[j] = mean_k |W[k, j]|. Matches the ternary
/// scale of each output channel, so low CAM marks channels the quantizer will
/// zero out.
template <typename S>
std::vector<double> cam(const TensorT<S>& w) {
  detail::check_finite_2d(w, "cam");
  const Index n = w.rows(), d = w.cols();
  std::vector<double> out(static_cast<std::size_t>(d), 0.0);
  auto m = w.mat();
  for (Index j = 0; j < d; ++j) {
    double acc = 0.0;
    for (Index k = 0; k < n; ++k) acc += std::abs(static_cast<double>(m(k, j)));
    out[static_cast<std::size_t>(j)] = acc / static_cast<double>(n);
  }
  return out;
}

/// Population standard deviation of the CAM vector. Low SDAM means channels
/// carry comparable magnitude.
template <typename S>
double sdam(const TensorT<S>& w) {
  const auto c = cam(w);
  double mean = 0.0;
  for (double v : c) mean += v;
  mean /= static_cast<double>(c.size());
  double var = 0.0;
  for (double v : c) var += (v - mean) * (v - mean);
  return std::sqrt(var / static_cast<double>(c.size()));
}

struct DeadChannels {
  Index count = 0;
  std::vector<Index> channels;
  double reference_min_cam = 0.0;
};

/// Channels whose CAM falls below a reference magnitude, typically the
/// minimum CAM of a comparison model.
template <typename S>
DeadChannels dead_channels(const TensorT<S>& w, double reference_min_cam) {
  if (!(reference_min_cam >= 0.0))
    throw ValueError("dead_channels: reference CAM must be >= 0");
  DeadChannels out;
  out.reference_min_cam = reference_min_cam;
  const auto c = cam(w);
  for (std::size_t j = 0; j < c.size(); ++j)
    if (c[j] < reference_min_cam) out.channels.push_back(static_cast<Index>(j));
  out.count = static_cast<Index>(out.channels.size());
  return out;
}

struct LayerDiagnostics {
  std::string layer_id;
  std::vector<double> cam;
  double sdam = 0.0;
  Index dead_count = 0;
};

struct DiagnosticsReport {
  std::vector<LayerDiagnostics> layers;
  double reference_min_cam = 0.0;
  /// Filled by callers that also run the curvature probe.
  std::vector<std::pair<std::string, double>> hessian_top;
};

/// Smallest CAM entry over all quantizable weight matrices.
template <typename S>
double model_min_cam(VisionTransformerT<S>& model) {
  double lo = std::numeric_limits<double>::infinity();
  for (auto* layer : model.weight_layers())
    for (double v : cam(layer->w)) lo = std::min(lo, v);
  return lo;
}

/// CAM, SDAM and dead-channel counts for every quantizable weight matrix.
template <typename S>
DiagnosticsReport weight_diagnostics(VisionTransformerT<S>& model, double reference_min_cam = 0.0) {
  DiagnosticsReport rep;
  rep.reference_min_cam = reference_min_cam;
  for (auto* layer : model.weight_layers()) {
    LayerDiagnostics d;
    d.layer_id = layer->id;
    d.cam = cam(layer->w);
    d.sdam = sdam(layer->w);
    d.dead_count = dead_channels(layer->w, reference_min_cam).count;
    rep.layers.push_back(std::move(d));
  }
  return rep;
}

/// Fraction of the model's weight channels with CAM below the reference.
/// With reference = model_min_cam(other) this reproduces the two-model
/// dead-channel comparison protocol.
template <typename S>
double dead_channel_fraction(VisionTransformerT<S>& model, double reference_min_cam) {
  Index dead = 0, total = 0;
  for (auto* layer : model.weight_layers()) {
    dead += dead_channels(layer->w, reference_min_cam).count;
    total += layer->w.cols();
  }
  return total == 0 ? 0.0 : static_cast<double>(dead) / static_cast<double>(total);
}

/// Mean cross-entropy of one batch under the model's active policy, outside
/// any tape.
template <typename S>
double batch_loss(const VisionTransformerT<S>& model, const TensorT<S>& images,
                  const std::vector<int>& labels) {
  return static_cast<double>(cross_entropy_logits(model.forward(images), labels).value());
}

/// Gradient of the batch loss with respect to one named parameter, all other
/// parameters held fixed. The model's grad-tracking flags are restored on
/// exit.
template <typename S>
std::vector<double> latent_gradient(VisionTransformerT<S>& model, const std::string& name,
                                    const TensorT<S>& images, const std::vector<int>& labels) {
  auto& params = model.parameters();
  std::vector<bool> saved_flags;
  TensorT<S> target;
  for (auto& [n, p] : params) {
    saved_flags.push_back(p.requires_grad());
    p.set_requires_grad(n == name);
    if (n == name) target = p;
  }
  if (!target.valid()) throw ContractError("unknown parameter " + name);
  target.zero_grad();
  {
    GradTape<S> tape;
    auto loss = cross_entropy_logits(model.forward(images), labels);
    tape.backward(loss);
  }
  std::vector<double> g(static_cast<std::size_t>(target.count()), 0.0);
  for (Index i = 0; i < target.count(); ++i) g[static_cast<std::size_t>(i)] =
      static_cast<double>(target.grad()[static_cast<std::size_t>(i)]);
  target.zero_grad();
  for (std::size_t i = 0; i < params.size(); ++i) params[i].second.set_requires_grad(saved_flags[i]);
  return g;
}

struct HessianEstimate {
  double eigenvalue = 0.0;
  bool degenerate = false;
  Index iters_used = 0;
  /// Rayleigh quotient after each iteration; on symmetric positive problems
  /// the sequence is non-decreasing up to finite-difference noise.
  std::vector<double> rayleigh_history;
};

/// Top eigenvalue of the Hessian implied by grad_fn, via power iteration with
/// central-difference Hessian-vector products: Hv ~ (g(t+ev) - g(t-ev))/(2e),
/// e = 1e-3 * |theta| / |v|. Stops when the Rayleigh quotient's relative
/// change drops below tol. A vanishing Hv sets the degenerate flag.
HessianEstimate power_iteration_top_eig(
    const std::function<std::vector<double>(const std::vector<double>&)>& grad_fn,
    const std::vector<double>& theta0, Index iters, double tol, std::uint64_t seed);

/// Layer-restricted curvature probe: power iteration over the weight matrix
/// of `layer_id` at the current latent weights. The latents are restored
/// bit-exactly afterward.
template <typename S>
HessianEstimate hessian_top_eigenvalue(VisionTransformerT<S>& model, const std::string& layer_id,
                                       const TensorT<S>& images, const std::vector<int>& labels,
                                       Index iters = 30, double tol = 1e-3,
                                       std::uint64_t seed = 1) {
  const std::string name = layer_id + ".w";
  auto target = model.parameter(name);
  const std::vector<S> saved(target.data(), target.data() + target.count());

  auto grad_fn = [&](const std::vector<double>& theta) {
    for (Index i = 0; i < target.count(); ++i)
      target.data()[i] = static_cast<S>(theta[static_cast<std::size_t>(i)]);
    return latent_gradient(model, name, images, labels);
  };
  std::vector<double> theta0(saved.begin(), saved.end());
  auto est = power_iteration_top_eig(grad_fn, theta0, iters, tol, seed);
  std::copy(saved.begin(), saved.end(), target.data());
  return est;
}

struct LandscapeGrid {
  std::vector<double> a_coords, b_coords;
  /// losses(i, j) is the loss at (a = a_coords[j], b = b_coords[i]).
  RowMat<double> losses;
};

/// Evaluate loss_at over an odd resolution x resolution grid on
/// [-span, span]^2. The center coordinate is exactly zero.
LandscapeGrid landscape_grid(const std::function<double(double, double)>& loss_at,
                             Index resolution, double span);

/// Two seeded perturbation directions aligned with the parameter list.
/// Matrix parameters are rescaled per output channel to the norm of the
/// matching weight channel; everything else is rescaled per tensor. Channels
/// with zero weight norm get a zero direction.
template <typename S>
std::array<std::vector<std::vector<double>>, 2> filter_normalized_directions(
    const VisionTransformerT<S>& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::array<std::vector<std::vector<double>>, 2> dirs;
  for (auto& dir : dirs) {
    for (const auto& [name, p] : model.parameters()) {
      (void)name;
      std::vector<double> raw(static_cast<std::size_t>(p.count()));
      for (auto& v : raw) v = normal(rng);
      if (p.ndim() == 2 && p.dim(0) > 1 && p.dim(1) > 1) {
        const Index rows = p.dim(0), cols = p.dim(1);
        for (Index j = 0; j < cols; ++j) {
          double wn = 0.0, rn = 0.0;
          for (Index k = 0; k < rows; ++k) {
            const double wv = static_cast<double>(p.at(k * cols + j));
            const double rv = raw[static_cast<std::size_t>(k * cols + j)];
            wn += wv * wv;
            rn += rv * rv;
          }
          const double s = rn > 0.0 ? std::sqrt(wn) / std::sqrt(rn) : 0.0;
          for (Index k = 0; k < rows; ++k) raw[static_cast<std::size_t>(k * cols + j)] *= s;
        }
      } else {
        double wn = 0.0, rn = 0.0;
        for (Index i = 0; i < p.count(); ++i) {
          const double wv = static_cast<double>(p.at(i));
          wn += wv * wv;
          rn += raw[static_cast<std::size_t>(i)] * raw[static_cast<std::size_t>(i)];
        }
        const double s = rn > 0.0 ? std::sqrt(wn) / std::sqrt(rn) : 0.0;
        for (auto& v : raw) v *= s;
      }
      dir.push_back(std::move(raw));
    }
  }
  return dirs;
}

/// Loss surface around the current latent weights along two filter-normalized
/// random directions, evaluated under the model's active quantization policy.
/// The grid center is the exact unperturbed loss and the model is restored
/// bit-exactly.
template <typename S>
LandscapeGrid loss_landscape_2d(VisionTransformerT<S>& model, const TensorT<S>& images,
                                const std::vector<int>& labels, Index resolution, double span,
                                std::uint64_t seed = 2) {
  auto& params = model.parameters();
  std::vector<std::vector<S>> saved;
  for (const auto& [name, p] : params) {
    (void)name;
    saved.emplace_back(p.data(), p.data() + p.count());
  }
  const auto dirs = filter_normalized_directions(model, seed);

  auto restore = [&] {
    for (std::size_t i = 0; i < saved.size(); ++i)
      std::copy(saved[i].begin(), saved[i].end(), params[i].second.data());
  };
  auto loss_at = [&](double a, double b) {
    if (a == 0.0 && b == 0.0) {
      restore();
    } else {
      for (std::size_t i = 0; i < saved.size(); ++i) {
        S* out = params[i].second.data();
        const auto& base = saved[i];
        const auto& d1 = dirs[0][i];
        const auto& d2 = dirs[1][i];
        for (std::size_t e = 0; e < base.size(); ++e)
          out[e] = static_cast<S>(static_cast<double>(base[e]) + a * d1[e] + b * d2[e]);
      }
    }
    return batch_loss(model, images, labels);
  };
  auto grid = landscape_grid(loss_at, resolution, span);
  restore();
  return grid;
}

std::string cam_csv(const DiagnosticsReport& report);
std::string layer_summary_csv(const DiagnosticsReport& report);
std::string hessian_csv(const std::vector<std::pair<std::string, double>>& rows);
/// First row holds the a coordinates, first column the b coordinates, and the
/// body the loss values.
std::string landscape_csv(const LandscapeGrid& grid);

}  // namespace ternvit
