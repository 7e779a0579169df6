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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ternvit/common.hpp"
#include "ternvit/dataset.hpp"
#include "ternvit/quantize.hpp"
#include "ternvit/tensor.hpp"
#include "ternvit/vit.hpp"

namespace ternvit {

/// One epoch of training history. train_loss is the sample-weighted mean
/// cross-entropy over the epoch; accuracies are fractions in [0, 1].
struct TraceRow {
  std::string phase;
  Index epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double eval_acc = 0.0;
};

/// CSV with header `phase,epoch,train_loss,train_acc,eval_acc`. Doubles are
/// printed with max_digits10 so equal CSV bytes imply bit-equal traces.
std::string traces_to_csv(const std::vector<TraceRow>& rows);

/// Two-phase schedule: phase A trains with 8-bit weights and activations,
/// phase B with the ternary deployment policy. phase_a_epochs == 0 collapses
/// to a plain single-phase fine-tune from the given model state; from_scratch
/// records that the run starts from random init rather than a trained model
/// (pipeline drivers act on it, the epoch loop does not).
struct TrainSchedule {
  Index phase_a_epochs = 0;
  Index phase_b_epochs = 0;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Index batch_size = 32;
  std::uint64_t seed = 42;
  bool from_scratch = false;

  Index total_epochs() const { return phase_a_epochs + phase_b_epochs; }

  void validate() const {
    if (phase_a_epochs < 0 || phase_b_epochs < 0 || total_epochs() < 1)
      throw ConfigError("schedule needs nonnegative phase lengths and at least one epoch");
    if (!(lr >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("lr and weight decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(eps > 0.0)) throw ConfigError("Adam eps must be > 0");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  }
};

/// Cosine decay without restarts: base * 0.5 * (1 + cos(pi * epoch / total)).
/// Progressive runs pass global epoch indices so the decay is continuous
/// across the phase transition.
inline double cosine_lr(double base, Index epoch, Index total) {
  if (total < 1) throw ValueError("cosine_lr: total epochs must be >= 1");
  const double t = std::clamp(static_cast<double>(epoch) / static_cast<double>(total), 0.0, 1.0);
  return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

/// Adam moment buffers, one pair per parameter in model order.
template <typename S>
struct AdamWStateT {
  std::vector<TensorT<S>> m, v;
  Index step = 0;

  template <typename Params>
  static AdamWStateT init(const Params& params) {
    AdamWStateT st;
    for (const auto& [name, p] : params) {
      (void)name;
      st.m.push_back(TensorT<S>::zeros(p.shape()));
      st.v.push_back(TensorT<S>::zeros(p.shape()));
    }
    return st;
  }
};

using AdamWState = AdamWStateT<float>;

/// Weight decay applies to weight matrices only; biases, norm affines, the
/// class token and position table are exempt.
inline bool decayed_parameter(const std::string& name) {
  return name.size() > 2 && name.ends_with(".w");
}

/// One AdamW step over all parameters with decoupled weight decay. Missing
/// gradients count as zero so moments still decay. Arithmetic runs in double
/// and rounds once on store, keeping float runs reproducible.
template <typename S>
void adamw_update(std::vector<std::pair<std::string, TensorT<S>>>& params, AdamWStateT<S>& state,
                  double lr_now, const TrainSchedule& sched) {
  if (params.size() != state.m.size())
    throw ShapeError("adamw_update: optimizer state does not match the parameter list");
  ++state.step;
  const double bc1 = 1.0 - std::pow(sched.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(sched.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, p] = params[i];
    const S* g = p.has_grad() ? p.grad().data() : nullptr;
    S* th = p.data();
    S* m = state.m[i].data();
    S* v = state.v[i].data();
    const bool decay = decayed_parameter(name);
    for (Index e = 0; e < p.count(); ++e) {
      const double ge = g ? static_cast<double>(g[e]) : 0.0;
      const double me = sched.beta1 * static_cast<double>(m[e]) + (1.0 - sched.beta1) * ge;
      const double ve = sched.beta2 * static_cast<double>(v[e]) + (1.0 - sched.beta2) * ge * ge;
      m[e] = static_cast<S>(me);
      v[e] = static_cast<S>(ve);
      double step = lr_now * (me / bc1) / (std::sqrt(ve / bc2) + sched.eps);
      if (decay) step += lr_now * sched.weight_decay * static_cast<double>(th[e]);
      th[e] = static_cast<S>(static_cast<double>(th[e]) - step);
    }
  }
}

/// Order-sensitive FNV digest of every parameter's raw bytes. Equal hashes
/// mean bit-equal latent weights.
template <typename S>
std::uint64_t parameter_hash(const VisionTransformerT<S>& model) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, p] : model.parameters()) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(p.data(), static_cast<std::size_t>(p.count()) * sizeof(S), h);
  }
  return h;
}

/// Copy all latent parameters of src into dst. Both models must come from the
/// same config so the parameter lists line up.
template <typename S>
void copy_parameters(VisionTransformerT<S>& dst, const VisionTransformerT<S>& src) {
  auto& d = dst.parameters();
  const auto& s = src.parameters();
  if (d.size() != s.size()) throw ShapeError("copy_parameters: parameter lists differ in length");
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (d[i].first != s[i].first || !d[i].second.same_shape(s[i].second))
      throw ShapeError("copy_parameters: mismatch at " + d[i].first);
    std::copy_n(s[i].second.data(), s[i].second.count(), d[i].second.data());
  }
}

namespace detail {

template <typename S>
double eval_accuracy(const VisionTransformerT<S>& model, const DatasetT<S>& data,
                     Index batch_size) {
  if (data.size() == 0) return 0.0;
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  Index correct = 0;
  for (Index at = 0; at < data.size(); at += batch_size) {
    const Index take = std::min<Index>(batch_size, data.size() - at);
    auto [images, labels] = gather_batch(data, order, at, take);
    const auto pred = argmax_rows(model.forward(images));
    for (Index b = 0; b < take; ++b)
      if (pred[static_cast<std::size_t>(b)] == labels[static_cast<std::size_t>(b)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

template <typename S>
[[noreturn]] void abort_non_finite(const VisionTransformerT<S>& model, const std::string& phase,
                                   Index epoch, Index step, double loss) {
  std::ostringstream os;
  os << "non-finite loss in phase \"" << phase << "\" epoch " << epoch << " step " << step
     << ": loss=" << loss;
  for (const auto& [name, p] : model.parameters())
    if (!p.all_finite()) os << "; non-finite latent " << name;
  throw TrainAbort(os.str());
}

/// Epoch loop shared by every pipeline. Runs `epochs` epochs labeled `phase`,
/// numbering them epoch_begin.. and taking learning rates from the cosine
/// curve over `total` epochs. The caller owns rng and optimizer state so
/// multi-phase runs keep one continuous stream of both.
template <typename S>
void run_epochs(VisionTransformerT<S>& model, const QuantizationPolicy& policy,
                const std::string& phase, const TrainSchedule& sched, Index epoch_begin,
                Index epochs, Index total, const DatasetT<S>& train_data,
                const DatasetT<S>& eval_data, AdamWStateT<S>& opt, std::mt19937_64& rng,
                std::vector<TraceRow>& trace) {
  if (train_data.size() < 1) throw ValueError("training dataset is empty");
  model.set_policy(policy);
  auto& params = model.parameters();
  for (auto& [name, p] : params) {
    (void)name;
    p.set_requires_grad(true);
  }
  std::vector<Index> order(static_cast<std::size_t>(train_data.size()));
  std::iota(order.begin(), order.end(), Index{0});

  for (Index e = 0; e < epochs; ++e) {
    const Index epoch = epoch_begin + e;
    const double lr_now = cosine_lr(sched.lr, epoch, total);
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    Index correct = 0, step = 0;
    for (Index at = 0; at < train_data.size(); at += sched.batch_size, ++step) {
      const Index take = std::min<Index>(sched.batch_size, train_data.size() - at);
      auto [images, labels] = gather_batch(train_data, order, at, take);

      GradTape<S> tape;
      auto logits = model.forward(images);
      auto loss = cross_entropy_logits(logits, labels);
      const double loss_val = static_cast<double>(loss.value());
      if (!std::isfinite(loss_val)) abort_non_finite(model, phase, epoch, step, loss_val);

      const auto pred = argmax_rows(logits);
      for (Index b = 0; b < take; ++b)
        if (pred[static_cast<std::size_t>(b)] == labels[static_cast<std::size_t>(b)]) ++correct;
      loss_sum += loss_val * static_cast<double>(take);

      for (auto& [name, p] : params) {
        (void)name;
        p.zero_grad();
      }
      tape.backward(loss);
      adamw_update(params, opt, lr_now, sched);
    }

    TraceRow row;
    row.phase = phase;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(train_data.size());
    row.train_acc = static_cast<double>(correct) / static_cast<double>(train_data.size());
    row.eval_acc = eval_accuracy(model, eval_data, sched.batch_size);
    trace.push_back(std::move(row));
  }
}

inline QuantizationPolicy policy_for_mode(WeightMode mode, Granularity g) {
  QuantizationPolicy p;
  switch (mode) {
    case WeightMode::kReal32: p = real32_policy(); break;
    case WeightMode::kInt8: p = int8_policy(); break;
    case WeightMode::kTernary: p = ternary_policy(); break;
  }
  p.granularity = g;
  return p;
}

inline std::string mode_label(WeightMode mode) {
  switch (mode) {
    case WeightMode::kReal32: return "real32";
    case WeightMode::kInt8: return "int8";
    case WeightMode::kTernary: return "ternary";
  }
  throw ValueError("unknown weight mode");
}

}  // namespace detail

/// Single-phase QAT: quantize per `mode`, train for the schedule's total
/// epochs, return the per-epoch trace. Latent real-valued weights receive the
/// AdamW updates; quantized weights are recomputed from them every forward.
template <typename S>
std::vector<TraceRow> train_phase(VisionTransformerT<S>& model, WeightMode mode,
                                  const TrainSchedule& sched, const DatasetT<S>& train_data,
                                  const DatasetT<S>& eval_data,
                                  Granularity granularity = Granularity::kChannel) {
  sched.validate();
  const Index total = sched.total_epochs();
  auto opt = AdamWStateT<S>::init(model.parameters());
  std::mt19937_64 rng(sched.seed);
  std::vector<TraceRow> trace;
  detail::run_epochs(model, detail::policy_for_mode(mode, granularity), detail::mode_label(mode),
                     sched, 0, total, total, train_data, eval_data, opt, rng, trace);
  return trace;
}

template <typename S>
struct ProgressiveResultT {
  std::vector<TraceRow> trace;
  std::uint64_t latent_hash_before_switch = 0;
  std::uint64_t latent_hash_after_switch = 0;
  /// First ternary-epoch train loss minus last 8-bit-epoch train loss; the
  /// size of the bump the quantizer swap causes. Recorded, not asserted.
  double transition_loss_delta = 0.0;
};

using ProgressiveResult = ProgressiveResultT<float>;

/// Two-phase progressive QAT: phase A at 8 bits for phase_a_epochs, then the
/// quantizer switches to ternary while the latent weights, optimizer moments
/// and learning-rate curve continue untouched. phase_a_epochs == 0 degenerates
/// to train_phase(ternary) with an identical trace.
template <typename S>
ProgressiveResultT<S> progressive_train(VisionTransformerT<S>& model, const TrainSchedule& sched,
                                        const DatasetT<S>& train_data,
                                        const DatasetT<S>& eval_data,
                                        Granularity granularity = Granularity::kChannel) {
  sched.validate();
  const Index a = sched.phase_a_epochs, total = sched.total_epochs();
  auto opt = AdamWStateT<S>::init(model.parameters());
  std::mt19937_64 rng(sched.seed);

  ProgressiveResultT<S> out;
  if (a > 0)
    detail::run_epochs(model, detail::policy_for_mode(WeightMode::kInt8, granularity), "int8",
                       sched, 0, a, total, train_data, eval_data, opt, rng, out.trace);

  out.latent_hash_before_switch = parameter_hash(model);
  model.set_policy(detail::policy_for_mode(WeightMode::kTernary, granularity));
  out.latent_hash_after_switch = parameter_hash(model);

  detail::run_epochs(model, detail::policy_for_mode(WeightMode::kTernary, granularity), "ternary",
                     sched, a, sched.phase_b_epochs, total, train_data, eval_data, opt, rng,
                     out.trace);

  if (a > 0 && sched.phase_b_epochs > 0)
    out.transition_loss_delta = out.trace[static_cast<std::size_t>(a)].train_loss -
                                out.trace[static_cast<std::size_t>(a - 1)].train_loss;
  return out;
}

/// One schedule split of the phase-split comparison table.
struct SweepRow {
  Index phase_a = 0;
  Index phase_b = 0;
  double final_train_loss = 0.0;
  double final_eval_acc = 0.0;
};

/// Comparison table text: a header row naming each (a,b) split, then one row
/// per metric.
std::string sweep_table(const std::vector<SweepRow>& rows);

/// Train one fresh model per (phase_a, phase_b) split, all from the same seed
/// and total budget, and collect final metrics.
template <typename S = float>
std::vector<SweepRow> progressive_sweep(const ViTConfig& cfg, const TrainSchedule& base,
                                        const std::vector<std::pair<Index, Index>>& splits,
                                        const DatasetT<S>& train_data,
                                        const DatasetT<S>& eval_data) {
  std::vector<SweepRow> rows;
  for (const auto& [a, b] : splits) {
    TrainSchedule sched = base;
    sched.phase_a_epochs = a;
    sched.phase_b_epochs = b;
    VisionTransformerT<S> model(cfg, real32_policy(), sched.seed);
    const auto res = progressive_train(model, sched, train_data, eval_data);
    SweepRow row;
    row.phase_a = a;
    row.phase_b = b;
    row.final_train_loss = res.trace.back().train_loss;
    row.final_eval_acc = res.trace.back().eval_acc;
    rows.push_back(row);
  }
  return rows;
}

struct AblationRow {
  std::string pipeline;
  double final_train_loss = 0.0;
  double final_train_acc = 0.0;
  double final_eval_acc = 0.0;
};

template <typename S>
struct AblationResultT {
  std::vector<AblationRow> rows;
  /// Full pipeline traces parallel to rows, including the shared real-valued
  /// warmup prefix when pretrain_epochs > 0.
  std::vector<std::vector<TraceRow>> traces;
};

using AblationResult = AblationResultT<float>;

std::string ablation_table(const std::vector<AblationRow>& rows);

/// Component ablation: four quantized pipelines (threshold granularity x
/// progressive schedule) plus the real-valued reference, every row from the
/// same init and the same total epoch budget. With pretrain_epochs > 0 all
/// rows continue from one shared real-valued warmup model.
template <typename S = float>
AblationResultT<S> ablation_suite(const ViTConfig& cfg, const TrainSchedule& sched,
                                  const DatasetT<S>& train_data, const DatasetT<S>& eval_data,
                                  Index pretrain_epochs = 0) {
  sched.validate();
  if (pretrain_epochs < 0) throw ConfigError("pretrain_epochs must be >= 0");

  VisionTransformerT<S> warm(cfg, real32_policy(), sched.seed);
  std::vector<TraceRow> warm_trace;
  if (pretrain_epochs > 0) {
    TrainSchedule pre = sched;
    pre.phase_a_epochs = 0;
    pre.phase_b_epochs = pretrain_epochs;
    warm_trace = train_phase(warm, WeightMode::kReal32, pre, train_data, eval_data);
  }

  AblationResultT<S> out;
  auto run = [&](const std::string& name, bool progressive, Granularity g) {
    VisionTransformerT<S> model(cfg, real32_policy(), sched.seed);
    copy_parameters(model, warm);
    std::vector<TraceRow> trace = warm_trace;
    std::vector<TraceRow> own;
    if (name == "real32") {
      own = train_phase(model, WeightMode::kReal32, sched, train_data, eval_data);
    } else if (progressive) {
      own = progressive_train(model, sched, train_data, eval_data, g).trace;
    } else {
      own = train_phase(model, WeightMode::kTernary, sched, train_data, eval_data, g);
    }
    for (auto& row : own) {
      row.epoch += pretrain_epochs;
      trace.push_back(row);
    }
    AblationRow row;
    row.pipeline = name;
    row.final_train_loss = trace.back().train_loss;
    row.final_train_acc = trace.back().train_acc;
    row.final_eval_acc = trace.back().eval_acc;
    out.rows.push_back(row);
    out.traces.push_back(std::move(trace));
  };

  run("layer-wise", false, Granularity::kLayer);
  run("channel-wise", false, Granularity::kChannel);
  run("layer-wise + progressive", true, Granularity::kLayer);
  run("channel-wise + progressive", true, Granularity::kChannel);
  run("real32", false, Granularity::kChannel);
  return out;
}

}  // namespace ternvit
