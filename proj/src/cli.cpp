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

#include "ternvit/cli.hpp"

#include <cctype>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ternvit/diagnostics.hpp"
#include "ternvit/io.hpp"
#include "ternvit/kernels.hpp"
#include "ternvit/train.hpp"

namespace ternvit::cli {

namespace {

WeightMode parse_mode(const std::string& s) {
  if (s == "real32") return WeightMode::kReal32;
  if (s == "int8") return WeightMode::kInt8;
  if (s == "ternary") return WeightMode::kTernary;
  throw ConfigError("unknown mode \"" + s + "\" (expected real32, int8 or ternary)");
}

Granularity parse_granularity(const std::string& s) {
  if (s == "channel") return Granularity::kChannel;
  if (s == "layer") return Granularity::kLayer;
  throw ConfigError("unknown granularity \"" + s + "\" (expected channel or layer)");
}

/// The whole-model policy a single-mode run trains and deploys under.
QuantizationPolicy preset_policy(WeightMode mode, Granularity g) {
  QuantizationPolicy p;
  switch (mode) {
    case WeightMode::kReal32: p = real32_policy(); break;
    case WeightMode::kInt8: p = int8_policy(); break;
    case WeightMode::kTernary: p = ternary_policy(); break;
  }
  p.granularity = g;
  return p;
}

void emit(const std::string& text, const std::string& path) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f << text;
  if (!f) throw IoError("failed writing " + path);
}

struct EvalMetrics {
  Index samples = 0;
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

EvalMetrics evaluate(const VisionTransformer& model, const Dataset& data, Index batch_size) {
  EvalMetrics out;
  out.samples = data.size();
  if (data.size() == 0) return out;
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  Index correct = 0;
  double loss_sum = 0.0;
  for (Index at = 0; at < data.size(); at += batch_size) {
    const Index take = std::min<Index>(batch_size, data.size() - at);
    auto [images, labels] = gather_batch(data, order, at, take);
    const auto logits = model.forward(images);
    loss_sum += static_cast<double>(cross_entropy_logits(logits, labels).value()) *
                static_cast<double>(take);
    const auto pred = argmax_rows(logits);
    for (Index i = 0; i < take; ++i)
      if (pred[static_cast<std::size_t>(i)] == labels[static_cast<std::size_t>(i)]) ++correct;
  }
  out.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  out.mean_loss = loss_sum / static_cast<double>(data.size());
  return out;
}

/// Rebuild the model a checkpoint was saved from, using its embedded config.
struct RestoredModel {
  RunConfig config;
  VisionTransformer model;
};

RestoredModel restore(const Checkpoint& ckpt, std::uint64_t seed) {
  RunConfig rc = parse_config_text(ckpt.config_text);
  RestoredModel out{rc, VisionTransformer(rc.model, rc.policy, seed)};
  apply_checkpoint(out.model, ckpt, ckpt.config_text);
  return out;
}

std::string slug(const std::string& name) {
  std::string out;
  bool gap = false;
  for (char c : name) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      if (gap && !out.empty()) out.push_back('_');
      gap = false;
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else {
      gap = true;
    }
  }
  return out;
}

std::pair<Dataset, Dataset> load_splits(const RunConfig& rc) {
  return {make_dataset(rc.data, rc.model, false), make_dataset(rc.data, rc.model, true)};
}

struct BenchShape {
  Index m = 0, k = 0, n = 0;
};

std::vector<BenchShape> parse_shapes(const std::string& text) {
  std::vector<BenchShape> out;
  std::istringstream is(text);
  std::string part;
  while (std::getline(is, part, ',')) {
    BenchShape s;
    if (std::sscanf(part.c_str(), "%ld:%ld:%ld", &s.m, &s.k, &s.n) != 3 || s.m <= 0 ||
        s.k <= 0 || s.n <= 0)
      throw ConfigError("bad shape \"" + part + "\" (expected M:K:N with positive sizes)");
    out.push_back(s);
  }
  if (out.empty()) throw ConfigError("no shapes given");
  return out;
}

// ---------------------------------------------------------------------------
// subcommand bodies

struct CommonFlags {
  std::string config_path;
  std::string out_path;
  std::string trace_path;
  std::uint64_t seed = 42;
};

int cmd_train(const CommonFlags& f, const std::string& mode_str) {
  const WeightMode mode = parse_mode(mode_str);
  RunConfig rc = parse_config(f.config_path);
  const auto [train_data, eval_data] = load_splits(rc);

  VisionTransformer model(rc.model, real32_policy(), f.seed);
  std::cerr << "train[" << mode_str << "]: " << rc.schedule.total_epochs() << " epochs, "
            << train_data.size() << " train / " << eval_data.size() << " eval samples\n";
  const auto trace =
      train_phase(model, mode, rc.schedule, train_data, eval_data, rc.policy.granularity);
  std::cerr << "train[" << mode_str << "]: final loss " << trace.back().train_loss
            << ", eval acc " << trace.back().eval_acc << "\n";

  emit(traces_to_csv(trace), f.trace_path);
  if (!f.out_path.empty()) {
    rc.policy = preset_policy(mode, rc.policy.granularity);
    save_checkpoint_file(checkpoint_from_model(model, write_config(rc), SaveMode::kLatent),
                         f.out_path);
    std::cerr << "train[" << mode_str << "]: wrote " << f.out_path << "\n";
  }
  return 0;
}

int cmd_progressive(const CommonFlags& f) {
  RunConfig rc = parse_config(f.config_path);
  const auto [train_data, eval_data] = load_splits(rc);

  VisionTransformer model(rc.model, real32_policy(), f.seed);
  std::cerr << "progressive: phases " << rc.schedule.phase_a_epochs << "+"
            << rc.schedule.phase_b_epochs << ", " << train_data.size() << " train samples\n";
  const auto res =
      progressive_train(model, rc.schedule, train_data, eval_data, rc.policy.granularity);
  std::cerr << "progressive: transition loss delta " << res.transition_loss_delta
            << ", final eval acc " << res.trace.back().eval_acc << "\n";

  emit(traces_to_csv(res.trace), f.trace_path);
  if (!f.out_path.empty()) {
    rc.policy = preset_policy(WeightMode::kTernary, rc.policy.granularity);
    save_checkpoint_file(checkpoint_from_model(model, write_config(rc), SaveMode::kLatent),
                         f.out_path);
    std::cerr << "progressive: wrote " << f.out_path << "\n";
  }
  return 0;
}

int cmd_ablate(const CommonFlags& f, Index pretrain) {
  RunConfig rc = parse_config(f.config_path);
  const auto [train_data, eval_data] = load_splits(rc);

  std::cerr << "ablate: five pipelines, phases " << rc.schedule.phase_a_epochs << "+"
            << rc.schedule.phase_b_epochs << ", warmup " << pretrain << "\n";
  const auto res = ablation_suite(rc.model, rc.schedule, train_data, eval_data, pretrain);

  std::filesystem::create_directories(f.out_path);
  const auto dir = std::filesystem::path(f.out_path);
  emit(ablation_table(res.rows), (dir / "summary.csv").string());
  for (std::size_t i = 0; i < res.rows.size(); ++i)
    emit(traces_to_csv(res.traces[i]), (dir / (slug(res.rows[i].pipeline) + ".csv")).string());
  std::cerr << "ablate: wrote " << res.rows.size() + 1 << " files under " << f.out_path << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& split, Index batch, const std::string& out_path,
             std::uint64_t seed) {
  if (split != "train" && split != "eval")
    throw ConfigError("unknown split \"" + split + "\" (expected train or eval)");
  auto restored = restore(load_checkpoint_file(ckpt_path), seed);
  DatasetSource src = restored.config.data;
  if (!data_path.empty()) src = parse_config(data_path).data;
  const Dataset data = make_dataset(src, restored.config.model, split == "eval");

  const EvalMetrics m = evaluate(restored.model, data, batch);
  std::cerr << "eval: accuracy " << m.accuracy << " over " << m.samples << " " << split
            << " samples\n";
  std::ostringstream os;
  os << "split,samples,accuracy,mean_loss\n"
     << split << "," << m.samples << "," << std::setprecision(17) << m.accuracy << ","
     << m.mean_loss << "\n";
  emit(os.str(), out_path);
  return 0;
}

int cmd_quantize(const std::string& ckpt_path, const std::string& policy_str,
                 const std::string& gran_str, const std::string& out_path, std::uint64_t seed) {
  auto restored = restore(load_checkpoint_file(ckpt_path), seed);
  const QuantizationPolicy policy =
      preset_policy(parse_mode(policy_str), parse_granularity(gran_str));
  restored.model.set_policy(policy);
  restored.config.policy = policy;

  save_checkpoint_file(
      checkpoint_from_model(restored.model, write_config(restored.config), SaveMode::kDeployed),
      out_path);
  const SizeReport rep = model_size_bytes(restored.config.model, policy);
  std::cerr << "quantize[" << policy_str << "]: wrote " << out_path << "\n";
  std::cout << "policy,real_mb,policy_mb,ratio\n"
            << policy_str << "," << std::setprecision(6) << std::fixed << rep.real32_mb() << ","
            << rep.policy_mb() << "," << std::setprecision(3) << rep.ratio << "\n";
  return 0;
}

int cmd_size(const std::string& config_path, const std::string& policy_str,
             const std::string& gran_str) {
  const RunConfig rc = parse_config(config_path);
  QuantizationPolicy policy = rc.policy;
  std::string label = policy_str;
  if (!policy_str.empty()) {
    policy = preset_policy(parse_mode(policy_str), parse_granularity(gran_str));
  } else {
    switch (policy.default_weights) {
      case WeightMode::kReal32: label = "real32"; break;
      case WeightMode::kInt8: label = "int8"; break;
      case WeightMode::kTernary: label = "ternary"; break;
    }
  }
  const SizeReport rep = model_size_bytes(rc.model, policy);
  std::cerr << "size: " << rep.real32_mb() << " MB real, " << rep.policy_mb() << " MB under "
            << label << ", " << rep.ratio << "x\n";
  std::cout << "policy,real_mb,policy_mb,ratio\n"
            << label << "," << std::setprecision(6) << std::fixed << rep.real32_mb() << ","
            << rep.policy_mb() << "," << std::setprecision(3) << rep.ratio << "\n";
  return 0;
}

int cmd_diagnose(const std::string& ckpt_path, bool hessian, const std::string& out_dir,
                 Index batch, Index iters, std::uint64_t seed) {
  auto restored = restore(load_checkpoint_file(ckpt_path), seed);
  const DiagnosticsReport report = weight_diagnostics(restored.model);
  Index dead = 0, channels = 0;
  for (const auto& l : report.layers) {
    dead += l.dead_count;
    channels += static_cast<Index>(l.cam.size());
  }
  std::cerr << "diagnose: " << report.layers.size() << " weight layers, " << dead << "/"
            << channels << " dead channels\n";

  std::string hessian_text;
  if (hessian) {
    const Dataset data = make_dataset(restored.config.data, restored.config.model, false);
    if (data.size() < batch) batch = data.size();
    std::vector<Index> order(static_cast<std::size_t>(data.size()));
    std::iota(order.begin(), order.end(), Index{0});
    auto [images, labels] = gather_batch(data, order, 0, batch);
    std::vector<std::pair<std::string, double>> rows;
    for (auto* layer : restored.model.weight_layers()) {
      const auto est = hessian_top_eigenvalue(restored.model, layer->id, images, labels, iters,
                                              1e-3, seed);
      rows.emplace_back(layer->id, est.eigenvalue);
      std::cerr << "diagnose: " << layer->id << " top eigenvalue " << est.eigenvalue
                << (est.degenerate ? " (degenerate)" : "") << "\n";
    }
    hessian_text = hessian_csv(rows);
  }

  if (out_dir.empty()) {
    std::cout << layer_summary_csv(report);
    if (hessian) std::cout << hessian_text;
    return 0;
  }
  std::filesystem::create_directories(out_dir);
  const auto dir = std::filesystem::path(out_dir);
  emit(layer_summary_csv(report), (dir / "summary.csv").string());
  emit(cam_csv(report), (dir / "cam.csv").string());
  if (hessian) emit(hessian_text, (dir / "hessian.csv").string());
  std::cerr << "diagnose: wrote reports under " << out_dir << "\n";
  return 0;
}

int cmd_landscape(const std::string& ckpt_path, Index resolution, double span,
                  const std::string& out_path, Index batch, std::uint64_t seed) {
  auto restored = restore(load_checkpoint_file(ckpt_path), seed);
  const Dataset data = make_dataset(restored.config.data, restored.config.model, false);
  if (data.size() < batch) batch = data.size();
  std::vector<Index> order(static_cast<std::size_t>(data.size()));
  std::iota(order.begin(), order.end(), Index{0});
  auto [images, labels] = gather_batch(data, order, 0, batch);

  std::cerr << "landscape: " << resolution << "x" << resolution << " grid, span " << span
            << ", batch " << batch << "\n";
  const LandscapeGrid grid =
      loss_landscape_2d(restored.model, images, labels, resolution, span, seed);
  emit(landscape_csv(grid), out_path);
  return 0;
}

int cmd_bench(const std::string& shapes_str, Index iters, std::uint64_t seed) {
  const auto shapes = parse_shapes(shapes_str);
  if (iters < 1) throw ConfigError("iters must be >= 1");
  std::mt19937 rng(static_cast<unsigned>(seed));
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);

  auto fill = [&](Tensor& t) {
    for (Index i = 0; i < t.count(); ++i) t.data()[i] = dist(rng);
  };
  auto time_ms = [&](auto&& fn) {
    fn();  // warm up, excluded from timing
    const auto t0 = std::chrono::steady_clock::now();
    for (Index i = 0; i < iters; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() /
           static_cast<double>(iters);
  };

  std::cout << "m,k,n,dense_ms,ternary_f32_ms,ternary_i8_ms\n";
  for (const auto& s : shapes) {
    auto x = Tensor::zeros({s.m, s.k});
    auto w = Tensor::zeros({s.k, s.n});
    fill(x);
    fill(w);
    const auto t = ternarize(w, Granularity::kChannel);
    const auto plan = make_plan(t);
    const auto wd = dequantize_ternary(t);
    const auto xq = quantize_minmax8(x);

    const double dense = time_ms([&] { matmul(x, wd); });
    const double tern = time_ms([&] { ternary_gemm_f32(x, plan); });
    const double i8 = time_ms([&] { ternary_gemm_i8(xq, plan); });
    std::cerr << "bench " << s.m << "x" << s.k << "x" << s.n << ": dense " << dense
              << " ms, ternary " << tern << " ms, int8 " << i8 << " ms\n";
    std::cout << s.m << "," << s.k << "," << s.n << "," << std::setprecision(4) << std::fixed
              << dense << "," << tern << "," << i8 << "\n";
  }
  return 0;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"ternary vision transformer toolkit"};
  app.require_subcommand(1);

  CommonFlags train_f, prog_f, abl_f;
  std::string train_mode = "ternary";
  Index abl_pretrain = 0;

  auto* train = app.add_subcommand("train", "single-phase quantization-aware training");
  train->add_option("--config", train_f.config_path, "run config file")->required();
  train->add_option("--mode", train_mode, "weight mode: real32, int8 or ternary");
  train->add_option("--out", train_f.out_path, "checkpoint to write");
  train->add_option("--trace", train_f.trace_path, "loss trace CSV (default stdout)");
  train->add_option("--seed", train_f.seed, "model initialization seed");

  auto* prog = app.add_subcommand("progressive", "8-bit then ternary two-phase training");
  prog->add_option("--config", prog_f.config_path, "run config file")->required();
  prog->add_option("--out", prog_f.out_path, "checkpoint to write");
  prog->add_option("--trace", prog_f.trace_path, "loss trace CSV (default stdout)");
  prog->add_option("--seed", prog_f.seed, "model initialization seed");

  auto* abl = app.add_subcommand("ablate", "granularity x schedule pipeline comparison");
  abl->add_option("--config", abl_f.config_path, "run config file")->required();
  abl->add_option("--out", abl_f.out_path, "directory for summary and trace CSVs")->required();
  abl->add_option("--pretrain", abl_pretrain, "shared real-valued warmup epochs");
  abl->add_option("--seed", abl_f.seed, "model initialization seed");

  std::string eval_ckpt, eval_data, eval_split = "eval", eval_out;
  Index eval_batch = 64;
  std::uint64_t eval_seed = 42;
  auto* ev = app.add_subcommand("eval", "accuracy and loss of a checkpoint");
  ev->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
  ev->add_option("--data", eval_data, "config supplying an alternate [data] section");
  ev->add_option("--split", eval_split, "train or eval split");
  ev->add_option("--batch", eval_batch, "evaluation batch size");
  ev->add_option("--out", eval_out, "metrics CSV (default stdout)");
  ev->add_option("--seed", eval_seed, "seed for model scaffolding");

  std::string q_ckpt, q_policy = "ternary", q_gran = "channel", q_out;
  std::uint64_t q_seed = 42;
  auto* qz = app.add_subcommand("quantize", "one-shot requantization of checkpoint latents");
  qz->add_option("--ckpt", q_ckpt, "checkpoint file")->required();
  qz->add_option("--policy", q_policy, "target mode: real32, int8 or ternary");
  qz->add_option("--granularity", q_gran, "threshold granularity: channel or layer");
  qz->add_option("--out", q_out, "deployed checkpoint to write")->required();
  qz->add_option("--seed", q_seed, "seed for model scaffolding");

  std::string size_config, size_policy, size_gran = "channel";
  auto* sz = app.add_subcommand("size", "storage accounting for a config and policy");
  sz->add_option("--config", size_config, "run config file")->required();
  sz->add_option("--policy", size_policy,
                 "override mode: real32, int8 or ternary (default from config)");
  sz->add_option("--granularity", size_gran, "threshold granularity: channel or layer");

  std::string d_ckpt, d_out;
  bool d_hessian = false;
  Index d_batch = 16, d_iters = 30;
  std::uint64_t d_seed = 42;
  auto* dg = app.add_subcommand("diagnose", "channel magnitude and curvature reports");
  dg->add_option("--ckpt", d_ckpt, "checkpoint file")->required();
  dg->add_flag("--hessian", d_hessian, "estimate per-layer top Hessian eigenvalues");
  dg->add_option("--out", d_out, "directory for CSV reports (default stdout summary)");
  dg->add_option("--batch", d_batch, "batch size for curvature estimates");
  dg->add_option("--iters", d_iters, "power iteration count");
  dg->add_option("--seed", d_seed, "batch and start-vector seed");

  std::string l_ckpt, l_out;
  Index l_res = 5, l_batch = 16;
  double l_span = 0.5;
  std::uint64_t l_seed = 42;
  auto* ls = app.add_subcommand("landscape", "2-D filter-normalized loss surface grid");
  ls->add_option("--ckpt", l_ckpt, "checkpoint file")->required();
  ls->add_option("--resolution", l_res, "odd grid resolution >= 3");
  ls->add_option("--span", l_span, "half-width of the perturbation range");
  ls->add_option("--out", l_out, "grid CSV (default stdout)");
  ls->add_option("--batch", l_batch, "batch size for the loss surface");
  ls->add_option("--seed", l_seed, "direction seed");

  std::string b_shapes = "64:256:256";
  Index b_iters = 20;
  std::uint64_t b_seed = 42;
  auto* bn = app.add_subcommand("bench", "GEMM kernel timings");
  bn->add_option("--shapes", b_shapes, "comma-separated M:K:N triples");
  bn->add_option("--iters", b_iters, "timed repetitions per kernel");
  bn->add_option("--seed", b_seed, "operand seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*train) return cmd_train(train_f, train_mode);
    if (*prog) return cmd_progressive(prog_f);
    if (*abl) return cmd_ablate(abl_f, abl_pretrain);
    if (*ev) return cmd_eval(eval_ckpt, eval_data, eval_split, eval_batch, eval_out, eval_seed);
    if (*qz) return cmd_quantize(q_ckpt, q_policy, q_gran, q_out, q_seed);
    if (*sz) return cmd_size(size_config, size_policy, size_gran);
    if (*dg) return cmd_diagnose(d_ckpt, d_hessian, d_out, d_batch, d_iters, d_seed);
    if (*ls) return cmd_landscape(l_ckpt, l_res, l_span, l_out, l_batch, l_seed);
    if (*bn) return cmd_bench(b_shapes, b_iters, b_seed);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ValueError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace ternvit::cli
