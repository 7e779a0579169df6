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

#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "ternvit/common.hpp"
#include "ternvit/tensor.hpp"
#include "ternvit/vit.hpp"

namespace ternvit {

/// Labeled image set. Images are a single [N, C, H, W] tensor so a batch is a
/// contiguous copy of per-sample blocks.
template <typename S>
struct DatasetT {
  TensorT<S> images;
  std::vector<int> labels;

  Index size() const { return images.valid() ? images.dim(0) : 0; }
  Index num_classes() const {
    int top = -1;
    for (int y : labels) top = std::max(top, y);
    return top + 1;
  }
};

using Dataset = DatasetT<float>;

/// Procedural classification task: each class is a Gaussian intensity blob at
/// a class-specific location, with jittered centers, jittered amplitude, and
/// additive pixel noise. Classes are balanced (label = index mod classes) and
/// the whole set is a pure function of the seed.
template <typename S = float>
DatasetT<S> make_blob_dataset(const ViTConfig& cfg, Index samples, Index classes,
                              std::uint64_t seed) {
  cfg.validate();
  if (samples <= 0 || classes <= 1)
    throw ValueError("make_blob_dataset needs samples > 0 and classes > 1");

  const Index c = cfg.in_channels, h = cfg.image_size, w = cfg.image_size;
  DatasetT<S> out;
  out.images = TensorT<S>::zeros({samples, c, h, w});
  out.labels.resize(static_cast<std::size_t>(samples));

  // Class centers sit on a circle of radius H/4 around the image center, so
  // any two classes are spatially separated for classes << H.
  std::vector<std::pair<double, double>> centers;
  for (Index k = 0; k < classes; ++k) {
    const double ang = 2.0 * 3.14159265358979323846 * static_cast<double>(k) /
                       static_cast<double>(classes);
    centers.emplace_back(h / 2.0 + h / 4.0 * std::sin(ang), w / 2.0 + w / 4.0 * std::cos(ang));
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double sigma = static_cast<double>(h) / 6.0;
  const Index stride = c * h * w;

  for (Index i = 0; i < samples; ++i) {
    const int label = static_cast<int>(i % classes);
    out.labels[static_cast<std::size_t>(i)] = label;
    const double cy = centers[static_cast<std::size_t>(label)].first + unit(rng) * h / 16.0;
    const double cx = centers[static_cast<std::size_t>(label)].second + unit(rng) * w / 16.0;
    const double amp = 1.5 + 0.25 * unit(rng);
    S* px = out.images.data() + i * stride;
    for (Index ch = 0; ch < c; ++ch)
      for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x) {
          const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
          const double v = amp * std::exp(-d2 / (2.0 * sigma * sigma)) + 0.15 * noise(rng);
          px[(ch * h + y) * w + x] = static_cast<S>(v);
        }
  }
  return out;
}

/// Copy samples order[begin .. begin+count) into a fresh [count, C, H, W]
/// batch. The copy keeps batches independent of the source tensor.
template <typename S>
std::pair<TensorT<S>, std::vector<int>> gather_batch(const DatasetT<S>& data,
                                                     const std::vector<Index>& order, Index begin,
                                                     Index count) {
  if (begin < 0 || count <= 0 || begin + count > static_cast<Index>(order.size()))
    throw ValueError("gather_batch: window outside the index order");
  std::vector<Index> shape = data.images.shape();
  shape[0] = count;
  TensorT<S> images = TensorT<S>::zeros(shape);
  std::vector<int> labels(static_cast<std::size_t>(count));
  const Index stride = data.images.count() / data.size();
  for (Index b = 0; b < count; ++b) {
    const Index src = order[static_cast<std::size_t>(begin + b)];
    if (src < 0 || src >= data.size()) throw ValueError("gather_batch: index out of range");
    std::copy_n(data.images.data() + src * stride, stride, images.data() + b * stride);
    labels[static_cast<std::size_t>(b)] = data.labels[static_cast<std::size_t>(src)];
  }
  return {images, labels};
}

}  // namespace ternvit
