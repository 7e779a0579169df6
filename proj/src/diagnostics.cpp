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

#include "ternvit/diagnostics.hpp"

#include <iomanip>
#include <sstream>

namespace ternvit {

namespace {

double l2(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

}  // namespace

HessianEstimate power_iteration_top_eig(
    const std::function<std::vector<double>(const std::vector<double>&)>& grad_fn,
    const std::vector<double>& theta0, Index iters, double tol, std::uint64_t seed) {
  if (iters < 1) throw ValueError("power iteration needs iters >= 1");
  const std::size_t n = theta0.size();
  if (n == 0) throw ValueError("power iteration on an empty parameter vector");

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = normal(rng);
  const double v0 = l2(v);
  for (auto& x : v) x /= v0;

  const double theta_norm = l2(theta0);
  HessianEstimate est;
  std::vector<double> plus(n), minus(n), hv(n);
  double prev = 0.0;

  for (Index it = 1; it <= iters; ++it) {
    // v stays unit-norm, so the printed formula reduces to eps = 1e-3*|theta|.
    double eps = 1e-3 * theta_norm / l2(v);
    if (!(eps > 0.0)) eps = 1e-3;
    for (std::size_t i = 0; i < n; ++i) plus[i] = theta0[i] + eps * v[i];
    for (std::size_t i = 0; i < n; ++i) minus[i] = theta0[i] - eps * v[i];
    const auto gp = grad_fn(plus);
    const auto gm = grad_fn(minus);
    if (gp.size() != n || gm.size() != n)
      throw ShapeError("power iteration: gradient size does not match theta");
    for (std::size_t i = 0; i < n; ++i) hv[i] = (gp[i] - gm[i]) / (2.0 * eps);

    double rayleigh = 0.0;
    for (std::size_t i = 0; i < n; ++i) rayleigh += v[i] * hv[i];
    est.rayleigh_history.push_back(rayleigh);
    est.iters_used = it;

    const double hn = l2(hv);
    if (hn < 1e-300) {
      est.degenerate = true;
      est.eigenvalue = 0.0;
      return est;
    }
    for (std::size_t i = 0; i < n; ++i) v[i] = hv[i] / hn;

    est.eigenvalue = rayleigh;
    if (it > 1 && std::abs(rayleigh - prev) < tol * std::max(1.0, std::abs(rayleigh))) return est;
    prev = rayleigh;
  }
  return est;
}

LandscapeGrid landscape_grid(const std::function<double(double, double)>& loss_at,
                             Index resolution, double span) {
  if (resolution < 3 || resolution % 2 == 0)
    throw ValueError("landscape resolution must be odd and >= 3 so (0,0) is on the grid");
  if (!(span > 0.0)) throw ValueError("landscape span must be > 0");

  const Index mid = resolution / 2;
  const double step = 2.0 * span / static_cast<double>(resolution - 1);
  std::vector<double> coords(static_cast<std::size_t>(resolution));
  for (Index i = 0; i < resolution; ++i) coords[static_cast<std::size_t>(i)] = -span + step * i;
  coords[static_cast<std::size_t>(mid)] = 0.0;

  LandscapeGrid grid;
  grid.a_coords = coords;
  grid.b_coords = coords;
  grid.losses.resize(resolution, resolution);
  for (Index bi = 0; bi < resolution; ++bi)
    for (Index ai = 0; ai < resolution; ++ai)
      grid.losses(bi, ai) = loss_at(coords[static_cast<std::size_t>(ai)],
                                    coords[static_cast<std::size_t>(bi)]);
  return grid;
}

std::string cam_csv(const DiagnosticsReport& report) {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "layer,channel,cam\n";
  for (const auto& layer : report.layers)
    for (std::size_t j = 0; j < layer.cam.size(); ++j)
      os << layer.layer_id << ',' << j << ',' << layer.cam[j] << '\n';
  return os.str();
}

std::string layer_summary_csv(const DiagnosticsReport& report) {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "layer,channels,sdam,dead_count,reference_min_cam\n";
  for (const auto& layer : report.layers)
    os << layer.layer_id << ',' << layer.cam.size() << ',' << layer.sdam << ','
       << layer.dead_count << ',' << report.reference_min_cam << '\n';
  return os.str();
}

std::string hessian_csv(const std::vector<std::pair<std::string, double>>& rows) {
  std::ostringstream os;
  os << std::setprecision(9);
  os << "layer,top_eigenvalue\n";
  for (const auto& [id, eig] : rows) os << id << ',' << eig << '\n';
  return os.str();
}

std::string landscape_csv(const LandscapeGrid& grid) {
  std::ostringstream os;
  os << std::setprecision(9);
  for (double a : grid.a_coords) os << ',' << a;
  os << '\n';
  for (Index bi = 0; bi < grid.losses.rows(); ++bi) {
    os << grid.b_coords[static_cast<std::size_t>(bi)];
    for (Index ai = 0; ai < grid.losses.cols(); ++ai) os << ',' << grid.losses(bi, ai);
    os << '\n';
  }
  return os.str();
}

}  // namespace ternvit
