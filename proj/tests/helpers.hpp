// Shared test utilities: seeded tensor generators and a central-difference
// gradient oracle evaluated in the tensor's own scalar type.
#pragma once

#include <cmath>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "ternvit/tensor.hpp"

namespace tv_test {

using ternvit::Index;
using ternvit::TensorT;

template <typename S>
TensorT<S> randn(std::mt19937& rng, std::vector<Index> shape, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  auto t = TensorT<S>::zeros(std::move(shape));
  for (auto& v : t.values()) v = static_cast<S>(d(rng));
  return t;
}

template <typename S>
TensorT<S> uniform(std::mt19937& rng, std::vector<Index> shape, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  auto t = TensorT<S>::zeros(std::move(shape));
  for (auto& v : t.values()) v = static_cast<S>(d(rng));
  return t;
}

// Mixed relative/absolute error used throughout the tests:
// |a - b| / max(1, |b|).
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max(1.0, std::abs(b));
}

// Runs make_loss twice: once under a tape to collect analytic gradients,
// then element by element with central differences. Returns the worst
// rel_err over every element of every parameter. make_loss must be a pure
// function of the parameter values.
template <typename S, typename F>
double max_grad_err(std::vector<TensorT<S>> params, F make_loss, double h = 1e-5) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.ensure_grad();
    p.zero_grad();
  }
  std::vector<std::vector<S>> analytic;
  {
    ternvit::GradTape<S> tape;
    auto loss = make_loss();
    tape.backward(loss);
  }
  for (auto& p : params) analytic.push_back(p.grad());

  for (auto& p : params) p.set_requires_grad(false);
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    for (std::size_t i = 0; i < p.values().size(); ++i) {
      const S saved = p.values()[i];
      p.values()[i] = saved + static_cast<S>(h);
      const double lp = static_cast<double>(make_loss().value());
      p.values()[i] = saved - static_cast<S>(h);
      const double lm = static_cast<double>(make_loss().value());
      p.values()[i] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      worst = std::max(worst, rel_err(static_cast<double>(analytic[pi][i]), fd));
    }
  }
  for (auto& p : params) p.set_requires_grad(true);
  return worst;
}

}  // namespace tv_test
