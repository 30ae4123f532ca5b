#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "mmbert/tensor.hpp"

namespace testutil {

using mmbert::BasicTensor;
using mmbert::Shape;
using DT = BasicTensor<double>;

inline DT random_tensor(Shape s, std::mt19937_64& rng, double scale = 1.0, bool rg = true) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(mmbert::numel(s));
  for (auto& x : v) x = nd(rng);
  return DT(std::move(s), std::move(v), rg);
}

/// Tape gradients of f() w.r.t. `inputs` compared against centered
/// differences computed here; returns the worst relative error (denominator
/// floored at 1e-3 so near-zero gradients compare absolutely).
inline double max_grad_error(const std::function<DT()>& f, std::vector<DT> inputs, double h = 1e-5) {
  for (auto& x : inputs) x.zero_grad();
  {
    mmbert::BasicTape<double> tape;
    mmbert::BasicTapeScope<double> scope(tape);
    auto y = f();
    tape.backward(y);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& x : inputs)
    analytic.emplace_back(x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                       : std::vector<double>(x.size(), 0.0));
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto v = inputs[k].mutable_values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + h;
      const double up = f().item();
      v[i] = orig - h;
      const double down = f().item();
      v[i] = orig;
      const double num = (up - down) / (2 * h);
      const double a = analytic[k][i];
      const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-3});
      worst = std::max(worst, err);
    }
  }
  for (auto& x : inputs) x.zero_grad();
  return worst;
}

}  // namespace testutil
