// Central finite-difference oracle for analytic gradients.
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mmbert/layers.hpp"

namespace mmbert {

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t coordinates = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

/// Perturbs every coordinate of every parameter by +/-step and compares the
/// centered difference with the tape gradient:
///   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
/// `f` must be deterministic and return a scalar.
template <typename T, typename F>
GradCheckResult finite_diff_check(F&& f, const ParamList<T>& params, double step = 1e-3) {
  for (auto p : params) {
    p.tensor.set_requires_grad(true);
    p.tensor.zero_grad();
  }
  {
    BasicTape<T> tape;
    BasicTapeScope<T> scope(tape);
    auto loss = f();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) {
    std::vector<double> g(p.tensor.size(), 0.0);
    if (p.tensor.has_grad()) std::copy(p.tensor.grad().begin(), p.tensor.grad().end(), g.begin());
    analytic.push_back(std::move(g));
  }

  GradCheckResult res;
  NoGradScope<T> no_grad;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto tensor = params[k].tensor;
    auto vals = tensor.mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const T orig = vals[i];
      vals[i] = T(double(orig) + step);
      const double up = double(f().item());
      vals[i] = T(double(orig) - step);
      const double down = double(f().item());
      vals[i] = orig;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = (a == numeric) ? 0.0 : std::abs(a - numeric) / denom;
      ++res.coordinates;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = params[k].name;
        res.worst_index = i;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  for (auto p : params) p.tensor.zero_grad();
  return res;
}

}  // namespace mmbert
