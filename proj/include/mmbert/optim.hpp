#pragma once

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mmbert/layers.hpp"

namespace mmbert {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Moments of one parameter tensor.
struct AdamMoments {
  std::vector<double> m, v;
  std::size_t step = 0;
};

/// One decoupled-weight-decay Adam update (PyTorch AdamW ordering: decay,
/// then the bias-corrected Adam step).
template <typename T>
void adamw_update(std::span<T> param, std::span<const T> grad, AdamMoments& st, double lr, const AdamWOptions& opt) {
  if (!(lr >= 0)) throw ConfigError("AdamW: learning rate must be >= 0, got " + std::to_string(lr));
  if (grad.size() != param.size()) throw DimensionError("AdamW: gradient and parameter sizes differ");
  if (st.m.empty()) {
    st.m.assign(param.size(), 0.0);
    st.v.assign(param.size(), 0.0);
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, double(st.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, double(st.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    st.m[i] = opt.beta1 * st.m[i] + (1 - opt.beta1) * g;
    st.v[i] = opt.beta2 * st.v[i] + (1 - opt.beta2) * g * g;
    double p = double(param[i]) * (1 - lr * opt.weight_decay);
    p -= lr * (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + opt.eps);
    param[i] = T(p);
  }
}

template <typename T>
struct ParamGroup {
  std::string name;
  double lr = 0;
  std::vector<NamedTensor<T>> params;
};

template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWOptions opt = {}) : opt_(opt) {}

  const AdamWOptions& options() const { return opt_; }
  std::size_t steps() const { return steps_; }
  const std::map<std::string, AdamMoments>& state() const { return state_; }
  std::map<std::string, AdamMoments>& state() { return state_; }

  /// Updates every parameter that has a gradient; lr is scaled by `lr_scale`
  /// (the schedule factor).
  void step(std::vector<ParamGroup<T>>& groups, double lr_scale = 1.0) {
    for (auto& g : groups) {
      const double lr = g.lr * lr_scale;
      if (!(lr >= 0)) throw ConfigError("AdamW: learning rate must be >= 0 for group " + g.name);
      for (auto& p : g.params) {
        if (!p.tensor.has_grad()) continue;
        adamw_update<T>(p.tensor.mutable_values(), p.tensor.grad(), state_[p.name], lr, opt_);
      }
    }
    ++steps_;
  }

 private:
  AdamWOptions opt_;
  std::map<std::string, AdamMoments> state_;
  std::size_t steps_ = 0;
};

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<ParamGroup<T>>& groups, double max_norm) {
  double sq = 0;
  for (const auto& g : groups)
    for (const auto& p : g.params)
      for (T x : p.tensor.grad()) sq += double(x) * x;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T s = T(max_norm / (norm + 1e-12));
    for (const auto& g : groups)
      for (auto p : g.params)
        if (p.tensor.has_grad())
          for (T& x : p.tensor.mutable_grad()) x *= s;
  }
  return norm;
}

/// Multiplier for linear decay to zero over `total_steps`.
inline double linear_decay(std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return 1.0;
  return std::max(0.0, 1.0 - double(step) / double(total_steps));
}

}  // namespace mmbert
