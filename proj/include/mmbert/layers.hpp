#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "mmbert/tensor.hpp"

namespace mmbert {

template <typename T>
struct NamedTensor {
  std::string name;
  BasicTensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

template <typename T, typename Rng>
BasicTensor<T> uniform_param(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = T(dist(rng));
  return BasicTensor<T>(std::move(shape), std::move(v), true);
}

template <typename T, typename Rng>
BasicTensor<T> normal_param(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = T(dist(rng));
  return BasicTensor<T>(std::move(shape), std::move(v), true);
}

/// y = x W + b with W stored [in, out].
template <typename T>
struct Linear {
  BasicTensor<T> weight;
  BasicTensor<T> bias;

  Linear() = default;
  Linear(BasicTensor<T> w, BasicTensor<T> b) : weight(std::move(w)), bias(std::move(b)) {}
  template <typename Rng>
  Linear(std::size_t in, std::size_t out, Rng& rng)
      : weight(uniform_param<T>({in, out}, 1.0 / std::sqrt(double(in)), rng)),
        bias(BasicTensor<T>::zeros({out}, true)) {}

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return add(matmul(x, weight), bias); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
};

template <typename T>
struct LayerNormParams {
  BasicTensor<T> gamma;
  BasicTensor<T> beta;

  LayerNormParams() = default;
  explicit LayerNormParams(std::size_t d)
      : gamma(BasicTensor<T>::ones({d}, true)), beta(BasicTensor<T>::zeros({d}, true)) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x, double eps) const { return layer_norm(x, gamma, beta, eps); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
};

/// Two linear layers with GELU between; used for experts and aligners.
template <typename T>
struct TwoLayerMlp {
  Linear<T> fc1;
  Linear<T> fc2;

  TwoLayerMlp() = default;
  template <typename Rng>
  TwoLayerMlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return fc2(gelu(fc1(x))); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

/// Deep copy of values, keeping the destination's tensor identity.
template <typename T>
void copy_values(const BasicTensor<T>& src, BasicTensor<T>& dst) {
  if (src.shape() != dst.shape())
    throw DimensionError("copy_values: " + shape_str(src.shape()) + " into " + shape_str(dst.shape()));
  std::copy(src.values().begin(), src.values().end(), dst.mutable_values().begin());
}

}  // namespace mmbert
