// Modality-named experts, the softmax router, dense gate-weighted
// combination, and the load-balancing auxiliary loss.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "mmbert/config.hpp"
#include "mmbert/layers.hpp"

namespace mmbert {

template <typename T>
struct Expert {
  Modality modality = Modality::text;
  TwoLayerMlp<T> ffn;

  Expert() = default;
  template <typename Rng>
  Expert(Modality m, std::size_t d_model, std::size_t d_ff, Rng& rng) : modality(m), ffn(d_model, d_ff, d_model, rng) {}

  BasicTensor<T> operator()(const BasicTensor<T>& x) const { return ffn(x); }
};

/// Routing probabilities of one layer for one sequence.
template <typename T>
struct GateRecord {
  std::size_t layer = 0;
  BasicTensor<T> probs;     // [L, n_experts], rows sum to 1
  std::vector<int> argmax;  // per token; ties go to the lowest expert index

  std::size_t tokens() const { return probs.rank() == 2 ? probs.dim(0) : 0; }
  std::size_t experts() const { return probs.rank() == 2 ? probs.dim(1) : 0; }
};

template <typename T>
std::vector<int> argmax_rows(const BasicTensor<T>& probs) {
  const std::size_t rows = probs.dim(0), cols = probs.dim(1);
  auto v = probs.values();
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (v[r * cols + c] > v[r * cols + best]) best = c;
    out[r] = int(best);
  }
  return out;
}

template <typename T>
GateRecord<T> make_gate_record(std::size_t layer, BasicTensor<T> probs) {
  if (probs.rank() != 2) throw DimensionError("gate probabilities must be [L, n_experts], got " + shape_str(probs.shape()));
  GateRecord<T> g{layer, probs, argmax_rows(probs)};
  return g;
}

/// Linear map to one logit per expert, softmax-normalized per token.
template <typename T>
struct Router {
  Linear<T> proj;

  Router() = default;
  /// Zero weights and bias: uniform gates until trained.
  Router(std::size_t d_model, std::size_t n_experts)
      : proj(BasicTensor<T>::zeros({d_model, n_experts}, true), BasicTensor<T>::zeros({n_experts}, true)) {}

  std::size_t n_experts() const { return proj.out_features(); }

  GateRecord<T> route(const BasicTensor<T>& x, std::size_t layer = 0) const {
    return make_gate_record(layer, softmax(proj(x), 1));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const { proj.collect(prefix, out); }
};

/// out[t] = sum_i gates[t, i] * E_i(x)[t], every expert evaluated on every token.
template <typename T>
BasicTensor<T> moe_forward(const BasicTensor<T>& x, const GateRecord<T>& gates, const std::vector<Expert<T>>& experts) {
  if (gates.experts() != experts.size())
    throw ConfigError("moe_forward: gates cover " + std::to_string(gates.experts()) + " experts but layer has " +
                      std::to_string(experts.size()));
  if (experts.empty()) throw ConfigError("moe_forward: no experts");
  if (x.rank() != 2 || gates.tokens() != x.dim(0))
    throw DimensionError("moe_forward: gates " + shape_str(gates.probs.shape()) + " do not match input " +
                         shape_str(x.shape()));
  BasicTensor<T> out;
  for (std::size_t i = 0; i < experts.size(); ++i) {
    auto term = mul_rows(experts[i](x), slice(gates.probs, 1, i, i + 1));
    out = i == 0 ? term : add(out, term);
  }
  return out;
}

/// Load-balancing loss N * sum_i p_i f_i per layer, averaged over layers.
/// p_i: fraction of routed tokens whose argmax is expert i (constant).
/// f_i: mean gate probability of expert i (differentiable).
/// Statistics pool all tokens of all sequences that share a layer index.
template <typename T>
BasicTensor<T> aux_loss(const std::vector<GateRecord<T>>& records) {
  std::map<std::size_t, std::vector<const GateRecord<T>*>> by_layer;
  for (const auto& r : records)
    if (r.tokens() > 0) by_layer[r.layer].push_back(&r);
  if (by_layer.empty()) throw ArgumentError("aux_loss: no routed tokens");

  BasicTensor<T> total;
  bool first = true;
  for (const auto& [layer, recs] : by_layer) {
    const std::size_t n = recs.front()->experts();
    std::vector<BasicTensor<T>> parts;
    std::vector<double> counts(n, 0.0);
    std::size_t tokens = 0;
    for (const auto* r : recs) {
      if (r->experts() != n) throw ConfigError("aux_loss: expert count differs within layer " + std::to_string(layer));
      parts.push_back(r->probs);
      for (int a : r->argmax) counts[std::size_t(a)] += 1;
      tokens += r->tokens();
    }
    std::vector<T> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = T(counts[i] / double(tokens));
    auto f = mean(parts.size() == 1 ? parts.front() : concat(parts, 0), 0);
    auto layer_loss = scale(sum(mul(f, BasicTensor<T>({n}, std::move(p)))), T(n));
    total = first ? layer_loss : add(total, layer_loss);
    first = false;
  }
  return scale(total, T(1.0 / double(by_layer.size())));
}

/// ce + alpha * aux.
template <typename T>
BasicTensor<T> total_loss(const BasicTensor<T>& ce, const BasicTensor<T>& aux, double alpha) {
  if (!(alpha >= 0)) throw ConfigError("total_loss: alpha must be >= 0, got " + std::to_string(alpha));
  if (alpha == 0) return ce;
  return add(ce, scale(aux, T(alpha)));
}

}  // namespace mmbert
