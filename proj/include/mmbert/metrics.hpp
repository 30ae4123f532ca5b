// Classification metrics and routing-distribution analysis.
#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "mmbert/model.hpp"

namespace mmbert {

/// Binary confusion counts with class 1 (hate) as the positive class.
struct ConfusionMatrix {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::size_t total() const { return tp + fp + fn + tn; }
  bool operator==(const ConfusionMatrix&) const = default;
};

struct Metrics {
  double accuracy = 0;
  double macro_precision = 0;
  double macro_recall = 0;
  double macro_f1 = 0;
  double precision[2]{};
  double recall[2]{};
  double f1[2]{};
  ConfusionMatrix confusion;
};

inline Metrics metrics_from_confusion(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ArgumentError("metrics: empty dataset");
  auto ratio = [](std::size_t a, std::size_t b) { return b == 0 ? 0.0 : double(a) / double(b); };
  Metrics m;
  m.confusion = cm;
  m.accuracy = ratio(cm.tp + cm.tn, cm.total());
  // class 1
  m.precision[1] = ratio(cm.tp, cm.tp + cm.fp);
  m.recall[1] = ratio(cm.tp, cm.tp + cm.fn);
  // class 0: predicted-0 are tn + fn, actual-0 are tn + fp
  m.precision[0] = ratio(cm.tn, cm.tn + cm.fn);
  m.recall[0] = ratio(cm.tn, cm.tn + cm.fp);
  for (int c = 0; c < 2; ++c) {
    const double p = m.precision[c], r = m.recall[c];
    m.f1[c] = p + r == 0 ? 0.0 : 2 * p * r / (p + r);
  }
  m.macro_precision = (m.precision[0] + m.precision[1]) / 2;
  m.macro_recall = (m.recall[0] + m.recall[1]) / 2;
  m.macro_f1 = (m.f1[0] + m.f1[1]) / 2;
  return m;
}

inline Metrics compute_metrics(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw ArgumentError("metrics: prediction/label count mismatch");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = predictions[i] == 1, gold = labels[i] == 1;
    if (pred && gold) ++cm.tp;
    else if (pred) ++cm.fp;
    else if (gold) ++cm.fn;
    else ++cm.tn;
  }
  return metrics_from_confusion(cm);
}

template <typename T>
int argmax(const BasicTensor<T>& logits) {
  auto v = logits.values();
  return int(std::max_element(v.begin(), v.end()) - v.begin());
}

/// Predictions and mean cross-entropy of a forward configuration.
struct Scored {
  std::vector<int> predictions;
  std::vector<int> labels;
  double mean_loss = 0;
};

template <typename T>
Scored score(const MMBertModel<T>& model, std::span<const EncodedSample<T>> data, std::span<const Modality> inputs,
             FfnSlot slot) {
  NoGradScope<T> no_grad;
  Scored s;
  double loss = 0;
  for (const auto& x : data) {
    auto lg = model.logits(x, inputs, slot, {});
    s.predictions.push_back(argmax(lg));
    s.labels.push_back(x.label);
    loss += double(cross_entropy(lg, x.label).item());
  }
  s.mean_loss = data.empty() ? 0.0 : loss / double(data.size());
  return s;
}

template <typename T>
Metrics evaluate(const MMBertModel<T>& model, std::span<const EncodedSample<T>> data, std::span<const Modality> inputs,
                 FfnSlot slot) {
  if (data.empty()) throw ArgumentError("evaluate: empty dataset");
  auto s = score(model, data, inputs, slot);
  return compute_metrics(s.predictions, s.labels);
}

template <typename T>
Metrics evaluate(const MMBertModel<T>& model, std::span<const EncodedSample<T>> data) {
  return evaluate(model, data, model.config().modalities, model.default_slot());
}

/// Token-weighted mean gate probability per layer and expert, for each
/// perturbation tag present in the data.
struct RoutingProfile {
  std::vector<Modality> experts;
  std::map<Perturbation, std::vector<std::vector<double>>> mean_gate;  // tag -> [layer][expert]
  std::map<Perturbation, std::size_t> tokens;                          // tokens per layer, per tag

  double expert_mean(Perturbation tag, Modality m) const {
    const auto& layers = mean_gate.at(tag);
    const std::size_t e = std::size_t(std::find(experts.begin(), experts.end(), m) - experts.begin());
    double acc = 0;
    for (const auto& row : layers) acc += row.at(e);
    return acc / double(layers.size());
  }
};

template <typename T>
RoutingProfile routing_profile(const MMBertModel<T>& model, std::span<const EncodedSample<T>> data) {
  if (!model.gate_capture()) throw StateError("routing_profile: gate capture is disabled");
  if (!model.default_slot().routed) throw StateError("routing_profile: model has no routed layers");
  const std::size_t L = model.config().n_layers, E = model.config().n_experts();
  std::map<Perturbation, std::vector<std::vector<double>>> sums;
  RoutingProfile prof;
  prof.experts = model.config().modalities;
  NoGradScope<T> no_grad;
  for (const auto& x : data) {
    std::vector<GateRecord<T>> gates;
    ForwardContext<T> ctx;
    ctx.gates = &gates;
    model.logits(x, ctx);
    auto& acc = sums.try_emplace(x.tag, L, std::vector<double>(E, 0.0)).first->second;
    for (const auto& g : gates) {
      auto v = g.probs.values();
      for (std::size_t t = 0; t < g.tokens(); ++t)
        for (std::size_t e = 0; e < E; ++e) acc[g.layer][e] += v[t * E + e];
    }
    prof.tokens[x.tag] += gates.empty() ? 0 : gates.front().tokens();
  }
  for (auto& [tag, layers] : sums) {
    const double n = double(prof.tokens[tag]);
    for (auto& row : layers)
      for (auto& v : row) v = n > 0 ? v / n : 0.0;
    prof.mean_gate[tag] = layers;
  }
  return prof;
}

}  // namespace mmbert
