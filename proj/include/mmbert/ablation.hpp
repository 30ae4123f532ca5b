// Stage and modality ablations, the text-only baseline and parameter
// accounting.
#pragma once

#include <chrono>
#include <limits>
#include <string>
#include <vector>

#include "mmbert/pipeline.hpp"

namespace mmbert {

/// One trained variant with the measurements the comparisons need.
struct RunOutcome {
  std::string variant;
  std::uint64_t seed = 0;
  double val_acc = 0;
  double val_loss = 0;
  Metrics test;
  Metrics test_perturbed;
  Metrics test_homophone_codemix;
  std::optional<RoutingProfile> routing;  // test split, routed models only
  double min_batch_gate = NAN;            // smallest per-batch mean gate of any expert/layer
  PipelineResult training;
  double seconds = 0;
};

template <typename T>
std::vector<EncodedSample<T>> select_tags(const std::vector<EncodedSample<T>>& data, std::vector<Perturbation> tags) {
  std::vector<EncodedSample<T>> out;
  for (const auto& s : data)
    if (std::find(tags.begin(), tags.end(), s.tag) != tags.end()) out.push_back(s);
  return out;
}

/// Minimum over test batches, layers and experts of the batch-mean gate
/// probability (pooled over every token in the batch).
template <typename T>
double min_batch_mean_gate(const MMBertModel<T>& model, std::span<const EncodedSample<T>> data, std::size_t batch) {
  if (!model.default_slot().routed) return NAN;
  NoGradScope<T> no_grad;
  const std::size_t E = model.config().n_experts(), L = model.config().n_layers;
  double lo = std::numeric_limits<double>::infinity();
  for (std::size_t b0 = 0; b0 < data.size(); b0 += batch) {
    std::vector<std::vector<double>> sum(L, std::vector<double>(E, 0.0));
    std::vector<std::size_t> tokens(L, 0);
    for (std::size_t i = b0; i < std::min(data.size(), b0 + batch); ++i) {
      std::vector<GateRecord<T>> gates;
      ForwardContext<T> ctx;
      ctx.gates = &gates;
      model.logits(data[i], ctx);
      for (const auto& g : gates) {
        auto v = g.probs.values();
        for (std::size_t t = 0; t < g.tokens(); ++t)
          for (std::size_t e = 0; e < E; ++e) sum[g.layer][e] += v[t * E + e];
        tokens[g.layer] += g.tokens();
      }
    }
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t e = 0; e < E; ++e)
        if (tokens[l]) lo = std::min(lo, sum[l][e] / double(tokens[l]));
  }
  return lo;
}

/// Builds the experiment for `cfg`, trains the selected stages and measures
/// the result.
inline RunOutcome run_variant(const std::string& name, const RunConfig& cfg, StageSelection sel,
                              MMBertModel<float>* trained = nullptr) {
  const auto t0 = std::chrono::steady_clock::now();
  auto exp = make_experiment(cfg);
  auto data = encode_splits<float>(exp);
  MMBertModel<float> model(exp.cfg.model, exp.cfg.seed);
  model.set_gate_capture(exp.cfg.gate_capture);
  RunOutcome out;
  out.variant = name;
  out.seed = cfg.seed;
  out.training = train_pipeline(model, exp.cfg, data, sel);
  auto val = score(model, std::span<const EncodedSample<float>>(data.val), model.config().modalities, model.default_slot());
  out.val_loss = val.mean_loss;
  out.val_acc = compute_metrics(val.predictions, val.labels).accuracy;
  out.test = evaluate<float>(model, data.test);
  const auto pert = select_tags(data.test, {Perturbation::homophone, Perturbation::codemix, Perturbation::deform,
                                            Perturbation::abbreviation});
  if (!pert.empty()) out.test_perturbed = evaluate<float>(model, pert);
  const auto hc = select_tags(data.test, {Perturbation::homophone, Perturbation::codemix});
  if (!hc.empty()) out.test_homophone_codemix = evaluate<float>(model, hc);
  if (model.default_slot().routed && model.gate_capture()) {
    out.routing = routing_profile<float>(model, data.test);
    out.min_batch_gate = min_batch_mean_gate<float>(model, data.test, cfg.train.batch_size);
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (trained) *trained = model;
  return out;
}

inline const std::vector<std::pair<std::string, StageSelection>>& stage_variants() {
  static const std::vector<std::pair<std::string, StageSelection>> v{
      {"full", {true, true, true, true}},
      {"no-stage-1", {true, false, true, true}},
      {"no-stage-2", {true, true, false, true}},
      {"no-stage-1-and-2", {true, false, false, true}},
  };
  return v;
}

/// Stage ablation: identical data, seeds and stage-3 budgets; only the
/// selection of stages 1 and 2 differs.
inline std::vector<RunOutcome> ablate_stages(const RunConfig& base, const std::vector<std::uint64_t>& seeds) {
  std::vector<RunOutcome> out;
  for (auto seed : seeds)
    for (const auto& [name, sel] : stage_variants()) {
      RunConfig c = base;
      c.seed = seed;
      StageSelection s = sel;
      s.stage0 = base.train.stage0;
      out.push_back(run_variant(name, c, s));
    }
  return out;
}

inline RunConfig with_modalities(RunConfig c, std::vector<Modality> mods) {
  c.model.modalities = std::move(mods);
  return c;
}

/// Text-only baseline: one text FFN per block, no router or aux loss, same
/// data and stage budgets.
inline RunOutcome run_text_only(const RunConfig& base) {
  return run_variant("text", with_modalities(base, {Modality::text}), StageSelection::from(base.train));
}

/// Modality ablation: text+speech, text+vision and all three.
inline std::vector<RunOutcome> ablate_modalities(const RunConfig& base, const std::vector<std::uint64_t>& seeds) {
  const std::vector<std::pair<std::string, std::vector<Modality>>> variants{
      {"text+speech", {Modality::text, Modality::speech}},
      {"text+vision", {Modality::text, Modality::vision}},
      {"text+speech+vision", {Modality::text, Modality::speech, Modality::vision}},
  };
  std::vector<RunOutcome> out;
  for (auto seed : seeds)
    for (const auto& [name, mods] : variants) {
      RunConfig c = with_modalities(base, mods);
      c.seed = seed;
      out.push_back(run_variant(name, c, StageSelection::from(c.train)));
    }
  return out;
}

inline std::string ablation_csv(const std::vector<RunOutcome>& runs) {
  std::string out = "variant,seed,val_acc,val_loss\n";
  char buf[256];
  for (const auto& r : runs) {
    std::snprintf(buf, sizeof buf, "%s,%llu,%.6f,%.6f\n", r.variant.c_str(), static_cast<unsigned long long>(r.seed),
                  r.val_acc, r.val_loss);
    out += buf;
  }
  return out;
}

struct ParamCounts {
  std::size_t embeddings = 0, backbone = 0, experts = 0, routers = 0, aligners = 0, head = 0;
  std::size_t total() const { return embeddings + backbone + experts + routers + aligners + head; }
};

/// Enumerates the model's parameters by group.
template <typename T>
ParamCounts count_parameters(const MMBertModel<T>& model) {
  ParamCounts c;
  for (const auto& p : model.parameters()) {
    const auto g = parameter_group(p.name);
    const std::size_t n = p.tensor.size();
    if (g == "embeddings") c.embeddings += n;
    else if (g == "backbone") c.backbone += n;
    else if (g.rfind("expert.", 0) == 0) c.experts += n;
    else if (g == "router") c.routers += n;
    else if (g.rfind("aligner.", 0) == 0) c.aligners += n;
    else c.head += n;
  }
  return c;
}

/// Closed-form counts from the configuration alone.
inline ParamCounts expected_parameters(const ModelConfig& m) {
  const std::size_t d = m.d_model, f = m.d_ff, L = m.n_layers, E = m.n_experts();
  ParamCounts c;
  c.embeddings = (m.vocab_size + m.max_total_len) * d;
  c.backbone = L * (4 * (d * d + d) + 2 * 2 * d);
  c.experts = L * E * (2 * d * f + d + f);
  c.routers = E > 1 ? L * (d * E + E) : 0;
  for (Modality mod : m.modalities) {
    if (mod == Modality::text) continue;
    const std::size_t in = mod == Modality::speech ? m.d_speech_feat : m.d_vision_feat;
    c.aligners += in * m.d_aligner_hidden + m.d_aligner_hidden + m.d_aligner_hidden * d + d;
  }
  c.head = d * d + d + d * m.n_classes + m.n_classes;
  return c;
}

/// Report lines plus the ratio of the routed backbone (attention, norms,
/// experts, routers) to the same backbone with a single FFN.
inline std::string param_count_report(const ParamCounts& c, std::size_t n_layers, std::size_t d_model,
                                      std::size_t d_ff) {
  const std::size_t single_ffn = n_layers * (2 * d_model * d_ff + d_model + d_ff);
  const std::size_t moe_backbone = c.backbone + c.experts + c.routers;
  const std::size_t dense_backbone = c.backbone + single_ffn;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "component,params\nembeddings,%zu\nbackbone_shared,%zu\nexperts,%zu\nrouters,%zu\naligners,%zu\nhead,%zu\n"
                "total,%zu\nmoe_vs_single_ffn_backbone_ratio,%.6f\n",
                c.embeddings, c.backbone, c.experts, c.routers, c.aligners, c.head, c.total(),
                dense_backbone ? double(moe_backbone) / double(dense_backbone) : 0.0);
  return buf;
}

}  // namespace mmbert
