// Whole-model gradient check on a tiny configuration.
#pragma once

#include "mmbert/gradcheck.hpp"
#include "mmbert/model.hpp"
#include "mmbert/moe.hpp"

namespace mmbert {

struct TinyCheckOptions {
  std::size_t d_model = 8, n_layers = 2, n_heads = 2, d_ff = 8, batch = 2, seq_len = 3;
  double alpha = 1e-2;
  double step = 1e-5;
  std::uint64_t seed = 7;
};

inline ModelConfig tiny_model_config(const TinyCheckOptions& o) {
  ModelConfig m;
  m.d_model = o.d_model;
  m.n_layers = o.n_layers;
  m.n_heads = o.n_heads;
  m.d_ff = o.d_ff;
  m.vocab_size = 12;
  m.max_total_len = 4 * o.seq_len;
  m.d_vision_feat = 4;
  m.d_speech_feat = 4;
  m.d_aligner_hidden = 6;
  m.dropout_rate = 0.0;
  return m;
}

/// Random samples with two speech frames per token.
template <typename T>
std::vector<EncodedSample<T>> tiny_batch(const ModelConfig& m, const TinyCheckOptions& o, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_int_distribution<int> tok(0, int(m.vocab_size) - 1);
  auto random_tensor = [&](Shape s) {
    std::vector<T> v(numel(s));
    for (auto& x : v) x = T(nd(rng));
    return BasicTensor<T>(std::move(s), std::move(v));
  };
  std::vector<EncodedSample<T>> out;
  for (std::size_t b = 0; b < o.batch; ++b) {
    EncodedSample<T> s;
    for (std::size_t i = 0; i < o.seq_len; ++i) s.tokens.push_back(tok(rng));
    s.align_tokens = s.tokens;
    s.speech = random_tensor({2 * o.seq_len, m.d_speech_feat});
    s.vision = random_tensor({o.seq_len, m.d_vision_feat});
    s.label = int(b % 2);
    out.push_back(std::move(s));
  }
  return out;
}

/// Finite-difference check of the routed loss CE + alpha * aux over every
/// parameter of a tiny three-expert model, in double precision. Routers are
/// randomized so that no token has tied gate maxima.
inline GradCheckResult tiny_model_gradcheck(const TinyCheckOptions& o = {}) {
  const auto cfg = tiny_model_config(o);
  MMBertModel<double> model(cfg, o.seed);
  Rng rng = make_rng(o.seed, "gradcheck");
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& b : model.blocks())
    for (auto* t : {&b.router.proj.weight, &b.router.proj.bias})
      for (double& v : t->mutable_values()) v = nd(rng);
  const auto batch = tiny_batch<double>(cfg, o, rng);
  std::vector<const EncodedSample<double>*> ptrs;
  for (const auto& s : batch) ptrs.push_back(&s);
  std::vector<int> labels;
  for (const auto& s : batch) labels.push_back(s.label);

  auto loss = [&] {
    std::vector<GateRecord<double>> gates;
    ForwardContext<double> ctx;
    ctx.gates = &gates;
    auto logits = model.batch_logits(ptrs, cfg.modalities, FfnSlot::mixture(), ctx);
    auto ce = cross_entropy(logits, std::span<const int>(labels));
    return total_loss(ce, aux_loss(gates), o.alpha);
  };
  return finite_diff_check<double>(loss, model.parameters(), o.step);
}

}  // namespace mmbert
