// Pre-normalization encoder block and classification head:
//   X^a = SelfAttention(LN(X)) + X
//   Y   = FFN(LN(X^a)) + X^a
// where the FFN slot holds either one expert or the routed mixture.
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mmbert/config.hpp"
#include "mmbert/layers.hpp"
#include "mmbert/moe.hpp"
#include "mmbert/rng.hpp"

namespace mmbert {

/// What the feed-forward slot does in a forward pass.
struct FfnSlot {
  bool routed = true;      // mixture over all experts
  std::size_t expert = 0;  // used when !routed

  static FfnSlot mixture() { return {true, 0}; }
  static FfnSlot single(std::size_t e) { return {false, e}; }
};

template <typename T>
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
  std::vector<GateRecord<T>>* gates = nullptr;          // routed layers append here
  std::vector<BasicTensor<T>>* attention = nullptr;     // per-head probability matrices

  BasicTensor<T> maybe_dropout(const BasicTensor<T>& x) const {
    if (!training || dropout == 0.0 || !rng) return x;
    return mmbert::dropout(x, dropout, *rng);
  }
};

template <typename T>
struct EncoderBlock {
  LayerNormParams<T> ln_attn;
  Linear<T> q, k, v, o;
  LayerNormParams<T> ln_ffn;
  std::vector<Expert<T>> experts;
  Router<T> router;
  std::size_t n_heads = 1;

  EncoderBlock() = default;
  template <typename Rng>
  EncoderBlock(const ModelConfig& cfg, Rng& rng)
      : ln_attn(cfg.d_model),
        q(cfg.d_model, cfg.d_model, rng),
        k(cfg.d_model, cfg.d_model, rng),
        v(cfg.d_model, cfg.d_model, rng),
        o(cfg.d_model, cfg.d_model, rng),
        ln_ffn(cfg.d_model),
        router(cfg.d_model, cfg.n_experts()),
        n_heads(cfg.n_heads) {
    for (Modality m : cfg.modalities) experts.emplace_back(m, cfg.d_model, cfg.d_ff, rng);
  }

  BasicTensor<T> self_attention(const BasicTensor<T>& h, const ForwardContext<T>& ctx) const {
    const std::size_t d = h.dim(1), dh = d / n_heads;
    auto qa = q(h), ka = k(h), va = v(h);
    const T inv_sqrt = T(1.0 / std::sqrt(double(dh)));
    std::vector<BasicTensor<T>> heads;
    heads.reserve(n_heads);
    for (std::size_t i = 0; i < n_heads; ++i) {
      auto qh = slice(qa, 1, i * dh, (i + 1) * dh);
      auto kh = slice(ka, 1, i * dh, (i + 1) * dh);
      auto vh = slice(va, 1, i * dh, (i + 1) * dh);
      auto probs = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
      if (ctx.attention) ctx.attention->push_back(probs);
      heads.push_back(matmul(probs, vh));
    }
    return o(n_heads == 1 ? heads.front() : concat(heads, 1));
  }

  BasicTensor<T> forward(const BasicTensor<T>& x, FfnSlot slot, std::size_t layer, double eps,
                         const ForwardContext<T>& ctx) const {
    if (x.rank() != 2) throw DimensionError("encoder block expects [L, d_model], got " + shape_str(x.shape()));
    auto xa = add(x, ctx.maybe_dropout(self_attention(ln_attn(x, eps), ctx)));
    auto h = ln_ffn(xa, eps);
    BasicTensor<T> ffn;
    if (slot.routed) {
      auto gates = router.route(h, layer);
      ffn = moe_forward(h, gates, experts);
      if (ctx.gates) ctx.gates->push_back(std::move(gates));
    } else {
      if (slot.expert >= experts.size())
        throw ConfigError("ffn slot " + std::to_string(slot.expert) + " outside " + std::to_string(experts.size()) + " experts");
      ffn = experts[slot.expert](h);
    }
    return add(xa, ctx.maybe_dropout(ffn));
  }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    ln_attn.collect(prefix + ".ln_attn", out);
    q.collect(prefix + ".attn.q", out);
    k.collect(prefix + ".attn.k", out);
    v.collect(prefix + ".attn.v", out);
    o.collect(prefix + ".attn.o", out);
    ln_ffn.collect(prefix + ".ln_ffn", out);
    for (const auto& e : experts) e.ffn.collect(prefix + ".expert." + to_string(e.modality), out);
    if (experts.size() > 1) router.collect(prefix + ".router", out);
  }
};

/// First-position pooling -> tanh projection -> class logits.
template <typename T>
struct ClassificationHead {
  Linear<T> pool;
  Linear<T> out;

  ClassificationHead() = default;
  template <typename Rng>
  ClassificationHead(std::size_t d_model, std::size_t n_classes, Rng& rng) : pool(d_model, d_model, rng), out(d_model, n_classes, rng) {}

  BasicTensor<T> operator()(const BasicTensor<T>& hidden) const {
    if (hidden.rank() != 2 || hidden.dim(0) == 0)
      throw ArgumentError("classify: need a non-empty [L, d_model] sequence, got " + shape_str(hidden.shape()));
    auto first = slice(hidden, 0, 0, 1);
    auto logits = out(tanh(pool(first)));
    return reshape(logits, Shape{out.out_features()});
  }

  void collect(const std::string& prefix, ParamList<T>& dst) const {
    pool.collect(prefix + ".pool", dst);
    out.collect(prefix + ".out", dst);
  }
};

}  // namespace mmbert
