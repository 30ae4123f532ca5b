// The full multimodal encoder: word/position embeddings, aligners for the
// non-text modalities, a stack of encoder blocks with a routed
// feed-forward slot, and the classification head.
#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmbert/config.hpp"
#include "mmbert/corpus.hpp"
#include "mmbert/encoder.hpp"
#include "mmbert/modality.hpp"
#include "mmbert/rng.hpp"

namespace mmbert {

/// A sample with its (constant) modality features precomputed.
template <typename T>
struct EncodedSample {
  std::vector<int> tokens;
  BasicTensor<T> speech;  // [m, d_speech_feat]
  BasicTensor<T> vision;  // [k, d_vision_feat]
  int label = 0;
  Perturbation tag = Perturbation::none;
  /// Tokens of the unperturbed base sample (own tokens when unperturbed or
  /// when the base is not available); targets of aligner training.
  std::vector<int> align_tokens;
};

template <typename T>
EncodedSample<T> encode_sample(const MultimodalSample& s, const PseudoEncoders& enc) {
  return {s.tokens, enc.speech.encode<T>(s.tokens), enc.vision.encode<T>(s.tokens), s.label, s.tag, s.tokens};
}

template <typename T>
std::vector<EncodedSample<T>> encode_all(const std::vector<MultimodalSample>& data, const PseudoEncoders& enc) {
  std::map<int, const MultimodalSample*> bases;
  for (const auto& s : data)
    if (s.tag == Perturbation::none) bases[s.base_id] = &s;
  std::vector<EncodedSample<T>> out;
  out.reserve(data.size());
  for (const auto& s : data) {
    out.push_back(encode_sample<T>(s, enc));
    auto it = bases.find(s.base_id);
    if (s.tag != Perturbation::none && it != bases.end() && it->second->tokens.size() == s.tokens.size())
      out.back().align_tokens = it->second->tokens;
  }
  return out;
}

template <typename T>
class MMBertModel {
 public:
  MMBertModel() = default;
  MMBertModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.vocab_size == 0) throw ConfigError("vocab_size must be set before building the model");
    Rng rng = make_rng(seed, "init");
    word_ = normal_param<T>({cfg_.vocab_size, cfg_.d_model}, 1.0, rng);
    pos_ = normal_param<T>({cfg_.max_total_len, cfg_.d_model}, 0.1, rng);
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) blocks_.emplace_back(cfg_, rng);
    if (cfg_.has(Modality::speech)) speech_aligner_.emplace(cfg_.d_speech_feat, cfg_.d_aligner_hidden, cfg_.d_model, rng);
    if (cfg_.has(Modality::vision)) vision_aligner_.emplace(cfg_.d_vision_feat, cfg_.d_aligner_hidden, cfg_.d_model, rng);
    head_ = ClassificationHead<T>(cfg_.d_model, cfg_.n_classes, rng);
  }

  const ModelConfig& config() const { return cfg_; }

  /// Copies share parameter storage; clone() does not.
  MMBertModel clone() const {
    MMBertModel c(cfg_, 0);
    c.load_values(*this);
    c.gate_capture_ = gate_capture_;
    return c;
  }

  /// Copies every parameter value from a model of identical structure.
  void load_values(const MMBertModel& other) {
    auto dst = parameters();
    auto src = other.parameters();
    if (dst.size() != src.size()) throw ConfigError("load_values: models differ in structure");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (dst[i].name != src[i].name) throw ConfigError("load_values: parameter " + dst[i].name + " vs " + src[i].name);
      copy_values(src[i].tensor, dst[i].tensor);
    }
  }

  bool gate_capture() const { return gate_capture_; }
  void set_gate_capture(bool on) { gate_capture_ = on; }

  ParamList<T> parameters() const {
    ParamList<T> out;
    out.push_back({"embed.word", word_});
    out.push_back({"embed.pos", pos_});
    for (std::size_t l = 0; l < blocks_.size(); ++l) blocks_[l].collect("layer" + std::to_string(l), out);
    if (speech_aligner_) speech_aligner_->collect("aligner.speech", out);
    if (vision_aligner_) vision_aligner_->collect("aligner.vision", out);
    head_.collect("head", out);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.tensor.size();
    return n;
  }

  /// Word embeddings only, [n, d_model].
  BasicTensor<T> word_embed(std::span<const int> ids) const { return embedding(word_, ids); }

  /// Word plus absolute position embeddings for positions 0..n-1.
  BasicTensor<T> embed_text(std::span<const int> ids) const {
    if (ids.size() > cfg_.max_total_len)
      throw SequenceLengthError("text of " + std::to_string(ids.size()) + " tokens exceeds max_total_len " +
                                std::to_string(cfg_.max_total_len));
    return add(word_embed(ids), slice(pos_, 0, 0, ids.size()));
  }

  BasicTensor<T> align_speech(const BasicTensor<T>& features) const {
    if (!speech_aligner_) throw ConfigError("model has no speech modality");
    return (*speech_aligner_)(features);
  }
  BasicTensor<T> align_vision(const BasicTensor<T>& features) const {
    if (!vision_aligner_) throw ConfigError("model has no vision modality");
    return (*vision_aligner_)(features);
  }

  /// [T; S; V] restricted to `inputs` (in that order) plus position
  /// embeddings over the concatenated sequence.
  BasicTensor<T> assemble_input(const EncodedSample<T>& s, std::span<const Modality> inputs) const {
    std::vector<BasicTensor<T>> parts;
    std::size_t total = 0;
    for (Modality m : {Modality::text, Modality::speech, Modality::vision}) {
      if (std::find(inputs.begin(), inputs.end(), m) == inputs.end()) continue;
      switch (m) {
        case Modality::text: parts.push_back(word_embed(s.tokens)); break;
        case Modality::speech: parts.push_back(align_speech(s.speech)); break;
        case Modality::vision: parts.push_back(align_vision(s.vision)); break;
      }
      total += parts.back().dim(0);
    }
    if (parts.empty()) throw ArgumentError("assemble_input: no input modalities");
    if (total > cfg_.max_total_len)
      throw SequenceLengthError("assembled sequence of " + std::to_string(total) + " exceeds max_total_len " +
                                std::to_string(cfg_.max_total_len));
    auto x = parts.size() == 1 ? parts.front() : concat(parts, 0);
    return add(x, slice(pos_, 0, 0, total));
  }

  /// Runs every block; returns the final hidden states [L, d_model].
  BasicTensor<T> encode(const BasicTensor<T>& x0, FfnSlot slot, const ForwardContext<T>& ctx) const {
    auto x = x0;
    for (std::size_t l = 0; l < blocks_.size(); ++l) x = blocks_[l].forward(x, slot, l, cfg_.layer_norm_eps, ctx);
    return x;
  }

  BasicTensor<T> classify(const BasicTensor<T>& hidden) const { return head_(hidden); }

  BasicTensor<T> logits(const EncodedSample<T>& s, std::span<const Modality> inputs, FfnSlot slot,
                        const ForwardContext<T>& ctx) const {
    return classify(encode(assemble_input(s, inputs), slot, ctx));
  }

  /// Default forward: every configured modality, routed mixture (or the
  /// single expert when only one modality is configured).
  BasicTensor<T> logits(const EncodedSample<T>& s, const ForwardContext<T>& ctx = {}) const {
    return logits(s, cfg_.modalities, default_slot(), ctx);
  }

  FfnSlot default_slot() const { return cfg_.n_experts() == 1 ? FfnSlot::single(0) : FfnSlot::mixture(); }

  /// Logits for a batch, [B, n_classes].
  BasicTensor<T> batch_logits(std::span<const EncodedSample<T>* const> batch, std::span<const Modality> inputs,
                              FfnSlot slot, const ForwardContext<T>& ctx) const {
    std::vector<BasicTensor<T>> rows;
    rows.reserve(batch.size());
    for (const auto* s : batch) rows.push_back(reshape(logits(*s, inputs, slot, ctx), Shape{1, cfg_.n_classes}));
    return rows.size() == 1 ? rows.front() : concat(rows, 0);
  }

  std::vector<EncoderBlock<T>>& blocks() { return blocks_; }
  const std::vector<EncoderBlock<T>>& blocks() const { return blocks_; }
  ClassificationHead<T>& head() { return head_; }
  BasicTensor<T>& word_table() { return word_; }
  BasicTensor<T>& position_table() { return pos_; }

 private:
  ModelConfig cfg_;
  BasicTensor<T> word_;
  BasicTensor<T> pos_;
  std::vector<EncoderBlock<T>> blocks_;
  std::optional<Aligner<T>> speech_aligner_;
  std::optional<Aligner<T>> vision_aligner_;
  ClassificationHead<T> head_;
  bool gate_capture_ = true;
};

/// Parameter group of a named parameter, used for freezing and per-group
/// learning rates: embeddings, backbone, expert.<modality>, router,
/// aligner.<modality>, head.
inline std::string parameter_group(const std::string& name) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  if (starts("embed.")) return "embeddings";
  if (starts("aligner.speech")) return "aligner.speech";
  if (starts("aligner.vision")) return "aligner.vision";
  if (starts("head.")) return "head";
  if (starts("layer")) {
    auto dot = name.find('.');
    auto rest = name.substr(dot + 1);
    if (rest.rfind("expert.", 0) == 0) return "expert." + rest.substr(7, rest.find('.', 7) - 7);
    if (rest.rfind("router", 0) == 0) return "router";
    return "backbone";
  }
  throw ArgumentError("unknown parameter '" + name + "'");
}

}  // namespace mmbert
