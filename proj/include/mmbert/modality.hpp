// Seeded stand-ins for the pretrained glyph (vision) and speech encoders, and
// the trainable aligners that project their features into the word-embedding
// space.
#pragma once

#include <cmath>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "mmbert/corpus.hpp"
#include "mmbert/layers.hpp"
#include "mmbert/rng.hpp"

namespace mmbert {

namespace detail {

inline void normalize(std::vector<double>& v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
}

inline std::vector<double> random_unit(std::size_t d, Rng& rng) {
  std::normal_distribution<double> nd;
  std::vector<double> v(d);
  for (auto& x : v) x = nd(rng);
  normalize(v);
  return v;
}

// Unit vector orthogonal to `base` (Gram-Schmidt on a random draw).
inline std::vector<double> random_orthogonal(const std::vector<double>& base, Rng& rng) {
  auto r = random_unit(base.size(), rng);
  double dot = 0;
  for (std::size_t i = 0; i < r.size(); ++i) dot += r[i] * base[i];
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= dot * base[i];
  normalize(r);
  return r;
}

}  // namespace detail

/// Token id -> glyph feature vector. Base glyphs are random unit vectors
/// (foreign-script glyphs share a common script component); deformation
/// tokens sit at a fixed cosine from their anchor glyph.
class PseudoVisionEncoder {
 public:
  static constexpr double kDeformCosine = 0.95;
  static constexpr double kScriptWeight = 0.5;

  PseudoVisionEncoder() = default;
  PseudoVisionEncoder(const SynthVocab& vocab, std::size_t dim, std::uint64_t seed) : dim_(dim) {
    if (dim < 2) throw ConfigError("vision feature dim must be >= 2");
    Rng rng = make_rng(seed, "vision-table");
    const auto script_dir = detail::random_unit(dim, rng);
    std::vector<std::vector<double>> rows(vocab.size());
    for (const auto& t : vocab.tokens) {
      if (t.glyph_anchor != t.id) continue;
      auto v = detail::random_unit(dim, rng);
      if (t.script == Script::foreign) {
        for (std::size_t i = 0; i < dim; ++i) v[i] = kScriptWeight * script_dir[i] + std::sqrt(1 - kScriptWeight * kScriptWeight) * v[i];
        detail::normalize(v);
      }
      rows[std::size_t(t.id)] = std::move(v);
    }
    const double sin = std::sqrt(1 - kDeformCosine * kDeformCosine);
    for (const auto& t : vocab.tokens) {
      if (t.glyph_anchor == t.id) continue;
      const auto& anchor = rows.at(std::size_t(t.glyph_anchor));
      auto orth = detail::random_orthogonal(anchor, rng);
      std::vector<double> v(dim);
      for (std::size_t i = 0; i < dim; ++i) v[i] = kDeformCosine * anchor[i] + sin * orth[i];
      rows[std::size_t(t.id)] = std::move(v);
      similar_.emplace_back(t.glyph_anchor, t.id);
    }
    table_.reserve(vocab.size() * dim);
    for (const auto& r : rows)
      for (double x : r) table_.push_back(float(x));
  }

  std::size_t dim() const { return dim_; }
  std::size_t vocab_size() const { return dim_ ? table_.size() / dim_ : 0; }
  /// Glyph-similarity graph: (anchor, deformed) token pairs.
  const std::vector<std::pair<int, int>>& similar_pairs() const { return similar_; }
  const std::vector<float>& table() const { return table_; }

  /// One row per token: [k, dim].
  template <typename T = float>
  BasicTensor<T> encode(std::span<const int> ids) const {
    std::vector<T> out;
    out.reserve(ids.size() * dim_);
    for (int id : ids) {
      check(id);
      for (std::size_t d = 0; d < dim_; ++d) out.push_back(T(table_[std::size_t(id) * dim_ + d]));
    }
    return BasicTensor<T>({ids.size(), dim_}, std::move(out));
  }

  static PseudoVisionEncoder from_table(std::size_t dim, std::vector<float> table) {
    PseudoVisionEncoder e;
    e.dim_ = dim;
    e.table_ = std::move(table);
    return e;
  }

 private:
  void check(int id) const {
    if (id < 0 || std::size_t(id) >= vocab_size())
      throw VocabError("vision encoder: unknown token id " + std::to_string(id));
  }
  std::size_t dim_ = 0;
  std::vector<float> table_;
  std::vector<std::pair<int, int>> similar_;
};

/// Phoneme id -> block of feature frames; tokens map to phonemes, so
/// homophones produce identical frames.
class PseudoSpeechEncoder {
 public:
  PseudoSpeechEncoder() = default;
  PseudoSpeechEncoder(const SynthVocab& vocab, std::size_t dim, std::size_t frames, std::uint64_t seed)
      : dim_(dim), frames_(frames) {
    if (dim == 0 || frames == 0) throw ConfigError("speech encoder needs positive dim and frames per token");
    Rng rng = make_rng(seed, "speech-table");
    for (const auto& t : vocab.tokens) phoneme_of_.push_back(t.phoneme);
    for (int p = 0; p < vocab.n_phonemes; ++p)
      for (std::size_t f = 0; f < frames; ++f)
        for (double x : detail::random_unit(dim, rng)) table_.push_back(float(x));
  }

  std::size_t dim() const { return dim_; }
  std::size_t frames_per_token() const { return frames_; }
  std::size_t vocab_size() const { return phoneme_of_.size(); }
  const std::vector<int>& phoneme_map() const { return phoneme_of_; }
  const std::vector<float>& table() const { return table_; }

  /// Concatenated per-token frame blocks: [len(ids) * frames, dim].
  template <typename T = float>
  BasicTensor<T> encode(std::span<const int> ids) const {
    std::vector<T> out;
    out.reserve(ids.size() * frames_ * dim_);
    const std::size_t block = frames_ * dim_;
    for (int id : ids) {
      if (id < 0 || std::size_t(id) >= phoneme_of_.size())
        throw VocabError("speech encoder: unknown token id " + std::to_string(id));
      const std::size_t p = std::size_t(phoneme_of_[std::size_t(id)]);
      for (std::size_t i = 0; i < block; ++i) out.push_back(T(table_[p * block + i]));
    }
    return BasicTensor<T>({ids.size() * frames_, dim_}, std::move(out));
  }

  static PseudoSpeechEncoder from_tables(std::size_t dim, std::size_t frames, std::vector<int> phoneme_of,
                                         std::vector<float> table) {
    PseudoSpeechEncoder e;
    e.dim_ = dim;
    e.frames_ = frames;
    e.phoneme_of_ = std::move(phoneme_of);
    e.table_ = std::move(table);
    for (int p : e.phoneme_of_)
      if (p < 0 || std::size_t(p + 1) * frames * dim > e.table_.size())
        throw FormatError("speech phoneme map references a missing table row");
    return e;
  }

 private:
  std::size_t dim_ = 0;
  std::size_t frames_ = 0;
  std::vector<int> phoneme_of_;
  std::vector<float> table_;
};

struct PseudoEncoders {
  PseudoVisionEncoder vision;
  PseudoSpeechEncoder speech;

  static PseudoEncoders build(const SynthVocab& vocab, const ModelConfig& model, const CorpusConfig& corpus,
                              std::uint64_t seed) {
    return {PseudoVisionEncoder(vocab, model.d_vision_feat, seed),
            PseudoSpeechEncoder(vocab, model.d_speech_feat, corpus.frames_per_token, seed)};
  }
};

/// Feature-space -> word-embedding-space projection (two-layer MLP).
template <typename T>
struct Aligner {
  TwoLayerMlp<T> mlp;

  Aligner() = default;
  template <typename Rng>
  Aligner(std::size_t d_feat, std::size_t d_hidden, std::size_t d_model, Rng& rng) : mlp(d_feat, d_hidden, d_model, rng) {}

  std::size_t in_features() const { return mlp.fc1.in_features(); }

  BasicTensor<T> operator()(const BasicTensor<T>& features) const {
    if (features.rank() != 2 || features.dim(1) != in_features())
      throw ConfigError("aligner expects [*, " + std::to_string(in_features()) + "] features, got " +
                        shape_str(features.shape()));
    return mlp(features);
  }

  void collect(const std::string& prefix, ParamList<T>& out) const { mlp.collect(prefix, out); }
};

}  // namespace mmbert
