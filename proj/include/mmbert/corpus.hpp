// Synthetic cloaked-toxicity corpus.
//
// The vocabulary is built so that each cloaking perturbation preserves exactly
// one non-text signal of the toxic token it hides:
//   homophone  native token, same phoneme id   -> identical speech frames
//   codemix    foreign token, same phoneme id  -> identical speech frames
//   deform     native token, own phoneme id, glyph anchored on the toxic
//              token                           -> near-identical glyph features
//   abbreviation (optional) foreign token with fresh phoneme and glyph, so
//              neither signal survives.
// Cloak tokens never carry the toxicity flag, so a lexicon scan of a
// perturbed positive finds nothing.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mmbert/config.hpp"
#include "mmbert/errors.hpp"
#include "mmbert/rng.hpp"

namespace mmbert {

enum class Script : std::uint8_t { native, foreign };

enum class Perturbation : std::uint8_t { none = 0, homophone = 1, codemix = 2, deform = 3, abbreviation = 4 };

inline constexpr std::array<Perturbation, 4> kCloakKinds{Perturbation::homophone, Perturbation::codemix,
                                                         Perturbation::deform, Perturbation::abbreviation};

inline const char* to_string(Perturbation p) {
  switch (p) {
    case Perturbation::none: return "none";
    case Perturbation::homophone: return "homophone";
    case Perturbation::codemix: return "codemix";
    case Perturbation::deform: return "deform";
    case Perturbation::abbreviation: return "abbreviation";
  }
  return "?";
}

inline Perturbation parse_perturbation(const std::string& s) {
  for (auto p : {Perturbation::none, Perturbation::homophone, Perturbation::codemix, Perturbation::deform,
                 Perturbation::abbreviation})
    if (s == to_string(p)) return p;
  throw FormatError("unknown perturbation tag '" + s + "'");
}

struct TokenInfo {
  int id = 0;
  int phoneme = 0;
  int glyph_anchor = 0;  // token whose glyph this one deforms (itself for base glyphs)
  Script script = Script::native;
  bool toxic = false;
  int source = -1;  // token this one cloaks, -1 for ordinary tokens
  Perturbation kind = Perturbation::none;
};

struct SynthVocab {
  static constexpr int kStartToken = 0;

  std::vector<TokenInfo> tokens;
  std::vector<std::vector<int>> lexicon;  // toxic n-grams
  std::vector<int> normal_pool;           // tokens base sentences draw from
  std::vector<int> toxic_tokens;
  /// variants[token][kind] -> cloak tokens of that kind for `token`.
  std::vector<std::array<std::vector<int>, 5>> variants;
  int n_phonemes = 0;

  std::size_t size() const { return tokens.size(); }
  const TokenInfo& at(int id) const {
    if (id < 0 || std::size_t(id) >= tokens.size())
      throw VocabError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(tokens.size()));
    return tokens[std::size_t(id)];
  }
  const std::vector<int>& variants_of(int id, Perturbation kind) const {
    at(id);
    return variants[std::size_t(id)][std::size_t(kind)];
  }
};

/// Deterministic in (config, seed).
inline SynthVocab build_vocab(const CorpusConfig& cfg, std::uint64_t seed) {
  if (cfg.n_toxic_unigrams + cfg.n_toxic_bigrams == 0) throw GenerationError("toxic lexicon is empty");
  if (cfg.n_normal == 0) throw GenerationError("no ordinary tokens configured");
  if (cfg.normals_with_variants > cfg.n_normal) throw GenerationError("normals_with_variants exceeds n_normal");
  if (cfg.homophones_per_toxic == 0 || cfg.codemix_per_toxic == 0 || cfg.deform_per_toxic == 0)
    throw GenerationError("every toxic token needs at least one homophone, codemix and deform variant");

  Rng rng = make_rng(seed, "vocab");
  SynthVocab v;
  auto add = [&](TokenInfo t) {
    t.id = int(v.tokens.size());
    v.tokens.push_back(t);
    v.variants.emplace_back();
    return t.id;
  };
  auto fresh_phoneme = [&] { return v.n_phonemes++; };
  auto base_token = [&](bool toxic) {
    TokenInfo t;
    t.phoneme = fresh_phoneme();
    t.glyph_anchor = int(v.tokens.size());
    t.toxic = toxic;
    return add(t);
  };

  base_token(false);  // sequence-start marker
  for (std::size_t i = 0; i < cfg.n_normal; ++i) v.normal_pool.push_back(base_token(false));
  for (std::size_t i = 0; i < cfg.n_toxic_unigrams; ++i) {
    int t = base_token(true);
    v.toxic_tokens.push_back(t);
    v.lexicon.push_back({t});
  }
  for (std::size_t i = 0; i < cfg.n_toxic_bigrams; ++i) {
    int a = base_token(true), b = base_token(true);
    v.toxic_tokens.push_back(a);
    v.toxic_tokens.push_back(b);
    v.lexicon.push_back({a, b});
  }

  auto add_variants = [&](int src, std::size_t homophones, std::size_t codemix, std::size_t deform) {
    const TokenInfo base = v.tokens[std::size_t(src)];
    for (std::size_t i = 0; i < homophones; ++i) {
      TokenInfo t;
      t.phoneme = base.phoneme;
      t.glyph_anchor = int(v.tokens.size());
      t.source = src;
      t.kind = Perturbation::homophone;
      int id = add(t);
      v.variants[std::size_t(src)][std::size_t(Perturbation::homophone)].push_back(id);
    }
    for (std::size_t i = 0; i < codemix; ++i) {
      TokenInfo t;
      t.phoneme = base.phoneme;
      t.glyph_anchor = int(v.tokens.size());
      t.script = Script::foreign;
      t.source = src;
      t.kind = Perturbation::codemix;
      int id = add(t);
      v.variants[std::size_t(src)][std::size_t(Perturbation::codemix)].push_back(id);
    }
    for (std::size_t i = 0; i < deform; ++i) {
      TokenInfo t;
      t.phoneme = fresh_phoneme();
      t.glyph_anchor = src;
      t.source = src;
      t.kind = Perturbation::deform;
      int id = add(t);
      v.variants[std::size_t(src)][std::size_t(Perturbation::deform)].push_back(id);
    }
    if (cfg.abbreviation) {
      TokenInfo t;
      t.phoneme = fresh_phoneme();
      t.glyph_anchor = int(v.tokens.size());
      t.script = Script::foreign;
      t.source = src;
      t.kind = Perturbation::abbreviation;
      int id = add(t);
      v.variants[std::size_t(src)][std::size_t(Perturbation::abbreviation)].push_back(id);
    }
  };

  for (int t : v.toxic_tokens)
    add_variants(t, cfg.homophones_per_toxic, cfg.codemix_per_toxic, cfg.deform_per_toxic);
  std::vector<int> normals = v.normal_pool;
  std::shuffle(normals.begin(), normals.end(), rng);
  for (std::size_t i = 0; i < cfg.normals_with_variants; ++i) add_variants(normals[i], 1, 1, 1);
  return v;
}

struct MultimodalSample {
  int id = 0;
  std::vector<int> tokens;
  int label = 0;  // 1 = hate
  Perturbation tag = Perturbation::none;
  int base_id = 0;  // own id for unperturbed samples
};

/// 1 iff some lexicon n-gram occurs contiguously in `tokens`.
inline int lexicon_label(const SynthVocab& vocab, const std::vector<int>& tokens) {
  for (const auto& gram : vocab.lexicon)
    if (std::search(tokens.begin(), tokens.end(), gram.begin(), gram.end()) != tokens.end()) return 1;
  return 0;
}

/// Exactly round(n_base * balance) positives, in shuffled order.
inline std::vector<MultimodalSample> generate_base_corpus(const SynthVocab& vocab, const CorpusConfig& cfg,
                                                          std::uint64_t seed) {
  if (vocab.lexicon.empty()) throw GenerationError("toxic lexicon is empty");
  if (!(cfg.balance > 0 && cfg.balance < 1)) throw GenerationError("balance must lie in (0,1)");
  std::size_t longest = 0;
  for (const auto& g : vocab.lexicon) longest = std::max(longest, g.size());
  if (cfg.min_len < longest + 1 || cfg.max_len < cfg.min_len)
    throw GenerationError("length range [" + std::to_string(cfg.min_len) + "," + std::to_string(cfg.max_len) +
                          "] cannot hold a start token plus the longest toxic n-gram");

  Rng rng = make_rng(seed, "corpus");
  const std::size_t n_pos = std::size_t(std::llround(double(cfg.n_base) * cfg.balance));
  std::vector<int> labels(cfg.n_base, 0);
  std::fill_n(labels.begin(), n_pos, 1);
  std::shuffle(labels.begin(), labels.end(), rng);

  std::uniform_int_distribution<std::size_t> len_dist(cfg.min_len, cfg.max_len);
  std::uniform_int_distribution<std::size_t> normal_dist(0, vocab.normal_pool.size() - 1);
  std::uniform_int_distribution<std::size_t> gram_dist(0, vocab.lexicon.size() - 1);

  std::vector<MultimodalSample> out;
  out.reserve(cfg.n_base);
  for (std::size_t i = 0; i < cfg.n_base; ++i) {
    MultimodalSample s;
    s.id = s.base_id = int(i);
    s.label = labels[i];
    const std::size_t len = len_dist(rng);
    s.tokens.push_back(SynthVocab::kStartToken);
    for (std::size_t k = 1; k < len; ++k) s.tokens.push_back(vocab.normal_pool[normal_dist(rng)]);
    if (s.label == 1) {
      const auto& gram = vocab.lexicon[gram_dist(rng)];
      std::uniform_int_distribution<std::size_t> pos_dist(1, len - gram.size());
      std::copy(gram.begin(), gram.end(), s.tokens.begin() + std::ptrdiff_t(pos_dist(rng)));
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Replaces every toxic token of a positive sample with a cloak of `kind`.
/// Throws SkipError when nothing can be perturbed (negatives, or no variant).
inline MultimodalSample perturb(const SynthVocab& vocab, const MultimodalSample& sample, Perturbation kind, Rng& rng) {
  if (kind == Perturbation::none) throw ArgumentError("perturb: kind must not be none");
  if (sample.label != 1) throw SkipError("perturb: sample " + std::to_string(sample.id) + " has no toxic token");
  MultimodalSample out = sample;
  bool changed = false;
  for (auto& t : out.tokens) {
    if (!vocab.at(t).toxic) continue;
    const auto& pool = vocab.variants_of(t, kind);
    if (pool.empty()) throw SkipError(std::string("perturb: no ") + to_string(kind) + " variant for token " + std::to_string(t));
    t = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
    changed = true;
  }
  if (!changed) throw SkipError("perturb: sample " + std::to_string(sample.id) + " has no toxic token");
  out.tag = kind;
  out.base_id = sample.base_id;
  return out;
}

/// Cloaks one or two ordinary tokens of a sample, so that the presence of a
/// perturbation does not itself reveal the label.
inline MultimodalSample perturb_benign(const SynthVocab& vocab, const MultimodalSample& sample, Perturbation kind,
                                       Rng& rng) {
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < sample.tokens.size(); ++i) {
    const int t = sample.tokens[i];
    if (!vocab.at(t).toxic && !vocab.variants_of(t, kind).empty()) candidates.push_back(i);
  }
  if (candidates.empty()) throw SkipError("perturb_benign: no perturbable token in sample " + std::to_string(sample.id));
  std::shuffle(candidates.begin(), candidates.end(), rng);
  const std::size_t count = std::min<std::size_t>(candidates.size(), std::bernoulli_distribution(1.0 / 3.0)(rng) ? 2 : 1);
  MultimodalSample out = sample;
  for (std::size_t c = 0; c < count; ++c) {
    const auto& pool = vocab.variants_of(out.tokens[candidates[c]], kind);
    out.tokens[candidates[c]] = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
  }
  out.tag = kind;
  out.base_id = sample.base_id;
  return out;
}

/// Base corpus plus perturbed copies of `perturb_rate` of each class.
inline std::vector<MultimodalSample> generate_corpus(const SynthVocab& vocab, const CorpusConfig& cfg,
                                                     std::uint64_t seed) {
  auto base = generate_base_corpus(vocab, cfg, seed);
  Rng rng = make_rng(seed, "perturb");
  std::vector<Perturbation> kinds{Perturbation::homophone, Perturbation::codemix, Perturbation::deform};
  if (cfg.abbreviation) kinds.push_back(Perturbation::abbreviation);

  std::vector<MultimodalSample> out = base;
  for (int label : {1, 0}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < base.size(); ++i)
      if (base[i].label == label) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::size_t(std::llround(double(idx.size()) * cfg.perturb_rate)));
    std::sort(idx.begin(), idx.end());
    for (std::size_t i : idx) {
      const Perturbation kind = kinds[std::uniform_int_distribution<std::size_t>(0, kinds.size() - 1)(rng)];
      try {
        auto p = label == 1 ? perturb(vocab, base[i], kind, rng) : perturb_benign(vocab, base[i], kind, rng);
        out.push_back(std::move(p));
      } catch (const SkipError&) {
      }
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i].id = int(i);
  return out;
}

struct Splits {
  std::vector<MultimodalSample> train, val, test;
};

/// Seeded shuffle of provenance groups, so a base sample and all of its
/// perturbed copies always land in the same split.
inline Splits split(const std::vector<MultimodalSample>& corpus, const SplitSpec& spec, std::uint64_t seed) {
  if (corpus.size() < 10) throw ArgumentError("split: corpus of " + std::to_string(corpus.size()) + " samples is smaller than 10");
  if (spec.train < 0 || spec.val < 0 || spec.test < 0 || std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9)
    throw ArgumentError("split: ratios must be non-negative and sum to 1");
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < corpus.size(); ++i) groups[corpus[i].base_id].push_back(i);
  std::vector<int> keys;
  for (const auto& [k, _] : groups) keys.push_back(k);
  Rng rng = make_rng(seed, "split");
  std::shuffle(keys.begin(), keys.end(), rng);

  const auto n = double(corpus.size());
  const std::size_t want_train = std::size_t(std::llround(n * spec.train));
  const std::size_t want_val = std::size_t(std::llround(n * spec.val));
  Splits s;
  for (int k : keys) {
    const auto& members = groups[k];
    auto* dst = &s.test;
    if (s.train.size() + members.size() <= want_train) dst = &s.train;
    else if (s.val.size() + members.size() <= want_val) dst = &s.val;
    for (std::size_t i : members) dst->push_back(corpus[i]);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Line format: label<TAB>tag<TAB>base_id<TAB>space-separated token ids
// ---------------------------------------------------------------------------

inline std::string format_sample(const MultimodalSample& s) {
  std::string line = std::to_string(s.label) + '\t' + to_string(s.tag) + '\t' + std::to_string(s.base_id) + '\t';
  for (std::size_t i = 0; i < s.tokens.size(); ++i) line += (i ? " " : "") + std::to_string(s.tokens[i]);
  return line;
}

inline void write_corpus(const std::string& path, const std::vector<MultimodalSample>& samples) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  for (const auto& s : samples) f << format_sample(s) << '\n';
  if (!f) throw IoError("write failed for " + path);
}

inline std::vector<MultimodalSample> parse_corpus(std::istream& in) {
  std::vector<MultimodalSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) { throw FormatError("corpus line " + std::to_string(lineno) + ": " + why); };
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, '\t')) fields.push_back(f);
    if (fields.size() != 4) fail("expected 4 tab-separated fields");
    MultimodalSample s;
    s.id = int(out.size());
    try {
      s.label = std::stoi(fields[0]);
      s.base_id = std::stoi(fields[2]);
    } catch (const std::logic_error&) {
      fail("non-numeric label or base id");
    }
    if (s.label != 0 && s.label != 1) fail("label must be 0 or 1");
    s.tag = parse_perturbation(fields[1]);
    std::stringstream ts(fields[3]);
    std::string tok;
    while (ts >> tok) {
      try {
        s.tokens.push_back(std::stoi(tok));
      } catch (const std::logic_error&) {
        fail("bad token '" + tok + "'");
      }
    }
    if (s.tokens.empty()) fail("no tokens");
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<MultimodalSample> read_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  return parse_corpus(f);
}

/// Samples whose tag matches; `none` selects the unperturbed slice.
inline std::vector<MultimodalSample> slice_by_tag(const std::vector<MultimodalSample>& data, Perturbation tag) {
  std::vector<MultimodalSample> out;
  std::copy_if(data.begin(), data.end(), std::back_inserter(out), [&](const auto& s) { return s.tag == tag; });
  return out;
}

inline std::vector<MultimodalSample> perturbed_only(const std::vector<MultimodalSample>& data) {
  std::vector<MultimodalSample> out;
  std::copy_if(data.begin(), data.end(), std::back_inserter(out),
               [](const auto& s) { return s.tag != Perturbation::none; });
  return out;
}

}  // namespace mmbert
