// Run configuration and its flat `key = value` text format.
//
// Keys mirror field paths (`model.d_model`, `train.stage3_lr`, ...). Lines
// starting with '#' are comments. Unknown keys are rejected so typos fail
// loudly instead of silently running defaults.
#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "mmbert/errors.hpp"

namespace mmbert {

enum class Modality : std::uint8_t { text = 0, speech = 1, vision = 2 };

inline const char* to_string(Modality m) {
  switch (m) {
    case Modality::text: return "text";
    case Modality::speech: return "speech";
    case Modality::vision: return "vision";
  }
  return "?";
}

inline Modality parse_modality(const std::string& s) {
  if (s == "text") return Modality::text;
  if (s == "speech") return Modality::speech;
  if (s == "vision") return Modality::vision;
  throw ConfigError("unknown modality '" + s + "'");
}

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 64;
  std::size_t vocab_size = 0;  // filled from the synthetic vocabulary
  std::size_t max_total_len = 64;
  std::size_t d_vision_feat = 64;
  std::size_t d_speech_feat = 64;
  std::size_t d_aligner_hidden = 128;
  std::size_t n_classes = 2;
  double layer_norm_eps = 1e-12;
  double dropout_rate = 0.1;
  /// Input modalities in concatenation order; one expert per modality.
  std::vector<Modality> modalities{Modality::text, Modality::speech, Modality::vision};

  std::size_t n_experts() const { return modalities.size(); }
  bool has(Modality m) const { return std::find(modalities.begin(), modalities.end(), m) != modalities.end(); }
  std::size_t expert_index(Modality m) const {
    auto it = std::find(modalities.begin(), modalities.end(), m);
    if (it == modalities.end()) throw ConfigError(std::string("modality ") + to_string(m) + " not configured");
    return std::size_t(it - modalities.begin());
  }

  void validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
      throw ConfigError("d_model (" + std::to_string(d_model) + ") must be a positive multiple of n_heads (" +
                        std::to_string(n_heads) + ")");
    if (modalities.empty() || modalities.front() != Modality::text)
      throw ConfigError("modalities must start with text (the pooled position is textual)");
    for (std::size_t i = 0; i < modalities.size(); ++i)
      for (std::size_t j = i + 1; j < modalities.size(); ++j)
        if (modalities[i] == modalities[j]) throw ConfigError("duplicate modality in config");
    if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
    if (layer_norm_eps < 0) throw ConfigError("layer_norm_eps must be >= 0");
    if (dropout_rate < 0 || dropout_rate >= 1) throw ConfigError("dropout_rate must be in [0,1)");
    if (d_ff == 0 || d_aligner_hidden == 0) throw ConfigError("hidden widths must be positive");
  }
};

struct CorpusConfig {
  std::size_t n_base = 800;
  double balance = 0.5;
  std::size_t min_len = 6;
  std::size_t max_len = 16;
  double perturb_rate = 0.5;
  std::size_t n_normal = 60;
  std::size_t n_toxic_unigrams = 12;
  std::size_t n_toxic_bigrams = 6;
  std::size_t homophones_per_toxic = 2;
  std::size_t codemix_per_toxic = 2;
  std::size_t deform_per_toxic = 2;
  std::size_t normals_with_variants = 30;
  std::size_t frames_per_token = 2;
  bool abbreviation = false;
};

struct SplitSpec {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct TrainConfig {
  std::size_t batch_size = 32;
  bool stage0 = true;
  std::size_t stage0_epochs = 10;
  double stage0_lr = 1e-3;
  bool stage1 = true;
  std::size_t stage1_epochs = 50;
  double stage1_lr = 1e-3;
  bool stage2 = true;
  std::size_t stage2_epochs = 50;
  double stage2_aligner_lr = 1e-3;
  double stage2_text_lr = 5e-6;
  double stage2_modal_lr = 5e-5;
  bool upcycle_experts = true;  // start speech/vision experts from the trained text expert
  std::size_t stage3_epochs = 50;
  double stage3_lr = 5e-4;
  std::size_t patience = 5;
  bool restore_best = true;  // reload the best-validation weights when a stage ends
  double alpha = 1e-2;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double max_grad_norm = 1.0;
};

struct RunConfig {
  std::uint64_t seed = 42;
  ModelConfig model;
  CorpusConfig corpus;
  SplitSpec split;
  TrainConfig train;
  bool gate_capture = true;
};

namespace detail {

template <typename V>
void visit_fields(RunConfig& c, V&& v) {
  v("seed", c.seed);
  v("model.d_model", c.model.d_model);
  v("model.n_layers", c.model.n_layers);
  v("model.n_heads", c.model.n_heads);
  v("model.d_ff", c.model.d_ff);
  v("model.max_total_len", c.model.max_total_len);
  v("model.d_vision_feat", c.model.d_vision_feat);
  v("model.d_speech_feat", c.model.d_speech_feat);
  v("model.d_aligner_hidden", c.model.d_aligner_hidden);
  v("model.n_classes", c.model.n_classes);
  v("model.layer_norm_eps", c.model.layer_norm_eps);
  v("model.dropout_rate", c.model.dropout_rate);
  v("model.modalities", c.model.modalities);
  v("corpus.n_base", c.corpus.n_base);
  v("corpus.balance", c.corpus.balance);
  v("corpus.min_len", c.corpus.min_len);
  v("corpus.max_len", c.corpus.max_len);
  v("corpus.perturb_rate", c.corpus.perturb_rate);
  v("corpus.n_normal", c.corpus.n_normal);
  v("corpus.n_toxic_unigrams", c.corpus.n_toxic_unigrams);
  v("corpus.n_toxic_bigrams", c.corpus.n_toxic_bigrams);
  v("corpus.homophones_per_toxic", c.corpus.homophones_per_toxic);
  v("corpus.codemix_per_toxic", c.corpus.codemix_per_toxic);
  v("corpus.deform_per_toxic", c.corpus.deform_per_toxic);
  v("corpus.normals_with_variants", c.corpus.normals_with_variants);
  v("corpus.frames_per_token", c.corpus.frames_per_token);
  v("corpus.abbreviation", c.corpus.abbreviation);
  v("split.train", c.split.train);
  v("split.val", c.split.val);
  v("split.test", c.split.test);
  v("train.batch_size", c.train.batch_size);
  v("train.stage0", c.train.stage0);
  v("train.stage0_epochs", c.train.stage0_epochs);
  v("train.stage0_lr", c.train.stage0_lr);
  v("train.stage1", c.train.stage1);
  v("train.stage1_epochs", c.train.stage1_epochs);
  v("train.stage1_lr", c.train.stage1_lr);
  v("train.stage2", c.train.stage2);
  v("train.stage2_epochs", c.train.stage2_epochs);
  v("train.stage2_aligner_lr", c.train.stage2_aligner_lr);
  v("train.stage2_text_lr", c.train.stage2_text_lr);
  v("train.stage2_modal_lr", c.train.stage2_modal_lr);
  v("train.upcycle_experts", c.train.upcycle_experts);
  v("train.stage3_epochs", c.train.stage3_epochs);
  v("train.stage3_lr", c.train.stage3_lr);
  v("train.patience", c.train.patience);
  v("train.restore_best", c.train.restore_best);
  v("train.alpha", c.train.alpha);
  v("train.weight_decay", c.train.weight_decay);
  v("train.beta1", c.train.beta1);
  v("train.beta2", c.train.beta2);
  v("train.adam_eps", c.train.adam_eps);
  v("train.max_grad_norm", c.train.max_grad_norm);
  v("flags.gate_capture", c.gate_capture);
}

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename F>
void parse_value(const std::string& key, const std::string& text, F& field) {
  auto bad = [&] { throw ConfigError("bad value '" + text + "' for key " + key); };
  if constexpr (std::is_same_v<F, bool>) {
    if (text == "true" || text == "1") field = true;
    else if (text == "false" || text == "0") field = false;
    else bad();
  } else if constexpr (std::is_same_v<F, double>) {
    try {
      std::size_t used = 0;
      field = std::stod(text, &used);
      if (used != text.size()) bad();
    } catch (const std::logic_error&) {
      bad();
    }
  } else if constexpr (std::is_integral_v<F>) {
    auto r = std::from_chars(text.data(), text.data() + text.size(), field);
    if (r.ec != std::errc() || r.ptr != text.data() + text.size()) bad();
  } else if constexpr (std::is_same_v<F, std::vector<Modality>>) {
    field.clear();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) field.push_back(parse_modality(trim(item)));
  }
}

template <typename F>
std::string format_value(const F& field) {
  if constexpr (std::is_same_v<F, bool>) {
    return field ? "true" : "false";
  } else if constexpr (std::is_same_v<F, double>) {
    std::ostringstream os;
    os.precision(17);
    os << field;
    return os.str();
  } else if constexpr (std::is_integral_v<F>) {
    return std::to_string(field);
  } else {
    std::string out;
    for (std::size_t i = 0; i < field.size(); ++i) out += (i ? "," : "") + std::string(to_string(field[i]));
    return out;
  }
}

}  // namespace detail

/// Applies `key = value` lines on top of `base`.
inline RunConfig parse_config(const std::string& text, RunConfig base = {}) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    kv[detail::trim(t.substr(0, eq))] = detail::trim(t.substr(eq + 1));
  }
  detail::visit_fields(base, [&](const char* key, auto& field) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    detail::parse_value(key, it->second, field);
    kv.erase(it);
  });
  if (!kv.empty()) throw ConfigError("unknown config key '" + kv.begin()->first + "'");
  return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

inline std::string format_config(RunConfig c) {
  std::string out;
  detail::visit_fields(c, [&](const char* key, auto& field) {
    out += key;
    out += " = ";
    out += detail::format_value(field);
    out += '\n';
  });
  return out;
}

}  // namespace mmbert
