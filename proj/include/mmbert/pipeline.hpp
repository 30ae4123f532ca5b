// End-to-end wiring: vocabulary, corpus, split, pseudo encoders, model and
// the staged training schedule.
#pragma once

#include <vector>

#include "mmbert/training.hpp"

namespace mmbert {

struct Experiment {
  RunConfig cfg;  // cfg.model.vocab_size filled in
  SynthVocab vocab;
  PseudoEncoders encoders;
  Splits splits;
};

/// Vocabulary and encoders only; used when the samples come from files.
inline Experiment make_environment(RunConfig cfg) {
  cfg.model.validate();
  Experiment e{cfg, build_vocab(cfg.corpus, cfg.seed), {}, {}};
  e.cfg.model.vocab_size = e.vocab.tokens.size();
  e.encoders = PseudoEncoders::build(e.vocab, e.cfg.model, e.cfg.corpus, cfg.seed);
  return e;
}

inline Experiment make_experiment(RunConfig cfg) {
  auto e = make_environment(std::move(cfg));
  e.splits = split(generate_corpus(e.vocab, e.cfg.corpus, e.cfg.seed), e.cfg.split, e.cfg.seed);
  return e;
}

template <typename T>
struct EncodedSplits {
  std::vector<EncodedSample<T>> train, val, test;
};

template <typename T>
EncodedSplits<T> encode_splits(const Experiment& e) {
  return {encode_all<T>(e.splits.train, e.encoders), encode_all<T>(e.splits.val, e.encoders),
          encode_all<T>(e.splits.test, e.encoders)};
}

struct StageSelection {
  bool stage0 = true, stage1 = true, stage2 = true, stage3 = true;

  static StageSelection from(const TrainConfig& t) { return {t.stage0, t.stage1, t.stage2, true}; }
};

struct PipelineResult {
  std::vector<StageResult> stages;
  TrainLog log;
};

/// Runs the selected stages in order. Stage 1 and the non-text stage-2
/// passes are skipped for a text-only model.
template <typename T>
PipelineResult train_pipeline(MMBertModel<T>& model, const RunConfig& cfg, const EncodedSplits<T>& data,
                              StageSelection sel) {
  Trainer<T> tr(model, cfg.train, cfg.seed);
  PipelineResult out;
  const bool multimodal = model.config().n_experts() > 1;
  if (sel.stage0) out.stages.push_back(tr.stage0(data.train, data.val));
  if (sel.stage1 && multimodal) out.stages.push_back(tr.stage1(data.train, data.val));
  if (sel.stage2)
    for (auto& r : tr.stage2(data.train, data.val)) out.stages.push_back(r);
  if (sel.stage3) out.stages.push_back(tr.stage3(data.train, data.val));
  out.log = tr.log();
  return out;
}

}  // namespace mmbert
