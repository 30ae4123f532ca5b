// Progressive training: optional text-only warm-up (stage 0), aligner
// training (stage 1), per-modality expert training with a shared head
// (stage 2) and joint routed fine-tuning with the load-balancing loss
// (stage 3).
#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mmbert/config.hpp"
#include "mmbert/metrics.hpp"
#include "mmbert/model.hpp"
#include "mmbert/optim.hpp"

namespace mmbert {

enum class LossKind { align_mse, cross_entropy };

struct StagePlan {
  std::string id;  // "0", "1", "2/text", "2/speech", "2/vision", "3"
  int stage = 0;
  std::map<std::string, double> group_lr;  // trainable groups; everything else is frozen
  std::size_t epochs = 0;
  std::size_t patience = 0;  // 0 disables early stopping
  LossKind loss = LossKind::cross_entropy;
  std::vector<Modality> inputs;
  FfnSlot slot;
  bool linear_decay = false;
  double alpha = 0;
  bool unperturbed_only = false;
};

inline StagePlan stage0_plan(const TrainConfig& t) {
  StagePlan p;
  p.id = "0";
  p.stage = 0;
  for (const char* g : {"embeddings", "backbone", "expert.text", "head"}) p.group_lr[g] = t.stage0_lr;
  p.epochs = t.stage0_epochs;
  p.inputs = {Modality::text};
  p.slot = FfnSlot::single(0);
  p.unperturbed_only = true;
  return p;
}

inline StagePlan stage1_plan(const TrainConfig& t, const ModelConfig& m) {
  StagePlan p;
  p.id = "1";
  p.stage = 1;
  for (Modality mod : m.modalities)
    if (mod != Modality::text) p.group_lr[std::string("aligner.") + to_string(mod)] = t.stage1_lr;
  p.epochs = t.stage1_epochs;
  p.patience = t.patience;
  p.loss = LossKind::align_mse;
  return p;
}

/// Text pass first (backbone trained at the text expert's rate), then one
/// pass per non-text modality with the backbone frozen.
inline std::vector<StagePlan> stage2_plans(const TrainConfig& t, const ModelConfig& m) {
  std::vector<StagePlan> out;
  for (Modality mod : m.modalities) {
    StagePlan p;
    p.id = std::string("2/") + to_string(mod);
    p.stage = 2;
    const std::string expert = std::string("expert.") + to_string(mod);
    if (mod == Modality::text) {
      for (const char* g : {"embeddings", "backbone", "head"}) p.group_lr[g] = t.stage2_text_lr;
      p.group_lr[expert] = t.stage2_text_lr;
    } else {
      p.group_lr[std::string("aligner.") + to_string(mod)] = t.stage2_aligner_lr;
      p.group_lr[expert] = t.stage2_modal_lr;
      p.group_lr["head"] = t.stage2_modal_lr;
    }
    p.epochs = t.stage2_epochs;
    p.patience = t.patience;
    p.inputs = {mod};
    p.slot = FfnSlot::single(m.expert_index(mod));
    out.push_back(std::move(p));
  }
  return out;
}

inline StagePlan stage3_plan(const TrainConfig& t, const ModelConfig& m) {
  StagePlan p;
  p.id = "3";
  p.stage = 3;
  std::vector<std::string> groups{"embeddings", "backbone", "head"};
  for (Modality mod : m.modalities) {
    groups.push_back(std::string("expert.") + to_string(mod));
    if (mod != Modality::text) groups.push_back(std::string("aligner.") + to_string(mod));
  }
  if (m.n_experts() > 1) groups.push_back("router");
  for (const auto& g : groups) p.group_lr[g] = t.stage3_lr;
  p.epochs = t.stage3_epochs;
  p.patience = t.patience;
  p.inputs = m.modalities;
  p.slot = m.n_experts() == 1 ? FfnSlot::single(0) : FfnSlot::mixture();
  p.linear_decay = true;
  p.alpha = m.n_experts() > 1 ? t.alpha : 0.0;
  return p;
}

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_acc = NAN;  // NaN for the alignment stage
  double aux = NAN;      // mean aux loss over the epoch's batches, NaN when unused
  double lr = 0;         // learning rate of the first trainable group at epoch end
  double wall_ms = 0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;

  /// CSV with columns epoch,stage,split,loss,acc,aux,lr; wall time is kept
  /// out so identical runs produce identical files.
  std::string to_csv() const {
    std::string out = "epoch,stage,split,loss,acc,aux,lr\n";
    char buf[256];
    auto num = [](double v) -> std::string {
      if (std::isnan(v)) return "";
      char b[64];
      std::snprintf(b, sizeof b, "%.6f", v);
      return b;
    };
    for (const auto& e : epochs) {
      std::snprintf(buf, sizeof buf, "%zu,%s,train,%s,,%s,%.6g\n", e.epoch, e.stage.c_str(), num(e.train_loss).c_str(),
                    num(e.aux).c_str(), e.lr);
      out += buf;
      std::snprintf(buf, sizeof buf, "%zu,%s,val,%s,%s,,%.6g\n", e.epoch, e.stage.c_str(), num(e.val_loss).c_str(),
                    num(e.val_acc).c_str(), e.lr);
      out += buf;
    }
    return out;
  }
};

struct StageResult {
  std::string stage;
  double initial_train_loss = 0;
  double final_train_loss = 0;
  double best_val_loss = 0;
  double final_val_acc = NAN;
  std::size_t epochs_run = 0;
  bool early_stopped = false;
};

/// FNV-1a over the raw bytes of the given parameters.
template <typename T>
std::uint64_t checksum(const ParamList<T>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    for (char c : p.name) h = (h ^ std::uint8_t(c)) * 0x100000001b3ULL;
    for (T v : p.tensor.values()) {
      const auto* b = reinterpret_cast<const unsigned char*>(&v);
      for (std::size_t i = 0; i < sizeof(T); ++i) h = (h ^ b[i]) * 0x100000001b3ULL;
    }
  }
  return h;
}

template <typename T>
class Trainer {
 public:
  Trainer(MMBertModel<T>& model, TrainConfig cfg, std::uint64_t seed) : model_(model), cfg_(cfg), seed_(seed) {}

  const TrainLog& log() const { return log_; }
  TrainLog& log() { return log_; }

  /// Copies the text expert into another modality's expert slot in every
  /// layer (expert initialization from the trained text FFN).
  void init_expert_from_text(Modality m) {
    const auto& cfg = model_.config();
    const std::size_t src = cfg.expert_index(Modality::text), dst = cfg.expert_index(m);
    for (auto& b : model_.blocks()) {
      copy_values(b.experts[src].ffn.fc1.weight, b.experts[dst].ffn.fc1.weight);
      copy_values(b.experts[src].ffn.fc1.bias, b.experts[dst].ffn.fc1.bias);
      copy_values(b.experts[src].ffn.fc2.weight, b.experts[dst].ffn.fc2.weight);
      copy_values(b.experts[src].ffn.fc2.bias, b.experts[dst].ffn.fc2.bias);
    }
  }

  void reset_routers() {
    for (auto& b : model_.blocks()) {
      for (T& v : b.router.proj.weight.mutable_values()) v = T(0);
      for (T& v : b.router.proj.bias.mutable_values()) v = T(0);
    }
  }

  StageResult stage0(std::span<const EncodedSample<T>> train, std::span<const EncodedSample<T>> val) {
    return run(stage0_plan(cfg_), train, val);
  }

  StageResult stage1(std::span<const EncodedSample<T>> train, std::span<const EncodedSample<T>> val) {
    return run(stage1_plan(cfg_, model_.config()), train, val);
  }

  std::vector<StageResult> stage2(std::span<const EncodedSample<T>> train, std::span<const EncodedSample<T>> val) {
    std::vector<StageResult> out;
    for (const auto& plan : stage2_plans(cfg_, model_.config())) {
      if (cfg_.upcycle_experts && plan.inputs.front() != Modality::text) init_expert_from_text(plan.inputs.front());
      out.push_back(run(plan, train, val));
    }
    return out;
  }

  StageResult stage3(std::span<const EncodedSample<T>> train, std::span<const EncodedSample<T>> val) {
    reset_routers();
    return run(stage3_plan(cfg_, model_.config()), train, val);
  }

  /// Mean loss of `plan`'s objective over `data`, without dropout or
  /// recording.
  double eval_loss(const StagePlan& plan, std::span<const EncodedSample<T>> data) const {
    if (data.empty()) return 0;
    NoGradScope<T> no_grad;
    if (plan.loss == LossKind::cross_entropy) return score(model_, data, plan.inputs, plan.slot).mean_loss;
    double acc = 0;
    for (const auto& s : data) acc += double(align_loss(s).item());
    return acc / double(data.size());
  }

  /// Sum of speech and vision alignment MSEs for one sample. Speech frames
  /// are aligned, then mean-pooled per token so they pair one-to-one with
  /// the word embeddings of the (unperturbed) target tokens.
  BasicTensor<T> align_loss(const EncodedSample<T>& s) const {
    const auto& cfg = model_.config();
    auto target = model_.word_embed(s.align_tokens).detach();
    std::optional<BasicTensor<T>> total;
    auto accumulate = [&](BasicTensor<T> term) { total = total ? add(*total, term) : term; };
    if (cfg.has(Modality::speech)) {
      const std::size_t n = s.tokens.size(), frames = s.speech.dim(0) / n;
      auto aligned = model_.align_speech(s.speech);
      auto pooled = mean(reshape(aligned, Shape{n, frames, cfg.d_model}), 1);
      accumulate(mse(pooled, target));
    }
    if (cfg.has(Modality::vision)) accumulate(mse(model_.align_vision(s.vision), target));
    if (!total) throw ConfigError("aligner training needs a speech or vision modality");
    return *total;
  }

  StageResult run(const StagePlan& plan, std::span<const EncodedSample<T>> train_all,
                  std::span<const EncodedSample<T>> val_all) {
    std::vector<EncodedSample<T>> train_f, val_f;
    if (plan.unperturbed_only) {
      for (const auto& s : train_all)
        if (s.tag == Perturbation::none) train_f.push_back(s);
      for (const auto& s : val_all)
        if (s.tag == Perturbation::none) val_f.push_back(s);
      train_all = train_f;
      val_all = val_f;
    }
    const auto train = train_all;
    const auto val = val_all;

    StageResult res;
    res.stage = plan.id;
    auto params = model_.parameters();
    std::vector<ParamGroup<T>> groups;
    ParamList<T> frozen;
    for (const auto& p : params) {
      const auto g = parameter_group(p.name);
      auto it = plan.group_lr.find(g);
      NamedTensor<T> np = p;
      np.tensor.zero_grad();
      if (it == plan.group_lr.end()) {
        np.tensor.set_requires_grad(false);
        frozen.push_back(np);
        continue;
      }
      np.tensor.set_requires_grad(true);
      auto gi = std::find_if(groups.begin(), groups.end(), [&](const auto& x) { return x.name == g; });
      if (gi == groups.end()) {
        groups.push_back({g, it->second, {}});
        gi = groups.end() - 1;
      }
      gi->params.push_back(np);
    }
    const auto frozen_sum = checksum(frozen);

    res.initial_train_loss = eval_loss(plan, train);
    res.final_train_loss = res.initial_train_loss;
    res.best_val_loss = eval_loss(plan, val);

    AdamW<T> opt({cfg_.beta1, cfg_.beta2, cfg_.adam_eps, cfg_.weight_decay});
    Rng shuffle_rng = make_rng(seed_, "shuffle/" + plan.id);
    Rng dropout_rng = make_rng(seed_, "dropout/" + plan.id);
    const std::size_t bs = std::max<std::size_t>(1, cfg_.batch_size);
    const std::size_t steps_per_epoch = (train.size() + bs - 1) / bs;
    const std::size_t total_steps = steps_per_epoch * plan.epochs;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<std::vector<T>> best;
    auto snapshot = [&] {
      best.clear();
      for (const auto& g : groups)
        for (const auto& p : g.params) best.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
    };
    auto restore = [&] {
      std::size_t i = 0;
      for (auto& g : groups)
        for (auto& p : g.params) std::copy(best[i].begin(), best[i].end(), p.tensor.mutable_values().begin()), ++i;
    };
    snapshot();
    std::size_t bad_epochs = 0;
    std::size_t step = 0;
    const auto t0 = std::chrono::steady_clock::now();

    for (std::size_t epoch = 1; epoch <= plan.epochs && !train.empty(); ++epoch) {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      double loss_acc = 0, aux_acc = 0;
      std::size_t batches = 0, aux_batches = 0;
      double lr_now = 0;
      for (std::size_t b0 = 0; b0 < order.size(); b0 += bs) {
        const double factor = plan.linear_decay ? linear_decay(step, total_steps) : 1.0;
        std::vector<const EncodedSample<T>*> batch;
        for (std::size_t i = b0; i < std::min(order.size(), b0 + bs); ++i) batch.push_back(&train[order[i]]);

        BasicTape<T> tape;
        BasicTapeScope<T> scope(tape);
        std::vector<GateRecord<T>> gates;
        std::optional<double> aux_value;
        auto loss = batch_loss(plan, batch, dropout_rng, gates, aux_value);
        const double lv = double(loss.item());
        if (!std::isfinite(lv)) throw NumericError("non-finite loss in stage " + plan.id + "; " + describe_gates(gates));
        tape.backward(loss);
        for (const auto& f : frozen)
          if (f.tensor.has_grad()) throw InvariantError("frozen parameter " + f.name + " received a gradient in stage " + plan.id);
        clip_grad_norm(groups, cfg_.max_grad_norm);
        opt.step(groups, factor);
        for (auto& g : groups)
          for (auto& p : g.params) p.tensor.zero_grad();
        loss_acc += lv;
        ++batches;
        if (aux_value) aux_acc += *aux_value, ++aux_batches;
        lr_now = groups.empty() ? 0.0 : groups.front().lr * factor;
        ++step;
      }

      EpochRecord rec;
      rec.stage = plan.id;
      rec.epoch = epoch;
      rec.train_loss = loss_acc / double(std::max<std::size_t>(batches, 1));
      rec.aux = aux_batches ? aux_acc / double(aux_batches) : NAN;
      rec.lr = lr_now;
      if (plan.loss == LossKind::cross_entropy && !val.empty()) {
        auto s = score(model_, val, plan.inputs, plan.slot);
        rec.val_loss = s.mean_loss;
        rec.val_acc = compute_metrics(s.predictions, s.labels).accuracy;
      } else {
        rec.val_loss = eval_loss(plan, val);
      }
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      log_.epochs.push_back(rec);
      res.epochs_run = epoch;

      if (plan.patience == 0) {
        res.best_val_loss = rec.val_loss;
        snapshot();
        continue;
      }
      if (rec.val_loss < res.best_val_loss) {
        res.best_val_loss = rec.val_loss;
        bad_epochs = 0;
        snapshot();
      } else if (++bad_epochs >= plan.patience) {
        res.early_stopped = true;
        break;
      }
    }
    if (cfg_.restore_best) restore();
    for (auto& p : params) p.tensor.set_requires_grad(true);
    if (checksum(frozen) != frozen_sum) throw InvariantError("frozen parameters changed during stage " + plan.id);

    res.final_train_loss = eval_loss(plan, train);
    if (plan.loss == LossKind::cross_entropy && !val.empty())
      res.final_val_acc = evaluate(model_, val, plan.inputs, plan.slot).accuracy;
    return res;
  }

 private:
  BasicTensor<T> batch_loss(const StagePlan& plan, const std::vector<const EncodedSample<T>*>& batch, Rng& rng,
                            std::vector<GateRecord<T>>& gates, std::optional<double>& aux_value) const {
    if (plan.loss == LossKind::align_mse) {
      std::optional<BasicTensor<T>> total;
      for (const auto* s : batch) {
        auto l = align_loss(*s);
        total = total ? add(*total, l) : l;
      }
      return scale(*total, T(1.0 / double(batch.size())));
    }
    ForwardContext<T> ctx;
    ctx.training = true;
    ctx.dropout = model_.config().dropout_rate;
    ctx.rng = &rng;
    ctx.gates = plan.slot.routed ? &gates : nullptr;
    auto logits = model_.batch_logits(batch, plan.inputs, plan.slot, ctx);
    std::vector<int> labels;
    for (const auto* s : batch) labels.push_back(s->label);
    auto ce = cross_entropy(logits, std::span<const int>(labels));
    if (!plan.slot.routed) return ce;
    auto aux = aux_loss(gates);
    aux_value = double(aux.item());
    return total_loss(ce, aux, plan.alpha);
  }

  static std::string describe_gates(const std::vector<GateRecord<T>>& gates) {
    if (gates.empty()) return "no gate records";
    std::map<std::size_t, std::vector<double>> sums;
    std::map<std::size_t, std::size_t> counts;
    for (const auto& g : gates) {
      auto& s = sums[g.layer];
      s.resize(g.experts(), 0.0);
      auto v = g.probs.values();
      for (std::size_t t = 0; t < g.tokens(); ++t)
        for (std::size_t e = 0; e < g.experts(); ++e) s[e] += v[t * g.experts() + e];
      counts[g.layer] += g.tokens();
    }
    std::string out = "last batch mean gates:";
    for (const auto& [layer, s] : sums) {
      out += " layer" + std::to_string(layer) + "=[";
      for (std::size_t e = 0; e < s.size(); ++e)
        out += (e ? "," : "") + std::to_string(s[e] / double(std::max<std::size_t>(counts[layer], 1)));
      out += "]";
    }
    return out;
  }

  MMBertModel<T>& model_;
  TrainConfig cfg_;
  std::uint64_t seed_;
  TrainLog log_;
};

}  // namespace mmbert
