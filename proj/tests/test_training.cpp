#include <gtest/gtest.h>

#include <cmath>

#include "mmbert/pipeline.hpp"
#include "mmbert/training.hpp"

using namespace mmbert;

namespace {

RunConfig small_run(std::uint64_t seed) {
  RunConfig c;
  c.seed = seed;
  c.corpus.n_base = 160;
  return c;
}

struct Prepared {
  Experiment exp;
  EncodedSplits<float> data;
  MMBertModel<float> model;
  explicit Prepared(const RunConfig& c)
      : exp(make_experiment(c)), data(encode_splits<float>(exp)), model(exp.cfg.model, exp.cfg.seed) {}
};

std::uint64_t group_sum(const MMBertModel<float>& m, const std::string& group) {
  ParamList<float> sel;
  for (const auto& p : m.parameters())
    if (parameter_group(p.name) == group) sel.push_back(p);
  return checksum(sel);
}

std::vector<float> router_weights(const MMBertModel<float>& m) {
  std::vector<float> out;
  for (const auto& b : m.blocks()) out.insert(out.end(), b.router.proj.weight.vec().begin(), b.router.proj.weight.vec().end());
  return out;
}

}  // namespace

TEST(AdamW, FirstStepMatchesClosedForm) {
  // after one step m_hat = g and v_hat = g^2, so the Adam term is lr * g / (|g| + eps)
  std::vector<double> p{1.0, -2.0, 0.5};
  std::vector<double> g{0.5, -0.25, 0.0};
  AdamMoments st;
  AdamWOptions opt;
  adamw_update<double>(p, g, st, 0.1, opt);
  EXPECT_NEAR(p[0], 1.0 * (1 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(p[1], -2.0 * (1 - 0.1 * 0.01) + 0.1 * 0.25 / (0.25 + 1e-8), 1e-12);
  EXPECT_NEAR(p[2], 0.5 * (1 - 0.1 * 0.01), 1e-12);
  EXPECT_EQ(st.step, 1u);
  // second step with the same gradient: moments unchanged in ratio
  adamw_update<double>(p, g, st, 0.1, opt);
  EXPECT_NEAR(st.m[0], 0.9 * 0.05 + 0.1 * 0.5, 1e-12);
  EXPECT_NEAR(st.v[0], 0.999 * 0.00025 + 0.001 * 0.25, 1e-12);
}

TEST(AdamW, ZeroGradZeroDecayIsIdentityAndNegativeLrRejected) {
  std::vector<float> p{1.5f, -0.5f};
  std::vector<float> g{0.f, 0.f};
  AdamMoments st;
  AdamWOptions opt;
  opt.weight_decay = 0;
  adamw_update<float>(p, g, st, 1e-3, opt);
  EXPECT_EQ(p, (std::vector<float>{1.5f, -0.5f}));
  EXPECT_THROW(adamw_update<float>(p, g, st, -1e-3, opt), ConfigError);
  AdamW<float> o;
  std::vector<ParamGroup<float>> groups{{"x", -1.0, {}}};
  EXPECT_THROW(o.step(groups), ConfigError);
}

TEST(Schedule, ClipAndLinearDecay) {
  BasicTensor<float> w({2}, {0.f, 0.f}, true);
  w.mutable_grad()[0] = 3.f;
  w.mutable_grad()[1] = 4.f;
  std::vector<ParamGroup<float>> groups{{"g", 1.0, {{"w", w}}}};
  EXPECT_NEAR(clip_grad_norm(groups, 1.0), 5.0, 1e-6);
  EXPECT_NEAR(w.grad()[0], 0.6f, 1e-6);
  EXPECT_NEAR(w.grad()[1], 0.8f, 1e-6);
  EXPECT_NEAR(clip_grad_norm(groups, 1.0), 1.0, 1e-5);
  EXPECT_NEAR(w.grad()[0], 0.6f, 1e-6);
  EXPECT_DOUBLE_EQ(linear_decay(0, 100), 1.0);
  EXPECT_DOUBLE_EQ(linear_decay(25, 100), 0.75);
  EXPECT_DOUBLE_EQ(linear_decay(100, 100), 0.0);
  EXPECT_DOUBLE_EQ(linear_decay(150, 100), 0.0);
}

TEST(Plans, GroupsAndRates) {
  TrainConfig t;
  ModelConfig m;
  auto p1 = stage1_plan(t, m);
  EXPECT_EQ(p1.group_lr.size(), 2u);
  EXPECT_TRUE(p1.group_lr.count("aligner.speech") && p1.group_lr.count("aligner.vision"));
  auto p2 = stage2_plans(t, m);
  ASSERT_EQ(p2.size(), 3u);
  EXPECT_DOUBLE_EQ(p2[0].group_lr.at("backbone"), 5e-6);
  EXPECT_DOUBLE_EQ(p2[1].group_lr.at("aligner.speech"), 1e-3);
  EXPECT_DOUBLE_EQ(p2[1].group_lr.at("expert.speech"), 5e-5);
  EXPECT_FALSE(p2[1].group_lr.count("backbone"));
  for (const auto& p : p2) EXPECT_TRUE(p.group_lr.count("head"));
  EXPECT_EQ(p2[2].slot.expert, 2u);
  auto p3 = stage3_plan(t, m);
  EXPECT_TRUE(p3.slot.routed);
  EXPECT_TRUE(p3.linear_decay);
  EXPECT_DOUBLE_EQ(p3.alpha, 1e-2);
  EXPECT_DOUBLE_EQ(p3.group_lr.at("router"), 5e-4);
  m.modalities = {Modality::text};
  EXPECT_FALSE(stage3_plan(t, m).slot.routed);
  EXPECT_EQ(stage3_plan(t, m).alpha, 0.0);
}

TEST(Stage1, ZeroEpochsKeepsInitialLoss) {
  auto c = small_run(1);
  c.train.stage1_epochs = 0;
  Prepared s(c);
  const auto before = checksum(s.model.parameters());
  Trainer<float> tr(s.model, c.train, c.seed);
  auto r = tr.stage1(s.data.train, s.data.val);
  EXPECT_EQ(r.epochs_run, 0u);
  EXPECT_EQ(r.final_train_loss, r.initial_train_loss);
  EXPECT_EQ(checksum(s.model.parameters()), before);
}

TEST(Stage1, LossStrictlyDecreasesAndTextIsFrozen) {
  for (std::uint64_t seed : {1, 2, 3}) {
    auto c = RunConfig{};
    c.seed = seed;
    c.train.stage1_epochs = 5;
    Prepared s(c);
    const auto embed = group_sum(s.model, "embeddings");
    const auto backbone = group_sum(s.model, "backbone");
    Trainer<float> tr(s.model, c.train, c.seed);
    auto r = tr.stage1(s.data.train, s.data.val);
    const auto& log = tr.log().epochs;
    ASSERT_EQ(log.size(), 5u);
    EXPECT_LT(log[0].train_loss, r.initial_train_loss);
    for (std::size_t i = 1; i < log.size(); ++i) EXPECT_LT(log[i].train_loss, log[i - 1].train_loss) << "seed " << seed;
    EXPECT_EQ(group_sum(s.model, "embeddings"), embed);
    EXPECT_EQ(group_sum(s.model, "backbone"), backbone);
    EXPECT_NE(group_sum(s.model, "aligner.speech"), 0u);
  }
}

TEST(Stage2, ExpertsDifferAndHeadTrainsInEveryPass) {
  auto c = small_run(4);
  c.train.stage2_epochs = 2;
  c.train.stage0_epochs = 1;
  Prepared s(c);
  Trainer<float> tr(s.model, c.train, c.seed);
  tr.stage0(s.data.train, s.data.val);
  std::vector<std::uint64_t> heads{group_sum(s.model, "head")};
  for (const auto& plan : stage2_plans(c.train, s.model.config())) {
    const auto backbone = group_sum(s.model, "backbone");
    if (plan.inputs.front() != Modality::text) tr.init_expert_from_text(plan.inputs.front());
    tr.run(plan, s.data.train, s.data.val);
    heads.push_back(group_sum(s.model, "head"));
    if (plan.inputs.front() != Modality::text) { EXPECT_EQ(group_sum(s.model, "backbone"), backbone); }
  }
  for (std::size_t i = 1; i < heads.size(); ++i) EXPECT_NE(heads[i], heads[i - 1]);
  const auto t = group_sum(s.model, "expert.text"), sp = group_sum(s.model, "expert.speech"),
             v = group_sum(s.model, "expert.vision");
  EXPECT_NE(t, sp);
  EXPECT_NE(t, v);
  EXPECT_NE(sp, v);
}

TEST(Stage3, AlphaChangesRouterAfterOneEpoch) {
  auto c = small_run(5);
  c.train.stage3_epochs = 1;
  Prepared s(c);
  auto other = s.model.clone();
  Trainer<float> a(s.model, c.train, c.seed);
  a.stage3(s.data.train, s.data.val);
  auto c0 = c.train;
  c0.alpha = 0;
  Trainer<float> b(other, c0, c.seed);
  b.stage3(s.data.train, s.data.val);
  const auto ra = router_weights(s.model), rb = router_weights(other);
  ASSERT_EQ(ra.size(), rb.size());
  double diff = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) diff = std::max(diff, double(std::abs(ra[i] - rb[i])));
  EXPECT_GT(diff, 0.0);
  EXPECT_NE(router_weights(s.model), std::vector<float>(ra.size(), 0.f));
}

TEST(Stage3, EarlyStoppingHaltsBeforeBudget) {
  auto c = small_run(6);
  c.train.stage3_lr = 0;  // validation loss can never improve
  c.train.patience = 2;
  Prepared s(c);
  Trainer<float> tr(s.model, c.train, c.seed);
  auto r = tr.stage3(s.data.train, s.data.val);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.epochs_run, 2u);
  EXPECT_LT(r.epochs_run, c.train.stage3_epochs);
}

TEST(Stage3, NonFiniteLossAbortsWithGateDump) {
  auto c = small_run(7);
  c.train.stage3_epochs = 1;
  Prepared s(c);
  s.model.head().out.bias.mutable_values()[0] = std::nanf("");
  Trainer<float> tr(s.model, c.train, c.seed);
  try {
    tr.stage3(s.data.train, s.data.val);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("gates"), std::string::npos) << e.what();
  }
}

TEST(Pipeline, IdenticalSeedsGiveIdenticalLogs) {
  auto c = small_run(8);
  c.train.stage0_epochs = 1;
  c.train.stage1_epochs = 1;
  c.train.stage2_epochs = 1;
  c.train.stage3_epochs = 1;
  std::string logs[2];
  for (auto& l : logs) {
    Prepared s(c);
    auto r = train_pipeline(s.model, s.exp.cfg, s.data, StageSelection::from(c.train));
    EXPECT_EQ(r.stages.size(), 6u);
    l = r.log.to_csv();
  }
  EXPECT_EQ(logs[0], logs[1]);
  EXPECT_EQ(logs[0].substr(0, logs[0].find('\n')), "epoch,stage,split,loss,acc,aux,lr");
  EXPECT_EQ(std::count(logs[0].begin(), logs[0].end(), '\n'), 1 + 2 * 6);
}
