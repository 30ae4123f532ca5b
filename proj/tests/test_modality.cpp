#include <gtest/gtest.h>

#include <random>

#include "mmbert/corpus.hpp"
#include "mmbert/modality.hpp"

using namespace mmbert;

namespace {

double cosine(std::span<const float> a, std::span<const float> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += double(a[i]) * b[i];
    aa += double(a[i]) * a[i];
    bb += double(b[i]) * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

}  // namespace

class Encoders : public ::testing::Test {
 protected:
  CorpusConfig cfg;
  ModelConfig model;
  SynthVocab vocab = build_vocab(cfg, 21);
  PseudoEncoders enc = PseudoEncoders::build(vocab, model, cfg, 21);
};

TEST_F(Encoders, HomophonesShareSpeechFrames) {
  std::size_t checked = 0;
  for (int t : vocab.toxic_tokens)
    for (int h : vocab.variants_of(t, Perturbation::homophone)) {
      std::vector<int> a{t}, b{h};
      EXPECT_EQ(enc.speech.encode(std::span<const int>(a)).vec(), enc.speech.encode(std::span<const int>(b)).vec());
      EXPECT_NE(enc.vision.encode(std::span<const int>(a)).vec(), enc.vision.encode(std::span<const int>(b)).vec());
      ++checked;
    }
  EXPECT_GT(checked, 0u);
  std::vector<int> t0{vocab.toxic_tokens[0]}, t1{vocab.toxic_tokens[1]};
  EXPECT_NE(enc.speech.encode(std::span<const int>(t0)).vec(), enc.speech.encode(std::span<const int>(t1)).vec());
}

TEST_F(Encoders, DeformationsSitAtFixedCosine) {
  ASSERT_FALSE(enc.vision.similar_pairs().empty());
  const std::size_t d = enc.vision.dim();
  const auto& table = enc.vision.table();
  for (auto [anchor, deformed] : enc.vision.similar_pairs()) {
    std::span<const float> a(table.data() + std::size_t(anchor) * d, d), b(table.data() + std::size_t(deformed) * d, d);
    EXPECT_NEAR(cosine(a, b), PseudoVisionEncoder::kDeformCosine, 1e-5);
  }
  // ordinary unrelated glyphs are far from that similarity
  std::vector<double> cs;
  for (std::size_t i = 1; i + 1 < vocab.normal_pool.size(); ++i) {
    const auto x = std::size_t(vocab.normal_pool[i]), y = std::size_t(vocab.normal_pool[i + 1]);
    cs.push_back(cosine({table.data() + x * d, d}, {table.data() + y * d, d}));
  }
  for (double c : cs) EXPECT_LT(std::abs(c), 0.8);
}

TEST_F(Encoders, CodemixGlyphsShareScriptComponent) {
  const std::size_t d = enc.vision.dim();
  const auto& table = enc.vision.table();
  std::vector<int> foreign;
  for (const auto& t : vocab.tokens)
    if (t.script == Script::foreign && t.glyph_anchor == t.id) foreign.push_back(t.id);
  ASSERT_GE(foreign.size(), 2u);
  double mean_cos = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i + 1 < foreign.size(); ++i, ++n)
    mean_cos += cosine({table.data() + std::size_t(foreign[i]) * d, d}, {table.data() + std::size_t(foreign[i + 1]) * d, d});
  EXPECT_NEAR(mean_cos / double(n), PseudoVisionEncoder::kScriptWeight * PseudoVisionEncoder::kScriptWeight, 0.1);
}

TEST_F(Encoders, ShapesAndUnknownTokens) {
  std::vector<int> ids{0, 3, 5, 7};
  auto s = enc.speech.encode<double>(ids);
  auto v = enc.vision.encode<double>(ids);
  EXPECT_EQ(s.shape(), (Shape{4 * cfg.frames_per_token, model.d_speech_feat}));
  EXPECT_EQ(v.shape(), (Shape{4, model.d_vision_feat}));
  std::vector<int> bad{int(vocab.size())};
  EXPECT_THROW(enc.speech.encode(std::span<const int>(bad)), VocabError);
  EXPECT_THROW(enc.vision.encode(std::span<const int>(bad)), VocabError);
}

TEST_F(Encoders, DeterministicInSeed) {
  auto again = PseudoEncoders::build(vocab, model, cfg, 21);
  auto other = PseudoEncoders::build(vocab, model, cfg, 22);
  EXPECT_EQ(enc.vision.table(), again.vision.table());
  EXPECT_EQ(enc.speech.table(), again.speech.table());
  EXPECT_NE(enc.vision.table(), other.vision.table());
}

TEST(Aligner, ShapesAndDimensionCheck) {
  std::mt19937_64 rng(1);
  Aligner<double> a(16, 32, 8, rng);
  EXPECT_EQ(a(BasicTensor<double>::zeros({5, 16})).shape(), (Shape{5, 8}));
  EXPECT_THROW(a(BasicTensor<double>::zeros({5, 15})), ConfigError);
  EXPECT_THROW(a(BasicTensor<double>::zeros({16})), ConfigError);
  ParamList<double> ps;
  a.collect("aligner.speech", ps);
  std::size_t n = 0;
  for (const auto& p : ps) n += p.tensor.size();
  EXPECT_EQ(n, 16u * 32 + 32 + 32 * 8 + 8);
}

TEST(Encoders2, ConfigErrors) {
  CorpusConfig cfg;
  auto vocab = build_vocab(cfg, 1);
  EXPECT_THROW(PseudoVisionEncoder(vocab, 1, 1), ConfigError);
  EXPECT_THROW(PseudoSpeechEncoder(vocab, 8, 0, 1), ConfigError);
}
