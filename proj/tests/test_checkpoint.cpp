#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "mmbert/checkpoint.hpp"
#include "mmbert/pipeline.hpp"

using namespace mmbert;

namespace {

// Reflected CRC-32 (poly 0xEDB88320), bit at a time.
std::uint32_t crc32_bitwise(const unsigned char* p, std::size_t n) {
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) {
    c ^= p[i];
    for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
  }
  return ~c;
}

std::uint32_t read_u32(const std::vector<unsigned char>& b, std::size_t at) {
  return std::uint32_t(b[at]) | std::uint32_t(b[at + 1]) << 8 | std::uint32_t(b[at + 2]) << 16 |
         std::uint32_t(b[at + 3]) << 24;
}

RunConfig small_run() {
  RunConfig c;
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.model.d_ff = 16;
  c.model.d_vision_feat = 8;
  c.model.d_speech_feat = 8;
  c.model.d_aligner_hidden = 8;
  return c;
}

struct Saved {
  RunConfig cfg;
  PseudoEncoders enc;
  MMBertModel<float> model;
  std::vector<unsigned char> bytes;
};

Saved make_saved() {
  Saved s;
  s.cfg = small_run();
  auto env = make_environment(s.cfg);
  s.cfg = env.cfg;
  s.enc = env.encoders;
  s.model = MMBertModel<float>(s.cfg.model, 3);
  for (auto& b : s.model.blocks())
    for (float& v : b.router.proj.weight.mutable_values()) v = 0.25f;
  s.bytes = serialize_checkpoint(checkpoint_entries(s.cfg, "stage2", s.model, s.enc));
  return s;
}

std::string error_of(const std::vector<unsigned char>& bytes) {
  try {
    restore_checkpoint(deserialize_checkpoint(bytes));
  } catch (const FormatError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Crc, ZlibAgreesWithBitwiseReference) {
  const std::string check = "123456789";
  const auto* p = reinterpret_cast<const unsigned char*>(check.data());
  EXPECT_EQ(crc32_bitwise(p, check.size()), 0xCBF43926u);
  EXPECT_EQ(detail::crc32_of(p, check.size()), 0xCBF43926u);
  auto s = make_saved();
  EXPECT_EQ(read_u32(s.bytes, s.bytes.size() - 4), crc32_bitwise(s.bytes.data(), s.bytes.size() - 4));
}

TEST(Checkpoint, HeaderLayout) {
  auto s = make_saved();
  ASSERT_GT(s.bytes.size(), 20u);
  EXPECT_EQ(std::string(s.bytes.begin(), s.bytes.begin() + 4), "MMBC");
  EXPECT_EQ(read_u32(s.bytes, 4), 1u);
}

TEST(Checkpoint, BitwiseRoundTrip) {
  auto s = make_saved();
  auto run = restore_checkpoint(deserialize_checkpoint(s.bytes));
  EXPECT_EQ(run.stage, "stage2");
  EXPECT_EQ(format_config(run.cfg), format_config(s.cfg));
  auto a = s.model.parameters(), b = run.model.parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].tensor.vec(), b[i].tensor.vec());
  }
  EXPECT_EQ(run.encoders.vision.table(), s.enc.vision.table());
  EXPECT_EQ(run.encoders.speech.table(), s.enc.speech.table());
  EXPECT_EQ(run.encoders.speech.phoneme_map(), s.enc.speech.phoneme_map());
  auto again = serialize_checkpoint(checkpoint_entries(run.cfg, run.stage, run.model, run.encoders));
  EXPECT_EQ(again, s.bytes);
}

TEST(Checkpoint, FileRoundTripWithOptimizerState) {
  auto s = make_saved();
  AdamW<float> opt;
  opt.state()["embed.word"] = AdamMoments{{0.5, -0.25}, {0.125, 1.0}, 7};
  const auto path = (std::filesystem::temp_directory_path() / "mmbert_ckpt_test.ckpt").string();
  save_checkpoint(path, s.cfg, "stage3", s.model, s.enc, &opt);
  auto run = load_checkpoint(path);
  std::filesystem::remove(path);
  ASSERT_EQ(run.optimizer.count("embed.word"), 1u);
  EXPECT_EQ(run.optimizer["embed.word"].step, 7u);
  EXPECT_EQ(run.optimizer["embed.word"].m, (std::vector<double>{0.5, -0.25}));
  EXPECT_THROW(load_checkpoint(path), IoError);
}

TEST(Checkpoint, TruncationIsCrcMismatch) {
  auto s = make_saved();
  for (std::size_t cut : {std::size_t(1), std::size_t(100), s.bytes.size() / 2}) {
    std::vector<unsigned char> t(s.bytes.begin(), s.bytes.end() - std::ptrdiff_t(cut));
    EXPECT_NE(error_of(t).find("CRC mismatch"), std::string::npos) << cut;
  }
  auto flipped = s.bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  EXPECT_NE(error_of(flipped).find("CRC mismatch"), std::string::npos);
}

TEST(Checkpoint, VersionAndMagic) {
  auto s = make_saved();
  auto v2 = s.bytes;
  v2[4] = 2;
  EXPECT_NE(error_of(v2).find("unsupported format version 2 (expected 1)"), std::string::npos);
  auto bad = s.bytes;
  bad[0] = 'X';
  EXPECT_NE(error_of(bad).find("bad magic"), std::string::npos);
  EXPECT_THROW(deserialize_checkpoint({}), FormatError);
}

TEST(Checkpoint, ShapeMismatchNamesTensor) {
  auto s = make_saved();
  auto entries = checkpoint_entries(s.cfg, "stage2", s.model, s.enc);
  for (auto& e : entries)
    if (e.name == "layer1.attn.q.weight") {
      e.shape = {8, 32};
    }
  const auto msg = error_of(serialize_checkpoint(entries));
  EXPECT_NE(msg.find("layer1.attn.q.weight"), std::string::npos) << msg;

  auto missing = checkpoint_entries(s.cfg, "stage2", s.model, s.enc);
  missing.erase(std::remove_if(missing.begin(), missing.end(), [](const auto& e) { return e.name == "head.out.bias"; }),
                missing.end());
  EXPECT_NE(error_of(serialize_checkpoint(missing)).find("head.out.bias"), std::string::npos);

  auto extra = checkpoint_entries(s.cfg, "stage2", s.model, s.enc);
  extra.push_back({"layer9.bogus", {1}, {0.f}});
  EXPECT_NE(error_of(serialize_checkpoint(extra)).find("layer9.bogus"), std::string::npos);
}
