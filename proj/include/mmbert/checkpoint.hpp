// Binary checkpoint format:
//   "MMBC" | version u32 | entry count u64 |
//   entries: name_len u16, name bytes, rank u8, dims u64[rank], f32 data |
//   CRC32 (u32) of every preceding byte.
// All integers and floats little-endian.
#pragma once

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmbert/config.hpp"
#include "mmbert/model.hpp"
#include "mmbert/optim.hpp"

namespace mmbert {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

namespace detail {

template <typename U>
void put_le(std::vector<unsigned char>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= U(p[i]) << (8 * i);
  return v;
}

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  uLong c = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = uInt(std::min<std::size_t>(n, 1u << 30));
    c = ::crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return std::uint32_t(c);
}

inline std::vector<float> text_to_floats(const std::string& s) {
  return std::vector<float>(s.begin(), s.end());
}

inline std::string floats_to_text(const std::vector<float>& v) {
  std::string s;
  for (float f : v) s.push_back(char(int(f)));
  return s;
}

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const std::vector<CheckpointEntry>& entries,
                                                       std::uint32_t version = kCheckpointVersion) {
  std::vector<unsigned char> out{'M', 'M', 'B', 'C'};
  detail::put_le<std::uint32_t>(out, version);
  detail::put_le<std::uint64_t>(out, entries.size());
  for (const auto& e : entries) {
    if (e.name.size() > 0xffff) throw ArgumentError("checkpoint entry name too long: " + e.name.substr(0, 32));
    if (e.shape.size() > 0xff) throw ArgumentError("checkpoint entry '" + e.name + "' has rank > 255");
    if (numel(e.shape) != e.data.size())
      throw DimensionError("checkpoint entry '" + e.name + "': shape " + shape_str(e.shape) + " does not match " +
                           std::to_string(e.data.size()) + " values");
    detail::put_le<std::uint16_t>(out, std::uint16_t(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(std::uint8_t(e.shape.size()));
    for (auto d : e.shape) detail::put_le<std::uint64_t>(out, d);
    for (float f : e.data) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f));
  }
  detail::put_le<std::uint32_t>(out, detail::crc32_of(out.data(), out.size()));
  return out;
}

/// Validates magic, version and CRC before parsing; structural problems
/// name the entry being read.
inline std::vector<CheckpointEntry> deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
  constexpr std::size_t header = 4 + 4 + 8;
  if (bytes.size() < header + 4) throw FormatError("checkpoint: file too short (" + std::to_string(bytes.size()) + " bytes)");
  if (!std::equal(bytes.begin(), bytes.begin() + 4, "MMBC")) throw FormatError("checkpoint: bad magic bytes");
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 4);
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const std::size_t body = bytes.size() - 4;
  const auto stored = detail::get_le<std::uint32_t>(bytes.data() + body);
  const auto computed = detail::crc32_of(bytes.data(), body);
  if (stored != computed) throw FormatError("checkpoint: CRC mismatch (file truncated or corrupt)");

  const auto count = detail::get_le<std::uint64_t>(bytes.data() + 8);
  std::size_t pos = header;
  std::vector<CheckpointEntry> out;
  std::string last = "<none>";
  auto need = [&](std::size_t n, const std::string& what) {
    if (pos + n > body)
      throw FormatError("checkpoint: entry " + std::to_string(out.size()) + " ('" + what + "', after '" + last +
                        "') runs past the end of the payload");
  };
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    need(2, "?");
    const auto len = detail::get_le<std::uint16_t>(bytes.data() + pos);
    pos += 2;
    need(len, "?");
    e.name.assign(reinterpret_cast<const char*>(bytes.data() + pos), len);
    pos += len;
    need(1, e.name);
    const std::size_t rank = bytes[pos++];
    need(8 * rank, e.name);
    for (std::size_t r = 0; r < rank; ++r, pos += 8) e.shape.push_back(detail::get_le<std::uint64_t>(bytes.data() + pos));
    const std::size_t n = numel(e.shape);
    if (n > (body - pos) / 4) need(body, e.name);
    e.data.resize(n);
    for (std::size_t k = 0; k < n; ++k, pos += 4) e.data[k] = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes.data() + pos));
    last = e.name;
    out.push_back(std::move(e));
  }
  if (pos != body) throw FormatError("checkpoint: " + std::to_string(body - pos) + " trailing bytes after '" + last + "'");
  return out;
}

inline void write_checkpoint_file(const std::string& path, const std::vector<CheckpointEntry>& entries) {
  const auto bytes = serialize_checkpoint(entries);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint '" + path + "'");
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw IoError("failed writing checkpoint '" + path + "'");
}

inline std::vector<CheckpointEntry> read_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint '" + path + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

/// Everything needed to resume or evaluate a run.
struct SavedRun {
  RunConfig cfg;  // model.vocab_size filled in
  std::string stage;
  MMBertModel<float> model;
  PseudoEncoders encoders;
  std::map<std::string, AdamMoments> optimizer;  // empty when not saved
};

inline std::vector<CheckpointEntry> checkpoint_entries(const RunConfig& cfg, const std::string& stage,
                                                       const MMBertModel<float>& model, const PseudoEncoders& enc,
                                                       const AdamW<float>* opt = nullptr) {
  std::vector<CheckpointEntry> out;
  auto text = [&](const std::string& name, const std::string& s) {
    out.push_back({name, {s.size()}, detail::text_to_floats(s)});
  };
  text("meta.config", format_config(cfg));
  text("meta.stage", stage);
  for (const auto& p : model.parameters())
    out.push_back({p.name, p.tensor.shape(), std::vector<float>(p.tensor.values().begin(), p.tensor.values().end())});
  const auto& vt = enc.vision.table();
  out.push_back({"encoder.vision.table", {enc.vision.vocab_size(), enc.vision.dim()}, vt});
  const auto& st = enc.speech.table();
  const std::size_t block = enc.speech.dim() * enc.speech.frames_per_token();
  out.push_back({"encoder.speech.table", {block ? st.size() / block : 0, enc.speech.frames_per_token(), enc.speech.dim()}, st});
  const auto& pm = enc.speech.phoneme_map();
  out.push_back({"encoder.speech.phonemes", {pm.size()}, std::vector<float>(pm.begin(), pm.end())});
  if (opt) {
    for (const auto& [name, m] : opt->state()) {
      out.push_back({"optim." + name + ".m", {m.m.size()}, std::vector<float>(m.m.begin(), m.m.end())});
      out.push_back({"optim." + name + ".v", {m.v.size()}, std::vector<float>(m.v.begin(), m.v.end())});
      out.push_back({"optim." + name + ".step", {1}, {float(m.step)}});
    }
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const RunConfig& cfg, const std::string& stage,
                            const MMBertModel<float>& model, const PseudoEncoders& enc,
                            const AdamW<float>* opt = nullptr) {
  write_checkpoint_file(path, checkpoint_entries(cfg, stage, model, enc, opt));
}

inline SavedRun restore_checkpoint(const std::vector<CheckpointEntry>& entries) {
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries)
    if (!by_name.emplace(e.name, &e).second) throw FormatError("checkpoint: duplicate tensor '" + e.name + "'");
  auto get = [&](const std::string& name) -> const CheckpointEntry& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    return *it->second;
  };

  SavedRun run;
  try {
    run.cfg = parse_config(detail::floats_to_text(get("meta.config").data));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: tensor 'meta.config' is invalid: ") + e.what());
  }
  run.stage = detail::floats_to_text(get("meta.stage").data);
  const auto& word = get("embed.word");
  if (word.shape.size() != 2) throw FormatError("checkpoint: tensor 'embed.word' must be rank 2");
  run.cfg.model.vocab_size = word.shape[0];
  run.model = MMBertModel<float>(run.cfg.model, 0);
  run.model.set_gate_capture(run.cfg.gate_capture);
  std::size_t used = 2;
  for (auto& p : run.model.parameters()) {
    const auto& e = get(p.name);
    if (e.shape != p.tensor.shape())
      throw FormatError("checkpoint: tensor '" + p.name + "' has shape " + shape_str(e.shape) + ", model expects " +
                        shape_str(p.tensor.shape()));
    std::copy(e.data.begin(), e.data.end(), p.tensor.mutable_values().begin());
    ++used;
  }

  const auto& vt = get("encoder.vision.table");
  if (vt.shape.size() != 2) throw FormatError("checkpoint: tensor 'encoder.vision.table' must be rank 2");
  run.encoders.vision = PseudoVisionEncoder::from_table(vt.shape[1], vt.data);
  const auto& st = get("encoder.speech.table");
  const auto& pm = get("encoder.speech.phonemes");
  if (st.shape.size() != 3) throw FormatError("checkpoint: tensor 'encoder.speech.table' must be rank 3");
  std::vector<int> phonemes;
  for (float f : pm.data) phonemes.push_back(int(f));
  try {
    run.encoders.speech = PseudoSpeechEncoder::from_tables(st.shape[2], st.shape[1], phonemes, st.data);
  } catch (const FormatError& e) {
    throw FormatError(std::string("checkpoint: tensor 'encoder.speech.phonemes': ") + e.what());
  }
  used += 3;

  for (const auto& e : entries) {
    if (e.name.rfind("optim.", 0) != 0) continue;
    ++used;
    const auto dot = e.name.rfind('.');
    const std::string param = e.name.substr(6, dot - 6), field = e.name.substr(dot + 1);
    auto& m = run.optimizer[param];
    if (field == "m") m.m.assign(e.data.begin(), e.data.end());
    else if (field == "v") m.v.assign(e.data.begin(), e.data.end());
    else if (field == "step" && e.data.size() == 1) m.step = std::size_t(e.data[0]);
    else throw FormatError("checkpoint: unexpected tensor '" + e.name + "'");
  }
  if (used != entries.size()) {
    const auto params = run.model.parameters();
    for (const auto& e : entries) {
      const bool known = e.name.rfind("meta.", 0) == 0 || e.name.rfind("encoder.", 0) == 0 ||
                         e.name.rfind("optim.", 0) == 0 ||
                         std::any_of(params.begin(), params.end(), [&](const auto& p) { return p.name == e.name; });
      if (!known) throw FormatError("checkpoint: unexpected tensor '" + e.name + "'");
    }
  }
  return run;
}

inline SavedRun load_checkpoint(const std::string& path) { return restore_checkpoint(read_checkpoint_file(path)); }

}  // namespace mmbert
