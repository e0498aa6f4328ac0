#pragma once

// Checkpoint file: 8-byte little-endian header length, a JSON header
// (config + tensor directory), then contiguous little-endian float32 blobs.
// Directory offsets are relative to the start of the payload.

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "qtk/io.hpp"
#include "qtk/model.hpp"

namespace qtk {

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_blocks", c.n_blocks}, {"d_model", c.d_model},   {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  auto get = [&](const char* key) -> std::size_t {
    require(j.contains(key) && j[key].is_number_unsigned(), ErrorKind::malformed_input,
            std::string("checkpoint config field '") + key + "' missing or not a count");
    return j[key].get<std::size_t>();
  };
  c.n_blocks = get("n_blocks");
  c.d_model = get("d_model");
  c.n_heads = get("n_heads");
  c.d_ff = get("d_ff");
  c.vocab_size = get("vocab_size");
  c.max_seq_len = get("max_seq_len");
  return c;
}

namespace detail {

inline void put_u64_le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline uint64_t get_u64_le(const std::string& s) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | uint64_t(static_cast<unsigned char>(s[std::size_t(i)]));
  return v;
}

inline void append_f32_le(std::string& out, std::span<const float> values) {
  const std::size_t at = out.size();
  out.resize(at + values.size() * 4);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + at, values.data(), values.size() * 4);
  } else {
    for (std::size_t i = 0; i < values.size(); ++i) {
      const auto bits = std::bit_cast<uint32_t>(values[i]);
      for (int b = 0; b < 4; ++b) out[at + i * 4 + std::size_t(b)] = char((bits >> (8 * b)) & 0xff);
    }
  }
}

inline void read_f32_le(const char* src, std::span<float> dst) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst.data(), src, dst.size() * 4);
  } else {
    for (std::size_t i = 0; i < dst.size(); ++i) {
      uint32_t bits = 0;
      for (int b = 3; b >= 0; --b)
        bits = (bits << 8) | static_cast<unsigned char>(src[i * 4 + std::size_t(b)]);
      dst[i] = std::bit_cast<float>(bits);
    }
  }
}

}  // namespace detail

inline std::string serialize_checkpoint(const Model& m) {
  nlohmann::json header;
  header["format"] = "qtk-checkpoint";
  header["version"] = 1;
  header["config"] = config_to_json(m.config);
  std::vector<std::size_t> dff;
  for (const auto& b : m.blocks) dff.push_back(b.d_ff());
  header["block_d_ff"] = dff;
  header["token_drop"] = m.token_drop ? nlohmann::json{{"after_block", m.token_drop->after_block},
                                                       {"keep_fraction", m.token_drop->keep_fraction}}
                                      : nlohmann::json(nullptr);
  nlohmann::json dir = nlohmann::json::array();
  std::string payload;
  for_each_param(m, [&](const ParamView<const float>& p) {
    dir.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", payload.size()}, {"dtype", "f32"}});
    detail::append_f32_le(payload, p.data);
  });
  header["tensors"] = dir;
  const std::string text = header.dump();
  std::string out;
  detail::put_u64_le(out, text.size());
  out += text;
  out += payload;
  return out;
}

inline void save_checkpoint(const Model& m, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(m));
}

inline Model deserialize_checkpoint(const std::string& bytes) {
  require(bytes.size() >= 8, ErrorKind::malformed_input, "checkpoint shorter than its length prefix");
  const uint64_t hlen = detail::get_u64_le(bytes);
  require(hlen <= bytes.size() - 8, ErrorKind::malformed_input,
          "checkpoint header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + std::ptrdiff_t(hlen));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::malformed_input, std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  require(header.is_object() && header.value("format", "") == "qtk-checkpoint",
          ErrorKind::malformed_input, "not a qtk checkpoint header");
  require(header.contains("config"), ErrorKind::malformed_input, "checkpoint header lacks config");
  const ModelConfig cfg = config_from_json(header["config"]);
  std::vector<std::size_t> dff;
  if (header.contains("block_d_ff")) dff = header["block_d_ff"].get<std::vector<std::size_t>>();
  Model m = make_model(cfg, dff);
  if (header.contains("token_drop") && !header["token_drop"].is_null()) {
    const auto& td = header["token_drop"];
    m.token_drop = TokenDropConfig{td.at("after_block").get<std::size_t>(),
                                   td.at("keep_fraction").get<double>()};
  }

  require(header.contains("tensors") && header["tensors"].is_array(), ErrorKind::malformed_input,
          "checkpoint header lacks a tensor directory");
  struct Entry {
    std::vector<std::size_t> shape;
    uint64_t offset;
    uint64_t bytes;
  };
  std::map<std::string, Entry> dir;
  for (const auto& t : header["tensors"]) {
    const std::string name = t.at("name").get<std::string>();
    require(t.value("dtype", "") == "f32", ErrorKind::malformed_input,
            "tensor '" + name + "' has unsupported dtype");
    Entry e{t.at("shape").get<std::vector<std::size_t>>(), t.at("offset").get<uint64_t>(), 4};
    for (std::size_t s : e.shape) e.bytes *= s;
    require(dir.emplace(name, e).second, ErrorKind::malformed_input,
            "tensor '" + name + "' listed more than once");
  }

  std::vector<std::pair<uint64_t, uint64_t>> spans;
  for (const auto& [name, e] : dir) spans.emplace_back(e.offset, e.offset + e.bytes);
  std::sort(spans.begin(), spans.end());
  for (std::size_t i = 1; i < spans.size(); ++i)
    require(spans[i].first >= spans[i - 1].second, ErrorKind::malformed_input,
            "tensor directory has overlapping offsets");

  const uint64_t payload_at = 8 + hlen;
  const uint64_t payload_size = bytes.size() - payload_at;
  std::size_t seen = 0;
  for_each_param(m, [&](const ParamView<float>& p) {
    const auto it = dir.find(p.name);
    require(it != dir.end(), ErrorKind::malformed_input, "checkpoint is missing tensor '" + p.name + "'");
    const Entry& e = it->second;
    require(e.shape == p.shape, ErrorKind::shape_mismatch,
            "tensor '" + p.name + "' shape differs from the configured architecture");
    require(e.offset + e.bytes <= payload_size, ErrorKind::malformed_input,
            "truncated payload: tensor '" + p.name + "' extends past end of file");
    detail::read_f32_le(bytes.data() + payload_at + e.offset, p.data);
    ++seen;
  });
  require(seen == dir.size(), ErrorKind::malformed_input,
          "checkpoint lists tensors not present in the architecture");
  return m;
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace qtk
