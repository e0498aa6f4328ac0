#pragma once

#include <filesystem>

#include "qtk/checkpoint.hpp"
#include "qtk/corpus.hpp"
#include "qtk/model.hpp"

namespace testfx {

inline std::filesystem::path source_dir() { return QTK_SOURCE_DIR; }

inline const std::vector<int>& corpus() {
  static const std::vector<int> tokens = qtk::load_corpus(source_dir() / "data" / "corpus.txt");
  return tokens;
}

inline const qtk::Model& fixture(const std::string& name) {
  static std::map<std::string, qtk::Model> cache;
  auto it = cache.find(name);
  if (it == cache.end())
    it = cache.emplace(name, qtk::load_checkpoint(source_dir() / "fixtures" / (name + ".qtk"))).first;
  return it->second;
}

inline const qtk::Model& target() { return fixture("target"); }
inline const qtk::Model& draft() { return fixture("draft"); }

inline qtk::CorpusSlice validation() { return qtk::validation_slice(corpus(), target().config.max_seq_len); }
inline qtk::CorpusSlice calibration() { return qtk::calibration_slice(corpus(), target().config.max_seq_len); }

// Small random model for fast structural tests.
inline qtk::ModelConfig tiny_config(std::size_t n_blocks = 2) {
  return qtk::ModelConfig{n_blocks, 32, 2, 64, 256, 32};
}

inline qtk::Model tiny_model(uint64_t seed = 5, std::size_t n_blocks = 2) {
  qtk::Model m = qtk::init_random(tiny_config(n_blocks), seed);
  // Non-trivial norms and biases so every parameter matters.
  std::mt19937_64 rng(seed + 1);
  std::normal_distribution<float> dist(0.0f, 0.1f);
  qtk::for_each_param(m, [&](const qtk::ParamView<float>& p) {
    if (p.role != qtk::ParamRole::vector) return;
    for (float& v : p.data) v += dist(rng);
  });
  return m;
}

inline std::vector<int> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab = 256) {
  std::uniform_int_distribution<int> d(0, int(vocab) - 1);
  std::vector<int> t(n);
  for (int& x : t) x = d(rng);
  return t;
}

}  // namespace testfx
