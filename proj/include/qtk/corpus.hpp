#pragma once

// Byte-level corpus handling and the pinned evaluation slices.

#include <cstdlib>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qtk/error.hpp"
#include "qtk/io.hpp"

namespace qtk {

inline std::vector<int> tokenize(const std::string& text) {
  std::vector<int> out(text.size());
  for (std::size_t i = 0; i < text.size(); ++i) out[i] = static_cast<unsigned char>(text[i]);
  return out;
}

inline std::string detokenize(std::span<const int> tokens) {
  std::string s;
  for (int t : tokens) s.push_back(static_cast<char>(t));
  return s;
}

inline std::vector<int> load_corpus(const std::filesystem::path& path) {
  auto tokens = tokenize(read_file(path));
  require(!tokens.empty(), ErrorKind::invalid_argument, "corpus " + path.string() + " is empty");
  return tokens;
}

struct CorpusSlice {
  std::vector<std::vector<int>> sequences;

  bool empty() const { return sequences.empty(); }
  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.size();
    return n;
  }

  // Content hash of the tokenized slice (sequence boundaries included).
  std::string fingerprint() const {
    uint64_t h = fnv1a(nullptr, 0);
    for (const auto& s : sequences) {
      const uint64_t n = s.size();
      h = fnv1a(&n, sizeof n, h);
      for (int t : s) {
        const auto b = static_cast<unsigned char>(t);
        h = fnv1a(&b, 1, h);
      }
    }
    return hex64(h);
  }
};

inline CorpusSlice make_slice(std::span<const int> tokens, std::size_t offset, std::size_t n_seqs,
                              std::size_t seq_len) {
  require(seq_len >= 2, ErrorKind::invalid_argument, "slice sequences need at least 2 tokens");
  require(offset + n_seqs * seq_len <= tokens.size(), ErrorKind::invalid_argument,
          "corpus too small for the requested slice");
  CorpusSlice s;
  for (std::size_t i = 0; i < n_seqs; ++i) {
    const auto* b = tokens.data() + offset + i * seq_len;
    s.sequences.emplace_back(b, b + seq_len);
  }
  return s;
}

// Pinned layout: the last 10% of the corpus is held out. Validation sequences
// start at the held-out boundary; calibration sequences end at it.
struct CorpusSplit {
  std::size_t train_end = 0;

  explicit CorpusSplit(std::size_t n_tokens) : train_end(n_tokens - n_tokens / 10) {}
};

inline constexpr std::size_t kValidationSeqs = 32;
inline constexpr std::size_t kCalibrationSeqs = 64;

inline CorpusSlice validation_slice(std::span<const int> tokens, std::size_t seq_len,
                                    std::size_t n_seqs = kValidationSeqs) {
  return make_slice(tokens, CorpusSplit(tokens.size()).train_end, n_seqs, seq_len);
}

inline CorpusSlice calibration_slice(std::span<const int> tokens, std::size_t seq_len,
                                     std::size_t n_seqs = kCalibrationSeqs) {
  const std::size_t end = CorpusSplit(tokens.size()).train_end;
  require(end >= n_seqs * seq_len, ErrorKind::invalid_argument, "corpus too small for calibration");
  return make_slice(tokens, end - n_seqs * seq_len, n_seqs, seq_len);
}

// Corpus path default: $QTK_CORPUS_DIR/corpus.txt when set.
inline std::filesystem::path default_corpus_path() {
  if (const char* dir = std::getenv("QTK_CORPUS_DIR")) return std::filesystem::path(dir) / "corpus.txt";
  return "data/corpus.txt";
}

}  // namespace qtk
