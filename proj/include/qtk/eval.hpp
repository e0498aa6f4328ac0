#pragma once

// Metrics: perplexity, accuracy, agreement, and the profiling harness with
// closed-form MAC accounting.

#include <chrono>
#include <cmath>
#include <functional>
#include <thread>

#include <json.hpp>

#include "qtk/corpus.hpp"
#include "qtk/int_model.hpp"
#include "qtk/model.hpp"

namespace qtk {

// Runs f(0..n-1), splitting the index range across threads. Callers write
// results by index, so the outcome never depends on scheduling.
template <typename F>
void parallel_for(std::size_t n, F&& f, std::size_t threads = 0) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) f(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Logits of one sequence as a float matrix.
using LogitsFn = std::function<Matrix(std::span<const int>)>;

inline LogitsFn float_logits(const Model& m) {
  return [&m](std::span<const int> t) { return forward_float(m, t); };
}

inline LogitsFn int_logits(const IntModel& m) {
  return [&m](std::span<const int> t) {
    const IntTensor l = forward_int(m, t);
    Matrix out(l.rows(), l.cols());
    out.data = dequantize(l);
    return out;
  };
}

// -log softmax(row)[target], in double.
inline double token_nll(std::span<const float> row, std::size_t target) {
  double mx = row[0];
  for (float v : row) mx = std::max(mx, double(v));
  double s = 0.0;
  for (float v : row) s += std::exp(double(v) - mx);
  return std::log(s) + mx - double(row[target]);
}

struct NllTotal {
  double sum = 0.0;
  std::size_t count = 0;
};

inline NllTotal total_nll(const LogitsFn& logits, const CorpusSlice& slice) {
  require(!slice.empty(), ErrorKind::invalid_argument, "evaluation slice is empty");
  std::vector<NllTotal> per(slice.sequences.size());
  parallel_for(per.size(), [&](std::size_t i) {
    const auto& seq = slice.sequences[i];
    require(seq.size() >= 2, ErrorKind::invalid_argument, "sequences need at least 2 tokens");
    const Matrix l = logits(seq);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      per[i].sum += token_nll(l.row(t), std::size_t(seq[t + 1]));
      ++per[i].count;
    }
  });
  NllTotal total;
  for (const auto& p : per) {
    total.sum += p.sum;
    total.count += p.count;
  }
  return total;
}

// exp(mean next-token negative log-likelihood).
inline double perplexity(const LogitsFn& logits, const CorpusSlice& slice) {
  const NllTotal t = total_nll(logits, slice);
  return std::exp(t.sum / double(t.count));
}

inline double perplexity(const Model& m, const CorpusSlice& slice) {
  return perplexity(float_logits(m), slice);
}

inline double perplexity(const IntModel& m, const CorpusSlice& slice) {
  return perplexity(int_logits(m), slice);
}

// Next-token argmax at every position.
inline std::vector<std::vector<int>> predictions(const LogitsFn& logits, const CorpusSlice& slice) {
  std::vector<std::vector<int>> out(slice.sequences.size());
  parallel_for(out.size(), [&](std::size_t i) {
    const Matrix l = logits(slice.sequences[i]);
    for (std::size_t r = 0; r < l.rows; ++r) out[i].push_back(int(row_argmax(l, r)));
  });
  return out;
}

inline double accuracy(std::span<const int> predicted, std::span<const int> labels) {
  require(!labels.empty(), ErrorKind::invalid_argument, "accuracy over an empty set");
  require(predicted.size() == labels.size(), ErrorKind::shape_mismatch,
          "prediction and label counts differ");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return double(hit) / double(labels.size());
}

// Fraction of positions where both models pick the same next token.
inline double agreement(const LogitsFn& a, const LogitsFn& b, const CorpusSlice& slice) {
  require(!slice.empty(), ErrorKind::invalid_argument, "agreement over an empty slice");
  const auto pa = predictions(a, slice), pb = predictions(b, slice);
  std::size_t same = 0, total = 0;
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::size_t t = 0; t < pa[i].size(); ++t) {
      same += pa[i][t] == pb[i][t];
      ++total;
    }
  return double(same) / double(total);
}

// ---------------------------------------------------------------- MAC accounting

// Multiply-accumulates of one transformer block over n rows with full causal
// attention among them: q/k/v/o projections, the MLP, and scores plus P·V.
inline uint64_t block_macs(std::size_t n, std::size_t d, std::size_t d_ff) {
  return 4ull * n * d * d + 2ull * n * d * d_ff + uint64_t(d) * n * (n + 1);
}

struct MacBreakdown {
  std::vector<uint64_t> blocks;
  uint64_t head = 0;
  uint64_t total() const {
    uint64_t s = head;
    for (uint64_t b : blocks) s += b;
    return s;
  }
};

// Closed-form MACs of one forward pass over `t` tokens, honoring removed
// blocks, per-block MLP widths and the token-drop plan.
inline MacBreakdown analytic_macs(const Model& m, std::size_t t) {
  MacBreakdown out;
  const std::size_t d = m.config.d_model;
  std::size_t rows = t;
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    out.blocks.push_back(block_macs(rows, d, m.blocks[i].d_ff()));
    if (has_active_token_drop(m) && i == m.token_drop->after_block)
      rows = std::min<std::size_t>(
          t, std::max<std::size_t>(1, std::size_t(std::ceil(m.token_drop->keep_fraction * double(t) - 1e-12))));
  }
  out.head = uint64_t(t) * d * m.config.vocab_size;
  return out;
}

struct EvalReport {
  std::string metric = "perplexity";
  double value = 0.0;
  std::string fingerprint;
  std::string descriptor;
  uint64_t macs = 0;           // analytic, summed over the slice
  OpCounter ops;               // instrumented
  double wall_clock_ms = 0.0;  // reported only

  nlohmann::ordered_json to_json() const {
    return {{"metric", metric},
            {"value", value},
            {"corpus_fingerprint", fingerprint},
            {"descriptor", descriptor},
            {"macs", macs},
            {"ops",
             {{"macs", ops.macs},
              {"matmuls", ops.matmuls},
              {"attentions", ops.attentions},
              {"layernorms", ops.layernorms},
              {"gelus", ops.gelus},
              {"adds", ops.adds}}},
            {"wall_clock_ms", wall_clock_ms}};
  }
};

inline std::string describe(const Model& m) {
  std::string s = "blocks=" + std::to_string(m.blocks.size()) + " d_ff=[";
  for (std::size_t i = 0; i < m.blocks.size(); ++i) s += (i ? "," : "") + std::to_string(m.blocks[i].d_ff());
  s += "]";
  if (m.token_drop)
    s += " token_drop=" + std::to_string(m.token_drop->after_block) + ":" +
         std::to_string(m.token_drop->keep_fraction);
  return s;
}

// Perplexity plus analytic and instrumented op counts and a wall-clock figure
// (one untimed warmup pass, then a timed pass).
inline EvalReport profile_run(const Model& m, const CorpusSlice& slice, const std::string& descriptor = {}) {
  require(!slice.empty(), ErrorKind::invalid_argument, "profiling slice is empty");
  EvalReport r;
  r.fingerprint = slice.fingerprint();
  r.descriptor = descriptor.empty() ? describe(m) : descriptor;
  for (const auto& seq : slice.sequences) r.macs += analytic_macs(m, seq.size()).total();
  for (const auto& seq : slice.sequences) forward_float(m, seq, nullptr, &r.ops);
  const auto t0 = std::chrono::steady_clock::now();
  r.value = perplexity(m, slice);
  r.wall_clock_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

}  // namespace qtk
