#pragma once

// Shape-level references for memory, Pareto dominance and MAC counts, written
// from the architecture's tensor list rather than the library's traversal.

#include <cstdint>
#include <vector>

#include "qtk/explore.hpp"

namespace oracle {

// Per-tensor weight count straight from the architecture's shapes.
inline uint64_t memory_bytes(const qtk::ModelConfig& c, const std::vector<std::size_t>& dff,
                             const qtk::PrecisionAssignment& a) {
  using qtk::BlockId;
  const uint64_t d = c.d_model;
  uint64_t bits = (c.vocab_size * d + c.max_seq_len * d) * a.bits(BlockId::embedding());
  for (std::size_t i = 0; i < dff.size(); ++i) {
    const uint64_t f = dff[i];
    const uint64_t tensors[] = {d, d, d * d, d, d * d, d, d * d, d, d * d, d, d, d, d * f, f, f * d, d};
    for (uint64_t n : tensors) bits += n * a.bits(BlockId::transformer(i));
  }
  bits += (d + d + d * c.vocab_size) * a.bits(BlockId::output_head());
  return (bits + 7) / 8;
}

// O(n^2) pairwise dominance check.
inline std::vector<std::size_t> pareto_front(const std::vector<qtk::ParetoPoint>& pts) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < pts.size(); ++j)
      dominated |= pts[j].memory_bytes <= pts[i].memory_bytes && pts[j].metric <= pts[i].metric &&
                   (pts[j].memory_bytes < pts[i].memory_bytes || pts[j].metric < pts[i].metric);
    if (!dominated) out.push_back(i);
  }
  return out;
}

inline uint64_t block_macs(uint64_t n, uint64_t d, uint64_t f) {
  // projections 4·n·d², MLP 2·n·d·f, scores + P·V: 2·d·(1 + 2 + ... + n)
  return 4 * n * d * d + 2 * n * d * f + 2 * d * (n * (n + 1) / 2);
}

}  // namespace oracle
