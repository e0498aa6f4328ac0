#pragma once

// Memory/quality exploration over precision assignments: exhaustive
// enumeration for small grids, profile-guided greedy descent otherwise, and
// Pareto front extraction.

#include <sstream>

#include "qtk/compress.hpp"

namespace qtk {

inline constexpr std::size_t kExhaustiveCap = 4096;

// Weight bytes under `a`: every parameter at its owning block's bit-width,
// summed in bits and rounded up to whole bytes once.
inline uint64_t memory_footprint(const Model& m, const PrecisionAssignment& a) {
  a.validate(m.blocks.size());
  uint64_t bits = 0;
  for_each_param(m, [&](const ParamView<const float>& p) { bits += uint64_t(p.data.size()) * a.bits(p.owner); });
  return (bits + 7) / 8;
}

inline uint64_t baseline_footprint(const Model& m) {
  return memory_footprint(m, PrecisionAssignment::uniform(m.blocks.size(), kBaselineBits));
}

// Every combination of `precisions` over `blocks`, the remaining assignable
// blocks fixed at `fixed_bits`. Odometer order: the last listed block varies
// fastest, precisions in the order given.
inline std::vector<PrecisionAssignment> enumerate_assignments(std::size_t n_blocks,
                                                              const std::vector<BlockId>& blocks,
                                                              const std::vector<int>& precisions,
                                                              int fixed_bits = kBaselineBits,
                                                              std::size_t cap = kExhaustiveCap) {
  require(!precisions.empty(), ErrorKind::invalid_argument, "precision set is empty");
  for (int b : precisions) require_bits(b);
  require(std::set<int>(precisions.begin(), precisions.end()).size() == precisions.size(),
          ErrorKind::invalid_argument, "precision set has duplicates");
  require(std::set<BlockId>(blocks.begin(), blocks.end()).size() == blocks.size(),
          ErrorKind::invalid_argument, "block list has duplicates");
  double count = 1.0;
  for (std::size_t i = 0; i < blocks.size(); ++i) count *= double(precisions.size());
  require(count <= double(cap), ErrorKind::constraint_violation,
          "grid of " + std::to_string(uint64_t(count)) + " assignments exceeds the exhaustive cap of " +
              std::to_string(cap) + "; use the greedy search instead");
  const PrecisionAssignment base = PrecisionAssignment::uniform(n_blocks, fixed_bits);
  for (const BlockId& b : blocks) base.bits(b);

  std::vector<PrecisionAssignment> out;
  std::vector<std::size_t> digit(blocks.size(), 0);
  while (true) {
    PrecisionAssignment a = base;
    for (std::size_t i = 0; i < blocks.size(); ++i) a.bits_by_block[blocks[i]] = precisions[digit[i]];
    out.push_back(std::move(a));
    std::size_t i = blocks.size();
    while (i > 0 && ++digit[i - 1] == precisions.size()) digit[--i] = 0;
    if (i == 0) break;
  }
  return out;
}

struct ParetoPoint {
  PrecisionAssignment assignment;
  uint64_t memory_bytes = 0;
  double memory_saving = 0.0;
  double metric = 0.0;
  bool on_front = false;
  bool flagged_dominated = false;  // dominated by a point outside this report
};

// a dominates b: no worse on both axes and strictly better on one.
inline bool dominates(const ParetoPoint& a, const ParetoPoint& b) {
  return a.memory_bytes <= b.memory_bytes && a.metric <= b.metric &&
         (a.memory_bytes < b.memory_bytes || a.metric < b.metric);
}

// Indices of the non-dominated points, sorted by memory then metric then
// input order. Exact ties all stay on the front.
inline std::vector<std::size_t> pareto_front(const std::vector<ParetoPoint>& points) {
  require(!points.empty(), ErrorKind::invalid_argument, "pareto front of an empty point set");
  std::vector<std::size_t> order(points.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (points[a].memory_bytes != points[b].memory_bytes) return points[a].memory_bytes < points[b].memory_bytes;
    return points[a].metric < points[b].metric;
  });
  // Sweep by increasing memory: a point survives if its metric is below every
  // metric seen at strictly smaller memory, and ties the best at equal memory.
  std::vector<std::size_t> front;
  double best_smaller = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    const uint64_t mem = points[order[i]].memory_bytes;
    while (j < order.size() && points[order[j]].memory_bytes == mem) ++j;
    const double group_best = points[order[i]].metric;
    if (group_best < best_smaller)
      for (std::size_t k = i; k < j && points[order[k]].metric == group_best; ++k) front.push_back(order[k]);
    best_smaller = std::min(best_smaller, group_best);
    i = j;
  }
  return front;
}

struct ParetoReport {
  std::string strategy;
  std::string fingerprint;
  uint64_t baseline_bytes = 0;
  ParetoPoint baseline;
  std::vector<ParetoPoint> points;  // in evaluation order
  std::vector<std::size_t> front;   // indices into points, by memory

  nlohmann::ordered_json point_json(const ParetoPoint& p) const {
    return {{"assignment", p.assignment.str()},   {"memory_bytes", p.memory_bytes},
            {"memory_saving", p.memory_saving},   {"metric", p.metric},
            {"on_front", p.on_front},             {"flagged_dominated", p.flagged_dominated}};
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["strategy"] = strategy;
    j["corpus_fingerprint"] = fingerprint;
    j["baseline_bytes"] = baseline_bytes;
    j["baseline"] = point_json(baseline);
    j["points"] = nlohmann::ordered_json::array();
    for (const auto& p : points) j["points"].push_back(point_json(p));
    j["front"] = nlohmann::ordered_json::array();
    for (std::size_t i : front) j["front"].push_back(point_json(points[i]));
    return j;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "assignment,memory_bytes,memory_saving,metric,on_front\n";
    for (const auto& p : points)
      os << '"' << p.assignment.str() << "\"," << p.memory_bytes << ',' << p.memory_saving << ','
         << p.metric << ',' << (p.on_front ? "true" : "false") << '\n';
    return os.str();
  }
};

inline ParetoPoint make_point(const Model& m, const PrecisionAssignment& a, double metric) {
  ParetoPoint p;
  p.assignment = a;
  p.memory_bytes = memory_footprint(m, a);
  p.memory_saving = 1.0 - double(p.memory_bytes) / double(baseline_footprint(m));
  p.metric = metric;
  return p;
}

inline void finalize(ParetoReport& r) {
  r.front = pareto_front(r.points);
  for (auto& p : r.points) p.on_front = false;
  for (std::size_t i : r.front) r.points[i].on_front = true;
}

inline ParetoReport explore_exhaustive(const AssignmentEvaluator& eval, const std::vector<BlockId>& blocks,
                                       const std::vector<int>& precisions) {
  const Model& m = *eval.model;
  const auto grid = enumerate_assignments(m.blocks.size(), blocks, precisions);
  std::vector<double> metric(grid.size());
  parallel_for(grid.size(), [&](std::size_t i) { metric[i] = eval(grid[i]); });
  ParetoReport r;
  r.strategy = "exhaustive";
  r.fingerprint = eval.slice.fingerprint();
  r.baseline_bytes = baseline_footprint(m);
  const PrecisionAssignment base = PrecisionAssignment::uniform(m.blocks.size(), kBaselineBits);
  r.baseline = make_point(m, base, eval(base));
  for (std::size_t i = 0; i < grid.size(); ++i) r.points.push_back(make_point(m, grid[i], metric[i]));
  finalize(r);
  return r;
}

struct GreedyOptions {
  std::size_t budget = 16;  // evaluated steps after the baseline
  std::optional<double> quality_floor;  // stop once a step's metric exceeds this
};

// Starts at all-16-bit and repeatedly lowers one block to its next lower
// precision, choosing the step with the best memory saved per predicted metric
// increase (from the sensitivity profile). Each chosen step is evaluated.
inline ParetoReport greedy_search(const AssignmentEvaluator& eval, const SensitivityProfile& profile,
                                  const std::vector<BlockId>& blocks, const GreedyOptions& opt) {
  const Model& m = *eval.model;
  std::vector<int> precisions = profile.precisions;
  if (std::find(precisions.begin(), precisions.end(), kBaselineBits) == precisions.end())
    precisions.push_back(kBaselineBits);
  std::sort(precisions.begin(), precisions.end());

  ParetoReport r;
  r.strategy = "greedy";
  r.fingerprint = eval.slice.fingerprint();
  r.baseline_bytes = baseline_footprint(m);
  PrecisionAssignment cur = PrecisionAssignment::uniform(m.blocks.size(), kBaselineBits);
  r.baseline = make_point(m, cur, eval(cur));
  r.points.push_back(r.baseline);

  auto predicted = [&](const BlockId& b, int bits) {
    return bits == kBaselineBits ? 0.0 : profile.at(b, bits).delta;
  };
  for (std::size_t step = 0; step < opt.budget; ++step) {
    std::optional<std::pair<BlockId, int>> best;
    double best_score = 0.0;
    uint64_t best_saved = 0;
    for (const BlockId& b : blocks) {
      const int now = cur.bits(b);
      const auto it = std::find(precisions.begin(), precisions.end(), now);
      if (it == precisions.begin()) continue;
      const int next = *(it - 1);
      const uint64_t saved = uint64_t(param_count(m, b)) * uint64_t(now - next);
      const double cost = std::max(predicted(b, next) - predicted(b, now), 1e-12);
      const double score = double(saved) / cost;
      if (!best || score > best_score || (score == best_score && saved > best_saved)) {
        best = std::make_pair(b, next);
        best_score = score;
        best_saved = saved;
      }
    }
    if (!best) break;
    cur.bits_by_block[best->first] = best->second;
    r.points.push_back(make_point(m, cur, eval(cur)));
    if (opt.quality_floor && r.points.back().metric > *opt.quality_floor) break;
  }
  finalize(r);
  return r;
}

// Marks front points dominated by any point of `reference` (for example an
// exhaustive sweep of the same grid). Returns how many were flagged.
inline std::size_t flag_dominated(ParetoReport& r, const std::vector<ParetoPoint>& reference) {
  std::size_t n = 0;
  for (std::size_t i : r.front) {
    ParetoPoint& p = r.points[i];
    p.flagged_dominated = std::any_of(reference.begin(), reference.end(),
                                      [&](const ParetoPoint& q) { return dominates(q, p); });
    n += p.flagged_dominated;
  }
  return n;
}

// Front point with the largest saving whose metric stays within the allowed
// relative degradation of the baseline.
inline ParetoPoint select_under_constraint(const ParetoReport& r, double max_degradation) {
  require(!r.front.empty(), ErrorKind::invalid_argument, "report has an empty front");
  require(max_degradation >= 0.0, ErrorKind::invalid_argument, "degradation allowance must be >= 0");
  const double limit = r.baseline.metric * (1.0 + max_degradation);
  const ParetoPoint* best = nullptr;
  for (std::size_t i : r.front) {
    const ParetoPoint& p = r.points[i];
    if (p.metric <= limit && (!best || p.memory_saving > best->memory_saving)) best = &p;
  }
  require(best != nullptr, ErrorKind::constraint_violation,
          "no front point within " + std::to_string(max_degradation * 100) + "% of the baseline metric");
  return *best;
}

}  // namespace qtk
