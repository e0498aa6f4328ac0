#pragma once

// Compression passes over float models: per-block weight quantization,
// sensitivity scanning, MLP channel pruning, block removal and token drop.
// Every pass returns a new model and leaves its input untouched.

#include <set>

#include <json.hpp>

#include "qtk/eval.hpp"

namespace qtk {

inline const std::vector<int> kPrecisionSet{2, 3, 4, 8, 16};

inline void check_block(const Model& m, const BlockId& b) {
  require(b.kind != BlockId::Kind::transformer || b.index < m.blocks.size(), ErrorKind::invalid_argument,
          "unknown block " + b.str() + " (model has " + std::to_string(m.blocks.size()) + " blocks)");
}

// Fake-quantizes (quantize then dequantize) every parameter owned by `block`:
// matrices per output channel, vectors per tensor. 16 bits is the float
// baseline and leaves the model byte-identical.
inline Model quantize_block(const Model& m, const BlockId& block, int bits) {
  require_bits(bits);
  check_block(m, block);
  Model out = m;
  if (bits == kBaselineBits) return out;
  for_each_param(out, [&](const ParamView<float>& p) {
    if (p.owner != block) return;
    switch (p.role) {
      case ParamRole::matrix_cols:
        fake_quantize_per_channel(p.data, p.shape[0], p.shape[1], bits, ChannelAxis::columns);
        break;
      case ParamRole::matrix_rows:
        fake_quantize_per_channel(p.data, p.shape[0], p.shape[1], bits, ChannelAxis::rows);
        break;
      case ParamRole::vector: fake_quantize_tensor(p.data, bits); break;
    }
  });
  return out;
}

inline Model apply_assignment(const Model& m, const PrecisionAssignment& a) {
  a.validate(m.blocks.size());
  Model out = m;
  for (const auto& [block, bits] : a.bits_by_block) out = quantize_block(out, block, bits);
  return out;
}

enum class ExecMode { fake_quant, integer };

inline ExecMode parse_exec_mode(const std::string& s) {
  if (s == "float") return ExecMode::fake_quant;
  if (s == "int") return ExecMode::integer;
  fail(ErrorKind::invalid_argument, "execution mode must be 'float' or 'int', got '" + s + "'");
}

// Perplexity of a model under a precision assignment. The default path
// evaluates fake-quantized weights in float; the integer path lowers the model
// and needs an activation calibration.
struct AssignmentEvaluator {
  const Model* model;
  CorpusSlice slice;
  ExecMode mode;
  ActivationCalibration calib;

  AssignmentEvaluator(const Model* m, CorpusSlice s, ExecMode mode_ = ExecMode::fake_quant,
                      ActivationCalibration c = {})
      : model(m), slice(std::move(s)), mode(mode_), calib(std::move(c)) {}

  double operator()(const PrecisionAssignment& a) const {
    if (mode == ExecMode::integer) return perplexity(build_int_model(*model, a, calib), slice);
    return perplexity(apply_assignment(*model, a), slice);
  }
};

// ---------------------------------------------------------------- sensitivity

struct SensitivityEntry {
  double metric = 0.0;
  double delta = 0.0;
};

struct SensitivityProfile {
  std::map<std::pair<BlockId, int>, SensitivityEntry> entries;
  std::vector<BlockId> blocks;
  std::vector<int> precisions;
  double baseline = 0.0;
  std::string fingerprint;

  const SensitivityEntry& at(const BlockId& b, int bits) const {
    const auto it = entries.find({b, bits});
    require(it != entries.end(), ErrorKind::invalid_argument,
            "profile has no entry for " + b.str() + " at " + std::to_string(bits) + " bits");
    return it->second;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["metric"] = "perplexity";
    j["baseline"] = baseline;
    j["corpus_fingerprint"] = fingerprint;
    j["precisions"] = precisions;
    j["entries"] = nlohmann::ordered_json::array();
    for (const BlockId& b : blocks)
      for (int bits : precisions) {
        const auto& e = at(b, bits);
        j["entries"].push_back({{"block", b.str()}, {"bits", bits}, {"metric", e.metric}, {"delta", e.delta}});
      }
    return j;
  }

  static SensitivityProfile from_json(const nlohmann::json& j) {
    SensitivityProfile p;
    try {
      p.baseline = j.at("baseline").get<double>();
      p.fingerprint = j.at("corpus_fingerprint").get<std::string>();
      p.precisions = j.at("precisions").get<std::vector<int>>();
      for (const auto& e : j.at("entries")) {
        const BlockId b = BlockId::parse(e.at("block").get<std::string>());
        if (std::find(p.blocks.begin(), p.blocks.end(), b) == p.blocks.end()) p.blocks.push_back(b);
        p.entries[{b, e.at("bits").get<int>()}] = {e.at("metric").get<double>(), e.at("delta").get<double>()};
      }
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::malformed_input, std::string("malformed sensitivity profile: ") + e.what());
    }
    return p;
  }
};

struct MonotonicityReport {
  std::size_t pairs = 0;
  std::vector<std::string> violations;
  // Quantized settings that scored better than the unquantized baseline.
  // Informational: these are noise-level wins, not ordering violations.
  std::vector<std::string> below_baseline;
  double fraction_ok() const { return pairs ? 1.0 - double(violations.size()) / double(pairs) : 1.0; }
};

// Lower bits should never give a better metric. Checked per block over
// adjacent pairs of the quantized precisions; the 16-bit baseline is the
// unquantized reference and is reported separately.
inline MonotonicityReport monotonicity(const SensitivityProfile& p) {
  std::vector<int> bits;
  for (int b : p.precisions)
    if (b < kBaselineBits) bits.push_back(b);
  std::sort(bits.begin(), bits.end());
  MonotonicityReport r;
  for (const BlockId& b : p.blocks) {
    for (std::size_t i = 0; i + 1 < bits.size(); ++i) {
      ++r.pairs;
      const double lo = p.at(b, bits[i]).metric, hi = p.at(b, bits[i + 1]).metric;
      if (lo < hi)
        r.violations.push_back(b.str() + ": " + std::to_string(bits[i]) + "-bit " + std::to_string(lo) +
                               " < " + std::to_string(bits[i + 1]) + "-bit " + std::to_string(hi));
    }
    for (int q : bits)
      if (p.at(b, q).metric < p.baseline)
        r.below_baseline.push_back(b.str() + ": " + std::to_string(q) + "-bit " +
                                   std::to_string(p.at(b, q).metric) + " < baseline " +
                                   std::to_string(p.baseline));
  }
  return r;
}

// One block lowered at a time, all others at the 16-bit baseline.
inline SensitivityProfile sensitivity_scan(const AssignmentEvaluator& eval,
                                           const std::vector<int>& precisions = kPrecisionSet) {
  require(!precisions.empty(), ErrorKind::invalid_argument, "precision set is empty");
  for (int b : precisions) require_bits(b);
  require(!eval.slice.empty(), ErrorKind::invalid_argument, "sensitivity corpus slice is empty");
  const std::size_t n = eval.model->blocks.size();
  SensitivityProfile p;
  p.blocks = assignable_blocks(n);
  p.precisions = precisions;
  p.fingerprint = eval.slice.fingerprint();
  const PrecisionAssignment base = PrecisionAssignment::uniform(n, kBaselineBits);
  p.baseline = eval(base);

  std::vector<std::pair<BlockId, int>> grid;
  for (const BlockId& b : p.blocks)
    for (int bits : precisions) grid.emplace_back(b, bits);
  std::vector<double> metric(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    PrecisionAssignment a = base;
    a.bits_by_block[grid[i].first] = grid[i].second;
    try {
      metric[i] = eval(a);
    } catch (const Error& e) {
      fail(e.kind(), "evaluating " + grid[i].first.str() + " at " + std::to_string(grid[i].second) +
                         " bits: " + e.what());
    }
  }
  for (std::size_t i = 0; i < grid.size(); ++i) p.entries[grid[i]] = {metric[i], metric[i] - p.baseline};
  return p;
}

// ---------------------------------------------------------------- structure

// Hidden channels of block `block` ranked by the L2 norm of their fc1 column
// and fc2 row together; the top `keep` survive in their original order.
inline std::vector<std::size_t> mlp_channel_ranking(const TransformerBlock& b) {
  const std::size_t f = b.d_ff(), d = b.fc1.w.rows;
  std::vector<double> norm(f, 0.0);
  for (std::size_t c = 0; c < f; ++c) {
    for (std::size_t r = 0; r < d; ++r) norm[c] += double(b.fc1.w.at(r, c)) * b.fc1.w.at(r, c);
    for (std::size_t j = 0; j < d; ++j) norm[c] += double(b.fc2.w.at(c, j)) * b.fc2.w.at(c, j);
  }
  std::vector<std::size_t> order(f);
  for (std::size_t i = 0; i < f; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) { return norm[a] > norm[c]; });
  return order;
}

inline Model prune_mlp_channels(const Model& m, std::size_t block, std::size_t keep) {
  check_block(m, BlockId::transformer(block));
  const TransformerBlock& b = m.blocks[block];
  const std::size_t f = b.d_ff(), d = m.config.d_model;
  require(keep >= 1 && keep <= f, ErrorKind::invalid_argument,
          "keep must be in [1, " + std::to_string(f) + "], got " + std::to_string(keep));
  Model out = m;
  if (keep == f) return out;
  std::vector<std::size_t> kept = mlp_channel_ranking(b);
  kept.resize(keep);
  std::sort(kept.begin(), kept.end());
  TransformerBlock& nb = out.blocks[block];
  nb.fc1 = Linear{Matrix(d, keep), std::vector<float>(keep)};
  nb.fc2 = Linear{Matrix(keep, d), b.fc2.b};
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t c = kept[i];
    for (std::size_t r = 0; r < d; ++r) nb.fc1.w.at(r, i) = b.fc1.w.at(r, c);
    nb.fc1.b[i] = b.fc1.b[c];
    for (std::size_t j = 0; j < d; ++j) nb.fc2.w.at(i, j) = b.fc2.w.at(c, j);
  }
  return out;
}

inline Model remove_blocks(const Model& m, const std::set<std::size_t>& indices) {
  for (std::size_t i : indices) check_block(m, BlockId::transformer(i));
  require(indices.size() < m.blocks.size(), ErrorKind::constraint_violation,
          "cannot remove every transformer block");
  Model out = m;
  if (indices.empty()) return out;
  out.blocks.clear();
  for (std::size_t i = 0; i < m.blocks.size(); ++i)
    if (!indices.count(i)) out.blocks.push_back(m.blocks[i]);
  out.config.n_blocks = out.blocks.size();
  if (out.token_drop && out.token_drop->after_block >= out.blocks.size()) out.token_drop.reset();
  return out;
}

// Keeps ceil(keep_fraction * t) positions after block `after_block`, ranked by
// attention received there; the last position always survives. keep = 1 is
// recorded as no plan at all.
inline Model token_drop(const Model& m, double keep_fraction, std::size_t after_block) {
  require(keep_fraction > 0.0 && keep_fraction <= 1.0, ErrorKind::invalid_argument,
          "keep_fraction must be in (0, 1]");
  check_block(m, BlockId::transformer(after_block));
  Model out = m;
  if (keep_fraction == 1.0) {
    out.token_drop.reset();
    return out;
  }
  require(after_block + 1 < m.blocks.size(), ErrorKind::invalid_argument,
          "token drop after the last block has no downstream block to save");
  out.token_drop = TokenDropConfig{after_block, keep_fraction};
  return out;
}

struct StructuralPlan {
  std::set<std::size_t> blocks_removed;
  std::map<std::size_t, std::size_t> mlp_channels_kept;  // original block index -> keep
  std::optional<TokenDropConfig> token_drop;             // after_block indexes the surviving blocks

  void validate(const Model& m) const {
    for (const auto& [b, keep] : mlp_channels_kept) {
      check_block(m, BlockId::transformer(b));
      require(keep >= 1, ErrorKind::invalid_argument, "MLP keep counts must be >= 1");
    }
    if (token_drop)
      require(token_drop->keep_fraction > 0.0 && token_drop->keep_fraction <= 1.0,
              ErrorKind::invalid_argument, "keep_fraction must be in (0, 1]");
  }

  // Pruning first, then removal, then token drop.
  Model apply(const Model& m) const {
    validate(m);
    Model out = m;
    for (const auto& [b, keep] : mlp_channels_kept) out = prune_mlp_channels(out, b, keep);
    out = remove_blocks(out, blocks_removed);
    if (token_drop) out = qtk::token_drop(out, token_drop->keep_fraction, token_drop->after_block);
    return out;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["blocks_removed"] = std::vector<std::size_t>(blocks_removed.begin(), blocks_removed.end());
    j["mlp_channels_kept"] = nlohmann::ordered_json::object();
    for (const auto& [b, keep] : mlp_channels_kept) j["mlp_channels_kept"][std::to_string(b)] = keep;
    if (token_drop)
      j["token_drop"] = {{"after_block", token_drop->after_block}, {"keep_fraction", token_drop->keep_fraction}};
    else
      j["token_drop"] = nullptr;
    return j;
  }

  static StructuralPlan from_json(const nlohmann::json& j) {
    StructuralPlan p;
    try {
      require(j.is_object(), ErrorKind::malformed_input, "structural plan must be a JSON object");
      if (j.contains("blocks_removed"))
        for (const auto& v : j["blocks_removed"]) p.blocks_removed.insert(v.get<std::size_t>());
      if (j.contains("mlp_channels_kept"))
        for (const auto& [k, v] : j["mlp_channels_kept"].items()) {
          require(!k.empty() && std::all_of(k.begin(), k.end(), ::isdigit), ErrorKind::malformed_input,
                  "mlp_channels_kept keys must be block indices");
          p.mlp_channels_kept[std::stoul(k)] = v.get<std::size_t>();
        }
      if (j.contains("token_drop") && !j["token_drop"].is_null())
        p.token_drop = TokenDropConfig{j["token_drop"].at("after_block").get<std::size_t>(),
                                       j["token_drop"].at("keep_fraction").get<double>()};
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::malformed_input, std::string("malformed structural plan: ") + e.what());
    }
    return p;
  }
};

}  // namespace qtk
