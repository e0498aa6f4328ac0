#pragma once

// End-to-end commands behind the qtk CLI. Each reads its inputs, runs one
// pipeline stage and writes its artifacts atomically; failures surface as
// qtk::Error with a kind that maps to the process exit code.

#include <cstdio>
#include <random>

#include <json.hpp>

#include "qtk/checkpoint.hpp"
#include "qtk/compress.hpp"
#include "qtk/decode.hpp"
#include "qtk/explore.hpp"
#include "qtk/train.hpp"

namespace qtk {

struct RunConfig {
  std::filesystem::path model;   // checkpoint (target model for decode)
  std::filesystem::path draft;   // decode only
  std::filesystem::path corpus;  // empty: default_corpus_path()
  std::filesystem::path out_dir = "out";
  std::filesystem::path out;     // single-file outputs (make-fixture, compress)
  std::filesystem::path plan;
  std::filesystem::path profile;
  std::filesystem::path calibration;
  std::vector<int> precisions;
  std::string blocks = "all";
  std::string strategy = "auto";
  std::string exec = "float";
  std::string assignment;
  std::string preset = "target";
  std::string mode = "speculative";
  std::string self_test = "max-prob";
  std::vector<std::size_t> remove_blocks;
  std::vector<std::string> prune;  // "block:keep"
  std::optional<double> keep_fraction;
  std::size_t drop_after = 0;
  double max_degradation = 0.06;
  double clip_percentile = 100.0;
  double threshold = 0.7;
  std::size_t gamma = 4;
  std::size_t budget = 32;
  std::size_t steps = 64;
  std::size_t prompts = 100;
  std::size_t prompt_len = 8;
  std::size_t eval_seqs = kValidationSeqs;
  uint64_t seed = 1234;
  std::optional<uint64_t> fixture_seed;
  bool quiet = false;
};

namespace cmd_detail {

inline void note(const RunConfig& rc, const std::string& msg) {
  if (!rc.quiet) std::fprintf(stderr, "%s\n", msg.c_str());
}

inline std::vector<int> corpus(const RunConfig& rc) {
  return load_corpus(rc.corpus.empty() ? default_corpus_path() : rc.corpus);
}

inline Model model(const std::filesystem::path& p, const char* what) {
  require(!p.empty(), ErrorKind::invalid_argument, std::string("--") + what + " is required");
  return load_checkpoint(p);
}

inline void write_json(const std::filesystem::path& p, const nlohmann::ordered_json& j) {
  write_file_atomic(p, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const std::filesystem::path& p, const char* what) {
  const std::string text = read_file(p);
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::malformed_input, std::string(what) + " " + p.string() + " is not valid JSON: " + e.what());
  }
}

inline std::vector<BlockId> explore_blocks(const RunConfig& rc, std::size_t n_blocks) {
  if (rc.blocks == "all") return assignable_blocks(n_blocks);
  if (rc.blocks == "transformer") {
    std::vector<BlockId> out;
    for (std::size_t i = 0; i < n_blocks; ++i) out.push_back(BlockId::transformer(i));
    return out;
  }
  fail(ErrorKind::invalid_argument, "--blocks must be 'all' or 'transformer', got '" + rc.blocks + "'");
}

inline nlohmann::ordered_json calibration_json(const ActivationCalibration& c) {
  nlohmann::ordered_json j;
  j["clip_percentile"] = c.clip_percentile;
  j["corpus_fingerprint"] = c.fingerprint;
  j["ranges"] = nlohmann::ordered_json::array();
  for (const auto& [key, r] : c.ranges)
    j["ranges"].push_back({{"block", key.first}, {"point", to_string(key.second)}, {"min", r.first}, {"max", r.second}});
  return j;
}

inline ActPoint parse_act_point(const std::string& s) {
  for (int i = 0; i <= int(ActPoint::logits); ++i)
    if (s == to_string(ActPoint(i))) return ActPoint(i);
  fail(ErrorKind::malformed_input, "unknown activation point '" + s + "'");
}

inline ActivationCalibration calibration_from_json(const nlohmann::json& j) {
  ActivationCalibration c;
  try {
    c.clip_percentile = j.at("clip_percentile").get<double>();
    c.fingerprint = j.at("corpus_fingerprint").get<std::string>();
    for (const auto& r : j.at("ranges"))
      c.ranges[{r.at("block").get<int>(), parse_act_point(r.at("point").get<std::string>())}] = {
          r.at("min").get<double>(), r.at("max").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::malformed_input, std::string("malformed calibration file: ") + e.what());
  }
  return c;
}

inline AssignmentEvaluator evaluator(const RunConfig& rc, const Model& m, const std::vector<int>& tokens) {
  AssignmentEvaluator e{&m, validation_slice(tokens, m.config.max_seq_len, rc.eval_seqs)};
  e.mode = parse_exec_mode(rc.exec);
  if (e.mode == ExecMode::integer) {
    e.calib = rc.calibration.empty()
                  ? calibrate(m, calibration_slice(tokens, m.config.max_seq_len), rc.clip_percentile)
                  : calibration_from_json(read_json(rc.calibration, "calibration"));
  }
  return e;
}

// Prompts drawn from the held-out part of the corpus at seeded offsets.
inline std::vector<std::vector<int>> prompts(const std::vector<int>& tokens, std::size_t n, std::size_t len,
                                             uint64_t seed) {
  require(len >= 1, ErrorKind::invalid_argument, "--prompt-len must be >= 1");
  const std::size_t start = CorpusSplit(tokens.size()).train_end;
  require(tokens.size() > start + len, ErrorKind::invalid_argument, "corpus too small for prompts");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pos(start, tokens.size() - len);
  std::vector<std::vector<int>> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t p = pos(rng);
    out.emplace_back(tokens.begin() + std::ptrdiff_t(p), tokens.begin() + std::ptrdiff_t(p + len));
  }
  return out;
}

inline StructuralPlan plan_from_flags(const RunConfig& rc) {
  StructuralPlan p;
  if (!rc.plan.empty()) p = StructuralPlan::from_json(read_json(rc.plan, "structural plan"));
  for (std::size_t b : rc.remove_blocks) p.blocks_removed.insert(b);
  for (const std::string& item : rc.prune) {
    const std::size_t colon = item.find(':');
    require(colon != std::string::npos, ErrorKind::invalid_argument, "--prune expects block:keep, got '" + item + "'");
    try {
      p.mlp_channels_kept[std::stoul(item.substr(0, colon))] = std::stoul(item.substr(colon + 1));
    } catch (const std::exception&) {
      fail(ErrorKind::invalid_argument, "--prune expects block:keep, got '" + item + "'");
    }
  }
  if (rc.keep_fraction) p.token_drop = TokenDropConfig{rc.drop_after, *rc.keep_fraction};
  return p;
}

}  // namespace cmd_detail

// Trains a preset fixture and writes its checkpoint.
inline void cmd_make_fixture(const RunConfig& rc) {
  FixtureSpec spec = fixture_preset(rc.preset);
  if (rc.fixture_seed) {
    spec.init_seed = *rc.fixture_seed;
    spec.train.seed = *rc.fixture_seed + 1;
  }
  require(!rc.out.empty(), ErrorKind::invalid_argument, "--out is required");
  const auto tokens = cmd_detail::corpus(rc);
  const Model m = make_fixture(spec, tokens, [&](const TrainLog& l) {
    if (l.step % 100 == 0 || l.step + 1 == spec.train.steps)
      cmd_detail::note(rc, "step " + std::to_string(l.step) + " loss " + std::to_string(l.loss));
  });
  save_checkpoint(m, rc.out);
}

inline void cmd_calibrate(const RunConfig& rc) {
  const Model m = cmd_detail::model(rc.model, "model");
  const auto tokens = cmd_detail::corpus(rc);
  const auto c = calibrate(m, calibration_slice(tokens, m.config.max_seq_len), rc.clip_percentile);
  cmd_detail::write_json(rc.out_dir / "calibration.json", cmd_detail::calibration_json(c));
}

inline void cmd_scan(const RunConfig& rc) {
  const Model m = cmd_detail::model(rc.model, "model");
  const auto tokens = cmd_detail::corpus(rc);
  const auto eval = cmd_detail::evaluator(rc, m, tokens);
  const SensitivityProfile p = sensitivity_scan(eval, rc.precisions.empty() ? kPrecisionSet : rc.precisions);
  const MonotonicityReport mono = monotonicity(p);
  nlohmann::ordered_json j = p.to_json();
  j["monotonicity"] = {{"pairs", mono.pairs}, {"fraction_ok", mono.fraction_ok()}, {"violations", mono.violations},
                       {"below_baseline", mono.below_baseline}};
  cmd_detail::write_json(rc.out_dir / "sensitivity.json", j);
}

// Exhaustive when the grid fits under the cap (or when asked), greedy
// otherwise. Writes pareto.json, pareto.csv and the constrained selection.
inline void cmd_explore(const RunConfig& rc) {
  const Model m = cmd_detail::model(rc.model, "model");
  const auto tokens = cmd_detail::corpus(rc);
  const auto eval = cmd_detail::evaluator(rc, m, tokens);
  const std::vector<int> precisions = rc.precisions.empty() ? std::vector<int>{4, 8, 16} : rc.precisions;
  const std::vector<BlockId> blocks = cmd_detail::explore_blocks(rc, m.blocks.size());
  double grid = 1.0;
  for (std::size_t i = 0; i < blocks.size(); ++i) grid *= double(precisions.size());

  std::string strategy = rc.strategy;
  if (strategy == "auto") strategy = grid <= double(kExhaustiveCap) ? "exhaustive" : "greedy";
  ParetoReport r;
  if (strategy == "exhaustive") {
    r = explore_exhaustive(eval, blocks, precisions);
  } else if (strategy == "greedy") {
    const SensitivityProfile prof =
        rc.profile.empty() ? sensitivity_scan(eval, precisions)
                           : SensitivityProfile::from_json(cmd_detail::read_json(rc.profile, "sensitivity profile"));
    require(prof.fingerprint == eval.slice.fingerprint(), ErrorKind::invalid_argument,
            "sensitivity profile was measured on a different corpus slice");
    r = greedy_search(eval, prof, blocks, GreedyOptions{rc.budget, std::nullopt});
  } else {
    fail(ErrorKind::invalid_argument, "--strategy must be auto, exhaustive or greedy, got '" + rc.strategy + "'");
  }
  nlohmann::ordered_json j = r.to_json();
  try {
    j["selection"] = r.point_json(select_under_constraint(r, rc.max_degradation));
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::constraint_violation) throw;
    j["selection"] = nullptr;
  }
  j["max_degradation"] = rc.max_degradation;
  cmd_detail::write_json(rc.out_dir / "pareto.json", j);
  write_file_atomic(rc.out_dir / "pareto.csv", r.to_csv());
}

// Applies a structural plan (and optionally a precision assignment) and
// reports quality and MACs before and after.
inline void cmd_compress(const RunConfig& rc) {
  const Model m = cmd_detail::model(rc.model, "model");
  const auto tokens = cmd_detail::corpus(rc);
  const StructuralPlan plan = cmd_detail::plan_from_flags(rc);
  Model out = plan.apply(m);
  if (!rc.assignment.empty()) out = apply_assignment(out, PrecisionAssignment::parse(rc.assignment));
  const CorpusSlice val = validation_slice(tokens, m.config.max_seq_len, rc.eval_seqs);
  const EvalReport before = profile_run(m, val), after = profile_run(out, val);
  nlohmann::ordered_json j;
  j["plan"] = plan.to_json();
  j["assignment"] = rc.assignment.empty() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(rc.assignment);
  j["parameters_before"] = param_count(m);
  j["parameters_after"] = param_count(out);
  j["before"] = before.to_json();
  j["after"] = after.to_json();
  j["mac_ratio"] = double(after.macs) / double(before.macs);
  j["perplexity_delta"] = after.value - before.value;
  cmd_detail::write_json(rc.out_dir / "compress.json", j);
  if (!rc.out.empty()) save_checkpoint(out, rc.out);
}

// Greedy, speculative or cascaded decoding over seeded corpus prompts.
inline void cmd_decode(const RunConfig& rc) {
  const Model target = cmd_detail::model(rc.model, "model");
  const auto tokens = cmd_detail::corpus(rc);
  const auto ps = cmd_detail::prompts(tokens, rc.prompts, rc.prompt_len, rc.seed);
  nlohmann::ordered_json j;
  j["mode"] = rc.mode;
  j["prompts"] = ps.size();
  j["steps"] = rc.steps;
  j["seed"] = rc.seed;
  if (rc.mode == "greedy") {
    const bool integer = parse_exec_mode(rc.exec) == ExecMode::integer;
    const IntModel im = integer ? build_int_model(target, PrecisionAssignment::uniform(target.blocks.size(), 8),
                                                  calibrate(target, calibration_slice(tokens, target.config.max_seq_len)))
                                : IntModel{};
    std::size_t identical = 0;
    for (const auto& p : ps) {
      const auto a = integer ? decode_greedy(im, p, rc.steps, true) : decode_greedy(target, p, rc.steps, true);
      const auto b = integer ? decode_greedy(im, p, rc.steps, false) : decode_greedy(target, p, rc.steps, false);
      identical += a == b;
    }
    j["exec"] = rc.exec;
    j["cache_identical"] = identical;
  } else if (rc.mode == "speculative") {
    const Model draft = cmd_detail::model(rc.draft, "draft");
    SpecDecodeStats total;
    std::size_t identical = 0;
    for (const auto& p : ps) {
      const auto r = speculative_decode(FloatEngine(draft), FloatEngine(target), p, rc.steps, rc.gamma);
      identical += r.tokens == decode_greedy(target, p, rc.steps);
      total.proposed += r.stats.proposed;
      total.accepted += r.stats.accepted;
      total.target_calls += r.stats.target_calls;
      total.draft_calls += r.stats.draft_calls;
    }
    j["gamma"] = rc.gamma;
    j["stats"] = total.to_json();
    j["target_calls_per_prompt"] = double(total.target_calls) / double(ps.size());
    j["matches_target_greedy"] = identical;
  } else if (rc.mode == "cascade") {
    const Model draft = cmd_detail::model(rc.draft, "draft");
    CascadePolicy pol{rc.threshold, parse_self_test(rc.self_test)};
    // Toy classification: next token after each prompt, labelled by the corpus.
    std::vector<std::vector<int>> inputs;
    std::vector<int> labels;
    for (const auto& w : cmd_detail::prompts(tokens, rc.prompts, rc.prompt_len + 1, rc.seed)) {
      inputs.emplace_back(w.begin(), w.end() - 1);
      labels.push_back(w.back());
    }
    const CascadeEval ev = cascade_evaluate(draft, target, inputs, labels, pol);
    j["threshold"] = rc.threshold;
    j["self_test"] = rc.self_test;
    j["escalation_rate"] = ev.escalation_rate;
    j["accuracy"] = {{"small", ev.small_accuracy}, {"large", ev.large_accuracy}, {"cascade", ev.cascade_accuracy}};
  } else {
    fail(ErrorKind::invalid_argument, "--mode must be greedy, speculative or cascade, got '" + rc.mode + "'");
  }
  cmd_detail::write_json(rc.out_dir / "decode.json", j);
}

inline void cmd_eval(const RunConfig& rc) {
  const Model m = cmd_detail::model(rc.model, "model");
  const auto tokens = cmd_detail::corpus(rc);
  const CorpusSlice val = validation_slice(tokens, m.config.max_seq_len, rc.eval_seqs);
  EvalReport r = profile_run(m, val);
  nlohmann::ordered_json j;
  if (!rc.assignment.empty()) {
    const PrecisionAssignment a = PrecisionAssignment::parse(rc.assignment);
    const auto eval = cmd_detail::evaluator(rc, m, tokens);
    j["assignment"] = a.str();
    j["exec"] = rc.exec;
    j["memory_bytes"] = memory_footprint(m, a);
    j["memory_saving"] = make_point(m, a, 0.0).memory_saving;
    r.value = eval(a);
    r.descriptor += " assignment=" + a.str();
  }
  nlohmann::ordered_json out = r.to_json();
  for (auto& [k, v] : j.items()) out[k] = v;
  cmd_detail::write_json(rc.out_dir / "eval.json", out);
}

}  // namespace qtk
