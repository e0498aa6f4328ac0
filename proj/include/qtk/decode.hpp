#pragma once

// Decoding over a (draft, target) pair: greedy speculative decoding with
// exact-match acceptance, and a confidence-gated two-model cascade.

#include <functional>

#include <json.hpp>

#include "qtk/eval.hpp"
#include "qtk/int_model.hpp"
#include "qtk/model.hpp"

namespace qtk {

struct SpecDecodeStats {
  std::size_t proposed = 0;
  std::size_t accepted = 0;
  std::size_t target_calls = 0;
  std::size_t draft_calls = 0;

  double acceptance_rate() const { return proposed ? double(accepted) / double(proposed) : 0.0; }

  nlohmann::ordered_json to_json() const {
    return {{"proposed", proposed},
            {"accepted", accepted},
            {"acceptance_rate", acceptance_rate()},
            {"target_calls", target_calls},
            {"draft_calls", draft_calls}};
  }
};

struct SpecDecodeResult {
  std::vector<int> tokens;
  SpecDecodeStats stats;
};

// How the draft picks its proposal from a logit row. Greedy by default.
template <typename Logits>
using ProposalRule = std::function<std::size_t(const Logits&, std::size_t row)>;

// Each round the draft proposes up to `gamma` tokens, the target scores the
// pending context plus all proposals in one cached call, the longest prefix
// matching the target's greedy choices is kept, and the target's own next token
// is appended. The result equals target greedy decoding for any draft.
template <typename DraftEngine, typename TargetEngine>
SpecDecodeResult speculative_decode(const DraftEngine& draft, const TargetEngine& target,
                                    std::span<const int> prompt, std::size_t n_steps, std::size_t gamma,
                                    ProposalRule<typename DraftEngine::Logits> propose = nullptr) {
  require(gamma >= 1, ErrorKind::invalid_argument, "draft length gamma must be >= 1");
  require(draft.config().vocab_size == target.config().vocab_size, ErrorKind::shape_mismatch,
          "draft and target vocabularies differ (" + std::to_string(draft.config().vocab_size) + " vs " +
              std::to_string(target.config().vocab_size) + ")");
  require(!prompt.empty(), ErrorKind::invalid_argument, "prompt is empty");
  const std::size_t limit = std::min(draft.config().max_seq_len, target.config().max_seq_len);
  require(prompt.size() + n_steps <= limit, ErrorKind::invalid_argument,
          "context overflow: prompt " + std::to_string(prompt.size()) + " + steps " + std::to_string(n_steps) +
              " exceeds max_seq_len " + std::to_string(limit));
  if (!propose) propose = [](const auto& l, std::size_t r) { return row_argmax(l, r); };

  SpecDecodeResult res;
  if (n_steps == 0) return res;
  std::vector<int> seq(prompt.begin(), prompt.end());
  auto dcache = draft.make_cache();
  auto tcache = target.make_cache();
  auto pending = [&](const auto& cache) {
    return std::vector<int>(seq.begin() + std::ptrdiff_t(cache.length), seq.end());
  };

  while (res.tokens.size() < n_steps) {
    const std::size_t g = std::min(gamma, n_steps - res.tokens.size() - 1);
    std::vector<int> proposals;
    if (g > 0) {
      std::vector<int> feed = pending(dcache);
      for (std::size_t i = 0; i < g; ++i) {
        const auto logits = draft.extend(dcache, feed);
        ++res.stats.draft_calls;
        proposals.push_back(int(propose(logits, logits_rows(logits) - 1)));
        feed.assign(1, proposals.back());
      }
    }
    std::vector<int> feed = pending(tcache);
    const std::size_t base = tcache.length + feed.size() - 1;  // row of the last committed token
    feed.insert(feed.end(), proposals.begin(), proposals.end());
    const auto logits = target.extend(tcache, feed);
    ++res.stats.target_calls;
    const std::size_t first = feed.size() - proposals.size() - 1;
    std::size_t k = 0;
    while (k < proposals.size() && int(row_argmax(logits, first + k)) == proposals[k]) ++k;
    const int next = int(row_argmax(logits, first + k));
    res.stats.proposed += proposals.size();
    res.stats.accepted += k;
    for (std::size_t i = 0; i < k; ++i) {
      seq.push_back(proposals[i]);
      res.tokens.push_back(proposals[i]);
    }
    seq.push_back(next);
    res.tokens.push_back(next);
    // Keep cache rows only for tokens now committed; the fresh target token
    // stays pending for the next round.
    tcache.truncate(base + 1 + k);
    dcache.truncate(std::min(dcache.length, base + 1 + k));
  }
  return res;
}

// ---------------------------------------------------------------- cascade

enum class SelfTest { max_prob, entropy };

inline SelfTest parse_self_test(const std::string& s) {
  if (s == "max-prob") return SelfTest::max_prob;
  if (s == "entropy") return SelfTest::entropy;
  fail(ErrorKind::invalid_argument, "self-test must be 'max-prob' or 'entropy', got '" + s + "'");
}

// Confidence in [0, 1] from a logit row: the top softmax probability, or one
// minus the normalized entropy.
inline double self_test(std::span<const float> logits, SelfTest kind = SelfTest::max_prob) {
  require(!logits.empty(), ErrorKind::invalid_argument, "self-test on an empty logit row");
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits) mx = std::max(mx, double(v));
  std::vector<double> p(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += p[i] = std::exp(double(logits[i]) - mx);
  for (double& v : p) v /= s;
  if (kind == SelfTest::max_prob) return std::clamp(*std::max_element(p.begin(), p.end()), 0.0, 1.0);
  if (p.size() == 1) return 1.0;
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return std::clamp(1.0 - h / std::log(double(p.size())), 0.0, 1.0);
}

struct CascadePolicy {
  double confidence_threshold = 0.7;  // above 1 is unreachable: always escalate
  SelfTest self_test = SelfTest::max_prob;
  std::size_t escalation_budget = std::numeric_limits<std::size_t>::max();

  void validate() const {
    require(std::isfinite(confidence_threshold) && confidence_threshold >= 0.0, ErrorKind::invalid_argument,
            "confidence threshold must be finite and >= 0");
  }
};

struct CascadeAnswer {
  int answer = 0;
  bool escalated = false;
  double confidence = 0.0;
};

// Next-token answer for `input`: the small model's when its confidence passes
// the threshold (or the budget is spent), the large model's otherwise.
inline CascadeAnswer cascade_route(const Model& small, const Model& large, std::span<const int> input,
                                   const CascadePolicy& policy, bool budget_left = true) {
  policy.validate();
  const Matrix ls = forward_float(small, input);
  CascadeAnswer a;
  a.confidence = self_test(ls.row(ls.rows - 1), policy.self_test);
  a.answer = int(row_argmax(ls, ls.rows - 1));
  if (a.confidence >= policy.confidence_threshold || !budget_left) return a;
  const Matrix ll = forward_float(large, input);
  a.answer = int(row_argmax(ll, ll.rows - 1));
  a.escalated = true;
  return a;
}

struct CascadeRun {
  std::vector<CascadeAnswer> answers;
  std::size_t escalations = 0;
  double escalation_rate() const { return answers.empty() ? 0.0 : double(escalations) / double(answers.size()); }
};

inline CascadeRun cascade_run(const Model& small, const Model& large, const std::vector<std::vector<int>>& inputs,
                              const CascadePolicy& policy) {
  CascadeRun r;
  for (const auto& in : inputs) {
    r.answers.push_back(cascade_route(small, large, in, policy, r.escalations < policy.escalation_budget));
    r.escalations += r.answers.back().escalated;
  }
  return r;
}

// Toy next-token classification scored three ways: small model alone, large
// model alone, and the cascade between them.
struct CascadeEval {
  double escalation_rate = 0.0;
  double small_accuracy = 0.0, large_accuracy = 0.0, cascade_accuracy = 0.0;
};

inline CascadeEval cascade_evaluate(const Model& small, const Model& large,
                                    const std::vector<std::vector<int>>& inputs, std::span<const int> labels,
                                    const CascadePolicy& policy) {
  require(inputs.size() == labels.size(), ErrorKind::shape_mismatch, "one label per cascade input");
  const CascadeRun run = cascade_run(small, large, inputs, policy);
  std::vector<int> sp, lp, cp;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Matrix ls = forward_float(small, inputs[i]), ll = forward_float(large, inputs[i]);
    sp.push_back(int(row_argmax(ls, ls.rows - 1)));
    lp.push_back(int(row_argmax(ll, ll.rows - 1)));
    cp.push_back(run.answers[i].answer);
  }
  return CascadeEval{run.escalation_rate(), accuracy(sp, labels), accuracy(lp, labels), accuracy(cp, labels)};
}

}  // namespace qtk
