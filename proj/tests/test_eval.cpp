#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "qtk/compress.hpp"
#include "qtk/eval.hpp"
#include "structure_oracles.hpp"

using namespace qtk;

namespace {

// Independent NLL: long-double log-sum-exp, shifted by the target logit.
double oracle_perplexity(const Model& m, const CorpusSlice& s) {
  long double total = 0;
  std::size_t n = 0;
  for (const auto& seq : s.sequences) {
    const Matrix l = forward_float(m, seq);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      const long double ref = l.at(t, std::size_t(seq[t + 1]));
      long double acc = 0;
      for (std::size_t c = 0; c < l.cols; ++c) acc += std::exp((long double)l.at(t, c) - ref);
      total += std::log(acc);
      ++n;
    }
  }
  return double(std::exp(total / n));
}

CorpusSlice random_slice(uint64_t seed, std::size_t n, std::size_t len) {
  std::mt19937_64 rng(seed);
  CorpusSlice s;
  for (std::size_t i = 0; i < n; ++i) s.sequences.push_back(testfx::random_tokens(rng, len));
  return s;
}

}  // namespace

TEST(Perplexity, UniformLogitsGiveVocabSize) {
  Model m = testfx::tiny_model();
  std::fill(m.head.data.begin(), m.head.data.end(), 0.0f);
  EXPECT_NEAR(perplexity(m, random_slice(1, 3, 20)), 256.0, 256.0 * 1e-12);
}

TEST(Perplexity, PerfectMemorizerApproachesOne) {
  const CorpusSlice s = random_slice(2, 1, 30);
  const LogitsFn memorizer = [&](std::span<const int> t) {
    Matrix l(t.size(), 256);
    for (std::size_t i = 0; i + 1 < t.size(); ++i) l.at(i, std::size_t(s.sequences[0][i + 1])) = 60.0f;
    return l;
  };
  const double p = perplexity(memorizer, s);
  EXPECT_GE(p, 1.0);
  EXPECT_LT(p - 1.0, 1e-20 + 1e-12);
}

TEST(Perplexity, MatchesIndependentOracleOnTinyModel) {
  const Model m = testfx::tiny_model();
  const CorpusSlice s = random_slice(3, 4, 32);
  EXPECT_NEAR(perplexity(m, s) / oracle_perplexity(m, s), 1.0, 1e-6);
}

TEST(Perplexity, EmptySliceRejected) {
  const Model m = testfx::tiny_model();
  EXPECT_THROW(perplexity(m, CorpusSlice{}), Error);
}

TEST(Perplexity, FixtureMatchesIndependentOracle) {
  const Model& m = testfx::target();
  const CorpusSlice s = testfx::validation();
  EXPECT_NEAR(perplexity(m, s) / oracle_perplexity(m, s), 1.0, 1e-6);
}

TEST(Agreement, ReflexiveAndSymmetric) {
  const Model a = testfx::tiny_model(1), b = testfx::tiny_model(2);
  const CorpusSlice s = random_slice(4, 3, 24);
  EXPECT_EQ(agreement(float_logits(a), float_logits(a), s), 1.0);
  EXPECT_EQ(agreement(float_logits(a), float_logits(b), s), agreement(float_logits(b), float_logits(a), s));
  EXPECT_THROW(agreement(float_logits(a), float_logits(b), CorpusSlice{}), Error);
}

TEST(Accuracy, ExactCounts) {
  EXPECT_EQ(accuracy(std::vector<int>{1, 2, 3}, std::vector<int>{4, 5, 6}), 0.0);
  EXPECT_EQ(accuracy(std::vector<int>{1, 2, 3, 4}, std::vector<int>{1, 0, 3, 0}), 0.5);
  EXPECT_THROW(accuracy(std::vector<int>{}, std::vector<int>{}), Error);
  EXPECT_THROW(accuracy(std::vector<int>{1}, std::vector<int>{1, 2}), Error);
}

TEST(ParallelFor, DeterministicByIndex) {
  std::vector<int> a(1000), b(1000);
  parallel_for(a.size(), [&](std::size_t i) { a[i] = int(i * i % 97); }, 1);
  parallel_for(b.size(), [&](std::size_t i) { b[i] = int(i * i % 97); }, 4);
  EXPECT_EQ(a, b);
  EXPECT_THROW(parallel_for(10, [](std::size_t i) { if (i == 7) fail(ErrorKind::unsupported, "x"); }, 3), Error);
}

// ---- MAC accounting against hand-written closed forms

namespace {

uint64_t instrumented(const Model& m, std::size_t t) {
  std::mt19937_64 rng(9);
  OpCounter ops;
  forward_float(m, testfx::random_tokens(rng, t), nullptr, &ops);
  return ops.macs;
}

}  // namespace

TEST(Macs, BaselineMatchesClosedForm) {
  const Model m = testfx::tiny_model();
  const uint64_t t = 32, d = 32, f = 64;
  const uint64_t want = 2 * oracle::block_macs(t, d, f) + t * d * 256;
  EXPECT_EQ(analytic_macs(m, t).total(), want);
  EXPECT_EQ(instrumented(m, t), want);
}

TEST(Macs, TokenDropHalvesLaterBlocks) {
  const Model m = token_drop(testfx::tiny_model(5, 4), 0.5, 1);
  const uint64_t t = 32, d = 32, f = 64;
  const MacBreakdown mb = analytic_macs(m, t);
  ASSERT_EQ(mb.blocks.size(), 4u);
  EXPECT_EQ(mb.blocks[0], oracle::block_macs(32, d, f));
  EXPECT_EQ(mb.blocks[1], oracle::block_macs(32, d, f));
  EXPECT_EQ(mb.blocks[2], oracle::block_macs(16, d, f));
  EXPECT_EQ(mb.blocks[3], oracle::block_macs(16, d, f));
  EXPECT_EQ(mb.total(), instrumented(m, t));
  // ceil rounding on odd lengths
  EXPECT_EQ(analytic_macs(m, 31).blocks[2], oracle::block_macs(16, d, f));
  EXPECT_EQ(analytic_macs(token_drop(testfx::tiny_model(5, 4), 0.3, 0), 31).blocks[1], oracle::block_macs(10, d, f));
}

TEST(Macs, BlockRemovalAndPruning) {
  const Model m = testfx::tiny_model(5, 4);
  const uint64_t t = 20, d = 32;
  const Model half = remove_blocks(m, {1, 3});
  EXPECT_EQ(analytic_macs(half, t).total(), 2 * oracle::block_macs(t, d, 64) + t * d * 256);
  EXPECT_EQ(analytic_macs(half, t).total(), instrumented(half, t));
  uint64_t full_blocks = 0, half_blocks = 0;
  for (auto v : analytic_macs(m, t).blocks) full_blocks += v;
  for (auto v : analytic_macs(half, t).blocks) half_blocks += v;
  EXPECT_EQ(2 * half_blocks, full_blocks);
  const Model pruned = prune_mlp_channels(m, 2, 24);
  EXPECT_EQ(analytic_macs(pruned, t).blocks[2], oracle::block_macs(t, d, 24));
  EXPECT_EQ(analytic_macs(pruned, t).total(), instrumented(pruned, t));
}

TEST(ProfileRun, ReportCarriesFingerprintAndCounts) {
  const Model m = testfx::tiny_model();
  const CorpusSlice s = random_slice(6, 2, 16);
  const EvalReport r = profile_run(m, s);
  EXPECT_EQ(r.fingerprint, s.fingerprint());
  EXPECT_EQ(r.macs, 2 * analytic_macs(m, 16).total());
  EXPECT_EQ(r.ops.macs, r.macs);
  EXPECT_TRUE(std::isfinite(r.value));
  EXPECT_EQ(r.value, perplexity(m, s));
  const auto j = r.to_json();
  EXPECT_EQ(j["corpus_fingerprint"], s.fingerprint());
}
