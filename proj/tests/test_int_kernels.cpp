#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "qtk/int_kernels.hpp"

using namespace qtk;

namespace {

QuantParams asym8(double lo, double hi) { return qparams_from_range(lo, hi, 8, false); }

IntTensor random_codes(std::mt19937_64& rng, std::vector<std::size_t> shape, const QuantParams& q) {
  IntTensor t;
  t.shape = shape;
  t.qparams = q;
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  std::uniform_int_distribution<int32_t> d(q.lo(), q.hi());
  for (std::size_t i = 0; i < n; ++i) t.data.push_back(d(rng));
  return t;
}

std::vector<double> deq(const IntTensor& t) {
  const auto f = dequantize(t);
  return {f.begin(), f.end()};
}

QuantParams range_of(const std::vector<double>& v) {
  return asym8(*std::min_element(v.begin(), v.end()), *std::max_element(v.begin(), v.end()));
}

}  // namespace

TEST(IntMatmul, OneByOne) {
  const QuantParams unit{1.0, 0, 8, true, Granularity::per_tensor};
  IntTensor a{{1, 1}, {2}, unit, {}}, w{{1, 1}, {3}, unit, {}};
  const IntTensor out = int_matmul(a, w, {}, make_matmul_config(unit, w, unit));
  EXPECT_EQ(out.data, std::vector<int32_t>{6});
  const QuantParams half{2.0, 0, 8, true, Granularity::per_tensor};
  EXPECT_EQ(int_matmul(a, w, {}, make_matmul_config(unit, w, half)).data, std::vector<int32_t>{3});
}

TEST(IntMatmul, IdentityWeightReturnsInput) {
  std::mt19937_64 rng(1);
  const QuantParams in = asym8(-1.3, 0.7);
  const IntTensor a = random_codes(rng, {5, 8}, in);
  std::vector<float> eye(64, 0.0f);
  for (int i = 0; i < 8; ++i) eye[std::size_t(i * 9)] = 1.0f;
  const IntTensor w = quantize_per_channel(eye, 8, 8, 8, ChannelAxis::columns).tensor;
  const IntTensor out = int_matmul(a, w, {}, make_matmul_config(in, w, in));
  EXPECT_EQ(out.data, a.data);
}

TEST(IntMatmul, MatchesFloatOracleWithinOneCode) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const QuantParams in = asym8(-2.0, 1.0 + 0.01 * trial);
    const IntTensor a = random_codes(rng, {8, 8}, in);
    std::normal_distribution<float> nd(0.0f, 0.3f);
    std::vector<float> wf(64), bf(8);
    for (float& v : wf) v = nd(rng);
    for (float& v : bf) v = nd(rng);
    const int bits = trial % 2 ? 8 : 4;
    const IntTensor w = quantize_per_channel(wf, 8, 8, bits, ChannelAxis::columns).tensor;
    const auto bias = quantize_bias(bf, in.scale, w);
    const QuantParams out = asym8(-3.0, 3.0);
    const IntTensor got = int_matmul(a, w, bias, make_matmul_config(in, w, out));
    const auto ad = deq(a), wd = deq(w);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j) {
        double acc = double(bias[j]) * in.scale * w.channel_scales[j];
        for (std::size_t k = 0; k < 8; ++k) acc += ad[i * 8 + k] * wd[k * 8 + j];
        const double code = std::clamp(std::round(acc / out.scale) + out.zero_point, -128.0, 127.0);
        ASSERT_LE(std::fabs(got.data[i * 8 + j] - code), 1.0);
      }
  }
}

TEST(IntMatmul, ShapeMismatchRejected) {
  const QuantParams q{1.0, 0, 8, true, Granularity::per_tensor};
  IntTensor a{{2, 3}, std::vector<int32_t>(6), q, {}}, w{{4, 2}, std::vector<int32_t>(8), q, {}};
  EXPECT_THROW(int_matmul(a, w, {}, make_matmul_config(q, w, q)), Error);
}

TEST(IntSoftmax, UniformRowIsUniform) {
  const QuantParams in = asym8(-4.0, 4.0);
  for (std::size_t n : {2u, 3u, 4u, 16u}) {
    IntTensor x{{1, n}, std::vector<int32_t>(n, 17), in, {}};
    const IntTensor p = int_softmax(x, make_softmax_config(in));
    const auto f = deq(p);
    for (double v : f) {
      EXPECT_DOUBLE_EQ(v, f[0]);
      EXPECT_NEAR(v, 1.0 / double(n), 0.005);
    }
  }
}

TEST(IntSoftmax, SaturatedWinnerTakesAll) {
  const QuantParams in = asym8(-20.0, 20.0);
  IntTensor x{{1, 4}, {-128, 127, -128, -100}, in, {}};
  const auto f = deq(int_softmax(x, make_softmax_config(in)));
  EXPECT_NEAR(f[1], 1.0, 1e-9);
  EXPECT_NEAR(f[0] + f[2] + f[3], 0.0, 1e-9);
}

TEST(IntSoftmax, RandomRowsMatchFloatOracle) {
  std::mt19937_64 rng(5);
  int argmax_ok = 0;
  double worst = 0.0, worst_sum = 0.0;
  for (int r = 0; r < 1000; ++r) {
    const double span = 1.0 + 0.02 * r;  // logit ranges from +-0.5 to +-10.5
    const QuantParams in = asym8(-span / 2, span / 2);
    const IntTensor x = random_codes(rng, {1, 16}, in);
    const auto p = deq(int_softmax(x, make_softmax_config(in)));
    const auto ref = oracle::softmax(deq(x));
    double sum = 0.0;
    for (std::size_t i = 0; i < 16; ++i) {
      EXPECT_GE(p[i], 0.0);
      worst = std::max(worst, std::fabs(p[i] - ref[i]));
      sum += p[i];
    }
    worst_sum = std::max(worst_sum, std::fabs(sum - 1.0));
    argmax_ok += oracle::argmax(p) == oracle::argmax(ref);
  }
  EXPECT_LE(worst, 0.01);
  EXPECT_LE(worst_sum, 0.01);
  EXPECT_EQ(argmax_ok, 1000);
}

TEST(IntGelu, ZeroAndIdentityTail) {
  const QuantParams in{4.0 / 127, 0, 8, true, Granularity::per_tensor};
  const QuantParams out = asym8(-0.2, 4.1);
  const GeluConfig cfg = make_gelu_config(in, out);
  IntTensor x{{3}, {0, 127, 126}, in, {}};
  const auto y = deq(int_gelu(x, cfg));
  EXPECT_NEAR(y[0], 0.0, out.scale / 2 + 1e-12);
  EXPECT_NEAR(y[1], 4.0, 0.02);
  EXPECT_NEAR(y[2], 126 * 4.0 / 127, 0.02);
}

TEST(IntGelu, ExhaustiveEightBitSweep) {
  const QuantParams in{4.0 / 127, 0, 8, true, Granularity::per_tensor};
  std::vector<double> ref;
  IntTensor x{{256}, {}, in, {}};
  for (int32_t c = -128; c <= 127; ++c) {
    x.data.push_back(c);
    ref.push_back(oracle::gelu(c * in.scale));
  }
  const QuantParams out = range_of(ref);
  const auto y = deq(int_gelu(x, make_gelu_config(in, out)));
  double worst = 0.0;
  for (std::size_t i = 0; i < 256; ++i) worst = std::max(worst, std::fabs(y[i] - ref[i]));
  EXPECT_LE(worst, 0.02);
}

TEST(IntGelu, WideInputUsesDirectPath) {
  const QuantParams in = qparams_from_range(-6.0, 6.0, 16, false);
  const QuantParams out = qparams_from_range(-0.2, 6.0, 16, false);
  const GeluConfig cfg = make_gelu_config(in, out);
  EXPECT_TRUE(cfg.table.empty());
  IntTensor x{{5}, {}, in, {}};
  for (double v : {-6.0, -1.0, 0.0, 0.5, 6.0}) x.data.push_back(quantize_value(v, in));
  const auto y = deq(int_gelu(x, cfg));
  for (std::size_t i = 0; i < 5; ++i)
    EXPECT_NEAR(y[i], oracle::gelu(dequantize_value(x.data[i], in)), 2e-3);
}

namespace {

struct LnCase {
  IntTensor gamma, beta;
  std::vector<double> g, b;
};

LnCase ln_params(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<float> ug(0.5f, 1.5f), ub(-0.5f, 0.5f);
  std::vector<float> g(n), b(n);
  for (auto& v : g) v = ug(rng);
  for (auto& v : b) v = ub(rng);
  LnCase c;
  c.gamma = quantize(g, compute_qparams(g, 8, true));
  c.beta = quantize(b, compute_qparams(b, 8, true));
  c.g = deq(c.gamma);
  c.b = deq(c.beta);
  return c;
}

}  // namespace

TEST(IntLayerNorm, ConstantRowGivesBeta) {
  std::mt19937_64 rng(8);
  const LnCase p = ln_params(rng, 16);
  const QuantParams in = asym8(-1.0, 1.0), out = asym8(-2.0, 2.0);
  IntTensor x{{1, 16}, std::vector<int32_t>(16, 42), in, {}};
  const auto y = deq(int_layernorm(x, make_layernorm_config(in, p.gamma, p.beta, out)));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(y[i], p.b[i], out.scale / 2 + 1e-9);
}

TEST(IntLayerNorm, SymmetricPairGivesPlusMinusGamma) {
  const QuantParams in{0.01, 0, 8, true, Granularity::per_tensor};
  const std::vector<float> g{1.25f, 0.75f}, b{0.0f, 0.0f};
  const IntTensor gq = quantize(g, compute_qparams(g, 8, true));
  const IntTensor bq = quantize(b, compute_qparams(b, 8, true));
  const QuantParams out = asym8(-1.5, 1.5);
  IntTensor x{{1, 2}, {-90, 90}, in, {}};
  const auto y = deq(int_layernorm(x, make_layernorm_config(in, gq, bq, out)));
  EXPECT_NEAR(y[0], -1.25, 0.01);
  EXPECT_NEAR(y[1], 0.75, 0.01);
}

TEST(IntLayerNorm, RandomRowsMatchFloatOracle) {
  std::mt19937_64 rng(9);
  const std::size_t n = 64;
  const LnCase p = ln_params(rng, n);
  std::vector<IntTensor> rows;
  std::vector<std::vector<double>> refs;
  std::vector<double> all;
  for (int r = 0; r < 1000; ++r) {
    const double span = 0.5 + 0.01 * r;
    const QuantParams in = asym8(-span * 0.3, span * 0.7);
    rows.push_back(random_codes(rng, {1, n}, in));
    refs.push_back(oracle::layernorm(deq(rows.back()), p.g, p.b));
    all.insert(all.end(), refs.back().begin(), refs.back().end());
  }
  const QuantParams out = range_of(all);
  double worst = 0.0;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto cfg = make_layernorm_config(rows[r].qparams, p.gamma, p.beta, out);
    const auto y = deq(int_layernorm(rows[r], cfg));
    for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::fabs(y[i] - refs[r][i]));
  }
  EXPECT_LE(worst, 0.02);
}

TEST(IntLayerNorm, NarrowRowsKeepPrecision) {
  // Rows whose spread is a handful of codes stress the mean/variance precision.
  std::mt19937_64 rng(10);
  const std::size_t n = 128;
  const LnCase p = ln_params(rng, n);
  const QuantParams in = asym8(-1.0, 1.0);
  double worst = 0.0;
  std::vector<IntTensor> rows;
  std::vector<std::vector<double>> refs;
  std::vector<double> all;
  for (int r = 0; r < 200; ++r) {
    std::uniform_int_distribution<int32_t> d(-3 - r % 5, 3 + r % 7);
    IntTensor x{{1, n}, {}, in, {}};
    for (std::size_t i = 0; i < n; ++i) x.data.push_back(d(rng));
    refs.push_back(oracle::layernorm(deq(x), p.g, p.b));
    all.insert(all.end(), refs.back().begin(), refs.back().end());
    rows.push_back(x);
  }
  const QuantParams out = range_of(all);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto y = deq(int_layernorm(rows[r], make_layernorm_config(in, p.gamma, p.beta, out)));
    for (std::size_t i = 0; i < n; ++i) worst = std::max(worst, std::fabs(y[i] - refs[r][i]));
  }
  EXPECT_LE(worst, 0.02);
}

TEST(IntLayerNorm, InverseSqrtIsAccurate) {
  for (uint64_t v : {1ull, 2ull, 3ull, 7ull, 1000ull, 123456789ull, (1ull << 31) - 1, 1ull << 40}) {
    int h = 0;
    const int64_t y = fx::inv_sqrt(v, h);
    const double got = std::ldexp(double(y), -30 - h);
    EXPECT_NEAR(got * std::sqrt(double(v)), 1.0, 4e-6) << v;  // two Newton steps from a 2.7% seed
  }
}

TEST(IntAdd, MatchesFloatWithinOneCode) {
  std::mt19937_64 rng(12);
  const QuantParams a = asym8(-1.0, 2.0), b = asym8(-0.3, 0.1), out = asym8(-1.3, 2.1);
  const IntTensor x = random_codes(rng, {64}, a), y = random_codes(rng, {64}, b);
  const IntTensor z = int_add(x, y, make_add_config(a, b, out));
  const auto xd = deq(x), yd = deq(y);
  for (std::size_t i = 0; i < 64; ++i) {
    const double want = std::clamp(std::round((xd[i] + yd[i]) / out.scale) + out.zero_point, -128.0, 127.0);
    EXPECT_LE(std::fabs(z.data[i] - want), 1.0);
  }
}

namespace {

// Float attention on dequantized q/k/v, causal, heads along the feature axis.
std::vector<double> attention_oracle(const std::vector<double>& q, const std::vector<double>& k,
                                     const std::vector<double>& v, std::size_t t, std::size_t d,
                                     std::size_t heads, std::vector<double>* logits = nullptr) {
  const std::size_t dh = d / heads;
  std::vector<double> out(t * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<double> s(i + 1);
      for (std::size_t j = 0; j <= i; ++j) {
        for (std::size_t e = 0; e < dh; ++e) s[j] += q[i * d + h * dh + e] * k[j * d + h * dh + e];
        s[j] /= std::sqrt(double(dh));
        if (logits) logits->push_back(s[j]);
      }
      const auto p = oracle::softmax(s);
      for (std::size_t j = 0; j <= i; ++j)
        for (std::size_t e = 0; e < dh; ++e) out[i * d + h * dh + e] += p[j] * v[j * d + h * dh + e];
    }
  return out;
}

}  // namespace

TEST(IntAttention, SinglePositionReturnsValueRow) {
  std::mt19937_64 rng(13);
  const QuantParams q = asym8(-1, 1), k = asym8(-1, 1), v = asym8(-0.5, 2.0), lg = asym8(-4, 4);
  const IntTensor qt = random_codes(rng, {1, 16}, q), kt = random_codes(rng, {1, 16}, k),
                  vt = random_codes(rng, {1, 16}, v);
  const auto cfg = make_attention_config(q, k, v, lg, v, 16, 4);
  EXPECT_EQ(int_attention(qt, kt, vt, cfg).data, vt.data);
}

TEST(IntAttention, IdenticalKeysAverageValues) {
  std::mt19937_64 rng(14);
  const std::size_t t = 4, d = 8;
  const QuantParams q = asym8(-1, 1), k = asym8(-1, 1), v = asym8(-1, 1), lg = asym8(-4, 4);
  const IntTensor qt = random_codes(rng, {t, d}, q), vt = random_codes(rng, {t, d}, v);
  IntTensor kt = random_codes(rng, {1, d}, k);
  kt.shape = {t, d};
  for (std::size_t i = 1; i < t; ++i) kt.data.insert(kt.data.end(), kt.data.begin(), kt.data.begin() + d);
  const auto cfg = make_attention_config(q, k, v, lg, v, d, 2);
  const auto got = deq(int_attention(qt, kt, vt, cfg, false));
  const auto vd = deq(vt);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t e = 0; e < d; ++e) {
      double mean = 0.0;
      for (std::size_t j = 0; j < t; ++j) mean += vd[j * d + e] / double(t);
      EXPECT_NEAR(got[i * d + e], mean, 0.01);
    }
}

TEST(IntAttention, RandomHeadsMatchFloatOracle) {
  std::mt19937_64 rng(15);
  const std::size_t t = 16, heads = 4, dh = 8, d = heads * dh;
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const QuantParams q = asym8(-1.5, 1.5), k = asym8(-1.5, 1.2), v = asym8(-1.0, 1.0);
    const IntTensor qt = random_codes(rng, {t, d}, q), kt = random_codes(rng, {t, d}, k),
                    vt = random_codes(rng, {t, d}, v);
    std::vector<double> logits;
    const auto ref = attention_oracle(deq(qt), deq(kt), deq(vt), t, d, heads, &logits);
    const auto cfg = make_attention_config(q, k, v, range_of(logits), range_of(ref), d, heads);
    const auto got = deq(int_attention(qt, kt, vt, cfg));
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::fabs(got[i] - ref[i]));
  }
  EXPECT_LE(worst, 0.03);
}

TEST(IntAttention, ShapeMismatchRejected) {
  const QuantParams q = asym8(-1, 1);
  const auto cfg = make_attention_config(q, q, q, q, q, 8, 2);
  IntTensor a{{2, 8}, std::vector<int32_t>(16), q, {}}, b{{2, 6}, std::vector<int32_t>(12), q, {}};
  EXPECT_THROW(int_attention(a, b, b, cfg), Error);
}

TEST(IntKernels, Deterministic) {
  std::mt19937_64 rng(16);
  const QuantParams in = asym8(-3, 3);
  const IntTensor x = random_codes(rng, {32, 16}, in);
  const auto cfg = make_softmax_config(in);
  EXPECT_EQ(int_softmax(x, cfg).data, int_softmax(x, cfg).data);
}
