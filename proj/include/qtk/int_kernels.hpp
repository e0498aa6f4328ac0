#pragma once

// Integer-only kernels. Every kernel consumes IntTensors, accumulates in 32-bit
// (64-bit only inside fixed-point nonlinearities) and ends in a requantization
// to its declared output qparams.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "qtk/error.hpp"
#include "qtk/quant.hpp"
#include "qtk/tensor.hpp"

namespace qtk {

namespace fx {

inline constexpr int kFrac = 24;
inline constexpr int64_t kOne = int64_t{1} << kFrac;

inline int64_t to_fixed(double v, int frac = kFrac) {
  return static_cast<int64_t>(round_half_away(std::ldexp(v, frac)));
}

// exp2 polynomial on [0,1): p(f) = 1 + f(a + (1-a)f), exact at both ends.
inline constexpr int64_t kExp2A = 11076905;  // round(0.660235 * 2^24)

// 2^t for t <= 0, t and result in Q24.
inline int64_t exp2_neg(int64_t t) {
  if (t > 0) t = 0;
  const int64_t n = t >> kFrac;  // floor
  const int64_t f = t - n * kOne;
  const int64_t inner = kExp2A + rounding_shift((kOne - kExp2A) * f, kFrac);
  const int64_t p = kOne + rounding_shift(f * inner, kFrac);
  return rounding_shift(p, int(std::min<int64_t>(-n, 62)));
}

inline constexpr int64_t kLog2e = 24204406;  // round(log2(e) * 2^24)

// exp(z) for z <= 0 in Q24.
inline int64_t exp_neg(int64_t z) { return exp2_neg(rounding_shift(z * kLog2e, kFrac)); }

// Logistic function on Q24 input, Q24 output.
inline int64_t sigmoid(int64_t z) {
  const int64_t e = exp_neg(-std::abs(z));
  const int64_t pos = int64_t(((__int128)1 << (2 * kFrac)) / (kOne + e));
  return z >= 0 ? pos : kOne - pos;
}

// Inverse square root of v >= 1: returns y in Q30 and h such that
// 1/sqrt(v) ~= y * 2^-30 * 2^-h. Bit-scan normalization, linear minimax seed,
// two Newton steps.
inline int64_t inv_sqrt(uint64_t v, int& h) {
  const int e = int(std::bit_width(v)) - 1;
  const int64_t m = e >= 30 ? int64_t(v >> (e - 30)) : int64_t(v << (30 - e));  // [1,2) in Q30
  constexpr int64_t one = int64_t{1} << 30;
  constexpr int64_t c0 = 1367929065;  // round((1 + 0.29289322 - 0.01891) * 2^30)
  constexpr int64_t c1 = 314491699;   // round(0.29289322 * 2^30)
  int64_t y = c0 - ((c1 * m) >> 30);
  for (int it = 0; it < 2; ++it) {
    const int64_t y2 = (y * y) >> 30;
    const int64_t my2 = (m * y2) >> 30;
    y = (y * (3 * one - my2)) >> 31;
  }
  if (e & 1) y = (y * 759250125) >> 30;  // * round(2^-0.5 * 2^30)
  h = e >> 1;
  return y;
}

inline int64_t isqrt(uint64_t v) {
  auto r = uint64_t(std::sqrt(double(v)));
  while (r * r > v) --r;
  while ((r + 1) * (r + 1) <= v) ++r;
  return int64_t(r);
}

}  // namespace fx

namespace detail {

inline void require_shape2(const IntTensor& t, const char* what) {
  require(t.shape.size() == 2 || t.shape.size() == 1, ErrorKind::shape_mismatch,
          std::string(what) + " must be a matrix or vector");
}

inline IntTensor empty_like(std::vector<std::size_t> shape, const QuantParams& q) {
  IntTensor t;
  t.qparams = q;
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  t.shape = std::move(shape);
  t.data.assign(n, q.zero_point);
  return t;
}

}  // namespace detail

// ---------------------------------------------------------------- matmul

struct MatmulConfig {
  QuantParams in, out;
  std::vector<ScaleMultiplier> mult;  // per output channel: s_in * s_w[j] / s_out
  // Centered weight codes as floats, present only when every partial sum is an
  // integer below 2^24 and so exact in single precision. Same result, faster.
  Matrix exact_w;
};

inline MatmulConfig make_matmul_config(const QuantParams& in, const IntTensor& w,
                                       const QuantParams& out) {
  in.validate();
  out.validate();
  MatmulConfig c{in, out, {}, {}};
  const std::size_t n = w.cols();
  c.mult.reserve(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double sw = w.per_channel() ? w.channel_scales[j] : w.qparams.scale;
    c.mult.push_back(encode_scale(in.scale * sw / out.scale));
  }
  int64_t max_w = 0;
  for (int32_t q : w.data) max_w = std::max<int64_t>(max_w, std::abs(int64_t(q) - w.qparams.zero_point));
  const int64_t max_a = int64_t(qmax(in.bits)) - qmin(in.bits);
  if (double(w.shape.empty() ? 0 : w.shape[0]) * double(max_a) * double(max_w) < double(1 << 24)) {
    c.exact_w = Matrix(w.shape[0], w.cols());
    for (std::size_t i = 0; i < w.size(); ++i) c.exact_w.data[i] = float(w.data[i] - w.qparams.zero_point);
  }
  return c;
}

// Bias in accumulator units (scale s_in * s_w[j]), saturated to 32 bits.
inline std::vector<int32_t> quantize_bias(std::span<const float> bias, double in_scale,
                                          const IntTensor& w) {
  std::vector<int32_t> out(bias.size());
  for (std::size_t j = 0; j < bias.size(); ++j) {
    const double sw = w.per_channel() ? w.channel_scales[j] : w.qparams.scale;
    const double v = round_half_away(double(bias[j]) / (in_scale * sw));
    out[j] = int32_t(std::clamp(v, double(INT32_MIN), double(INT32_MAX)));
  }
  return out;
}

namespace detail {

inline void requantize_rows(const int32_t* acc, std::size_t rows, std::size_t n, std::span<const int32_t> bias,
                            const MatmulConfig& cfg, int32_t* out) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const int64_t total = int64_t(acc[i * n + j]) + (bias.empty() ? 0 : bias[j]);
      out[i * n + j] = clamp_code(apply_scale(total, cfg.mult[j]) + cfg.out.zero_point, cfg.out.bits);
    }
}

// rows x k times k x n into `out` (row-major), requantized per output channel.
inline void matmul_rows(const int32_t* a, std::size_t rows, std::size_t k, const IntTensor& w,
                        std::span<const int32_t> bias, const MatmulConfig& cfg, int32_t* out) {
  const std::size_t n = w.cols();
  const int32_t zpa = cfg.in.zero_point, zpw = w.qparams.zero_point;
  std::vector<int32_t> acc(rows * n, 0);
  if (cfg.exact_w.data.size() == w.size()) {
    std::vector<float> af(rows * k), accf(rows * n);
    for (std::size_t i = 0; i < af.size(); ++i) af[i] = float(a[i] - zpa);
    matmul_into(af, rows, cfg.exact_w, {}, accf);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = int32_t(accf[i]);
  } else {
    const int32_t* wd = w.data.data();
    for (std::size_t i = 0; i < rows; ++i) {
      int32_t* ai = acc.data() + i * n;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const int32_t d = a[i * k + kk] - zpa;
        const int32_t* wr = wd + kk * n;
        for (std::size_t j = 0; j < n; ++j) ai[j] += d * (wr[j] - zpw);
      }
    }
  }
  requantize_rows(acc.data(), rows, n, bias, cfg, out);
}

}  // namespace detail

// out = requantize(sum_k (a - zp_a)(w - zp_w) + bias). `w` is [k x n], with
// per-column scales when quantized per output channel.
inline IntTensor int_matmul(const IntTensor& a, const IntTensor& w, std::span<const int32_t> bias,
                            const MatmulConfig& cfg) {
  detail::require_shape2(a, "matmul input");
  require(w.shape.size() == 2, ErrorKind::shape_mismatch, "matmul weight must be a matrix");
  require(a.cols() == w.shape[0], ErrorKind::shape_mismatch,
          "matmul inner dimensions differ: " + std::to_string(a.cols()) + " vs " +
              std::to_string(w.shape[0]));
  require(bias.empty() || bias.size() == w.cols(), ErrorKind::shape_mismatch,
          "bias length differs from output channels");
  require(cfg.mult.size() == w.cols(), ErrorKind::shape_mismatch,
          "matmul config built for a different weight");
  IntTensor out = detail::empty_like({a.rows(), w.cols()}, cfg.out);
  detail::matmul_rows(a.data.data(), a.rows(), a.cols(), w, bias, cfg, out.data.data());
  return out;
}

// ---------------------------------------------------------------- softmax

// Probabilities are emitted as 8-bit codes with scale 1/255 and zero point -128,
// so codes -128..127 cover [0, 1].
inline QuantParams softmax_output_qparams() {
  return QuantParams{1.0 / 255.0, -128, 8, false, Granularity::per_tensor};
}

inline constexpr int32_t kSoftmaxUnits = 255;

struct SoftmaxConfig {
  QuantParams in;
  int64_t step_log2 = 0;  // s_in * log2(e) in Q24

  QuantParams out() const { return softmax_output_qparams(); }
};

inline SoftmaxConfig make_softmax_config(const QuantParams& in) {
  in.validate();
  return SoftmaxConfig{in, std::max<int64_t>(1, fx::to_fixed(in.scale * std::log2(std::exp(1.0))))};
}

namespace detail {

// One row. Each share is rounded half away from zero; when that leaves the row
// total more than one unit away from 255 the fewest shares with the smallest
// rounding slack are nudged back. The row maximum is kept a strict winner.
inline void softmax_row(const int32_t* x, std::size_t n, const SoftmaxConfig& cfg, int32_t* out,
                        std::vector<int64_t>& e, std::vector<int64_t>& rem,
                        std::vector<std::size_t>& order) {
  std::size_t w = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (x[i] > x[w]) w = i;
  e.resize(n);
  rem.resize(n);
  int64_t sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    e[i] = fx::exp2_neg(int64_t(x[i] - x[w]) * cfg.step_log2);
    sum += e[i];
  }
  int64_t total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int64_t num = e[i] * kSoftmaxUnits;
    rem[i] = num % sum;
    out[i] = int32_t(num / sum + (2 * rem[i] >= sum ? 1 : 0));
    total += out[i];
  }
  if (total > kSoftmaxUnits + 1 || total < kSoftmaxUnits - 1) {
    const bool over = total > kSoftmaxUnits;
    // Rounding slack: how far the rounded share sits from its exact value.
    order.clear();
    for (std::size_t i = 0; i < n; ++i)
      if (over ? (2 * rem[i] >= sum && out[i] > 0) : (2 * rem[i] < sum)) order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return over ? rem[a] < rem[b] : rem[a] > rem[b];
    });
    std::size_t need = std::size_t(over ? total - kSoftmaxUnits - 1 : kSoftmaxUnits - 1 - total);
    for (std::size_t i = 0; i < order.size() && need > 0; ++i, --need) out[order[i]] += over ? -1 : 1;
  }
  for (std::size_t i = 0; i < n; ++i)
    if (i != w && (i < w ? out[i] >= out[w] : out[i] > out[w])) {
      --out[i];
      ++out[w];
    }
  for (std::size_t i = 0; i < n; ++i) out[i] = std::min(out[i], kSoftmaxUnits) - 128;
}

}  // namespace detail

// Row-wise softmax over the last axis.
inline IntTensor int_softmax(const IntTensor& logits, const SoftmaxConfig& cfg) {
  detail::require_shape2(logits, "softmax input");
  require(logits.cols() >= 1, ErrorKind::shape_mismatch, "softmax rows must be non-empty");
  IntTensor out = detail::empty_like(logits.shape, cfg.out());
  std::vector<int64_t> e, rem;
  std::vector<std::size_t> order;
  for (std::size_t r = 0; r < logits.rows(); ++r)
    detail::softmax_row(logits.row(r).data(), logits.cols(), cfg, out.row(r).data(), e, rem, order);
  return out;
}

// ---------------------------------------------------------------- GELU

// x * sigmoid(1.5957691 (x + 0.044715 x^3)), evaluated in Q24. Inputs of up to
// 8 bits are served from a table built with the same integer routine.
struct GeluConfig {
  QuantParams in, out;
  int64_t in_step = 0;        // s_in in Q24
  ScaleMultiplier out_mult;   // 2^-24 / s_out
  std::vector<int32_t> table;  // indexed by code - qmin(in.bits)
};

namespace detail {

inline int32_t gelu_code(int32_t code, const GeluConfig& c) {
  const int64_t x = int64_t(code - c.in.zero_point) * c.in_step;
  const int64_t lim = 10 * fx::kOne;
  const int64_t xc = std::clamp(x, -lim, lim);
  const int64_t x2 = rounding_shift(xc * xc, fx::kFrac);
  const int64_t x3 = rounding_shift(x2 * xc, fx::kFrac);
  const int64_t inner = xc + rounding_shift(750193 * x3, fx::kFrac);  // 0.044715
  const int64_t z = rounding_shift(26772563 * inner, fx::kFrac);      // 2 sqrt(2/pi)
  const int64_t y = rounding_shift_wide(__int128{x} * fx::sigmoid(z), fx::kFrac);
  return clamp_code(apply_scale(y, c.out_mult) + c.out.zero_point, c.out.bits);
}

}  // namespace detail

inline GeluConfig make_gelu_config(const QuantParams& in, const QuantParams& out) {
  in.validate();
  out.validate();
  GeluConfig c{in, out, fx::to_fixed(in.scale), encode_scale(std::ldexp(1.0, -fx::kFrac) / out.scale), {}};
  if (in.bits <= 8) {
    for (int32_t code = in.lo(); code <= in.hi(); ++code) c.table.push_back(detail::gelu_code(code, c));
  }
  return c;
}

inline IntTensor int_gelu(const IntTensor& x, const GeluConfig& cfg) {
  IntTensor out = detail::empty_like(x.shape, cfg.out);
  const int32_t lo = cfg.in.lo();
  for (std::size_t i = 0; i < x.size(); ++i)
    out.data[i] = cfg.table.empty() ? detail::gelu_code(x.data[i], cfg)
                                    : cfg.table[std::size_t(x.data[i] - lo)];
  return out;
}

// ---------------------------------------------------------------- LayerNorm

struct LayerNormConfig {
  QuantParams in, out;
  std::vector<int64_t> gamma, beta;  // gamma / s_out and beta / s_out, Q16
  int64_t sqrt_n = 0;                // sqrt(N) in Q16
  int64_t eps = 0;                   // N * eps / s_in^2, Q16 (variance-sum units at k = 0)
};

// `gamma` and `beta` are the (already quantized) affine parameters, given as
// IntTensors with their own qparams.
inline LayerNormConfig make_layernorm_config(const QuantParams& in, const IntTensor& gamma,
                                             const IntTensor& beta, const QuantParams& out,
                                             double eps = 1e-5) {
  in.validate();
  out.validate();
  const std::size_t n = gamma.size();
  require(n >= 2 && beta.size() == n, ErrorKind::shape_mismatch,
          "layernorm needs rows of length >= 2 and matching gamma/beta");
  const int64_t span = int64_t{2} << in.bits;  // 2 * max|x - zp|
  require(int64_t(n) * span * span < (int64_t{1} << 31), ErrorKind::overflow_risk,
          "layernorm row too long for a 32-bit variance accumulator");
  LayerNormConfig c{in, out, {}, {}, fx::isqrt(uint64_t(n) << 32),
                    fx::to_fixed(std::min(double(n) * eps / (in.scale * in.scale), 1e9), 16)};
  const auto g = dequantize(gamma), b = dequantize(beta);
  for (std::size_t i = 0; i < n; ++i) {
    c.gamma.push_back(fx::to_fixed(double(g[i]) / out.scale, 16));
    c.beta.push_back(fx::to_fixed(double(b[i]) / out.scale, 16));
  }
  return c;
}

namespace detail {

inline void layernorm_row(const int32_t* x, std::size_t n, const LayerNormConfig& c, int32_t* out) {
  int32_t sum = 0, maxabs = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int32_t d = x[i] - c.in.zero_point;
    sum += d;
    maxabs = std::max(maxabs, std::abs(d));
  }
  // Largest fractional precision that keeps sum(c^2) inside 31 bits.
  int k = 0;
  while (k < 16) {
    const int64_t bound = (int64_t{2} * maxabs) << (k + 1);
    if (int64_t(n) * bound * bound >= (int64_t{1} << 31)) break;
    ++k;
  }
  const int32_t mean = int32_t(rounding_div(int64_t(sum) << k, int64_t(n)));
  uint32_t var = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int32_t ci = ((x[i] - c.in.zero_point) << k) - mean;
    var += uint32_t(int64_t(ci) * ci);
  }
  // The float epsilon carried into integer units, plus one so constant rows stay defined.
  const uint64_t eps = uint64_t(rounding_shift(c.eps, 16 - 2 * k));
  int h = 0;
  const int64_t y = fx::inv_sqrt(uint64_t(var) + eps + 1, h);
  for (std::size_t i = 0; i < n; ++i) {
    const int64_t ci = (int64_t(x[i] - c.in.zero_point) << k) - mean;
    const int64_t r = rounding_shift(ci * y, h);                // c / sqrt(var), Q30
    const int64_t norm = rounding_shift(r * c.sqrt_n, 30);      // Q16
    const int64_t v = rounding_shift(c.gamma[i] * norm, 16) + c.beta[i];
    out[i] = clamp_code(rounding_shift(v, 16) + c.out.zero_point, c.out.bits);
  }
}

}  // namespace detail

inline IntTensor int_layernorm(const IntTensor& x, const LayerNormConfig& cfg) {
  detail::require_shape2(x, "layernorm input");
  require(x.cols() == cfg.gamma.size(), ErrorKind::shape_mismatch,
          "layernorm row length differs from gamma");
  IntTensor out = detail::empty_like(x.shape, cfg.out);
  for (std::size_t r = 0; r < x.rows(); ++r)
    detail::layernorm_row(x.row(r).data(), x.cols(), cfg, out.row(r).data());
  return out;
}

// ---------------------------------------------------------------- elementwise add

struct AddConfig {
  QuantParams a, b, out;
  ScaleMultiplier ma, mb;  // s_a / s_out, s_b / s_out
};

inline AddConfig make_add_config(const QuantParams& a, const QuantParams& b, const QuantParams& out) {
  a.validate();
  b.validate();
  out.validate();
  return AddConfig{a, b, out, encode_scale(a.scale / out.scale), encode_scale(b.scale / out.scale)};
}

inline int32_t add_codes(int32_t x, int32_t y, const AddConfig& c) {
  const int64_t t = apply_scale(x - c.a.zero_point, c.ma, 16) + apply_scale(y - c.b.zero_point, c.mb, 16);
  return clamp_code(rounding_shift(t, 16) + c.out.zero_point, c.out.bits);
}

inline IntTensor int_add(const IntTensor& a, const IntTensor& b, const AddConfig& cfg) {
  require(a.shape == b.shape, ErrorKind::shape_mismatch, "add operands differ in shape");
  IntTensor out = detail::empty_like(a.shape, cfg.out);
  for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = add_codes(a.data[i], b.data[i], cfg);
  return out;
}

// ---------------------------------------------------------------- attention

struct AttentionConfig {
  QuantParams q, k, v, logits, out;
  std::size_t n_heads = 1;
  ScaleMultiplier logit_mult;  // s_q s_k / (sqrt(d_head) s_logits): the 1/sqrt(d) is folded here
  SoftmaxConfig softmax;
  ScaleMultiplier out_mult;    // s_v / (255 s_out)
};

inline AttentionConfig make_attention_config(const QuantParams& q, const QuantParams& k,
                                             const QuantParams& v, const QuantParams& logits,
                                             const QuantParams& out, std::size_t d_model,
                                             std::size_t n_heads) {
  require(n_heads >= 1 && d_model % n_heads == 0, ErrorKind::shape_mismatch,
          "d_model must be divisible by n_heads");
  for (const auto* p : {&q, &k, &v, &logits, &out}) p->validate();
  const double dh = double(d_model / n_heads);
  return AttentionConfig{q,
                         k,
                         v,
                         logits,
                         out,
                         n_heads,
                         encode_scale(q.scale * k.scale / (std::sqrt(dh) * logits.scale)),
                         make_softmax_config(logits),
                         encode_scale(v.scale / (kSoftmaxUnits * out.scale))};
}

namespace detail {

// Causal attention for `n_q` query rows at absolute positions offset..offset+n_q-1
// over `n_k` cached key/value rows. When `received` is given, adds each key's
// probability units summed over heads and queries.
inline void attention_rows(const int32_t* q, std::size_t n_q, const int32_t* k, const int32_t* v,
                           std::size_t n_k, std::size_t d, const AttentionConfig& c, bool causal,
                           std::size_t offset, int32_t* out, int64_t* received) {
  const std::size_t dh = d / c.n_heads;
  std::vector<int32_t> logits(n_k), probs(n_k);
  std::vector<int64_t> e, rem;
  std::vector<std::size_t> order;
  std::vector<int32_t> acc(dh);
  for (std::size_t i = 0; i < n_q; ++i) {
    const std::size_t keys = causal ? std::min(n_k, offset + i + 1) : n_k;
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const int32_t* qh = q + i * d + h * dh;
      for (std::size_t j = 0; j < keys; ++j) {
        const int32_t* kj = k + j * d + h * dh;
        int32_t s = 0;
        for (std::size_t t = 0; t < dh; ++t) s += (qh[t] - c.q.zero_point) * (kj[t] - c.k.zero_point);
        logits[j] = clamp_code(apply_scale(s, c.logit_mult) + c.logits.zero_point, c.logits.bits);
      }
      softmax_row(logits.data(), keys, c.softmax, probs.data(), e, rem, order);
      std::fill(acc.begin(), acc.end(), 0);
      for (std::size_t j = 0; j < keys; ++j) {
        const int32_t p = probs[j] + 128;
        if (received) received[j] += p;
        if (p == 0) continue;
        const int32_t* vj = v + j * d + h * dh;
        for (std::size_t t = 0; t < dh; ++t) acc[t] += p * (vj[t] - c.v.zero_point);
      }
      int32_t* oh = out + i * d + h * dh;
      for (std::size_t t = 0; t < dh; ++t)
        oh[t] = clamp_code(apply_scale(acc[t], c.out_mult) + c.out.zero_point, c.out.bits);
    }
  }
}

}  // namespace detail

// Scaled dot-product attention over [t x d] q/k/v with heads laid out
// contiguously along d.
inline IntTensor int_attention(const IntTensor& q, const IntTensor& k, const IntTensor& v,
                               const AttentionConfig& cfg, bool causal = true) {
  require(q.shape.size() == 2 && k.shape.size() == 2 && v.shape.size() == 2,
          ErrorKind::shape_mismatch, "attention operands must be matrices");
  require(q.cols() == k.cols() && k.shape == v.shape, ErrorKind::shape_mismatch,
          "attention q/k/v shapes are inconsistent");
  require(q.cols() % cfg.n_heads == 0, ErrorKind::shape_mismatch,
          "attention width not divisible by head count");
  require(!causal || q.rows() <= k.rows(), ErrorKind::shape_mismatch,
          "causal attention needs at least as many keys as queries");
  IntTensor out = detail::empty_like({q.rows(), q.cols()}, cfg.out);
  detail::attention_rows(q.data.data(), q.rows(), k.data.data(), v.data.data(), k.rows(), q.cols(),
                         cfg, causal, k.rows() - q.rows(), out.data.data(), nullptr);
  return out;
}

}  // namespace qtk
