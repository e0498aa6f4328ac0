#pragma once

// Integer-only execution of a Model: activation calibration on the float path,
// lowering to IntModel under a PrecisionAssignment, and the integer forward
// pass (full sequence, KV-cached, token drop).

#include <map>
#include <utility>

#include "qtk/corpus.hpp"
#include "qtk/int_kernels.hpp"
#include "qtk/model.hpp"

namespace qtk {

inline constexpr int kActivationBits = 8;
inline constexpr int kLogitBits = 16;

// Observed [min, max] per activation point, keyed by (block, point); global
// points use block -1.
struct ActivationCalibration {
  std::map<std::pair<int, ActPoint>, std::pair<double, double>> ranges;
  double clip_percentile = 100.0;
  std::string fingerprint;

  bool empty() const { return ranges.empty(); }

  QuantParams qparams(ActPoint p, int block) const {
    require(!empty(), ErrorKind::uncalibrated, "activation calibration has not been run");
    const auto it = ranges.find({block, p});
    require(it != ranges.end(), ErrorKind::uncalibrated,
            std::string("no calibration range for ") + to_string(p) + " in block " +
                std::to_string(block));
    const int bits = p == ActPoint::logits ? kLogitBits : kActivationBits;
    return qparams_from_range(it->second.first, it->second.second, bits, false);
  }
};

class CalibrationObserver : public Observer {
 public:
  explicit CalibrationObserver(double clip_percentile = 100.0) : clip_(clip_percentile) {}

  void observe(ActPoint point, int block, std::span<const float> values) override {
    if (values.empty()) return;
    double lo = *std::min_element(values.begin(), values.end());
    double hi = *std::max_element(values.begin(), values.end());
    if (clip_ < 100.0) {
      // Clipping is applied per observed batch; the range is the union.
      const double cap = percentile_abs(values, clip_);
      lo = std::max(lo, -cap);
      hi = std::min(hi, cap);
    }
    auto [it, fresh] = ranges_.try_emplace({block, point}, lo, hi);
    if (!fresh) {
      it->second.first = std::min(it->second.first, lo);
      it->second.second = std::max(it->second.second, hi);
    }
  }

  ActivationCalibration result() const { return ActivationCalibration{ranges_, clip_, {}}; }

 private:
  double clip_;
  std::map<std::pair<int, ActPoint>, std::pair<double, double>> ranges_;
};

// Min/max calibration of every activation point on the float model.
inline ActivationCalibration calibrate(const Model& m, const CorpusSlice& slice,
                                       double clip_percentile = 100.0) {
  require(!slice.empty(), ErrorKind::invalid_argument, "calibration slice is empty");
  require(clip_percentile > 0.0 && clip_percentile <= 100.0, ErrorKind::invalid_argument,
          "clip percentile must be in (0, 100]");
  CalibrationObserver obs(clip_percentile);
  for (const auto& seq : slice.sequences) forward_float(m, seq, &obs);
  ActivationCalibration c = obs.result();
  c.fingerprint = slice.fingerprint();
  return c;
}

struct IntLinear {
  IntTensor w;
  std::vector<int32_t> bias;
  MatmulConfig cfg;
};

struct IntBlock {
  QuantParams in;
  LayerNormConfig ln1;
  IntLinear q, k, v, o;
  AttentionConfig attn;
  AddConfig res1;
  LayerNormConfig ln2;
  IntLinear fc1;
  GeluConfig gelu;
  IntLinear fc2;
  AddConfig res2;
};

struct IntModel {
  ModelConfig config;
  std::optional<TokenDropConfig> token_drop;
  PrecisionAssignment assignment;
  IntTensor tok, pos;                       // per-row symmetric codes
  std::vector<ScaleMultiplier> tok_mult, pos_mult;  // row scale / embed_out scale
  QuantParams embed_out;
  std::vector<IntBlock> blocks;
  LayerNormConfig ln_f;
  IntLinear head;
};

using IntKVCache = KVCacheT<int32_t>;

namespace detail {

inline void check_accumulator(std::size_t inner, int64_t max_a, int64_t max_w, const std::string& what) {
  require(ModelConfig::accumulator_fits(inner, max_a, max_w), ErrorKind::overflow_risk,
          what + ": worst-case accumulator exceeds 32 bits (inner=" + std::to_string(inner) + ")");
}

inline IntLinear lower_linear(const Matrix& w, std::span<const float> bias, int bits,
                              const QuantParams& in, const QuantParams& out, const std::string& what) {
  check_accumulator(w.rows, 255, qmax(bits), what);
  IntLinear l;
  l.w = quantize_per_channel(w.data, w.rows, w.cols, bits, ChannelAxis::columns).tensor;
  if (!bias.empty()) {
    std::vector<float> b(bias.begin(), bias.end());
    fake_quantize_tensor(b, bits);
    l.bias = quantize_bias(b, in.scale, l.w);
  }
  l.cfg = make_matmul_config(in, l.w, out);
  return l;
}

inline IntTensor lower_vector(std::span<const float> v, int bits) {
  double amax = 0.0;
  for (float x : v) amax = std::max(amax, double(std::fabs(x)));
  return quantize(v, qparams_from_range(-amax, amax, bits, true));
}

inline LayerNormConfig lower_layernorm(const LayerNormParams& p, int bits, const QuantParams& in,
                                       const QuantParams& out) {
  return make_layernorm_config(in, lower_vector(p.gamma, bits), lower_vector(p.beta, bits), out,
                               kLayerNormEps);
}

}  // namespace detail

// Lowers `m` to the integer path: weights per `assignment`, activations at
// 8 bits from `calib`, logits at 16 bits.
inline IntModel build_int_model(const Model& m, const PrecisionAssignment& assignment,
                                const ActivationCalibration& calib) {
  const ModelConfig& cfg = m.config;
  assignment.validate(m.blocks.size());
  require(!calib.empty(), ErrorKind::uncalibrated,
          "integer execution requires activation calibration");
  detail::check_accumulator(cfg.d_head(), 255, 255, "attention scores");
  detail::check_accumulator(cfg.max_seq_len, 255, 255, "attention values");
  const std::size_t d = cfg.d_model;

  IntModel im;
  im.config = cfg;
  im.config.n_blocks = m.blocks.size();
  im.token_drop = m.token_drop;
  im.assignment = assignment;

  const int eb = assignment.bits(BlockId::embedding());
  im.embed_out = calib.qparams(ActPoint::embed_out, -1);
  auto lower_table = [&](const Matrix& t, IntTensor& codes, std::vector<ScaleMultiplier>& mult) {
    const ChannelQuantized q = quantize_per_channel(t.data, t.rows, t.cols, eb, ChannelAxis::rows);
    codes = q.tensor;
    for (double s : q.scales) mult.push_back(encode_scale(s / im.embed_out.scale));
  };
  lower_table(m.tok_emb, im.tok, im.tok_mult);
  lower_table(m.pos_emb, im.pos, im.pos_mult);

  QuantParams x = im.embed_out;
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    const TransformerBlock& b = m.blocks[i];
    const int bits = assignment.bits(BlockId::transformer(i));
    const int bi = int(i);
    auto qp = [&](ActPoint p) { return calib.qparams(p, bi); };
    const std::string tag = "block " + std::to_string(i);
    IntBlock ib;
    ib.in = x;
    ib.ln1 = detail::lower_layernorm(b.ln1, bits, x, qp(ActPoint::ln1_out));
    ib.q = detail::lower_linear(b.q.w, b.q.b, bits, qp(ActPoint::ln1_out), qp(ActPoint::q), tag + " q");
    ib.k = detail::lower_linear(b.k.w, b.k.b, bits, qp(ActPoint::ln1_out), qp(ActPoint::k), tag + " k");
    ib.v = detail::lower_linear(b.v.w, b.v.b, bits, qp(ActPoint::ln1_out), qp(ActPoint::v), tag + " v");
    ib.attn = make_attention_config(qp(ActPoint::q), qp(ActPoint::k), qp(ActPoint::v),
                                    qp(ActPoint::att_logits), qp(ActPoint::att_out), d, cfg.n_heads);
    ib.o = detail::lower_linear(b.o.w, b.o.b, bits, qp(ActPoint::att_out), qp(ActPoint::attn_proj),
                                tag + " o");
    ib.res1 = make_add_config(x, qp(ActPoint::attn_proj), qp(ActPoint::resid1));
    ib.ln2 = detail::lower_layernorm(b.ln2, bits, qp(ActPoint::resid1), qp(ActPoint::ln2_out));
    ib.fc1 = detail::lower_linear(b.fc1.w, b.fc1.b, bits, qp(ActPoint::ln2_out),
                                  qp(ActPoint::mlp_hidden), tag + " fc1");
    ib.gelu = make_gelu_config(qp(ActPoint::mlp_hidden), qp(ActPoint::gelu_out));
    ib.fc2 = detail::lower_linear(b.fc2.w, b.fc2.b, bits, qp(ActPoint::gelu_out),
                                  qp(ActPoint::mlp_out), tag + " fc2");
    ib.res2 = make_add_config(qp(ActPoint::resid1), qp(ActPoint::mlp_out), qp(ActPoint::resid2));
    x = qp(ActPoint::resid2);
    im.blocks.push_back(std::move(ib));
  }
  const int hb = assignment.bits(BlockId::output_head());
  im.ln_f = detail::lower_layernorm(m.ln_f, hb, x, calib.qparams(ActPoint::lnf_out, -1));
  im.head = detail::lower_linear(m.head, {}, hb, calib.qparams(ActPoint::lnf_out, -1),
                                 calib.qparams(ActPoint::logits, -1), "head");
  return im;
}

namespace detail {

inline IntTensor int_embed(const IntModel& m, std::span<const int> tokens, std::size_t past) {
  const std::size_t d = m.config.d_model;
  IntTensor x = empty_like({tokens.size(), d}, m.embed_out);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto t = std::size_t(tokens[i]), p = past + i;
    const int32_t* tr = m.tok.data.data() + t * d;
    const int32_t* pr = m.pos.data.data() + p * d;
    for (std::size_t j = 0; j < d; ++j) {
      const int64_t v = apply_scale(tr[j], m.tok_mult[t], 16) + apply_scale(pr[j], m.pos_mult[p], 16);
      x.data[i * d + j] = clamp_code(rounding_shift(v, 16) + m.embed_out.zero_point, m.embed_out.bits);
    }
  }
  return x;
}

inline IntTensor linear(const IntTensor& x, const IntLinear& l) {
  IntTensor out = empty_like({x.rows(), l.w.cols()}, l.cfg.out);
  matmul_rows(x.data.data(), x.rows(), x.cols(), l.w, l.bias, l.cfg, out.data.data());
  return out;
}

inline void int_block_forward(const IntBlock& b, IntTensor& x, std::vector<int32_t>& kc,
                              std::vector<int32_t>& vc, std::size_t past,
                              std::vector<int64_t>* received) {
  const std::size_t n = x.rows(), d = x.cols();
  const IntTensor h = int_layernorm(x, b.ln1);
  const IntTensor q = linear(h, b.q), k = linear(h, b.k), v = linear(h, b.v);
  kc.insert(kc.end(), k.data.begin(), k.data.end());
  vc.insert(vc.end(), v.data.begin(), v.data.end());
  IntTensor att = empty_like({n, d}, b.attn.out);
  if (received) received->assign(past + n, 0);
  attention_rows(q.data.data(), n, kc.data(), vc.data(), past + n, d, b.attn, true, past,
                 att.data.data(), received ? received->data() : nullptr);
  const IntTensor o = linear(att, b.o);
  const IntTensor x1 = int_add(x, o, b.res1);
  const IntTensor h2 = int_layernorm(x1, b.ln2);
  const IntTensor g = int_gelu(linear(h2, b.fc1), b.gelu);
  x = int_add(x1, linear(g, b.fc2), b.res2);
}

inline IntTensor int_head(const IntModel& m, const IntTensor& x) {
  return linear(int_layernorm(x, m.ln_f), m.head);
}

}  // namespace detail

inline bool has_active_token_drop(const IntModel& m) {
  return m.token_drop && m.token_drop->keep_fraction < 1.0 &&
         m.token_drop->after_block + 1 < m.blocks.size();
}

inline IntKVCache make_cache(const IntModel& m) {
  return IntKVCache(m.blocks.size(), m.config.d_model, m.config.max_seq_len);
}

// Logits (16-bit codes) for `tokens` appended after the cached prefix.
inline IntTensor forward_int_cached(const IntModel& m, IntKVCache& cache, std::span<const int> tokens) {
  detail::check_tokens(m.config, tokens, cache.length);
  require(!has_active_token_drop(m), ErrorKind::unsupported,
          "KV-cached execution is not available for models with token drop");
  IntTensor x = detail::int_embed(m, tokens, cache.length);
  for (std::size_t i = 0; i < m.blocks.size(); ++i)
    detail::int_block_forward(m.blocks[i], x, cache.k[i], cache.v[i], cache.length, nullptr);
  cache.length += tokens.size();
  return detail::int_head(m, x);
}

inline IntTensor forward_int(const IntModel& m, std::span<const int> tokens) {
  if (!has_active_token_drop(m)) {
    IntKVCache cache = make_cache(m);
    return forward_int_cached(m, cache, tokens);
  }
  detail::check_tokens(m.config, tokens, 0);
  const TokenDropConfig& td = *m.token_drop;
  IntTensor x = detail::int_embed(m, tokens, 0);
  std::vector<int64_t> received;
  std::size_t b = 0;
  for (; b <= td.after_block; ++b) {
    std::vector<int32_t> kc, vc;
    detail::int_block_forward(m.blocks[b], x, kc, vc, 0, b == td.after_block ? &received : nullptr);
  }
  const std::vector<double> score(received.begin(), received.end());
  const std::vector<std::size_t> kept = detail::select_kept_rows(score, td.keep_fraction);
  const std::size_t d = m.config.d_model;
  IntTensor xk = detail::empty_like({kept.size(), d}, x.qparams);
  for (std::size_t i = 0; i < kept.size(); ++i)
    std::copy_n(x.data.begin() + std::ptrdiff_t(kept[i] * d), d, xk.data.begin() + std::ptrdiff_t(i * d));
  for (; b < m.blocks.size(); ++b) {
    std::vector<int32_t> kc, vc;
    detail::int_block_forward(m.blocks[b], xk, kc, vc, 0, nullptr);
  }
  // Dropped rows rejoin at the final norm; their residual stream carries the
  // last block's output qparams as-is.
  IntTensor full = detail::empty_like({tokens.size(), d}, xk.qparams);
  const AddConfig carry = make_add_config(x.qparams, x.qparams, xk.qparams);
  for (std::size_t r = 0; r < tokens.size(); ++r)
    for (std::size_t j = 0; j < d; ++j)
      full.data[r * d + j] = clamp_code(
          rounding_shift(apply_scale(x.data[r * d + j] - x.qparams.zero_point, carry.ma, 16), 16) +
              xk.qparams.zero_point,
          xk.qparams.bits);
  for (std::size_t i = 0; i < kept.size(); ++i)
    std::copy_n(xk.data.begin() + std::ptrdiff_t(i * d), d, full.data.begin() + std::ptrdiff_t(kept[i] * d));
  return detail::int_head(m, full);
}

// Convenience: lower and run in one call.
inline IntTensor forward_int(const Model& m, std::span<const int> tokens,
                             const PrecisionAssignment& assignment, const ActivationCalibration& calib) {
  return forward_int(build_int_model(m, assignment, calib), tokens);
}

inline std::size_t row_argmax(const IntTensor& logits, std::size_t r) {
  const auto row = logits.row(r);
  return std::size_t(std::max_element(row.begin(), row.end()) - row.begin());
}
inline std::size_t logits_rows(const IntTensor& t) { return t.rows(); }

struct IntEngine {
  const IntModel* model;
  using Cache = IntKVCache;
  using Logits = IntTensor;

  explicit IntEngine(const IntModel& m) : model(&m) {}
  const ModelConfig& config() const { return model->config; }
  Cache make_cache() const { return qtk::make_cache(*model); }
  Logits extend(Cache& c, std::span<const int> tokens) const { return forward_int_cached(*model, c, tokens); }
  Logits full(std::span<const int> tokens) const { return forward_int(*model, tokens); }
};

inline std::vector<int> decode_greedy(const IntModel& m, std::span<const int> prompt,
                                      std::size_t n_steps, bool use_cache = true) {
  return greedy_decode(IntEngine(m), prompt, n_steps, use_cache);
}

}  // namespace qtk
