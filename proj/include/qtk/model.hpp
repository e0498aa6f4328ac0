#pragma once

// Toy decoder-only transformer with an explicit block hierarchy: embedding,
// N pre-LN transformer blocks, output head. Float reference forward pass,
// KV cache and greedy decoding live here; the integer path is in int_model.hpp.

#include <algorithm>
#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qtk/error.hpp"
#include "qtk/quant.hpp"
#include "qtk/tensor.hpp"

namespace qtk {

struct ModelConfig {
  std::size_t n_blocks = 6;
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t vocab_size = 256;
  std::size_t max_seq_len = 128;

  std::size_t d_head() const { return d_model / n_heads; }

  // Worst-case 32-bit accumulator check: 8-bit asymmetric activations
  // (|a - zp| <= 255) against 16-bit symmetric weights (|w| <= 32767).
  static bool accumulator_fits(std::size_t inner, int64_t max_a, int64_t max_w) {
    return int64_t(inner) * max_a * max_w <= int64_t{INT32_MAX};
  }

  void validate() const {
    require(n_blocks >= 1 && d_model >= 1 && n_heads >= 1 && d_ff >= 1 && vocab_size >= 1 &&
                max_seq_len >= 1,
            ErrorKind::invalid_argument, "model dimensions must be >= 1");
    require(d_model % n_heads == 0, ErrorKind::invalid_argument,
            "d_model must be divisible by n_heads");
    const int64_t a = 255, w = qmax(kBaselineBits);
    require(accumulator_fits(d_model, a, w) && accumulator_fits(d_ff, a, w) &&
                accumulator_fits(d_head(), a, a) && accumulator_fits(max_seq_len, a, a),
            ErrorKind::overflow_risk,
            "configured shapes can overflow a 32-bit accumulator (d_model=" +
                std::to_string(d_model) + ", d_ff=" + std::to_string(d_ff) + ")");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct BlockId {
  enum class Kind { embedding = 0, transformer = 1, output_head = 2 };
  Kind kind = Kind::embedding;
  std::size_t index = 0;

  static BlockId embedding() { return {Kind::embedding, 0}; }
  static BlockId transformer(std::size_t i) { return {Kind::transformer, i}; }
  static BlockId output_head() { return {Kind::output_head, 0}; }

  auto operator<=>(const BlockId&) const = default;
  bool operator==(const BlockId&) const = default;

  std::string str() const {
    switch (kind) {
      case Kind::embedding: return "embedding";
      case Kind::transformer: return "t" + std::to_string(index);
      case Kind::output_head: return "head";
    }
    return "?";
  }

  static BlockId parse(const std::string& s) {
    if (s == "embedding") return embedding();
    if (s == "head") return output_head();
    if (s.size() >= 2 && s[0] == 't' &&
        std::all_of(s.begin() + 1, s.end(), [](char c) { return c >= '0' && c <= '9'; }))
      return transformer(std::stoul(s.substr(1)));
    fail(ErrorKind::malformed_input, "unknown block id '" + s + "'");
  }
};

// Every assignable block of a model with `n_blocks` transformer blocks, in order.
inline std::vector<BlockId> assignable_blocks(std::size_t n_blocks) {
  std::vector<BlockId> out{BlockId::embedding()};
  for (std::size_t i = 0; i < n_blocks; ++i) out.push_back(BlockId::transformer(i));
  out.push_back(BlockId::output_head());
  return out;
}

// Bit-width per assignable block. Weights only; activations stay at 8 bits.
struct PrecisionAssignment {
  std::map<BlockId, int> bits_by_block;

  static PrecisionAssignment uniform(std::size_t n_blocks, int bits) {
    PrecisionAssignment a;
    for (const BlockId& b : assignable_blocks(n_blocks)) a.bits_by_block[b] = bits;
    return a;
  }

  int bits(const BlockId& b) const {
    const auto it = bits_by_block.find(b);
    require(it != bits_by_block.end(), ErrorKind::invalid_argument,
            "precision assignment is missing block " + b.str());
    return it->second;
  }

  void validate(std::size_t n_blocks) const {
    for (const BlockId& b : assignable_blocks(n_blocks)) require_bits(bits(b));
    require(bits_by_block.size() == n_blocks + 2, ErrorKind::invalid_argument,
            "precision assignment names blocks outside the model");
  }

  // "embedding=8,t0=4,...,head=16" in block order.
  std::string str() const {
    std::string s;
    for (const auto& [b, bits] : bits_by_block) {
      if (!s.empty()) s += ',';
      s += b.str() + '=' + std::to_string(bits);
    }
    return s;
  }

  static PrecisionAssignment parse(const std::string& text) {
    PrecisionAssignment a;
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t end = text.find(',', pos);
      if (end == std::string::npos) end = text.size();
      const std::string item = text.substr(pos, end - pos);
      const std::size_t eq = item.find('=');
      require(eq != std::string::npos, ErrorKind::malformed_input,
              "assignment entry '" + item + "' is not block=bits");
      int bits = 0;
      try {
        bits = std::stoi(item.substr(eq + 1));
      } catch (const std::exception&) {
        fail(ErrorKind::malformed_input, "assignment entry '" + item + "' has non-numeric bits");
      }
      require_bits(bits);
      a.bits_by_block[BlockId::parse(item.substr(0, eq))] = bits;
      pos = end + 1;
    }
    return a;
  }

  bool operator==(const PrecisionAssignment&) const = default;
};

struct LayerNormParams {
  std::vector<float> gamma, beta;
  bool operator==(const LayerNormParams&) const = default;
};

struct Linear {
  Matrix w;  // [in x out]
  std::vector<float> b;
  bool operator==(const Linear&) const = default;
};

struct TransformerBlock {
  LayerNormParams ln1;
  Linear q, k, v, o;
  LayerNormParams ln2;
  Linear fc1, fc2;

  std::size_t d_ff() const { return fc1.w.cols; }
  bool operator==(const TransformerBlock&) const = default;
};

struct TokenDropConfig {
  std::size_t after_block = 0;
  double keep_fraction = 1.0;
  bool operator==(const TokenDropConfig&) const = default;
};

struct Model {
  ModelConfig config;
  Matrix tok_emb;  // [vocab x d_model]
  Matrix pos_emb;  // [max_seq_len x d_model]
  std::vector<TransformerBlock> blocks;
  LayerNormParams ln_f;
  Matrix head;  // [d_model x vocab]
  std::optional<TokenDropConfig> token_drop;

  bool operator==(const Model&) const = default;
};

// How a parameter tensor is quantized: matrices per output channel (columns for
// x·W layouts, rows for lookup tables), vectors per tensor.
enum class ParamRole { matrix_cols, matrix_rows, vector };

template <typename T>
struct ParamView {
  std::string name;
  BlockId owner;
  std::vector<std::size_t> shape;
  std::span<T> data;
  ParamRole role;
};

namespace detail {

template <typename M, typename Fn>
void visit_params(M& m, Fn&& fn) {
  using T = std::conditional_t<std::is_const_v<M>, const float, float>;
  auto mat = [&](const std::string& name, BlockId owner, auto& mx, ParamRole role) {
    fn(ParamView<T>{name, owner, {mx.rows, mx.cols}, std::span<T>(mx.data), role});
  };
  auto vec = [&](const std::string& name, BlockId owner, auto& v) {
    fn(ParamView<T>{name, owner, {v.size()}, std::span<T>(v), ParamRole::vector});
  };
  mat("tok_emb", BlockId::embedding(), m.tok_emb, ParamRole::matrix_rows);
  mat("pos_emb", BlockId::embedding(), m.pos_emb, ParamRole::matrix_rows);
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const BlockId id = BlockId::transformer(i);
    const std::string p = "blocks." + std::to_string(i) + ".";
    vec(p + "ln1.gamma", id, b.ln1.gamma);
    vec(p + "ln1.beta", id, b.ln1.beta);
    mat(p + "attn.wq", id, b.q.w, ParamRole::matrix_cols);
    vec(p + "attn.bq", id, b.q.b);
    mat(p + "attn.wk", id, b.k.w, ParamRole::matrix_cols);
    vec(p + "attn.bk", id, b.k.b);
    mat(p + "attn.wv", id, b.v.w, ParamRole::matrix_cols);
    vec(p + "attn.bv", id, b.v.b);
    mat(p + "attn.wo", id, b.o.w, ParamRole::matrix_cols);
    vec(p + "attn.bo", id, b.o.b);
    vec(p + "ln2.gamma", id, b.ln2.gamma);
    vec(p + "ln2.beta", id, b.ln2.beta);
    mat(p + "mlp.w1", id, b.fc1.w, ParamRole::matrix_cols);
    vec(p + "mlp.b1", id, b.fc1.b);
    mat(p + "mlp.w2", id, b.fc2.w, ParamRole::matrix_cols);
    vec(p + "mlp.b2", id, b.fc2.b);
  }
  vec("ln_f.gamma", BlockId::output_head(), m.ln_f.gamma);
  vec("ln_f.beta", BlockId::output_head(), m.ln_f.beta);
  mat("head.w", BlockId::output_head(), m.head, ParamRole::matrix_cols);
}

}  // namespace detail

template <typename Fn>
void for_each_param(Model& m, Fn&& fn) {
  detail::visit_params(m, std::forward<Fn>(fn));
}
template <typename Fn>
void for_each_param(const Model& m, Fn&& fn) {
  detail::visit_params(m, std::forward<Fn>(fn));
}

inline std::size_t param_count(const Model& m, std::optional<BlockId> owner = std::nullopt) {
  std::size_t n = 0;
  for_each_param(m, [&](const ParamView<const float>& p) {
    if (!owner || p.owner == *owner) n += p.data.size();
  });
  return n;
}

// Zero-initialized model with the architecture's shapes. `block_d_ff` overrides
// the hidden MLP width per block (pruned models).
inline Model make_model(const ModelConfig& cfg, std::vector<std::size_t> block_d_ff = {}) {
  cfg.validate();
  if (block_d_ff.empty()) block_d_ff.assign(cfg.n_blocks, cfg.d_ff);
  require(block_d_ff.size() == cfg.n_blocks, ErrorKind::shape_mismatch,
          "per-block d_ff list length differs from n_blocks");
  const std::size_t d = cfg.d_model;
  Model m;
  m.config = cfg;
  m.tok_emb = Matrix(cfg.vocab_size, d);
  m.pos_emb = Matrix(cfg.max_seq_len, d);
  auto ln = [&] { return LayerNormParams{std::vector<float>(d, 1.0f), std::vector<float>(d, 0.0f)}; };
  auto lin = [](std::size_t in, std::size_t out) { return Linear{Matrix(in, out), std::vector<float>(out)}; };
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const std::size_t f = block_d_ff[i];
    require(f >= 1 && f <= cfg.d_ff, ErrorKind::invalid_argument, "block d_ff out of range");
    m.blocks.push_back(TransformerBlock{ln(), lin(d, d), lin(d, d), lin(d, d), lin(d, d), ln(),
                                        lin(d, f), lin(f, d)});
  }
  m.ln_f = ln();
  m.head = Matrix(d, cfg.vocab_size);
  return m;
}

inline Model init_random(const ModelConfig& cfg, uint64_t seed) {
  Model m = make_model(cfg);
  std::mt19937_64 rng(seed);
  const float proj_std = 0.02f / std::sqrt(2.0f * float(cfg.n_blocks));
  for_each_param(m, [&](const ParamView<float>& p) {
    if (p.role == ParamRole::vector) return;  // gamma = 1, beta = bias = 0
    const bool residual_proj = p.name.ends_with("attn.wo") || p.name.ends_with("mlp.w2");
    std::normal_distribution<float> dist(0.0f, residual_proj ? proj_std : 0.02f);
    for (float& v : p.data) v = dist(rng);
  });
  return m;
}

// Named activation points, observed during calibration and quantized in the
// integer path. Global points use block index -1.
enum class ActPoint {
  embed_out,
  ln1_out,
  q,
  k,
  v,
  att_logits,
  att_out,
  attn_proj,
  resid1,
  ln2_out,
  mlp_hidden,
  gelu_out,
  mlp_out,
  resid2,
  lnf_out,
  logits,
};

inline constexpr ActPoint kBlockPoints[] = {
    ActPoint::ln1_out,  ActPoint::q,       ActPoint::k,          ActPoint::v,
    ActPoint::att_logits, ActPoint::att_out, ActPoint::attn_proj,  ActPoint::resid1,
    ActPoint::ln2_out,  ActPoint::mlp_hidden, ActPoint::gelu_out, ActPoint::mlp_out,
    ActPoint::resid2};

inline const char* to_string(ActPoint p) {
  switch (p) {
    case ActPoint::embed_out: return "embed_out";
    case ActPoint::ln1_out: return "ln1_out";
    case ActPoint::q: return "q";
    case ActPoint::k: return "k";
    case ActPoint::v: return "v";
    case ActPoint::att_logits: return "att_logits";
    case ActPoint::att_out: return "att_out";
    case ActPoint::attn_proj: return "attn_proj";
    case ActPoint::resid1: return "resid1";
    case ActPoint::ln2_out: return "ln2_out";
    case ActPoint::mlp_hidden: return "mlp_hidden";
    case ActPoint::gelu_out: return "gelu_out";
    case ActPoint::mlp_out: return "mlp_out";
    case ActPoint::resid2: return "resid2";
    case ActPoint::lnf_out: return "lnf_out";
    case ActPoint::logits: return "logits";
  }
  return "?";
}

class Observer {
 public:
  virtual ~Observer() = default;
  virtual void observe(ActPoint point, int block, std::span<const float> values) = 0;
};

// Instrumented operation counts, for cross-checking the analytic MAC model.
struct OpCounter {
  uint64_t macs = 0;
  uint64_t matmuls = 0;
  uint64_t attentions = 0;
  uint64_t layernorms = 0;
  uint64_t gelus = 0;
  uint64_t adds = 0;
};

// Per-block key/value rows for the positions seen so far.
template <typename T>
struct KVCacheT {
  std::vector<std::vector<T>> k, v;  // per block, length * d_model
  std::size_t length = 0;
  std::size_t capacity = 0;
  std::size_t d_model = 0;

  KVCacheT() = default;
  KVCacheT(std::size_t n_blocks, std::size_t d, std::size_t cap)
      : k(n_blocks), v(n_blocks), capacity(cap), d_model(d) {}

  void truncate(std::size_t len) {
    require(len <= length, ErrorKind::invalid_argument, "cannot truncate a cache forward");
    for (auto& b : k) b.resize(len * d_model);
    for (auto& b : v) b.resize(len * d_model);
    length = len;
  }
};

using FloatKVCache = KVCacheT<float>;

namespace detail {

inline void check_tokens(const ModelConfig& cfg, std::span<const int> tokens, std::size_t past) {
  require(!tokens.empty(), ErrorKind::invalid_argument, "token sequence is empty");
  require(past + tokens.size() <= cfg.max_seq_len, ErrorKind::invalid_argument,
          "sequence length " + std::to_string(past + tokens.size()) + " exceeds max_seq_len " +
              std::to_string(cfg.max_seq_len));
  for (int t : tokens)
    require(t >= 0 && std::size_t(t) < cfg.vocab_size, ErrorKind::invalid_argument,
            "token id " + std::to_string(t) + " out of vocabulary range");
}

// Causal attention for one query row at absolute position `pos` over keys
// [0, pos]. Adds head-averaged probabilities into `received` when given.
inline void attend_row(const float* q, const float* keys, const float* values, std::size_t n_keys,
                       std::size_t d, std::size_t n_heads, float* out, std::vector<float>& scratch,
                       double* received) {
  const std::size_t dh = d / n_heads;
  const float scale = 1.0f / std::sqrt(float(dh));
  scratch.resize(n_keys);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const float* qh = q + h * dh;
    for (std::size_t j = 0; j < n_keys; ++j) {
      const float* kj = keys + j * d + h * dh;
      float s = 0.0f;
      for (std::size_t t = 0; t < dh; ++t) s += qh[t] * kj[t];
      scratch[j] = s * scale;
    }
    softmax_inplace(std::span<float>(scratch.data(), n_keys));
    float* oh = out + h * dh;
    for (std::size_t t = 0; t < dh; ++t) oh[t] = 0.0f;
    for (std::size_t j = 0; j < n_keys; ++j) {
      const float p = scratch[j];
      const float* vj = values + j * d + h * dh;
      for (std::size_t t = 0; t < dh; ++t) oh[t] += p * vj[t];
      if (received) received[j] += double(p) / double(n_heads);
    }
  }
}

inline void observe(Observer* obs, ActPoint p, int block, const Matrix& m) {
  if (obs) obs->observe(p, block, m.data);
}

inline void add_inplace(Matrix& x, const Matrix& y) {
  for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += y.data[i];
}

// One transformer block over `x` (new rows at positions past..past+rows-1).
// `kc`/`vc` hold the block's cached keys/values for the first `past` positions
// and are extended in place.
inline void block_forward(const TransformerBlock& b, std::size_t n_heads, Matrix& x,
                          std::vector<float>& kc, std::vector<float>& vc, std::size_t past,
                          int block_index, Observer* obs, OpCounter* ops,
                          std::vector<double>* received) {
  const std::size_t n = x.rows, d = x.cols, f = b.d_ff();
  Matrix h = layernorm(x, b.ln1.gamma, b.ln1.beta);
  observe(obs, ActPoint::ln1_out, block_index, h);
  Matrix q = matmul(h, b.q.w, b.q.b), k = matmul(h, b.k.w, b.k.b), v = matmul(h, b.v.w, b.v.b);
  observe(obs, ActPoint::q, block_index, q);
  observe(obs, ActPoint::k, block_index, k);
  observe(obs, ActPoint::v, block_index, v);
  kc.insert(kc.end(), k.data.begin(), k.data.end());
  vc.insert(vc.end(), v.data.begin(), v.data.end());

  Matrix att(n, d);
  std::vector<float> scratch;
  if (received) received->assign(past + n, 0.0);
  std::vector<float> logit_obs;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t n_keys = past + i + 1;
    if (obs) {
      // Scaled scores for the calibration observer.
      const std::size_t dh = d / n_heads;
      const float scale = 1.0f / std::sqrt(float(dh));
      for (std::size_t hh = 0; hh < n_heads; ++hh)
        for (std::size_t j = 0; j < n_keys; ++j) {
          float s = 0.0f;
          for (std::size_t t = 0; t < dh; ++t) s += q.at(i, hh * dh + t) * kc[j * d + hh * dh + t];
          logit_obs.push_back(s * scale);
        }
    }
    attend_row(q.row(i).data(), kc.data(), vc.data(), n_keys, d, n_heads, att.row(i).data(),
               scratch, received ? received->data() : nullptr);
  }
  if (obs) obs->observe(ActPoint::att_logits, block_index, logit_obs);
  observe(obs, ActPoint::att_out, block_index, att);
  Matrix o = matmul(att, b.o.w, b.o.b);
  observe(obs, ActPoint::attn_proj, block_index, o);
  add_inplace(x, o);
  observe(obs, ActPoint::resid1, block_index, x);

  Matrix h2 = layernorm(x, b.ln2.gamma, b.ln2.beta);
  observe(obs, ActPoint::ln2_out, block_index, h2);
  Matrix u = matmul(h2, b.fc1.w, b.fc1.b);
  observe(obs, ActPoint::mlp_hidden, block_index, u);
  for (float& val : u.data) val = gelu(val);
  observe(obs, ActPoint::gelu_out, block_index, u);
  Matrix mo = matmul(u, b.fc2.w, b.fc2.b);
  observe(obs, ActPoint::mlp_out, block_index, mo);
  add_inplace(x, mo);
  observe(obs, ActPoint::resid2, block_index, x);

  if (ops) {
    // Causal attention: query i sees past + i + 1 keys, for scores and for P·V.
    uint64_t key_sum = 0;
    for (std::size_t i = 0; i < n; ++i) key_sum += past + i + 1;
    ops->macs += 4 * n * d * d + 2 * n * d * f + 2 * key_sum * d;
    ops->matmuls += 6;
    ops->attentions += 1;
    ops->layernorms += 2;
    ops->gelus += 1;
    ops->adds += 2;
  }
}

// Rows retained by a token drop over `received` scores: the top
// ceil(keep * t) by attention received, always including the last position.
inline std::vector<std::size_t> select_kept_rows(std::span<const double> received, double keep) {
  const std::size_t t = received.size();
  const auto n_keep = std::min<std::size_t>(t, std::size_t(std::ceil(keep * double(t) - 1e-12)));
  std::vector<std::size_t> order(t - 1);
  for (std::size_t i = 0; i + 1 < t; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return received[a] > received[b]; });
  std::vector<std::size_t> kept(order.begin(), order.begin() + (std::max<std::size_t>(n_keep, 1) - 1));
  kept.push_back(t - 1);
  std::sort(kept.begin(), kept.end());
  return kept;
}

inline Matrix gather_rows(const Matrix& x, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), x.cols);
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy(x.row(rows[i]).begin(), x.row(rows[i]).end(), out.row(i).begin());
  return out;
}

inline Matrix head_forward(const Model& m, const Matrix& x, Observer* obs, OpCounter* ops) {
  Matrix h = layernorm(x, m.ln_f.gamma, m.ln_f.beta);
  observe(obs, ActPoint::lnf_out, -1, h);
  Matrix logits = matmul(h, m.head);
  observe(obs, ActPoint::logits, -1, logits);
  if (ops) {
    ops->macs += uint64_t(x.rows) * m.config.d_model * m.config.vocab_size;
    ops->matmuls += 1;
    ops->layernorms += 1;
  }
  return logits;
}

inline Matrix embed(const Model& m, std::span<const int> tokens, std::size_t past) {
  const std::size_t d = m.config.d_model;
  Matrix x(tokens.size(), d);
  for (std::size_t i = 0; i < tokens.size(); ++i)
    for (std::size_t j = 0; j < d; ++j)
      x.at(i, j) = m.tok_emb.at(std::size_t(tokens[i]), j) + m.pos_emb.at(past + i, j);
  return x;
}


}  // namespace detail

inline bool has_active_token_drop(const Model& m) {
  return m.token_drop && m.token_drop->keep_fraction < 1.0 && m.token_drop->after_block + 1 < m.blocks.size();
}

// Logits for `tokens` appended after the cached prefix; extends the cache.
inline Matrix forward_float_cached(const Model& m, FloatKVCache& cache, std::span<const int> tokens,
                                   Observer* obs = nullptr, OpCounter* ops = nullptr) {
  detail::check_tokens(m.config, tokens, cache.length);
  require(!has_active_token_drop(m), ErrorKind::unsupported,
          "KV-cached execution is not available for models with token drop");
  Matrix x = detail::embed(m, tokens, cache.length);
  detail::observe(obs, ActPoint::embed_out, -1, x);
  if (ops) ops->adds += 1;
  for (std::size_t i = 0; i < m.blocks.size(); ++i)
    detail::block_forward(m.blocks[i], m.config.n_heads, x, cache.k[i], cache.v[i], cache.length,
                          int(i), obs, ops, nullptr);
  cache.length += tokens.size();
  return detail::head_forward(m, x, obs, ops);
}

inline FloatKVCache make_cache(const Model& m) {
  return FloatKVCache(m.blocks.size(), m.config.d_model, m.config.max_seq_len);
}

// Full-sequence reference forward pass. Honors the model's token-drop plan:
// dropped rows skip the remaining blocks and are not visible as keys there.
inline Matrix forward_float(const Model& m, std::span<const int> tokens, Observer* obs = nullptr,
                            OpCounter* ops = nullptr) {
  if (!has_active_token_drop(m)) {
    FloatKVCache cache = make_cache(m);
    return forward_float_cached(m, cache, tokens, obs, ops);
  }
  detail::check_tokens(m.config, tokens, 0);
  const TokenDropConfig& td = *m.token_drop;
  Matrix x = detail::embed(m, tokens, 0);
  detail::observe(obs, ActPoint::embed_out, -1, x);
  if (ops) ops->adds += 1;
  std::vector<double> received;
  std::size_t b = 0;
  for (; b <= td.after_block; ++b) {
    std::vector<float> kc, vc;
    detail::block_forward(m.blocks[b], m.config.n_heads, x, kc, vc, 0, int(b), obs, ops,
                          b == td.after_block ? &received : nullptr);
  }
  const std::vector<std::size_t> kept = detail::select_kept_rows(received, td.keep_fraction);
  Matrix xk = detail::gather_rows(x, kept);
  std::vector<float> kc, vc;
  for (; b < m.blocks.size(); ++b) {
    kc.clear();
    vc.clear();
    detail::block_forward(m.blocks[b], m.config.n_heads, xk, kc, vc, 0, int(b), obs, ops, nullptr);
  }
  for (std::size_t i = 0; i < kept.size(); ++i)
    std::copy(xk.row(i).begin(), xk.row(i).end(), x.row(kept[i]).begin());
  return detail::head_forward(m, x, obs, ops);
}

inline std::vector<Matrix> forward_float_batch(const Model& m,
                                               const std::vector<std::vector<int>>& batch) {
  std::vector<Matrix> out;
  out.reserve(batch.size());
  for (const auto& seq : batch) out.push_back(forward_float(m, seq));
  return out;
}

inline std::size_t row_argmax(const Matrix& logits, std::size_t r) { return argmax(logits.row(r)); }
inline std::size_t logits_rows(const Matrix& m) { return m.rows; }

// Execution engine over the float path, shared by the decoding algorithms.
struct FloatEngine {
  const Model* model;
  using Cache = FloatKVCache;
  using Logits = Matrix;

  explicit FloatEngine(const Model& m) : model(&m) {}
  const ModelConfig& config() const { return model->config; }
  Cache make_cache() const { return qtk::make_cache(*model); }
  Logits extend(Cache& c, std::span<const int> tokens) const {
    return forward_float_cached(*model, c, tokens);
  }
  Logits full(std::span<const int> tokens) const { return forward_float(*model, tokens); }
};

// Greedy continuation of `prompt` for `n_steps` tokens, with or without a KV
// cache. `on_step(logits, row)` sees the logits row each token was picked from.
template <typename Engine>
std::vector<int> greedy_decode(
    const Engine& engine, std::span<const int> prompt, std::size_t n_steps, bool use_cache,
    const std::function<void(const typename Engine::Logits&, std::size_t)>& on_step = {}) {
  require(!prompt.empty(), ErrorKind::invalid_argument, "prompt is empty");
  require(prompt.size() + n_steps <= engine.config().max_seq_len, ErrorKind::invalid_argument,
          "context overflow: prompt " + std::to_string(prompt.size()) + " + steps " +
              std::to_string(n_steps) + " exceeds max_seq_len " +
              std::to_string(engine.config().max_seq_len));
  std::vector<int> out;
  if (n_steps == 0) return out;
  if (use_cache) {
    auto cache = engine.make_cache();
    auto logits = engine.extend(cache, prompt);
    if (on_step) on_step(logits, logits_rows(logits) - 1);
    out.push_back(int(row_argmax(logits, logits_rows(logits) - 1)));
    while (out.size() < n_steps) {
      const int last = out.back();
      logits = engine.extend(cache, std::span<const int>(&last, 1));
      if (on_step) on_step(logits, 0);
      out.push_back(int(row_argmax(logits, 0)));
    }
    return out;
  }
  std::vector<int> seq(prompt.begin(), prompt.end());
  while (out.size() < n_steps) {
    const auto logits = engine.full(seq);
    if (on_step) on_step(logits, logits_rows(logits) - 1);
    const int next = int(row_argmax(logits, logits_rows(logits) - 1));
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

inline std::vector<int> decode_greedy(const Model& m, std::span<const int> prompt,
                                      std::size_t n_steps, bool use_cache = true) {
  return greedy_decode(FloatEngine(m), prompt, n_steps, use_cache);
}

}  // namespace qtk
