#pragma once

// Fixture generation: seeded initialization followed by a short AdamW run of
// next-token training on the corpus. Single-threaded and deterministic for a
// given (config, seed, corpus).

#include <cmath>
#include <functional>
#include <string>
#include <random>
#include <span>
#include <vector>

#include "qtk/model.hpp"

namespace qtk {

struct TrainConfig {
  std::size_t steps = 1500;
  std::size_t batch = 8;
  std::size_t seq_len = 128;
  double lr = 3e-3;
  double min_lr = 3e-4;
  std::size_t warmup = 50;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double grad_clip = 1.0;
  uint64_t seed = 1234;
};

namespace train_detail {

struct LnCache {
  std::vector<float> mean, rstd;
};

inline Matrix ln_forward(const Matrix& x, const LayerNormParams& p, LnCache& c) {
  const std::size_t n = x.cols;
  Matrix y(x.rows, n);
  c.mean.resize(x.rows);
  c.rstd.resize(x.rows);
  for (std::size_t r = 0; r < x.rows; ++r) {
    auto xr = x.row(r);
    double mean = 0.0;
    for (float v : xr) mean += v;
    mean /= double(n);
    double var = 0.0;
    for (float v : xr) var += (v - mean) * (v - mean);
    var /= double(n);
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    c.mean[r] = float(mean);
    c.rstd[r] = float(rstd);
    for (std::size_t i = 0; i < n; ++i)
      y.at(r, i) = float((xr[i] - mean) * rstd * p.gamma[i] + p.beta[i]);
  }
  return y;
}

inline Matrix ln_backward(const Matrix& x, const LayerNormParams& p, const LnCache& c,
                          const Matrix& dy, LayerNormParams& grad) {
  const std::size_t n = x.cols;
  Matrix dx(x.rows, n);
  std::vector<float> xhat(n), dxhat(n);
  for (std::size_t r = 0; r < x.rows; ++r) {
    double mean_d = 0.0, mean_dx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      xhat[i] = (x.at(r, i) - c.mean[r]) * c.rstd[r];
      dxhat[i] = dy.at(r, i) * p.gamma[i];
      grad.gamma[i] += dy.at(r, i) * xhat[i];
      grad.beta[i] += dy.at(r, i);
      mean_d += dxhat[i];
      mean_dx += double(dxhat[i]) * xhat[i];
    }
    mean_d /= double(n);
    mean_dx /= double(n);
    for (std::size_t i = 0; i < n; ++i)
      dx.at(r, i) = float(c.rstd[r] * (dxhat[i] - mean_d - xhat[i] * mean_dx));
  }
  return dx;
}

inline Matrix transpose(const Matrix& w) {
  Matrix t(w.cols, w.rows);
  for (std::size_t i = 0; i < w.rows; ++i)
    for (std::size_t j = 0; j < w.cols; ++j) t.at(j, i) = w.at(i, j);
  return t;
}

// Accumulates dW, db for y = x·W + b and returns dx.
inline Matrix linear_backward(const Matrix& x, const Linear& p, const Matrix& dy, Linear& grad,
                              bool need_dx = true) {
  const std::size_t n = dy.cols;
  for (std::size_t i = 0; i < x.rows; ++i) {
    const float* dyi = dy.data.data() + i * n;
    for (std::size_t k = 0; k < x.cols; ++k) {
      const float a = x.at(i, k);
      float* g = grad.w.data.data() + k * n;
      for (std::size_t j = 0; j < n; ++j) g[j] += a * dyi[j];
    }
    if (!grad.b.empty())
      for (std::size_t j = 0; j < n; ++j) grad.b[j] += dyi[j];
  }
  if (!need_dx) return {};
  return matmul(dy, transpose(p.w));
}

struct BlockActs {
  Matrix x_in, h1, q, k, v, att, x_mid, h2, u, g;
  LnCache ln1, ln2;
  std::vector<float> probs;  // [head][query][key]
};

struct SeqActs {
  std::vector<int> tokens;  // T + 1 (inputs and shifted targets)
  std::vector<BlockActs> blocks;
  Matrix x_final, hf;
  LnCache lnf;
  Matrix probs;  // softmax over vocab
};

inline void attention_forward(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t n_heads,
                              Matrix& out, std::vector<float>& probs) {
  const std::size_t t = q.rows, d = q.cols, dh = d / n_heads;
  const float scale = 1.0f / std::sqrt(float(dh));
  out = Matrix(t, d);
  probs.assign(n_heads * t * t, 0.0f);
  for (std::size_t h = 0; h < n_heads; ++h)
    for (std::size_t i = 0; i < t; ++i) {
      float* p = probs.data() + (h * t + i) * t;
      for (std::size_t j = 0; j <= i; ++j) {
        float s = 0.0f;
        for (std::size_t e = 0; e < dh; ++e) s += q.at(i, h * dh + e) * k.at(j, h * dh + e);
        p[j] = s * scale;
      }
      softmax_inplace(std::span<float>(p, i + 1));
      for (std::size_t j = 0; j <= i; ++j)
        for (std::size_t e = 0; e < dh; ++e) out.at(i, h * dh + e) += p[j] * v.at(j, h * dh + e);
    }
}

inline void attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                               std::size_t n_heads, const std::vector<float>& probs,
                               const Matrix& dout, Matrix& dq, Matrix& dk, Matrix& dv) {
  const std::size_t t = q.rows, d = q.cols, dh = d / n_heads;
  const float scale = 1.0f / std::sqrt(float(dh));
  dq = Matrix(t, d);
  dk = Matrix(t, d);
  dv = Matrix(t, d);
  std::vector<float> dp(t);
  for (std::size_t h = 0; h < n_heads; ++h)
    for (std::size_t i = 0; i < t; ++i) {
      const float* p = probs.data() + (h * t + i) * t;
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) {
        float s = 0.0f;
        for (std::size_t e = 0; e < dh; ++e) {
          s += dout.at(i, h * dh + e) * v.at(j, h * dh + e);
          dv.at(j, h * dh + e) += p[j] * dout.at(i, h * dh + e);
        }
        dp[j] = s;
        dot += double(p[j]) * s;
      }
      for (std::size_t j = 0; j <= i; ++j) {
        const float ds = float(p[j] * (dp[j] - dot)) * scale;
        for (std::size_t e = 0; e < dh; ++e) {
          dq.at(i, h * dh + e) += ds * k.at(j, h * dh + e);
          dk.at(j, h * dh + e) += ds * q.at(i, h * dh + e);
        }
      }
    }
}

inline void add_into(Matrix& a, const Matrix& b) {
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

// Forward pass with activation capture; returns the summed NLL.
inline double forward_train(const Model& m, SeqActs& acts) {
  const std::size_t t = acts.tokens.size() - 1, d = m.config.d_model;
  Matrix x(t, d);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < d; ++j)
      x.at(i, j) = m.tok_emb.at(std::size_t(acts.tokens[i]), j) + m.pos_emb.at(i, j);
  acts.blocks.resize(m.blocks.size());
  for (std::size_t b = 0; b < m.blocks.size(); ++b) {
    const TransformerBlock& blk = m.blocks[b];
    BlockActs& a = acts.blocks[b];
    a.x_in = x;
    a.h1 = ln_forward(x, blk.ln1, a.ln1);
    a.q = matmul(a.h1, blk.q.w, blk.q.b);
    a.k = matmul(a.h1, blk.k.w, blk.k.b);
    a.v = matmul(a.h1, blk.v.w, blk.v.b);
    attention_forward(a.q, a.k, a.v, m.config.n_heads, a.att, a.probs);
    add_into(x, matmul(a.att, blk.o.w, blk.o.b));
    a.x_mid = x;
    a.h2 = ln_forward(x, blk.ln2, a.ln2);
    a.u = matmul(a.h2, blk.fc1.w, blk.fc1.b);
    a.g = a.u;
    for (float& val : a.g.data) val = gelu(val);
    add_into(x, matmul(a.g, blk.fc2.w, blk.fc2.b));
  }
  acts.x_final = x;
  acts.hf = ln_forward(x, m.ln_f, acts.lnf);
  acts.probs = matmul(acts.hf, m.head);
  double nll = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    auto row = acts.probs.row(i);
    softmax_inplace(row);
    nll -= std::log(std::max(double(row[std::size_t(acts.tokens[i + 1])]), 1e-30));
  }
  return nll;
}

inline void backward_train(const Model& m, const SeqActs& acts, float loss_scale, Model& grad) {
  const std::size_t t = acts.tokens.size() - 1, d = m.config.d_model;
  Matrix dlogits = acts.probs;
  for (std::size_t i = 0; i < t; ++i) {
    dlogits.at(i, std::size_t(acts.tokens[i + 1])) -= 1.0f;
    for (float& v : dlogits.row(i)) v *= loss_scale;
  }
  Linear head_grad{std::move(grad.head), {}};
  Matrix dhf = linear_backward(acts.hf, Linear{m.head, {}}, dlogits, head_grad);
  grad.head = std::move(head_grad.w);
  Matrix dx = ln_backward(acts.x_final, m.ln_f, acts.lnf, dhf, grad.ln_f);

  for (std::size_t bi = m.blocks.size(); bi-- > 0;) {
    const TransformerBlock& blk = m.blocks[bi];
    TransformerBlock& g = grad.blocks[bi];
    const BlockActs& a = acts.blocks[bi];
    Matrix dg = linear_backward(a.g, blk.fc2, dx, g.fc2);
    for (std::size_t i = 0; i < dg.data.size(); ++i)
      dg.data[i] = float(dg.data[i] * gelu_derivative(a.u.data[i]));
    Matrix dh2 = linear_backward(a.h2, blk.fc1, dg, g.fc1);
    add_into(dx, ln_backward(a.x_mid, blk.ln2, a.ln2, dh2, g.ln2));

    Matrix datt = linear_backward(a.att, blk.o, dx, g.o);
    Matrix dq, dk, dv;
    attention_backward(a.q, a.k, a.v, m.config.n_heads, a.probs, datt, dq, dk, dv);
    Matrix dh1 = linear_backward(a.h1, blk.q, dq, g.q);
    add_into(dh1, linear_backward(a.h1, blk.k, dk, g.k));
    add_into(dh1, linear_backward(a.h1, blk.v, dv, g.v));
    add_into(dx, ln_backward(a.x_in, blk.ln1, a.ln1, dh1, g.ln1));
  }
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      grad.tok_emb.at(std::size_t(acts.tokens[i]), j) += dx.at(i, j);
      grad.pos_emb.at(i, j) += dx.at(i, j);
    }
}

inline std::vector<ParamView<float>> collect(Model& m) {
  std::vector<ParamView<float>> out;
  for_each_param(m, [&](const ParamView<float>& p) { out.push_back(p); });
  return out;
}

}  // namespace train_detail

struct TrainLog {
  std::size_t step;
  double loss;
  double lr;
};

// Trains `m` in place on windows drawn from `tokens`. Returns the per-step mean loss.
inline std::vector<double> train_model(Model& m, std::span<const int> tokens, const TrainConfig& tc,
                                       const std::function<void(const TrainLog&)>& log = {}) {
  using namespace train_detail;
  require(tc.seq_len >= 2 && tc.seq_len <= m.config.max_seq_len, ErrorKind::invalid_argument,
          "training sequence length must be in [2, max_seq_len]");
  require(tokens.size() > tc.seq_len + 1, ErrorKind::invalid_argument, "corpus too small to train");
  std::mt19937_64 rng(tc.seed);
  std::uniform_int_distribution<std::size_t> start(0, tokens.size() - tc.seq_len - 2);

  std::vector<std::size_t> dff;
  for (const auto& b : m.blocks) dff.push_back(b.d_ff());
  Model grad = make_model(m.config, dff), m1 = make_model(m.config, dff), m2 = make_model(m.config, dff);
  auto params = collect(m), grads = collect(grad), mom1 = collect(m1), mom2 = collect(m2);
  for (auto* mm : {&grad, &m1, &m2})
    for_each_param(*mm, [](const ParamView<float>& p) { std::fill(p.data.begin(), p.data.end(), 0.0f); });

  std::vector<double> losses;
  SeqActs acts;
  for (std::size_t step = 0; step < tc.steps; ++step) {
    for (auto& p : grads) std::fill(p.data.begin(), p.data.end(), 0.0f);
    double loss = 0.0;
    const float loss_scale = 1.0f / float(tc.batch * tc.seq_len);
    for (std::size_t b = 0; b < tc.batch; ++b) {
      const std::size_t s = start(rng);
      acts.tokens.assign(tokens.begin() + std::ptrdiff_t(s),
                         tokens.begin() + std::ptrdiff_t(s + tc.seq_len + 1));
      loss += forward_train(m, acts);
      backward_train(m, acts, loss_scale, grad);
    }
    loss /= double(tc.batch * tc.seq_len);
    losses.push_back(loss);

    double norm2 = 0.0;
    for (const auto& g : grads)
      for (float v : g.data) norm2 += double(v) * v;
    const double clip = std::min(1.0, tc.grad_clip / (std::sqrt(norm2) + 1e-12));

    double lr = tc.lr;
    if (step < tc.warmup) {
      lr = tc.lr * double(step + 1) / double(tc.warmup);
    } else if (tc.steps > tc.warmup) {
      const double progress = double(step - tc.warmup) / double(tc.steps - tc.warmup);
      lr = tc.min_lr + 0.5 * (tc.lr - tc.min_lr) * (1.0 + std::cos(M_PI * progress));
    }
    const double bc1 = 1.0 - std::pow(tc.beta1, double(step + 1));
    const double bc2 = 1.0 - std::pow(tc.beta2, double(step + 1));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const bool decay = params[i].role != ParamRole::vector;
      auto p = params[i].data;
      auto g = grads[i].data;
      auto a = mom1[i].data;
      auto v = mom2[i].data;
      for (std::size_t j = 0; j < p.size(); ++j) {
        const double gj = double(g[j]) * clip;
        a[j] = float(tc.beta1 * a[j] + (1.0 - tc.beta1) * gj);
        v[j] = float(tc.beta2 * v[j] + (1.0 - tc.beta2) * gj * gj);
        double upd = (a[j] / bc1) / (std::sqrt(v[j] / bc2) + 1e-8);
        if (decay) upd += tc.weight_decay * p[j];
        p[j] = float(p[j] - lr * upd);
      }
    }
    if (log) log(TrainLog{step, loss, lr});
  }
  return losses;
}

// Named fixture recipes. The checked-in checkpoints under fixtures/ are the
// output of make_fixture() with these presets on data/corpus.txt.
struct FixtureSpec {
  std::string name;
  ModelConfig config;
  TrainConfig train;
  uint64_t init_seed = 0;
};

inline FixtureSpec fixture_preset(const std::string& name) {
  FixtureSpec f;
  f.name = name;
  if (name == "target") {
    f.config.n_blocks = 6;
    f.init_seed = 6001;
    f.train.seed = 6002;
  } else if (name == "draft") {
    // Roughly a twelfth of the target's per-token cost.
    f.config.n_blocks = 2;
    f.config.d_model = 64;
    f.config.n_heads = 2;
    f.config.d_ff = 128;
    f.init_seed = 2001;
    f.train.seed = 2002;
  } else if (name == "explore3") {
    f.config.n_blocks = 3;
    f.init_seed = 3001;
    f.train.seed = 3002;
  } else if (name == "tiny") {
    f.config = ModelConfig{2, 32, 2, 64, 256, 32};
    f.train.steps = 3;
    f.train.batch = 2;
    f.train.seq_len = 32;
    f.train.warmup = 1;
    f.init_seed = 11;
    f.train.seed = 12;
  } else {
    fail(ErrorKind::invalid_argument, "unknown fixture preset '" + name + "'");
  }
  return f;
}

inline Model make_fixture(const FixtureSpec& f, std::span<const int> corpus,
                          const std::function<void(const TrainLog&)>& log = {}) {
  f.config.validate();
  Model m = init_random(f.config, f.init_seed);
  const std::size_t train_end = corpus.size() - corpus.size() / 10;
  train_model(m, corpus.first(train_end), f.train, log);
  return m;
}

}  // namespace qtk
