#pragma once

// Row-major float matrices and the reference (real-valued) kernels. Every
// kernel computes each output row independently with a fixed summation order,
// so processing rows one at a time or in a batch gives bit-identical results.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "qtk/error.hpp"

namespace qtk {

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<float> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, float fill = 0.0f) : rows(r), cols(c), data(r * c, fill) {}

  float& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  float at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<float> row(std::size_t r) { return std::span<float>(data).subspan(r * cols, cols); }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(data).subspan(r * cols, cols);
  }
  std::size_t size() const { return data.size(); }

  bool operator==(const Matrix&) const = default;
};

// out[rows x w.cols] = a[rows x w.cols... ] · w (+ bias). a has w.rows columns.
// Blocked over 4 rows x 32 columns so the accumulators stay in registers.
// Each output is still bias + a[0]w[0] + a[1]w[1] + ... in k order.
inline void matmul_into(std::span<const float> a, std::size_t rows, const Matrix& w,
                        std::span<const float> bias, std::span<float> out) {
  constexpr std::size_t R = 4, C = 32;
  const std::size_t k_dim = w.rows, n = w.cols;
  const float* __restrict wd = w.data.data();
  const float* __restrict ad = a.data();
  float* __restrict od = out.data();
  for (std::size_t i0 = 0; i0 < rows; i0 += R) {
    const std::size_t nr = std::min(R, rows - i0);
    for (std::size_t j0 = 0; j0 < n; j0 += C) {
      const std::size_t nc = std::min(C, n - j0);
      float acc[R][C];
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t j = 0; j < C; ++j) acc[r][j] = (bias.empty() || j >= nc) ? 0.0f : bias[j0 + j];
      if (nr == R && nc == C) {
        for (std::size_t k = 0; k < k_dim; ++k) {
          const float* wk = wd + k * n + j0;
          for (std::size_t r = 0; r < R; ++r) {
            const float s = ad[(i0 + r) * k_dim + k];
            for (std::size_t j = 0; j < C; ++j) acc[r][j] += s * wk[j];
          }
        }
      } else {
        for (std::size_t k = 0; k < k_dim; ++k) {
          const float* wk = wd + k * n + j0;
          for (std::size_t r = 0; r < nr; ++r) {
            const float s = ad[(i0 + r) * k_dim + k];
            for (std::size_t j = 0; j < nc; ++j) acc[r][j] += s * wk[j];
          }
        }
      }
      for (std::size_t r = 0; r < nr; ++r)
        for (std::size_t j = 0; j < nc; ++j) od[(i0 + r) * n + j0 + j] = acc[r][j];
    }
  }
}

inline Matrix matmul(const Matrix& a, const Matrix& w, std::span<const float> bias = {}) {
  require(a.cols == w.rows, ErrorKind::shape_mismatch, "matmul inner dimensions differ");
  Matrix out(a.rows, w.cols);
  matmul_into(a.data, a.rows, w, bias, out.data);
  return out;
}

inline constexpr float kLayerNormEps = 1e-5f;

inline void layernorm_row(std::span<const float> x, std::span<const float> gamma,
                          std::span<const float> beta, std::span<float> out) {
  const std::size_t n = x.size();
  double mean = 0.0;
  for (float v : x) mean += v;
  mean /= double(n);
  double var = 0.0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= double(n);
  const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
  for (std::size_t i = 0; i < n; ++i)
    out[i] = static_cast<float>((x[i] - mean) * rstd * gamma[i] + beta[i]);
}

inline Matrix layernorm(const Matrix& x, std::span<const float> gamma, std::span<const float> beta) {
  Matrix out(x.rows, x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) layernorm_row(x.row(r), gamma, beta, out.row(r));
  return out;
}

inline float gelu(float x) {
  return static_cast<float>(0.5 * x * (1.0 + std::erf(double(x) / std::sqrt(2.0))));
}

inline double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  return cdf + x * pdf;
}

// Numerically stable softmax of a row, in place.
inline void softmax_inplace(std::span<float> row) {
  float mx = row[0];
  for (float v : row) mx = std::max(mx, v);
  double sum = 0.0;
  for (float& v : row) {
    v = static_cast<float>(std::exp(double(v) - mx));
    sum += v;
  }
  for (float& v : row) v = static_cast<float>(v / sum);
}

inline std::size_t argmax(std::span<const float> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i)
    if (row[i] > row[best]) best = i;
  return best;
}

}  // namespace qtk
