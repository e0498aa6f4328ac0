#pragma once

// Affine quantization primitives: quantize, dequantize, requantize and the
// fixed-point multiplier that keeps the integer pipeline closed under
// composition.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "qtk/error.hpp"

namespace qtk {

enum class Granularity { per_tensor, per_output_channel };

// Weight-only precision set explored per block; 16 is the unquantized baseline.
inline constexpr int kBaselineBits = 16;
inline constexpr double kDegenerateScale = 1.0 / 65536.0;

inline bool is_allowed_bits(int bits) {
  return bits == 2 || bits == 3 || bits == 4 || bits == 8 || bits == 16;
}

inline void require_bits(int bits) {
  require(is_allowed_bits(bits), ErrorKind::invalid_argument,
          "bit-width " + std::to_string(bits) + " not in {2,3,4,8,16}");
}

inline constexpr int32_t qmin(int bits) { return -(int32_t{1} << (bits - 1)); }
inline constexpr int32_t qmax(int bits) { return (int32_t{1} << (bits - 1)) - 1; }

inline int32_t clamp_code(int64_t v, int bits) {
  return static_cast<int32_t>(std::clamp<int64_t>(v, qmin(bits), qmax(bits)));
}

// The single rounding rule used everywhere: half away from zero.
inline double round_half_away(double v) { return std::round(v); }

// Integer division by 2^shift, rounding half away from zero.
// A negative shift multiplies by 2^-shift.
inline int64_t rounding_shift(int64_t v, int shift) {
  if (shift <= 0) return v * (int64_t{1} << -shift);
  if (shift >= 63) return 0;
  const uint64_t mag = v < 0 ? uint64_t(0) - uint64_t(v) : uint64_t(v);
  const uint64_t r = (mag + (uint64_t{1} << (shift - 1))) >> shift;
  return v < 0 ? -int64_t(r) : int64_t(r);
}

// Same rule on a 128-bit product.
inline int64_t rounding_shift_wide(__int128 v, int shift) {
  if (shift <= 0) return int64_t(v * (__int128{1} << -shift));
  if (shift >= 126) return 0;
  const bool neg = v < 0;
  const unsigned __int128 mag = neg ? (unsigned __int128)(-v) : (unsigned __int128)v;
  const unsigned __int128 r = (mag + ((unsigned __int128)1 << (shift - 1))) >> shift;
  return neg ? -int64_t(r) : int64_t(r);
}

// Integer division rounding half away from zero; den > 0.
inline int64_t rounding_div(int64_t num, int64_t den) {
  const int64_t mag = num < 0 ? -num : num;
  const int64_t q = (mag + den / 2) / den;
  return num < 0 ? -q : q;
}

struct QuantParams {
  double scale = 1.0;
  int32_t zero_point = 0;
  int bits = 8;
  bool symmetric = true;
  Granularity granularity = Granularity::per_tensor;

  int32_t lo() const { return qmin(bits); }
  int32_t hi() const { return qmax(bits); }

  void validate() const {
    require_bits(bits);
    require(scale > 0.0 && std::isfinite(scale), ErrorKind::invalid_argument,
            "quant scale must be positive and finite");
    require(!symmetric || zero_point == 0, ErrorKind::invalid_argument,
            "symmetric quantizer requires zero_point = 0");
    require(zero_point >= lo() && zero_point <= hi(), ErrorKind::invalid_argument,
            "zero_point outside representable range");
  }

  bool operator==(const QuantParams&) const = default;
};

// Shaped signed-integer payload. Per-output-channel tensors carry one scale per
// channel in `channel_scales`; `qparams.scale` is then the largest of them.
struct IntTensor {
  std::vector<std::size_t> shape;
  std::vector<int32_t> data;
  QuantParams qparams;
  std::vector<double> channel_scales;

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape.size() < 2 ? 1 : shape[0]; }
  std::size_t cols() const { return shape.empty() ? 0 : shape.back(); }
  bool per_channel() const { return !channel_scales.empty(); }

  std::span<const int32_t> row(std::size_t r) const {
    return std::span<const int32_t>(data).subspan(r * cols(), cols());
  }
  std::span<int32_t> row(std::size_t r) { return std::span<int32_t>(data).subspan(r * cols(), cols()); }

  void validate() const {
    qparams.validate();
    const std::size_t n =
        std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    require(n == data.size(), ErrorKind::shape_mismatch, "element count differs from shape product");
    for (int32_t v : data)
      require(v >= qparams.lo() && v <= qparams.hi(), ErrorKind::invalid_argument,
              "element outside bit-width range");
  }
};

inline double percentile_abs(std::span<const float> values, double pct) {
  std::vector<float> mags(values.size());
  std::transform(values.begin(), values.end(), mags.begin(), [](float v) { return std::fabs(v); });
  const auto k = static_cast<std::size_t>(std::ceil(pct / 100.0 * double(mags.size()) - 1e-9)) - 1;
  auto nth = mags.begin() + std::min(k, mags.size() - 1);
  std::nth_element(mags.begin(), nth, mags.end());
  return *nth;
}

// Builds a quantizer from an observed [lo, hi] range.
inline QuantParams qparams_from_range(double lo, double hi, int bits, bool symmetric) {
  require_bits(bits);
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  QuantParams q;
  q.bits = bits;
  q.symmetric = symmetric;
  if (symmetric) {
    const double m = std::max(-lo, hi);
    q.scale = m > 0.0 ? m / qmax(bits) : kDegenerateScale;
    q.zero_point = 0;
    return q;
  }
  const double span = hi - lo;
  if (!(span > 0.0)) {
    q.scale = kDegenerateScale;
    q.zero_point = 0;
    return q;
  }
  q.scale = span / (double(qmax(bits)) - double(qmin(bits)));
  q.zero_point = clamp_code(static_cast<int64_t>(round_half_away(qmin(bits) - lo / q.scale)), bits);
  return q;
}

// Per-tensor quantizer covering the observed range (zero always representable).
// `clip_percentile` < 100 clips outliers to that percentile first.
inline QuantParams compute_qparams(std::span<const float> values, int bits, bool symmetric,
                                   double clip_percentile = 100.0) {
  require(!values.empty(), ErrorKind::invalid_argument, "cannot calibrate an empty tensor");
  require_bits(bits);
  double lo = *std::min_element(values.begin(), values.end());
  double hi = *std::max_element(values.begin(), values.end());
  if (clip_percentile < 100.0) {
    const double cap = percentile_abs(values, clip_percentile);
    lo = std::max(lo, -cap);
    hi = std::min(hi, cap);
  }
  return qparams_from_range(lo, hi, bits, symmetric);
}

inline int32_t quantize_value(double v, const QuantParams& q) {
  const double r = std::clamp(round_half_away(v / q.scale), -4e9, 4e9);
  return clamp_code(static_cast<int64_t>(r) + q.zero_point, q.bits);
}

inline double dequantize_value(int32_t code, const QuantParams& q) {
  return double(code - q.zero_point) * q.scale;
}

inline IntTensor quantize(std::span<const float> values, const QuantParams& q,
                          std::vector<std::size_t> shape = {}) {
  q.validate();
  IntTensor t;
  t.shape = shape.empty() ? std::vector<std::size_t>{values.size()} : std::move(shape);
  t.qparams = q;
  t.data.resize(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) t.data[i] = quantize_value(values[i], q);
  return t;
}

inline std::vector<float> dequantize(const IntTensor& t) {
  std::vector<float> out(t.data.size());
  if (!t.per_channel()) {
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = static_cast<float>(dequantize_value(t.data[i], t.qparams));
    return out;
  }
  const std::size_t c = t.cols();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(double(t.data[i]) * t.channel_scales[i % c]);
  return out;
}

enum class ChannelAxis { columns, rows };

// Symmetric per-output-channel quantization of a row-major [rows x cols] matrix.
// Weight matrices map x·W, so their output channels are columns; embedding
// tables use rows. Channel scales are stored per column index for `columns`
// and expanded to a per-row table for `rows` via `row_scales`.
struct ChannelQuantized {
  IntTensor tensor;
  std::vector<double> scales;  // one per channel along the chosen axis
};

inline ChannelQuantized quantize_per_channel(std::span<const float> values, std::size_t rows,
                                             std::size_t cols, int bits, ChannelAxis axis) {
  require_bits(bits);
  require(values.size() == rows * cols, ErrorKind::shape_mismatch, "matrix size mismatch");
  const std::size_t n_ch = axis == ChannelAxis::columns ? cols : rows;
  std::vector<double> amax(n_ch, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const std::size_t ch = axis == ChannelAxis::columns ? c : r;
      amax[ch] = std::max(amax[ch], double(std::fabs(values[r * cols + c])));
    }
  ChannelQuantized out;
  out.scales.resize(n_ch);
  for (std::size_t ch = 0; ch < n_ch; ++ch)
    out.scales[ch] = amax[ch] > 0.0 ? amax[ch] / qmax(bits) : kDegenerateScale;
  IntTensor& t = out.tensor;
  t.shape = {rows, cols};
  t.qparams = QuantParams{*std::max_element(out.scales.begin(), out.scales.end()), 0, bits, true,
                          Granularity::per_output_channel};
  if (axis == ChannelAxis::columns) t.channel_scales = out.scales;
  t.data.resize(values.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double s = out.scales[axis == ChannelAxis::columns ? c : r];
      t.data[r * cols + c] = quantize_value(values[r * cols + c], QuantParams{s, 0, bits, true});
    }
  return out;
}

// Quantize-then-dequantize in place; the simulated weight-only PTQ path.
inline void fake_quantize_per_channel(std::span<float> values, std::size_t rows, std::size_t cols,
                                      int bits, ChannelAxis axis) {
  if (bits == kBaselineBits) return;
  const ChannelQuantized q = quantize_per_channel(values, rows, cols, bits, axis);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const double s = q.scales[axis == ChannelAxis::columns ? c : r];
      values[r * cols + c] = static_cast<float>(double(q.tensor.data[r * cols + c]) * s);
    }
}

inline void fake_quantize_tensor(std::span<float> values, int bits) {
  if (bits == kBaselineBits || values.empty()) return;
  double amax = 0.0;
  for (float v : values) amax = std::max(amax, double(std::fabs(v)));
  const QuantParams q = qparams_from_range(-amax, amax, bits, true);
  for (float& v : values) v = static_cast<float>(dequantize_value(quantize_value(v, q), q));
}

// Real multiplier M = mantissa * 2^-shift, mantissa normalized to [2^30, 2^31).
struct RequantMultiplier {
  int32_t mantissa = 0;
  int shift = 0;

  double decode() const { return std::ldexp(double(mantissa), -shift); }
  bool operator==(const RequantMultiplier&) const = default;
};

inline RequantMultiplier encode_multiplier(double m) {
  require(m > 0.0 && m <= 1.0, ErrorKind::invalid_argument,
          "requant multiplier must lie in (0, 1], got " + std::to_string(m));
  int exp = 0;
  const double frac = std::frexp(m, &exp);  // m = frac * 2^exp, frac in [0.5, 1)
  auto mant = static_cast<int64_t>(round_half_away(std::ldexp(frac, 31)));
  if (mant == (int64_t{1} << 31)) {
    mant >>= 1;
    ++exp;
  }
  RequantMultiplier r{static_cast<int32_t>(mant), 31 - exp};
  // Very small multipliers round to zero anyway; cap the shift so it stays meaningful.
  if (r.shift > 62) r = RequantMultiplier{0, 0};
  return r;
}

// round_half_away(acc * M) in pure integer arithmetic.
inline int64_t apply_multiplier(int64_t acc, const RequantMultiplier& m) {
  return rounding_shift_wide(__int128{acc} * m.mantissa, m.shift);
}

// Rescales `acc` by M into fixed point with `frac_bits` fractional bits.
inline int64_t apply_multiplier_fixed(int64_t acc, const RequantMultiplier& m, int frac_bits) {
  return rounding_shift_wide(__int128{acc} * m.mantissa, m.shift - frac_bits);
}

// Any positive rescale factor: M = decode(m) * 2^left, with decode(m) in (0, 1].
// Kernels use this where the ratio of scales can exceed one.
struct ScaleMultiplier {
  RequantMultiplier m;
  int left = 0;

  double decode() const { return std::ldexp(m.decode(), left); }
  bool operator==(const ScaleMultiplier&) const = default;
};

inline ScaleMultiplier encode_scale(double factor) {
  require(factor > 0.0 && std::isfinite(factor), ErrorKind::invalid_argument,
          "rescale factor must be positive and finite");
  int left = 0;
  while (std::ldexp(factor, -left) > 1.0) ++left;
  return ScaleMultiplier{encode_multiplier(std::ldexp(factor, -left)), left};
}

inline int64_t apply_scale(int64_t acc, const ScaleMultiplier& s, int frac_bits = 0) {
  return rounding_shift_wide(__int128{acc} * s.m.mantissa, s.m.shift - s.left - frac_bits);
}

inline int32_t requantize_value(int64_t acc, const RequantMultiplier& m, int out_bits,
                                int32_t out_zero_point) {
  return clamp_code(apply_multiplier(acc, m) + out_zero_point, out_bits);
}

inline IntTensor requantize(std::span<const int32_t> acc, const RequantMultiplier& m,
                            const QuantParams& out, std::vector<std::size_t> shape = {}) {
  IntTensor t;
  t.shape = shape.empty() ? std::vector<std::size_t>{acc.size()} : std::move(shape);
  t.qparams = out;
  t.data.resize(acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i)
    t.data[i] = requantize_value(acc[i], m, out.bits, out.zero_point);
  return t;
}

}  // namespace qtk
