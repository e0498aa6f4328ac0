#pragma once

// Reference implementations used only by the tests. They deliberately share no
// code with the library beyond plain data types.

#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// round_half_away(acc * m) + zp, clamped, computed exactly: m is a double, so
// m = mant * 2^exp with a 53-bit integer mantissa.
inline int64_t requantize_exact(int64_t acc, double m, int64_t zp, int bits) {
  int exp = 0;
  const double frac = std::frexp(m, &exp);
  const auto mant = static_cast<int64_t>(std::ldexp(frac, 53));
  const int shift = 53 - exp;  // m = mant / 2^shift
  __int128 num = (__int128)acc * mant;
  const bool neg = num < 0;
  if (neg) num = -num;
  __int128 q;
  if (shift <= 0) {
    q = num << -shift;
  } else if (shift >= 120) {
    q = 0;
  } else {
    const __int128 half = (__int128)1 << (shift - 1);
    q = (num + half) >> shift;
  }
  int64_t v = static_cast<int64_t>(neg ? -q : q) + zp;
  const int64_t lo = -(int64_t{1} << (bits - 1)), hi = (int64_t{1} << (bits - 1)) - 1;
  return v < lo ? lo : (v > hi ? hi : v);
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  double m = x[0];
  for (double v : x) m = std::max(m, v);
  std::vector<double> e(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += e[i] = std::exp(x[i] - m);
  for (double& v : e) v /= s;
  return e;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline std::vector<double> layernorm(const std::vector<double>& x, const std::vector<double>& g,
                                     const std::vector<double>& b, double eps = 1e-5) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= double(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= double(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / std::sqrt(var + eps) * g[i] + b[i];
  return out;
}

template <typename T>
std::size_t argmax(const std::vector<T>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace oracle
