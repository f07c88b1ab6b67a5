#pragma once

// Scalar and per-tensor quantization primitives.
//
// The symmetric scheme maps a real tensor X to
//     Xq = clamp(round_half_even(X / s), -2^(N-1), 2^(N-1) - 1)
// with a static step s fixed ahead of inference. Scales come from the
// absolute maximum or from a nearest-rank percentile of the pooled absolute
// values, which clips a small fraction of outliers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "quamba/error.hpp"
#include "quamba/matrix.hpp"

namespace quamba {

inline constexpr int kDefaultBits = 8;
inline constexpr double kDefaultPercentile = 99.999;
// Scale used when the observed range is exactly zero.
inline constexpr float kScaleFloor = 1e-8f;

constexpr std::int32_t qmin(int bits) { return -(std::int32_t{1} << (bits - 1)); }
constexpr std::int32_t qmax(int bits) { return (std::int32_t{1} << (bits - 1)) - 1; }

// Integer-valued tensor with its static quantization step.
struct QTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> values;
  float scale = 1.0f;
  std::int32_t zero_point = 0;
  int bits = kDefaultBits;

  std::size_t size() const noexcept { return values.size(); }
  std::int32_t operator()(std::size_t r, std::size_t c) const noexcept {
    return values[r * cols + c];
  }
  std::span<const std::int32_t> row(std::size_t r) const noexcept {
    return {values.data() + r * cols, cols};
  }

  // Checks the representable range, positive scale and shape.
  void validate() const {
    if (bits < 2 || bits > 16) throw Error("QTensor: unsupported bit width " + std::to_string(bits));
    if (!(scale > 0.0f) || !std::isfinite(scale)) throw Error("QTensor: scale must be positive");
    if (values.size() != rows * cols) throw Error("QTensor: shape does not match value count");
    const auto lo = qmin(bits), hi = qmax(bits);
    for (auto v : values) {
      if (v < lo || v > hi) throw Error("QTensor: value " + std::to_string(v) + " out of range");
    }
  }

  friend bool operator==(const QTensor&, const QTensor&) = default;
};

struct StaticSymmetricMax {};
struct StaticSymmetricPercentile {
  double p = kDefaultPercentile;
};
struct DynamicSymmetricMax {};
struct StaticLog2 {};
struct StaticAsymmetricPercentile {
  double p = kDefaultPercentile;
};

using QuantScheme = std::variant<StaticSymmetricMax, StaticSymmetricPercentile,
                                 DynamicSymmetricMax, StaticLog2, StaticAsymmetricPercentile>;

inline bool is_symmetric(const QuantScheme& s) {
  return !std::holds_alternative<StaticAsymmetricPercentile>(s);
}

inline void check_percentile(double p) {
  if (!(p > 0.0 && p <= 100.0)) {
    throw Error("percentile must lie in (0, 100], got " + std::to_string(p));
  }
}

inline void check_bits(int bits) {
  if (bits < 2 || bits > 16) throw Error("bit width must lie in [2, 16]");
}

// s = max|X| / (2^(N-1) - 1), floored at kScaleFloor.
inline float compute_scale_absmax(std::span<const float> x, int bits = kDefaultBits) {
  check_bits(bits);
  if (x.empty()) throw Error("empty calibration tensor");
  float m = 0.0f;
  for (float v : x) m = std::max(m, std::fabs(v));
  if (m == 0.0f) return kScaleFloor;
  return m / static_cast<float>(qmax(bits));
}

// 0-based index of the nearest-rank q-th percentile among n sorted values.
inline std::size_t nearest_rank_index(double q, std::size_t n) {
  const double exact = q * static_cast<double>(n) / 100.0;
  double r = std::ceil(exact);
  // p * n / 100 can land a hair above an integer through rounding.
  if (std::fabs(exact - std::round(exact)) < 1e-9 * std::max(1.0, exact)) r = std::round(exact);
  if (r < 1.0) return 0;
  return std::min(n - 1, static_cast<std::size_t>(r) - 1);
}

// Nearest-rank p-th percentile of `values`. Takes a copy so the caller's pool
// keeps its order.
inline float percentile_value(std::span<const float> values, double p) {
  if (values.empty()) throw Error("empty calibration tensor");
  check_percentile(p);
  std::vector<float> tmp(values.begin(), values.end());
  const auto k = nearest_rank_index(p, tmp.size());
  std::nth_element(tmp.begin(), tmp.begin() + static_cast<std::ptrdiff_t>(k), tmp.end());
  return tmp[k];
}

// s = max^p(|x|) / (2^(N-1) - 1) over a pool of absolute values.
inline float compute_scale_percentile(std::span<const float> pooled_abs, double p,
                                      int bits = kDefaultBits) {
  check_bits(bits);
  const float v = percentile_value(pooled_abs, p);
  if (v <= 0.0f) return kScaleFloor;
  return v / static_cast<float>(qmax(bits));
}

// Round-half-to-even division by the step, clamped to the signed range.
inline std::int32_t quantize_value(float x, float scale, int bits) {
  const float q = std::nearbyint(x / scale);
  const auto lo = static_cast<float>(qmin(bits));
  const auto hi = static_cast<float>(qmax(bits));
  return static_cast<std::int32_t>(std::clamp(q, lo, hi));
}

inline QTensor quantize(const Matrix& x, float scale, int bits = kDefaultBits) {
  check_bits(bits);
  if (!(scale > 0.0f)) throw Error("quantize: scale must be positive");
  QTensor q{x.rows(), x.cols(), std::vector<std::int32_t>(x.size()), scale, 0, bits};
  const auto in = x.flat();
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!std::isfinite(in[i])) throw Error("non-finite activation");
    q.values[i] = quantize_value(in[i], scale, bits);
  }
  return q;
}

inline QTensor quantize(std::span<const float> x, float scale, int bits = kDefaultBits) {
  return quantize(Matrix(1, x.size(), std::vector<float>(x.begin(), x.end())), scale, bits);
}

inline Matrix dequantize(const QTensor& q) {
  Matrix out(q.rows, q.cols);
  auto o = out.flat();
  for (std::size_t i = 0; i < q.values.size(); ++i) {
    o[i] = static_cast<float>(q.values[i] - q.zero_point) * q.scale;
  }
  return out;
}

// Quantize and immediately dequantize with a fixed step.
inline Matrix fake_quantize(const Matrix& x, float scale, int bits = kDefaultBits) {
  return dequantize(quantize(x, scale, bits));
}

// Scale recomputed from the tensor itself on every call.
inline QTensor quantize_dynamic(const Matrix& x, int bits = kDefaultBits) {
  return quantize(x, compute_scale_absmax(x.flat(), bits), bits);
}

// Power-of-two code: value = sign * 2^exponent, or exactly zero.
struct Log2Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int8_t> sign;  // -1, 0 or +1
  std::vector<std::int32_t> exponent;

  Matrix decode() const {
    Matrix out(rows, cols);
    auto o = out.flat();
    for (std::size_t i = 0; i < sign.size(); ++i) {
      o[i] = sign[i] == 0 ? 0.0f : static_cast<float>(sign[i]) * std::ldexp(1.0f, exponent[i]);
    }
    return out;
  }
};

// Nearest power of two; exact midpoints go to the larger magnitude.
inline Log2Tensor quantize_log2(const Matrix& x) {
  Log2Tensor out{x.rows(), x.cols(), std::vector<std::int8_t>(x.size(), 0),
                 std::vector<std::int32_t>(x.size(), 0)};
  const auto in = x.flat();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const float v = in[i];
    if (!std::isfinite(v)) throw Error("non-finite activation");
    if (v == 0.0f) continue;
    int e = 0;
    std::frexp(std::fabs(v), &e);  // |v| in [2^(e-1), 2^e)
    const double mag = std::fabs(static_cast<double>(v));
    const double upper = std::ldexp(1.0, e);
    out.exponent[i] = mag >= 0.75 * upper ? e : e - 1;
    out.sign[i] = v > 0.0f ? 1 : -1;
  }
  return out;
}

// Asymmetric scheme on [lo, hi], the (100-p)-th and p-th percentiles of X.
inline QTensor quantize_asymmetric_percentile(const Matrix& x, double p, int bits = kDefaultBits) {
  check_bits(bits);
  check_percentile(p);
  if (x.empty()) throw Error("empty calibration tensor");
  for (float v : x.flat()) {
    if (!std::isfinite(v)) throw Error("non-finite activation");
  }
  std::vector<float> sorted(x.flat().begin(), x.flat().end());
  std::sort(sorted.begin(), sorted.end());
  const float hi = sorted[nearest_rank_index(p, sorted.size())];
  const float lo = sorted[nearest_rank_index(100.0 - p, sorted.size())];
  if (!(hi > lo)) throw Error("degenerate range");

  const float levels = static_cast<float>((std::int64_t{1} << bits) - 1);
  const float scale = (hi - lo) / levels;
  const auto zp = static_cast<std::int32_t>(std::nearbyint(-lo / scale)) + qmin(bits);

  QTensor q{x.rows(), x.cols(), std::vector<std::int32_t>(x.size()), scale, zp, bits};
  const auto in = x.flat();
  for (std::size_t i = 0; i < in.size(); ++i) {
    const float shifted = std::nearbyint(in[i] / scale) + static_cast<float>(zp);
    q.values[i] = static_cast<std::int32_t>(
        std::clamp(shifted, static_cast<float>(qmin(bits)), static_cast<float>(qmax(bits))));
  }
  return q;
}

}  // namespace quamba
