#pragma once

// INT8 execution path of one block.
//
// Precision map (per token):
//   u8 -> qlinear(in_proj) -> x branch requantized, z branch kept real
//   fused conv + SiLU -> x8 (static scale s_x, percentile-derived in the
//   in_per / full modes)
//   x8 -> qlinear -> B8, C8, dt_low8 ; dt = softplus(qlinear(dt_low8) + b) -> dt8
//   scan(A8, B8, C8, D8, dt8, x8) -> y (real)
//   g = y * silu(z) -> either quantize(g) or hadamard_quantize(g)
//   -> qlinear(out_proj or H * out_proj) -> real block output
//
// All integer products accumulate in int32; scales are applied once per
// output element.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "quamba/error.hpp"
#include "quamba/hadamard.hpp"
#include "quamba/matrix.hpp"
#include "quamba/quant.hpp"
#include "quamba/ssm.hpp"

namespace quamba {

// Ablation modes: plain W8A8, percentile scan input, Hadamard output, both.
enum class Mode { naive, in_per, out_had, full };

inline std::string_view mode_name(Mode m) {
  switch (m) {
    case Mode::naive: return "naive";
    case Mode::in_per: return "in-per";
    case Mode::out_had: return "out-had";
    case Mode::full: return "quamba";
  }
  return "?";
}

inline Mode parse_mode(std::string_view s) {
  if (s == "naive") return Mode::naive;
  if (s == "in-per") return Mode::in_per;
  if (s == "out-had") return Mode::out_had;
  if (s == "quamba" || s == "full") return Mode::full;
  throw Error("unknown mode '" + std::string(s) + "' (expected naive|in-per|out-had|quamba)");
}

inline bool uses_percentile(Mode m) { return m == Mode::in_per || m == Mode::full; }
inline bool uses_hadamard(Mode m) { return m == Mode::out_had || m == Mode::full; }

// Static activation scales of one block. `y` is the scale of the tensor fed
// to the output projection: H * g in Hadamard modes, g otherwise.
struct ActivationScales {
  float in = 1.0f;
  float in_proj_x = 1.0f;
  float x = 1.0f;
  float B = 1.0f;
  float C = 1.0f;
  float dt_low = 1.0f;
  float dt = 1.0f;
  float y = 1.0f;
};

struct QuantizedBlock {
  Mode mode = Mode::full;
  int bits = kDefaultBits;
  HadamardPlan plan;
  QTensor in_proj;
  QTensor conv_weight;
  std::vector<float> conv_bias;
  QTensor x_proj_B;
  QTensor x_proj_C;
  QTensor dt_down;
  QTensor dt_up;
  QTensor dt_bias;
  QTensor A;
  QTensor D;
  QTensor out_proj;  // H * W_out when uses_hadamard(mode)
  std::vector<float> norm_weight;
  ActivationScales scales;

  std::size_t d_inner() const noexcept { return A.rows; }
};

// Per-tensor symmetric abs-max quantization of a weight.
inline QTensor quantize_weight(const Matrix& w, int bits = kDefaultBits) {
  return quantize(w, compute_scale_absmax(w.flat(), bits), bits);
}

inline QTensor quantize_weight(std::span<const float> w, int bits = kDefaultBits) {
  return quantize_weight(Matrix(1, w.size(), std::vector<float>(w.begin(), w.end())), bits);
}

inline QuantizedBlock quantize_block(const SSMParams& p, const ActivationScales& scales, Mode mode,
                                     int bits = kDefaultBits) {
  QuantizedBlock qb;
  qb.mode = mode;
  qb.bits = bits;
  qb.plan = plan_for_dim(p.A.rows());
  qb.in_proj = quantize_weight(p.in_proj, bits);
  qb.conv_weight = quantize_weight(p.conv_weight, bits);
  qb.conv_bias = p.conv_bias;
  qb.x_proj_B = quantize_weight(p.x_proj_B, bits);
  qb.x_proj_C = quantize_weight(p.x_proj_C, bits);
  qb.dt_down = quantize_weight(p.dt_down, bits);
  qb.dt_up = quantize_weight(p.dt_up, bits);
  qb.dt_bias = quantize_weight(p.dt_bias, bits);
  qb.A = quantize_weight(p.A, bits);
  qb.D = quantize_weight(p.D, bits);
  qb.out_proj = quantize_weight(uses_hadamard(mode) ? fuse_inverse_into_weights(p.out_proj, qb.plan)
                                                    : p.out_proj,
                                bits);
  qb.norm_weight = p.norm_weight;
  qb.scales = scales;
  return qb;
}

namespace detail {

inline void check_accumulator(std::size_t depth, int bits_x, int bits_w) {
  const double bound = std::ldexp(1.0, bits_x - 1) * std::ldexp(1.0, bits_w - 1) * static_cast<double>(depth);
  if (depth > (std::size_t{1} << 15) || bound >= 2147483648.0) {
    throw Error("qlinear: inner dimension " + std::to_string(depth) +
                " can overflow the 32-bit accumulator");
  }
}

inline std::vector<std::int32_t> int_matmul(const QTensor& x, const QTensor& w) {
  if (x.cols != w.rows) {
    throw Error("qlinear: inner dimensions differ (" + std::to_string(x.cols) + " vs " +
                std::to_string(w.rows) + ")");
  }
  if (x.zero_point != 0 || w.zero_point != 0) throw Error("qlinear: symmetric operands required");
  check_accumulator(x.cols, x.bits, w.bits);
  std::vector<std::int32_t> acc(x.rows * w.cols, 0);
  for (std::size_t r = 0; r < x.rows; ++r) {
    std::int32_t* o = acc.data() + r * w.cols;
    const auto xr = x.row(r);
    for (std::size_t k = 0; k < x.cols; ++k) {
      const std::int32_t xv = xr[k];
      if (xv == 0) continue;
      const auto wr = w.row(k);
      for (std::size_t n = 0; n < w.cols; ++n) o[n] += xv * wr[n];
    }
  }
  return acc;
}

}  // namespace detail

// Integer product rescaled to reals: (x8 * w8) * s_x * s_w * extra.
inline Matrix qlinear(const QTensor& x, const QTensor& w, float extra_scale = 1.0f) {
  const auto acc = detail::int_matmul(x, w);
  const float s = x.scale * w.scale * extra_scale;
  Matrix out(x.rows, w.cols);
  auto o = out.flat();
  for (std::size_t i = 0; i < acc.size(); ++i) o[i] = static_cast<float>(acc[i]) * s;
  return out;
}

// Integer product requantized to the static output scale.
inline QTensor qlinear(const QTensor& x, const QTensor& w, float s_out, int out_bits) {
  return quantize(qlinear(x, w), s_out, out_bits);
}

// Causal depthwise conv on integers, rescaled by s_w * s_x, plus bias, SiLU,
// then requantized with s_out.
inline QTensor fused_qconv(const QTensor& x, const QTensor& w, std::span<const float> bias,
                           float s_out, int out_bits) {
  if (w.cols != x.cols || bias.size() != x.cols) throw Error("fused_qconv: shape mismatch");
  const std::size_t taps = w.rows;
  const float s = w.scale * x.scale;
  Matrix real(x.rows, x.cols);
  for (std::size_t t = 0; t < x.rows; ++t) {
    auto o = real.row(t);
    for (std::size_t c = 0; c < x.cols; ++c) {
      std::int32_t acc = 0;
      for (std::size_t k = 0; k < taps; ++k) {
        const auto src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(taps - 1);
        if (src >= 0) acc += w(k, c) * x(static_cast<std::size_t>(src), c);
      }
      o[c] = silu(static_cast<float>(acc) * s + bias[c]);
    }
  }
  return quantize(real, s_out, out_bits);
}

// Dequantize-on-read scan: identical arithmetic to selective_scan applied to
// the dequantized operands. Output stays real.
inline Matrix quantized_selective_scan(const QTensor& A, const QTensor& B, const QTensor& C,
                                       const QTensor& D, const QTensor& dt, const QTensor& x,
                                       Matrix* state = nullptr) {
  const Matrix Ad = dequantize(A);
  const Matrix Dd = dequantize(D);
  return selective_scan(dequantize(x), dequantize(dt), dequantize(B), dequantize(C), Ad, Dd.flat(),
                        state);
}

// (quantize(rmsnorm(x_out + x_res)), x_out + x_res) with a static scale.
inline std::pair<QTensor, Matrix> fused_rmsnorm_quant(const Matrix& x_out, const Matrix& x_res,
                                                      std::span<const float> gain, float s_out,
                                                      int bits = kDefaultBits) {
  if (x_out.rows() != x_res.rows() || x_out.cols() != x_res.cols()) {
    throw Error("fused_rmsnorm_quant: shape mismatch");
  }
  Matrix sum(x_out.rows(), x_out.cols());
  for (std::size_t i = 0; i < sum.size(); ++i) sum.flat()[i] = x_out.flat()[i] + x_res.flat()[i];
  return {quantize(rmsnorm_rows(sum, gain), s_out, bits), std::move(sum)};
}

// Recurrent state for one-token quantized steps.
struct QBlockState {
  BasicMatrix<std::int32_t> conv_window;  // d_conv x d_inner, integer conv inputs
  Matrix h;

  static QBlockState zeros(const QuantizedBlock& qb) {
    return {BasicMatrix<std::int32_t>(qb.conv_weight.rows, qb.d_inner()),
            Matrix(qb.d_inner(), qb.A.cols)};
  }
};

namespace detail {

inline QTensor rows_of(const QTensor& q, std::size_t begin, std::size_t count) {
  QTensor out{count, q.cols, {}, q.scale, q.zero_point, q.bits};
  out.values.assign(q.values.begin() + static_cast<std::ptrdiff_t>(begin * q.cols),
                    q.values.begin() + static_cast<std::ptrdiff_t>((begin + count) * q.cols));
  return out;
}

inline Matrix qblock_tail(const QTensor& x, const Matrix& z, const QuantizedBlock& qb, Matrix* h) {
  const auto& s = qb.scales;
  const QTensor B = qlinear(x, qb.x_proj_B, s.B, qb.bits);
  const QTensor C = qlinear(x, qb.x_proj_C, s.C, qb.bits);
  const QTensor dt_low = qlinear(x, qb.dt_down, s.dt_low, qb.bits);
  Matrix dt_real = qlinear(dt_low, qb.dt_up);
  const Matrix bias = dequantize(qb.dt_bias);
  for (std::size_t r = 0; r < dt_real.rows(); ++r) {
    auto row = dt_real.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = softplus(row[c] + bias(0, c));
  }
  const QTensor dt = quantize(dt_real, s.dt, qb.bits);
  const Matrix y = quantized_selective_scan(qb.A, B, C, qb.D, dt, x, h);
  const Matrix g = gate(y, z);
  if (uses_hadamard(qb.mode)) {
    const QTensor gh = hadamard_quantize(g, s.y, qb.plan, qb.bits);
    return qlinear(gh, qb.out_proj, 1.0f / static_cast<float>(qb.plan.n));
  }
  return qlinear(quantize(g, s.y, qb.bits), qb.out_proj);
}

}  // namespace detail

// Full-sequence quantized block. `u` must be quantized with scales.in.
inline Matrix block_forward_q(const QTensor& u, const QuantizedBlock& qb) {
  const std::size_t di = qb.d_inner();
  const Matrix xz = qlinear(u, qb.in_proj);
  const QTensor xb = quantize(column_slice(xz, 0, di), qb.scales.in_proj_x, qb.bits);
  const Matrix z = column_slice(xz, di, di);
  const QTensor x = fused_qconv(xb, qb.conv_weight, qb.conv_bias, qb.scales.x, qb.bits);
  return detail::qblock_tail(x, z, qb, nullptr);
}

// One-token quantized step; `u` is a 1 x d_model QTensor.
inline std::vector<float> block_step_q(const QTensor& u, const QuantizedBlock& qb,
                                       QBlockState& state) {
  const std::size_t di = qb.d_inner();
  const Matrix xz = qlinear(u, qb.in_proj);
  const QTensor xb = quantize(column_slice(xz, 0, di), qb.scales.in_proj_x, qb.bits);
  const Matrix z = column_slice(xz, di, di);
  push_window(state.conv_window, std::span<const std::int32_t>(xb.values));
  const QTensor window{state.conv_window.rows(), di, state.conv_window.storage(), xb.scale, 0, qb.bits};
  const QTensor conv = fused_qconv(window, qb.conv_weight, qb.conv_bias, qb.scales.x, qb.bits);
  const QTensor x = detail::rows_of(conv, conv.rows - 1, 1);
  return detail::qblock_tail(x, z, qb, &state.h).storage();
}

}  // namespace quamba
