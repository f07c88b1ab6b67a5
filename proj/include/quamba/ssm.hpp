#pragma once

// Floating-point reference for one selective state space block:
//
//   u -> in_proj -> (x_branch, z)
//   x = silu(causal_conv(x_branch))
//   B_t = x_t W_B,  C_t = x_t W_C,  dt_t = softplus((x_t W_down) W_up + bias)
//   h_t = exp(dt_t A) * h_{t-1} + dt_t B_t x_t,   y_t = <C_t, h_t> + D x_t
//   out = (y * silu(z)) W_out
//
// A is diagonal per channel (d_inner x d_state), so the discretized transition
// is an elementwise exponential.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "quamba/error.hpp"
#include "quamba/matrix.hpp"

namespace quamba {

inline constexpr float kRmsNormEps = 1e-6f;

struct BlockConfig {
  std::size_t d_model = 64;
  std::size_t expand = 2;
  std::size_t d_state = 16;
  std::size_t d_conv = 4;
  std::size_t dt_rank = 4;

  std::size_t d_inner() const noexcept { return expand * d_model; }

  void validate() const {
    if (d_model == 0 || expand == 0 || d_state == 0 || d_conv == 0 || dt_rank == 0) {
      throw Error("block config: all dimensions must be positive");
    }
  }
};

struct SSMParams {
  Matrix in_proj;      // d_model x 2*d_inner, columns [x | z]
  Matrix conv_weight;  // d_conv x d_inner, tap 0 is the oldest step
  std::vector<float> conv_bias;
  Matrix x_proj_B;  // d_inner x d_state
  Matrix x_proj_C;  // d_inner x d_state
  Matrix dt_down;   // d_inner x dt_rank
  Matrix dt_up;     // dt_rank x d_inner
  std::vector<float> dt_bias;
  Matrix A;  // d_inner x d_state, strictly negative
  std::vector<float> D;
  Matrix out_proj;                 // d_inner x d_model
  std::vector<float> norm_weight;  // d_model, gain of the pre-block RMSNorm

  static SSMParams zeros(const BlockConfig& cfg) {
    const auto di = cfg.d_inner();
    SSMParams p;
    p.in_proj = Matrix(cfg.d_model, 2 * di);
    p.conv_weight = Matrix(cfg.d_conv, di);
    p.conv_bias.assign(di, 0.0f);
    p.x_proj_B = Matrix(di, cfg.d_state);
    p.x_proj_C = Matrix(di, cfg.d_state);
    p.dt_down = Matrix(di, cfg.dt_rank);
    p.dt_up = Matrix(cfg.dt_rank, di);
    p.dt_bias.assign(di, 0.0f);
    p.A = Matrix(di, cfg.d_state, -1.0f);
    p.D.assign(di, 0.0f);
    p.out_proj = Matrix(di, cfg.d_model);
    p.norm_weight.assign(cfg.d_model, 1.0f);
    return p;
  }

  void validate(const BlockConfig& cfg, bool require_negative_a = true) const {
    const auto di = cfg.d_inner();
    auto shape = [](const Matrix& m, std::size_t r, std::size_t c, const char* name) {
      if (m.rows() != r || m.cols() != c) {
        throw Error(std::string("block params: ") + name + " has shape " +
                    std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ", expected " +
                    std::to_string(r) + "x" + std::to_string(c));
      }
    };
    auto length = [](const std::vector<float>& v, std::size_t n, const char* name) {
      if (v.size() != n) throw Error(std::string("block params: ") + name + " has wrong length");
    };
    shape(in_proj, cfg.d_model, 2 * di, "in_proj");
    shape(conv_weight, cfg.d_conv, di, "conv_weight");
    length(conv_bias, di, "conv_bias");
    shape(x_proj_B, di, cfg.d_state, "x_proj_B");
    shape(x_proj_C, di, cfg.d_state, "x_proj_C");
    shape(dt_down, di, cfg.dt_rank, "dt_down");
    shape(dt_up, cfg.dt_rank, di, "dt_up");
    length(dt_bias, di, "dt_bias");
    shape(A, di, cfg.d_state, "A");
    length(D, di, "D");
    shape(out_proj, di, cfg.d_model, "out_proj");
    length(norm_weight, cfg.d_model, "norm_weight");
    if (require_negative_a) {
      for (float a : A.flat()) {
        if (!(a < 0.0f)) throw Error("block params: A entries must be strictly negative");
      }
    }
  }
};

// Activation sites inside a block, in dataflow order.
enum class Site { in, in_proj_x, z, x, B, C, dt_low, dt, y };

inline constexpr std::array<Site, 9> kAllSites{Site::in, Site::in_proj_x, Site::z,
                                               Site::x,  Site::B,         Site::C,
                                               Site::dt_low, Site::dt,    Site::y};

inline std::string_view site_name(Site s) {
  switch (s) {
    case Site::in: return "in";
    case Site::in_proj_x: return "in_proj.x";
    case Site::z: return "z";
    case Site::x: return "x";
    case Site::B: return "B";
    case Site::C: return "C";
    case Site::dt_low: return "dt_proj.low";
    case Site::dt: return "dt";
    case Site::y: return "y";
  }
  return "?";
}

// Called on each activation site during a float forward. The tensor may be
// modified in place (used to fake-quantize single sites).
using SiteHook = std::function<void(std::size_t layer, Site site, Matrix& activation)>;

inline float silu(float x) { return x / (1.0f + std::exp(-x)); }
inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

inline float softplus(float x) {
  // log1p(exp(x)) without overflow for large x.
  return x > 20.0f ? x : std::log1p(std::exp(x));
}

inline float softplus_inverse(float y) { return y > 20.0f ? y : std::log(std::expm1(y)); }

inline std::vector<float> rmsnorm(std::span<const float> x, std::span<const float> gain) {
  if (x.size() != gain.size()) throw Error("rmsnorm: gain length mismatch");
  float ss = 0.0f;
  for (float v : x) ss += v * v;
  const float inv = 1.0f / std::sqrt(ss / static_cast<float>(x.size()) + kRmsNormEps);
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv * gain[i];
  return out;
}

inline Matrix rmsnorm_rows(const Matrix& x, std::span<const float> gain) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto n = rmsnorm(x.row(r), gain);
    std::copy(n.begin(), n.end(), out.row(r).begin());
  }
  return out;
}

// y * silu(z), elementwise.
inline Matrix gate(const Matrix& y, const Matrix& z) {
  if (y.rows() != z.rows() || y.cols() != z.cols()) throw Error("gate: shape mismatch");
  Matrix out(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.size(); ++i) out.flat()[i] = y.flat()[i] * silu(z.flat()[i]);
  return out;
}

struct Selection {
  Matrix B;   // T x d_state
  Matrix C;   // T x d_state
  Matrix dt;  // T x d_inner, strictly positive
};

inline Matrix dt_from_low_rank(const Matrix& dt_low, const SSMParams& p) {
  Matrix dt = matmul(dt_low, p.dt_up);
  for (std::size_t r = 0; r < dt.rows(); ++r) {
    auto row = dt.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] = softplus(row[c] + p.dt_bias[c]);
  }
  return dt;
}

inline Selection selection(const Matrix& x, const SSMParams& p) {
  return {matmul(x, p.x_proj_B), matmul(x, p.x_proj_C), dt_from_low_rank(matmul(x, p.dt_down), p)};
}

struct Discretized {
  Matrix A_bar;  // d_inner x d_state
  Matrix B_bar;  // d_inner x d_state
};

// A_bar = exp(dt * A), B_bar = dt * B for one time step.
inline Discretized discretize(const Matrix& A, std::span<const float> B_t,
                              std::span<const float> dt_t) {
  if (A.rows() != dt_t.size() || A.cols() != B_t.size()) throw Error("discretize: shape mismatch");
  Discretized d{Matrix(A.rows(), A.cols()), Matrix(A.rows(), A.cols())};
  for (std::size_t i = 0; i < A.rows(); ++i) {
    for (std::size_t j = 0; j < A.cols(); ++j) {
      d.A_bar(i, j) = std::exp(dt_t[i] * A(i, j));
      d.B_bar(i, j) = dt_t[i] * B_t[j];
    }
  }
  return d;
}

// One recurrence step for every channel. `h` is d_inner x d_state and is
// updated in place; returns y_t.
inline void scan_step(Matrix& h, std::span<const float> x_t, std::span<const float> dt_t,
                      std::span<const float> B_t, std::span<const float> C_t, const Matrix& A,
                      std::span<const float> D, std::span<float> y_t) {
  const std::size_t ds = A.cols();
  for (std::size_t i = 0; i < A.rows(); ++i) {
    auto hi = h.row(i);
    const auto ai = A.row(i);
    const float dti = dt_t[i];
    const float xi = x_t[i];
    float acc = 0.0f;
    for (std::size_t j = 0; j < ds; ++j) {
      hi[j] = std::exp(dti * ai[j]) * hi[j] + (dti * B_t[j]) * xi;
      acc += C_t[j] * hi[j];
    }
    const float y = acc + D[i] * xi;
    if (!std::isfinite(y)) throw Error("scan divergence");
    y_t[i] = y;
  }
}

// Sequential scan from h_0 = 0. When `state` is given it is used as h_0 and
// holds the final state on return.
inline Matrix selective_scan(const Matrix& x, const Matrix& dt, const Matrix& B, const Matrix& C,
                             const Matrix& A, std::span<const float> D, Matrix* state = nullptr) {
  const std::size_t T = x.rows();
  if (dt.rows() != T || B.rows() != T || C.rows() != T) throw Error("selective_scan: length mismatch");
  if (x.cols() != A.rows() || dt.cols() != A.rows() || B.cols() != A.cols() ||
      C.cols() != A.cols() || D.size() != A.rows()) {
    throw Error("selective_scan: shape mismatch");
  }
  Matrix local(A.rows(), A.cols());
  Matrix& h = state != nullptr ? *state : local;
  Matrix y(T, A.rows());
  for (std::size_t t = 0; t < T; ++t) scan_step(h, x.row(t), dt.row(t), B.row(t), C.row(t), A, D, y.row(t));
  return y;
}

// Depthwise causal convolution with w - 1 zeros of left padding:
// out[t, c] = sum_k W[k, c] * x[t - w + 1 + k, c] + bias[c].
inline Matrix causal_conv(const Matrix& x, const Matrix& w, std::span<const float> bias) {
  if (w.cols() != x.cols() || bias.size() != x.cols()) throw Error("causal_conv: shape mismatch");
  const std::size_t taps = w.rows();
  Matrix out(x.rows(), x.cols());
  for (std::size_t t = 0; t < x.rows(); ++t) {
    auto o = out.row(t);
    for (std::size_t c = 0; c < x.cols(); ++c) {
      float acc = 0.0f;
      for (std::size_t k = 0; k < taps; ++k) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + k) - static_cast<std::ptrdiff_t>(taps - 1);
        if (src >= 0) acc += w(k, c) * x(static_cast<std::size_t>(src), c);
      }
      o[c] = acc + bias[c];
    }
  }
  return out;
}

inline void silu_inplace(Matrix& m) {
  for (float& v : m.flat()) v = silu(v);
}

// Recurrent state carried between single-token steps.
struct BlockState {
  Matrix conv_window;  // d_conv x d_inner, most recent conv input last
  Matrix h;            // d_inner x d_state

  static BlockState zeros(const BlockConfig& cfg) {
    return {Matrix(cfg.d_conv, cfg.d_inner()), Matrix(cfg.d_inner(), cfg.d_state)};
  }
};

namespace detail {

inline void call_hook(const SiteHook& hook, std::size_t layer, Site site, Matrix& m) {
  if (hook) hook(layer, site, m);
}

// Shared tail of the float block once the conv output is known.
inline Matrix block_tail_fp(Matrix x, Matrix z, const SSMParams& p, const SiteHook& hook,
                            std::size_t layer, Matrix* h) {
  call_hook(hook, layer, Site::x, x);
  Matrix B = matmul(x, p.x_proj_B);
  call_hook(hook, layer, Site::B, B);
  Matrix C = matmul(x, p.x_proj_C);
  call_hook(hook, layer, Site::C, C);
  Matrix dt_low = matmul(x, p.dt_down);
  call_hook(hook, layer, Site::dt_low, dt_low);
  Matrix dt = dt_from_low_rank(dt_low, p);
  call_hook(hook, layer, Site::dt, dt);
  Matrix y = selective_scan(x, dt, B, C, p.A, p.D, h);
  call_hook(hook, layer, Site::z, z);
  Matrix g = gate(y, z);
  call_hook(hook, layer, Site::y, g);
  return matmul(g, p.out_proj);
}

inline std::pair<Matrix, Matrix> split_in_proj(const Matrix& xz, std::size_t d_inner) {
  return {column_slice(xz, 0, d_inner), column_slice(xz, d_inner, d_inner)};
}

}  // namespace detail

// Full-sequence float block. `u` is the already-normalized block input
// (T x d_model); the residual is added by the caller.
inline Matrix block_forward_fp(const Matrix& u, const SSMParams& p, const SiteHook& hook = {},
                               std::size_t layer = 0) {
  const std::size_t di = p.A.rows();
  Matrix uin = u;
  detail::call_hook(hook, layer, Site::in, uin);
  auto [xb, z] = detail::split_in_proj(matmul(uin, p.in_proj), di);
  detail::call_hook(hook, layer, Site::in_proj_x, xb);
  Matrix x = causal_conv(xb, p.conv_weight, p.conv_bias);
  silu_inplace(x);
  return detail::block_tail_fp(std::move(x), std::move(z), p, hook, layer, nullptr);
}

// Shifts `x_row` into a d_conv-row window, oldest first.
template <typename T>
void push_window(BasicMatrix<T>& window, std::span<const T> x_row) {
  const std::size_t w = window.rows();
  for (std::size_t k = 0; k + 1 < w; ++k) {
    auto dst = window.row(k);
    const auto src = window.row(k + 1);
    std::copy(src.begin(), src.end(), dst.begin());
  }
  std::copy(x_row.begin(), x_row.end(), window.row(w - 1).begin());
}

// One-token float step carrying conv window and scan state.
inline std::vector<float> block_step_fp(std::span<const float> u, const SSMParams& p,
                                        BlockState& state) {
  const std::size_t di = p.A.rows();
  const Matrix urow(1, u.size(), std::vector<float>(u.begin(), u.end()));
  auto [xb, z] = detail::split_in_proj(matmul(urow, p.in_proj), di);
  push_window(state.conv_window, std::span<const float>(xb.row(0)));
  const Matrix conv = causal_conv(state.conv_window, p.conv_weight, p.conv_bias);
  const auto last = conv.row(conv.rows() - 1);
  Matrix x(1, di, std::vector<float>(last.begin(), last.end()));
  silu_inplace(x);
  Matrix out = detail::block_tail_fp(std::move(x), std::move(z), p, {}, 0, &state.h);
  return out.storage();
}

}  // namespace quamba
