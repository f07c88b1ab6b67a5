#pragma once

// Walsh-Hadamard transforms for arbitrary supported widths.
//
// A width n is factorized as n = 2^p * m with m in {1, 12, 20}. The
// transform matrix is H_n = H_{2^p} (x) H_m (Kronecker product), so it can
// be applied as m-point dense products followed by a radix-2 butterfly over
// the 2^p blocks. All transforms are unnormalized: H_n * H_n^T = n * I.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "quamba/error.hpp"
#include "quamba/matrix.hpp"
#include "quamba/quant.hpp"

namespace quamba {

// Dense materialization limit.
inline constexpr std::size_t kMaxDenseHadamard = 4096;

namespace detail {

// Paley construction I for a prime q = 3 (mod 4): order q + 1.
inline std::vector<std::int8_t> paley_hadamard(int q) {
  std::vector<int> chi(static_cast<std::size_t>(q), -1);
  chi[0] = 0;
  for (int x = 1; x < q; ++x) chi[static_cast<std::size_t>((x * x) % q)] = 1;

  const int n = q + 1;
  std::vector<std::int8_t> h(static_cast<std::size_t>(n * n));
  auto at = [&](int r, int c) -> std::int8_t& { return h[static_cast<std::size_t>(r * n + c)]; };
  at(0, 0) = 1;
  for (int j = 1; j < n; ++j) {
    at(0, j) = 1;
    at(j, 0) = -1;
  }
  for (int i = 1; i < n; ++i) {
    for (int j = 1; j < n; ++j) {
      const int s = i == j ? 1 : chi[static_cast<std::size_t>(((j - i) % q + q) % q)];
      at(i, j) = static_cast<std::int8_t>(s);
    }
  }
  return h;
}

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

}  // namespace detail

// Sizes of the embedded non-power-of-two base matrices.
inline constexpr std::array<std::size_t, 2> kBaseSizes{12, 20};

// H_{2^k} by the Sylvester recursion H_{2^k} = H_2 (x) H_{2^(k-1)}.
inline Matrix build_walsh(unsigned k) {
  if (k > 12) throw Error("build_walsh: 2^" + std::to_string(k) + " exceeds the dense size limit");
  const std::size_t n = std::size_t{1} << k;
  Matrix h(n, n);
  h(0, 0) = 1.0f;
  for (std::size_t half = 1; half < n; half *= 2) {
    for (std::size_t r = 0; r < half; ++r) {
      for (std::size_t c = 0; c < half; ++c) {
        const float v = h(r, c);
        h(r, c + half) = v;
        h(r + half, c) = v;
        h(r + half, c + half) = -v;
      }
    }
  }
  return h;
}

struct HadamardPlan {
  std::size_t n = 1;
  unsigned p = 0;
  std::size_t m = 1;
  std::vector<std::int8_t> base;  // m x m, row-major

  std::size_t blocks() const noexcept { return std::size_t{1} << p; }
  std::int8_t base_at(std::size_t r, std::size_t c) const noexcept { return base[r * m + c]; }
};

inline HadamardPlan plan_for_dim(std::size_t n) {
  if (n == 0) throw Error("plan_for_dim: dimension must be positive");
  unsigned p = 0;
  std::size_t rest = n;
  while (rest % 2 == 0) {
    rest /= 2;
    ++p;
  }
  // Pull powers of two back into the residual until it is a known size.
  while (true) {
    if (rest == 1) {
      return HadamardPlan{n, p, 1, {1}};
    }
    for (std::size_t m : kBaseSizes) {
      if (rest == m) {
        return HadamardPlan{n, p, m, detail::paley_hadamard(static_cast<int>(m) - 1)};
      }
    }
    if (p == 0 || rest > 20) break;
    rest *= 2;
    --p;
  }
  throw Error("plan_for_dim: no Hadamard factorization available for n=" + std::to_string(n));
}

// Dense H_n for a plan, used by tests and small diagnostics.
inline Matrix dense_hadamard(const HadamardPlan& plan) {
  if (plan.n > kMaxDenseHadamard) throw Error("dense_hadamard: n exceeds the dense size limit");
  const Matrix walsh = build_walsh(plan.p);
  Matrix h(plan.n, plan.n);
  for (std::size_t a = 0; a < plan.blocks(); ++a)
    for (std::size_t a2 = 0; a2 < plan.blocks(); ++a2)
      for (std::size_t b = 0; b < plan.m; ++b)
        for (std::size_t b2 = 0; b2 < plan.m; ++b2)
          h(a * plan.m + b, a2 * plan.m + b2) = walsh(a, a2) * static_cast<float>(plan.base_at(b, b2));
  return h;
}

// In-place H_n * x in O(n log n + n m).
template <typename T>
void apply_hadamard_inplace(const HadamardPlan& plan, std::span<T> x) {
  if (x.size() != plan.n) {
    throw Error("apply_hadamard: length " + std::to_string(x.size()) + " does not match plan n=" +
                std::to_string(plan.n));
  }
  const std::size_t m = plan.m;
  if (m > 1) {
    std::vector<T> tmp(m);
    for (std::size_t blk = 0; blk < plan.blocks(); ++blk) {
      T* chunk = x.data() + blk * m;
      for (std::size_t r = 0; r < m; ++r) {
        T acc{};
        for (std::size_t c = 0; c < m; ++c) {
          acc += plan.base_at(r, c) > 0 ? chunk[c] : -chunk[c];
        }
        tmp[r] = acc;
      }
      for (std::size_t r = 0; r < m; ++r) chunk[r] = tmp[r];
    }
  }
  for (std::size_t h = 1; h < plan.blocks(); h *= 2) {
    for (std::size_t i = 0; i < plan.blocks(); i += 2 * h) {
      for (std::size_t j = i; j < i + h; ++j) {
        T* lo = x.data() + j * m;
        T* hi = x.data() + (j + h) * m;
        for (std::size_t b = 0; b < m; ++b) {
          const T u = lo[b];
          const T v = hi[b];
          lo[b] = u + v;
          hi[b] = u - v;
        }
      }
    }
  }
}

template <typename T>
std::vector<T> apply_hadamard(const HadamardPlan& plan, std::span<const T> x) {
  std::vector<T> out(x.begin(), x.end());
  apply_hadamard_inplace(plan, std::span<T>(out));
  return out;
}

// Transforms every row (token) of x.
inline Matrix apply_hadamard_rows(const HadamardPlan& plan, const Matrix& x) {
  Matrix out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) apply_hadamard_inplace(plan, out.row(r));
  return out;
}

// W^H = H_n * W for W of shape n x d_out (the transform acts on the input
// axis). Then x * W == (1/n) * (H_n x) * W^H for every row x.
inline Matrix fuse_inverse_into_weights(const Matrix& w, const HadamardPlan& plan) {
  if (w.rows() != plan.n) {
    throw Error("fuse_inverse_into_weights: weight has " + std::to_string(w.rows()) +
                " input features, plan n=" + std::to_string(plan.n));
  }
  Matrix wt = w.transposed();
  for (std::size_t r = 0; r < wt.rows(); ++r) apply_hadamard_inplace(plan, wt.row(r));
  return wt.transposed();
}

// Fused transform-and-quantize: clamp(round(H_n y / s_y)).
inline QTensor hadamard_quantize(const Matrix& y, float s_y, const HadamardPlan& plan,
                                 int bits = kDefaultBits) {
  return quantize(apply_hadamard_rows(plan, y), s_y, bits);
}

inline QTensor hadamard_quantize(std::span<const float> y, float s_y, const HadamardPlan& plan,
                                 int bits = kDefaultBits) {
  return hadamard_quantize(Matrix(1, y.size(), std::vector<float>(y.begin(), y.end())), s_y, plan,
                           bits);
}

}  // namespace quamba
