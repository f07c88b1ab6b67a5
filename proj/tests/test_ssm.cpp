#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "quamba/ssm.hpp"

using namespace quamba;

namespace {

void fill(Matrix& m, std::mt19937_64& eng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> d(lo, hi);
  for (auto& v : m.flat()) v = d(eng);
}

void fill(std::vector<float>& v, std::mt19937_64& eng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> d(lo, hi);
  for (auto& x : v) x = d(eng);
}

SSMParams random_params(const BlockConfig& cfg, std::mt19937_64& eng) {
  SSMParams p = SSMParams::zeros(cfg);
  fill(p.in_proj, eng);
  fill(p.conv_weight, eng);
  fill(p.conv_bias, eng, -0.2f, 0.2f);
  fill(p.x_proj_B, eng);
  fill(p.x_proj_C, eng);
  fill(p.dt_down, eng);
  fill(p.dt_up, eng);
  fill(p.dt_bias, eng, -3.0f, -1.0f);
  fill(p.A, eng, -4.0f, -0.5f);
  fill(p.D, eng);
  fill(p.out_proj, eng);
  return p;
}

double softplus_d(double x) { return std::log1p(std::exp(x)); }

}  // namespace

TEST(Ssm, SoftplusOfZero) { EXPECT_NEAR(softplus(0.0f), std::numbers::ln2_v<float>, 1e-7f); }

TEST(Ssm, SiluValues) {
  EXPECT_EQ(silu(0.0f), 0.0f);
  EXPECT_NEAR(silu(20.0f), 20.0f, 1e-6f * 20.0f);
  std::mt19937_64 eng(1);
  std::uniform_real_distribution<double> d(-30.0, 30.0);
  for (int i = 0; i < 1000; ++i) {
    const double x = d(eng);
    const long double ref = static_cast<long double>(x) / (1.0L + std::exp(-static_cast<long double>(x)));
    EXPECT_NEAR(silu(x), static_cast<double>(ref), 1e-12 * std::max(1.0, std::fabs(x)));
    EXPECT_NEAR(silu(static_cast<float>(x)), static_cast<double>(ref), 1e-5 * std::max(1.0, std::fabs(x)));
  }
}

TEST(Ssm, RmsNormHandValues) {
  const std::vector<float> x{3.0f, 4.0f}, g{1.0f, 1.0f};
  const auto y = rmsnorm(x, g);
  EXPECT_NEAR(y[0], 0.8485f, 1e-4f);
  EXPECT_NEAR(y[1], 1.1314f, 1e-4f);
  const std::vector<float> zero{0.0f, 0.0f};
  const auto z = rmsnorm(zero, g);
  EXPECT_EQ(z[0], 0.0f);
  EXPECT_EQ(z[1], 0.0f);
}

TEST(Ssm, RmsNormScaleInvariant) {
  std::mt19937_64 eng(2);
  std::vector<float> x(64), g(64);
  fill(x, eng);
  fill(g, eng, 0.5f, 1.5f);
  const auto a = rmsnorm(x, g);
  // Power-of-two factors scale exactly in float, leaving only the eps effect.
  for (float alpha : {0.5f, 2.0f, 4.0f, 64.0f}) {
    std::vector<float> xs = x;
    for (auto& v : xs) v *= alpha;
    const auto b = rmsnorm(xs, g);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-5f * std::max(1.0f, std::fabs(a[i])));
  }
}

TEST(Ssm, GateMatchesComposition) {
  const Matrix y(1, 3, std::vector<float>{2.0f, -1.0f, 0.5f});
  const Matrix z(1, 3, std::vector<float>{0.0f, 1.5f, -2.0f});
  const Matrix g = gate(y, z);
  EXPECT_EQ(g(0, 0), 0.0f);
  EXPECT_EQ(g(0, 1), -1.0f * silu(1.5f));
  EXPECT_EQ(g(0, 2), 0.5f * silu(-2.0f));
}

TEST(Ssm, DiscretizeValues) {
  const Matrix A(1, 1, -1.0f);
  const std::vector<float> B{1.0f}, dt{std::numbers::ln2_v<float>};
  const auto d = discretize(A, B, dt);
  EXPECT_NEAR(d.A_bar(0, 0), 0.5f, 1e-7f);
  EXPECT_NEAR(d.B_bar(0, 0), std::numbers::ln2_v<float>, 1e-7f);
}

TEST(Ssm, DiscretizedDecayInUnitInterval) {
  std::mt19937_64 eng(3);
  Matrix A(32, 8);
  fill(A, eng, -16.0f, -0.01f);
  std::vector<float> B(8), dt(32);
  fill(B, eng);
  fill(dt, eng, 1e-3f, 0.5f);
  const auto d = discretize(A, B, dt);
  for (float v : d.A_bar.flat()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
}

TEST(Ssm, ScalarScanHandUnrolled) {
  const float ln2 = std::numbers::ln2_v<float>;
  const Matrix A(1, 1, -1.0f), B(2, 1, 1.0f), C(2, 1, 1.0f), dt(2, 1, ln2), x(2, 1, 1.0f);
  const std::vector<float> D{0.0f};
  const Matrix y = selective_scan(x, dt, B, C, A, D);
  EXPECT_NEAR(y(0, 0), 0.6931f, 1e-4f);
  EXPECT_NEAR(y(1, 0), 1.0397f, 1e-4f);
}

TEST(Ssm, ZeroInputGivesZeroOutput) {
  std::mt19937_64 eng(4);
  Matrix A(4, 3), B(5, 3), C(5, 3), dt(5, 4);
  fill(A, eng, -2.0f, -0.1f);
  fill(B, eng);
  fill(C, eng);
  fill(dt, eng, 0.01f, 1.0f);
  const std::vector<float> D{1.0f, 2.0f, 3.0f, 4.0f};
  const Matrix y = selective_scan(Matrix(5, 4), dt, B, C, A, D);
  for (float v : y.flat()) EXPECT_EQ(v, 0.0f);
}

TEST(Ssm, ScanDivergenceDetected) {
  const Matrix A(1, 1, -1.0f), B(1, 1, 1e30f), C(1, 1, 1e30f), dt(1, 1, 1.0f), x(1, 1, 1e30f);
  const std::vector<float> D{0.0f};
  EXPECT_THROW(selective_scan(x, dt, B, C, A, D), Error);
}

TEST(Ssm, ScanStateStaysBounded) {
  // |h| <= max|B_bar x| / (1 - max A_bar) for a constant-input system.
  std::mt19937_64 eng(5);
  const std::size_t T = 200;
  Matrix A(3, 2), B(T, 2), C(T, 2, 0.0f), dt(T, 3), x(T, 3);
  fill(A, eng, -1.0f, -0.2f);
  fill(B, eng);
  fill(dt, eng, 0.1f, 0.3f);
  fill(x, eng);
  const std::vector<float> D(3, 0.0f);
  Matrix h(3, 2);
  double max_drive = 0.0, max_decay = 0.0;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        max_drive = std::max(max_drive, std::fabs(double(dt(t, i)) * B(t, j) * x(t, i)));
        max_decay = std::max(max_decay, std::exp(double(dt(t, i)) * A(i, j)));
      }
  selective_scan(x, dt, B, C, A, D, &h);
  for (float v : h.flat()) EXPECT_LE(std::fabs(v), max_drive / (1.0 - max_decay) + 1e-5);
}

TEST(Ssm, CausalConvHandValues) {
  const Matrix x(3, 1, std::vector<float>{1.0f, 2.0f, 3.0f});
  const Matrix w(2, 1, 1.0f);
  const std::vector<float> bias{0.0f};
  const Matrix out = causal_conv(x, w, bias);
  EXPECT_EQ(out.storage(), (std::vector<float>{1.0f, 3.0f, 5.0f}));

  Matrix last_tap(4, 1);
  last_tap(3, 0) = 1.0f;
  EXPECT_EQ(causal_conv(x, last_tap, bias), x);
}

TEST(Ssm, CausalConvIsCausal) {
  std::mt19937_64 eng(6);
  Matrix x(10, 4), w(4, 4);
  fill(x, eng);
  fill(w, eng);
  const std::vector<float> bias(4, 0.1f);
  const Matrix base = causal_conv(x, w, bias);
  for (std::size_t t = 0; t + 1 < 10; ++t) {
    Matrix xp = x;
    xp(t + 1, 2) += 5.0f;
    const Matrix out = causal_conv(xp, w, bias);
    for (std::size_t s = 0; s <= t; ++s)
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out(s, c), base(s, c));
  }
}

TEST(Ssm, SelectionLinearity) {
  const BlockConfig cfg{4, 2, 3, 2, 2};
  std::mt19937_64 eng(7);
  const SSMParams p = random_params(cfg, eng);
  const Matrix zero(1, cfg.d_inner());
  const auto s0 = selection(zero, p);
  for (float v : s0.B.flat()) EXPECT_EQ(v, 0.0f);
  for (float v : s0.C.flat()) EXPECT_EQ(v, 0.0f);
  for (std::size_t c = 0; c < cfg.d_inner(); ++c) EXPECT_EQ(s0.dt(0, c), softplus(p.dt_bias[c]));

  Matrix x(1, cfg.d_inner()), x2(1, cfg.d_inner());
  fill(x, eng);
  for (std::size_t i = 0; i < x.size(); ++i) x2.flat()[i] = 2.0f * x.flat()[i];
  const auto s1 = selection(x, p), s2 = selection(x2, p);
  for (std::size_t i = 0; i < s1.B.size(); ++i) EXPECT_FLOAT_EQ(s2.B.flat()[i], 2.0f * s1.B.flat()[i]);
  for (float v : s1.dt.flat()) EXPECT_GT(v, 0.0f);
}

TEST(Ssm, ZeroWeightsGiveZeroOutput) {
  const BlockConfig cfg{8, 2, 4, 3, 2};
  SSMParams p = SSMParams::zeros(cfg);
  std::mt19937_64 eng(8);
  Matrix u(5, 8);
  fill(u, eng);
  const Matrix y = block_forward_fp(u, p);
  for (float v : y.flat()) EXPECT_EQ(v, 0.0f);
}

TEST(Ssm, SingleStepBlockHandUnrolled) {
  const BlockConfig cfg{4, 2, 2, 2, 1};
  std::mt19937_64 eng(9);
  const SSMParams p = random_params(cfg, eng);
  Matrix u(1, 4);
  fill(u, eng);
  const Matrix y = block_forward_fp(u, p);

  // Double-precision composition written out per element.
  const std::size_t di = 8, ds = 2, dm = 4;
  std::vector<double> xb(di), z(di), x(di), B(ds), C(ds), dt(di), g(di), out(dm);
  for (std::size_t c = 0; c < di; ++c) {
    for (std::size_t k = 0; k < dm; ++k) {
      xb[c] += double(u(0, k)) * p.in_proj(k, c);
      z[c] += double(u(0, k)) * p.in_proj(k, di + c);
    }
    // Only the last tap sees the single real step.
    x[c] = silu(double(p.conv_weight(1, c)) * xb[c] + p.conv_bias[c]);
  }
  for (std::size_t j = 0; j < ds; ++j)
    for (std::size_t c = 0; c < di; ++c) {
      B[j] += x[c] * p.x_proj_B(c, j);
      C[j] += x[c] * p.x_proj_C(c, j);
    }
  double low = 0.0;
  for (std::size_t c = 0; c < di; ++c) low += x[c] * p.dt_down(c, 0);
  for (std::size_t c = 0; c < di; ++c) {
    dt[c] = softplus_d(low * p.dt_up(0, c) + p.dt_bias[c]);
    double yc = 0.0;
    for (std::size_t j = 0; j < ds; ++j) yc += C[j] * (dt[c] * B[j] * x[c]);  // h_0 = 0
    yc += double(p.D[c]) * x[c];
    g[c] = yc * silu(z[c]);
  }
  for (std::size_t k = 0; k < dm; ++k) {
    for (std::size_t c = 0; c < di; ++c) out[k] += g[c] * p.out_proj(c, k);
    EXPECT_NEAR(y(0, k), out[k], 1e-5 * std::max(1.0, std::fabs(out[k])));
  }
}

TEST(Ssm, BlockIsCausalAndDeterministic) {
  const BlockConfig cfg{8, 2, 4, 4, 2};
  std::mt19937_64 eng(10);
  const SSMParams p = random_params(cfg, eng);
  Matrix u(12, 8);
  fill(u, eng);
  const Matrix base = block_forward_fp(u, p);
  EXPECT_EQ(base, block_forward_fp(u, p));
  Matrix up = u;
  up(7, 3) += 2.0f;
  const Matrix out = block_forward_fp(up, p);
  for (std::size_t t = 0; t < 7; ++t)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out(t, c), base(t, c));
}

TEST(Ssm, StepMatchesFullSequence) {
  const BlockConfig cfg{8, 2, 4, 4, 2};
  std::mt19937_64 eng(11);
  const SSMParams p = random_params(cfg, eng);
  Matrix u(9, 8);
  fill(u, eng);
  const Matrix full = block_forward_fp(u, p);
  BlockState st = BlockState::zeros(cfg);
  for (std::size_t t = 0; t < 9; ++t) {
    const auto y = block_step_fp(u.row(t), p, st);
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(y[c], full(t, c), 1e-5f);
  }
}

TEST(Ssm, HooksSeeEverySite) {
  const BlockConfig cfg{8, 2, 4, 4, 2};
  std::mt19937_64 eng(12);
  const SSMParams p = random_params(cfg, eng);
  Matrix u(3, 8);
  fill(u, eng);
  std::vector<Site> seen;
  block_forward_fp(u, p, [&](std::size_t, Site s, Matrix&) { seen.push_back(s); });
  for (Site s : kAllSites) EXPECT_EQ(std::count(seen.begin(), seen.end(), s), 1) << site_name(s);
}
