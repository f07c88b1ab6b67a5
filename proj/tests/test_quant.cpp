#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "quamba/quant.hpp"

using namespace quamba;

namespace {

Matrix row(std::vector<float> v) {
  const auto n = v.size();
  return Matrix(1, n, std::move(v));
}

}  // namespace

TEST(Quant, AbsmaxScaleAndValues) {
  const Matrix x = row({0.5f, -1.0f, 2.54f});
  const float s = compute_scale_absmax(x.flat(), 8);
  EXPECT_NEAR(s, 0.02f, 1e-7f);
  const QTensor q = quantize(x, s, 8);
  EXPECT_EQ(q.values, (std::vector<std::int32_t>{25, -50, 127}));
}

TEST(Quant, RoundsToNearest) {
  EXPECT_EQ(quantize_value(0.03f, 0.02f, 8), 2);  // 1.5 rounds to even 2
  EXPECT_EQ(quantize_value(0.5f, 1.0f, 8), 0);
  EXPECT_EQ(quantize_value(2.5f, 1.0f, 8), 2);
  EXPECT_EQ(quantize_value(-2.5f, 1.0f, 8), -2);
}

TEST(Quant, SaturatesAtRange) {
  EXPECT_EQ(quantize_value(1e6f, 0.01f, 8), 127);
  EXPECT_EQ(quantize_value(-1e6f, 0.01f, 8), -128);
  EXPECT_EQ(quantize_value(1e6f, 0.01f, 4), 7);
  EXPECT_EQ(quantize_value(-1e6f, 0.01f, 4), -8);
}

TEST(Quant, DynamicScale) {
  const QTensor q = quantize_dynamic(row({1.0f, 2.0f, 4.0f}), 8);
  EXPECT_EQ(q.values, (std::vector<std::int32_t>{32, 64, 127}));
  EXPECT_NEAR(q.scale, 4.0f / 127.0f, 1e-9f);
}

TEST(Quant, AllZeroUsesScaleFloor) {
  const Matrix x(2, 3);
  EXPECT_EQ(compute_scale_absmax(x.flat(), 8), kScaleFloor);
  const QTensor q = quantize(x, kScaleFloor, 8);
  for (auto v : q.values) EXPECT_EQ(v, 0);
}

TEST(Quant, EmptyTensorRejected) {
  const std::vector<float> none;
  EXPECT_THROW(compute_scale_absmax(none, 8), Error);
  EXPECT_THROW(percentile_value(none, 99.0), Error);
}

TEST(Quant, NonFiniteRejected) {
  EXPECT_THROW(quantize(row({1.0f, NAN}), 0.1f, 8), Error);
  EXPECT_THROW(quantize(row({INFINITY}), 0.1f, 8), Error);
  EXPECT_THROW(quantize_log2(row({NAN})), Error);
}

TEST(Quant, BitWidthBounds) {
  const Matrix x = row({1.0f});
  EXPECT_THROW(quantize(x, 0.1f, 1), Error);
  EXPECT_THROW(quantize(x, 0.1f, 17), Error);
  EXPECT_NO_THROW(quantize(x, 0.1f, 2));
  EXPECT_NO_THROW(quantize(x, 0.1f, 16));
}

TEST(Quant, NearestRankPercentile) {
  std::vector<float> v(1000);
  for (int i = 0; i < 1000; ++i) v[static_cast<std::size_t>(i)] = static_cast<float>(1000 - i);
  EXPECT_EQ(percentile_value(v, 99.0), 990.0f);
  EXPECT_EQ(percentile_value(v, 100.0), 1000.0f);
  EXPECT_EQ(percentile_value(v, 50.0), 500.0f);
  EXPECT_EQ(percentile_value(v, 0.01), 1.0f);
  EXPECT_NEAR(compute_scale_percentile(v, 99.0, 8), 990.0f / 127.0f, 1e-4f);
}

TEST(Quant, PercentileRangeChecked) {
  const std::vector<float> v{1.0f, 2.0f};
  EXPECT_THROW(percentile_value(v, 0.0), Error);
  EXPECT_THROW(percentile_value(v, 100.5), Error);
  EXPECT_THROW(percentile_value(v, -1.0), Error);
}

TEST(Quant, PercentileBelowAbsmaxWithOutlier) {
  std::vector<float> v(100000, 1.0f);
  v[17] = 1000.0f;
  EXPECT_EQ(percentile_value(v, 99.9), 1.0f);
  EXPECT_EQ(percentile_value(v, 100.0), 1000.0f);
}

TEST(Quant, Log2Codes) {
  const Log2Tensor t = quantize_log2(row({5.0f, 6.0f, -3.0f, 0.0f, 0.3f, 1.0f}));
  const Matrix d = t.decode();
  EXPECT_EQ(d(0, 0), 4.0f);
  EXPECT_EQ(d(0, 1), 8.0f);  // exact midpoint goes up
  EXPECT_EQ(d(0, 2), -4.0f);
  EXPECT_EQ(d(0, 3), 0.0f);
  EXPECT_EQ(d(0, 4), 0.25f);
  EXPECT_EQ(d(0, 5), 1.0f);
}

TEST(Quant, Log2NearestPowerProperty) {
  std::mt19937_64 eng(7);
  std::uniform_real_distribution<float> dist(-100.0f, 100.0f);
  std::vector<float> v(2000);
  for (auto& x : v) x = dist(eng);
  const Matrix d = quantize_log2(Matrix(1, v.size(), v)).decode();
  for (std::size_t i = 0; i < v.size(); ++i) {
    const float a = std::fabs(v[i]), c = std::fabs(d(0, i));
    ASSERT_GT(c, 0.0f);
    EXPECT_EQ(std::signbit(v[i]), std::signbit(d(0, i)));
    // No other power of two is strictly closer.
    EXPECT_LE(std::fabs(a - c), std::fabs(a - 2.0f * c) + 1e-6f);
    EXPECT_LE(std::fabs(a - c), std::fabs(a - 0.5f * c) + 1e-6f);
  }
}

TEST(Quant, AsymmetricUniformRange) {
  std::vector<float> v(1001);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i) / 100.0f;
  const QTensor q = quantize_asymmetric_percentile(Matrix(1, v.size(), v), 100.0, 8);
  EXPECT_EQ(q.zero_point, -128);
  EXPECT_NEAR(q.scale, 10.0f / 255.0f, 1e-6f);
  EXPECT_EQ(q.values.front(), -128);
  EXPECT_EQ(q.values.back(), 127);
  const Matrix d = dequantize(q);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_LE(std::fabs(d(0, i) - v[i]), q.scale / 2 + 1e-6f);
}

TEST(Quant, AsymmetricDegenerateRange) {
  EXPECT_THROW(quantize_asymmetric_percentile(row({1.0f, 1.0f, 1.0f}), 99.0, 8), Error);
}

TEST(Quant, RoundTripErrorWithinHalfStep) {
  std::mt19937_64 eng(3);
  for (int bits : {4, 8, 12}) {
    const float s = 0.037f;
    const float lim = s * static_cast<float>(qmax(bits));
    std::uniform_real_distribution<float> dist(-lim, lim);
    std::vector<float> v(5000);
    for (auto& x : v) x = dist(eng);
    const Matrix d = fake_quantize(Matrix(1, v.size(), v), s, bits);
    for (std::size_t i = 0; i < v.size(); ++i) {
      EXPECT_LE(std::fabs(d(0, i) - v[i]), s / 2 * (1 + 1e-5f)) << "bits=" << bits;
    }
  }
}

TEST(Quant, QTensorValidate) {
  QTensor q = quantize(row({1.0f, -1.0f}), 0.01f, 8);
  EXPECT_NO_THROW(q.validate());
  q.values[0] = 200;
  EXPECT_THROW(q.validate(), Error);
}
