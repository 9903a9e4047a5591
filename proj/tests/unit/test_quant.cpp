#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "kurtail/error.hpp"
#include "kurtail/quant.hpp"
#include "kurtail/random.hpp"
#include "oracles.hpp"

using namespace kurtail;
using namespace kurtail::quant;
using linalg::Matrix;

namespace {

QuantSpec spec(int bits, Scheme s, Granularity g, double clip = 1.0) {
  QuantSpec q;
  q.bits = bits;
  q.scheme = s;
  q.granularity = g;
  q.clip_quantile = clip;
  return q;
}

std::vector<double> uniform_sample(std::size_t n, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> x(n);
  for (double& v : x) v = rng.uniform(lo, hi);
  return x;
}

std::vector<double> normal_sample(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(n);
  for (double& v : x) v = rng.normal();
  return x;
}

Matrix row(const std::vector<double>& v) { return Matrix(1, v.size(), v); }

}  // namespace

TEST(Quantize, SymmetricGridRoundTrip) {
  std::vector<double> v;
  for (int i = -7; i <= 7; ++i) v.push_back(0.1 * i);
  const Matrix x = row(v);
  const QuantizedTensor q = quantize(x, spec(4, Scheme::symmetric, Granularity::per_tensor));
  EXPECT_LE(linalg::max_abs_diff(dequantize(q), x), 1e-15);
  EXPECT_EQ(q.codes.front(), -7);
  EXPECT_EQ(q.codes.back(), 7);
  EXPECT_EQ(q.shift[0], 0.0);
}

TEST(Quantize, AsymmetricGridRoundTrip) {
  std::vector<double> v;
  for (int i = 0; i < 16; ++i) v.push_back(i);
  const QuantizedTensor q = quantize(row(v), spec(4, Scheme::asymmetric, Granularity::per_tensor));
  EXPECT_EQ(q.shift[0], 0.0);
  EXPECT_EQ(q.scale[0], 1.0);
  EXPECT_EQ(dequantize(q), row(v));
}

TEST(Quantize, CodesStayInRange) {
  const Matrix x = oracle::random_matrix(20, 30, 4, 3.0);
  for (int bits : {2, 3, 4, 8}) {
    for (double clip : {1.0, 0.9}) {
      const auto s = quantize(x, spec(bits, Scheme::symmetric, Granularity::per_token, clip));
      const auto a = quantize(x, spec(bits, Scheme::asymmetric, Granularity::per_channel, clip));
      const int smax = (1 << (bits - 1)) - 1, amax = (1 << bits) - 1;
      for (auto c : s.codes) EXPECT_TRUE(c >= -smax && c <= smax);
      for (auto c : a.codes) EXPECT_TRUE(c >= 0 && c <= amax);
    }
  }
}

TEST(Quantize, ErrorBoundedByHalfStep) {
  const Matrix x = oracle::random_matrix(16, 24, 5);
  for (auto g : {Granularity::per_token, Granularity::per_channel, Granularity::per_tensor}) {
    for (auto s : {Scheme::symmetric, Scheme::asymmetric}) {
      const QuantizedTensor q = quantize(x, spec(4, s, g));
      const Matrix y = dequantize(q);
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c)
          EXPECT_LE(std::abs(x(r, c) - y(r, c)), 0.5 * q.scale[q.group_of(r, c)] * (1 + 1e-12));
    }
  }
}

TEST(Quantize, ZeroCodesDequantizeToZero) {
  QuantizedTensor q;
  q.rows = 2;
  q.cols = 3;
  q.codes.assign(6, 0);
  q.scale = {0.5, 2.0};
  q.shift = {0.0, 0.0};
  q.spec = spec(4, Scheme::symmetric, Granularity::per_token);
  EXPECT_EQ(dequantize(q), Matrix(2, 3));
}

TEST(Quantize, DegenerateGroups) {
  const Matrix x = Matrix::from_rows({{0.0, 0.0, 0.0}, {2.5, 2.5, 2.5}});
  const auto s = quantize(x, spec(4, Scheme::symmetric, Granularity::per_token));
  EXPECT_EQ(s.scale[0], 1.0);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(s.codes[i], 0);
  EXPECT_EQ(dequantize(quantize(x, spec(4, Scheme::asymmetric, Granularity::per_token))), x);
}

TEST(Quantize, RejectsBadInput) {
  Matrix x(2, 2, 1.0);
  EXPECT_THROW(quantize(x, spec(1, Scheme::symmetric, Granularity::per_token)), InvalidArgument);
  EXPECT_THROW(quantize(x, spec(4, Scheme::symmetric, Granularity::per_token, 0.0)), InvalidArgument);
  x(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(quantize(x, spec(4, Scheme::symmetric, Granularity::per_token)), NumericalError);
}

TEST(Quantize, SymmetricIsOdd) {
  const Matrix x = oracle::random_matrix(10, 16, 6);
  const auto s = spec(4, Scheme::symmetric, Granularity::per_token);
  EXPECT_LE(linalg::max_abs_diff(fake_quantize(x * -1.0, s), fake_quantize(x, s) * -1.0), 0.0);
}

TEST(Quantize, PerTokenEqualsIndependentRows) {
  const Matrix x = oracle::random_matrix(9, 32, 7, 2.0);
  for (double clip : {1.0, 0.98}) {
    for (auto sch : {Scheme::symmetric, Scheme::asymmetric}) {
      const Matrix all = fake_quantize(x, spec(4, sch, Granularity::per_token, clip));
      for (std::size_t r = 0; r < x.rows(); ++r) {
        const Matrix one = fake_quantize(x.row_block(r, 1), spec(4, sch, Granularity::per_tensor, clip));
        EXPECT_EQ(one, all.row_block(r, 1));
      }
    }
  }
}

TEST(Quantize, ClipQuantileUsesInterpolatedAbsQuantile) {
  std::vector<double> v = {-10.0, 1.0, -2.0, 3.0, 0.5};
  const auto q = quantize(row(v), spec(4, Scheme::symmetric, Granularity::per_tensor, 0.75));
  // |x| sorted: 0.5 1 2 3 10, position 0.75·4 = 3 → 3.0
  EXPECT_DOUBLE_EQ(q.scale[0], 3.0 / 7.0);
  EXPECT_EQ(q.codes[0], -7);
  EXPECT_DOUBLE_EQ(empirical_quantile(std::vector<double>{1, 2, 3, 4}, 0.5), 2.5);
}

TEST(Quantize, FactorySpecs) {
  EXPECT_EQ(QuantSpec::activation().clip_quantile, 0.98);
  EXPECT_EQ(QuantSpec::activation().granularity, Granularity::per_token);
  EXPECT_EQ(QuantSpec::kv_cache().scheme, Scheme::asymmetric);
  EXPECT_EQ(QuantSpec::kv_cache().clip_quantile, 1.0);
  EXPECT_EQ(QuantSpec::weight().granularity, Granularity::per_channel);
}

TEST(QuantMse, GridAlignedIsZero) {
  std::vector<double> v;
  for (int i = -7; i <= 7; ++i) v.push_back(0.25 * i);
  EXPECT_EQ(quant_mse(row(v), spec(4, Scheme::symmetric, Granularity::per_tensor)), 0.0);
}

TEST(QuantMse, UniformMatchesStepSquaredOverTwelve) {
  const auto x = uniform_sample(1000000, 42);
  const Matrix m = row(x);
  // Symmetric: s = max|x| / 7 = 1/7. Asymmetric: s = (max − min) / 15 = 1/7.5.
  const double sym = quant_mse(m, spec(4, Scheme::symmetric, Granularity::per_tensor));
  const double asym = quant_mse(m, spec(4, Scheme::asymmetric, Granularity::per_tensor));
  EXPECT_NEAR(sym / (1.0 / 49.0 / 12.0), 1.0, 0.05);
  EXPECT_NEAR(asym / (1.0 / 56.25 / 12.0), 1.0, 0.05);
  // Monte-Carlo oracle at the realized max-based step.
  double mx = 0.0;
  for (double v : x) mx = std::max(mx, std::abs(v));
  EXPECT_NEAR(sym, oracle::symmetric_mse(x, 4, mx / 7.0), 1e-12);
}

TEST(QuantMse, MoreBitsLowerError) {
  const Matrix m = row(uniform_sample(20000, 3));
  double prev = std::numeric_limits<double>::infinity();
  for (int bits : {2, 4, 8}) {
    const double e = quant_mse(m, spec(bits, Scheme::symmetric, Granularity::per_tensor));
    EXPECT_LT(e, prev);
    prev = e;
  }
}

TEST(QuantMse, StepOverride) {
  const auto x = normal_sample(5000, 8);
  const Matrix m = row(x);
  EXPECT_NEAR(quant_mse(m, spec(4, Scheme::symmetric, Granularity::per_tensor), 0.3), oracle::symmetric_mse(x, 4, 0.3),
              1e-14);
  EXPECT_NEAR(symmetric_mse(x, 4, 0.3), oracle::symmetric_mse(x, 4, 0.3), 1e-14);
  EXPECT_THROW(quant_mse(m, spec(4, Scheme::symmetric, Granularity::per_tensor), 0.0), InvalidArgument);
}

TEST(OptimalStep, UniformGridGivesGridStep) {
  std::vector<double> x;
  for (int rep = 0; rep < 50; ++rep)
    for (int i = -7; i <= 7; ++i) x.push_back(0.2 * i);
  EXPECT_NEAR(optimal_step_size(x, 4) / 0.2, 1.0, 1e-3);
}

TEST(OptimalStep, GaussianAgreesWithBruteForceGrid) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const auto x = normal_sample(20000, 100 + seed);
    double mx = 0.0;
    for (double v : x) mx = std::max(mx, std::abs(v));
    const double naive = mx / 7.0;
    const double s = optimal_step_size(x, 4);
    EXPECT_LT(s, naive);
    double best = 0.0, best_mse = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 10000; ++i) {
      const double c = naive * (0.1 + 1.4 * i / 9999.0);
      const double e = oracle::symmetric_mse(x, 4, c);
      if (e < best_mse) best_mse = e, best = c;
    }
    EXPECT_NEAR(s / best, 1.0, 1e-3);
    EXPECT_LE(symmetric_mse(x, 4, s), best_mse * (1 + 1e-6));
    EXPECT_LE(symmetric_mse(x, 4, s), symmetric_mse(x, 4, naive));
  }
}

TEST(OptimalStep, ScaleEquivariant) {
  const auto x = normal_sample(10000, 5);
  std::vector<double> y(x);
  for (double& v : y) v *= 3.7;
  EXPECT_NEAR(optimal_step_size(y, 4) / optimal_step_size(x, 4), 3.7, 3.7e-3);
  EXPECT_THROW(optimal_step_size(std::vector<double>(10, 1.0), 4), InvalidArgument);
}

TEST(Sensitivity, MatchesRecomputation) {
  const auto x = normal_sample(20000, 9);
  const std::vector<double> alphas = {0.7, 0.8, 1.0, 1.2};
  const auto rep = sensitivity(x, 4, alphas);
  ASSERT_EQ(rep.gamma.size(), alphas.size());
  EXPECT_EQ(rep.gamma[2], 0.0);
  const double base = oracle::symmetric_mse(x, 4, rep.optimal_step);
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    EXPECT_GE(rep.gamma[i], 0.0);
    EXPECT_NEAR(rep.gamma[i], std::abs(oracle::symmetric_mse(x, 4, alphas[i] * rep.optimal_step) - base), 1e-12);
  }
  EXPECT_THROW(sensitivity(x, 4, std::vector<double>{0.8, 1.2}), InvalidArgument);
  EXPECT_THROW(sensitivity(std::vector<double>(8, 2.0), 4, alphas), InvalidArgument);
}

TEST(Sensitivity, UniformBelowNormal) {
  const std::vector<double> alphas = {0.8, 1.0};
  const auto u = sensitivity(uniform_sample(100000, 1), 4, alphas);
  const auto n = sensitivity(normal_sample(100000, 2), 4, alphas);
  EXPECT_LT(u.gamma[0], n.gamma[0]);
}

TEST(Rtn, EqualsPerChannelSymmetric) {
  const Matrix w = oracle::random_matrix(32, 32, 12);
  const QuantizedTensor r = rtn_quantize_weights(w, 4);
  const QuantizedTensor q = quantize(w, spec(4, Scheme::symmetric, Granularity::per_channel));
  EXPECT_EQ(r.codes, q.codes);
  EXPECT_EQ(r.scale, q.scale);
  const Matrix d = dequantize(r);
  for (std::size_t c = 0; c < 32; ++c) {
    double err = 0.0;
    for (std::size_t i = 0; i < 32; ++i) err = std::max(err, std::abs(w(i, c) - d(i, c)));
    EXPECT_LE(err, 0.5 * r.scale[c] * (1 + 1e-12));
  }
}

TEST(Rtn, GridColumnIsExact) {
  Matrix w(15, 1);
  for (int i = 0; i < 15; ++i) w(i, 0) = 0.5 * (i - 7);
  EXPECT_EQ(dequantize(rtn_quantize_weights(w, 4)), w);
}
