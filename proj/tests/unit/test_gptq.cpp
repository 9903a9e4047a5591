#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <numeric>

#include "kurtail/error.hpp"
#include "kurtail/gptq.hpp"
#include "oracles.hpp"

using namespace kurtail;
using namespace kurtail::gptq;
using linalg::Matrix;

namespace {

// Tokens with correlated input dims: x = z·M for a random mixing M.
Matrix correlated_inputs(std::size_t n, std::size_t d, std::uint64_t seed) {
  return linalg::matmul(oracle::random_matrix(n, d, seed), oracle::random_matrix(d, d, seed + 1));
}

HessianEstimate identity_hessian(std::size_t d) { return {Matrix::identity(d), 0, 0.0}; }

Matrix permute_rows(const Matrix& m, const std::vector<std::size_t>& p) {
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < p.size(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(i, j) = m(p[i], j);
  return out;
}

}  // namespace

TEST(CollectHessian, IdentityInputs) {
  const HessianEstimate h = collect_hessian(Matrix::identity(6), 0.0);
  EXPECT_LE(linalg::max_abs_diff(h.h, Matrix::identity(6) * (2.0 / 6.0)), 1e-15);
  const HessianEstimate d = collect_hessian(Matrix::identity(6), 0.01);
  EXPECT_NEAR(d.damping, 0.01 * 2.0 / 6.0, 1e-15);
}

TEST(CollectHessian, SymmetricPsd) {
  const Matrix x = correlated_inputs(50, 12, 3);
  const HessianEstimate h = collect_hessian(x, 0.0);
  Eigen::MatrixXd e(12, 12);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 12; ++j) {
      EXPECT_EQ(h.h(i, j), h.h(j, i));
      e(i, j) = h.h(i, j);
    }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(e);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10 * es.eigenvalues().maxCoeff());
  EXPECT_EQ(h.sample_count, 50u);
}

TEST(CollectHessian, NormalizedBySampleCount) {
  const Matrix x = oracle::random_matrix(10, 5, 4);
  const std::vector<Matrix> twice = {x, x};
  EXPECT_LE(linalg::max_abs_diff(collect_hessian(x).h, collect_hessian(twice).h), 1e-14);
  EXPECT_THROW(collect_hessian(std::vector<Matrix>{}), InvalidArgument);
}

TEST(Gptq, IdentityHessianEqualsRtn) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Matrix w = oracle::random_matrix(16 + s, 8, s);
    const auto q = gptq_quantize(w, identity_hessian(w.rows()), 4);
    const auto r = quant::rtn_quantize_weights(w, 4);
    EXPECT_EQ(q.codes, r.codes);
    EXPECT_EQ(q.scale, r.scale);
    EXPECT_EQ(quant::dequantize(q), quant::dequantize(r));
  }
}

TEST(Gptq, SingleInputDimEqualsRtn) {
  const Matrix w = oracle::random_matrix(1, 9, 5);
  const auto h = collect_hessian(oracle::random_matrix(20, 1, 6));
  EXPECT_EQ(gptq_quantize(w, h, 4).codes, quant::rtn_quantize_weights(w, 4).codes);
}

TEST(Gptq, CodesInSymmetricRange) {
  const Matrix w = oracle::random_matrix(16, 16, 7);
  for (int bits : {2, 3, 4}) {
    const auto q = gptq_quantize(w, collect_hessian(correlated_inputs(64, 16, 8)), bits);
    const int qmax = (1 << (bits - 1)) - 1;
    for (auto c : q.codes) EXPECT_TRUE(c >= -qmax && c <= qmax);
  }
}

TEST(Gptq, ProxyLossDominatesRtn) {
  for (std::size_t d : {8u, 16u, 32u}) {
    int wins = 0;
    for (std::uint64_t s = 0; s < 30; ++s) {
      const Matrix w = oracle::random_matrix(d, 12, 100 * d + s);
      const auto h = collect_hessian(correlated_inputs(4 * d, d, 7000 + 100 * d + s));
      const double lg = proxy_loss(w, quant::dequantize(gptq_quantize(w, h, 4)), h.h);
      const double lr = proxy_loss(w, quant::dequantize(quant::rtn_quantize_weights(w, 4)), h.h);
      wins += lg <= lr;
    }
    EXPECT_GE(wins, 29) << "d = " << d;
  }
}

TEST(Gptq, OutputColumnsAreIndependent) {
  const Matrix w = oracle::random_matrix(16, 6, 9);
  const auto h = collect_hessian(correlated_inputs(64, 16, 10));
  const auto full = gptq_quantize(w, h, 4);
  const auto part = gptq_quantize(w.col_block(2, 3), h, 4);
  const Matrix dq = quant::dequantize(full), dp = quant::dequantize(part);
  EXPECT_EQ(dq.col_block(2, 3), dp);
}

TEST(Gptq, ActOrderIsPermutationEquivariant) {
  const std::size_t d = 12;
  const Matrix w = oracle::random_matrix(d, 5, 11);
  const auto h = collect_hessian(correlated_inputs(60, d, 12));
  std::vector<std::size_t> p(d);
  std::iota(p.begin(), p.end(), 0);
  kurtail::Rng rng(13);
  const auto order = rng.sample_without_replacement(d, d);
  p.assign(order.begin(), order.end());
  HessianEstimate hp = h;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) hp.h(i, j) = h.h(p[i], p[j]);
  GptqOptions opts;
  opts.act_order = true;
  const Matrix a = quant::dequantize(gptq_quantize(w, h, 4, opts));
  const Matrix b = quant::dequantize(gptq_quantize(permute_rows(w, p), hp, 4, opts));
  EXPECT_LE(linalg::max_abs_diff(permute_rows(a, p), b), 1e-12);
}

TEST(Gptq, RejectsMismatchedHessian) {
  EXPECT_THROW(gptq_quantize(Matrix(4, 2), identity_hessian(5), 4), DimensionError);
  EXPECT_THROW(proxy_loss(Matrix(2, 2), Matrix(2, 3), Matrix::identity(2)), DimensionError);
}

TEST(ProxyLoss, MatchesTraceFormula) {
  const Matrix w = oracle::random_matrix(6, 4, 14), wh = oracle::random_matrix(6, 4, 15);
  const Matrix h = collect_hessian(oracle::random_matrix(20, 6, 16)).h;
  const Matrix d = w - wh;
  const Matrix m = oracle::naive_matmul(oracle::naive_transpose(d), oracle::naive_matmul(h, d));
  double tr = 0.0;
  for (std::size_t i = 0; i < 4; ++i) tr += m(i, i);
  EXPECT_NEAR(proxy_loss(w, wh, h), tr, 1e-12 * std::abs(tr));
}
