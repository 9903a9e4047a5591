#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "kurtail/error.hpp"
#include "kurtail/linalg.hpp"
#include "oracles.hpp"

using namespace kurtail;
using namespace kurtail::linalg;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  const Matrix a = oracle::random_matrix(3, 5, 1);
  EXPECT_EQ(matmul(Matrix::identity(3), a), a);
  const Matrix b = Matrix::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(matmul(b, Matrix::identity(2)), b);
}

TEST(Matmul, MatchesTripleLoop) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Matrix a = oracle::random_matrix(8, 8, 10 + s), b = oracle::random_matrix(8, 8, 20 + s);
    EXPECT_LE(oracle::max_abs_diff(matmul(a, b), oracle::naive_matmul(a, b)), 1e-12);
  }
  const Matrix a = oracle::random_matrix(7, 5, 3), b = oracle::random_matrix(7, 4, 4), c = oracle::random_matrix(6, 5, 5);
  EXPECT_LE(oracle::max_abs_diff(matmul_tn(a, b), oracle::naive_matmul(oracle::naive_transpose(a), b)), 1e-12);
  EXPECT_LE(oracle::max_abs_diff(matmul_nt(a, c), oracle::naive_matmul(a, oracle::naive_transpose(c))), 1e-12);
}

TEST(Matmul, RejectsMismatchedShapes) {
  EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), DimensionError);
  EXPECT_THROW(Matrix(2, 2, std::vector<double>(3)), DimensionError);
}

TEST(Matmul, IsBitDeterministic) {
  const Matrix a = oracle::random_matrix(33, 17, 7), b = oracle::random_matrix(17, 9, 8);
  EXPECT_EQ(matmul(a, b), matmul(a, b));
}

TEST(Solve, AgreesWithEigen) {
  const Matrix a = oracle::random_matrix(12, 12, 31), b = oracle::random_matrix(12, 3, 32);
  const Matrix x = solve(a, b);
  Eigen::MatrixXd ea(12, 12), eb(12, 3);
  for (int i = 0; i < 12; ++i) {
    for (int j = 0; j < 12; ++j) ea(i, j) = a(i, j);
    for (int j = 0; j < 3; ++j) eb(i, j) = b(i, j);
  }
  const Eigen::MatrixXd ex = ea.partialPivLu().solve(eb);
  for (int i = 0; i < 12; ++i)
    for (int j = 0; j < 3; ++j) EXPECT_NEAR(x(i, j), ex(i, j), 1e-10);
  EXPECT_NEAR(determinant(a), ea.determinant(), 1e-9 * std::abs(ea.determinant()));
  EXPECT_THROW(solve(Matrix(3, 3), Matrix(3, 1)), NumericalError);
}

TEST(Cholesky, FactorsAndInverts) {
  const Matrix x = oracle::random_matrix(40, 10, 41);
  Matrix h = matmul_tn(x, x);
  const Matrix l = cholesky(h);
  EXPECT_LE(max_abs_diff(matmul_nt(l, l), h), 1e-10);
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t j = i + 1; j < 10; ++j) EXPECT_EQ(l(i, j), 0.0);
  EXPECT_LE(max_abs_diff(matmul(spd_inverse(h), h), Matrix::identity(10)), 1e-10);
  EXPECT_THROW(cholesky(Matrix::from_rows({{1, 2}, {2, 1}})), NumericalError);
}

TEST(QrOrthogonalize, IdentityAndIdempotence) {
  EXPECT_EQ(qr_orthogonalize(Matrix::identity(5)).matrix(), Matrix::identity(5));
  const OrthogonalMatrix q = random_orthogonal(16, 3);
  EXPECT_LE(max_abs_diff(qr_orthogonalize(q.matrix()).matrix(), q.matrix()), 1e-10);
}

TEST(QrOrthogonalize, RandomInputIsOrthogonalWithPositiveDiagonal) {
  const Matrix a = oracle::random_matrix(16, 16, 5);
  const OrthogonalMatrix q = qr_orthogonalize(a);
  EXPECT_LE(q.orthogonality_error(), 1e-12);
  const Matrix r = matmul_tn(q.matrix(), a);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_GT(r(i, i), 0.0);
    for (std::size_t j = 0; j < i; ++j) EXPECT_NEAR(r(i, j), 0.0, 1e-10);
  }
}

TEST(QrOrthogonalize, RejectsRankDeficientInput) {
  Matrix a = oracle::random_matrix(6, 6, 9);
  for (std::size_t i = 0; i < 6; ++i) a(i, 5) = 2.0 * a(i, 0);
  EXPECT_THROW(qr_orthogonalize(a), NumericalError);
  EXPECT_THROW(qr_orthogonalize(Matrix(3, 4)), DimensionError);
}

TEST(RandomOrthogonal, DeterministicAndOrthogonal) {
  const auto one = random_orthogonal(1, 4).matrix()(0, 0);
  EXPECT_EQ(std::abs(one), 1.0);
  EXPECT_EQ(random_orthogonal(1, 4).matrix()(0, 0), one);
  EXPECT_EQ(random_orthogonal(64, 11), random_orthogonal(64, 11));
  EXPECT_NE(random_orthogonal(64, 11), random_orthogonal(64, 12));
  for (std::uint64_t s = 0; s < 5; ++s) EXPECT_LE(random_orthogonal(64, s).orthogonality_error(), 1e-12);
  EXPECT_THROW(random_orthogonal(0, 1), InvalidArgument);
}

TEST(OrthogonalMatrix, CertifyRejectsNonOrthogonal) {
  Matrix m = Matrix::identity(4);
  m(0, 1) = 1e-3;
  EXPECT_THROW(OrthogonalMatrix::certify(m), NumericalError);
  EXPECT_NO_THROW(OrthogonalMatrix::certify(m, 1e-2));
  const OrthogonalMatrix q = random_orthogonal(8, 1);
  EXPECT_LE(max_abs_diff((q * q.inverse()).matrix(), Matrix::identity(8)), 1e-12);
}

TEST(OrthogonalMatrix, PreservesRowNorms) {
  const Matrix x = oracle::random_matrix(20, 32, 2, 10.0);
  const Matrix y = matmul(x, random_orthogonal(32, 3).matrix());
  for (std::size_t i = 0; i < 20; ++i) {
    double a = 0, b = 0;
    for (std::size_t j = 0; j < 32; ++j) {
      a += x(i, j) * x(i, j);
      b += y(i, j) * y(i, j);
    }
    EXPECT_NEAR(std::sqrt(b) / std::sqrt(a), 1.0, 1e-8);
  }
}

TEST(Hadamard, SmallCases) {
  EXPECT_EQ(hadamard_matrix(1).matrix(), Matrix::identity(1));
  const double s = 1.0 / std::sqrt(2.0);
  EXPECT_LE(max_abs_diff(hadamard_matrix(2).matrix(), Matrix::from_rows({{s, s}, {s, -s}})), 1e-15);
  EXPECT_LE(hadamard_matrix(8).orthogonality_error(), 1e-12);
  EXPECT_LE(max_abs_diff(hadamard_matrix(64).matrix(), oracle::walsh(64)), 1e-15);
  EXPECT_THROW(hadamard_matrix(12), InvalidArgument);
  EXPECT_THROW(randomized_hadamard(6, 1), InvalidArgument);
}

TEST(Hadamard, RandomizedIsDiagTimesH) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto signs = hadamard_signs(2, seed);
    if (signs[0] == 1.0 && signs[1] == -1.0) {
      const double s = 1.0 / std::sqrt(2.0);
      EXPECT_LE(max_abs_diff(randomized_hadamard(2, seed).matrix(), Matrix::from_rows({{s, s}, {-s, s}})), 1e-15);
      break;
    }
  }
  const auto signs = hadamard_signs(32, 7);
  EXPECT_EQ(signs, hadamard_signs(32, 7));
  const Matrix expected = matmul(Matrix::diagonal(signs), hadamard_matrix(32).matrix());
  EXPECT_EQ(randomized_hadamard(32, 7).matrix(), expected);
  EXPECT_LE(randomized_hadamard(32, 7).orthogonality_error(), 1e-12);
}

TEST(FastHadamard, ImpulseAndInvolution) {
  const std::vector<double> e0 = {1, 0, 0, 0};
  for (double v : fast_hadamard_transform(e0)) EXPECT_DOUBLE_EQ(v, 0.5);
  kurtail::Rng rng(3);
  std::vector<double> x(128);
  for (double& v : x) v = rng.normal();
  const auto twice = fast_hadamard_transform(fast_hadamard_transform(x));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(twice[i], x[i], 1e-12);
  const auto raw = fast_hadamard_transform(x, false);
  const auto norm = fast_hadamard_transform(x, true);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(raw[i] / std::sqrt(128.0), norm[i], 1e-12);
  EXPECT_THROW(fast_hadamard_transform(std::vector<double>(6)), InvalidArgument);
}

TEST(FastHadamard, MatchesDenseMultiply) {
  kurtail::Rng rng(17);
  for (std::size_t n = 1; n <= 4096; n *= 2) {
    std::vector<double> x(n);
    for (double& v : x) v = rng.normal();
    const Matrix h = oracle::walsh(n);
    const auto fast = fast_hadamard_transform(x);
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += h(i, j) * x[j];
      err = std::max(err, std::abs(s - fast[i]));
    }
    EXPECT_LE(err, 1e-10) << "n = " << n;
  }
}

TEST(BlockDiagonal, RepeatsBlock) {
  const OrthogonalMatrix b = random_orthogonal(4, 2);
  const OrthogonalMatrix bd = block_diagonal(b, 3);
  ASSERT_EQ(bd.dim(), 12u);
  for (std::size_t i = 0; i < 12; ++i)
    for (std::size_t j = 0; j < 12; ++j)
      EXPECT_EQ(bd.matrix()(i, j), i / 4 == j / 4 ? b.matrix()(i % 4, j % 4) : 0.0);
}

TEST(Vstack, ConcatenatesRows) {
  const std::vector<Matrix> parts = {oracle::random_matrix(2, 3, 1), oracle::random_matrix(4, 3, 2)};
  const Matrix s = vstack(parts);
  EXPECT_EQ(s.row_block(0, 2), parts[0]);
  EXPECT_EQ(s.row_block(2, 4), parts[1]);
  const std::vector<Matrix> bad = {Matrix(1, 2), Matrix(1, 3)};
  EXPECT_THROW(vstack(bad), DimensionError);
}

TEST(Determinant, LargeOrthogonalDoesNotUnderflow) {
  const Matrix h = oracle::walsh(1024);
  EXPECT_NEAR(std::abs(determinant(h)), 1.0, 1e-8);
}
