#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace kurtail::linalg {

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static Matrix identity(std::size_t n);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix diagonal(std::span<const double> diag);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool is_square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  Matrix transposed() const;
  // Rows [begin, begin + count).
  Matrix row_block(std::size_t begin, std::size_t count) const;
  // Columns [begin, begin + count).
  Matrix col_block(std::size_t begin, std::size_t count) const;
  void set_col_block(std::size_t begin, const Matrix& block);

  bool all_finite() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);

// a * b with a fixed i-k-j loop order; every output entry accumulates its
// products in increasing k.
Matrix matmul(const Matrix& a, const Matrix& b);
// aᵀ * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// a * bᵀ without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

// Stacks matrices with equal column counts vertically.
Matrix vstack(std::span<const Matrix> parts);

double max_abs(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);
double frobenius_norm(const Matrix& a);
double frobenius_dot(const Matrix& a, const Matrix& b);
// max |aᵀa − I|
double orthogonality_error(const Matrix& a);
double determinant(const Matrix& a);

// Solves a x = b by LU with partial pivoting. Throws NumericalError when a
// is singular to working precision.
Matrix solve(const Matrix& a, const Matrix& b);
// Inverse of a symmetric positive definite matrix through its Cholesky factor.
Matrix spd_inverse(const Matrix& a);
// Lower-triangular L with a = L Lᵀ; throws NumericalError if a is not PD.
Matrix cholesky(const Matrix& a);

struct QrResult {
  Matrix q;
  Matrix r;
};
// Householder QR of a square matrix, signs fixed so diag(R) ≥ 0.
QrResult householder_qr(const Matrix& a);

// Square matrix certified orthonormal within a tolerance.
class OrthogonalMatrix {
 public:
  static constexpr double kDefaultTolerance = 1e-6;

  // Throws NumericalError unless ‖QᵀQ − I‖∞ ≤ tolerance and ||det| − 1| ≤ 1e-4.
  static OrthogonalMatrix certify(Matrix q, double tolerance = kDefaultTolerance);
  static OrthogonalMatrix identity(std::size_t n);

  const Matrix& matrix() const noexcept { return q_; }
  std::size_t dim() const noexcept { return q_.rows(); }
  double tolerance() const noexcept { return tolerance_; }
  double orthogonality_error() const { return linalg::orthogonality_error(q_); }

  OrthogonalMatrix inverse() const;
  OrthogonalMatrix operator*(const OrthogonalMatrix& other) const;

  friend bool operator==(const OrthogonalMatrix& a, const OrthogonalMatrix& b) {
    return a.q_ == b.q_;
  }

 private:
  OrthogonalMatrix(Matrix q, double tolerance) : q_(std::move(q)), tolerance_(tolerance) {}

  Matrix q_;
  double tolerance_ = kDefaultTolerance;
};

// Q factor of a full-rank square matrix (diag(R) > 0 sign convention).
OrthogonalMatrix qr_orthogonalize(const Matrix& a);
OrthogonalMatrix random_orthogonal(std::size_t n, std::uint64_t seed);

bool is_power_of_two(std::size_t n);
// Sylvester Hadamard matrix scaled by 1/√n.
OrthogonalMatrix hadamard_matrix(std::size_t n);
// D·H with D a seeded random ±1 diagonal.
OrthogonalMatrix randomized_hadamard(std::size_t n, std::uint64_t seed);
// Sign pattern used by randomized_hadamard(n, seed).
std::vector<double> hadamard_signs(std::size_t n, std::uint64_t seed);

// Walsh-Hadamard butterfly, O(n log n). With `normalized` the result equals
// hadamard_matrix(n) · x; without it the 1/√n factor is omitted.
std::vector<double> fast_hadamard_transform(std::span<const double> x, bool normalized = true);
void fast_hadamard_transform_inplace(std::span<double> x, bool normalized = true);

// Block-diagonal matrix with `copies` repetitions of `block`.
OrthogonalMatrix block_diagonal(const OrthogonalMatrix& block, std::size_t copies);

}  // namespace kurtail::linalg
