#include "kurtail/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kurtail/error.hpp"
#include "kurtail/random.hpp"

namespace kurtail::linalg {

namespace {

std::string shape(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape(a) + " vs " + shape(b));
  }
}

struct LuFactors {
  Matrix lu;
  std::vector<std::size_t> perm;
  int sign = 1;
  bool singular = false;
};

LuFactors lu_decompose(const Matrix& a) {
  if (!a.is_square()) throw DimensionError("LU of non-square matrix " + shape(a));
  const std::size_t n = a.rows();
  LuFactors f{a, std::vector<std::size_t>(n), 1, false};
  for (std::size_t i = 0; i < n; ++i) f.perm[i] = i;
  Matrix& m = f.lu;
  const double scale = std::max(max_abs(a), 1e-300);
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t pivot = k;
    double best = std::abs(m(k, k));
    for (std::size_t i = k + 1; i < n; ++i) {
      if (std::abs(m(i, k)) > best) {
        best = std::abs(m(i, k));
        pivot = i;
      }
    }
    if (best <= 1e-14 * scale) {
      f.singular = true;
      return f;
    }
    if (pivot != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(m(k, j), m(pivot, j));
      std::swap(f.perm[k], f.perm[pivot]);
      f.sign = -f.sign;
    }
    const double inv = 1.0 / m(k, k);
    for (std::size_t i = k + 1; i < n; ++i) {
      const double factor = m(i, k) * inv;
      m(i, k) = factor;
      if (factor == 0.0) continue;
      for (std::size_t j = k + 1; j < n; ++j) m(i, j) -= factor * m(k, j);
    }
  }
  return f;
}

}  // namespace

// ---------------------------------------------------------------------------
// Matrix

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("Matrix data length " + std::to_string(data_.size()) +
                         " != " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::diagonal(std::span<const double> diag) {
  Matrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

Matrix Matrix::row_block(std::size_t begin, std::size_t count) const {
  if (begin + count > rows_) throw DimensionError("row_block out of range");
  return Matrix(count, cols_,
                std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
                                    data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * cols_)));
}

Matrix Matrix::col_block(std::size_t begin, std::size_t count) const {
  if (begin + count > cols_) throw DimensionError("col_block out of range");
  Matrix out(rows_, count);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = (*this)(i, begin + j);
  return out;
}

void Matrix::set_col_block(std::size_t begin, const Matrix& block) {
  if (block.rows() != rows_ || begin + block.cols() > cols_) {
    throw DimensionError("set_col_block out of range");
  }
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < block.cols(); ++j) (*this)(i, begin + j) = block(i, j);
}

bool Matrix::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix& Matrix::operator+=(const Matrix& other) {
  require_same_shape(*this, other, "operator+=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  require_same_shape(*this, other, "operator-=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }
Matrix operator*(double s, Matrix a) { return a *= s; }

// ---------------------------------------------------------------------------
// Products and norms

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape(a) + " * " + shape(b));
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Matrix c(n, m);
  const double* bp = b.data().data();
  double* cp = c.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = cp + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      const double* brow = bp + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + shape(a) + "ᵀ * " + shape(b));
  }
  const std::size_t n = a.cols(), k = a.rows(), m = b.cols();
  Matrix c(n, m);
  double* cp = c.data().data();
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a.row(p).data();
    const double* brow = b.row(p).data();
    for (std::size_t i = 0; i < n; ++i) {
      const double av = arow[i];
      double* crow = cp + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + shape(a) + " * " + shape(b) + "ᵀ");
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  Matrix c(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a.row(i).data();
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b.row(j).data();
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c(i, j) = s;
    }
  }
  return c;
}

Matrix vstack(std::span<const Matrix> parts) {
  if (parts.empty()) return {};
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("vstack: column mismatch");
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Matrix(rows, cols, std::move(data));
}

double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

double frobenius_norm(const Matrix& a) { return std::sqrt(frobenius_dot(a, a)); }

double frobenius_dot(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "frobenius_dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

double orthogonality_error(const Matrix& a) {
  const Matrix g = matmul_tn(a, a);
  double err = 0.0;
  for (std::size_t i = 0; i < g.rows(); ++i)
    for (std::size_t j = 0; j < g.cols(); ++j)
      err = std::max(err, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
  return err;
}

double determinant(const Matrix& a) {
  const LuFactors f = lu_decompose(a);
  if (f.singular) return 0.0;
  // Mantissa and exponent kept apart so long pivot runs neither under- nor
  // overflow before the product settles.
  double mantissa = f.sign;
  long exponent = 0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    int e = 0;
    mantissa = std::frexp(mantissa * f.lu(i, i), &e);
    exponent += e;
  }
  return std::ldexp(mantissa, static_cast<int>(std::clamp<long>(exponent, -2000, 2000)));
}

// ---------------------------------------------------------------------------
// Factorizations

Matrix solve(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw DimensionError("solve: " + shape(a) + " vs rhs " + shape(b));
  const LuFactors f = lu_decompose(a);
  if (f.singular) throw NumericalError("solve: matrix is singular to working precision");
  const std::size_t n = a.rows(), m = b.cols();
  Matrix x(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) x(i, j) = b(f.perm[i], j);
  // forward: L y = P b (unit diagonal)
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < i; ++p) {
      const double l = f.lu(i, p);
      if (l == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) x(i, j) -= l * x(p, j);
    }
  // backward: U x = y
  for (std::size_t ii = n; ii-- > 0;) {
    for (std::size_t p = ii + 1; p < n; ++p) {
      const double u = f.lu(ii, p);
      if (u == 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) x(ii, j) -= u * x(p, j);
    }
    const double inv = 1.0 / f.lu(ii, ii);
    for (std::size_t j = 0; j < m; ++j) x(ii, j) *= inv;
  }
  return x;
}

Matrix cholesky(const Matrix& a) {
  if (!a.is_square()) throw DimensionError("cholesky of non-square matrix " + shape(a));
  const std::size_t n = a.rows();
  Matrix l(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a(i, j);
      for (std::size_t p = 0; p < j; ++p) s -= l(i, p) * l(j, p);
      if (i == j) {
        if (!(s > 0.0)) {
          throw NumericalError("cholesky: matrix not positive definite at pivot " +
                               std::to_string(i));
        }
        l(i, i) = std::sqrt(s);
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return l;
}

Matrix spd_inverse(const Matrix& a) {
  const Matrix l = cholesky(a);
  const std::size_t n = a.rows();
  // L⁻¹ by forward substitution, then A⁻¹ = L⁻ᵀ L⁻¹.
  Matrix linv(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    linv(j, j) = 1.0 / l(j, j);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = 0.0;
      for (std::size_t p = j; p < i; ++p) s -= l(i, p) * linv(p, j);
      linv(i, j) = s / l(i, i);
    }
  }
  Matrix inv = matmul_tn(linv, linv);
  // exact symmetry
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = 0.5 * (inv(i, j) + inv(j, i));
      inv(i, j) = v;
      inv(j, i) = v;
    }
  return inv;
}

QrResult householder_qr(const Matrix& a) {
  if (!a.is_square()) throw DimensionError("householder_qr expects a square matrix, got " + shape(a));
  const std::size_t n = a.rows();
  Matrix r = a;
  Matrix q = Matrix::identity(n);
  std::vector<double> v(n);
  for (std::size_t k = 0; k + 1 < n; ++k) {
    double norm = 0.0;
    for (std::size_t i = k; i < n; ++i) norm += r(i, k) * r(i, k);
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    const double alpha = r(k, k) > 0 ? -norm : norm;
    for (std::size_t i = 0; i < n; ++i) v[i] = i < k ? 0.0 : r(i, k);
    v[k] -= alpha;
    double vnorm2 = 0.0;
    for (std::size_t i = k; i < n; ++i) vnorm2 += v[i] * v[i];
    if (vnorm2 == 0.0) continue;
    const double beta = 2.0 / vnorm2;
    // R ← (I − β v vᵀ) R
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t i = k; i < n; ++i) s += v[i] * r(i, j);
      s *= beta;
      for (std::size_t i = k; i < n; ++i) r(i, j) -= s * v[i];
    }
    // Q ← Q (I − β v vᵀ)
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t p = k; p < n; ++p) s += q(i, p) * v[p];
      s *= beta;
      for (std::size_t p = k; p < n; ++p) q(i, p) -= s * v[p];
    }
    for (std::size_t i = k + 1; i < n; ++i) r(i, k) = 0.0;
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (r(k, k) < 0.0) {
      for (std::size_t j = 0; j < n; ++j) r(k, j) = -r(k, j);
      for (std::size_t i = 0; i < n; ++i) q(i, k) = -q(i, k);
    }
  }
  return {std::move(q), std::move(r)};
}

// ---------------------------------------------------------------------------
// Orthogonal matrices

OrthogonalMatrix OrthogonalMatrix::certify(Matrix q, double tolerance) {
  if (!q.is_square() || q.empty()) {
    throw DimensionError("OrthogonalMatrix must be square and non-empty, got " + shape(q));
  }
  if (!q.all_finite()) throw NumericalError("OrthogonalMatrix: non-finite entries");
  const double err = linalg::orthogonality_error(q);
  if (err > tolerance) {
    throw NumericalError("OrthogonalMatrix: ‖QᵀQ − I‖∞ = " + std::to_string(err) +
                         " exceeds tolerance " + std::to_string(tolerance));
  }
  const double det = determinant(q);
  if (std::abs(std::abs(det) - 1.0) > 1e-4) {
    throw NumericalError("OrthogonalMatrix: |det| = " + std::to_string(std::abs(det)));
  }
  return OrthogonalMatrix(std::move(q), tolerance);
}

OrthogonalMatrix OrthogonalMatrix::identity(std::size_t n) {
  if (n == 0) throw InvalidArgument("OrthogonalMatrix::identity: n must be >= 1");
  return OrthogonalMatrix(Matrix::identity(n), kDefaultTolerance);
}

OrthogonalMatrix OrthogonalMatrix::inverse() const {
  return OrthogonalMatrix(q_.transposed(), tolerance_);
}

OrthogonalMatrix OrthogonalMatrix::operator*(const OrthogonalMatrix& other) const {
  return certify(matmul(q_, other.q_), std::max(tolerance_, other.tolerance_));
}

OrthogonalMatrix qr_orthogonalize(const Matrix& a) {
  if (!a.is_square() || a.empty()) {
    throw DimensionError("qr_orthogonalize expects a non-empty square matrix, got " + shape(a));
  }
  if (!a.all_finite()) throw NumericalError("qr_orthogonalize: non-finite input");
  QrResult qr = householder_qr(a);
  double dmax = 0.0, dmin = INFINITY;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    dmax = std::max(dmax, std::abs(qr.r(i, i)));
    dmin = std::min(dmin, std::abs(qr.r(i, i)));
  }
  if (!(dmax > 0.0) || dmin <= 1e-10 * dmax) {
    throw NumericalError("qr_orthogonalize: input is rank deficient");
  }
  return OrthogonalMatrix::certify(std::move(qr.q));
}

OrthogonalMatrix random_orthogonal(std::size_t n, std::uint64_t seed) {
  if (n == 0) throw InvalidArgument("random_orthogonal: n must be >= 1");
  Rng rng(seed);
  Matrix g(n, n);
  for (double& v : g.data()) v = rng.normal();
  return qr_orthogonalize(g);
}

bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

namespace {
void require_power_of_two(std::size_t n, const char* who) {
  if (!is_power_of_two(n)) {
    throw InvalidArgument(std::string(who) + ": size " + std::to_string(n) +
                          " is not a power of two (only Sylvester sizes are supported)");
  }
}
}  // namespace

OrthogonalMatrix hadamard_matrix(std::size_t n) {
  require_power_of_two(n, "hadamard_matrix");
  Matrix h(n, n);
  h(0, 0) = 1.0 / std::sqrt(static_cast<double>(n));
  for (std::size_t size = 1; size < n; size *= 2) {
    for (std::size_t i = 0; i < size; ++i)
      for (std::size_t j = 0; j < size; ++j) {
        const double v = h(i, j);
        h(i, j + size) = v;
        h(i + size, j) = v;
        h(i + size, j + size) = -v;
      }
  }
  return OrthogonalMatrix::certify(std::move(h), 1e-10);
}

std::vector<double> hadamard_signs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> d(n);
  for (double& s : d) s = rng.coin() ? -1.0 : 1.0;
  return d;
}

OrthogonalMatrix randomized_hadamard(std::size_t n, std::uint64_t seed) {
  require_power_of_two(n, "randomized_hadamard");
  const std::vector<double> d = hadamard_signs(n, seed);
  Matrix h = hadamard_matrix(n).matrix();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) h(i, j) *= d[i];
  return OrthogonalMatrix::certify(std::move(h), 1e-10);
}

void fast_hadamard_transform_inplace(std::span<double> x, bool normalized) {
  const std::size_t n = x.size();
  require_power_of_two(n, "fast_hadamard_transform");
  for (std::size_t h = 1; h < n; h *= 2) {
    for (std::size_t i = 0; i < n; i += 2 * h) {
      for (std::size_t j = i; j < i + h; ++j) {
        const double a = x[j];
        const double b = x[j + h];
        x[j] = a + b;
        x[j + h] = a - b;
      }
    }
  }
  if (normalized) {
    const double s = 1.0 / std::sqrt(static_cast<double>(n));
    for (double& v : x) v *= s;
  }
}

std::vector<double> fast_hadamard_transform(std::span<const double> x, bool normalized) {
  std::vector<double> out(x.begin(), x.end());
  fast_hadamard_transform_inplace(out, normalized);
  return out;
}

OrthogonalMatrix block_diagonal(const OrthogonalMatrix& block, std::size_t copies) {
  if (copies == 0) throw InvalidArgument("block_diagonal: copies must be >= 1");
  const std::size_t b = block.dim();
  Matrix m(b * copies, b * copies);
  for (std::size_t c = 0; c < copies; ++c)
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j) m(c * b + i, c * b + j) = block.matrix()(i, j);
  return OrthogonalMatrix::certify(std::move(m), block.tolerance());
}

}  // namespace kurtail::linalg
