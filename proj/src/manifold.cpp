#include "kurtail/manifold.hpp"

#include <cmath>
#include <numbers>

#include "kurtail/error.hpp"

namespace kurtail::manifold {

using namespace linalg;

namespace {

void require_square(const Matrix& a, std::size_t n, const char* what) {
  if (a.rows() != n || a.cols() != n) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(n) + "x" +
                         std::to_string(n) + ", got " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()));
  }
}

bool all_zero(const Matrix& a) {
  for (double v : a.data())
    if (v != 0.0) return false;
  return true;
}

}  // namespace

Matrix skew_project(const Matrix& grad, const OrthogonalMatrix& w) {
  require_square(grad, w.dim(), "skew_project");
  const Matrix gw = matmul_nt(grad, w.matrix());
  const std::size_t n = gw.rows();
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = gw(i, j) - gw(j, i);
  return a;
}

Matrix cayley_transform(const Matrix& w, const Matrix& a, double step, const RetractOptions& opts) {
  const std::size_t n = w.rows();
  require_square(a, n, "cayley_retract");
  const double h = 0.5 * step;
  if (n <= opts.direct_solve_max_dim) {
    Matrix lhs = Matrix::identity(n) - h * a;
    Matrix rhs = w + h * matmul(a, w);
    try {
      return solve(lhs, rhs);
    } catch (const NumericalError&) {
      throw NumericalError("cayley_retract: I - (step/2)A is singular; reduce the step");
    }
  }
  // Y ← W + τ/2·A·(W + Y), starting from the explicit Euler point.
  Matrix y = w + step * matmul(a, w);
  for (int it = 0; it < opts.iterations; ++it) y = w + h * matmul(a, w + y);
  if (!y.all_finite()) throw NumericalError("cayley_retract: fixed-point iteration diverged");
  return y;
}

OrthogonalMatrix cayley_retract(const OrthogonalMatrix& w, const Matrix& a, double step,
                                const RetractOptions& opts) {
  if (step == 0.0 || all_zero(a)) return w;
  Matrix y = cayley_transform(w.matrix(), a, step, opts);
  if (orthogonality_error(y) > opts.reorth_threshold) return qr_orthogonalize(y);
  return OrthogonalMatrix::certify(std::move(y));
}

CayleyOptimizerState CayleyOptimizerState::create(std::size_t n, const CayleyHyperparameters& hp) {
  CayleyOptimizerState s;
  s.hp = hp;
  s.momentum = Matrix(n, n);
  if (hp.second_moment == SecondMoment::elementwise) s.second_elementwise = Matrix(n, n);
  return s;
}

namespace {

Matrix checked_skew(const OrthogonalMatrix& w, const Matrix& grad, const CayleyOptimizerState& state) {
  if (!grad.all_finite()) throw NumericalError("cayley optimizer: non-finite gradient");
  require_square(state.momentum, w.dim(), "cayley optimizer state");
  return skew_project(grad, w);
}

RetractOptions retract_options(const CayleyHyperparameters& hp) {
  RetractOptions o;
  o.iterations = hp.cayley_iterations;
  return o;
}

}  // namespace

StepResult cayley_adam_step(const OrthogonalMatrix& w, const Matrix& grad, CayleyOptimizerState state,
                            double lr_scale) {
  const Matrix a = checked_skew(w, grad, state);
  const CayleyHyperparameters& hp = state.hp;
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(hp.beta1, t);
  const double bc2 = 1.0 - std::pow(hp.beta2, t);

  state.momentum *= hp.beta1;
  state.momentum += (1.0 - hp.beta1) * a;
  Matrix direction = state.momentum * (-1.0 / bc1);
  double step = hp.lr * lr_scale;

  if (hp.second_moment == SecondMoment::scalar) {
    const double sq = frobenius_dot(a, a);
    state.second_scalar = hp.beta2 * state.second_scalar + (1.0 - hp.beta2) * sq;
    step /= std::sqrt(state.second_scalar / bc2) + hp.eps;
  } else {
    require_square(state.second_elementwise, w.dim(), "cayley optimizer state");
    auto v = state.second_elementwise.data();
    auto d = direction.data();
    const auto av = a.data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * av[i] * av[i];
      d[i] /= std::sqrt(v[i] / bc2) + hp.eps;
    }
  }
  OrthogonalMatrix next = cayley_retract(w, direction, step, retract_options(hp));
  return {std::move(next), std::move(state)};
}

StepResult cayley_sgd_step(const OrthogonalMatrix& w, const Matrix& grad, CayleyOptimizerState state,
                           double lr_scale) {
  const Matrix a = checked_skew(w, grad, state);
  state.step_count += 1;
  state.momentum *= state.hp.beta1;
  state.momentum += a;
  OrthogonalMatrix next =
      cayley_retract(w, state.momentum * -1.0, state.hp.lr * lr_scale, retract_options(state.hp));
  return {std::move(next), std::move(state)};
}

double cosine_schedule(std::size_t iteration, std::size_t total) {
  if (total == 0 || iteration >= total) return 0.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(iteration) /
                               static_cast<double>(total)));
}

}  // namespace kurtail::manifold
