#pragma once

#include <cstddef>
#include <cstdint>

#include "kurtail/linalg.hpp"

namespace kurtail::manifold {

using linalg::Matrix;
using linalg::OrthogonalMatrix;

// A = G·Wᵀ − W·Gᵀ, exactly skew-symmetric.
Matrix skew_project(const Matrix& grad, const OrthogonalMatrix& w);

struct RetractOptions {
  int iterations = 3;                      // fixed-point rounds above the direct-solve size
  std::size_t direct_solve_max_dim = 512;  // n ≤ this uses an LU solve
  double reorth_threshold = 1e-8;          // QR re-orthogonalization trigger
};

// Unchecked Cayley update (I − τ/2·A)⁻¹(I + τ/2·A)·W. Throws NumericalError if
// I − τ/2·A is singular.
Matrix cayley_transform(const Matrix& w, const Matrix& a, double step,
                        const RetractOptions& opts = {});

// cayley_transform followed by QR re-orthogonalization when the drift exceeds
// opts.reorth_threshold, then certification.
OrthogonalMatrix cayley_retract(const OrthogonalMatrix& w, const Matrix& a, double step,
                                const RetractOptions& opts = {});

enum class SecondMoment { scalar, elementwise };

struct CayleyHyperparameters {
  double lr = 0.05;
  double beta1 = 0.9;      // Adam first moment, SGD momentum
  double beta2 = 0.98;
  double eps = 1e-8;
  int cayley_iterations = 3;
  SecondMoment second_moment = SecondMoment::scalar;
};

struct CayleyOptimizerState {
  CayleyHyperparameters hp;
  Matrix momentum;            // skew, n × n
  double second_scalar = 0.0; // running mean of ‖A‖²_F
  Matrix second_elementwise;  // running mean of A∘A (elementwise variant only)
  std::uint64_t step_count = 0;

  static CayleyOptimizerState create(std::size_t n, const CayleyHyperparameters& hp = {});
};

struct StepResult {
  OrthogonalMatrix w;
  CayleyOptimizerState state;
};

// One Cayley-Adam step on the Euclidean gradient `grad`. lr_scale multiplies
// hp.lr (schedules).
StepResult cayley_adam_step(const OrthogonalMatrix& w, const Matrix& grad,
                            CayleyOptimizerState state, double lr_scale = 1.0);

// One Cayley-SGD step with heavy-ball momentum M ← β₁·M + A.
StepResult cayley_sgd_step(const OrthogonalMatrix& w, const Matrix& grad,
                           CayleyOptimizerState state, double lr_scale = 1.0);

// Cosine decay from 1 at iteration 0 to 0 at `total`.
double cosine_schedule(std::size_t iteration, std::size_t total);

}  // namespace kurtail::manifold
