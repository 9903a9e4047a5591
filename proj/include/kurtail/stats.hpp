#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kurtail/linalg.hpp"

namespace kurtail::stats {

using linalg::Matrix;

// Plain (non-excess) kurtosis of the uniform distribution.
inline constexpr double kUniformKurtosis = 1.8;

struct KurtosisValue {
  double kappa = 0.0;
  std::size_t n = 0;
  double mean = 0.0;
  double sigma = 0.0;  // population standard deviation
};

// κ = m4 / m2² with population (1/n) central moments. Requires n ≥ 4 and
// σ ≥ 1e-12 · max|x|.
KurtosisValue kurtosis(std::span<const double> x);

// ∂κ/∂xᵢ = (4/n)·[(xᵢ−μ)³ − m3 − κ·σ²·(xᵢ−μ)] / σ⁴.
std::vector<double> kurtosis_gradient(std::span<const double> x);

// Mean over groups of |κ(group values) − kappa_u|. Each matrix is one group,
// its tokens concatenated row-major.
double kurtosis_loss(std::span<const Matrix> groups, double kappa_u = kUniformKurtosis);

struct LossGradient {
  double loss = 0.0;
  std::vector<double> kappas;  // per group
  std::vector<Matrix> grads;   // ∂loss/∂group, same shapes as the inputs
};

// Loss together with its gradient w.r.t. every group entry. The subgradient of
// |·| at exactly zero is taken as 0.
LossGradient kurtosis_loss_and_gradient(std::span<const Matrix> groups,
                                        double kappa_u = kUniformKurtosis);

}  // namespace kurtail::stats
