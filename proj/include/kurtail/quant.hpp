#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kurtail/linalg.hpp"

namespace kurtail::quant {

using linalg::Matrix;

enum class Scheme { symmetric, asymmetric };
enum class Granularity { per_tensor, per_token, per_channel };

std::string to_string(Scheme s);
std::string to_string(Granularity g);

// Uniform k-bit quantizer description.
//
// per_token groups rows, per_channel groups columns. clip_quantile < 1
// replaces the group range by the linear-interpolated empirical quantile of
// |x| (symmetric) or of x (asymmetric, lower bound at 1 − q).
struct QuantSpec {
  int bits = 4;
  Scheme scheme = Scheme::symmetric;
  Granularity granularity = Granularity::per_token;
  double clip_quantile = 1.0;

  // Per-token dynamic symmetric, clipped at the 0.98 quantile.
  static QuantSpec activation(int bits = 4);
  // Per-token asymmetric, no clipping.
  static QuantSpec kv_cache(int bits = 4);
  // Per-column (output channel) symmetric, no clipping.
  static QuantSpec weight(int bits = 4);

  // Largest symmetric code, 2^(k−1) − 1.
  std::int32_t symmetric_max_code() const { return (std::int32_t{1} << (bits - 1)) - 1; }
  // Largest asymmetric code, 2^k − 1.
  std::int32_t asymmetric_max_code() const { return (std::int32_t{1} << bits) - 1; }

  void validate() const;
  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

struct QuantizedTensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> codes;  // row-major
  std::vector<double> scale;        // one per group
  std::vector<double> shift;        // one per group (0 for symmetric)
  QuantSpec spec;

  std::size_t group_count() const { return scale.size(); }
  std::size_t group_of(std::size_t r, std::size_t c) const;
};

QuantizedTensor quantize(const Matrix& x, const QuantSpec& spec);
Matrix dequantize(const QuantizedTensor& q);
// dequantize(quantize(x, spec)) without materializing codes.
Matrix fake_quantize(const Matrix& x, const QuantSpec& spec);

// Mean of (x − Q(x))². With step_override every group uses that step size
// (shift stays 0 for symmetric and the group minimum for asymmetric).
double quant_mse(const Matrix& x, const QuantSpec& spec,
                 std::optional<double> step_override = std::nullopt);
// Per-tensor symmetric MSE of a flat sample at a given step.
double symmetric_mse(std::span<const double> x, int bits, double step);

// Step minimizing the per-tensor symmetric MSE. Coarse scan of
// [0.1, 1.5] × the max-based step followed by golden-section refinement to
// relative 1e-4 inside the best scan bracket.
double optimal_step_size(std::span<const double> x, int bits);

struct SensitivityReport {
  std::vector<double> alphas;
  std::vector<double> gamma;
  double optimal_step = 0.0;
  double optimal_mse = 0.0;
  std::string condition;  // vanilla | hadamard | kurtail
  std::uint32_t layer = 0;
  std::string block;
};

// Γ(α) = |MSE(α·s̃) − MSE(s̃)|; alphas must contain 1.0.
SensitivityReport sensitivity(std::span<const double> x, int bits, std::span<const double> alphas);

// Per-column symmetric round-to-nearest.
QuantizedTensor rtn_quantize_weights(const Matrix& w, int bits);

// Linear-interpolated empirical quantile (sorts a copy).
double empirical_quantile(std::span<const double> values, double q);

}  // namespace kurtail::quant
