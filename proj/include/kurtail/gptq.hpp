#pragma once

#include <cstddef>
#include <span>

#include "kurtail/linalg.hpp"
#include "kurtail/quant.hpp"

namespace kurtail::gptq {

using linalg::Matrix;

// H = (2/N)·XᵀX + λI over the inputs of one linear map, λ = damping ·
// mean(diag).
struct HessianEstimate {
  Matrix h;  // d_in × d_in
  std::size_t sample_count = 0;
  double damping = 0.0;  // absolute λ that was added
};

// X is N × d_in (one row per token).
HessianEstimate collect_hessian(const Matrix& x, double damping_fraction = 0.01);
// Same statistic over row blocks concatenated in order.
HessianEstimate collect_hessian(std::span<const Matrix> parts, double damping_fraction = 0.01);

struct GptqOptions {
  // Process input dims in order of decreasing diag(H).
  bool act_order = false;
};

// Greedy quantization of w (d_in × d_out, y = x·w) one input dim at a time,
// pushing each row's rounding error onto the unprocessed rows through the
// upper Cholesky factor of H⁻¹. Scales are per output column, symmetric,
// fixed from the unmodified weights (as RTN).
quant::QuantizedTensor gptq_quantize(const Matrix& w, const HessianEstimate& h, int bits,
                                     const GptqOptions& opts = {});

// tr((W − Ŵ)ᵀ H (W − Ŵ)).
double proxy_loss(const Matrix& w, const Matrix& w_hat, const Matrix& h);

}  // namespace kurtail::gptq
