#include "kurtail/gptq.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "kurtail/error.hpp"

namespace kurtail::gptq {

using namespace linalg;

HessianEstimate collect_hessian(const Matrix& x, double damping_fraction) {
  const Matrix parts[] = {x};
  return collect_hessian(parts, damping_fraction);
}

HessianEstimate collect_hessian(std::span<const Matrix> parts, double damping_fraction) {
  if (parts.empty()) throw InvalidArgument("collect_hessian: no activations");
  if (damping_fraction < 0.0) throw InvalidArgument("collect_hessian: negative damping");
  const std::size_t d = parts.front().cols();
  Matrix h(d, d);
  std::size_t n = 0;
  for (const Matrix& p : parts) {
    if (p.cols() != d) throw DimensionError("collect_hessian: inconsistent input dims");
    if (!p.all_finite()) throw NumericalError("collect_hessian: non-finite activations");
    h += matmul_tn(p, p);
    n += p.rows();
  }
  if (n == 0 || d == 0) throw InvalidArgument("collect_hessian: empty activations");
  h *= 2.0 / static_cast<double>(n);
  // Exact symmetry regardless of accumulation order.
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) h(j, i) = h(i, j);
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean_diag += h(i, i);
  mean_diag /= static_cast<double>(d);
  const double lambda = damping_fraction * mean_diag;
  for (std::size_t i = 0; i < d; ++i) h(i, i) += lambda;
  return {std::move(h), n, lambda};
}

namespace {

Matrix permute_rows(const Matrix& a, const std::vector<std::size_t>& perm) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    const auto src = a.row(perm[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

Matrix permute_sym(const Matrix& h, const std::vector<std::size_t>& perm) {
  Matrix out(h.rows(), h.cols());
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t j = 0; j < perm.size(); ++j) out(i, j) = h(perm[i], perm[j]);
  return out;
}

}  // namespace

quant::QuantizedTensor gptq_quantize(const Matrix& w, const HessianEstimate& est, int bits,
                                     const GptqOptions& opts) {
  const std::size_t d_in = w.rows();
  if (est.h.rows() != d_in || est.h.cols() != d_in) {
    throw DimensionError("gptq_quantize: Hessian is " + std::to_string(est.h.rows()) + "x" +
                         std::to_string(est.h.cols()) + " but weight input dim is " + std::to_string(d_in));
  }
  // Scales and code range come from plain RTN on the original weights.
  quant::QuantizedTensor q = quant::rtn_quantize_weights(w, bits);
  const double qmax = q.spec.symmetric_max_code();

  std::vector<std::size_t> perm(d_in);
  std::iota(perm.begin(), perm.end(), 0);
  if (opts.act_order) {
    std::stable_sort(perm.begin(), perm.end(),
                     [&](std::size_t a, std::size_t b) { return est.h(a, a) > est.h(b, b); });
  }
  Matrix work = opts.act_order ? permute_rows(w, perm) : w;
  const Matrix h = opts.act_order ? permute_sym(est.h, perm) : est.h;

  Matrix u;
  try {
    u = cholesky(spd_inverse(h)).transposed();
  } catch (const NumericalError& e) {
    throw NumericalError(std::string("gptq_quantize: Cholesky failed, increase damping (") + e.what() + ")");
  }

  const std::size_t d_out = w.cols();
  std::vector<double> err(d_out);
  for (std::size_t i = 0; i < d_in; ++i) {
    auto row = work.row(i);
    std::int32_t* codes = q.codes.data() + perm[i] * d_out;
    for (std::size_t c = 0; c < d_out; ++c) {
      const double s = q.scale[c];
      const double code = std::clamp(std::round(row[c] / s), -qmax, qmax);
      codes[c] = static_cast<std::int32_t>(code);
      err[c] = (row[c] - code * s) / u(i, i);
    }
    for (std::size_t j = i + 1; j < d_in; ++j) {
      const double uij = u(i, j);
      auto target = work.row(j);
      for (std::size_t c = 0; c < d_out; ++c) target[c] -= err[c] * uij;
    }
  }
  return q;
}

double proxy_loss(const Matrix& w, const Matrix& w_hat, const Matrix& h) {
  if (w.rows() != w_hat.rows() || w.cols() != w_hat.cols() || h.rows() != w.rows() || !h.is_square()) {
    throw DimensionError("proxy_loss: shape mismatch");
  }
  const Matrix delta = w - w_hat;
  return frobenius_dot(delta, matmul(h, delta));
}

}  // namespace kurtail::gptq
