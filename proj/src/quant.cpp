#include "kurtail/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kurtail/error.hpp"

namespace kurtail::quant {

namespace {

struct GroupParams {
  double scale = 1.0;
  double shift = 0.0;
};

// Views one quantization group as a strided sequence.
struct GroupView {
  const double* base;
  std::size_t count;
  std::size_t stride;
  double operator[](std::size_t i) const { return base[i * stride]; }
};

std::vector<GroupView> groups_of(const Matrix& x, Granularity g) {
  std::vector<GroupView> out;
  const double* p = x.data().data();
  switch (g) {
    case Granularity::per_tensor:
      out.push_back({p, x.size(), 1});
      break;
    case Granularity::per_token:
      for (std::size_t r = 0; r < x.rows(); ++r) out.push_back({p + r * x.cols(), x.cols(), 1});
      break;
    case Granularity::per_channel:
      for (std::size_t c = 0; c < x.cols(); ++c) out.push_back({p + c, x.rows(), x.cols()});
      break;
  }
  return out;
}

double quantile_in_place(std::vector<double>& v, double q) {
  const double h = (static_cast<double>(v.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
  const double vlo = v[lo];
  if (lo + 1 >= v.size()) return vlo;
  const double vhi = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
  return vlo + (h - static_cast<double>(lo)) * (vhi - vlo);
}

GroupParams fit_group(const GroupView& g, const QuantSpec& spec, std::optional<double> step) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  double amax = 0.0;
  for (std::size_t i = 0; i < g.count; ++i) {
    const double v = g[i];
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    amax = std::max(amax, std::abs(v));
  }
  const bool clip = spec.clip_quantile < 1.0 && g.count > 1;
  if (spec.scheme == Scheme::symmetric) {
    if (step) return {*step, 0.0};
    double range = amax;
    if (clip) {
      std::vector<double> mags(g.count);
      for (std::size_t i = 0; i < g.count; ++i) mags[i] = std::abs(g[i]);
      const double qv = quantile_in_place(mags, spec.clip_quantile);
      if (qv > 0.0) range = qv;
    }
    if (range == 0.0) return {1.0, 0.0};
    return {range / spec.symmetric_max_code(), 0.0};
  }
  double qlo = lo, qhi = hi;
  if (clip) {
    std::vector<double> vals(g.count);
    for (std::size_t i = 0; i < g.count; ++i) vals[i] = g[i];
    qhi = quantile_in_place(vals, spec.clip_quantile);
    qlo = quantile_in_place(vals, 1.0 - spec.clip_quantile);
    if (!(qhi > qlo)) {
      qlo = lo;
      qhi = hi;
    }
  }
  if (step) return {*step, qlo};
  if (!(qhi > qlo)) return {1.0, qlo};
  return {(qhi - qlo) / spec.asymmetric_max_code(), qlo};
}

std::int32_t encode(double v, const GroupParams& p, const QuantSpec& spec) {
  if (spec.scheme == Scheme::symmetric) {
    const double qmax = spec.symmetric_max_code();
    return static_cast<std::int32_t>(std::clamp(std::round(v / p.scale), -qmax, qmax));
  }
  const double qmax = spec.asymmetric_max_code();
  return static_cast<std::int32_t>(std::clamp(std::round((v - p.shift) / p.scale), 0.0, qmax));
}

void check_input(const Matrix& x, const QuantSpec& spec) {
  spec.validate();
  if (!x.all_finite()) throw NumericalError("quantize: non-finite input");
}

}  // namespace

std::string to_string(Scheme s) { return s == Scheme::symmetric ? "symmetric" : "asymmetric"; }

std::string to_string(Granularity g) {
  switch (g) {
    case Granularity::per_tensor: return "per_tensor";
    case Granularity::per_token: return "per_token";
    case Granularity::per_channel: return "per_channel";
  }
  return "unknown";
}

QuantSpec QuantSpec::activation(int bits) {
  return {bits, Scheme::symmetric, Granularity::per_token, 0.98};
}

QuantSpec QuantSpec::kv_cache(int bits) {
  return {bits, Scheme::asymmetric, Granularity::per_token, 1.0};
}

QuantSpec QuantSpec::weight(int bits) {
  return {bits, Scheme::symmetric, Granularity::per_channel, 1.0};
}

void QuantSpec::validate() const {
  if (bits < 2 || bits > 16) {
    throw InvalidArgument("QuantSpec: bits must be in [2, 16], got " + std::to_string(bits));
  }
  if (!(clip_quantile > 0.0 && clip_quantile <= 1.0)) {
    throw InvalidArgument("QuantSpec: clip_quantile must be in (0, 1]");
  }
}

std::size_t QuantizedTensor::group_of(std::size_t r, std::size_t c) const {
  switch (spec.granularity) {
    case Granularity::per_tensor: return 0;
    case Granularity::per_token: return r;
    case Granularity::per_channel: return c;
  }
  return 0;
}

QuantizedTensor quantize(const Matrix& x, const QuantSpec& spec) {
  check_input(x, spec);
  QuantizedTensor q;
  q.rows = x.rows();
  q.cols = x.cols();
  q.spec = spec;
  q.codes.resize(x.size());
  const auto groups = groups_of(x, spec.granularity);
  q.scale.resize(groups.size());
  q.shift.resize(groups.size());
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const GroupParams p = fit_group(groups[gi], spec, std::nullopt);
    q.scale[gi] = p.scale;
    q.shift[gi] = p.shift;
  }
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) {
      const std::size_t gi = q.group_of(r, c);
      q.codes[r * x.cols() + c] = encode(x(r, c), {q.scale[gi], q.shift[gi]}, spec);
    }
  return q;
}

Matrix dequantize(const QuantizedTensor& q) {
  Matrix out(q.rows, q.cols);
  for (std::size_t r = 0; r < q.rows; ++r)
    for (std::size_t c = 0; c < q.cols; ++c) {
      const std::size_t gi = q.group_of(r, c);
      out(r, c) = q.codes[r * q.cols + c] * q.scale[gi] + q.shift[gi];
    }
  return out;
}

Matrix fake_quantize(const Matrix& x, const QuantSpec& spec) { return dequantize(quantize(x, spec)); }

double quant_mse(const Matrix& x, const QuantSpec& spec, std::optional<double> step_override) {
  check_input(x, spec);
  if (step_override && !(*step_override > 0.0)) {
    throw InvalidArgument("quant_mse: step override must be positive");
  }
  if (x.empty()) return 0.0;
  const auto groups = groups_of(x, spec.granularity);
  double sum = 0.0;
  for (const GroupView& g : groups) {
    const GroupParams p = fit_group(g, spec, step_override);
    for (std::size_t i = 0; i < g.count; ++i) {
      const double v = g[i];
      const double rec = encode(v, p, spec) * p.scale + p.shift;
      sum += (v - rec) * (v - rec);
    }
  }
  return sum / static_cast<double>(x.size());
}

double symmetric_mse(std::span<const double> x, int bits, double step) {
  if (x.empty()) return 0.0;
  const double qmax = static_cast<double>((1 << (bits - 1)) - 1);
  double sum = 0.0;
  for (double v : x) {
    const double rec = std::clamp(std::round(v / step), -qmax, qmax) * step;
    sum += (v - rec) * (v - rec);
  }
  return sum / static_cast<double>(x.size());
}

double optimal_step_size(std::span<const double> x, int bits) {
  QuantSpec{bits}.validate();
  if (x.empty()) throw InvalidArgument("optimal_step_size: empty input");
  double lo = x[0], hi = x[0], amax = 0.0;
  for (double v : x) {
    if (!std::isfinite(v)) throw NumericalError("optimal_step_size: non-finite input");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
    amax = std::max(amax, std::abs(v));
  }
  if (!(hi > lo)) throw InvalidArgument("optimal_step_size: constant input");

  const double naive = amax / static_cast<double>((1 << (bits - 1)) - 1);
  constexpr int kScan = 64;
  const double a0 = 0.1 * naive, a1 = 1.5 * naive;
  const double h = (a1 - a0) / (kScan - 1);
  int best = 0;
  double best_mse = INFINITY;
  for (int i = 0; i < kScan; ++i) {
    const double m = symmetric_mse(x, bits, a0 + h * i);
    if (m < best_mse) {
      best_mse = m;
      best = i;
    }
  }

  // Golden-section refinement on the bracket around the best scan point.
  double a = a0 + h * std::max(best - 1, 0);
  double b = a0 + h * std::min(best + 1, kScan - 1);
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = symmetric_mse(x, bits, c);
  double fd = symmetric_mse(x, bits, d);
  while ((b - a) > 1e-4 * 0.5 * (a + b)) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = symmetric_mse(x, bits, c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = symmetric_mse(x, bits, d);
    }
  }
  // Best of the evaluated candidates.
  double s = a0 + h * best;
  double fs = best_mse;
  if (fc < fs) {
    s = c;
    fs = fc;
  }
  if (fd < fs) s = d;
  return s;
}

SensitivityReport sensitivity(std::span<const double> x, int bits, std::span<const double> alphas) {
  if (std::find(alphas.begin(), alphas.end(), 1.0) == alphas.end()) {
    throw InvalidArgument("sensitivity: alphas must include 1.0");
  }
  SensitivityReport rep;
  rep.optimal_step = optimal_step_size(x, bits);
  rep.optimal_mse = symmetric_mse(x, bits, rep.optimal_step);
  rep.alphas.assign(alphas.begin(), alphas.end());
  rep.gamma.reserve(alphas.size());
  for (double a : alphas) {
    if (!(a > 0.0)) throw InvalidArgument("sensitivity: alphas must be positive");
    rep.gamma.push_back(a == 1.0 ? 0.0
                                 : std::abs(symmetric_mse(x, bits, a * rep.optimal_step) - rep.optimal_mse));
  }
  return rep;
}

QuantizedTensor rtn_quantize_weights(const Matrix& w, int bits) {
  return quantize(w, QuantSpec::weight(bits));
}

double empirical_quantile(std::span<const double> values, double q) {
  if (values.empty()) throw InvalidArgument("empirical_quantile: empty input");
  if (!(q >= 0.0 && q <= 1.0)) throw InvalidArgument("empirical_quantile: q outside [0, 1]");
  std::vector<double> v(values.begin(), values.end());
  return quantile_in_place(v, q);
}

}  // namespace kurtail::quant
