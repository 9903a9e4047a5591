#include "kurtail/stats.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kurtail/error.hpp"

namespace kurtail::stats {

namespace {

struct Moments {
  double mean = 0.0;
  double m2 = 0.0;
  double m3 = 0.0;
  double m4 = 0.0;
};

Moments central_moments(std::span<const double> x) {
  if (x.size() < 4) {
    throw InvalidArgument("kurtosis: need at least 4 values, got " + std::to_string(x.size()));
  }
  double sum = 0.0, amax = 0.0;
  for (double v : x) {
    if (!std::isfinite(v)) throw NumericalError("kurtosis: non-finite input");
    sum += v;
    amax = std::max(amax, std::abs(v));
  }
  const double n = static_cast<double>(x.size());
  Moments m;
  m.mean = sum / n;
  for (double v : x) {
    const double d = v - m.mean;
    const double d2 = d * d;
    m.m2 += d2;
    m.m3 += d2 * d;
    m.m4 += d2 * d2;
  }
  m.m2 /= n;
  m.m3 /= n;
  m.m4 /= n;
  if (!(std::sqrt(m.m2) >= 1e-12 * amax) || m.m2 == 0.0) {
    throw InvalidArgument("kurtosis: constant input");
  }
  return m;
}

void gradient_into(std::span<const double> x, const Moments& m, double scale, std::span<double> out) {
  const double kappa = m.m4 / (m.m2 * m.m2);
  const double c = scale * 4.0 / (static_cast<double>(x.size()) * m.m2 * m.m2);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - m.mean;
    out[i] = c * (d * d * d - m.m3 - kappa * m.m2 * d);
  }
}

}  // namespace

KurtosisValue kurtosis(std::span<const double> x) {
  const Moments m = central_moments(x);
  return {m.m4 / (m.m2 * m.m2), x.size(), m.mean, std::sqrt(m.m2)};
}

std::vector<double> kurtosis_gradient(std::span<const double> x) {
  const Moments m = central_moments(x);
  std::vector<double> g(x.size());
  gradient_into(x, m, 1.0, g);
  return g;
}

double kurtosis_loss(std::span<const Matrix> groups, double kappa_u) {
  if (groups.empty()) throw InvalidArgument("kurtosis_loss: no groups");
  double total = 0.0;
  for (const Matrix& g : groups) {
    if (g.empty()) throw InvalidArgument("kurtosis_loss: empty group");
    total += std::abs(kurtosis(g.data()).kappa - kappa_u);
  }
  return total / static_cast<double>(groups.size());
}

LossGradient kurtosis_loss_and_gradient(std::span<const Matrix> groups, double kappa_u) {
  if (groups.empty()) throw InvalidArgument("kurtosis_loss: no groups");
  LossGradient out;
  const double inv_l = 1.0 / static_cast<double>(groups.size());
  for (const Matrix& g : groups) {
    if (g.empty()) throw InvalidArgument("kurtosis_loss: empty group");
    const Moments m = central_moments(g.data());
    const double kappa = m.m4 / (m.m2 * m.m2);
    const double diff = kappa - kappa_u;
    const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    out.kappas.push_back(kappa);
    out.loss += std::abs(diff);
    Matrix grad(g.rows(), g.cols());
    gradient_into(g.data(), m, sign * inv_l, grad.data());
    out.grads.push_back(std::move(grad));
  }
  out.loss *= inv_l;
  return out;
}

}  // namespace kurtail::stats
