#include "ntom/point_process.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

namespace ntom::tpp {

Counters& counters() {
  static Counters c;
  return c;
}

double intensity(double a, double w, double t) {
  auto& c = counters();
  c.intensity_evaluations.fetch_add(1, std::memory_order_relaxed);
  double exponent = a + w * t;
  if (exponent > kExponentCap) {
    exponent = kExponentCap;
    c.clamp_events.fetch_add(1, std::memory_order_relaxed);
  }
  return std::exp(exponent);
}

double cumulative_intensity(double a, double w, double tau) {
  if (std::abs(w) > kSeriesThreshold) return std::exp(a) * std::expm1(w * tau) / w;
  const double x = w * tau;
  return std::exp(a) * tau * (1.0 + x / 2.0 + x * x / 6.0);
}

namespace {

// d/dw of Lambda, divided by exp(a): tau^2 * sum_k x^k (k+1)/(k+2)!, x = w tau.
double dlambda_dw_scaled(double w, double tau) {
  const double x = w * tau;
  if (std::abs(x) < 0.05) {
    double term = 0.5;  // (k+1)/(k+2)! at k = 0
    double xk = 1.0;
    double fact = 2.0;  // (k+2)!
    double acc = 0.0;
    for (int k = 0; k < 12; ++k) {
      acc += xk * term;
      xk *= x;
      fact *= static_cast<double>(k + 3);
      term = static_cast<double>(k + 2) / fact;
    }
    return tau * tau * acc;
  }
  return (tau * std::exp(x) - std::expm1(x) / w) / w;
}

}  // namespace

CumulativeGrad cumulative_intensity_grad(double a, double w, double tau) {
  const double lam = cumulative_intensity(a, w, tau);
  return {lam, lam, std::exp(a) * dlambda_dw_scaled(w, tau)};
}

double survival(double a, double w, double tau) {
  return std::exp(-cumulative_intensity(a, w, tau));
}

double density(double a, double w, double tau) {
  if (tau < 0) throw std::invalid_argument("density: tau must be >= 0");
  return intensity(a, w, tau) * survival(a, w, tau);
}

double total_cumulative(double a, double w) {
  if (w >= 0) return std::numeric_limits<double>::infinity();
  return -std::exp(a) / w;
}

double quadrature_limit(double a, double w, double horizon) {
  double t = 0.0;
  if (std::abs(w) <= kSeriesThreshold) {
    t = kSurvivalCutoff * std::exp(-a);
  } else {
    const double arg = kSurvivalCutoff * w * std::exp(-a);
    if (arg > -1.0) {
      t = std::log1p(arg) / w;
    } else {
      // Lambda never reaches the cutoff: stop where exp(a + w t) < e^-40.
      t = std::max(-40.0 - a, 40.0) / (-w);
    }
  }
  if (!std::isfinite(t) || t > horizon) t = horizon;
  return t;
}

double density_mass(double a, double w, double horizon) {
  const double t_max = quadrature_limit(a, w, horizon);
  const double h = t_max / kSimpsonPanels;
  double acc = 0.0;
  for (int j = 0; j <= kSimpsonPanels; ++j) {
    const double tau = h * j;
    const double coef = (j == 0 || j == kSimpsonPanels) ? 1.0 : (j % 2 == 1 ? 4.0 : 2.0);
    acc += coef * std::exp(a + w * tau) * std::exp(-cumulative_intensity(a, w, tau));
  }
  return acc * h / 3.0;
}

Expectation expected_time(double a, double w, double horizon) {
  if (!std::isfinite(a) || !std::isfinite(w)) {
    throw std::invalid_argument("expected_time: non-finite parameters a=" + std::to_string(a) +
                                " w=" + std::to_string(w));
  }
  counters().expectation_evaluations.fetch_add(1, std::memory_order_relaxed);
  counters().intensity_evaluations.fetch_add(1, std::memory_order_relaxed);

  Expectation out;
  out.t_max = quadrature_limit(a, w, horizon);
  const double lam_inf = total_cumulative(a, w);
  out.defective = lam_inf < kSurvivalCutoff;

  const double h = out.t_max / kSimpsonPanels;
  const double ea = std::exp(a);
  double n = 0, n_a = 0, n_w = 0;  // integral of tau f and its partials
  double m = 0, m_a = 0, m_w = 0;  // integral of f and its partials
  for (int j = 0; j <= kSimpsonPanels; ++j) {
    const double tau = h * j;
    const double coef = (j == 0 || j == kSimpsonPanels) ? 1.0 : (j % 2 == 1 ? 4.0 : 2.0);
    const double lam_t = std::exp(a + w * tau);
    const double big = cumulative_intensity(a, w, tau);
    const double big_w = ea * dlambda_dw_scaled(w, tau);
    const double f = lam_t * std::exp(-big);
    const double f_a = f * (1.0 - big);
    const double f_w = f * (tau - big_w);
    n += coef * tau * f;
    n_a += coef * tau * f_a;
    n_w += coef * tau * f_w;
    m += coef * f;
    m_a += coef * f_a;
    m_w += coef * f_w;
  }
  const double s = h / 3.0;
  n *= s, n_a *= s, n_w *= s, m *= s, m_a *= s, m_w *= s;

  if (out.defective) {
    if (!(m > 0)) {
      throw std::runtime_error("expected_time: defective density has no mass on [0, " +
                               std::to_string(out.t_max) + "] (a=" + std::to_string(a) +
                               ", w=" + std::to_string(w) + ")");
    }
    out.value = n / m;
    out.d_a = (n_a * m - n * m_a) / (m * m);
    out.d_w = (n_w * m - n * m_w) / (m * m);
  } else {
    out.value = n;
    out.d_a = n_a;
    out.d_w = n_w;
    if (out.t_max >= horizon) {
      // Mass beyond the horizon is placed at the horizon.
      const CumulativeGrad cg = cumulative_intensity_grad(a, w, out.t_max);
      const double surv = std::exp(-cg.value);
      out.censored_mass = surv;
      out.value += out.t_max * surv;
      out.d_a -= out.t_max * surv * cg.d_a;
      out.d_w -= out.t_max * surv * cg.d_w;
    }
  }
  if (!std::isfinite(out.value) || !std::isfinite(out.d_a) || !std::isfinite(out.d_w)) {
    throw std::runtime_error("expected_time: non-finite quadrature (a=" + std::to_string(a) +
                             ", w=" + std::to_string(w) + ", t_max=" + std::to_string(out.t_max) +
                             ")");
  }
  return out;
}

double gaussian_time_loss(double tau_true, double tau_hat, double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("time loss: sigma must be > 0");
  const double r = tau_true - tau_hat;
  return r * r / (2.0 * sigma * sigma) + std::log(sigma * std::sqrt(2.0 * std::numbers::pi));
}

double tpp_time_loss(double a, double w, double tau_true) {
  return -std::min(a + w * tau_true, kExponentCap) + cumulative_intensity(a, w, tau_true);
}

}  // namespace ntom::tpp
