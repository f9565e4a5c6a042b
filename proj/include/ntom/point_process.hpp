#pragma once

// Scalar math of the exponential-affine conditional intensity
//
//   lambda(t) = exp(a + w t),   a = b_lambda + v_lambda . g
//
// and the quantities derived from it: cumulative intensity, event-time
// density, and the expected time to the next event.

#include <atomic>
#include <cstdint>

namespace ntom::tpp {

inline constexpr double kExponentCap = 50.0;
inline constexpr double kSeriesThreshold = 1e-6;
inline constexpr double kSurvivalCutoff = 30.0;  // Lambda(T_max) >= 30
inline constexpr int kSimpsonPanels = 2048;

/// Process-wide instrumentation counters.
struct Counters {
  std::atomic<std::uint64_t> intensity_evaluations{0};
  std::atomic<std::uint64_t> clamp_events{0};
  std::atomic<std::uint64_t> expectation_evaluations{0};

  void reset() {
    intensity_evaluations = 0;
    clamp_events = 0;
    expectation_evaluations = 0;
  }
};

Counters& counters();

/// exp(a + w t) with the exponent capped at 50.
double intensity(double a, double w, double t);

/// Integral of the intensity over [0, tau]. Closed form for |w| > 1e-6,
/// third-order series otherwise.
double cumulative_intensity(double a, double w, double tau);

/// dLambda/da and dLambda/dw at tau.
struct CumulativeGrad {
  double value;
  double d_a;
  double d_w;
};
CumulativeGrad cumulative_intensity_grad(double a, double w, double tau);

/// lambda(tau) * exp(-Lambda(tau)).
double density(double a, double w, double tau);

/// exp(-Lambda(tau)).
double survival(double a, double w, double tau);

/// Lambda(inf): +inf for w >= 0, -exp(a)/w for w < 0.
double total_cumulative(double a, double w);

/// Upper limit of the quadrature: smallest T with Lambda(T) >= 30, or, when
/// that never happens (w < 0), the point where the intensity drops below
/// exp(-40). Capped at `horizon`.
double quadrature_limit(double a, double w, double horizon);

struct Expectation {
  double value = 0.0;
  double d_a = 0.0;
  double d_w = 0.0;
  double t_max = 0.0;
  /// Total mass of the density is below 1 - 1e-13 (only possible for w < 0);
  /// `value` is then the expectation conditional on an event occurring.
  bool defective = false;
  /// Probability mass past the horizon cap, placed at the horizon.
  double censored_mass = 0.0;
};

/// Expected time to the next event by composite Simpson quadrature with
/// kSimpsonPanels panels on [0, T_max], with partial derivatives obtained by
/// differentiating under the integral on the same grid.
Expectation expected_time(double a, double w, double horizon = 1e3);

/// Simpson quadrature of the density over [0, T_max] (no tail added).
double density_mass(double a, double w, double horizon = 1e3);

enum class TimeLossMode { kGaussianNll, kTppNll };

/// Gaussian negative log-likelihood of tau_true around tau_hat:
/// (tau - tau_hat)^2 / (2 sigma^2) + log(sigma sqrt(2 pi)).
double gaussian_time_loss(double tau_true, double tau_hat, double sigma);

/// -log f(tau_true).
double tpp_time_loss(double a, double w, double tau_true);

}  // namespace ntom::tpp
