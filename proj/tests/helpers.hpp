#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "ntom/autodiff.hpp"

namespace ntom::test {

inline ad::Param random_param(std::string name, std::size_t rows, std::size_t cols,
                              std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  ad::Matrix m(rows, cols);
  for (double& v : m.values()) v = u(rng);
  return ad::Param(std::move(name), std::move(m));
}

inline ad::Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng,
                                double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  ad::Matrix m(rows, cols);
  for (double& v : m.values()) v = u(rng);
  return m;
}

namespace detail {
inline double simpson(const std::function<double(double)>& f, double a, double b, double fa,
                      double fm, double fb, double whole, double tol, int depth) {
  const double m = 0.5 * (a + b), lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
  const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
  if (depth <= 0 || std::abs(left + right - whole) <= 15.0 * tol)
    return left + right + (left + right - whole) / 15.0;
  return simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}
}  // namespace detail

// Adaptive Simpson quadrature, independent of the library's fixed grid.
inline double integrate(const std::function<double(double)>& f, double a, double b,
                        double rel = 1e-12) {
  const double fa = f(a), fb = f(b), fm = f(0.5 * (a + b));
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return detail::simpson(f, a, b, fa, fm, fb, whole, rel * std::max(1.0, std::abs(whole)), 30);
}

// Next event time of intensity exp(a + w t) by inverting Lambda(tau) = e, e ~ Exp(1).
inline double sample_time(double a, double w, double e) {
  if (w == 0.0) return e * std::exp(-a);
  return std::log1p(w * e * std::exp(-a)) / w;
}

}  // namespace ntom::test
