#pragma once

// Scalar special functions shared by the moment, likelihood and oracle code.
// Everything here is double precision and stateless.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>

namespace dvi {

inline constexpr double kInvSqrt2Pi = 0.39894228040143267794;  // 1/sqrt(2 pi)
inline constexpr double kLog2Pi = 1.83787706640934548356;      // log(2 pi)

inline double std_normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

// Phi(x) through erfc so that the lower tail keeps its relative accuracy.
inline double std_normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

namespace detail {

// 1 - t * Mills(t) for large t, via the asymptotic series
// 1/t^2 - 3/t^4 + 15/t^6 - ... truncated at its smallest term.
inline double soft_relu_tail_factor(double t) {
  const double inv_t2 = 1.0 / (t * t);
  double term = inv_t2;
  double sum = 0.0;
  double prev_abs = std::abs(term) * 2.0;
  for (int k = 1; k < 60; ++k) {
    if (std::abs(term) >= prev_abs) break;
    sum += term;
    prev_abs = std::abs(term);
    term *= -static_cast<double>(2 * k + 1) * inv_t2;
  }
  return sum;
}

}  // namespace detail

// SR(x) = phi(x) + x Phi(x), the expected ReLU of a unit Gaussian centred at x.
inline double soft_relu(double x) {
  if (x < -10.0) {
    // direct evaluation cancels catastrophically this far out
    return std_normal_pdf(x) * detail::soft_relu_tail_factor(-x);
  }
  return std_normal_pdf(x) + x * std_normal_cdf(x);
}

namespace detail {

// Tails D_k = t + (k+1)/D_{k+1} of Laplace's continued fraction for the Mills
// ratio, evaluated backward; returns D_0, D_1, D_2. Needs t >= 2.
inline std::array<double, 3> mills_tails(double t) {
  const int n = 40 + static_cast<int>(400.0 / (t * t));
  double d = t;
  for (int k = n; k >= 3; --k) d = t + k / d;
  const double d2 = d;
  const double d1 = t + 2.0 / d2;
  return {t + 1.0 / d1, d1, d2};
}

}  // namespace detail

// Mills ratio Phi(-t) / phi(t), t >= 2.
inline double mills_ratio(double t) {
  if (t < 2.0) throw std::domain_error("mills_ratio: continued fraction needs t >= 2");
  return 1.0 / detail::mills_tails(t)[0];
}

// E[max(z + X, 0)^2] for X ~ N(0, 1).
inline double relu_sq_unit(double z) {
  if (z > -2.0) return (1.0 + z * z) * std_normal_cdf(z) + z * std_normal_pdf(z);
  // (1 + t^2) R - t collapses to 2 / (D0 D1 D2), so nothing cancels
  const double t = -z;
  const auto d = detail::mills_tails(t);
  return std_normal_pdf(t) * 2.0 / (d[0] * d[1] * d[2]);
}

inline double log_sum_exp(std::span<const double> v) {
  if (v.empty()) throw std::domain_error("log_sum_exp: empty input");
  const double m = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - m);
  return m + std::log(acc);
}

}  // namespace dvi
