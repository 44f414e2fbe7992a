#pragma once

// Brute-force references: adaptive quadrature for the pairwise cross moment
// and weight-sampling Monte Carlo for whole networks.
//
// The cross moment E[f(e1) f(e2)] over a unit-variance bivariate normal with
// correlation rho is reduced to one dimension by conditioning on e1:
//   e2 | e1 ~ N(mu2 + rho (e1 - mu1), 1 - rho^2),
// whose inner expectation is closed form for both nonlinearities. The outer
// integral runs over e1 > 0 only and is split at the point where the inner
// expectation switches on, which keeps adaptive Gauss-Kronrod accurate even
// when rho is close to +-1.

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <vector>

#include "dvi/gaussmoments.hpp"
#include "dvi/network.hpp"
#include "dvi/rng.hpp"

namespace dvi::oracle {

struct QuadratureSpec {
  double tolerance = 1e-12;
  unsigned max_depth = 15;
  double half_width = 14.0;  // integration range in standard deviations
};

namespace detail {

// Kept separate from specials.hpp on purpose: the oracle must not share code
// with the implementation it checks.
inline double pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
inline double cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
inline double sr(double x) { return pdf(x) + x * cdf(x); }

template <class F>
double integrate(F f, double a, double b, const QuadratureSpec& q) {
  if (!(b > a)) return 0.0;
  return boost::math::quadrature::gauss_kronrod<double, 61>::integrate(f, a, b, q.max_depth, q.tolerance);
}

}  // namespace detail

inline double exact_I(double mu1, double mu2, double rho, Nonlinearity kind, const QuadratureSpec& q = {}) {
  const double rb = std::sqrt(1.0 - rho * rho);
  auto inner = [&](double e1) {
    const double m = mu2 + rho * (e1 - mu1);
    return kind == Nonlinearity::kHeaviside ? detail::cdf(m / rb) : rb * detail::sr(m / rb);
  };
  auto outer = [&](double e1) {
    const double f1 = kind == Nonlinearity::kHeaviside ? 1.0 : e1;
    return f1 * detail::pdf(e1 - mu1) * inner(e1);
  };
  const double lo = std::max(0.0, mu1 - q.half_width);
  const double hi = std::max(0.0, mu1) + q.half_width;
  std::vector<double> cuts{lo};
  if (rho != 0.0) {
    const double switch_point = mu1 - mu2 / rho;
    if (switch_point > lo && switch_point < hi) cuts.push_back(switch_point);
  }
  cuts.push_back(hi);
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) total += detail::integrate(outer, cuts[i], cuts[i + 1], q);
  return total;
}

// Closed-form values at the origin, used to cross-check the quadrature.
inline double origin_identity(double rho, Nonlinearity kind) {
  const double pi = std::numbers::pi;
  if (kind == Nonlinearity::kHeaviside) return 0.25 + std::asin(rho) / (2.0 * pi);
  return (std::sqrt(1.0 - rho * rho) + rho * (pi / 2.0 + std::asin(rho))) / (2.0 * pi);
}

// E[f(a)] and E[f(a)^2] for a ~ N(mu, sigma2) by direct one-dimensional quadrature.
inline double quad_nonlin_moment(double mu, double sigma2, Nonlinearity kind, int power, const QuadratureSpec& q = {}) {
  const double sd = std::sqrt(sigma2);
  auto f = [&](double a) {
    const double h = kind == Nonlinearity::kReLU ? a : 1.0;
    return std::pow(h, power) * detail::pdf((a - mu) / sd) / sd;
  };
  const double lo = std::max(0.0, mu - q.half_width * sd);
  const double hi = std::max(0.0, mu) + q.half_width * sd;
  return detail::integrate(f, lo, hi, q);
}

struct ResidualRow {
  double mu1, mu2, rho, exact, approx, abs_err;
};

inline std::vector<ResidualRow> residual_map(Nonlinearity kind, const std::vector<double>& mu_grid,
                                             const std::vector<double>& rho_list, const QuadratureSpec& q = {}) {
  std::vector<ResidualRow> rows;
  for (double rho : rho_list)
    for (double m1 : mu_grid)
      for (double m2 : mu_grid) {
        BivariateStats b;
        b.mu1 = m1;
        b.mu2 = m2;
        b.rho = rho;
        b.rho_bar = std::sqrt(1.0 - rho * rho);
        const double ex = exact_I(m1, m2, rho, kind, q);
        const double ap = cross_moment_dimensionless(b, kind);
        rows.push_back({m1, m2, rho, ex, ap, std::abs(ex - ap)});
      }
  return rows;
}

inline void write_residual_csv(std::ostream& os, const std::vector<ResidualRow>& rows) {
  os << "mu1,mu2,rho,exact,approx,abs_err\n";
  os.precision(17);
  for (const auto& r : rows) os << r.mu1 << ',' << r.mu2 << ',' << r.rho << ',' << r.exact << ',' << r.approx << ',' << r.abs_err << '\n';
}

inline std::vector<double> default_mu_grid() {
  std::vector<double> g;
  for (int i = -6; i <= 6; ++i) g.push_back(i);
  return g;
}

inline std::vector<double> default_rho_list() { return {-0.9, -0.7, -0.5, -0.3, -0.1, 0.1, 0.3, 0.5, 0.7, 0.9}; }

struct Histogram {
  double lo = 0.0, hi = 0.0;
  std::vector<long> counts;
};

struct MCMoments {
  Vector mean;
  Matrix cov;
  Vector mean_se;  // standard error of each mean
  Vector std;
  Vector std_se;   // delta-method standard error of each standard deviation
  std::vector<Histogram> histograms;
  long samples = 0;
};

inline std::vector<SampledLayer> sample_layers(const ModelParams& p, KeyedStream& rs) {
  std::vector<SampledLayer> out;
  for (const LayerParams& lp : p.layers) {
    SampledLayer sl;
    sl.weight = lp.weight_mean;
    for (Eigen::Index i = 0; i < sl.weight.size(); ++i)
      sl.weight.data()[i] += std::exp(0.5 * lp.weight_logvar.data()[i]) * rs.normal();
    sl.bias = lp.bias_mean;
    for (Eigen::Index i = 0; i < sl.bias.size(); ++i) sl.bias(i) += std::exp(0.5 * lp.bias_logvar(i)) * rs.normal();
    out.push_back(std::move(sl));
  }
  return out;
}

// Output pre-activation statistics over weight draws from q at input x.
inline MCMoments mc_forward(const NetworkSpec& spec, const ModelParams& p, const Vector& x, long samples = 20000,
                            std::uint64_t seed = 0, int bins = 50) {
  if (samples < 100) throw StructuralError("mc_forward: need at least 100 samples");
  const Eigen::Index d = spec.layer_sizes.back();
  Matrix draws(samples, d);
  for (long s = 0; s < samples; ++s) {
    KeyedStream rs(seed, 0, static_cast<std::uint64_t>(s), 0);
    draws.row(s) = deterministic_forward(spec, sample_layers(p, rs), x).transpose();
  }
  MCMoments r;
  r.samples = samples;
  const double n = static_cast<double>(samples);
  r.mean = draws.colwise().mean().transpose();
  Matrix c = draws.rowwise() - r.mean.transpose();
  r.cov = (c.transpose() * c) / (n - 1.0);
  r.mean_se = (r.cov.diagonal() / n).cwiseSqrt();
  r.std = r.cov.diagonal().cwiseSqrt();
  r.std_se.resize(d);
  for (Eigen::Index j = 0; j < d; ++j) {
    const double v = r.cov(j, j);
    const double m4 = c.col(j).array().pow(4).mean();
    r.std_se(j) = v > 0.0 ? std::sqrt(std::max(m4 - v * v, 0.0) / (4.0 * v * n)) : 0.0;
    Histogram h;
    h.lo = draws.col(j).minCoeff();
    h.hi = draws.col(j).maxCoeff();
    h.counts.assign(static_cast<std::size_t>(bins), 0);
    const double w = (h.hi - h.lo) / bins;
    for (long s = 0; s < samples; ++s) {
      const int k = w > 0.0 ? std::min(bins - 1, static_cast<int>((draws(s, j) - h.lo) / w)) : 0;
      ++h.counts[static_cast<std::size_t>(k)];
    }
    r.histograms.push_back(std::move(h));
  }
  return r;
}

// Largest |dvi - mc| / combined standard error over output means and standard deviations.
struct AgreementReport {
  double worst_z = 0.0;
  std::string worst;
};

inline AgreementReport compare_to_mc(const GaussianActivation& dvi, const MCMoments& mc) {
  AgreementReport rep;
  for (Eigen::Index j = 0; j < dvi.dim(); ++j) {
    const double zm = std::abs(dvi.mean(j) - mc.mean(j)) / mc.mean_se(j);
    const double zs = std::abs(std::sqrt(dvi.cov(j, j)) - mc.std(j)) / mc.std_se(j);
    if (zm > rep.worst_z) {
      rep.worst_z = zm;
      rep.worst = "mean[" + std::to_string(j) + "]";
    }
    if (zs > rep.worst_z) {
      rep.worst_z = zs;
      rep.worst = "std[" + std::to_string(j) + "]";
    }
  }
  return rep;
}

}  // namespace dvi::oracle
