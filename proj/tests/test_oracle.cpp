#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "dvi/oracle.hpp"

namespace {

using namespace dvi;
using oracle::exact_I;

TEST(ExactI, OriginIdentities) {
  for (auto kind : {Nonlinearity::kReLU, Nonlinearity::kHeaviside})
    for (double rho : {-0.99, -0.9, -0.5, 0.0, 0.3, 0.5, 0.9, 0.99})
      EXPECT_NEAR(exact_I(0, 0, rho, kind), oracle::origin_identity(rho, kind), 1e-12) << rho;
  EXPECT_NEAR(oracle::origin_identity(0.5, Nonlinearity::kHeaviside), 1.0 / 3.0, 1e-15);
  // 40-digit reference
  EXPECT_NEAR(exact_I(0, 0, 0.5, Nonlinearity::kReLU), 0.30449889052211468, 1e-13);
}

TEST(ExactI, IndependentCaseFactorizes) {
  for (double m1 : {-3.0, -0.4, 1.0, 5.0})
    for (double m2 : {-2.0, 0.0, 2.5}) {
      const double r1 = std::exp(-0.5 * m1 * m1) / std::sqrt(2 * std::numbers::pi) + m1 * 0.5 * std::erfc(-m1 / std::sqrt(2.0));
      const double r2 = std::exp(-0.5 * m2 * m2) / std::sqrt(2 * std::numbers::pi) + m2 * 0.5 * std::erfc(-m2 / std::sqrt(2.0));
      EXPECT_NEAR(exact_I(m1, m2, 0.0, Nonlinearity::kReLU), r1 * r2, 1e-12 * (1 + r1 * r2));
      const double c1 = 0.5 * std::erfc(-m1 / std::sqrt(2.0)), c2 = 0.5 * std::erfc(-m2 / std::sqrt(2.0));
      EXPECT_NEAR(exact_I(m1, m2, 0.0, Nonlinearity::kHeaviside), c1 * c2, 1e-13);
    }
}

TEST(ExactI, SelfConvergence) {
  oracle::QuadratureSpec tight;
  tight.tolerance = 1e-14;
  tight.max_depth = 20;
  tight.half_width = 18.0;
  for (auto kind : {Nonlinearity::kReLU, Nonlinearity::kHeaviside})
    for (double rho : {-0.95, -0.5, 0.2, 0.8, 0.99})
      for (double m1 : {-4.0, 0.5, 3.0})
        for (double m2 : {-1.0, 2.0}) {
          const double a = exact_I(m1, m2, rho, kind);
          const double b = exact_I(m1, m2, rho, kind, tight);
          EXPECT_NEAR(a, b, 1e-11 * (1 + std::abs(b)));
        }
}

TEST(ExactI, SwapSymmetry) {
  for (auto kind : {Nonlinearity::kReLU, Nonlinearity::kHeaviside})
    for (double rho : {-0.7, 0.4, 0.9})
      EXPECT_NEAR(exact_I(1.3, -0.6, rho, kind), exact_I(-0.6, 1.3, rho, kind), 1e-12);
}

TEST(ExactI, PerfectCorrelationLimitIsSecondMoment) {
  const double rho = 0.999999;
  EXPECT_NEAR(exact_I(0.4, 0.4, rho, Nonlinearity::kReLU), oracle::quad_nonlin_moment(0.4, 1.0, Nonlinearity::kReLU, 2),
              1e-4);
  EXPECT_NEAR(exact_I(0.4, 0.4, rho, Nonlinearity::kHeaviside),
              oracle::quad_nonlin_moment(0.4, 1.0, Nonlinearity::kHeaviside, 2), 1e-3);
}

TEST(QuadMoment, StandardValues) {
  EXPECT_NEAR(oracle::quad_nonlin_moment(0, 1, Nonlinearity::kReLU, 1), 1 / std::sqrt(2 * std::numbers::pi), 1e-14);
  EXPECT_NEAR(oracle::quad_nonlin_moment(0, 1, Nonlinearity::kReLU, 2), 0.5, 1e-14);
  EXPECT_NEAR(oracle::quad_nonlin_moment(0, 4, Nonlinearity::kHeaviside, 1), 0.5, 1e-14);
  EXPECT_NEAR(oracle::quad_nonlin_moment(0.7, 2.0, Nonlinearity::kReLU, 1), 0.98192557481911346, 1e-13);
}

TEST(ResidualMap, CsvLayout) {
  const auto rows = oracle::residual_map(Nonlinearity::kHeaviside, {-1, 0, 1}, {0.0, 0.5});
  ASSERT_EQ(rows.size(), 18u);
  for (const auto& r : rows)
    if (r.rho == 0.0) EXPECT_LE(r.abs_err, 1e-12);
  std::ostringstream os;
  oracle::write_residual_csv(os, rows);
  std::string header;
  std::istringstream is(os.str());
  std::getline(is, header);
  EXPECT_EQ(header, "mu1,mu2,rho,exact,approx,abs_err");
  int lines = 0;
  for (std::string l; std::getline(is, l);) ++lines;
  EXPECT_EQ(lines, 18);
}

TEST(McForward, LinearNetworkMoments) {
  NetworkSpec spec;
  spec.layer_sizes = {2, 2};
  spec.head = Head::kHeteroRegression;
  ModelParams p = init_params(spec, 1);
  p.layers[0].weight_logvar.setConstant(std::log(0.3));
  Vector x(2);
  x << 1.0, -2.0;
  const auto mc = oracle::mc_forward(spec, p, x, 40000, 2);
  const auto& lp = p.layers[0];
  const Vector mean = lp.weight_mean.transpose() * x + lp.bias_mean;
  const Vector var = lp.weight_var().transpose() * x.cwiseProduct(x) + lp.bias_var();
  for (int j = 0; j < 2; ++j) {
    EXPECT_NEAR(mc.mean(j), mean(j), 4 * mc.mean_se(j));
    EXPECT_NEAR(mc.std(j), std::sqrt(var(j)), 4 * mc.std_se(j));
    EXPECT_NEAR(mc.std_se(j), std::sqrt(var(j)) / std::sqrt(2.0 * 40000), 0.1 * mc.std_se(j));
    long total = 0;
    for (long c : mc.histograms[static_cast<std::size_t>(j)].counts) total += c;
    EXPECT_EQ(total, 40000);
  }
  EXPECT_THROW(oracle::mc_forward(spec, p, x, 50), StructuralError);
}

TEST(McForward, DeterministicGivenSeed) {
  NetworkSpec spec;
  spec.layer_sizes = {1, 8, 2};
  const ModelParams p = init_params(spec, 3);
  const Vector x = Vector::Constant(1, 0.25);
  const auto a = oracle::mc_forward(spec, p, x, 500, 9), b = oracle::mc_forward(spec, p, x, 500, 9);
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.cov, b.cov);
}

TEST(CompareToMc, ReportsWorstComponent) {
  GaussianActivation dvi;
  dvi.mean = Vector(2);
  dvi.mean << 0.0, 1.0;
  dvi.cov = Matrix::Identity(2, 2);
  oracle::MCMoments mc;
  mc.mean = Vector::Zero(2);
  mc.mean_se = Vector::Constant(2, 0.1);
  mc.std = Vector::Ones(2);
  mc.std_se = Vector::Constant(2, 0.1);
  const auto rep = oracle::compare_to_mc(dvi, mc);
  EXPECT_NEAR(rep.worst_z, 10.0, 1e-12);
  EXPECT_EQ(rep.worst, "mean[1]");
}

}  // namespace
