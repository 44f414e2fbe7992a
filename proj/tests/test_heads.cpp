#include <gtest/gtest.h>

#include <cmath>

#include "dvi/heads.hpp"
#include "dvi/rng.hpp"

namespace {

using namespace dvi;

TEST(RegressionEll, ModeWithZeroCovariance) {
  EXPECT_NEAR(regression_ell({0.7, 0.0, 0.0, 0.0, 0.0}, 0.7), -0.91893853320467274, 1e-15);
}

TEST(RegressionEll, UnitPredictiveVariance) {
  EXPECT_NEAR(regression_ell({0.0, 0.0, 1.0, 0.0, 0.0}, 0.0), -1.4189385332046727, 1e-15);
}

TEST(RegressionEll, CorrelatedExample) {
  EXPECT_NEAR(regression_ell({1.0, 0.0, 1.0, 2.0, 1.0}, 0.0), -0.5 * (kLog2Pi + std::exp(1.0)), 1e-14);
  EXPECT_NEAR(regression_ell({1.0, 0.0, 1.0, 2.0, 1.0}, 0.0), -2.2780794474341954, 1e-12);
}

TEST(RegressionEll, AgreesWithSampling) {
  const RegressionOutputMoments mom{0.4, -0.6, 0.3, 0.5, 0.2};
  const double y = 1.1;
  const double l11 = std::sqrt(mom.s_mm);
  const double l21 = mom.s_ml / l11;
  const double l22 = std::sqrt(mom.s_ll - l21 * l21);
  KeyedStream rs(3, 0, 0, 0);
  const long n = 2000000;
  double s1 = 0, s2 = 0;
  for (long i = 0; i < n; ++i) {
    const double z1 = rs.normal(), z2 = rs.normal();
    const double m = mom.m_mean + l11 * z1;
    const double l = mom.l_mean + l21 * z1 + l22 * z2;
    const double v = -0.5 * (kLog2Pi + l + (y - m) * (y - m) * std::exp(-l));
    s1 += v;
    s2 += v * v;
  }
  const double mean = s1 / n, se = std::sqrt((s2 / n - mean * mean) / n);
  EXPECT_NEAR(regression_ell(mom, y), mean, 4 * se);
}

TEST(RegressionEll, Homoscedastic) {
  EXPECT_NEAR(regression_ell_homoscedastic(0.3, 0.0, 0.0, 0.3), -0.5 * kLog2Pi, 1e-15);
  EXPECT_NEAR(regression_ell_homoscedastic(0.0, 1.0, 0.0, 0.0), -1.4189385332046727, 1e-15);
  for (double m : {-1.0, 0.5})
    for (double smm : {0.0, 0.7})
      for (double lv : {-2.0, 0.3})
        EXPECT_EQ(regression_ell_homoscedastic(m, smm, lv, 0.2), regression_ell({m, lv, smm, 0.0, 0.0}, 0.2));
}

TEST(PredictiveRegression, Examples) {
  auto [m, v] = predictive_regression({2.0, 0.0, 0.5, 0.0, 0.0});
  EXPECT_EQ(m, 2.0);
  EXPECT_NEAR(v, 1.5, 1e-15);
  EXPECT_NEAR(predictive_regression({0.0, 0.0, 0.0, 2.0, 0.0}).second, std::exp(1.0), 1e-15);
}

TEST(PredictiveRegression, AgreesWithSampling) {
  const RegressionOutputMoments mom{-0.2, 0.1, 0.4, 0.3, -0.1};
  const double l11 = std::sqrt(mom.s_mm), l21 = mom.s_ml / l11, l22 = std::sqrt(mom.s_ll - l21 * l21);
  KeyedStream rs(4, 0, 0, 0);
  const long n = 2000000;
  double s1 = 0, s2 = 0;
  for (long i = 0; i < n; ++i) {
    const double z1 = rs.normal(), z2 = rs.normal();
    const double m = mom.m_mean + l11 * z1;
    const double l = mom.l_mean + l21 * z1 + l22 * z2;
    const double y = m + std::exp(0.5 * l) * rs.normal();
    s1 += y;
    s2 += y * y;
  }
  const double mean = s1 / n, var = s2 / n - mean * mean;
  const auto [pm, pv] = predictive_regression(mom);
  EXPECT_NEAR(pm, mean, 3 * std::sqrt(var / n));
  EXPECT_NEAR(pv, var, 3 * var * std::sqrt(2.0 / n) * 2);  // kurtosis of the mixture roughly doubles the se
}

TEST(GaussianLogDensity, Standard) {
  EXPECT_NEAR(gaussian_log_density(0.0, 0.0, 1.0), -0.5 * kLog2Pi, 1e-15);
  EXPECT_NEAR(gaussian_log_density(3.0, 1.0, 4.0), -0.5 * (kLog2Pi + std::log(4.0) + 1.0), 1e-15);
}

TEST(ClassificationEll, ReducesToLogSoftmax) {
  ClassOutputMoments mom{Vector(2), Matrix::Zero(2, 2)};
  mom.logit_mean << 1.0, 0.0;
  EXPECT_NEAR(classification_ell(mom, 0), -0.31326168751822286, 1e-15);
}

TEST(ClassificationEll, IsotropicCovariance) {
  ClassOutputMoments mom{Vector(2), 0.01 * Matrix::Identity(2, 2)};
  mom.logit_mean << 1.0, 0.0;
  // 40-digit reference
  EXPECT_NEAR(classification_ell(mom, 0), -0.3152278068506376, 1e-15);
}

TEST(ClassificationEll, UniformLogits) {
  ClassOutputMoments mom{Vector::Zero(4), Matrix::Zero(4, 4)};
  EXPECT_NEAR(classification_ell(mom, 2), -std::log(4.0), 1e-15);
  EXPECT_THROW(classification_ell(mom, 4), std::domain_error);
  EXPECT_THROW(classification_ell(mom, -1), std::domain_error);
}

TEST(ClassificationEll, SecondOrderAgainstSampling) {
  ClassOutputMoments mom{Vector(3), Matrix(3, 3)};
  mom.logit_mean << 0.5, -0.3, 0.1;
  mom.logit_cov << 0.02, 0.005, 0.0, 0.005, 0.03, -0.004, 0.0, -0.004, 0.01;
  const Eigen::LLT<Matrix> llt(mom.logit_cov);
  const Matrix l = llt.matrixL();
  KeyedStream rs(5, 0, 0, 0);
  const long n = 400000;
  double acc = 0;
  Vector pacc = Vector::Zero(3);
  for (long i = 0; i < n; ++i) {
    Vector z(3);
    for (int k = 0; k < 3; ++k) z(k) = rs.normal();
    const Vector a = mom.logit_mean + l * z;
    const double lse = std::log(a.array().exp().sum());
    acc += a(1) - lse;
    pacc += (a.array() - lse).exp().matrix();
  }
  EXPECT_NEAR(classification_ell(mom, 1), acc / n, 2e-4);
  EXPECT_LT((classification_predictive(mom) - pacc / n).cwiseAbs().maxCoeff(), 2e-4);
}

TEST(ClassificationPredictive, ZeroCovarianceIsSoftmax) {
  ClassOutputMoments mom{Vector(3), Matrix::Zero(3, 3)};
  mom.logit_mean << 2.0, -1.0, 0.5;
  const Vector p = classification_predictive(mom);
  const Vector e = mom.logit_mean.array().exp();
  EXPECT_LT((p - e / e.sum()).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(ClassificationPredictive, SymmetricIsUniform) {
  ClassOutputMoments mom{Vector::Constant(3, 0.7), 0.5 * Matrix::Identity(3, 3)};
  const Vector p = classification_predictive(mom);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(p(k), 1.0 / 3.0, 1e-15);
}

TEST(ClassificationPredictive, LargeCovarianceStaysOnSimplex) {
  ClassOutputMoments mom{Vector(3), 40.0 * Matrix::Identity(3, 3)};
  mom.logit_mean << 9.0, 0.0, -9.0;
  const Vector p = classification_predictive(mom);
  EXPECT_NEAR(p.sum(), 1.0, 1e-14);
  EXPECT_GT(p.minCoeff(), 0.0);
}

}  // namespace
