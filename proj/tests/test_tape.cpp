#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "dvi/gradcheck.hpp"
#include "dvi/tape.hpp"

namespace {

using dvi::grad::Blocks;
using dvi::grad::Mat;
using dvi::grad::Op;
using dvi::grad::Tape;
using dvi::grad::Var;
using dvi::grad::VarMap;

Mat random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& gen, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(gen);
  return m;
}

// Reduces an arbitrary-shaped node to a scalar with fixed random weights so every output entry matters.
Var weighted_sum(Tape& t, Var v, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  const Mat& val = t.value(v);
  return dvi::grad::sum(v * t.constant(random_mat(val.rows(), val.cols(), gen, 0.5, 1.5)));
}

void expect_gradients_match(const dvi::grad::TapeLoss& f, const Blocks& p, double tol = 1e-6) {
  const auto res = dvi::grad::finite_diff_check(f, p, 1e-6, 1000);
  EXPECT_LE(res.max_rel_error, tol) << "worst " << res.worst_block << "[" << res.worst_index << "]";
}

TEST(Tape, AddGivesUnitAdjoints) {
  Tape t;
  Var a = t.param("a", Mat::Constant(1, 1, 2.0));
  Var b = t.param("b", Mat::Constant(1, 1, -1.0));
  auto g = t.backward(a + b);
  EXPECT_EQ(g["a"](0, 0), 1.0);
  EXPECT_EQ(g["b"](0, 0), 1.0);
}

TEST(Tape, SquareAtThree) {
  Tape t;
  Var x = t.param("x", Mat::Constant(1, 1, 3.0));
  EXPECT_EQ(t.backward(dvi::grad::square(x))["x"](0, 0), 6.0);
}

TEST(Tape, ArcsinDerivative) {
  Tape t;
  Var x = t.param("x", Mat::Constant(1, 1, 0.5));
  EXPECT_NEAR(t.backward(dvi::grad::arcsin(x))["x"](0, 0), 1.1547005383792517, 1e-15);
}

TEST(Tape, CdfDerivativeIsPdf) {
  for (double x0 : {-2.0, 0.0, 0.7}) {
    Tape t;
    Var x = t.param("x", Mat::Constant(1, 1, x0));
    EXPECT_DOUBLE_EQ(t.backward(dvi::grad::norm_cdf(x))["x"](0, 0), dvi::std_normal_pdf(x0));
  }
}

TEST(Tape, ClampGradientConvention) {
  Tape t;
  Mat v(1, 3);
  v << -2.0, 0.5, 3.0;
  Var x = t.param("x", v);
  auto g = t.backward(dvi::grad::sum(dvi::grad::clamp(x, 0.0, 1.0)))["x"];
  EXPECT_EQ(g(0, 0), 0.0);
  EXPECT_EQ(g(0, 1), 1.0);
  EXPECT_EQ(g(0, 2), 0.0);
}

TEST(Tape, NonScalarRootRejected) {
  Tape t;
  Var x = t.param("x", Mat::Ones(2, 2));
  EXPECT_THROW(t.backward(x), dvi::StructuralError);
}

TEST(Tape, SecondBackwardRejected) {
  Tape t;
  Var x = t.param("x", Mat::Ones(1, 1));
  Var y = dvi::grad::square(x);
  t.backward(y);
  EXPECT_THROW(t.backward(y), dvi::StructuralError);
}

TEST(Tape, UnknownPrimitiveRejected) {
  Tape t;
  Var x = t.param("x", Mat::Ones(1, 1));
  EXPECT_THROW(t.record(Op::kCount, {x}), dvi::StructuralError);
  EXPECT_THROW(t.record(Op::kLeaf, {x}), dvi::StructuralError);
}

TEST(Tape, ShapeMismatchRejected) {
  Tape t;
  Var a = t.param("a", Mat::Ones(2, 3));
  Var b = t.param("b", Mat::Ones(3, 2));
  EXPECT_THROW(a + b, dvi::StructuralError);
  EXPECT_THROW(dvi::grad::matmul(a, a), dvi::StructuralError);
  EXPECT_THROW(t.param("a", Mat::Ones(1, 1)), dvi::StructuralError);
}

TEST(Tape, UnusedParameterGetsZeroGradient) {
  Tape t;
  Var x = t.param("x", Mat::Ones(2, 2));
  t.param("unused", Mat::Ones(3, 1));
  auto g = t.backward(dvi::grad::sum(x));
  EXPECT_TRUE(g["unused"].isZero());
  EXPECT_EQ(g["unused"].rows(), 3);
}

struct UnaryCase {
  const char* name;
  std::function<Var(Var)> f;
  double lo, hi;
};

TEST(Tape, UnaryVjpsMatchFiniteDifferences) {
  using namespace dvi::grad;
  const std::vector<UnaryCase> cases{
      {"exp", [](Var x) { return exp(x); }, -2.0, 2.0},
      {"log", [](Var x) { return log(x); }, 0.2, 3.0},
      {"sqrt", [](Var x) { return sqrt(x); }, 0.2, 3.0},
      {"square", [](Var x) { return square(x); }, -2.0, 2.0},
      {"arcsin", [](Var x) { return arcsin(x); }, -0.9, 0.9},
      {"pdf", [](Var x) { return norm_pdf(x); }, -3.0, 3.0},
      {"cdf", [](Var x) { return norm_cdf(x); }, -3.0, 3.0},
      {"soft_relu", [](Var x) { return soft_relu(x); }, -3.0, 3.0},
      {"neg", [](Var x) { return -x; }, -3.0, 3.0},
      {"clamp", [](Var x) { return clamp(x, -0.5, 0.5); }, -2.0, 2.0},
      {"logsumexp", [](Var x) { return log_sum_exp_rows(x); }, -3.0, 3.0},
      {"expand_row", [](Var x) { return expand_row(x); }, -1.0, 1.0},
      {"expand_col", [](Var x) { return expand_col(x); }, -1.0, 1.0},
      {"diag_embed", [](Var x) { return diag_embed(x); }, -1.0, 1.0},
      {"select_cols", [](Var x) { return select_cols(x, {2, 0, 2}); }, -1.0, 1.0},
  };
  std::mt19937_64 gen(3);
  for (const auto& c : cases) {
    SCOPED_TRACE(c.name);
    Blocks p{{"x", random_mat(3, 4, gen, c.lo, c.hi)}};
    if (std::string(c.name) == "clamp") {
      // keep away from the kinks
      for (Eigen::Index i = 0; i < p["x"].size(); ++i)
        if (std::abs(std::abs(p["x"].data()[i]) - 0.5) < 0.05) p["x"].data()[i] = 0.1;
    }
    expect_gradients_match([&](Tape& t, const VarMap& v) { return weighted_sum(t, c.f(v.at("x")), 17); }, p);
  }
}

TEST(Tape, BinaryVjpsWithBroadcasting) {
  using namespace dvi::grad;
  std::mt19937_64 gen(5);
  const std::vector<std::pair<Eigen::Index, Eigen::Index>> shapes{{3, 4}, {1, 4}, {3, 1}, {1, 1}};
  for (auto [r, c] : shapes) {
    Blocks p{{"a", random_mat(3, 4, gen, 0.5, 2.0)}, {"b", random_mat(r, c, gen, 0.5, 2.0)}};
    auto run = [&](std::function<Var(Var, Var)> f) {
      expect_gradients_match([&](Tape& t, const VarMap& v) { return weighted_sum(t, f(v.at("a"), v.at("b")), 23); }, p);
      expect_gradients_match([&](Tape& t, const VarMap& v) { return weighted_sum(t, f(v.at("b"), v.at("a")), 29); }, p);
    };
    run([](Var a, Var b) { return a + b; });
    run([](Var a, Var b) { return a - b; });
    run([](Var a, Var b) { return a * b; });
    run([](Var a, Var b) { return a / b; });
  }
}

TEST(Tape, MatmulAndBatchedLayoutVjps) {
  using namespace dvi::grad;
  std::mt19937_64 gen(9);
  Blocks p{{"x", random_mat(2, 3, gen, -1.0, 1.0)},
           {"w", random_mat(3, 4, gen, -1.0, 1.0)},
           {"c", random_mat(2, 9, gen, -1.0, 1.0)}};
  expect_gradients_match([&](Tape& t, const VarMap& v) { return weighted_sum(t, matmul(v.at("x"), v.at("w")), 1); }, p);
  expect_gradients_match([&](Tape& t, const VarMap& v) { return weighted_sum(t, congruence(v.at("c"), v.at("w")), 2); }, p);
  expect_gradients_match([&](Tape& t, const VarMap& v) { return weighted_sum(t, batched_matmul(v.at("c"), v.at("w")), 3); }, p);
  expect_gradients_match([&](Tape& t, const VarMap& v) { return weighted_sum(t, batched_transpose(v.at("c")), 4); }, p);
  expect_gradients_match([&](Tape& t, const VarMap& v) { return weighted_sum(t, diag_part(v.at("c")), 5); }, p);
  expect_gradients_match([&](Tape& t, const VarMap& v) { return sum(v.at("c")); }, p);
}

TEST(Tape, CongruenceValue) {
  Tape t;
  Mat c(1, 4);
  c << 2.0, 0.5, 0.5, 1.0;
  Mat w(2, 1);
  w << 1.0, 3.0;
  // w^T C w = 2 + 2 * 3 * 0.5 + 9 = 14
  EXPECT_DOUBLE_EQ(t.value(dvi::grad::congruence(t.constant(c), t.constant(w)))(0, 0), 14.0);
}

TEST(Tape, LinearFunctionGradCheckIsExact) {
  // dyadic inputs and step keep every floating-point operation exact
  Mat x(4, 5), w(4, 5);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    x.data()[i] = static_cast<double>(i % 7 - 3) / 8.0;
    w.data()[i] = static_cast<double>(i % 5 - 2) / 4.0 + 0.125;
  }
  Blocks p{{"x", x}};
  const auto res = dvi::grad::finite_diff_check(
      [&](Tape& t, const VarMap& v) { return dvi::grad::sum(v.at("x") * t.constant(w)) + 3.0; }, p, 1.0 / 1024.0);
  EXPECT_LE(res.max_rel_error, 1e-10);
  EXPECT_EQ(res.coordinates, 20);
}

TEST(Tape, GradCheckSubsamplesLargeBlocks) {
  std::mt19937_64 gen(2);
  Blocks p{{"x", random_mat(30, 30, gen, -1.0, 1.0)}};
  const auto res = dvi::grad::finite_diff_check(
      [](Tape& t, const VarMap& v) { return dvi::grad::sum(dvi::grad::square(v.at("x"))); }, p);
  EXPECT_EQ(res.coordinates, 200);
  EXPECT_LE(res.max_rel_error, 1e-6);
}

TEST(Tape, RepeatedRunsAreBitwiseIdentical) {
  std::mt19937_64 gen(4);
  const Mat x = random_mat(5, 6, gen, -1.0, 1.0);
  auto run = [&]() {
    Tape t;
    Var v = t.param("x", x);
    return t.backward(dvi::grad::sum(dvi::grad::soft_relu(dvi::grad::matmul(v, dvi::grad::exp(t.constant(x.transpose()))))))["x"];
  };
  const Mat a = run(), b = run();
  EXPECT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())));
}

}  // namespace
