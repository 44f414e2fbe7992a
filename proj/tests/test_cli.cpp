#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dvi/cli.hpp"

namespace {

using namespace dvi;
namespace fs = std::filesystem;

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("dvi_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const Dataset toy = make_toy_heteroscedastic(80, 5);
    std::ofstream csv(dir_ / "toy.csv");
    csv << "x,y\n" << std::setprecision(17);
    for (Eigen::Index i = 0; i < toy.size(); ++i) csv << toy.features(i, 0) << ',' << toy.targets(i) << '\n';
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path config(const std::string& name, const std::string& body) {
    const fs::path p = dir_ / name;
    std::ofstream(p) << body;
    return p;
  }

  static std::vector<std::string> lines(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string l; std::getline(in, l);) out.push_back(l);
    return out;
  }

  fs::path dir_;
  std::ostringstream err_;
};

TEST_F(CliTest, TrainWritesMetricsAndModel) {
  const auto cfg = config("train.json", R"({"dataset": "toy.csv", "epochs": 3, "network": {"hidden": [8]},
                                            "output_dir": "out", "learning_rate": 0.01})");
  ASSERT_EQ(cli::cmd_train(cfg, err_), cli::kOk) << err_.str();
  const auto recs = lines(dir_ / "out" / "metrics.jsonl");
  ASSERT_EQ(recs.size(), 3u);
  for (const auto& r : recs) {
    const auto j = nlohmann::json::parse(r);
    for (const char* k : {"run_id", "config_hash", "epoch", "train_elbo", "test_ll", "wall_seconds"})
      EXPECT_TRUE(j.contains(k)) << k;
  }
  EXPECT_TRUE(fs::exists(dir_ / "out" / "model.json"));
}

TEST_F(CliTest, MissingDatasetIsConfigError) {
  EXPECT_EQ(cli::cmd_train(config("a.json", R"({"epochs": 1})"), err_), cli::kConfigError);
  EXPECT_NE(err_.str().find("dataset"), std::string::npos);
}

TEST_F(CliTest, UnknownKeyIsConfigError) {
  EXPECT_EQ(cli::cmd_train(config("b.json", R"({"dataset": "toy.csv", "epoch": 1})"), err_), cli::kConfigError);
  EXPECT_NE(err_.str().find("epoch"), std::string::npos);
  EXPECT_EQ(cli::cmd_train(config("c.json", "{not json"), err_), cli::kConfigError);
  EXPECT_EQ(cli::cmd_train(dir_ / "nope.json", err_), cli::kConfigError);
  EXPECT_EQ(cli::cmd_train(config("d.json", R"({"dataset": "toy.csv", "method": "XYZ"})"), err_), cli::kConfigError);
}

TEST_F(CliTest, HugeLearningRateIsNumericalFailure) {
  const auto cfg = config("lr.json", R"({"dataset": "toy.csv", "epochs": 20, "learning_rate": 1e6,
                                         "network": {"hidden": [8]}, "output_dir": "out"})");
  EXPECT_EQ(cli::cmd_train(cfg, err_), cli::kNumericalError);
  EXPECT_NE(err_.str().find("non-finite"), std::string::npos);
}

TEST_F(CliTest, OutputDirEnvironmentOverride) {
  const fs::path other = dir_ / "elsewhere";
  ::setenv("DVI_OUTPUT_DIR", other.c_str(), 1);
  const auto cfg = config("env.json", R"({"dataset": "toy.csv", "epochs": 1, "network": {"hidden": [4]}, "output_dir": "out"})");
  const int rc = cli::cmd_train(cfg, err_);
  ::unsetenv("DVI_OUTPUT_DIR");
  ASSERT_EQ(rc, cli::kOk);
  EXPECT_TRUE(fs::exists(other / "metrics.jsonl"));
  EXPECT_FALSE(fs::exists(dir_ / "out"));
}

TEST_F(CliTest, PredictRoundTrip) {
  const auto cfg = config("train.json", R"({"dataset": "toy.csv", "epochs": 40, "network": {"hidden": [16]},
                                            "output_dir": "out", "learning_rate": 0.02, "batch_size": 16})");
  ASSERT_EQ(cli::cmd_train(cfg, err_), cli::kOk) << err_.str();
  {
    std::ofstream in(dir_ / "query.csv");
    in << "x\n-0.9\n0.0\n0.9\n";
  }
  ASSERT_EQ(cli::cmd_predict(dir_ / "out" / "model.json", dir_ / "query.csv", dir_ / "pred.csv", err_), cli::kOk)
      << err_.str();
  const auto out = lines(dir_ / "pred.csv");
  ASSERT_EQ(out.size(), 4u);
  EXPECT_EQ(out[0], "row,mean,std");
  std::vector<double> sd;
  for (std::size_t i = 1; i < out.size(); ++i) {
    std::stringstream ss(out[i]);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) v.push_back(std::stod(cell));
    ASSERT_EQ(v.size(), 3u);
    EXPECT_GT(v[2], 0.0);
    sd.push_back(v[2]);
  }
  EXPECT_LT(sd[0], sd[2]);  // noise grows with x
}

TEST_F(CliTest, PredictEdgeCases) {
  const auto cfg = config("train.json", R"({"dataset": "toy.csv", "epochs": 1, "network": {"hidden": [4]}, "output_dir": "out"})");
  ASSERT_EQ(cli::cmd_train(cfg, err_), cli::kOk);
  const fs::path model = dir_ / "out" / "model.json";
  std::ofstream(dir_ / "empty.csv") << "";
  EXPECT_EQ(cli::cmd_predict(model, dir_ / "empty.csv", dir_ / "p1.csv", err_), cli::kOk);
  EXPECT_EQ(lines(dir_ / "p1.csv").size(), 1u);
  std::ofstream(dir_ / "wide.csv") << "1,2\n";
  EXPECT_EQ(cli::cmd_predict(model, dir_ / "wide.csv", dir_ / "p2.csv", err_), cli::kConfigError);
  EXPECT_EQ(cli::cmd_predict(dir_ / "none.json", dir_ / "wide.csv", dir_ / "p3.csv", err_), cli::kConfigError);
}

TEST_F(CliTest, BenchmarkSummary) {
  const auto cfg = config("bench.json", R"({"datasets": ["toy.csv"], "methods": ["DVI", "hoDVI"], "splits": 2,
      "epochs": 2, "network": {"hidden": [4]}, "prior_sweep": [0.1], "output_dir": "bench"})");
  ASSERT_EQ(cli::cmd_benchmark(cfg, 2, err_), cli::kOk) << err_.str();
  const auto rows = lines(dir_ / "bench" / "summary.csv");
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "dataset,method,prior,mean_test_ll,stderr,splits,failed");
  EXPECT_EQ(rows[1].rfind("toy,DVI,eb,", 0), 0u);
  EXPECT_EQ(rows[3].rfind("toy,DVI,fixed:0.1,", 0), 0u);
}

TEST_F(CliTest, BenchmarkSingleSplitHasEmptyStderr) {
  const auto cfg = config("bench.json", R"({"datasets": ["toy.csv"], "methods": ["DVI"], "splits": 1,
      "epochs": 1, "network": {"hidden": [4]}, "output_dir": "bench"})");
  ASSERT_EQ(cli::cmd_benchmark(cfg, 1, err_), cli::kOk);
  const auto rows = lines(dir_ / "bench" / "summary.csv");
  ASSERT_EQ(rows.size(), 2u);
  std::vector<std::string> cells;
  std::stringstream ss(rows[1]);
  for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
  ASSERT_GE(cells.size(), 6u);
  EXPECT_EQ(cells[4], "");
  EXPECT_EQ(cells[5], "1");
}

TEST_F(CliTest, BenchmarkFailedRunsGiveNonzeroExit) {
  const auto cfg = config("bench.json", R"({"datasets": ["toy.csv"], "methods": ["DVI"], "splits": 2,
      "epochs": 5, "learning_rate": 1e6, "network": {"hidden": [4]}, "output_dir": "bench"})");
  EXPECT_EQ(cli::cmd_benchmark(cfg, 1, err_), cli::kNumericalError);
  const auto rows = lines(dir_ / "bench" / "summary.csv");
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_NE(rows[1].find(",0,2"), std::string::npos);
}

TEST_F(CliTest, VerifyModes) {
  std::ostringstream out;
  cli::VerifyOptions opt;
  opt.kind = "heaviside";
  opt.rho = {0.0};
  opt.out_dir = dir_ / "v";
  EXPECT_EQ(cli::cmd_verify(opt, out, err_), cli::kOk);
  EXPECT_TRUE(fs::exists(dir_ / "v" / "residual_heaviside.csv"));
  opt.kind = "relu";
  opt.rho = {0.9};
  opt.tolerance = 1e-6;
  EXPECT_EQ(cli::cmd_verify(opt, out, err_), cli::kVerifyFailed);
  EXPECT_NE(out.str().find("FAIL"), std::string::npos);
  opt.kind = "sigmoid";
  EXPECT_EQ(cli::cmd_verify(opt, out, err_), cli::kConfigError);
  opt.kind = "relu";
  opt.rho = {1.0};
  EXPECT_EQ(cli::cmd_verify(opt, out, err_), cli::kConfigError);
}

}  // namespace
