#pragma once

// Tabular regression data: CSV ingestion, seeded train/test splits and
// train-only standardization.

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dvi/errors.hpp"
#include "dvi/gaussmoments.hpp"

namespace dvi {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t row, std::size_t col)
      : std::runtime_error(what), row_(row), col_(col) {}
  std::size_t row() const { return row_; }
  std::size_t col() const { return col_; }

 private:
  std::size_t row_, col_;
};

struct Standardization {
  Vector x_mean, x_std;
  double y_mean = 0.0, y_std = 1.0;
};

struct Dataset {
  std::string name;
  Matrix features;
  Vector targets;
  std::vector<std::string> dropped_columns;
  std::vector<int> dropped_indices;  // positions among the original feature columns
  int original_width = 0;

  Eigen::Index size() const { return features.rows(); }
  Eigen::Index dim() const { return features.cols(); }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\"");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\"");
  return s.substr(b, e - b + 1);
}

inline bool parse_double(const std::string& cell, double& out) {
  const std::string t = trim(cell);
  if (t.empty()) return false;
  const char* first = t.data();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, t.data() + t.size(), out);
  return ec == std::errc() && ptr == t.data() + t.size() && std::isfinite(out);
}

inline std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace detail

// Last column is the target. A first row that does not parse as numbers is a header.
// Columns with zero variance are dropped.
inline Dataset load_csv(const std::filesystem::path& path, const std::string& name = {}) {
  std::ifstream in(path);
  if (!in) throw StructuralError("load_csv: cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::vector<std::string> header;
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    std::vector<std::string> cells = detail::split_commas(line);
    std::vector<double> vals(cells.size());
    bool ok = true;
    std::size_t bad = 0;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (!detail::parse_double(cells[c], vals[c])) {
        ok = false;
        bad = c;
        break;
      }
    }
    if (!ok) {
      if (rows.empty() && header.empty()) {
        for (const auto& c : cells) header.push_back(detail::trim(c));
        width = cells.size();
        continue;
      }
      throw ParseError("load_csv: " + path.string() + ": non-numeric cell '" + detail::trim(cells[bad]) +
                           "' at row " + std::to_string(line_no) + ", column " + std::to_string(bad + 1),
                       line_no, bad + 1);
    }
    if (width == 0) width = vals.size();
    if (vals.size() != width) {
      throw ParseError("load_csv: " + path.string() + ": row " + std::to_string(line_no) + " has " +
                           std::to_string(vals.size()) + " cells, expected " + std::to_string(width),
                       line_no, vals.size());
    }
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw StructuralError("load_csv: " + path.string() + " holds no data rows");
  if (width < 2) throw StructuralError("load_csv: need at least one feature and a target column");

  const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
  Matrix all(n, static_cast<Eigen::Index>(width));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < all.cols(); ++j) all(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];

  Dataset ds;
  ds.name = name.empty() ? path.stem().string() : name;
  ds.targets = all.col(all.cols() - 1);
  ds.original_width = static_cast<int>(all.cols() - 1);
  std::vector<Eigen::Index> keep;
  for (Eigen::Index j = 0; j + 1 < all.cols(); ++j) {
    const double lo = all.col(j).minCoeff(), hi = all.col(j).maxCoeff();
    if (hi > lo) {
      keep.push_back(j);
    } else {
      const std::string col = header.empty() ? "column " + std::to_string(j + 1) : header[static_cast<std::size_t>(j)];
      ds.dropped_columns.push_back(col);
      ds.dropped_indices.push_back(static_cast<int>(j));
      std::cerr << "warning: " << ds.name << ": dropping constant feature " << col << "\n";
    }
  }
  ds.features.resize(n, static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) ds.features.col(static_cast<Eigen::Index>(k)) = all.col(keep[k]);
  return ds;
}

// name -> CSV path; relative paths resolve against the registry's directory.
inline std::map<std::string, std::filesystem::path> load_registry(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw StructuralError("registry: cannot open " + path.string());
  const nlohmann::json j = nlohmann::json::parse(in);
  std::map<std::string, std::filesystem::path> out;
  for (const auto& [k, v] : j.items()) {
    std::filesystem::path p = v.get<std::string>();
    if (p.is_relative()) p = path.parent_path() / p;
    out[k] = p;
  }
  return out;
}

struct Split {
  Matrix x_train, x_test;  // standardized
  Matrix y_train, y_test;  // standardized, N x 1
  Vector y_test_raw;
  Standardization stats;
  std::vector<Eigen::Index> train_rows, test_rows;
};

inline Split split(const Dataset& ds, std::uint64_t seed, double train_fraction = 0.9) {
  const Eigen::Index n = ds.size();
  if (n < 10) throw StructuralError("split: need at least 10 rows");
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  std::mt19937_64 gen(seed);
  // Fisher-Yates with an explicit bound draw, so the permutation does not
  // depend on the standard library's shuffle implementation
  for (std::size_t i = perm.size() - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(gen() % (i + 1));
    std::swap(perm[i], perm[j]);
  }
  const auto n_train = static_cast<Eigen::Index>(std::ceil(train_fraction * static_cast<double>(n) - 1e-9));
  Split s;
  s.train_rows.assign(perm.begin(), perm.begin() + n_train);
  s.test_rows.assign(perm.begin() + n_train, perm.end());

  auto gather = [&](const std::vector<Eigen::Index>& idx, Matrix& x, Vector& y) {
    x.resize(static_cast<Eigen::Index>(idx.size()), ds.dim());
    y.resize(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      x.row(static_cast<Eigen::Index>(k)) = ds.features.row(idx[k]);
      y(static_cast<Eigen::Index>(k)) = ds.targets(idx[k]);
    }
  };
  Matrix xtr, xte;
  Vector ytr, yte;
  gather(s.train_rows, xtr, ytr);
  gather(s.test_rows, xte, yte);

  Standardization& st = s.stats;
  const double m = static_cast<double>(xtr.rows());
  st.x_mean = xtr.colwise().mean().transpose();
  st.x_std.resize(xtr.cols());
  for (Eigen::Index j = 0; j < xtr.cols(); ++j) {
    const double sd = std::sqrt((xtr.col(j).array() - st.x_mean(j)).square().sum() / m);
    st.x_std(j) = sd > 0.0 ? sd : 1.0;
  }
  st.y_mean = ytr.mean();
  st.y_std = std::sqrt((ytr.array() - st.y_mean).square().sum() / m);
  if (!(st.y_std > 0.0)) st.y_std = 1.0;

  auto standardize_x = [&](const Matrix& x) {
    Matrix out = x;
    for (Eigen::Index j = 0; j < x.cols(); ++j) out.col(j) = (x.col(j).array() - st.x_mean(j)) / st.x_std(j);
    return out;
  };
  s.x_train = standardize_x(xtr);
  s.x_test = standardize_x(xte);
  s.y_train = ((ytr.array() - st.y_mean) / st.y_std).matrix();
  s.y_test = ((yte.array() - st.y_mean) / st.y_std).matrix();
  s.y_test_raw = yte;
  return s;
}

inline double destandardize_ll(double ll_standardized, double sigma_y) {
  if (!(sigma_y > 0.0)) throw std::domain_error("destandardize_ll: sigma_y must be positive");
  return ll_standardized - std::log(sigma_y);
}

}  // namespace dvi

namespace dvi {

// One-dimensional regression set whose noise level grows with x.
inline Dataset make_toy_heteroscedastic(int n = 500, std::uint64_t seed = 0) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> ux(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset ds;
  ds.name = "toy";
  ds.features.resize(n, 1);
  ds.targets.resize(n);
  ds.original_width = 1;
  for (int i = 0; i < n; ++i) {
    const double x = ux(gen);
    const double sd = 0.05 + 0.3 * (x + 1.0) * (x + 1.0) / 4.0;
    ds.features(i, 0) = x;
    ds.targets(i) = std::sin(3.0 * x) + sd * noise(gen);
  }
  return ds;
}

}  // namespace dvi
