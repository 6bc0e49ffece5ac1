#pragma once

#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "didmean/panel.hpp"
#include "didmean/rng.hpp"

namespace didmean::testing {

// Scratch directory unique to the test binary run.
inline std::string scratch_dir(const std::string& tag) {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("didmean_test_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir.string();
}

inline void write_file(const std::string& path, const std::string& contents) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << contents;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

// Small builder for hand-constructed panels: one covariate block per time.
inline PanelDataset make_panel(const Eigen::MatrixXi& treatment,
                               const Eigen::MatrixXd& outcome,
                               const std::vector<Eigen::MatrixXd>& covariates) {
  PanelDataset data;
  data.n_units = static_cast<int>(treatment.rows());
  data.horizon = static_cast<int>(treatment.cols()) - 1;
  data.treatment = treatment;
  data.outcome = outcome;
  data.covariates = covariates;
  for (std::size_t t = 0; t < covariates.size(); ++t) {
    std::vector<std::string> names;
    for (int c = 0; c < covariates[t].cols(); ++c)
      names.push_back("X" + std::to_string(c + 1));
    data.covariate_names.push_back(names);
  }
  int width = 1;
  for (int v = data.n_units - 1; v >= 10; v /= 10) ++width;
  for (int i = 0; i < data.n_units; ++i) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "u%0*d", width, i);
    data.unit_labels.push_back(buf);
  }
  for (int t = 0; t <= data.horizon; ++t)
    data.time_labels.push_back(static_cast<double>(t));
  int max_code = 0;
  for (int i = 0; i < treatment.rows(); ++i)
    for (int t = 0; t < treatment.cols(); ++t)
      max_code = std::max(max_code, treatment(i, t));
  for (int c = 0; c <= max_code; ++c) data.treatment_alphabet.push_back(c);
  return data;
}

// Random panel with binary treatments and one standard-normal covariate per
// time. Used by property tests.
inline PanelDataset random_panel(int n, int horizon, std::uint64_t seed,
                                 double p_deviate = 0.3) {
  Rng rng(seed);
  Eigen::MatrixXi A(n, horizon + 1);
  Eigen::MatrixXd Y(n, horizon + 1);
  std::vector<Eigen::MatrixXd> X(static_cast<std::size_t>(horizon + 1),
                                 Eigen::MatrixXd(n, 1));
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t <= horizon; ++t) {
      A(i, t) = rng.uniform() < p_deviate ? 1 : 0;
      Y(i, t) = rng.normal();
      X[static_cast<std::size_t>(t)](i, 0) = rng.normal();
    }
  }
  return make_panel(A, Y, X);
}

}  // namespace didmean::testing
