#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "didmean/learners.hpp"
#include "didmean/simulate.hpp"

namespace didmean {

// One estimator configuration of the replication study. The five standard
// labels: `true` (both nuisance feature maps correctly specified), `gfal`
// (treatment map misspecified), `qfal` (outcome map misspecified), `bfal`
// (both misspecified), `super` (stacking ensemble with cross-fitting).
struct EstimatorConfig {
  std::string label;
  LearnerSpec outcome;
  LearnerSpec propensity;
  bool use_cross_fit = false;
  int m_folds = 2;
  int k_repetitions = 10;
};

// Correctly specified maps for the simulation design: raw history plus the
// transforms of the corresponding structural equation per time block
// (outcome: sin W1, W2*W3; treatment: cos W2, W3^2). Name-based with
// skip_missing so one map serves every regression stage.
FeatureMap simulation_outcome_truth_map();
FeatureMap simulation_propensity_truth_map();

// Drops every transform, leaving raw untransformed linear terms only.
FeatureMap misspecify(const FeatureMap& correct);

std::vector<EstimatorConfig> standard_configs(int super_m_folds = 2,
                                              int super_k_repetitions = 10);

struct ReplicateRow {
  int n = 0;
  std::string config;
  int rep = 0;
  bool ok = true;
  std::string error;
  // index 0 -> horizon 1, index 1 -> horizon 2
  std::array<double, 2> psi{};
  std::array<double, 2> variance{};
  std::array<double, 2> ci_lower{};
  std::array<double, 2> ci_upper{};
};

struct BenchCell {
  int n = 0;
  std::string config;
  int t = 0;
  double bias_sq = 0.0;   // (mean psi - truth)^2, unscaled
  double bias = 0.0;
  double v_sim = 0.0;     // empirical variance across replicates (n-1 divisor)
  double v_eif = 0.0;     // mean of influence-function variance estimates
  double coverage = 0.0;  // nominal-95% CI coverage against the truth
  int n_reps = 0;
  bool v_sim_defined = true;
};

// Raw values are stored unscaled; the x100 presentation scaling happens only
// in render_*.
struct BenchResult {
  std::vector<BenchCell> cells;
  std::vector<ReplicateRow> replicates;
  TruthTable truth;
  int failures = 0;
  double wall_seconds = 0.0;  // console-only; never written to artifacts
};

BenchResult run_replications(const DGPConfig& dgp,
                             const std::vector<EstimatorConfig>& configs,
                             const std::vector<int>& n_list, int n_reps,
                             const TruthTable& truth, std::uint64_t master_seed,
                             int threads = 1);

// Table-layout rendering: one row per (n, config), bias^2 / V_sim / V_eif per
// horizon, all values x100, entries below 1e-4 printed as "<0.0001".
std::string render_table_text(const BenchResult& result);
std::string render_table_csv(const BenchResult& result);
std::string replicates_csv(const BenchResult& result);

}  // namespace didmean
