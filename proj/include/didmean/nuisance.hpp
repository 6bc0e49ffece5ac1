#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "didmean/learners.hpp"
#include "didmean/panel.hpp"

namespace didmean {

// Index of one sequential outcome regression: j is the outcome time, k the
// conditioning depth, m the regression stage with 1 <= m <= k+1. Stage
// m = k+1 denotes the raw outcome at time j, not a fitted model.
struct QIndex {
  int j = 0;
  int k = 0;
  int m = 0;
};

void validate_q_index(const QIndex& q, int horizon);

// One full regression chain for a (j, k) pair: stage m is fit on the
// compliant-at-m stratum against the stage-(m+1) predictions (stage k+1
// being the raw outcome), walking m = k down to 1. Predictions at every
// stage are produced and cached for all units, including units outside the
// training set, because the estimator averages the stage-1 fit over everyone.
struct OutcomeChain {
  int j = 0;
  int k = 0;
  std::vector<FittedModel> stage_models;  // stage_models[m-1] is stage m
  Eigen::MatrixXd stage_predictions;      // n_units x k; column m-1 is stage m
  std::vector<int> fit_order;             // stages in the order they were fit
};

// Probability of following the regime at time m given the history and prior
// compliance. Degenerate strata (constant target) yield a constant model.
struct PropensityFit {
  int m = 0;
  bool degenerate = false;
  double degenerate_value = 1.0;
  std::optional<FittedModel> model;
  Eigen::VectorXd fitted;  // per unit, clamped to [0,1]
  int stratum_size = 0;    // compliant-at-(m-1) training rows
  bool pooled = false;
};

// Everything the estimator needs for a horizon: all (j,k) chains with
// j in {k-1, k} for k <= horizon, the per-time propensity fits, and the
// truncated cumulative products. Immutable once built.
struct NuisanceSet {
  int horizon = 0;
  std::map<std::pair<int, int>, OutcomeChain> chains;  // key (j, k)
  std::vector<PropensityFit> propensity;               // index m-1, m = 1..horizon
  Eigen::MatrixXd cumulative_g;                        // n_units x horizon
  std::vector<int> truncation_counts;                  // per m
  double epsilon = 0.01;
  bool pooled_propensity = false;
  std::string provenance = "full-sample";
};

OutcomeChain fit_outcome_chain(const PanelDataset& data, const Regime& regime,
                               const AdjustmentSchedule& schedule, int j, int k,
                               const LearnerSpec& spec,
                               const std::vector<int>& training_units,
                               std::uint64_t seed);

PropensityFit fit_propensity(const PanelDataset& data, const Regime& regime,
                             const AdjustmentSchedule& schedule, int m,
                             const LearnerSpec& spec,
                             const std::vector<int>& training_units,
                             std::uint64_t seed);

// Pooled variant: one model over the union of the compliant strata for
// m = 1..up_to with the stage index as an extra numeric feature. lag_window
// 0 aligns histories on absolute time over the union column set (absent
// future-relative columns zero-padded); lag_window L > 0 instead uses the
// most recent L covariate times (and outcomes aged >= 2 within the window).
std::vector<PropensityFit> fit_pooled_propensity(
    const PanelDataset& data, const Regime& regime,
    const AdjustmentSchedule& schedule, int up_to, const LearnerSpec& spec,
    const std::vector<int>& training_units, std::uint64_t seed,
    int lag_window = 0);

// Per unit, product over stages s <= m of max(min(f_s, 1), epsilon).
// truncation_counts[s-1] counts units whose stage-s factor fell below
// epsilon. Values lie in [epsilon^m, 1].
Eigen::MatrixXd cumulative_propensity(const std::vector<PropensityFit>& fits,
                                      double epsilon,
                                      std::vector<int>* truncation_counts = nullptr);

struct NuisanceLearners {
  LearnerSpec outcome;
  LearnerSpec propensity;
};

NuisanceSet fit_nuisance_set(const PanelDataset& data, const Regime& regime,
                             const AdjustmentSchedule& schedule, int horizon,
                             const NuisanceLearners& learners,
                             const std::vector<int>& training_units,
                             double epsilon, bool pooled, std::uint64_t seed,
                             int lag_window = 0);

// Model kinds, stratum sizes, truncation counts; diagnostics surface.
nlohmann::json nuisance_summary(const NuisanceSet& set);

std::vector<int> all_units(const PanelDataset& data);

}  // namespace didmean
