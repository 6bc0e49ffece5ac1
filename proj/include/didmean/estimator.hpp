#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "didmean/nuisance.hpp"
#include "didmean/panel.hpp"

namespace didmean {

// Per-unit influence-function contributions for one horizon. The reported
// point estimate is exactly the mean of `total`; the per-(j,k) components
// are retained for diagnostics.
struct InfluenceContributions {
  Eigen::VectorXd total;
  std::map<std::pair<int, int>, Eigen::VectorXd> components;
};

// Evaluates, for every unit, the corrected sequential-regression functional
// for the (j, k) chain: the inverse-probability-weighted telescoping sum of
// stage differences plus the stage-1 prediction. Stage k+1 uses the raw
// outcome at time j.
Eigen::VectorXd phi_tilde(const NuisanceSet& nuisances,
                          const ComplianceProfile& compliance,
                          const PanelDataset& data, int j, int k);

struct OneStepResult {
  double psi = 0.0;
  InfluenceContributions contributions;
};

// One-step estimator at horizon t: the sample mean of
// Y_0 + sum_{k<=t} (phi_tilde(k,k) - phi_tilde(k-1,k)) over units.
OneStepResult one_step(const PanelDataset& data, const Regime& regime,
                       const ComplianceProfile& compliance,
                       const NuisanceSet& nuisances, int t);

// Brute-force iterated empirical conditional means on fully discrete
// histories (exhaustive stratification, no smoothing). Serves as the
// independent oracle for one_step equivalence checks.
double plug_in_psi(const PanelDataset& data, const Regime& regime,
                   const AdjustmentSchedule& schedule, int t);

// Mean of squared centered contributions (divisor n).
double eif_variance(const Eigen::VectorXd& contributions, double psi);

struct PositivityReport {
  std::vector<double> min_g;          // per m = 1..horizon
  std::vector<int> truncation_counts; // per m
  std::vector<int> compliant_counts;  // per m = 0..horizon
  std::vector<int> small_strata;      // m values flagged below the threshold
  std::vector<std::vector<int>> g_histogram;  // per m: 10 equal bins on [0,1]
  int small_stratum_threshold = 25;
};

PositivityReport positivity_diagnostics(const NuisanceSet& nuisances,
                                        const ComplianceProfile& compliance,
                                        int small_stratum_threshold = 25);

nlohmann::json to_json(const PositivityReport& report);

struct HorizonEstimate {
  int t = 0;
  double psi = 0.0;
  double variance = 0.0;  // asymptotic-variance estimate
  double se = 0.0;        // sqrt(variance / n)
  double ci_lower = 0.0;
  double ci_upper = 0.0;
  std::vector<double> repetition_estimates;  // cross-fit only
  std::vector<double> repetition_variances;  // cross-fit only
};

struct EstimateReport {
  std::string method;  // "full-sample" or "cross-fit(M,K)"
  int m_folds = 0;
  int k_repetitions = 0;
  std::uint64_t seed = 0;
  double epsilon = 0.01;
  std::vector<HorizonEstimate> horizons;
  PositivityReport diagnostics;
  // Per-unit contributions by horizon (cross-fit: from the repetition whose
  // estimate was selected by the median).
  std::map<int, Eigen::VectorXd> contributions;
};

// Fold assignment for the sample-split estimator: within each of the K
// repetitions the M folds partition the unit set with sizes differing by at
// most one. Identical seeds give identical plans.
struct FoldPlan {
  int m_folds = 2;
  int k_repetitions = 1;
  std::uint64_t seed = 0;
  std::vector<std::vector<int>> fold_of_unit;  // [repetition][unit] -> fold
};

FoldPlan make_fold_plan(int n_units, int m_folds, int k_repetitions,
                        std::uint64_t seed);

EstimateReport estimate_full_sample(const PanelDataset& data, const Regime& regime,
                                    const AdjustmentSchedule& schedule,
                                    const NuisanceLearners& learners,
                                    const std::vector<int>& horizons,
                                    double epsilon, bool pooled,
                                    std::uint64_t seed, int lag_window = 0);

// Sample-split estimator with repeated partitions: per repetition, nuisances
// for each fold are fit on its complement and contributions are evaluated on
// the held-out fold; repetitions are combined by the lower median and the
// variance by median(V_k + (psi_k - median)^2). K = 1 reduces to a single
// split estimate.
EstimateReport cross_fit(const PanelDataset& data, const Regime& regime,
                         const AdjustmentSchedule& schedule,
                         const NuisanceLearners& learners,
                         const std::vector<int>& horizons, int m_folds,
                         int k_repetitions, double epsilon, std::uint64_t seed,
                         bool pooled = false, int lag_window = 0,
                         int threads = 1);

// Lower-median convention: the order statistic ceil(K/2), so the reported
// value is always an attained repetition value.
double lower_median(std::vector<double> values);

nlohmann::json report_to_json(const EstimateReport& report);
std::string report_to_text(const EstimateReport& report);
std::string contributions_to_csv(const EstimateReport& report,
                                 const PanelDataset& data);

}  // namespace didmean
