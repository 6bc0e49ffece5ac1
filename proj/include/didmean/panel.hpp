#pragma once

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "json.hpp"

namespace didmean {

// Balanced unit x time panel. Times are re-indexed to 0..horizon at load;
// the original calendar labels are kept as metadata. Immutable once built:
// all reads are safe from concurrent tasks.
struct PanelDataset {
  int n_units = 0;
  int horizon = 0;                          // tau; observed times run 0..tau
  Eigen::MatrixXi treatment;                // n_units x (tau+1)
  Eigen::MatrixXd outcome;                  // n_units x (tau+1)
  std::vector<Eigen::MatrixXd> covariates;  // per time: n_units x dim(t)
  std::vector<std::vector<std::string>> covariate_names;  // per time
  std::vector<std::string> unit_labels;     // original ids, dense order
  std::vector<double> time_labels;          // original calendar labels
  std::vector<int> treatment_alphabet;      // sorted unique codes
  std::string outcome_name = "Y";

  int n_times() const { return horizon + 1; }
  int covariate_dim(int t) const {
    return static_cast<int>(covariates[static_cast<std::size_t>(t)].cols());
  }
};

void validate_panel(const PanelDataset& data);

// Counterfactual treatment trajectory shared by all units.
struct Regime {
  std::vector<int> path;  // length horizon+1, entries in the alphabet
};

void validate_regime(const PanelDataset& data, const Regime& regime);

struct ColumnRef {
  enum Kind { Covariate, Outcome };
  int time = 0;
  Kind kind = Covariate;
  int index = 0;  // covariate index within its time; 0 for outcomes

  bool operator==(const ColumnRef&) const = default;
  bool operator<(const ColumnRef& o) const {
    if (time != o.time) return time < o.time;
    if (kind != o.kind) return kind < o.kind;
    return index < o.index;
  }
};

// Conditioning sets for each step k = 1..tau. selection[k-1] lists, in
// column order, what enters the step-k design. Selections must be nested in
// k and may not reference outcomes later than time k-2 (conditioning on the
// step-(k-1) or step-k outcome would change the identification assumption).
struct AdjustmentSchedule {
  std::vector<std::vector<ColumnRef>> selection;
};

// Maximal permitted set: all covariates through k plus outcomes through k-2.
AdjustmentSchedule default_schedule(const PanelDataset& data);

void validate_schedule(const PanelDataset& data, const AdjustmentSchedule& schedule);

// One row per unit, columns exactly schedule.selection[k-1] in order.
Eigen::MatrixXd design_matrix(const PanelDataset& data,
                              const AdjustmentSchedule& schedule, int k);
std::vector<std::string> design_column_names(const PanelDataset& data,
                                             const AdjustmentSchedule& schedule,
                                             int k);
std::string column_name(const PanelDataset& data, const ColumnRef& ref);

// indicator(i, m) = 1 iff unit i's treatments match the regime at every
// time s <= m. Monotone non-increasing across m by construction.
struct ComplianceProfile {
  Eigen::MatrixXi indicator;  // n_units x (tau+1)
};

ComplianceProfile compliance(const PanelDataset& data, const Regime& regime);

struct BaselineReport {
  double fraction_compliant = 0.0;
  std::vector<int> violating_units;
};

// Diagnostic for the staggered-discontinuation design requirement that all
// units start on the regime's baseline value. Never throws on violation.
BaselineReport check_baseline_regime(const PanelDataset& data, const Regime& regime);

struct PanelSchema {
  std::string unit_col = "unit";
  std::string time_col = "time";
  std::string treatment_col = "treatment";
  std::string outcome_col = "outcome";
  std::vector<std::string> covariate_cols;
};

PanelSchema schema_from_json(const nlohmann::json& j);
nlohmann::json to_json(const PanelSchema& schema);

// "default" or an explicit per-step selection list.
AdjustmentSchedule schedule_from_json(const nlohmann::json& j, const PanelDataset& data);
nlohmann::json to_json(const AdjustmentSchedule& schedule);

// CSV ingestion. Header row required; unbalanced panels, duplicate
// (unit,time) rows and non-numeric fields are rejected with row context.
PanelDataset load_panel(const std::string& path, const PanelSchema& schema);
void save_panel(const PanelDataset& data, const std::string& path);

// Write-to-temp, rename-on-success. Used for every CLI artifact.
void atomic_write_file(const std::string& path, const std::string& contents);

}  // namespace didmean
