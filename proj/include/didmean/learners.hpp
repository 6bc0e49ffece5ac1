#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace didmean {

enum class LearnerKind {
  Mean,
  Stratum,  // saturated empirical mean per distinct feature vector
  Linear,
  Ridge,
  ElasticNet,
  Logistic,
  LogisticElasticNet,
  Tree,
  BaggedTrees,
  Stack,
};

std::string to_string(LearnerKind kind);
LearnerKind learner_kind_from_string(const std::string& name);

struct FeatureTerm {
  enum Op { Raw, Sin, Cos, Square, Product };
  Op op = Raw;
  std::string col;
  std::string col2;  // Product only
};

// Transform applied to the raw design before fitting. Custom terms address
// columns by name so one map can serve designs of different widths
// (skip_missing drops terms whose columns are absent instead of erroring).
struct FeatureMap {
  enum Kind { Identity, Polynomial, Custom };
  Kind kind = Identity;
  int degree = 2;             // Polynomial
  bool interactions = true;   // Polynomial: pairwise products
  bool include_raw = true;    // Custom: keep all raw columns first
  bool skip_missing = false;  // Custom: ignore terms naming absent columns
  std::vector<FeatureTerm> terms;
};

struct LearnerSpec {
  LearnerKind kind = LearnerKind::Mean;
  // Penalty level; unset selects from a 20-point log grid by V-fold CV.
  std::optional<double> lambda;
  double alpha = 1.0;  // l1 share of the elastic-net penalty, in [0,1]
  int max_depth = 3;
  int min_leaf = 5;
  int n_bags = 20;
  int cv_folds = 10;  // V; used for stacking and penalty selection
  std::vector<LearnerSpec> members;  // Stack only; members must not be stacks
  FeatureMap feature_map;
};

void validate(const LearnerSpec& spec);

nlohmann::json to_json(const LearnerSpec& spec);
LearnerSpec learner_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const FeatureMap& map);
FeatureMap feature_map_from_json(const nlohmann::json& j);

// Immutable fitted learner. predict() is deterministic and safe to call
// from concurrent tasks; probability-mode output is clamped to [0,1].
class FittedModel {
 public:
  FittedModel() = default;

  // features: raw (pre-map) design with the same width as at fit time.
  Eigen::VectorXd predict(const Eigen::MatrixXd& features) const;
  double predict_one(const Eigen::RowVectorXd& features) const;

  bool probability_mode() const;
  int input_width() const;
  const LearnerSpec& spec() const;

  // Fit provenance: e.g. "ridge_stabilized", "rank_deficient_min_norm",
  // "degenerate_constant_target", "lambda_cv=<value>".
  const std::vector<std::string>& notes() const;
  bool has_note(const std::string& prefix) const;

  struct State;  // internal

  explicit FittedModel(std::shared_ptr<const State> state) : state_(std::move(state)) {}

 private:
  std::shared_ptr<const State> state_;
};

FittedModel fit(const LearnerSpec& spec, const Eigen::MatrixXd& features,
                const Eigen::VectorXd& target,
                const Eigen::VectorXd* weights = nullptr,
                std::uint64_t seed = 0, bool probability_target = false,
                const std::vector<std::string>& column_names = {});

// Simplex weights minimizing V-fold cross-validated squared error over the
// member predictions. Members failing on every fold are dropped (indices
// reported through `dropped`); their weight is 0 in the returned vector.
Eigen::VectorXd cv_stack_weights(const std::vector<LearnerSpec>& members,
                                 const Eigen::MatrixXd& features,
                                 const Eigen::VectorXd& target, int v_folds,
                                 std::uint64_t seed,
                                 bool probability_target = false,
                                 const std::vector<std::string>& column_names = {},
                                 std::vector<int>* dropped = nullptr);

// Deterministic fold assignment: seeded shuffle, contiguous blocks, sizes
// differing by at most one.
std::vector<int> cv_fold_ids(int n_rows, int v_folds, std::uint64_t seed);

// min_{w in simplex} ||Z w - y||^2 / n via monotone projected gradient
// started at the best vertex, so the achieved risk never exceeds the best
// single column's.
Eigen::VectorXd simplex_ls_weights(const Eigen::MatrixXd& Z, const Eigen::VectorXd& y,
                                   const Eigen::VectorXd* weights = nullptr);

}  // namespace didmean
