#include "didmean/nuisance.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "didmean/errors.hpp"
#include "didmean/rng.hpp"

namespace didmean {

namespace {

Eigen::MatrixXd rows_subset(const Eigen::MatrixXd& X, const std::vector<int>& rows) {
  Eigen::MatrixXd out(static_cast<int>(rows.size()), X.cols());
  for (std::size_t r = 0; r < rows.size(); ++r)
    out.row(static_cast<int>(r)) = X.row(rows[r]);
  return out;
}

Eigen::VectorXd vec_subset(const Eigen::VectorXd& v, const std::vector<int>& rows) {
  Eigen::VectorXd out(static_cast<int>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) out[static_cast<int>(r)] = v[rows[r]];
  return out;
}

}  // namespace

void validate_q_index(const QIndex& q, int horizon) {
  if (q.j < 0 || q.j > horizon)
    throw ValidationError("outcome time j out of range");
  if (q.k != q.j && q.k != q.j + 1)
    throw ValidationError("conditioning depth k must be j or j+1");
  if (q.k < 1 || q.k > horizon)
    throw ValidationError("conditioning depth k out of range");
  if (q.m < 1 || q.m > q.k + 1)
    throw ValidationError("stage m must satisfy 1 <= m <= k+1");
}

std::vector<int> all_units(const PanelDataset& data) {
  std::vector<int> units(static_cast<std::size_t>(data.n_units));
  std::iota(units.begin(), units.end(), 0);
  return units;
}

OutcomeChain fit_outcome_chain(const PanelDataset& data, const Regime& regime,
                               const AdjustmentSchedule& schedule, int j, int k,
                               const LearnerSpec& spec,
                               const std::vector<int>& training_units,
                               std::uint64_t seed) {
  validate_q_index({j, k, 1}, data.horizon);
  const ComplianceProfile comp = compliance(data, regime);

  OutcomeChain chain;
  chain.j = j;
  chain.k = k;
  chain.stage_models.resize(static_cast<std::size_t>(k));
  chain.stage_predictions.resize(data.n_units, k);

  // Walk m = k down to 1; the stage-(k+1) values are the raw outcomes.
  Eigen::VectorXd stage_target = data.outcome.col(j);
  for (int m = k; m >= 1; --m) {
    std::vector<int> rows;
    for (int i : training_units)
      if (comp.indicator(i, m) == 1) rows.push_back(i);
    if (rows.empty())
      throw PositivityError("empty compliant stratum at m=" + std::to_string(m) +
                            " while fitting the (j=" + std::to_string(j) +
                            ", k=" + std::to_string(k) + ") regression chain");

    const Eigen::MatrixXd design = design_matrix(data, schedule, m);
    const auto names = design_column_names(data, schedule, m);
    const FittedModel model =
        fit(spec, rows_subset(design, rows), vec_subset(stage_target, rows),
            nullptr, derive_seed(seed, 0x0c4a, static_cast<std::uint64_t>(m)),
            false, names);
    chain.stage_predictions.col(m - 1) = model.predict(design);
    chain.stage_models[static_cast<std::size_t>(m - 1)] = model;
    chain.fit_order.push_back(m);
    stage_target = chain.stage_predictions.col(m - 1);
  }
  return chain;
}

PropensityFit fit_propensity(const PanelDataset& data, const Regime& regime,
                             const AdjustmentSchedule& schedule, int m,
                             const LearnerSpec& spec,
                             const std::vector<int>& training_units,
                             std::uint64_t seed) {
  if (m < 1 || m > data.horizon)
    throw ValidationError("propensity stage m out of range");
  const ComplianceProfile comp = compliance(data, regime);

  std::vector<int> rows;
  for (int i : training_units)
    if (comp.indicator(i, m - 1) == 1) rows.push_back(i);
  if (rows.empty())
    throw PositivityError("no units compliant through m-1=" + std::to_string(m - 1) +
                          " when fitting the propensity at m=" + std::to_string(m));

  Eigen::VectorXd target(static_cast<int>(rows.size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    target[static_cast<int>(r)] =
        data.treatment(rows[r], m) == regime.path[static_cast<std::size_t>(m)] ? 1.0 : 0.0;

  PropensityFit fit_result;
  fit_result.m = m;
  fit_result.stratum_size = static_cast<int>(rows.size());

  const double t_min = target.minCoeff();
  const double t_max = target.maxCoeff();
  if (t_min == t_max) {
    // Degenerate stratum: no model is fit at times where compliance does not
    // change (or collapses entirely).
    fit_result.degenerate = true;
    fit_result.degenerate_value = t_min;
    fit_result.fitted = Eigen::VectorXd::Constant(data.n_units, t_min);
    return fit_result;
  }

  const Eigen::MatrixXd design = design_matrix(data, schedule, m);
  const auto names = design_column_names(data, schedule, m);
  const FittedModel model =
      fit(spec, rows_subset(design, rows), target, nullptr,
          derive_seed(seed, 0x96e5, static_cast<std::uint64_t>(m)), true, names);
  fit_result.model = model;
  fit_result.fitted = model.predict(design).cwiseMax(0.0).cwiseMin(1.0);
  return fit_result;
}

namespace {

// Pooled design row layout. lag_window = 0: the union column set of the
// deepest stage, absent columns zero-padded (nestedness makes each stage a
// subset). lag_window = L: the most recent L covariate times and outcomes
// aged >= 2 within that window, aligned on recency. A stage-index column is
// appended in both layouts.
struct PooledLayout {
  int lag_window = 0;
  int up_to = 1;
  std::vector<ColumnRef> union_columns;  // lag_window == 0
  int cov_dim = 0;                       // lag_window > 0 (constant dim assumed)

  int width() const {
    if (lag_window == 0) return static_cast<int>(union_columns.size()) + 1;
    return lag_window * cov_dim + std::max(lag_window - 2, 0) + 1;
  }
};

PooledLayout make_pooled_layout(const PanelDataset& data,
                                const AdjustmentSchedule& schedule, int up_to,
                                int lag_window) {
  PooledLayout layout;
  layout.lag_window = lag_window;
  layout.up_to = up_to;
  if (lag_window == 0) {
    layout.union_columns = schedule.selection[static_cast<std::size_t>(up_to - 1)];
  } else {
    layout.cov_dim = data.covariate_dim(0);
    for (int t = 1; t <= data.horizon; ++t)
      if (data.covariate_dim(t) != layout.cov_dim)
        throw ValidationError("lag-window pooling requires a constant covariate dimension");
  }
  return layout;
}

Eigen::RowVectorXd pooled_row(const PanelDataset& data,
                              const AdjustmentSchedule& schedule,
                              const PooledLayout& layout, int unit, int m) {
  Eigen::RowVectorXd row = Eigen::RowVectorXd::Zero(layout.width());
  if (layout.lag_window == 0) {
    const auto& stage_cols = schedule.selection[static_cast<std::size_t>(m - 1)];
    const std::set<ColumnRef> present(stage_cols.begin(), stage_cols.end());
    for (std::size_t c = 0; c < layout.union_columns.size(); ++c) {
      const auto& ref = layout.union_columns[c];
      if (present.find(ref) == present.end()) continue;  // not yet observed at m
      row[static_cast<int>(c)] =
          ref.kind == ColumnRef::Covariate
              ? data.covariates[static_cast<std::size_t>(ref.time)](unit, ref.index)
              : data.outcome(unit, ref.time);
    }
  } else {
    int col = 0;
    for (int lag = 0; lag < layout.lag_window; ++lag) {
      const int t = m - lag;
      for (int c = 0; c < layout.cov_dim; ++c, ++col)
        if (t >= 0) row[col] = data.covariates[static_cast<std::size_t>(t)](unit, c);
    }
    for (int lag = 2; lag < layout.lag_window; ++lag, ++col) {
      const int t = m - lag;
      if (t >= 0) row[col] = data.outcome(unit, t);
    }
  }
  row[layout.width() - 1] = static_cast<double>(m);
  return row;
}

std::vector<std::string> pooled_names(const PanelDataset& data,
                                      const PooledLayout& layout) {
  std::vector<std::string> names;
  if (layout.lag_window == 0) {
    for (const auto& ref : layout.union_columns)
      names.push_back(column_name(data, ref));
  } else {
    for (int lag = 0; lag < layout.lag_window; ++lag)
      for (int c = 0; c < layout.cov_dim; ++c)
        names.push_back(data.covariate_names[0][static_cast<std::size_t>(c)] +
                        "@lag" + std::to_string(lag));
    for (int lag = 2; lag < layout.lag_window; ++lag)
      names.push_back(data.outcome_name + "@lag" + std::to_string(lag));
  }
  names.push_back("stage");
  return names;
}

}  // namespace

std::vector<PropensityFit> fit_pooled_propensity(
    const PanelDataset& data, const Regime& regime,
    const AdjustmentSchedule& schedule, int up_to, const LearnerSpec& spec,
    const std::vector<int>& training_units, std::uint64_t seed, int lag_window) {
  if (up_to < 1 || up_to > data.horizon)
    throw ValidationError("pooled propensity horizon out of range");
  const ComplianceProfile comp = compliance(data, regime);
  const PooledLayout layout = make_pooled_layout(data, schedule, up_to, lag_window);

  std::vector<std::pair<int, int>> stacked;  // (unit, m)
  std::vector<int> stratum_sizes(static_cast<std::size_t>(up_to), 0);
  for (int m = 1; m <= up_to; ++m) {
    for (int i : training_units) {
      if (comp.indicator(i, m - 1) == 1) {
        stacked.push_back({i, m});
        ++stratum_sizes[static_cast<std::size_t>(m - 1)];
      }
    }
    if (stratum_sizes[static_cast<std::size_t>(m - 1)] == 0)
      throw PositivityError("no units compliant through m-1=" + std::to_string(m - 1) +
                            " in the pooled propensity stack");
  }

  Eigen::MatrixXd X(static_cast<int>(stacked.size()), layout.width());
  Eigen::VectorXd target(static_cast<int>(stacked.size()));
  for (std::size_t r = 0; r < stacked.size(); ++r) {
    const auto [i, m] = stacked[r];
    X.row(static_cast<int>(r)) = pooled_row(data, schedule, layout, i, m);
    target[static_cast<int>(r)] =
        data.treatment(i, m) == regime.path[static_cast<std::size_t>(m)] ? 1.0 : 0.0;
  }

  std::vector<PropensityFit> fits(static_cast<std::size_t>(up_to));
  const double t_min = target.minCoeff();
  const double t_max = target.maxCoeff();
  if (t_min == t_max) {
    for (int m = 1; m <= up_to; ++m) {
      auto& f = fits[static_cast<std::size_t>(m - 1)];
      f.m = m;
      f.pooled = true;
      f.degenerate = true;
      f.degenerate_value = t_min;
      f.stratum_size = stratum_sizes[static_cast<std::size_t>(m - 1)];
      f.fitted = Eigen::VectorXd::Constant(data.n_units, t_min);
    }
    return fits;
  }

  const FittedModel model = fit(spec, X, target, nullptr,
                                derive_seed(seed, 0x96e6), true, pooled_names(data, layout));
  for (int m = 1; m <= up_to; ++m) {
    auto& f = fits[static_cast<std::size_t>(m - 1)];
    f.m = m;
    f.pooled = true;
    f.model = model;
    f.stratum_size = stratum_sizes[static_cast<std::size_t>(m - 1)];
    Eigen::MatrixXd Xm(data.n_units, layout.width());
    for (int i = 0; i < data.n_units; ++i)
      Xm.row(i) = pooled_row(data, schedule, layout, i, m);
    f.fitted = model.predict(Xm).cwiseMax(0.0).cwiseMin(1.0);
  }
  return fits;
}

Eigen::MatrixXd cumulative_propensity(const std::vector<PropensityFit>& fits,
                                      double epsilon,
                                      std::vector<int>* truncation_counts) {
  if (epsilon <= 0.0 || epsilon >= 0.5)
    throw ValidationError("truncation level must lie in (0, 0.5)");
  if (fits.empty()) throw ValidationError("no propensity fits supplied");
  const int n = static_cast<int>(fits.front().fitted.size());
  const int horizon = static_cast<int>(fits.size());
  Eigen::MatrixXd g(n, horizon);
  if (truncation_counts) truncation_counts->assign(static_cast<std::size_t>(horizon), 0);
  for (int m = 1; m <= horizon; ++m) {
    const auto& f = fits[static_cast<std::size_t>(m - 1)];
    if (f.m != m) throw ValidationError("propensity fits out of order");
    int truncated = 0;
    for (int i = 0; i < n; ++i) {
      double factor = std::min(f.fitted[i], 1.0);
      if (factor < epsilon) {
        factor = epsilon;
        ++truncated;
      }
      g(i, m - 1) = (m == 1 ? 1.0 : g(i, m - 2)) * factor;
    }
    if (truncation_counts) (*truncation_counts)[static_cast<std::size_t>(m - 1)] = truncated;
  }
  return g;
}

NuisanceSet fit_nuisance_set(const PanelDataset& data, const Regime& regime,
                             const AdjustmentSchedule& schedule, int horizon,
                             const NuisanceLearners& learners,
                             const std::vector<int>& training_units,
                             double epsilon, bool pooled, std::uint64_t seed,
                             int lag_window) {
  if (horizon < 1 || horizon > data.horizon)
    throw ValidationError("nuisance horizon must lie in 1..panel horizon");
  validate_schedule(data, schedule);

  NuisanceSet set;
  set.horizon = horizon;
  set.epsilon = epsilon;
  set.pooled_propensity = pooled;
  set.provenance = static_cast<int>(training_units.size()) == data.n_units
                       ? "full-sample"
                       : "subset(" + std::to_string(training_units.size()) + ")";

  std::vector<std::string> failures;
  for (int k = 1; k <= horizon; ++k) {
    for (const int j : {k, k - 1}) {
      try {
        set.chains[{j, k}] = fit_outcome_chain(
            data, regime, schedule, j, k, learners.outcome, training_units,
            derive_seed(seed, 0xc4a1, static_cast<std::uint64_t>(j),
                        static_cast<std::uint64_t>(k)));
      } catch (const Error& e) {
        failures.push_back("chain(j=" + std::to_string(j) + ",k=" + std::to_string(k) +
                           "): " + e.what());
      }
    }
  }

  try {
    if (pooled) {
      set.propensity = fit_pooled_propensity(data, regime, schedule, horizon,
                                             learners.propensity, training_units,
                                             derive_seed(seed, 0x96e7), lag_window);
    } else {
      for (int m = 1; m <= horizon; ++m)
        set.propensity.push_back(fit_propensity(data, regime, schedule, m,
                                                learners.propensity, training_units,
                                                derive_seed(seed, 0x96e8)));
    }
  } catch (const Error& e) {
    failures.push_back(std::string("propensity: ") + e.what());
  }

  if (!failures.empty()) {
    std::string msg = "nuisance fitting failed:";
    for (const auto& f : failures) msg += "\n  " + f;
    throw EstimationError(msg);
  }

  set.cumulative_g = cumulative_propensity(set.propensity, epsilon, &set.truncation_counts);
  return set;
}

nlohmann::json nuisance_summary(const NuisanceSet& set) {
  nlohmann::json chains = nlohmann::json::array();
  for (const auto& [key, chain] : set.chains) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& model : chain.stage_models)
      stages.push_back(to_string(model.spec().kind));
    chains.push_back({{"j", key.first}, {"k", key.second}, {"stage_kinds", stages}});
  }
  nlohmann::json propensity = nlohmann::json::array();
  for (const auto& f : set.propensity) {
    propensity.push_back({{"m", f.m},
                          {"degenerate", f.degenerate},
                          {"pooled", f.pooled},
                          {"stratum_size", f.stratum_size}});
  }
  return {{"horizon", set.horizon},
          {"epsilon", set.epsilon},
          {"provenance", set.provenance},
          {"chains", chains},
          {"propensity", propensity},
          {"truncation_counts", set.truncation_counts}};
}

}  // namespace didmean
