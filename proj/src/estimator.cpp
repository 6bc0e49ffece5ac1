#include "didmean/estimator.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include "didmean/errors.hpp"
#include "didmean/rng.hpp"

namespace didmean {

namespace {

constexpr double kNormal975 = 1.959963984540054;

std::string fmt(double v, int precision = 6) {
  std::ostringstream out;
  out.precision(precision);
  out << v;
  return out.str();
}

}  // namespace

Eigen::VectorXd phi_tilde(const NuisanceSet& nuisances,
                          const ComplianceProfile& compliance,
                          const PanelDataset& data, int j, int k) {
  const auto it = nuisances.chains.find({j, k});
  if (it == nuisances.chains.end())
    throw EstimationError("nuisance set is missing the (j=" + std::to_string(j) +
                          ", k=" + std::to_string(k) + ") regression chain");
  const OutcomeChain& chain = it->second;
  if (static_cast<int>(nuisances.propensity.size()) < k)
    throw EstimationError("nuisance set is missing propensities up to m=" +
                          std::to_string(k));

  const int n = data.n_units;
  Eigen::VectorXd phi = chain.stage_predictions.col(0);  // stage m = 1
  for (int m = 1; m <= k; ++m) {
    const Eigen::VectorXd& q_m = chain.stage_predictions.col(m - 1);
    // Stage k+1 values are the raw outcomes at time j.
    const Eigen::VectorXd q_next =
        m == k ? Eigen::VectorXd(data.outcome.col(j)) : chain.stage_predictions.col(m);
    for (int i = 0; i < n; ++i) {
      if (compliance.indicator(i, m) != 1) continue;
      const double g = nuisances.cumulative_g(i, m - 1);
      if (g <= 0.0)
        throw EstimationError("non-positive cumulative propensity at unit " +
                              std::to_string(i) + ", m=" + std::to_string(m));
      phi[i] += (q_next[i] - q_m[i]) / g;
    }
  }
  return phi;
}

OneStepResult one_step(const PanelDataset& data, const Regime& regime,
                       const ComplianceProfile& compliance,
                       const NuisanceSet& nuisances, int t) {
  validate_regime(data, regime);
  if (t < 0 || t > data.horizon) throw ValidationError("horizon t out of range");
  OneStepResult result;
  result.contributions.total = data.outcome.col(0);
  if (t == 0) {
    result.psi = result.contributions.total.mean();
    return result;
  }
  if (nuisances.horizon < t)
    throw EstimationError("nuisance set covers horizon " +
                          std::to_string(nuisances.horizon) + " < requested " +
                          std::to_string(t));
  for (int k = 1; k <= t; ++k) {
    Eigen::VectorXd lead = phi_tilde(nuisances, compliance, data, k, k);
    Eigen::VectorXd lag = phi_tilde(nuisances, compliance, data, k - 1, k);
    result.contributions.total += lead - lag;
    result.contributions.components[{k, k}] = std::move(lead);
    result.contributions.components[{k - 1, k}] = std::move(lag);
  }
  result.psi = result.contributions.total.mean();
  return result;
}

namespace {

// Exhaustive empirical iterated conditional means over exact-value strata.
// Returns the stage-1 values for every unit; errors if any unit's stratum
// has no compliant members at some stage.
Eigen::VectorXd iterated_means(const PanelDataset& data,
                               const ComplianceProfile& comp,
                               const AdjustmentSchedule& schedule, int j, int k) {
  Eigen::VectorXd values = data.outcome.col(j);
  for (int m = k; m >= 1; --m) {
    const Eigen::MatrixXd design = design_matrix(data, schedule, m);
    std::map<std::vector<double>, std::pair<double, int>> strata;
    std::vector<double> key(static_cast<std::size_t>(design.cols()));
    for (int i = 0; i < data.n_units; ++i) {
      if (comp.indicator(i, m) != 1) continue;
      for (int c = 0; c < design.cols(); ++c)
        key[static_cast<std::size_t>(c)] = design(i, c);
      auto& slot = strata[key];
      slot.first += values[i];
      slot.second += 1;
    }
    Eigen::VectorXd next(data.n_units);
    for (int i = 0; i < data.n_units; ++i) {
      for (int c = 0; c < design.cols(); ++c)
        key[static_cast<std::size_t>(c)] = design(i, c);
      const auto it = strata.find(key);
      if (it == strata.end()) {
        std::string cells;
        for (double v : key) cells += (cells.empty() ? "" : ",") + fmt(v);
        throw PositivityError("no compliant units in the stratum (" + cells +
                              ") at stage m=" + std::to_string(m));
      }
      next[i] = it->second.first / it->second.second;
    }
    values = std::move(next);
  }
  return values;
}

}  // namespace

double plug_in_psi(const PanelDataset& data, const Regime& regime,
                   const AdjustmentSchedule& schedule, int t) {
  validate_regime(data, regime);
  if (t < 0 || t > data.horizon) throw ValidationError("horizon t out of range");
  double psi = data.outcome.col(0).mean();
  if (t == 0) return psi;
  const ComplianceProfile comp = compliance(data, regime);
  for (int k = 1; k <= t; ++k) {
    psi += iterated_means(data, comp, schedule, k, k).mean();
    psi -= iterated_means(data, comp, schedule, k - 1, k).mean();
  }
  return psi;
}

double eif_variance(const Eigen::VectorXd& contributions, double psi) {
  return (contributions.array() - psi).square().sum() /
         static_cast<double>(contributions.size());
}

PositivityReport positivity_diagnostics(const NuisanceSet& nuisances,
                                        const ComplianceProfile& compliance,
                                        int small_stratum_threshold) {
  PositivityReport report;
  report.small_stratum_threshold = small_stratum_threshold;
  const int horizon = nuisances.horizon;
  const int n = static_cast<int>(compliance.indicator.rows());

  for (int m = 0; m <= horizon; ++m)
    report.compliant_counts.push_back(compliance.indicator.col(m).sum());
  report.truncation_counts = nuisances.truncation_counts;

  for (int m = 1; m <= horizon; ++m) {
    const auto col = nuisances.cumulative_g.col(m - 1);
    report.min_g.push_back(col.minCoeff());
    std::vector<int> bins(10, 0);
    for (int i = 0; i < n; ++i) {
      int b = static_cast<int>(col[i] * 10.0);
      b = std::min(std::max(b, 0), 9);
      ++bins[static_cast<std::size_t>(b)];
    }
    report.g_histogram.push_back(std::move(bins));
    if (report.compliant_counts[static_cast<std::size_t>(m)] < small_stratum_threshold)
      report.small_strata.push_back(m);
  }
  return report;
}

nlohmann::json to_json(const PositivityReport& report) {
  return {{"min_g", report.min_g},
          {"truncation_counts", report.truncation_counts},
          {"compliant_counts", report.compliant_counts},
          {"small_strata", report.small_strata},
          {"small_stratum_threshold", report.small_stratum_threshold},
          {"g_histogram", report.g_histogram}};
}

double lower_median(std::vector<double> values) {
  if (values.empty()) throw Error("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t idx = (values.size() + 1) / 2 - 1;  // order statistic ceil(K/2)
  return values[idx];
}

FoldPlan make_fold_plan(int n_units, int m_folds, int k_repetitions,
                        std::uint64_t seed) {
  if (m_folds < 2) throw ValidationError("cross-fitting requires M >= 2 folds");
  if (k_repetitions < 1) throw ValidationError("K repetitions must be >= 1");
  if (n_units < m_folds)
    throw ValidationError("fewer units than folds; reduce M");
  FoldPlan plan;
  plan.m_folds = m_folds;
  plan.k_repetitions = k_repetitions;
  plan.seed = seed;
  for (int rep = 0; rep < k_repetitions; ++rep) {
    plan.fold_of_unit.push_back(
        cv_fold_ids(n_units, m_folds,
                    derive_seed(seed, 0xF01d, static_cast<std::uint64_t>(rep))));
  }
  return plan;
}

namespace {

void fill_horizon_stats(HorizonEstimate& h, int n) {
  h.se = std::sqrt(h.variance / n);
  h.ci_lower = h.psi - kNormal975 * h.se;
  h.ci_upper = h.psi + kNormal975 * h.se;
}

std::vector<int> sorted_horizons(std::vector<int> horizons, int panel_horizon) {
  if (horizons.empty()) {
    for (int t = 0; t <= panel_horizon; ++t) horizons.push_back(t);
  }
  std::sort(horizons.begin(), horizons.end());
  horizons.erase(std::unique(horizons.begin(), horizons.end()), horizons.end());
  for (int t : horizons)
    if (t < 0 || t > panel_horizon)
      throw ValidationError("requested horizon " + std::to_string(t) +
                            " outside 0..panel horizon");
  return horizons;
}

}  // namespace

EstimateReport estimate_full_sample(const PanelDataset& data, const Regime& regime,
                                    const AdjustmentSchedule& schedule,
                                    const NuisanceLearners& learners,
                                    const std::vector<int>& horizons_in,
                                    double epsilon, bool pooled,
                                    std::uint64_t seed, int lag_window) {
  validate_panel(data);
  const std::vector<int> horizons = sorted_horizons(horizons_in, data.horizon);
  const int t_max = horizons.back();
  const ComplianceProfile comp = compliance(data, regime);

  EstimateReport report;
  report.method = "full-sample";
  report.seed = seed;
  report.epsilon = epsilon;

  NuisanceSet nuisances;
  if (t_max >= 1) {
    nuisances = fit_nuisance_set(data, regime, schedule, t_max, learners,
                                 all_units(data), epsilon, pooled, seed, lag_window);
    report.diagnostics = positivity_diagnostics(nuisances, comp);
  } else {
    report.diagnostics.compliant_counts.push_back(comp.indicator.col(0).sum());
  }

  for (int t : horizons) {
    OneStepResult res = one_step(data, regime, comp, nuisances, t);
    HorizonEstimate h;
    h.t = t;
    h.psi = res.psi;
    h.variance = eif_variance(res.contributions.total, res.psi);
    fill_horizon_stats(h, data.n_units);
    report.horizons.push_back(h);
    report.contributions[t] = std::move(res.contributions.total);
  }
  return report;
}

EstimateReport cross_fit(const PanelDataset& data, const Regime& regime,
                         const AdjustmentSchedule& schedule,
                         const NuisanceLearners& learners,
                         const std::vector<int>& horizons_in, int m_folds,
                         int k_repetitions, double epsilon, std::uint64_t seed,
                         bool pooled, int lag_window, int threads) {
  validate_panel(data);
  const std::vector<int> horizons = sorted_horizons(horizons_in, data.horizon);
  const int t_max = horizons.back();
  if (t_max < 1)
    return estimate_full_sample(data, regime, schedule, learners, horizons,
                                epsilon, pooled, seed, lag_window);
  const ComplianceProfile comp = compliance(data, regime);
  const FoldPlan plan = make_fold_plan(data.n_units, m_folds, k_repetitions, seed);

  const int n = data.n_units;
  const int K = k_repetitions;

  // contributions[rep][horizon-index] over all units
  std::vector<std::vector<Eigen::VectorXd>> contributions(
      static_cast<std::size_t>(K));
  std::vector<std::vector<double>> rep_min_g(
      static_cast<std::size_t>(K),
      std::vector<double>(static_cast<std::size_t>(t_max), 1.0));
  std::vector<std::vector<int>> rep_truncations(
      static_cast<std::size_t>(K), std::vector<int>(static_cast<std::size_t>(t_max), 0));

  auto run_repetition = [&](int rep) {
    const std::vector<int>& fold_of = plan.fold_of_unit[static_cast<std::size_t>(rep)];
    std::vector<Eigen::VectorXd> contrib(
        horizons.size(), Eigen::VectorXd::Zero(n));
    for (int fold = 0; fold < m_folds; ++fold) {
      std::vector<int> train, held;
      for (int i = 0; i < n; ++i)
        (fold_of[static_cast<std::size_t>(i)] == fold ? held : train).push_back(i);
      NuisanceSet nuisances;
      try {
        nuisances = fit_nuisance_set(
            data, regime, schedule, t_max, learners, train, epsilon, pooled,
            derive_seed(seed, 0xCF17, static_cast<std::uint64_t>(rep),
                        static_cast<std::uint64_t>(fold)),
            lag_window);
      } catch (const Error& e) {
        throw EstimationError(std::string("fold ") + std::to_string(fold) +
                              " of repetition " + std::to_string(rep) +
                              " failed (try a smaller M): " + e.what());
      }
      for (int m = 1; m <= t_max; ++m) {
        rep_min_g[static_cast<std::size_t>(rep)][static_cast<std::size_t>(m - 1)] =
            std::min(rep_min_g[static_cast<std::size_t>(rep)][static_cast<std::size_t>(m - 1)],
                     nuisances.cumulative_g.col(m - 1).minCoeff());
        rep_truncations[static_cast<std::size_t>(rep)][static_cast<std::size_t>(m - 1)] +=
            nuisances.truncation_counts[static_cast<std::size_t>(m - 1)];
      }
      // Evaluate held-out units only; the fits cache predictions for everyone.
      std::map<std::pair<int, int>, Eigen::VectorXd> phi;
      for (int k = 1; k <= t_max; ++k) {
        phi[{k, k}] = phi_tilde(nuisances, comp, data, k, k);
        phi[{k - 1, k}] = phi_tilde(nuisances, comp, data, k - 1, k);
      }
      for (int i : held) {
        for (std::size_t hi = 0; hi < horizons.size(); ++hi) {
          const int t = horizons[hi];
          double value = data.outcome(i, 0);
          for (int k = 1; k <= t; ++k)
            value += phi.at({k, k})[i] - phi.at({k - 1, k})[i];
          contrib[hi][i] = value;
        }
      }
    }
    contributions[static_cast<std::size_t>(rep)] = std::move(contrib);
  };

  if (threads > 1 && K > 1) {
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    std::vector<std::string> errors(static_cast<std::size_t>(K));
    const int n_threads = std::min(threads, K);
    for (int w = 0; w < n_threads; ++w) {
      pool.emplace_back([&]() {
        for (int rep = next.fetch_add(1); rep < K; rep = next.fetch_add(1)) {
          try {
            run_repetition(rep);
          } catch (const std::exception& e) {
            errors[static_cast<std::size_t>(rep)] = e.what();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
      if (!e.empty()) throw EstimationError(e);
  } else {
    for (int rep = 0; rep < K; ++rep) run_repetition(rep);
  }

  EstimateReport report;
  report.method = "cross-fit(" + std::to_string(m_folds) + "," + std::to_string(K) + ")";
  report.m_folds = m_folds;
  report.k_repetitions = K;
  report.seed = seed;
  report.epsilon = epsilon;

  for (std::size_t hi = 0; hi < horizons.size(); ++hi) {
    const int t = horizons[hi];
    std::vector<double> psis(static_cast<std::size_t>(K));
    std::vector<double> vars(static_cast<std::size_t>(K));
    for (int rep = 0; rep < K; ++rep) {
      const Eigen::VectorXd& c = contributions[static_cast<std::size_t>(rep)][hi];
      psis[static_cast<std::size_t>(rep)] = c.mean();
      vars[static_cast<std::size_t>(rep)] =
          eif_variance(c, psis[static_cast<std::size_t>(rep)]);
    }
    HorizonEstimate h;
    h.t = t;
    h.psi = lower_median(psis);
    std::vector<double> combined(static_cast<std::size_t>(K));
    for (int rep = 0; rep < K; ++rep)
      combined[static_cast<std::size_t>(rep)] =
          vars[static_cast<std::size_t>(rep)] +
          (psis[static_cast<std::size_t>(rep)] - h.psi) * (psis[static_cast<std::size_t>(rep)] - h.psi);
    h.variance = lower_median(combined);
    h.repetition_estimates = psis;
    h.repetition_variances = vars;
    fill_horizon_stats(h, n);
    report.horizons.push_back(h);

    // Contributions from the repetition attaining the median estimate.
    int median_rep = 0;
    for (int rep = 0; rep < K; ++rep)
      if (psis[static_cast<std::size_t>(rep)] == h.psi) {
        median_rep = rep;
        break;
      }
    report.contributions[t] = contributions[static_cast<std::size_t>(median_rep)][hi];
  }

  // Compliance counts are a data property; min-g takes the worst fold/rep and
  // truncation counts the lower median of per-repetition totals.
  for (int m = 0; m <= t_max; ++m)
    report.diagnostics.compliant_counts.push_back(comp.indicator.col(m).sum());
  for (int m = 1; m <= t_max; ++m) {
    double worst = 1.0;
    std::vector<double> trunc(static_cast<std::size_t>(K));
    for (int rep = 0; rep < K; ++rep) {
      worst = std::min(worst, rep_min_g[static_cast<std::size_t>(rep)][static_cast<std::size_t>(m - 1)]);
      trunc[static_cast<std::size_t>(rep)] =
          rep_truncations[static_cast<std::size_t>(rep)][static_cast<std::size_t>(m - 1)];
    }
    report.diagnostics.min_g.push_back(worst);
    report.diagnostics.truncation_counts.push_back(
        static_cast<int>(lower_median(trunc)));
  }
  return report;
}

nlohmann::json report_to_json(const EstimateReport& report) {
  nlohmann::json horizons = nlohmann::json::array();
  for (const auto& h : report.horizons) {
    nlohmann::json jh = {{"t", h.t},
                         {"psi", h.psi},
                         {"variance", h.variance},
                         {"se", h.se},
                         {"ci_lower", h.ci_lower},
                         {"ci_upper", h.ci_upper}};
    if (!h.repetition_estimates.empty()) {
      jh["repetition_estimates"] = h.repetition_estimates;
      jh["repetition_variances"] = h.repetition_variances;
    }
    horizons.push_back(jh);
  }
  return {{"method", report.method},
          {"m_folds", report.m_folds},
          {"k_repetitions", report.k_repetitions},
          {"seed", report.seed},
          {"epsilon", report.epsilon},
          {"horizons", horizons},
          {"diagnostics", to_json(report.diagnostics)}};
}

std::string report_to_text(const EstimateReport& report) {
  std::ostringstream out;
  out << "method: " << report.method << "\n";
  char line[160];
  std::snprintf(line, sizeof(line), "%4s %14s %14s %14s %14s\n", "t", "estimate",
                "std.error", "ci.lower", "ci.upper");
  out << line;
  for (const auto& h : report.horizons) {
    std::snprintf(line, sizeof(line), "%4d %14.6f %14.6f %14.6f %14.6f\n", h.t,
                  h.psi, h.se, h.ci_lower, h.ci_upper);
    out << line;
  }
  return out.str();
}

std::string contributions_to_csv(const EstimateReport& report,
                                 const PanelDataset& data) {
  std::ostringstream out;
  out << "unit";
  for (const auto& [t, c] : report.contributions) out << ",contribution_t" << t;
  out << "\n";
  char buf[40];
  for (int i = 0; i < data.n_units; ++i) {
    out << data.unit_labels[static_cast<std::size_t>(i)];
    for (const auto& [t, c] : report.contributions) {
      std::snprintf(buf, sizeof(buf), "%.17g", c[i]);
      out << "," << buf;
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace didmean
