#include "didmean/bench.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <thread>

#include "didmean/errors.hpp"
#include "didmean/estimator.hpp"
#include "didmean/rng.hpp"

namespace didmean {

FeatureMap simulation_outcome_truth_map() {
  // The transforms of the outcome equation, per time block. skip_missing
  // lets one map serve every regression stage width.
  FeatureMap map;
  map.kind = FeatureMap::Custom;
  map.include_raw = true;
  map.skip_missing = true;
  for (int t = 0; t < 3; ++t) {
    const std::string suffix = "@t" + std::to_string(t);
    map.terms.push_back({FeatureTerm::Sin, "W1" + suffix, ""});
    map.terms.push_back({FeatureTerm::Product, "W2" + suffix, "W3" + suffix});
  }
  return map;
}

FeatureMap simulation_propensity_truth_map() {
  // The transforms of the treatment equation. The stage-0 block never enters
  // a propensity fit (stages start at m = 1).
  FeatureMap map;
  map.kind = FeatureMap::Custom;
  map.include_raw = true;
  map.skip_missing = true;
  for (int t = 1; t < 3; ++t) {
    const std::string suffix = "@t" + std::to_string(t);
    map.terms.push_back({FeatureTerm::Cos, "W2" + suffix, ""});
    map.terms.push_back({FeatureTerm::Square, "W3" + suffix, ""});
  }
  return map;
}

FeatureMap misspecify(const FeatureMap&) {
  // Raw untransformed linear terms only.
  return FeatureMap{};
}

std::vector<EstimatorConfig> standard_configs(int super_m_folds,
                                              int super_k_repetitions) {
  LearnerSpec outcome_true;
  outcome_true.kind = LearnerKind::Linear;
  outcome_true.feature_map = simulation_outcome_truth_map();
  LearnerSpec outcome_raw = outcome_true;
  outcome_raw.feature_map = misspecify(outcome_true.feature_map);

  LearnerSpec prop_true;
  prop_true.kind = LearnerKind::Logistic;
  prop_true.feature_map = simulation_propensity_truth_map();
  LearnerSpec prop_raw = prop_true;
  prop_raw.feature_map = misspecify(prop_true.feature_map);

  // Stacking libraries: mean, raw linear/logistic, quadratic-feature
  // linear/logistic (interactions only where products matter for the
  // outcome), bagged shallow trees on the outcome side.
  LearnerSpec stack_outcome;
  stack_outcome.kind = LearnerKind::Stack;
  stack_outcome.cv_folds = 5;
  {
    LearnerSpec mean;
    LearnerSpec lin_raw;
    lin_raw.kind = LearnerKind::Linear;
    LearnerSpec lin_poly;
    lin_poly.kind = LearnerKind::Linear;
    lin_poly.feature_map.kind = FeatureMap::Polynomial;
    lin_poly.feature_map.degree = 2;
    lin_poly.feature_map.interactions = true;
    LearnerSpec trees;
    trees.kind = LearnerKind::BaggedTrees;
    trees.n_bags = 10;
    trees.max_depth = 3;
    trees.min_leaf = 20;
    stack_outcome.members = {mean, lin_raw, lin_poly, trees};
  }

  LearnerSpec stack_prop;
  stack_prop.kind = LearnerKind::Stack;
  stack_prop.cv_folds = 5;
  {
    LearnerSpec mean;
    LearnerSpec log_raw;
    log_raw.kind = LearnerKind::Logistic;
    LearnerSpec log_poly;
    log_poly.kind = LearnerKind::Logistic;
    log_poly.feature_map.kind = FeatureMap::Polynomial;
    log_poly.feature_map.degree = 2;
    log_poly.feature_map.interactions = false;
    stack_prop.members = {mean, log_raw, log_poly};
  }

  std::vector<EstimatorConfig> configs;
  configs.push_back({"true", outcome_true, prop_true, false, 2, 1});
  configs.push_back({"gfal", outcome_true, prop_raw, false, 2, 1});
  configs.push_back({"qfal", outcome_raw, prop_true, false, 2, 1});
  configs.push_back({"bfal", outcome_raw, prop_raw, false, 2, 1});
  configs.push_back({"super", stack_outcome, stack_prop, true, super_m_folds,
                     super_k_repetitions});
  return configs;
}

BenchResult run_replications(const DGPConfig& dgp,
                             const std::vector<EstimatorConfig>& configs,
                             const std::vector<int>& n_list, int n_reps,
                             const TruthTable& truth, std::uint64_t master_seed,
                             int threads) {
  if (n_reps < 1) throw ValidationError("n_reps must be >= 1");
  if (truth.coefficient_seed != dgp.coefficient_seed)
    throw ValidationError("truth table was computed for a different coefficient seed");
  const auto started = std::chrono::steady_clock::now();

  BenchResult result;
  result.truth = truth;
  const std::vector<int> horizons = {1, 2};

  struct Task {
    int n;
    int rep;
  };
  std::vector<Task> tasks;
  for (int n : n_list)
    for (int rep = 0; rep < n_reps; ++rep) tasks.push_back({n, rep});

  // One row slot per (task, config); filled independently, so scheduling
  // order cannot affect the stored result.
  std::vector<std::vector<ReplicateRow>> rows(
      tasks.size(), std::vector<ReplicateRow>(configs.size()));

  auto run_task = [&](std::size_t task_index) {
    const Task task = tasks[task_index];
    DGPConfig cfg = dgp;
    cfg.n_units = task.n;
    const std::uint64_t rep_seed =
        derive_seed(master_seed, static_cast<std::uint64_t>(task.n),
                    static_cast<std::uint64_t>(task.rep), 0xbe9c);
    const PanelDataset panel = generate_panel(cfg, rep_seed);
    const Regime regime{{0, 0, 0}};
    const AdjustmentSchedule schedule = default_schedule(panel);

    for (std::size_t c = 0; c < configs.size(); ++c) {
      const EstimatorConfig& config = configs[c];
      ReplicateRow row;
      row.n = task.n;
      row.rep = task.rep;
      row.config = config.label;
      try {
        const NuisanceLearners learners{config.outcome, config.propensity};
        const std::uint64_t est_seed = derive_seed(rep_seed, 0xec0, c);
        const EstimateReport report =
            config.use_cross_fit
                ? cross_fit(panel, regime, schedule, learners, horizons,
                            config.m_folds, config.k_repetitions, 0.01, est_seed)
                : estimate_full_sample(panel, regime, schedule, learners,
                                       horizons, 0.01, false, est_seed);
        for (std::size_t hi = 0; hi < horizons.size(); ++hi) {
          row.psi[hi] = report.horizons[hi].psi;
          // On the scale of var(psi_hat), comparable with v_sim: V-hat / n.
          row.variance[hi] = report.horizons[hi].se * report.horizons[hi].se;
          row.ci_lower[hi] = report.horizons[hi].ci_lower;
          row.ci_upper[hi] = report.horizons[hi].ci_upper;
        }
      } catch (const std::exception& e) {
        row.ok = false;
        row.error = e.what();
      }
      rows[task_index][c] = std::move(row);
    }
  };

  if (threads > 1 && tasks.size() > 1) {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const int n_threads = static_cast<int>(
        std::min(static_cast<std::size_t>(threads), tasks.size()));
    for (int w = 0; w < n_threads; ++w) {
      pool.emplace_back([&]() {
        for (std::size_t i = next.fetch_add(1); i < tasks.size();
             i = next.fetch_add(1))
          run_task(i);
      });
    }
    for (auto& th : pool) th.join();
  } else {
    for (std::size_t i = 0; i < tasks.size(); ++i) run_task(i);
  }

  for (const auto& task_rows : rows)
    for (const auto& row : task_rows) {
      if (!row.ok) ++result.failures;
      result.replicates.push_back(row);
    }

  // Aggregation from the full stored replicate vectors.
  for (int n : n_list) {
    for (const auto& config : configs) {
      for (int t : horizons) {
        const std::size_t hi = static_cast<std::size_t>(t - 1);
        std::vector<double> psis, vars;
        int covered = 0;
        for (const auto& row : result.replicates) {
          if (row.n != n || row.config != config.label || !row.ok) continue;
          psis.push_back(row.psi[hi]);
          vars.push_back(row.variance[hi]);
          const double mu = truth.mu[static_cast<std::size_t>(t)];
          if (row.ci_lower[hi] <= mu && mu <= row.ci_upper[hi]) ++covered;
        }
        BenchCell cell;
        cell.n = n;
        cell.config = config.label;
        cell.t = t;
        cell.n_reps = static_cast<int>(psis.size());
        if (psis.empty()) {
          cell.v_sim_defined = false;
          result.cells.push_back(cell);
          continue;
        }
        double mean_psi = 0.0;
        for (double p : psis) mean_psi += p;
        mean_psi /= static_cast<double>(psis.size());
        cell.bias = mean_psi - truth.mu[static_cast<std::size_t>(t)];
        cell.bias_sq = cell.bias * cell.bias;
        if (psis.size() >= 2) {
          double ss = 0.0;
          for (double p : psis) ss += (p - mean_psi) * (p - mean_psi);
          cell.v_sim = ss / static_cast<double>(psis.size() - 1);
        } else {
          cell.v_sim_defined = false;  // needs at least two replicates
        }
        double mean_v = 0.0;
        for (double v : vars) mean_v += v;
        cell.v_eif = mean_v / static_cast<double>(vars.size());
        cell.coverage = static_cast<double>(covered) / static_cast<double>(psis.size());
        result.cells.push_back(cell);
      }
    }
  }

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

namespace {

// Presentation scaling: x100, four decimals, "<0.0001" below the printable
// resolution.
std::string scaled_entry(double value, bool defined) {
  if (!defined) return "--";
  const double v = value * 100.0;
  if (v < 1e-4) return "<0.0001";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

struct TableRow {
  int n;
  std::string config;
  std::string cells[6];
};

std::vector<TableRow> table_rows(const BenchResult& result) {
  std::vector<TableRow> out;
  for (const auto& cell : result.cells) {
    if (cell.t != 1) continue;
    TableRow row;
    row.n = cell.n;
    row.config = cell.config;
    const BenchCell* c2 = nullptr;
    for (const auto& other : result.cells)
      if (other.n == cell.n && other.config == cell.config && other.t == 2) c2 = &other;
    row.cells[0] = scaled_entry(cell.bias_sq, cell.n_reps > 0);
    row.cells[1] = scaled_entry(cell.v_sim, cell.v_sim_defined);
    row.cells[2] = scaled_entry(cell.v_eif, cell.n_reps > 0);
    if (c2 != nullptr) {
      row.cells[3] = scaled_entry(c2->bias_sq, c2->n_reps > 0);
      row.cells[4] = scaled_entry(c2->v_sim, c2->v_sim_defined);
      row.cells[5] = scaled_entry(c2->v_eif, c2->n_reps > 0);
    }
    out.push_back(row);
  }
  return out;
}

}  // namespace

std::string render_table_text(const BenchResult& result) {
  std::ostringstream out;
  char line[200];
  std::snprintf(line, sizeof(line), "%8s %-6s %10s %10s %10s %10s %10s %10s\n",
                "n", "method", "bias1^2", "Vsim1", "Veif1", "bias2^2", "Vsim2",
                "Veif2");
  out << line;
  for (const auto& row : table_rows(result)) {
    std::snprintf(line, sizeof(line), "%8d %-6s %10s %10s %10s %10s %10s %10s\n",
                  row.n, row.config.c_str(), row.cells[0].c_str(),
                  row.cells[1].c_str(), row.cells[2].c_str(), row.cells[3].c_str(),
                  row.cells[4].c_str(), row.cells[5].c_str());
    out << line;
  }
  return out.str();
}

std::string render_table_csv(const BenchResult& result) {
  std::ostringstream out;
  out << "n,method,bias1_sq,v_sim1,v_eif1,bias2_sq,v_sim2,v_eif2\n";
  for (const auto& row : table_rows(result)) {
    out << row.n << "," << row.config;
    for (const auto& cell : row.cells) out << "," << cell;
    out << "\n";
  }
  return out.str();
}

std::string replicates_csv(const BenchResult& result) {
  std::ostringstream out;
  out << "n,config,rep,ok,psi1,psi2,v1,v2,ci1_lower,ci1_upper,ci2_lower,ci2_upper\n";
  char buf[40];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << "," << buf;
  };
  for (const auto& row : result.replicates) {
    out << row.n << "," << row.config << "," << row.rep << "," << (row.ok ? 1 : 0);
    put(row.psi[0]);
    put(row.psi[1]);
    put(row.variance[0]);
    put(row.variance[1]);
    put(row.ci_lower[0]);
    put(row.ci_upper[0]);
    put(row.ci_lower[1]);
    put(row.ci_upper[1]);
    out << "\n";
  }
  return out.str();
}

}  // namespace didmean
