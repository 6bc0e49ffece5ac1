// didmean: estimate intervention-specific means from panel data under a
// conditional parallel trends assumption, plus the simulation and benchmark
// harnesses. Subcommands: simulate, estimate, bench, diagnose.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "didmean/bench.hpp"
#include "didmean/errors.hpp"
#include "didmean/estimator.hpp"
#include "didmean/learners.hpp"
#include "didmean/nuisance.hpp"
#include "didmean/panel.hpp"
#include "didmean/rng.hpp"
#include "didmean/simulate.hpp"

namespace {

using nlohmann::json;

constexpr std::uint64_t kDefaultSeed = 20240501;
constexpr std::uint64_t kDefaultCoefficientSeed = 12;

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw didmean::ValidationError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw didmean::ValidationError("invalid JSON in " + path + ": " + e.what());
  }
  return j;
}

void write_json_file(const std::string& path, const json& j) {
  didmean::atomic_write_file(path, j.dump(2) + "\n");
}

struct EstimateOptions {
  std::string input;
  std::string config;
  std::string out_dir = ".";
  std::vector<int> horizons;
  bool dump_if = false;
  std::optional<std::uint64_t> seed;
  std::optional<double> epsilon;
  std::optional<int> m_folds;
  std::optional<int> k_reps;
  bool cross_fit_flag = false;
  int threads = 0;
};

struct RunSettings {
  didmean::Regime regime;
  didmean::AdjustmentSchedule schedule;
  didmean::NuisanceLearners learners;
  double epsilon = 0.01;
  int m_folds = 2;
  int k_reps = 1;
  bool full_sample = true;
  bool pooled = false;
  int lag_window = 0;
  std::uint64_t seed = kDefaultSeed;
  std::vector<int> horizons;
};

// Config file provides the baseline; command-line flags win.
RunSettings resolve_settings(const json& cfg, const didmean::PanelDataset& data,
                             const EstimateOptions& opt) {
  RunSettings s;
  if (!cfg.contains("regime"))
    throw didmean::ValidationError("config requires a regime list");
  for (const auto& v : cfg.at("regime")) s.regime.path.push_back(v.get<int>());
  s.schedule = didmean::schedule_from_json(
      cfg.contains("adjustment") ? cfg.at("adjustment") : json("default"), data);
  if (cfg.contains("outcome_learner"))
    s.learners.outcome = didmean::learner_spec_from_json(cfg.at("outcome_learner"));
  else
    s.learners.outcome.kind = didmean::LearnerKind::Linear;
  if (cfg.contains("propensity_learner"))
    s.learners.propensity =
        didmean::learner_spec_from_json(cfg.at("propensity_learner"));
  else
    s.learners.propensity.kind = didmean::LearnerKind::Logistic;
  s.epsilon = cfg.value("epsilon", 0.01);
  s.m_folds = cfg.value("m_folds", 2);
  s.k_reps = cfg.value("k_reps", 1);
  s.full_sample = cfg.value("full_sample", true);
  s.pooled = cfg.value("pooled_propensity", false);
  s.lag_window = cfg.value("pool_lag", 0);
  s.seed = cfg.value("seed", kDefaultSeed);
  if (cfg.contains("horizons"))
    for (const auto& v : cfg.at("horizons")) s.horizons.push_back(v.get<int>());

  if (opt.seed) s.seed = *opt.seed;
  if (opt.epsilon) s.epsilon = *opt.epsilon;
  if (opt.m_folds) s.m_folds = *opt.m_folds;
  if (opt.k_reps) s.k_reps = *opt.k_reps;
  if (opt.cross_fit_flag) s.full_sample = false;
  if (!opt.horizons.empty()) s.horizons = opt.horizons;
  return s;
}

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

int run_simulate(std::uint64_t seed, std::uint64_t coef_seed, int n_units,
                 long n_mc, bool stochastic_baseline, bool confound_w1,
                 const std::string& out_dir) {
  didmean::DGPConfig cfg = didmean::draw_coefficients(coef_seed);
  cfg.n_units = n_units;
  cfg.force_baseline_regime = !stochastic_baseline;
  if (confound_w1) cfg.u_in_w1 = 1.0;

  std::filesystem::create_directories(out_dir);
  const didmean::PanelDataset panel = didmean::generate_panel(cfg, seed);
  didmean::save_panel(panel, out_dir + "/panel.csv");

  const didmean::TruthTable truth =
      didmean::truth_oracle(cfg, n_mc, didmean::derive_seed(seed, 0x0123));
  const json sidecar = {{"dgp", didmean::to_json(cfg)},
                        {"truth", didmean::to_json(truth)},
                        {"panel_seed", seed}};
  write_json_file(out_dir + "/truth.json", sidecar);

  std::cout << "wrote " << out_dir << "/panel.csv (" << panel.n_units
            << " units, horizon " << panel.horizon << ") and truth.json\n";
  return 0;
}

int run_estimate(const EstimateOptions& opt) {
  const json cfg = load_json_file(opt.config);
  const didmean::PanelSchema schema = didmean::schema_from_json(cfg);
  const didmean::PanelDataset data = didmean::load_panel(opt.input, schema);
  const RunSettings s = resolve_settings(cfg, data, opt);
  didmean::validate_regime(data, s.regime);

  didmean::EstimateReport report;
  if (s.full_sample) {
    report = didmean::estimate_full_sample(data, s.regime, s.schedule, s.learners,
                                           s.horizons, s.epsilon, s.pooled, s.seed,
                                           s.lag_window);
  } else {
    report = didmean::cross_fit(data, s.regime, s.schedule, s.learners, s.horizons,
                                s.m_folds, s.k_reps, s.epsilon, s.seed, s.pooled,
                                s.lag_window, resolve_threads(opt.threads));
  }

  std::filesystem::create_directories(opt.out_dir);
  write_json_file(opt.out_dir + "/report.json", didmean::report_to_json(report));
  didmean::atomic_write_file(opt.out_dir + "/report.txt",
                             didmean::report_to_text(report));
  if (opt.dump_if) {
    didmean::atomic_write_file(opt.out_dir + "/if_contributions.csv",
                               didmean::contributions_to_csv(report, data));
  }
  std::cout << didmean::report_to_text(report);
  return 0;
}

int run_bench(const std::vector<int>& n_list, int reps,
              const std::vector<std::string>& config_labels, std::uint64_t seed,
              std::uint64_t coef_seed, long n_mc, int super_m, int super_k,
              const std::string& out_dir, int threads) {
  const didmean::DGPConfig dgp = didmean::draw_coefficients(coef_seed);
  const didmean::TruthTable truth =
      didmean::truth_oracle(dgp, n_mc, didmean::derive_seed(coef_seed, 0x7a91));

  std::vector<didmean::EstimatorConfig> configs;
  for (const auto& config : didmean::standard_configs(super_m, super_k)) {
    if (config_labels.empty() ||
        std::find(config_labels.begin(), config_labels.end(), config.label) !=
            config_labels.end())
      configs.push_back(config);
  }
  if (configs.empty())
    throw didmean::ValidationError(
        "no configs selected; choose among true,gfal,qfal,bfal,super");

  const didmean::BenchResult result = didmean::run_replications(
      dgp, configs, n_list, reps, truth, seed, resolve_threads(threads));

  std::filesystem::create_directories(out_dir);
  didmean::atomic_write_file(out_dir + "/table.txt", render_table_text(result));
  didmean::atomic_write_file(out_dir + "/table.csv", render_table_csv(result));
  didmean::atomic_write_file(out_dir + "/replicates.csv", replicates_csv(result));

  json meta = {{"seed", seed},
               {"coefficient_seed", coef_seed},
               {"n_list", n_list},
               {"reps", reps},
               {"n_mc_truth", n_mc},
               {"super_m_folds", super_m},
               {"super_k_repetitions", super_k},
               {"truth", didmean::to_json(truth)},
               {"failures", result.failures}};
  json labels = json::array();
  for (const auto& config : configs) labels.push_back(config.label);
  meta["configs"] = labels;
  write_json_file(out_dir + "/meta.json", meta);

  std::cout << render_table_text(result);
  std::cout << "failures: " << result.failures << "  (wall "
            << static_cast<long>(result.wall_seconds) << "s)\n";
  return result.failures == 0 ? 0 : 2;
}

int run_diagnose(const std::string& input, const std::string& config_path,
                 const std::string& out_dir) {
  const json cfg = load_json_file(config_path);
  const didmean::PanelSchema schema = didmean::schema_from_json(cfg);
  const didmean::PanelDataset data = didmean::load_panel(input, schema);
  const RunSettings s = resolve_settings(cfg, data, EstimateOptions{});
  didmean::validate_regime(data, s.regime);

  const didmean::ComplianceProfile comp = didmean::compliance(data, s.regime);
  const didmean::BaselineReport baseline = didmean::check_baseline_regime(data, s.regime);

  json out = {{"n_units", data.n_units},
              {"horizon", data.horizon},
              {"baseline_fraction_compliant", baseline.fraction_compliant},
              {"baseline_violating_units", baseline.violating_units}};

  if (data.horizon >= 1) {
    const didmean::NuisanceSet nuisances = didmean::fit_nuisance_set(
        data, s.regime, s.schedule, data.horizon, s.learners,
        didmean::all_units(data), s.epsilon, s.pooled, s.seed, s.lag_window);
    const didmean::PositivityReport report =
        didmean::positivity_diagnostics(nuisances, comp);
    out["positivity"] = didmean::to_json(report);
    out["nuisance"] = didmean::nuisance_summary(nuisances);
  }

  std::filesystem::create_directories(out_dir);
  write_json_file(out_dir + "/diagnose.json", out);
  std::cout << out.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Intervention-specific mean estimation for panel data under "
               "conditional parallel trends"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (0 = hardware)");

  // simulate
  auto* sim = app.add_subcommand("simulate", "Generate a synthetic panel and its ground truth");
  std::uint64_t sim_seed = kDefaultSeed;
  std::uint64_t sim_coef_seed = kDefaultCoefficientSeed;
  int sim_n = 1000;
  long sim_nmc = 1000000;
  bool sim_stochastic_baseline = false;
  bool sim_confound = false;
  std::string sim_out = "sim_out";
  sim->add_option("--seed", sim_seed, "Panel RNG seed");
  sim->add_option("--coef-seed", sim_coef_seed, "Structural coefficient seed");
  sim->add_option("--n", sim_n, "Number of units");
  sim->add_option("--n-mc", sim_nmc, "Monte-Carlo size for the truth oracle");
  sim->add_flag("--stochastic-baseline", sim_stochastic_baseline,
                "Draw A_0 from the model instead of pinning it to 0");
  sim->add_flag("--confound-w1", sim_confound,
                "Inject the confounder into the W1 equation (breaks parallel trends)");
  sim->add_option("--out", sim_out, "Output directory");

  // estimate
  auto* est = app.add_subcommand("estimate", "Estimate from a panel CSV and a JSON config");
  EstimateOptions opt;
  est->add_option("--input", opt.input, "Panel CSV path")->required();
  est->add_option("--config", opt.config, "JSON config path")->required();
  est->add_option("--out", opt.out_dir, "Output directory");
  est->add_option("--horizons", opt.horizons, "Horizons to report (default: all)");
  est->add_flag("--dump-if", opt.dump_if, "Write per-unit influence contributions CSV");
  std::uint64_t est_seed = 0;
  double est_eps = -1.0;
  int est_m = 0, est_k = 0;
  est->add_option("--seed", est_seed, "Seed override");
  est->add_option("--epsilon", est_eps, "Propensity truncation level override");
  est->add_option("--m-folds", est_m, "Cross-fit fold count override");
  est->add_option("--k-reps", est_k, "Cross-fit repetition count override");
  est->add_flag("--cross-fit", opt.cross_fit_flag, "Use the sample-split estimator");

  // bench
  auto* bench = app.add_subcommand("bench", "Run the replication study");
  std::vector<int> bench_n = {1000};
  int bench_reps = 300;
  std::vector<std::string> bench_configs;
  std::uint64_t bench_seed = kDefaultSeed;
  std::uint64_t bench_coef_seed = kDefaultCoefficientSeed;
  long bench_nmc = 2000000;
  int bench_m = 2, bench_k = 10;
  std::string bench_out = "bench_out";
  bench->add_option("--n", bench_n, "Sample sizes");
  bench->add_option("--reps", bench_reps, "Replicates per sample size");
  bench->add_option("--configs", bench_configs,
                    "Subset of {true,gfal,qfal,bfal,super} (default: all)");
  bench->add_option("--seed", bench_seed, "Master seed");
  bench->add_option("--coef-seed", bench_coef_seed, "Structural coefficient seed");
  bench->add_option("--n-mc", bench_nmc, "Truth-oracle Monte-Carlo size");
  bench->add_option("--m-folds", bench_m, "Cross-fit folds for the super config");
  bench->add_option("--k-reps", bench_k, "Cross-fit repetitions for the super config");
  bench->add_option("--out-dir", bench_out, "Output directory");

  // diagnose
  auto* diag = app.add_subcommand("diagnose", "Positivity and compliance report");
  std::string diag_input, diag_config, diag_out = ".";
  diag->add_option("--input", diag_input, "Panel CSV path")->required();
  diag->add_option("--config", diag_config, "JSON config path")->required();
  diag->add_option("--out", diag_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (sim->parsed()) {
      return run_simulate(sim_seed, sim_coef_seed, sim_n, sim_nmc,
                          sim_stochastic_baseline, sim_confound, sim_out);
    }
    if (est->parsed()) {
      if (est->count("--seed")) opt.seed = est_seed;
      if (est_eps >= 0) opt.epsilon = est_eps;
      if (est_m > 0) opt.m_folds = est_m;
      if (est_k > 0) opt.k_reps = est_k;
      opt.threads = threads;
      return run_estimate(opt);
    }
    if (bench->parsed()) {
      return run_bench(bench_n, bench_reps, bench_configs, bench_seed,
                       bench_coef_seed, bench_nmc, bench_m, bench_k, bench_out,
                       threads);
    }
    if (diag->parsed()) {
      return run_diagnose(diag_input, diag_config, diag_out);
    }
  } catch (const didmean::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const didmean::Error& e) {
    std::cerr << "estimation error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
