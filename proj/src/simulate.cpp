#include "didmean/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "didmean/errors.hpp"
#include "didmean/rng.hpp"

namespace didmean {

namespace {

double expit(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct UnitDraw {
  double u;
  std::array<double, 3> w1, w2, w3, y;
  std::array<int, 3> a;
};

// One unit trajectory. Consumes exactly 13 normals and 3 uniforms per unit
// whether or not treatments are forced, so counterfactual runs sharing a seed
// stay coupled draw-for-draw with factual ones.
UnitDraw draw_unit(const DGPConfig& cfg, Rng& rng, const std::vector<int>* forced) {
  const auto& c = cfg.coef;
  UnitDraw d{};
  d.u = cfg.u_scale * rng.normal();
  double w1_prev = 0.0, w2_prev = 0.0, w3_prev = 0.0;
  int a_prev = 0;  // A at time -1 is defined as 0
  for (int t = 0; t < 3; ++t) {
    const auto st = static_cast<std::size_t>(t);
    const double w1 = c.w1[st][0] + c.w1[st][1] * w1_prev + c.w1[st][2] * a_prev +
                      cfg.u_in_w1 * d.u + cfg.noise_sd * rng.normal();
    const double w2 = c.w2[st][0] + c.w2[st][1] * w1 + c.w2[st][2] * w2_prev +
                      c.w2[st][3] * a_prev + cfg.noise_sd * rng.normal();
    const double w3 = c.w3[st][0] + c.w3[st][1] * w1 + c.w3[st][2] * w2 +
                      c.w3[st][3] * w3_prev + c.w3[st][4] * a_prev +
                      cfg.noise_sd * rng.normal();
    const double p_follow =
        (a_prev == 1 ? 0.0
                     : expit(c.a[st][0] + c.a[st][1] * w1 + c.a[st][2] * std::cos(w2) +
                             c.a[st][3] * w3 * w3 + c.a[st][4] * d.u));
    const double u_draw = rng.uniform();  // consumed even when forced
    int a = u_draw < p_follow ? 1 : 0;
    if (forced != nullptr) a = (*forced)[st];
    else if (t == 0 && cfg.force_baseline_regime) a = 0;
    const double y = c.y[st][0] + c.y[st][1] * std::sin(w1) + c.y[st][2] * w2 * w3 +
                     c.y[st][3] * a + d.u + cfg.noise_sd * rng.normal();
    d.w1[st] = w1;
    d.w2[st] = w2;
    d.w3[st] = w3;
    d.a[st] = a;
    d.y[st] = y;
    w1_prev = w1;
    w2_prev = w2;
    w3_prev = w3;
    a_prev = a;
  }
  return d;
}

std::string padded_label(int i, int n) {
  int width = 1;
  for (int v = n - 1; v >= 10; v /= 10) ++width;
  width = std::min(width, 10);
  char buf[24];
  std::snprintf(buf, sizeof(buf), "u%0*d", width, i);
  return buf;
}

PanelDataset panel_from_draws(const DGPConfig& cfg, Rng& rng,
                              const std::vector<int>* forced) {
  const int n = cfg.n_units;
  if (n < 1) throw ValidationError("n_units must be positive");
  PanelDataset data;
  data.n_units = n;
  data.horizon = 2;
  data.treatment.resize(n, 3);
  data.outcome.resize(n, 3);
  data.covariates.assign(3, Eigen::MatrixXd(n, 3));
  data.covariate_names.assign(3, {"W1", "W2", "W3"});
  data.treatment_alphabet = {0, 1};
  data.time_labels = {0.0, 1.0, 2.0};
  data.unit_labels.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const UnitDraw d = draw_unit(cfg, rng, forced);
    for (int t = 0; t < 3; ++t) {
      const auto st = static_cast<std::size_t>(t);
      data.treatment(i, t) = d.a[st];
      data.outcome(i, t) = d.y[st];
      data.covariates[st](i, 0) = d.w1[st];
      data.covariates[st](i, 1) = d.w2[st];
      data.covariates[st](i, 2) = d.w3[st];
    }
    data.unit_labels.push_back(padded_label(i, n));
  }
  return data;
}

}  // namespace

DGPConfig draw_coefficients(std::uint64_t seed) {
  DGPConfig cfg;
  cfg.coefficient_seed = seed;
  Rng rng(seed);
  // Equation by equation, time ascending, subscript ascending.
  for (auto& row : cfg.coef.w1)
    for (auto& v : row) v = rng.normal();
  for (auto& row : cfg.coef.w2)
    for (auto& v : row) v = rng.normal();
  for (auto& row : cfg.coef.w3)
    for (auto& v : row) v = rng.normal();
  for (auto& row : cfg.coef.a)
    for (auto& v : row) v = rng.normal();
  for (auto& row : cfg.coef.y)
    for (auto& v : row) v = rng.normal();
  return cfg;
}

PanelDataset generate_panel(const DGPConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  return panel_from_draws(config, rng, nullptr);
}

PanelDataset generate_panel_forced(const DGPConfig& config, std::uint64_t seed,
                                   const std::vector<int>& forced_regime) {
  if (forced_regime.size() != 3)
    throw ValidationError("forced regime must cover t = 0..2");
  Rng rng(seed);
  return panel_from_draws(config, rng, &forced_regime);
}

TruthTable truth_oracle(const DGPConfig& config, long n_mc, std::uint64_t seed) {
  if (n_mc < 100000)
    throw ValidationError("truth oracle requires n_mc >= 1e5 for a usable MC error");
  Rng rng(seed);
  const std::vector<int> zeros = {0, 0, 0};
  std::array<double, 3> sum{}, sumsq{};
  for (long i = 0; i < n_mc; ++i) {
    const UnitDraw d = draw_unit(config, rng, &zeros);
    for (int t = 0; t < 3; ++t) {
      const auto st = static_cast<std::size_t>(t);
      sum[st] += d.y[st];
      sumsq[st] += d.y[st] * d.y[st];
    }
  }
  TruthTable truth;
  truth.n_mc = n_mc;
  truth.coefficient_seed = config.coefficient_seed;
  for (int t = 0; t < 3; ++t) {
    const auto st = static_cast<std::size_t>(t);
    truth.mu[st] = sum[st] / static_cast<double>(n_mc);
    const double var =
        sumsq[st] / static_cast<double>(n_mc) - truth.mu[st] * truth.mu[st];
    truth.mc_se[st] = std::sqrt(std::max(var, 0.0) / static_cast<double>(n_mc));
  }
  return truth;
}

TrendCheck check_parallel_trends(const DGPConfig& config, long n_mc,
                                 std::uint64_t seed) {
  if (n_mc < 100000)
    throw ValidationError("parallel-trends check requires n_mc >= 1e5");
  Rng rng(seed);
  const std::vector<int> zeros = {0, 0, 0};
  // Streaming accumulators for corr(dY_t, U), t = 1, 2.
  std::array<double, 2> s_d{}, s_d2{}, s_du{};
  double s_u = 0.0, s_u2 = 0.0;
  for (long i = 0; i < n_mc; ++i) {
    const UnitDraw d = draw_unit(config, rng, &zeros);
    s_u += d.u;
    s_u2 += d.u * d.u;
    for (int t = 1; t <= 2; ++t) {
      const double diff = d.y[static_cast<std::size_t>(t)] -
                          d.y[static_cast<std::size_t>(t - 1)];
      const auto st = static_cast<std::size_t>(t - 1);
      s_d[st] += diff;
      s_d2[st] += diff * diff;
      s_du[st] += diff * d.u;
    }
  }
  const double n = static_cast<double>(n_mc);
  const double mean_u = s_u / n;
  const double var_u = s_u2 / n - mean_u * mean_u;
  TrendCheck check;
  check.n_mc = n_mc;
  for (int t = 0; t < 2; ++t) {
    const auto st = static_cast<std::size_t>(t);
    const double mean_d = s_d[st] / n;
    const double var_d = s_d2[st] / n - mean_d * mean_d;
    const double cov = s_du[st] / n - mean_d * mean_u;
    check.corr[st] = cov / std::sqrt(var_d * var_u);
    check.mc_se[st] = 1.0 / std::sqrt(n - 3.0);
  }
  return check;
}

namespace {

nlohmann::json coef_block(const auto& block) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : block) {
    nlohmann::json r = nlohmann::json::array();
    for (double v : row) r.push_back(v);
    rows.push_back(r);
  }
  return rows;
}

template <std::size_t N>
void read_coef_block(const nlohmann::json& j, std::array<std::array<double, N>, 3>& block) {
  for (std::size_t t = 0; t < 3; ++t)
    for (std::size_t s = 0; s < N; ++s) block[t][s] = j.at(t).at(s).get<double>();
}

}  // namespace

nlohmann::json to_json(const DGPConfig& config) {
  return {{"coefficient_seed", config.coefficient_seed},
          {"noise_sd", config.noise_sd},
          {"force_baseline_regime", config.force_baseline_regime},
          {"u_in_w1", config.u_in_w1},
          {"u_scale", config.u_scale},
          {"n_units", config.n_units},
          {"coefficients",
           {{"w1", coef_block(config.coef.w1)},
            {"w2", coef_block(config.coef.w2)},
            {"w3", coef_block(config.coef.w3)},
            {"a", coef_block(config.coef.a)},
            {"y", coef_block(config.coef.y)}}}};
}

DGPConfig dgp_config_from_json(const nlohmann::json& j) {
  DGPConfig cfg;
  cfg.coefficient_seed = j.at("coefficient_seed").get<std::uint64_t>();
  cfg.noise_sd = j.value("noise_sd", 0.1);
  cfg.force_baseline_regime = j.value("force_baseline_regime", true);
  cfg.u_in_w1 = j.value("u_in_w1", 0.0);
  cfg.u_scale = j.value("u_scale", 1.0);
  cfg.n_units = j.value("n_units", 1000);
  const auto& c = j.at("coefficients");
  read_coef_block(c.at("w1"), cfg.coef.w1);
  read_coef_block(c.at("w2"), cfg.coef.w2);
  read_coef_block(c.at("w3"), cfg.coef.w3);
  read_coef_block(c.at("a"), cfg.coef.a);
  read_coef_block(c.at("y"), cfg.coef.y);
  return cfg;
}

nlohmann::json to_json(const TruthTable& truth) {
  return {{"mu", truth.mu},
          {"mc_se", truth.mc_se},
          {"n_mc", truth.n_mc},
          {"coefficient_seed", truth.coefficient_seed}};
}

TruthTable truth_table_from_json(const nlohmann::json& j) {
  TruthTable truth;
  for (std::size_t t = 0; t < 3; ++t) {
    truth.mu[t] = j.at("mu").at(t).get<double>();
    truth.mc_se[t] = j.at("mc_se").at(t).get<double>();
  }
  truth.n_mc = j.at("n_mc").get<long>();
  truth.coefficient_seed = j.at("coefficient_seed").get<std::uint64_t>();
  return truth;
}

PanelDataset generate_state_example(std::uint64_t seed) {
  // 50 states plus DC; 7 annual waves; 12 state-level covariates in the roles
  // of the worked example (benefit levels, economic indices, demographic
  // shares). Treatment starts at 1 everywhere (consistent with the reference
  // jurisdiction) and may discontinue later; the outcome is a bounded health
  // share moved by a few covariates and the treatment.
  static const char* kStates[] = {
      "AK", "AL", "AR", "AZ", "CA", "CO", "CT", "DC", "DE", "FL", "GA", "HI",
      "IA", "ID", "IL", "IN", "KS", "KY", "LA", "MA", "MD", "ME", "MI", "MN",
      "MO", "MS", "MT", "NC", "ND", "NE", "NH", "NJ", "NM", "NV", "NY", "OH",
      "OK", "OR", "PA", "RI", "SC", "SD", "TN", "TX", "UT", "VA", "VT", "WA",
      "WI", "WV", "WY"};
  const std::vector<std::string> cov_names = {
      "tanf_max",    "snap_max",   "state_eitc", "unemployment",
      "income_pc",   "prop_male",  "prop_hs",    "prop_college",
      "prop_white",  "prop_black", "prop_other", "prop_over64"};
  const int n = 51;
  const int T = 7;
  const int d = 12;

  Rng rng(seed);
  PanelDataset data;
  data.n_units = n;
  data.horizon = T - 1;
  data.treatment.resize(n, T);
  data.outcome.resize(n, T);
  data.covariates.assign(static_cast<std::size_t>(T), Eigen::MatrixXd(n, d));
  data.covariate_names.assign(static_cast<std::size_t>(T), cov_names);
  data.treatment_alphabet = {0, 1};
  data.outcome_name = "good_health";
  for (int t = 0; t < T; ++t) data.time_labels.push_back(2013.0 + t);
  for (int i = 0; i < n; ++i) data.unit_labels.push_back(kStates[i]);

  const double base[12] = {650, 640, 0.1, 5.0, 45, 0.49, 0.88, 0.55, 0.7, 0.12, 0.18, 0.15};
  const double spread[12] = {150, 60, 0.08, 1.2, 8, 0.01, 0.04, 0.08, 0.15, 0.1, 0.1, 0.03};

  for (int i = 0; i < n; ++i) {
    const double state_effect = 0.04 * rng.normal();
    std::vector<double> level(static_cast<std::size_t>(d));
    for (int c = 0; c < d; ++c) level[static_cast<std::size_t>(c)] = base[c] + spread[c] * rng.normal();
    int a_prev = 1;
    for (int t = 0; t < T; ++t) {
      for (int c = 0; c < d; ++c) {
        level[static_cast<std::size_t>(c)] +=
            0.1 * spread[c] * rng.normal() + (c == 3 ? -0.05 * a_prev : 0.0);
        data.covariates[static_cast<std::size_t>(t)](i, c) = level[static_cast<std::size_t>(c)];
      }
      int a;
      if (t == 0) {
        a = 1;  // staggered-discontinuation baseline
      } else if (a_prev == 0) {
        a = rng.uniform() < 0.15 ? 1 : 0;  // occasional re-entry
      } else {
        const double p_stay = expit(2.2 + 0.15 * state_effect * 100 -
                                    0.25 * (level[3] - base[3]));
        a = rng.uniform() < p_stay ? 1 : 0;
      }
      const double health =
          0.52 + state_effect + 0.01 * a - 0.012 * (level[3] - base[3]) +
          0.002 * (level[4] - base[4]) + 0.01 * rng.normal();
      data.treatment(i, t) = a;
      data.outcome(i, t) = std::min(std::max(health, 0.0), 1.0);
      a_prev = a;
    }
  }
  return data;
}

}  // namespace didmean
