#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>

#include "didmean/errors.hpp"
#include "didmean/panel.hpp"
#include "didmean/simulate.hpp"
#include "helpers.hpp"

using namespace didmean;

namespace {

nlohmann::json load_fixture(const std::string& name) {
  std::ifstream in(std::string(DIDMEAN_DATA_DIR) + "/" + name);
  REQUIRE(in.good());
  nlohmann::json j;
  in >> j;
  return j;
}

}  // namespace

TEST_CASE("coefficient draws are deterministic in the seed") {
  const DGPConfig a = draw_coefficients(99);
  const DGPConfig b = draw_coefficients(99);
  CHECK(a.coef.w1 == b.coef.w1);
  CHECK(a.coef.y == b.coef.y);
  const DGPConfig c = draw_coefficients(100);
  CHECK(a.coef.w1[0][0] != c.coef.w1[0][0]);
}

TEST_CASE("committed coefficient fixture matches its seed") {
  const auto fixture = load_fixture("dgp_default.json");
  const DGPConfig from_fixture = dgp_config_from_json(fixture);
  const DGPConfig redrawn = draw_coefficients(from_fixture.coefficient_seed);
  CHECK(redrawn.coef.w1 == from_fixture.coef.w1);
  CHECK(redrawn.coef.w2 == from_fixture.coef.w2);
  CHECK(redrawn.coef.w3 == from_fixture.coef.w3);
  CHECK(redrawn.coef.a == from_fixture.coef.a);
  CHECK(redrawn.coef.y == from_fixture.coef.y);
}

TEST_CASE("panel generation mechanics") {
  DGPConfig cfg = draw_coefficients(7);
  cfg.n_units = 4000;

  SUBCASE("determinism") {
    const PanelDataset a = generate_panel(cfg, 5);
    const PanelDataset b = generate_panel(cfg, 5);
    CHECK((a.outcome - b.outcome).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.treatment - b.treatment).cwiseAbs().maxCoeff() == 0);
  }
  SUBCASE("treated units revert with probability one") {
    // the (1 - A_{t-1}) factor zeroes the follow-on probability
    const PanelDataset data = generate_panel(cfg, 6);
    for (int i = 0; i < data.n_units; ++i)
      for (int t = 1; t <= 2; ++t)
        if (data.treatment(i, t - 1) == 1) CHECK(data.treatment(i, t) == 0);
  }
  SUBCASE("forced baseline satisfies the design requirement") {
    DGPConfig big = cfg;
    big.n_units = 10000;
    const PanelDataset data = generate_panel(big, 8);
    const auto report = check_baseline_regime(data, Regime{{0, 0, 0}});
    CHECK(report.fraction_compliant == 1.0);
  }
  SUBCASE("stochastic baseline produces some treated units at t=0") {
    DGPConfig stochastic = cfg;
    stochastic.force_baseline_regime = false;
    stochastic.n_units = 5000;
    const PanelDataset data = generate_panel(stochastic, 9);
    const auto report = check_baseline_regime(data, Regime{{0, 0, 0}});
    CHECK(report.fraction_compliant < 1.0);
    CHECK(report.fraction_compliant > 0.0);
  }
}

TEST_CASE("W1 at t=0 has the stated mean") {
  DGPConfig cfg = draw_coefficients(13);
  cfg.n_units = 1000000;
  const PanelDataset data = generate_panel(cfg, 21);
  const double mean_w1 = data.covariates[0].col(0).mean();
  // W1_0 ~ N(gamma_010, sd = 0.1), so the MC SE of the mean is 1e-4
  const double mc_se = cfg.noise_sd / std::sqrt(1e6);
  CHECK(std::abs(mean_w1 - cfg.coef.w1[0][0]) < 4.0 * mc_se);
}

TEST_CASE("truth oracle") {
  DGPConfig cfg = draw_coefficients(17);

  SUBCASE("rejects tiny Monte-Carlo sizes") {
    CHECK_THROWS_AS(truth_oracle(cfg, 100, 1), ValidationError);
  }
  SUBCASE("two independent seeds agree within combined error") {
    const TruthTable a = truth_oracle(cfg, 400000, 100);
    const TruthTable b = truth_oracle(cfg, 400000, 200);
    for (int t = 0; t < 3; ++t) {
      const double combined =
          std::sqrt(a.mc_se[t] * a.mc_se[t] + b.mc_se[t] * b.mc_se[t]);
      CHECK(std::abs(a.mu[t] - b.mu[t]) < 4.0 * combined);
    }
  }
  SUBCASE("all outcome coefficients zero leaves only the mean-zero confounder") {
    DGPConfig zeroed = cfg;
    for (auto& row : zeroed.coef.y)
      for (auto& v : row) v = 0.0;
    const TruthTable truth = truth_oracle(zeroed, 400000, 5);
    for (int t = 0; t < 3; ++t)
      CHECK(std::abs(truth.mu[t]) < 4.0 * truth.mc_se[t]);
  }
}

TEST_CASE("committed truth fixture is reproducible within Monte-Carlo error") {
  const auto fixture = load_fixture("truth_default.json");
  const TruthTable frozen = truth_table_from_json(fixture);
  const DGPConfig cfg = draw_coefficients(frozen.coefficient_seed);
  const TruthTable regen = truth_oracle(cfg, 500000, 424242);
  for (int t = 0; t < 3; ++t) {
    const double combined = std::sqrt(frozen.mc_se[t] * frozen.mc_se[t] +
                                      regen.mc_se[t] * regen.mc_se[t]);
    CHECK(std::abs(frozen.mu[t] - regen.mu[t]) < 4.0 * combined);
  }
}

TEST_CASE("counterfactual coupling shares the noise stream") {
  DGPConfig cfg = draw_coefficients(23);
  cfg.n_units = 2000;
  const PanelDataset factual = generate_panel(cfg, 31);
  const PanelDataset forced = generate_panel_forced(cfg, 31, {0, 0, 0});
  // units that happened to stay untreated have identical trajectories
  int matched = 0;
  for (int i = 0; i < cfg.n_units; ++i) {
    if (factual.treatment.row(i).sum() != 0) continue;
    ++matched;
    for (int t = 0; t < 3; ++t) {
      CHECK(factual.outcome(i, t) == forced.outcome(i, t));
      for (int c = 0; c < 3; ++c)
        CHECK(factual.covariates[t](i, c) == forced.covariates[t](i, c));
    }
  }
  CHECK(matched > 100);  // the coupling claim must actually bite
}

TEST_CASE("parallel trends holds by construction and breaks by perturbation") {
  DGPConfig cfg = draw_coefficients(29);

  SUBCASE("default construction") {
    const TrendCheck check = check_parallel_trends(cfg, 300000, 11);
    for (int t = 0; t < 2; ++t)
      CHECK(std::abs(check.corr[t]) < 4.0 * check.mc_se[t]);
  }
  SUBCASE("confounder injected into the covariate equation") {
    DGPConfig broken = cfg;
    broken.u_in_w1 = 1.0;
    const TrendCheck check = check_parallel_trends(broken, 300000, 12);
    for (int t = 0; t < 2; ++t)
      CHECK(std::abs(check.corr[t]) > 10.0 * check.mc_se[t]);
  }
  SUBCASE("scaling the confounder does not break additivity") {
    DGPConfig scaled = cfg;
    scaled.u_scale = 5.0;
    for (int t = 1; t < 3; ++t)
      for (int s = 0; s < 4; ++s) scaled.coef.y[t][s] = scaled.coef.y[0][s];
    const TrendCheck check = check_parallel_trends(scaled, 300000, 13);
    for (int t = 0; t < 2; ++t)
      CHECK(std::abs(check.corr[t]) < 4.0 * check.mc_se[t]);
  }
}

TEST_CASE("dgp config json round trip") {
  DGPConfig cfg = draw_coefficients(31);
  cfg.u_in_w1 = 0.5;
  cfg.u_scale = 2.0;
  cfg.n_units = 123;
  cfg.force_baseline_regime = false;
  const DGPConfig back = dgp_config_from_json(to_json(cfg));
  CHECK(back.coef.w3 == cfg.coef.w3);
  CHECK(back.u_in_w1 == 0.5);
  CHECK(back.u_scale == 2.0);
  CHECK(back.n_units == 123);
  CHECK_FALSE(back.force_baseline_regime);
}

TEST_CASE("state example generator is deterministic") {
  const PanelDataset a = generate_state_example(424241);
  const PanelDataset b = generate_state_example(424241);
  CHECK(a.n_units == 51);
  CHECK(a.horizon == 6);
  CHECK((a.outcome - b.outcome).cwiseAbs().maxCoeff() == 0.0);
  // the committed fixture was produced by this generator at this seed
  const auto report = check_baseline_regime(a, Regime{{1, 1, 1, 1, 1, 1, 1}});
  CHECK(report.fraction_compliant == 1.0);
}
