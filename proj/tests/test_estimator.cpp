#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <set>

#include "didmean/errors.hpp"
#include "didmean/estimator.hpp"
#include "didmean/rng.hpp"
#include "helpers.hpp"

using namespace didmean;
namespace dt = didmean::testing;

namespace {

LearnerSpec stratum_spec() {
  LearnerSpec spec;
  spec.kind = LearnerKind::Stratum;
  return spec;
}

PanelDataset discrete_panel(int n, int horizon, std::uint64_t seed,
                            double deviate = 0.3) {
  Rng rng(seed);
  Eigen::MatrixXi A(n, horizon + 1);
  Eigen::MatrixXd Y(n, horizon + 1);
  std::vector<Eigen::MatrixXd> X(static_cast<std::size_t>(horizon + 1),
                                 Eigen::MatrixXd(n, 1));
  for (int i = 0; i < n; ++i) {
    for (int t = 0; t <= horizon; ++t) {
      const double x = rng.uniform() < 0.5 ? 0.0 : 1.0;
      X[static_cast<std::size_t>(t)](i, 0) = x;
      A(i, t) = t == 0 ? 0 : (rng.uniform() < deviate + 0.2 * x ? 1 : 0);
      Y(i, t) = std::floor(rng.uniform() * 3.0);
    }
  }
  return dt::make_panel(A, Y, X);
}

PanelDataset fully_compliant_panel(int n, int horizon, std::uint64_t seed) {
  PanelDataset data = dt::random_panel(n, horizon, seed, /*p_deviate=*/0.0);
  return data;
}

// The worked 8-unit example. Strata of (X0, X1) with regime (0,0):
//   (0,0): units {0,1}, compliant {0};   (0,1): units {2,3}, compliant {2,3}
//   (1,0): units {4,5}, compliant {4};   (1,1): units {6,7}, compliant {6,7}
// Stage-1 means of Y1 among compliant: 2, 5, 8, 4 -> phi_{1,1} = 38/8 = 4.75
// Stage-1 means of Y0 among compliant: 1, 3.5, 4, 5 -> phi_{0,1} = 27/8 = 3.375
// P_n Y0 = 31/8 = 3.875, so psi_1 = 3.875 + 4.75 - 3.375 = 5.25.
PanelDataset hand_panel() {
  Eigen::MatrixXi A(8, 2);
  Eigen::MatrixXd Y(8, 2);
  std::vector<Eigen::MatrixXd> X(2, Eigen::MatrixXd(8, 1));
  const double x0[] = {0, 0, 0, 0, 1, 1, 1, 1};
  const double x1[] = {0, 0, 1, 1, 0, 0, 1, 1};
  const int a1[] = {0, 1, 0, 0, 0, 1, 0, 0};
  const double y0[] = {1, 3, 5, 2, 4, 6, 2, 8};
  const double y1[] = {2, 9, 4, 6, 8, 7, 3, 5};
  for (int i = 0; i < 8; ++i) {
    X[0](i, 0) = x0[i];
    X[1](i, 0) = x1[i];
    A(i, 0) = 0;
    A(i, 1) = a1[i];
    Y(i, 0) = y0[i];
    Y(i, 1) = y1[i];
  }
  return dt::make_panel(A, Y, X);
}

}  // namespace

TEST_CASE("plug-in oracle on the hand-built example") {
  const PanelDataset data = hand_panel();
  const Regime regime{{0, 0}};
  const auto schedule = default_schedule(data);
  CHECK(plug_in_psi(data, regime, schedule, 0) == doctest::Approx(3.875));
  CHECK(plug_in_psi(data, regime, schedule, 1) == doctest::Approx(5.25).epsilon(1e-12));
}

TEST_CASE("plug-in names the empty stratum") {
  PanelDataset data = hand_panel();
  data.treatment(0, 1) = 1;  // stratum (0,0) loses its only compliant unit
  const Regime regime{{0, 0}};
  CHECK_THROWS_AS(plug_in_psi(data, regime, default_schedule(data), 1),
                  PositivityError);
}

TEST_CASE("one-step equals the plug-in under saturated nuisances") {
  // seed chosen so every stage-2 stratum holds a compliant unit
  const PanelDataset data = discrete_panel(200, 2, 301, 0.25);
  const Regime regime{{0, 0, 0}};
  const auto schedule = default_schedule(data);
  const auto comp = compliance(data, regime);
  const NuisanceLearners learners{stratum_spec(), stratum_spec()};
  const auto nuisances = fit_nuisance_set(data, regime, schedule, 2, learners,
                                          all_units(data), 0.01, false, 7);

  for (int t : {1, 2}) {
    const auto result = one_step(data, regime, comp, nuisances, t);
    const double oracle = plug_in_psi(data, regime, schedule, t);
    CHECK(result.psi == doctest::Approx(oracle).epsilon(1e-10));
  }

  // every correction term has an exactly zero sample mean
  for (const auto& [key, chain] : nuisances.chains) {
    for (int m = 1; m <= chain.k; ++m) {
      const Eigen::VectorXd q_next =
          m == chain.k ? Eigen::VectorXd(data.outcome.col(chain.j))
                       : chain.stage_predictions.col(m);
      double total = 0.0;
      for (int i = 0; i < data.n_units; ++i) {
        if (comp.indicator(i, m) != 1) continue;
        total += (q_next[i] - chain.stage_predictions(i, m - 1)) /
                 nuisances.cumulative_g(i, m - 1);
      }
      CHECK(std::abs(total / data.n_units) < 1e-10);
    }
  }
}

TEST_CASE("phi-tilde reductions") {
  const PanelDataset data = fully_compliant_panel(40, 2, 11);
  const Regime regime{{0, 0, 0}};
  const auto schedule = default_schedule(data);
  const auto comp = compliance(data, regime);
  LearnerSpec linear;
  linear.kind = LearnerKind::Linear;
  const NuisanceLearners learners{linear, linear};
  const auto nuisances = fit_nuisance_set(data, regime, schedule, 2, learners,
                                          all_units(data), 0.01, false, 3);

  SUBCASE("full compliance collapses the telescoping sum to P_n Y_j") {
    for (int k = 1; k <= 2; ++k) {
      for (int j : {k, k - 1}) {
        const Eigen::VectorXd phi = phi_tilde(nuisances, comp, data, j, k);
        CHECK(phi.mean() ==
              doctest::Approx(data.outcome.col(j).mean()).epsilon(1e-12));
      }
    }
  }
  SUBCASE("a unit non-compliant from m=1 contributes its stage-1 prediction") {
    PanelDataset broken = data;
    broken.treatment(5, 1) = 1;
    const auto comp2 = compliance(broken, regime);
    const auto nuis2 = fit_nuisance_set(broken, regime, schedule, 2, learners,
                                        all_units(broken), 0.01, false, 3);
    const Eigen::VectorXd phi = phi_tilde(nuis2, comp2, broken, 2, 2);
    CHECK(phi[5] == doctest::Approx(nuis2.chains.at({2, 2}).stage_predictions(5, 0))
                        .epsilon(1e-14));
  }
  SUBCASE("missing chain is reported with its coordinates") {
    NuisanceSet empty;
    empty.horizon = 2;
    CHECK_THROWS_WITH_AS(phi_tilde(empty, comp, data, 1, 1),
                         doctest::Contains("j=1"), EstimationError);
  }
}

TEST_CASE("one-step basics") {
  const PanelDataset data = fully_compliant_panel(60, 2, 17);
  const Regime regime{{0, 0, 0}};
  const auto schedule = default_schedule(data);
  const auto comp = compliance(data, regime);
  LearnerSpec linear;
  linear.kind = LearnerKind::Linear;
  const auto nuisances =
      fit_nuisance_set(data, regime, schedule, 2, NuisanceLearners{linear, linear},
                       all_units(data), 0.01, false, 5);

  SUBCASE("t = 0 is the sample mean of Y0") {
    const auto result = one_step(data, regime, comp, nuisances, 0);
    CHECK(result.psi == doctest::Approx(data.outcome.col(0).mean()).epsilon(1e-15));
  }
  SUBCASE("telescoping collapse on a fully compliant panel") {
    for (int t = 0; t <= 2; ++t) {
      const auto result = one_step(data, regime, comp, nuisances, t);
      CHECK(std::abs(result.psi - data.outcome.col(t).mean()) < 1e-10);
    }
  }
  SUBCASE("reported estimate is exactly the contribution mean") {
    const auto result = one_step(data, regime, comp, nuisances, 2);
    CHECK(result.psi == result.contributions.total.mean());  // bitwise
  }
  SUBCASE("horizon consistency") {
    const auto r1 = one_step(data, regime, comp, nuisances, 1);
    const auto r2 = one_step(data, regime, comp, nuisances, 2);
    const double increment =
        (r2.contributions.components.at({2, 2}) -
         r2.contributions.components.at({1, 2}))
            .mean();
    CHECK(r2.psi - r1.psi == doctest::Approx(increment).epsilon(1e-12));
  }
}

TEST_CASE("eif variance") {
  SUBCASE("t=0 gives the population-style variance of Y0") {
    Eigen::VectorXd y0(4);
    y0 << 1, 2, 3, 6;
    const double psi = y0.mean();  // 3
    const double expected = ((y0.array() - psi).square()).sum() / 4.0;
    CHECK(eif_variance(y0, psi) == doctest::Approx(expected));
  }
  SUBCASE("constant contributions give zero") {
    CHECK(eif_variance(Eigen::VectorXd::Constant(9, 2.5), 2.5) == 0.0);
  }
}

TEST_CASE("lower median convention") {
  CHECK(lower_median({1.0, 2.0, 5.0}) == 2.0);
  CHECK(lower_median({4.0, 1.0}) == 1.0);       // even K: lower of the two
  CHECK(lower_median({7.0}) == 7.0);
  CHECK(lower_median({3.0, 1.0, 4.0, 2.0}) == 2.0);  // order statistic 2 of 4
  // the sample-split variance formula from the worked example
  const std::vector<double> psis = {1.0, 2.0, 5.0};
  const std::vector<double> vars = {0.5, 0.4, 0.9};
  const double median_psi = lower_median(psis);
  std::vector<double> combined;
  for (std::size_t k = 0; k < 3; ++k)
    combined.push_back(vars[k] + (psis[k] - median_psi) * (psis[k] - median_psi));
  CHECK(lower_median(combined) == doctest::Approx(1.5));
}

TEST_CASE("fold plans partition units with near-equal sizes") {
  const FoldPlan plan = make_fold_plan(23, 4, 3, 99);
  REQUIRE(plan.fold_of_unit.size() == 3);
  for (const auto& rep : plan.fold_of_unit) {
    std::vector<int> counts(4, 0);
    for (int f : rep) {
      REQUIRE(f >= 0);
      REQUIRE(f < 4);
      ++counts[static_cast<std::size_t>(f)];
    }
    int lo = 23, hi = 0;
    for (int c : counts) {
      lo = std::min(lo, c);
      hi = std::max(hi, c);
    }
    CHECK(hi - lo <= 1);
  }
  const FoldPlan again = make_fold_plan(23, 4, 3, 99);
  CHECK(again.fold_of_unit == plan.fold_of_unit);
  const FoldPlan other = make_fold_plan(23, 4, 3, 100);
  CHECK(other.fold_of_unit != plan.fold_of_unit);
  CHECK_THROWS_AS(make_fold_plan(3, 5, 1, 1), ValidationError);
}

TEST_CASE("cross-fit estimator") {
  const PanelDataset data = discrete_panel(240, 2, 2024, 0.25);
  const Regime regime{{0, 0, 0}};
  const auto schedule = default_schedule(data);
  LearnerSpec linear;
  linear.kind = LearnerKind::Linear;
  LearnerSpec logit;
  logit.kind = LearnerKind::Logistic;
  const NuisanceLearners learners{linear, logit};

  SUBCASE("K=1 reduces to the single repetition estimate") {
    const auto report = cross_fit(data, regime, schedule, learners, {1, 2}, 2, 1,
                                  0.01, 5);
    for (const auto& h : report.horizons) {
      REQUIRE(h.repetition_estimates.size() == 1);
      CHECK(h.psi == h.repetition_estimates[0]);
      CHECK(h.variance == h.repetition_variances[0]);
    }
  }
  SUBCASE("reported estimate is the lower median of repetition estimates") {
    const auto report = cross_fit(data, regime, schedule, learners, {2}, 2, 5,
                                  0.01, 6);
    const auto& h = report.horizons[0];
    REQUIRE(h.repetition_estimates.size() == 5);
    CHECK(h.psi == lower_median(h.repetition_estimates));
    std::vector<double> combined;
    for (std::size_t k = 0; k < 5; ++k)
      combined.push_back(h.repetition_variances[k] +
                         (h.repetition_estimates[k] - h.psi) *
                             (h.repetition_estimates[k] - h.psi));
    CHECK(h.variance == lower_median(combined));
    CHECK(h.se == doctest::Approx(std::sqrt(h.variance / data.n_units)));
  }
  SUBCASE("determinism in the fold-plan seed") {
    const auto r1 = cross_fit(data, regime, schedule, learners, {2}, 2, 3, 0.01, 42);
    const auto r2 = cross_fit(data, regime, schedule, learners, {2}, 2, 3, 0.01, 42);
    CHECK(r1.horizons[0].psi == r2.horizons[0].psi);  // bitwise
    const auto r3 = cross_fit(data, regime, schedule, learners, {2}, 2, 3, 0.01, 43);
    CHECK(r1.horizons[0].psi != r3.horizons[0].psi);
  }
  SUBCASE("threaded and sequential runs agree bitwise") {
    const auto seq = cross_fit(data, regime, schedule, learners, {1, 2}, 2, 4,
                               0.01, 9, false, 0, 1);
    const auto par = cross_fit(data, regime, schedule, learners, {1, 2}, 2, 4,
                               0.01, 9, false, 0, 4);
    for (std::size_t h = 0; h < seq.horizons.size(); ++h) {
      CHECK(seq.horizons[h].psi == par.horizons[h].psi);
      CHECK(seq.horizons[h].variance == par.horizons[h].variance);
    }
  }
  SUBCASE("oversized fold count is rejected with advice") {
    CHECK_THROWS_AS(cross_fit(data, regime, schedule, learners, {1}, 500, 1,
                              0.01, 5),
                    ValidationError);
  }
}

TEST_CASE("scale equivariance for mean/linear learners") {
  const PanelDataset data = discrete_panel(150, 2, 77, 0.25);
  const Regime regime{{0, 0, 0}};
  const auto schedule = default_schedule(data);
  LearnerSpec linear;
  linear.kind = LearnerKind::Linear;
  const NuisanceLearners learners{linear, linear};

  const auto base = estimate_full_sample(data, regime, schedule, learners,
                                         {0, 1, 2}, 0.01, false, 5);
  const double c = 2.5;
  PanelDataset scaled = data;
  scaled.outcome *= c;
  const auto scaled_report = estimate_full_sample(scaled, regime, schedule,
                                                  learners, {0, 1, 2}, 0.01,
                                                  false, 5);
  for (std::size_t h = 0; h < base.horizons.size(); ++h) {
    CHECK(scaled_report.horizons[h].psi ==
          doctest::Approx(c * base.horizons[h].psi).epsilon(1e-8));
    CHECK(scaled_report.horizons[h].variance ==
          doctest::Approx(c * c * base.horizons[h].variance).epsilon(1e-8));
  }
}

TEST_CASE("positivity diagnostics") {
  SUBCASE("fully compliant panel: unit propensities, no truncation") {
    const PanelDataset data = fully_compliant_panel(50, 2, 31);
    const Regime regime{{0, 0, 0}};
    const auto schedule = default_schedule(data);
    LearnerSpec linear;
    linear.kind = LearnerKind::Linear;
    const auto nuisances =
        fit_nuisance_set(data, regime, schedule, 2, NuisanceLearners{linear, linear},
                         all_units(data), 0.01, false, 5);
    const auto report =
        positivity_diagnostics(nuisances, compliance(data, regime));
    CHECK(report.min_g == std::vector<double>{1.0, 1.0});
    CHECK(report.truncation_counts == std::vector<int>{0, 0});
    CHECK(report.small_strata.empty());
    CHECK(report.compliant_counts == std::vector<int>{50, 50, 50});
  }
  SUBCASE("shrinking strata raise the small-stratum flag") {
    PanelDataset data = discrete_panel(40, 2, 37, 0.45);
    const Regime regime{{0, 0, 0}};
    const auto comp = compliance(data, regime);
    const auto schedule = default_schedule(data);
    const auto nuisances = fit_nuisance_set(
        data, regime, schedule, 2, NuisanceLearners{stratum_spec(), stratum_spec()},
        all_units(data), 0.01, false, 5);
    const auto report = positivity_diagnostics(nuisances, comp, 25);
    // with ~45-65% deviation per step the compliant count at m=2 is far below 25
    CHECK(!report.small_strata.empty());
    const auto j = to_json(report);
    CHECK(j.contains("g_histogram"));
  }
}

TEST_CASE("report serialization") {
  const PanelDataset data = discrete_panel(80, 2, 41, 0.2);
  const Regime regime{{0, 0, 0}};
  LearnerSpec linear;
  linear.kind = LearnerKind::Linear;
  const auto report =
      estimate_full_sample(data, regime, default_schedule(data),
                           NuisanceLearners{linear, linear}, {0, 1, 2}, 0.01,
                           false, 5);
  const auto j = report_to_json(report);
  CHECK(j.at("method") == "full-sample");
  CHECK(j.at("horizons").size() == 3);
  const std::string text = report_to_text(report);
  CHECK(text.find("estimate") != std::string::npos);
  const std::string csv = contributions_to_csv(report, data);
  // one line per unit plus the header
  CHECK(std::count(csv.begin(), csv.end(), '\n') == data.n_units + 1);
  // exact identity between the report and its contribution means
  for (const auto& h : report.horizons)
    CHECK(h.psi == report.contributions.at(h.t).mean());
}
