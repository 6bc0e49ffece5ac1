#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "didmean/panel.hpp"

namespace didmean {

// Structural-model coefficients for the three-period generator. First index
// is the time t = 0..2, second the subscript within the equation:
//   W1: intercept, W1 lag, A lag
//   W2: intercept, W1, W2 lag, A lag
//   W3: intercept, W1, W2, W3 lag, A lag
//   A (probability scale, expit): intercept, W1, cos W2, W3^2, U
//   Y:  intercept, sin W1, W2*W3, A   (U enters additively with weight 1)
struct DgpCoefficients {
  std::array<std::array<double, 3>, 3> w1{};
  std::array<std::array<double, 4>, 3> w2{};
  std::array<std::array<double, 5>, 3> w3{};
  std::array<std::array<double, 5>, 3> a{};
  std::array<std::array<double, 4>, 3> y{};
};

struct DGPConfig {
  DgpCoefficients coef;
  double noise_sd = 0.1;  // W and Y equations; U is standard normal
  std::uint64_t coefficient_seed = 0;
  bool force_baseline_regime = true;  // pin A_0 = 0 for every unit
  double u_in_w1 = 0.0;  // adds u_in_w1 * U to the W1 mean; breaks the
                         // parallel-trends construction when nonzero
  double u_scale = 1.0;  // confounder standard deviation; additivity, not
                         // magnitude, drives the parallel-trends construction
  int n_units = 1000;
};

// All coefficients drawn i.i.d. standard normal from the seeded stream in a
// fixed order: equation by equation (W1, W2, W3, A, Y), time ascending,
// subscript ascending. Lag coefficients are drawn at t = 0 too (they
// multiply zero there), which keeps the order independent of conventions.
DGPConfig draw_coefficients(std::uint64_t seed);

// Factual generator. Draws are consumed in a fixed per-unit order (U, then
// per time: W1, W2, W3 noise, the treatment uniform, Y noise) regardless of
// any forcing, so streams stay aligned between factual and counterfactual
// runs with the same seed. The confounder U is not emitted.
PanelDataset generate_panel(const DGPConfig& config, std::uint64_t seed);

// Counterfactual-coupled variant: treatments pinned to `forced_regime`
// (length 3). Same noise stream as generate_panel for the same seed.
PanelDataset generate_panel_forced(const DGPConfig& config, std::uint64_t seed,
                                   const std::vector<int>& forced_regime);

struct TruthTable {
  std::array<double, 3> mu{};     // E[Y_t] under the all-zero regime
  std::array<double, 3> mc_se{};  // Monte-Carlo standard errors
  long n_mc = 0;
  std::uint64_t coefficient_seed = 0;
};

// Monte-Carlo ground truth under the all-untreated trajectory. Streaming;
// does not materialize a panel.
TruthTable truth_oracle(const DGPConfig& config, long n_mc, std::uint64_t seed);

struct TrendCheck {
  std::array<double, 2> corr{};   // t = 1, 2: corr(Y_t(0) - Y_{t-1}(0), U)
  std::array<double, 2> mc_se{};  // approx 1/sqrt(n_mc - 3)
  long n_mc = 0;
};

// Reports (never asserts) whether successive counterfactual outcome changes
// are uncorrelated with the unmeasured confounder, which the default
// construction guarantees and the u_in_w1 perturbation destroys.
TrendCheck check_parallel_trends(const DGPConfig& config, long n_mc,
                                 std::uint64_t seed);

nlohmann::json to_json(const DGPConfig& config);
DGPConfig dgp_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TruthTable& truth);
TruthTable truth_table_from_json(const nlohmann::json& j);

// Synthetic 51-unit, 7-time state panel with 12 covariates in the roles of
// the worked minimum-wage example (economic indices plus demographic
// shares). Ships in the repo as a loadable CSV example.
PanelDataset generate_state_example(std::uint64_t seed);

}  // namespace didmean
