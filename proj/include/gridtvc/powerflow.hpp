#pragma once

// Static AC power flow with discrete RTC tap stepping, SVR zone reactive
// dispatch and generator reactive limits, plus the voltage/current/loss
// objective evaluated on its result. Non-convergence is a value, never an
// exception.

#include <string>
#include <vector>

#include "gridtvc/h2mg.hpp"

namespace gridtvc {

struct SolverOptions {
  double tolerance = 1e-8;  // max |power mismatch|, p.u.
  int max_inner_iterations = 30;
  int max_outer_loops = 100;

  // RTC tap ladder, as multiples of the nominal ratio.
  int tap_positions = 21;
  double tap_min = 0.9;
  double tap_max = 1.1;
  // Regulation deadband as a fraction of the regulated bus V_nom.
  double rtc_deadband = 0.005;

  double lambda_v = 1.0;
  double lambda_i = 1.0;
  double lambda_j = 0.1;
  double eps_v = 0.05;
  double eps_i = 0.05;
  double prohibitive_cost = 100.0;

  // Clamp on voltage targets and plausibility window on iterates.
  double min_target_voltage = 0.0;
  double max_target_voltage = 3.0;
  double min_plausible_voltage = 0.0;
  double max_plausible_voltage = 3.0;

  void validate() const;
};

struct BranchFlow {
  double p1 = 0, q1 = 0, i1 = 0, p2 = 0, q2 = 0, i2 = 0;
};

struct PowerFlowSolution {
  bool converged = false;
  std::string failure;

  // Aligned with the grid's Bus / Line / TWT / Generator / Shunt lists.
  std::vector<double> v;
  std::vector<double> theta;
  std::vector<bool> energized;
  std::vector<BranchFlow> lines;
  std::vector<BranchFlow> twts;
  std::vector<double> twt_rho;
  std::vector<double> gen_p;
  std::vector<double> gen_q;
  std::vector<double> shunt_q;

  int inner_iterations = 0;
  int outer_loops = 0;
  double max_mismatch = 0;
};

struct ObjectiveBreakdown {
  double f_v = 0;
  double f_i = 0;
  double f_j = 0;
  double total = 0;
  bool converged = false;
};

/// Returns a copy of x with decision y applied. Disconnected lines are
/// removed together with their controller.
H2MGContext apply_decision(const H2MGContext& x, const Decision& y,
                           const SolverOptions& opts = {});

PowerFlowSolution solve_ac(const H2MGContext& grid,
                           const SolverOptions& opts = {});

/// Writes V, theta, flows, injections and final tap ratios into grid.
void write_solution(H2MGContext& grid, const PowerFlowSolution& sol);

/// Normalized voltage (V - V_min) / (V_max - V_min) of a bus.
double normalized_voltage(const HyperEdge& bus, double v);

/// Loading |I| / I_max of a branch, max over both ends; 0 when unrated.
double branch_loading(std::string_view class_name, const HyperEdge& branch,
                      const BranchFlow& flow);

ObjectiveBreakdown objective_from_solution(const H2MGContext& grid,
                                           const PowerFlowSolution& sol,
                                           const SolverOptions& opts);

ObjectiveBreakdown evaluate_objective(const H2MGContext& x, const Decision& y,
                                      const SolverOptions& opts = {});

struct Metrics {
  bool valid = false;
  int over_voltages = 0;
  int under_voltages = 0;
  int violations = 0;
  int overflows = 0;
  double joule_losses = 0;
  ObjectiveBreakdown objective;
  std::vector<double> normalized_voltages;  // optimized buses only
};

Metrics metrics_from_solution(const H2MGContext& grid,
                              const PowerFlowSolution& sol,
                              const SolverOptions& opts);

Metrics count_metrics(const H2MGContext& x, const Decision& y,
                      const SolverOptions& opts = {});

}  // namespace gridtvc
