#include <array>
#include <cmath>
#include <complex>
#include <random>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "support.hpp"
#include "gridtvc/powerflow.hpp"

using namespace gridtvc;
using support::ThreeBusOracle;
using support::two_bus_root;
using cd = std::complex<double>;

namespace {

PowerFlowSolution fake_solution(const H2MGContext& x) {
  PowerFlowSolution s;
  s.converged = true;
  s.v.assign(x.count("Bus"), 1.0);
  s.theta.assign(x.count("Bus"), 0.0);
  s.lines.assign(x.count("Line"), BranchFlow{});
  s.twts.assign(x.count("TWT"), BranchFlow{});
  return s;
}

Decision identity_decision(const H2MGContext& x) {
  Decision y;
  for (const auto& id : controller_ids(x, ControllerClass::line)) y.line[id] = 0;
  for (const auto& id : controller_ids(x, ControllerClass::shunt))
    y.shunt[id] = 0;
  for (const auto& id : controller_ids(x, ControllerClass::svr)) y.svr[id] = 0;
  for (const auto& id : controller_ids(x, ControllerClass::rtc)) y.rtc[id] = 0;
  return y;
}

}  // namespace

TEST(SolveAc, FlatNoLoadIsExact) {
  auto x = fixtures::two_bus(0.0, 0.0, 0.0, 0.1);
  auto sol = solve_ac(x);
  ASSERT_TRUE(sol.converged);
  EXPECT_EQ(sol.v, (std::vector<double>{1.0, 1.0}));
  EXPECT_EQ(sol.theta, (std::vector<double>{0.0, 0.0}));
  EXPECT_EQ(sol.lines[0].p1 + sol.lines[0].p2, 0.0);
  auto obj = evaluate_objective(x, Decision{});
  EXPECT_EQ(obj.f_j, 0.0);
  EXPECT_EQ(obj.total, 0.0);
  EXPECT_EQ(count_metrics(x, Decision{}).violations, 0);
}

TEST(SolveAc, TwoBusMatchesQuarticRoot) {
  auto ref = two_bus_root(0.5, 0.2, 0.01, 0.1);
  ASSERT_TRUE(ref.exists);
  auto sol = solve_ac(fixtures::two_bus(0.5, 0.2));
  ASSERT_TRUE(sol.converged);
  EXPECT_NEAR(sol.v[0], 1.0, 1e-12);
  EXPECT_NEAR(sol.v[1], ref.v2, 1e-8);
  EXPECT_NEAR(sol.theta[1], ref.theta2, 1e-8);
  EXPECT_LE(sol.max_mismatch, 1e-8);
}

TEST(SolveAc, TwoBusSweepMatchesQuartic) {
  for (double p : {0.1, 0.8, 1.5, 2.5})
    for (double q : {-0.3, 0.0, 0.4}) {
      auto ref = two_bus_root(p, q, 0.01, 0.1);
      if (!ref.exists) continue;
      auto sol = solve_ac(fixtures::two_bus(p, q));
      if (ref.v2 < 0.6) continue;  // lower branch start points are fragile
      ASSERT_TRUE(sol.converged) << p << " " << q;
      EXPECT_NEAR(sol.v[1], ref.v2, 1e-8) << p << " " << q;
      EXPECT_NEAR(sol.theta[1], ref.theta2, 1e-8) << p << " " << q;
    }
}

TEST(SolveAc, BeyondNosePointDiverges) {
  // Nose of the load ray (P, Q) = k (0.5, 0.2): discriminant of the quartic
  // vanishes at k* = 1 / (2 (a0 + sqrt(c0))).
  const double a0 = 0.01 * 0.5 + 0.1 * 0.2;
  const double c0 = (0.01 * 0.01 + 0.1 * 0.1) * (0.25 + 0.04);
  const double k_nose = 1.0 / (2.0 * (a0 + std::sqrt(c0)));
  EXPECT_TRUE(two_bus_root(0.5 * k_nose * 0.999, 0.2 * k_nose * 0.999, 0.01, 0.1)
                  .exists);
  EXPECT_FALSE(two_bus_root(0.5 * k_nose * 1.001, 0.2 * k_nose * 1.001, 0.01, 0.1)
                   .exists);

  auto x = fixtures::two_bus(0.5 * k_nose * 1.05, 0.2 * k_nose * 1.05);
  auto sol = solve_ac(x);
  EXPECT_FALSE(sol.converged);
  EXPECT_FALSE(sol.failure.empty());
  auto obj = evaluate_objective(x, Decision{});
  EXPECT_FALSE(obj.converged);
  EXPECT_EQ(obj.total, 100.0);
  EXPECT_FALSE(count_metrics(x, Decision{}).valid);
}

TEST(SolveAc, ThreeBusMatchesRectangularOracle) {
  auto ref = ThreeBusOracle{}.solve();
  auto sol = solve_ac(fixtures::three_bus());
  ASSERT_TRUE(sol.converged);
  for (int b = 0; b < 3; ++b) {
    EXPECT_NEAR(sol.v[b], std::abs(ref[b]), 1e-8);
    EXPECT_NEAR(sol.theta[b], std::arg(ref[b]), 1e-8);
  }
}

TEST(SolveAc, BranchFlowsSatisfyBranchEquations) {
  auto x = fixtures::three_bus();
  auto sol = solve_ac(x);
  ASSERT_TRUE(sol.converged);
  const auto& lines = x.of("Line");
  for (std::size_t i = 0; i < lines.size(); ++i) {
    int a = static_cast<int>(port("Line", lines[i], "Bus1")) ;
    int b = static_cast<int>(port("Line", lines[i], "Bus2"));
    cd va = std::polar(sol.v[a], sol.theta[a]);
    cd vb = std::polar(sol.v[b], sol.theta[b]);
    cd z(get(x, "Line", lines[i], "R"), get(x, "Line", lines[i], "X"));
    double bsh = get(x, "Line", lines[i], "B");
    cd i1 = (va - vb) / z + cd(0, bsh / 2) * va;
    cd s1 = va * std::conj(i1);
    EXPECT_NEAR(sol.lines[i].p1, s1.real(), 1e-10);
    EXPECT_NEAR(sol.lines[i].q1, s1.imag(), 1e-10);
    EXPECT_NEAR(sol.lines[i].i1, std::abs(i1), 1e-10);
  }
}

TEST(SolveAc, ResidualPropertyOnRandomLoads) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.2, 1.6);
  for (int trial = 0; trial < 40; ++trial) {
    auto x = fixtures::three_bus();
    set("Load", x.of("Load")[0], "P_target", u(rng));
    set("Load", x.of("Load")[0], "Q_target", u(rng) - 0.6);
    auto sol = solve_ac(x);
    if (!sol.converged) continue;
    EXPECT_LE(sol.max_mismatch, 1e-8);
    auto obj = objective_from_solution(x, sol, {});
    EXPECT_GE(obj.f_v, 0.0);
    EXPECT_GE(obj.f_i, 0.0);
    EXPECT_GE(obj.f_j, 0.0);
    EXPECT_DOUBLE_EQ(obj.total, obj.f_v + obj.f_i + obj.f_j);
  }
}

TEST(SolveAc, IslandedLoadIsNonConvergence) {
  auto x = fixtures::two_bus(0.5, 0.2);
  x.of("Line").clear();
  auto sol = solve_ac(x);
  EXPECT_FALSE(sol.converged);
  EXPECT_EQ(evaluate_objective(x, Decision{}).total, 100.0);
}

TEST(SolveAc, NoSlackIsNonConvergence) {
  auto x = fixtures::two_bus(0.5, 0.2);
  set("Generator", x.of("Generator")[0], "slack", 0.0);
  EXPECT_FALSE(solve_ac(x).converged);
}

TEST(SolveAc, GeneratorReactiveLimitSwitchesToPq) {
  auto x = fixtures::three_bus();
  auto& g2 = x.of("Generator")[1];
  set("Generator", g2, "V_target", 1.1);
  set("Generator", g2, "Q_max", 0.05);
  auto sol = solve_ac(x);
  ASSERT_TRUE(sol.converged);
  EXPECT_NEAR(sol.gen_q[1], 0.05, 1e-12);
  EXPECT_LT(sol.v[1], 1.1);
  EXPECT_GE(sol.outer_loops, 1);
}

TEST(SolveAc, SvrHoldsRegulatedBus) {
  auto x = fixtures::control_grid();
  auto sol = solve_ac(x);
  ASSERT_TRUE(sol.converged);
  EXPECT_NEAR(sol.v[2], 1.0, 1e-8);
  EXPECT_LE(sol.gen_q[1], 0.5);
  EXPECT_GE(sol.gen_q[1], -0.5);

  // An unreachable target saturates the single unit and lets the bus float.
  set("SVRZone", x.of("SVRZone")[0], "V_target", 1.2);
  sol = solve_ac(x);
  ASSERT_TRUE(sol.converged);
  EXPECT_NEAR(sol.gen_q[1], 0.5, 1e-12);
  EXPECT_LT(sol.v[2], 1.2);
}

TEST(SolveAc, SvrSharesProportionallyToRange) {
  GridBuilder g;
  Address b1 = g.bus("b1"), b2 = g.bus("b2"), b3 = g.bus("b3");
  g.generator("g1", b1, 0.0, 1.0, -10, 10, true, true);
  Address ga = g.generator("ga", b3, 0.1, 1.0, -0.2, 0.2, false);
  Address gb = g.generator("gb", b3, 0.1, 1.0, -0.6, 0.6, false);
  g.line("l12", b1, b2, 0.01, 0.1);
  g.line("l23", b2, b3, 0.01, 0.1);
  g.load("ld2", b2, 0.6, 0.3);
  Address z = g.svr_zone("z", b2, 1.01);
  g.svr_unit("ua", ga, z);
  g.svr_unit("ub", gb, z);
  g.svr_controller("sc", z);
  auto sol = solve_ac(g.take());
  ASSERT_TRUE(sol.converged);
  EXPECT_NEAR(sol.v[1], 1.01, 1e-8);
  EXPECT_NEAR(sol.gen_q[2], 3.0 * sol.gen_q[1], 1e-10);
}

TEST(SolveAc, RtcTracksCategoryTargets) {
  auto x = fixtures::control_grid();
  double prev = 0;
  for (int cat = 0; cat < 4; ++cat) {
    auto y = identity_decision(x);
    y.rtc["rc34"] = cat;
    auto g = apply_decision(x, y);
    auto sol = solve_ac(g);
    ASSERT_TRUE(sol.converged);
    double target = kRtcRatios[cat] * 0.5625;
    EXPECT_LE(std::abs(sol.v[3] - target), 0.01 * 0.5625) << cat;
    EXPECT_GE(sol.v[3], prev);
    prev = sol.v[3];
  }
}

TEST(ApplyDecision, IdentityLeavesGridUnchanged) {
  auto x = fixtures::control_grid();
  auto y = identity_decision(x);
  auto g = apply_decision(x, y);
  auto a = solve_ac(x), b = solve_ac(g);
  ASSERT_TRUE(a.converged);
  EXPECT_EQ(a.v, b.v);
  EXPECT_EQ(a.theta, b.theta);
}

TEST(ApplyDecision, ShuntSwitchAndLineDisconnect) {
  auto x = fixtures::control_grid();
  auto y = identity_decision(x);
  y.shunt["sc2"] = 1;
  y.line["lc23a"] = 1;
  auto g = apply_decision(x, y);
  EXPECT_EQ(value_or("Shunt", g.of("Shunt")[0], "connected", -1), 0.0);
  EXPECT_EQ(g.count("Line"), x.count("Line") - 1);
  EXPECT_EQ(g.count("LineController"), 0u);
  EXPECT_TRUE(validate_context(g).empty());
}

TEST(ApplyDecision, SvrAndRtcTargets) {
  GridBuilder gb;
  Address b1 = gb.bus("b1"), b2 = gb.bus("b2");
  gb.generator("g1", b1, 0.0, 1.0, -10, 10, true, true);
  Address t = gb.twt("t", b1, b2, 0.0, 0.1);
  gb.rtc("r", t, b2, 1.0);
  gb.rtc_controller("rc", t, 1.0, 1.0);
  auto x = gb.take();
  Decision y;
  y.rtc["rc"] = 1;
  auto g = apply_decision(x, y);
  EXPECT_DOUBLE_EQ(get(g, "RTC", g.of("RTC")[0], "V_target"), 1.02);

  auto c = fixtures::control_grid();
  auto yc = identity_decision(c);
  yc.svr["sv5"] = 0.013;
  auto gc = apply_decision(c, yc);
  EXPECT_DOUBLE_EQ(get(gc, "SVRZone", gc.of("SVRZone")[0], "V_target"), 1.013);
  yc.svr["sv5"] = 5.0;
  gc = apply_decision(c, yc);
  EXPECT_EQ(get(gc, "SVRZone", gc.of("SVRZone")[0], "V_target"), 3.0);
}

TEST(ApplyDecision, MissingDeviceIsAnError) {
  auto x = fixtures::control_grid();
  auto y = identity_decision(x);
  x.of("Shunt").clear();
  EXPECT_THROW(apply_decision(x, y), PairingError);
  auto x2 = fixtures::control_grid();
  y.rtc.clear();
  EXPECT_THROW(apply_decision(x2, y), PairingError);
}

TEST(Objective, HandEvaluatedTerms) {
  auto x = fixtures::two_bus(0.0, 0.0);
  auto sol = fake_solution(x);
  sol.v = {1.05, 1.0};  // v_e = 1.0 and 0.5
  sol.lines[0].p1 = 0.10;
  sol.lines[0].p2 = -0.098;
  auto obj = objective_from_solution(x, sol, {});
  EXPECT_NEAR(obj.f_v, 0.0025, 1e-15);
  EXPECT_NEAR(obj.f_j, 0.0002, 1e-15);
  EXPECT_EQ(obj.f_i, 0.0);

  sol.v = {1.0, 1.0};
  EXPECT_EQ(objective_from_solution(x, sol, {}).f_v, 0.0);

  sol.converged = false;
  obj = objective_from_solution(x, sol, {});
  EXPECT_EQ(obj.total, 100.0);
  EXPECT_FALSE(obj.converged);
}

TEST(Objective, MonotonePenaltyBeyondDeadband) {
  auto x = fixtures::two_bus(0.0, 0.0);
  auto sol = fake_solution(x);
  double last = -1;
  for (double v = 1.045; v < 1.2; v += 0.005) {
    sol.v = {1.0, v};
    double f = objective_from_solution(x, sol, {}).f_v;
    EXPECT_GT(f, last);
    last = f;
  }
  last = -1;
  for (double v = 0.955; v > 0.8; v -= 0.005) {
    sol.v = {1.0, v};
    double f = objective_from_solution(x, sol, {}).f_v;
    EXPECT_GT(f, last);
    last = f;
  }
}

TEST(Objective, CurrentPenaltyOnRatedBranches) {
  auto x = fixtures::two_bus(0.0, 0.0);
  set("Line", x.of("Line")[0], "I1_max", 2.0);
  set("Line", x.of("Line")[0], "I2_max", 2.0);
  auto sol = fake_solution(x);
  sol.lines[0].i1 = 2.2;  // i = 1.1
  auto obj = objective_from_solution(x, sol, {});
  EXPECT_NEAR(obj.f_i, 0.15 * 0.15, 1e-15);
  auto m = metrics_from_solution(x, sol, {});
  EXPECT_EQ(m.overflows, 1);
}

TEST(Metrics, OverVoltageCount) {
  auto x = fixtures::two_bus(0.0, 0.0);
  auto sol = fake_solution(x);
  sol.v = {1.0, 1.05 + 0.01};
  auto m = metrics_from_solution(x, sol, {});
  EXPECT_TRUE(m.valid);
  EXPECT_EQ(m.over_voltages, 1);
  EXPECT_EQ(m.under_voltages, 0);
  EXPECT_EQ(m.violations, 1);
  EXPECT_EQ(m.normalized_voltages.size(), 2u);
  sol.v = {0.9, 0.94};
  m = metrics_from_solution(x, sol, {});
  EXPECT_EQ(m.under_voltages, 2);
}

TEST(Objective, EvaluationIsPure) {
  auto x = fixtures::control_grid();
  auto y = identity_decision(x);
  y.rtc["rc34"] = 3;
  y.svr["sv5"] = 0.02;
  auto a = evaluate_objective(x, y);
  auto b = evaluate_objective(x, y);
  EXPECT_EQ(a.total, b.total);
  EXPECT_EQ(a.f_v, b.f_v);
}

TEST(SolverOptions, Validation) {
  SolverOptions o;
  o.tolerance = 0;
  EXPECT_THROW(o.validate(), std::invalid_argument);
}
