#include <atomic>
#include <cmath>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "support.hpp"
#include "gridtvc/estimator.hpp"

using namespace gridtvc;
using namespace support;

namespace {

}  // namespace

TEST(ClipScore, Examples) {
  EXPECT_EQ(clip_score(0.7, 0.7, 0.1), 0.0);
  EXPECT_NEAR(clip_score(1.1, 1.0, 0.1), 0.761594155955765, 1e-12);
  EXPECT_NEAR(clip_score(100, 1, 0.1), 1.0, 1e-12);
  EXPECT_GT(clip_score(1e9, 0, 0.1), -1.0);
  EXPECT_LE(clip_score(1e9, 0, 0.1), 1.0);
}

TEST(Estimator, NoControllers) {
  auto x = fixtures::two_bus(0.3, 0.1);
  Rng rng = make_stream(1);
  auto g = estimate_gradient(x, zero_surrogate(x), {}, {}, objective_oracle(), rng);
  EXPECT_TRUE(g.converged);
  EXPECT_EQ(g.grad.size(), 0u);
  EXPECT_EQ(g.oracle_calls, 1u);
  EXPECT_GT(g.f_ref, 0.0);
}

TEST(Estimator, EntropyOnlyWhenBetaZero) {
  auto x = fixtures::control_grid();
  Rng zr = make_stream(2);
  auto z = random_z(x, zr);
  z.svr.begin()->second = 0.01;
  EstimatorConfig cfg;
  cfg.beta = 0;
  Rng rng = make_stream(3);
  auto g = estimate_gradient(x, z, cfg, {}, objective_oracle(), rng);
  ASSERT_TRUE(g.converged);
  auto h = flatten(entropy_grad(z, {}));
  auto v = flatten(g.grad);
  ASSERT_EQ(h.size(), v.size());
  for (std::size_t k = 0; k < h.size(); ++k) EXPECT_EQ(v[k], -h[k]);
}

TEST(Estimator, CallCountMatchesSamples) {
  auto x = fixtures::control_grid();
  std::atomic<int> calls{0};
  Oracle o = [&](const H2MGContext& c, const Decision& y) {
    ++calls;
    return objective_oracle()(c, y);
  };
  Rng rng = make_stream(4);
  auto g = estimate_gradient(x, zero_surrogate(x), {}, {}, o, rng);
  EXPECT_EQ(g.oracle_calls, 1u + 8 + 16 + 16 + 8);
  EXPECT_EQ(calls.load(), 49);
}

TEST(Estimator, NullGradientWhenModeDiverges) {
  auto x = fixtures::control_grid();
  Oracle o = [](const H2MGContext&, const Decision&) { return OracleResult{100, false}; };
  Rng rng = make_stream(5);
  auto z = zero_surrogate(x);
  z.line.begin()->second = 0.4;
  auto g = estimate_gradient(x, z, {}, {}, o, rng);
  EXPECT_FALSE(g.converged);
  EXPECT_EQ(g.f_ref, 100.0);
  for (double v : flatten(g.grad)) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(g.grad.size(), z.size());
}

TEST(Estimator, NullGradientOnRealDivergence) {
  // Far past the nose point: no decision of the single shunt saves it.
  auto x = fixtures::overvoltage_shunt();
  for (auto& l : x.of(cls::load)) set(cls::load, l, "P_target", 8.0);
  Rng rng = make_stream(6);
  auto g = estimate_gradient(x, zero_surrogate(x), {}, {}, objective_oracle(), rng);
  EXPECT_FALSE(g.converged);
  for (double v : flatten(g.grad)) EXPECT_EQ(v, 0.0);
}

TEST(Estimator, DivergentSampleScoredProhibitive) {
  auto x = fixtures::overvoltage_shunt();
  const double f_ref = 1.0;
  Oracle o = [&](const H2MGContext&, const Decision& y) {
    if (y.shunt.at("sc2") == 1) throw std::runtime_error("solver blew up");
    return OracleResult{f_ref, true};
  };
  EstimatorConfig cfg;
  PolicyConfig pcfg;
  SurrogateDecision z = zero_surrogate(x);
  z.shunt["sc2"] = -0.5;
  Rng rng = make_stream(7);
  auto g = estimate_gradient(x, z, cfg, pcfg, o, rng);
  ASSERT_TRUE(g.converged);
  double expect = -policy::entropy_grad_binary(-0.5) +
                  cfg.beta * clip_score(100, f_ref, cfg.tau) *
                      policy::log_prob_grad_binary(1, -0.5);
  EXPECT_NEAR(g.grad.shunt.at("sc2"), expect, 1e-15);
}

TEST(Estimator, ShuntSignTest) {
  auto x = fixtures::overvoltage_shunt();
  int improving = 0;
  Rng zr = make_stream(8);
  for (int s = 0; s < 200; ++s) {
    SurrogateDecision z = zero_surrogate(x);
    z.shunt["sc2"] = uniform(zr, -3.0, -0.1);
    Rng rng = make_stream(100, {static_cast<std::uint64_t>(s)});
    auto g = estimate_gradient(x, z, {}, {}, objective_oracle(), rng);
    ASSERT_TRUE(g.converged);
    // descent on z raises the toggle probability iff the gradient is negative
    if (g.grad.shunt.at("sc2") < 0) ++improving;
  }
  // one-sided binomial(200, 1/2) at p < 0.01 needs at least 117 successes
  EXPECT_GE(improving, 117);
}

TEST(Estimator, SvrSignTest) {
  auto x = fixtures::low_svr();
  int improving = 0;
  for (int s = 0; s < 200; ++s) {
    SurrogateDecision z = zero_surrogate(x);
    z.svr["sv2"] = 0.0;
    Rng rng = make_stream(200, {static_cast<std::uint64_t>(s)});
    auto g = estimate_gradient(x, z, {}, {}, objective_oracle(), rng);
    ASSERT_TRUE(g.converged);
    if (g.grad.svr.at("sv2") < 0) ++improving;
  }
  EXPECT_GE(improving, 117);
}

TEST(Estimator, DeterministicAcrossWorkerCounts) {
  auto x = fixtures::control_grid();
  Rng zr = make_stream(9);
  auto z = random_z(x, zr);
  EstimatorConfig a, b;
  b.workers = 3;
  Rng r1 = make_stream(10), r2 = make_stream(10);
  auto g1 = estimate_gradient(x, z, a, {}, objective_oracle(), r1);
  auto g2 = estimate_gradient(x, z, b, {}, objective_oracle(), r2);
  EXPECT_EQ(g1.grad, g2.grad);
  EXPECT_EQ(g1.f_ref, g2.f_ref);
}

TEST(ExactOracle, ConstantCostGivesEntropyTermOnly) {
  auto x = fixtures::overvoltage_shunt();
  SurrogateDecision z = zero_surrogate(x);
  z.shunt["sc2"] = 0.8;
  auto e = exact_gradient_oracle(x, z, 3.0, {}, constant_oracle(5.0));
  EXPECT_NEAR(e.grad.shunt.at("sc2"), -policy::entropy_grad_binary(0.8), 1e-15);
  EXPECT_EQ(e.decisions, 2u);
}

TEST(ExactOracle, MatchesFiniteDifferences) {
  auto x = fixtures::three_binary();
  Oracle f = table_oracle({0.3, 1.2, 0.05, 2.0, 0.7, 0.1, 1.5, 0.9});
  const double beta = 0.8, h = 1e-5;
  Rng rng = make_stream(11);
  for (int t = 0; t < 20; ++t) {
    auto z = random_z(x, rng);
    auto e = exact_gradient_oracle(x, z, beta, {}, f);
    auto v = flatten(z);
    auto g = flatten(e.grad);
    for (std::size_t k = 0; k < v.size(); ++k) {
      auto up = v, dn = v;
      up[k] += h;
      dn[k] -= h;
      double fd = (enumerated_objective(unflatten(z, up), f, x, beta) -
                   enumerated_objective(unflatten(z, dn), f, x, beta)) / (2 * h);
      EXPECT_NEAR(g[k], fd, 1e-8);
    }
  }
}

TEST(ExactOracle, KlNonnegativeAndPartitionFunction) {
  auto x = fixtures::three_binary();
  std::array<double, 8> tab{0.3, 1.2, 0.05, 2.0, 0.7, 0.1, 1.5, 0.9};
  Oracle f = table_oracle(tab);
  const double beta = 1.3;
  double zb = 0;
  for (double v : tab) zb += std::exp(-beta * v);
  Rng rng = make_stream(12);
  for (int t = 0; t < 50; ++t) {
    auto e = exact_gradient_oracle(x, random_z(x, rng, 4.0), beta, {}, f);
    EXPECT_GE(e.kl, -1e-12);
    EXPECT_NEAR(e.z_beta, zb, 1e-12);
  }
}

TEST(ExactOracle, RejectsLargeSpaces) {
  H2MGContext x = fixtures::control_grid();
  SurrogateDecision z = zero_surrogate(x);
  // 4^7 > 4096 categorical decisions
  GridBuilder g;
  Address b1 = g.bus("b1");
  g.generator("g1", b1, 0, 1.0, -1, 1, true, true);
  for (int i = 0; i < 7; ++i) {
    Address lv = g.bus("lv" + std::to_string(i), 0.5625);
    Address t = g.twt("t" + std::to_string(i), b1, lv, 0.005, 0.08, 2.0);
    g.rtc("r" + std::to_string(i), t, lv, 0.5625);
    g.rtc_controller("rc" + std::to_string(i), t, 0.5625, 0.5625);
  }
  auto big = g.take();
  EXPECT_THROW(exact_gradient_oracle(big, zero_surrogate(big), 1e-4, {}, constant_oracle(0)),
               std::invalid_argument);
  EXPECT_NO_THROW(exact_gradient_oracle(x, z, 1e-4, {}, constant_oracle(0)));
}

TEST(RawEstimator, ZeroMeanScore) {
  auto x = fixtures::three_binary();
  Rng zr = make_stream(13);
  auto z = random_z(x, zr);
  Rng rng = make_stream(14);
  auto r = estimate_gradient_raw(x, z, 1.0, 100000, {}, constant_oracle(2.5), rng);
  auto g = flatten(r.grad), se = flatten(r.std_error), h = flatten(entropy_grad(z, {}));
  for (std::size_t k = 0; k < g.size(); ++k) {
    double score_mean = g[k] + h[k];
    EXPECT_LT(std::abs(score_mean), 3 * se[k]) << k;
  }
}

TEST(RawEstimator, ConvergesToExactOracle) {
  auto x = fixtures::three_binary();
  Oracle f = table_oracle({0.3, 1.2, 0.05, 2.0, 0.7, 0.1, 1.5, 0.9});
  Rng zr = make_stream(15);
  auto z = random_z(x, zr);
  auto e = exact_gradient_oracle(x, z, 0.5, {}, f);
  Rng rng = make_stream(16);
  auto r = estimate_gradient_raw(x, z, 0.5, 50000, {}, f, rng);
  auto g = flatten(r.grad), se = flatten(r.std_error), ex = flatten(e.grad);
  for (std::size_t k = 0; k < g.size(); ++k) EXPECT_LT(std::abs(g[k] - ex[k]), 3 * se[k]);
}
