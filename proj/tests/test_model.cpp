#include <cmath>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "support.hpp"
#include "gridtvc/model.hpp"
#include "gridtvc/policy.hpp"

using namespace gridtvc;
using namespace support;

namespace {

std::size_t mlp_count(std::size_t in, const std::vector<int>& hidden, std::size_t out) {
  std::size_t n = 0, prev = in;
  for (int h : hidden) {
    n += prev * h + h;
    prev = static_cast<std::size_t>(h);
  }
  return n + prev * out + out;
}

void fd_check(const H2MGContext& x, std::uint64_t seed) {
  H2mgNode net(small_config());
  auto c = randomized(x, seed);
  auto theta = net.init(seed);
  Rng rng = make_stream(seed, {1});
  // Nonzero biases so no unit sits exactly on a kink.
  for (const auto& b : net.blocks())
    if (b.name.ends_with(".bias"))
      for (std::size_t i = 0; i < b.size(); ++i) theta[b.offset + i] = uniform(rng, -0.3, 0.3);
  auto z = net.forward(theta, c);
  auto cot = random_cotangent(z, rng);
  auto grad = net.vjp(theta, c, cot);
  for (std::string group : {"encoder.", "message.", "dynamics.", "decoder."}) {
    std::vector<double> v(theta.size(), 0.0);
    for (const auto& b : net.blocks())
      if (b.name.starts_with(group))
        for (std::size_t i = 0; i < b.size(); ++i) v[b.offset + i] = uniform(rng, -1, 1);
    double analytic = std::inner_product(grad.begin(), grad.end(), v.begin(), 0.0);
    const double eps = 1e-6;
    auto tp = theta, tm = theta;
    for (std::size_t i = 0; i < v.size(); ++i) {
      tp[i] += eps * v[i];
      tm[i] -= eps * v[i];
    }
    double fd = (dot(net.forward(tp, c), cot) - dot(net.forward(tm, c), cot)) / (2 * eps);
    EXPECT_LE(std::abs(analytic - fd), 1e-4 * std::max(std::abs(fd), 1e-8))
        << group << " analytic " << analytic << " fd " << fd;
    EXPECT_NE(analytic, 0.0) << group;
  }
}

}  // namespace

TEST(Model, ParameterCountDefault) {
  H2mgNode net;
  const auto& cfg = net.config();
  std::size_t expect = 0;
  for (const auto& s : schema()) {
    std::size_t nf = std::max<std::size_t>(1, s.features.size());
    std::size_t np = s.ports.size();
    expect += mlp_count(nf, cfg.encoder_hidden, cfg.encoder_out);
    expect += np * mlp_count(np * cfg.latent + cfg.encoder_out, cfg.message_hidden, cfg.latent);
    if (s.decision != DecisionKind::none)
      expect += mlp_count(cfg.encoder_out + np * cfg.latent, cfg.decoder_hidden,
                          s.decision == DecisionKind::categorical ? 4 : 1);
  }
  expect += 2 * 64 * 64 + 64;
  EXPECT_EQ(net.size(), expect);
  EXPECT_EQ(net.size(), 1945479u);
  EXPECT_EQ(net.config().steps(), 200);
}

TEST(Model, BlockNamesAndLayout) {
  H2mgNode net;
  std::size_t off = 0;
  bool found = false;
  for (const auto& b : net.blocks()) {
    EXPECT_EQ(b.offset, off);
    off += b.size();
    if (b.name == "encoder.Bus.layer0.weight") found = true;
  }
  EXPECT_TRUE(found);
  EXPECT_EQ(off, net.size());
}

TEST(Model, InitDeterministic) {
  H2mgNode net(small_config());
  EXPECT_EQ(net.init(3), net.init(3));
  EXPECT_NE(net.init(3), net.init(4));
  auto t = net.init(3);
  for (const auto& b : net.blocks())
    for (std::size_t i = 0; i < b.size(); ++i) {
      double v = t[b.offset + i];
      if (b.name.ends_with(".bias")) EXPECT_EQ(v, 0.0);
      else EXPECT_LE(std::abs(v), 1.0 / std::sqrt(static_cast<double>(b.cols)));
    }
}

TEST(Model, ZeroWeightsGiveZeroOutput) {
  H2mgNode net(small_config());
  auto x = fixtures::control_grid();
  auto c = randomized(x, 1);
  ForwardTape tape;
  auto z = net.forward(net.init(0, {.zero = true}), c, &tape);
  EXPECT_EQ(z.size(), 4u);
  for (double v : flatten(z)) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(tape.h_final.cwiseAbs().maxCoeff(), 0.0);
  for (const auto& h : tape.checkpoints) EXPECT_EQ(h.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Model, ZeroDecoderOutputGivesZeroOutput) {
  H2mgNode net(small_config());
  auto c = randomized(fixtures::control_grid(), 2);
  auto z = net.forward(net.init(5, {.zero_decoder_output = true}), c);
  for (double v : flatten(z)) EXPECT_EQ(v, 0.0);
}

TEST(Model, ConstantDynamicsIntegratesExactly) {
  for (double dt : {0.005, 0.05, 0.25}) {
    auto cfg = small_config();
    cfg.dt = dt;
    H2mgNode net(cfg);
    auto theta = net.init(0, {.zero = true});
    for (const auto& b : net.blocks())
      if (b.name == "dynamics.layer0.bias")
        for (std::size_t i = 0; i < b.size(); ++i) theta[b.offset + i] = 0.37;
    ForwardTape tape;
    net.forward(theta, randomized(fixtures::three_bus(), 3), &tape);
    EXPECT_LE((tape.h_final.array() - 0.37).abs().maxCoeff(), 1e-13) << dt;
  }
}

TEST(Model, IsolatedAddressSeesNoMessages) {
  auto cfg = small_config();
  H2mgNode net(cfg);
  auto x = five_address();
  Address lone = x.new_address();
  auto c = randomized(x, 4);
  auto theta = net.init(9);
  ForwardTape tape;
  net.forward(theta, c, &tape);
  // integrate h' = leaky(W_h h + b) alone
  const ParamBlock* w = nullptr;
  const ParamBlock* b = nullptr;
  for (const auto& blk : net.blocks()) {
    if (blk.name == "dynamics.layer0.weight") w = &blk;
    if (blk.name == "dynamics.layer0.bias") b = &blk;
  }
  ASSERT_TRUE(w && b);
  std::vector<double> h(cfg.latent, 0.0), f(cfg.latent);
  for (int k = 0; k < cfg.steps(); ++k) {
    for (int i = 0; i < cfg.latent; ++i) {
      double s = theta[b->offset + i];
      for (int j = 0; j < cfg.latent; ++j) s += theta[w->offset + i * w->cols + j] * h[j];
      f[i] = s > 0 ? s : cfg.leaky_slope * s;
    }
    for (int i = 0; i < cfg.latent; ++i) h[i] += cfg.dt * f[i];
  }
  for (int i = 0; i < cfg.latent; ++i) EXPECT_NEAR(tape.h_final(lone, i), h[i], 1e-13);
}

TEST(Model, PermutationEquivariance) {
  H2mgNode net(small_config());
  auto x = fixtures::control_grid();
  auto theta = net.init(11);
  // fill features deterministically from edge ids so both layouts agree
  auto fill = [](H2MGContext& g) {
    for (auto& [name, list] : g.edges)
      for (auto& e : list) {
        Rng r = make_stream(fnv1a(name + "/" + e.id));
        for (auto& f : e.features) f = uniform(r, 0, 1);
      }
  };
  fill(x);
  auto z0 = net.forward(theta, compile_context(x));

  H2MGContext y = x;
  std::vector<Address> perm(y.address_count);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = make_stream(12);
  std::shuffle(perm.begin(), perm.end(), rng);
  for (auto& [name, list] : y.edges) {
    for (auto& e : list)
      for (auto& p : e.ports) p = perm[p];
    std::shuffle(list.begin(), list.end(), rng);
  }
  auto z1 = net.forward(theta, compile_context(y));
  auto a = flatten(z0), b = flatten(z1);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-9);
}

TEST(Model, VjpMatchesFiniteDifferencesFiveAddresses) {
  auto x = five_address();
  ASSERT_EQ(x.address_count, 5u);
  fd_check(x, 21);
}

TEST(Model, VjpMatchesFiniteDifferencesAllDecoders) { fd_check(fixtures::control_grid(), 22); }

TEST(Model, VjpZeroAndLinear) {
  H2mgNode net(small_config());
  auto c = randomized(fixtures::control_grid(), 5);
  auto theta = net.init(6);
  auto z = net.forward(theta, c);
  auto g0 = net.vjp(theta, c, zero_like(z));
  for (double v : g0) EXPECT_EQ(v, 0.0);
  Rng rng = make_stream(7);
  auto c1 = random_cotangent(z, rng), c2 = random_cotangent(z, rng);
  auto sum = unflatten(z, [&] {
    auto a = flatten(c1), b = flatten(c2);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
  }());
  auto g1 = net.vjp(theta, c, c1), g2 = net.vjp(theta, c, c2), g12 = net.vjp(theta, c, sum);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g12[i], g1[i] + g2[i], 1e-10);
}

TEST(Model, CheckpointIntervalAndTapeDoNotChangeGradient) {
  auto cfg = small_config();
  H2mgNode a(cfg);
  cfg.checkpoint_every = 3;
  H2mgNode b(cfg);
  cfg.checkpoint_every = 1;
  H2mgNode c1(cfg);
  auto c = randomized(fixtures::control_grid(), 8);
  auto theta = a.init(8);
  ForwardTape tape;
  auto z = a.forward(theta, c, &tape);
  EXPECT_EQ(tape.checkpoints.size(), 1u);
  Rng rng = make_stream(9);
  auto cot = random_cotangent(z, rng);
  auto ga = a.vjp(theta, c, cot);
  EXPECT_EQ(a.vjp(theta, c, cot, &tape), ga);
  EXPECT_EQ(b.vjp(theta, c, cot), ga);
  EXPECT_EQ(c1.vjp(theta, c, cot), ga);
}

TEST(Model, ShapeErrors) {
  H2mgNode net(small_config());
  auto c = randomized(fixtures::control_grid(), 1);
  auto theta = net.init(1);
  EXPECT_THROW(net.forward(std::vector<double>(3), c), std::invalid_argument);
  auto z = net.forward(theta, c);
  auto bad = z;
  bad.line["nope"] = 1.0;
  EXPECT_THROW(net.vjp(theta, c, bad), std::invalid_argument);
  bad = z;
  bad.svr.clear();
  EXPECT_THROW(net.vjp(theta, c, bad), std::invalid_argument);
}

TEST(Model, CheckpointRoundTrip) {
  H2mgNode net(small_config());
  Checkpoint ck;
  ck.model = net.config();
  ck.theta = net.init(13);
  ck.seed = 13;
  ck.schema_hash = schema_hash();
  ck.normalizer_hash = 77;
  ck.extra = {{"iteration", 5}};
  auto path = (std::filesystem::temp_directory_path() / "gridtvc_ck.json").string();
  save_checkpoint(net, ck, path);
  auto back = load_checkpoint(path);
  EXPECT_EQ(back.theta, ck.theta);
  EXPECT_EQ(back.seed, 13u);
  EXPECT_EQ(back.normalizer_hash, 77u);
  EXPECT_EQ(back.extra.at("iteration"), 5);
  EXPECT_EQ(nlohmann::json(back.model), nlohmann::json(ck.model));
  auto doc = checkpoint_to_json(net, ck);
  doc["schema_hash"] = 1;
  EXPECT_THROW(checkpoint_from_json(doc), SchemaError);
  std::filesystem::remove(path);
}

TEST(Model, ConfigValidation) {
  ModelConfig c;
  c.dt = 0.3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.leaky_slope = 1.5;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  nlohmann::json j = ModelConfig{};
  j["bogus"] = 1;
  EXPECT_THROW(j.get<ModelConfig>(), std::invalid_argument);
}
