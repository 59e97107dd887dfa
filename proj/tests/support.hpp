#pragma once

// Independent references and helpers shared by the unit and acceptance tests.

#include <array>
#include <cmath>
#include <complex>
#include <numeric>

#include "fixtures.hpp"
#include "gridtvc/estimator.hpp"
#include "gridtvc/model.hpp"
#include "gridtvc/powerflow.hpp"

namespace support {

using namespace gridtvc;
using cd = std::complex<double>;

// --- power flow ---

// V2 from the 2-bus quartic V2^4 + (2a - V1^2) V2^2 + c = 0 (high-voltage
// root), with a = RP + XQ, c = (R^2 + X^2)(P^2 + Q^2).
struct TwoBusRoot {
  bool exists;
  double v2;
  double theta2;
};

inline TwoBusRoot two_bus_root(double p, double q, double r, double x) {
  long double a = r * p + x * q;
  long double b = x * p - r * q;
  long double c = (static_cast<long double>(r) * r + x * x) * (p * p + q * q);
  long double lin = 2 * a - 1;
  long double disc = lin * lin - 4 * c;
  if (disc < 0) return {false, 0, 0};
  long double u = (-lin + std::sqrt(disc)) / 2;
  long double v2 = std::sqrt(u);
  // V1 = V2 + (a + jb)/V2 with V2 on the real axis; rotate so V1 is at 0.
  long double ang = std::atan2(b / v2, v2 + a / v2);
  return {true, static_cast<double>(v2), static_cast<double>(-ang)};
}

// Independent rectangular-coordinate Newton for the 3-bus fixture with a
// finite-difference Jacobian and explicit branch currents.
struct ThreeBusOracle {
  struct Br {
    int i, j;
    double r, x, b;
  };
  std::array<Br, 3> lines{{{0, 1, 0.02, 0.08, 0.04},
                           {0, 2, 0.03, 0.12, 0.02},
                           {1, 2, 0.015, 0.06, 0.01}}};
  double v1 = 1.02, v2 = 1.01, p2 = 0.4, p3 = -0.9, q3 = -0.35, b3 = 0.1;

  std::array<cd, 3> injections(const std::array<cd, 3>& v) const {
    std::array<cd, 3> cur{};
    for (const auto& l : lines) {
      cd z(l.r, l.x);
      cd iij = (v[l.i] - v[l.j]) / z + cd(0, l.b / 2) * v[l.i];
      cd iji = (v[l.j] - v[l.i]) / z + cd(0, l.b / 2) * v[l.j];
      cur[l.i] += iij;
      cur[l.j] += iji;
    }
    cur[2] += cd(0, b3) * v[2];
    std::array<cd, 3> s{};
    for (int k = 0; k < 3; ++k) s[k] = v[k] * std::conj(cur[k]);
    return s;
  }

  std::array<double, 4> residual(const std::array<double, 4>& u) const {
    std::array<cd, 3> v{cd(v1, 0), cd(u[0], u[1]), cd(u[2], u[3])};
    auto s = injections(v);
    return {s[1].real() - p2, std::norm(v[1]) - v2 * v2, s[2].real() - p3,
            s[2].imag() - q3};
  }

  std::array<cd, 3> solve() const {
    std::array<double, 4> u{v2, 0, 1, 0};
    for (int it = 0; it < 50; ++it) {
      auto f = residual(u);
      double jac[4][5];
      for (int c = 0; c < 4; ++c) {
        auto up = u, dn = u;
        const double h = 1e-7;
        up[c] += h;
        dn[c] -= h;
        auto fu = residual(up), fd = residual(dn);
        for (int r = 0; r < 4; ++r) jac[r][c] = (fu[r] - fd[r]) / (2 * h);
      }
      for (int r = 0; r < 4; ++r) jac[r][4] = -f[r];
      for (int c = 0; c < 4; ++c) {  // Gaussian elimination, partial pivoting
        int piv = c;
        for (int r = c + 1; r < 4; ++r)
          if (std::abs(jac[r][c]) > std::abs(jac[piv][c])) piv = r;
        for (int k = 0; k < 5; ++k) std::swap(jac[c][k], jac[piv][k]);
        for (int r = 0; r < 4; ++r) {
          if (r == c) continue;
          double m = jac[r][c] / jac[c][c];
          for (int k = 0; k < 5; ++k) jac[r][k] -= m * jac[c][k];
        }
      }
      for (int c = 0; c < 4; ++c) u[c] += jac[c][4] / jac[c][c];
    }
    return {cd(v1, 0), cd(u[0], u[1]), cd(u[2], u[3])};
  }
};

// --- model ---

inline ModelConfig small_config() {
  ModelConfig c;
  c.latent = 8;
  c.encoder_hidden = {12};
  c.encoder_out = 6;
  c.message_hidden = {10, 9};
  c.decoder_hidden = {11};
  c.dt = 0.05;
  return c;
}

// Five addresses: two buses, a generator, a line and a shunt.
inline H2MGContext five_address() {
  GridBuilder g;
  Address b1 = g.bus("b1");
  Address b2 = g.bus("b2");
  g.generator("g1", b1, 0.0, 1.0, -1, 1, true, true);
  Address l = g.line("l12", b1, b2, 0.01, 0.1);
  g.load("ld2", b2, 0.3, 0.1);
  Address sh = g.shunt("sh2", b2, 0.0, 0.2);
  g.line_controller("lc12", l);
  g.shunt_controller("sc2", sh);
  return g.take();
}

// Random stand-in for normalized features.
inline CompiledContext randomized(const H2MGContext& x, std::uint64_t seed) {
  auto c = compile_context(x);
  Rng rng = make_stream(seed);
  for (auto& cl : c.classes)
    for (Eigen::Index i = 0; i < cl.features.size(); ++i)
      cl.features.data()[i] = uniform(rng, 0, 1);
  return c;
}

inline SurrogateDecision random_cotangent(const SurrogateDecision& shape, Rng& rng) {
  auto v = flatten(shape);
  for (auto& a : v) a = uniform(rng, -1, 1);
  return unflatten(shape, v);
}

inline double dot(const SurrogateDecision& a, const SurrogateDecision& b) {
  auto x = flatten(a), y = flatten(b);
  return std::inner_product(x.begin(), x.end(), y.begin(), 0.0);
}

// --- estimator ---

// f depends only on the decision through a fixed table over 3 bits.
inline Oracle table_oracle(std::array<double, 8> table) {
  return [table](const H2MGContext&, const Decision& y) {
    int i = y.line.at("lc23") | (y.shunt.at("sc2") << 1) | (y.shunt.at("sc3") << 2);
    return OracleResult{table[i], true};
  };
}

inline Oracle constant_oracle(double c) {
  return [c](const H2MGContext&, const Decision&) { return OracleResult{c, true}; };
}

inline SurrogateDecision random_z(const H2MGContext& x, Rng& rng, double scale = 2.0) {
  SurrogateDecision z = zero_surrogate(x);
  for (auto& [_, v] : z.line) v = uniform(rng, -scale, scale);
  for (auto& [_, v] : z.shunt) v = uniform(rng, -scale, scale);
  for (auto& [_, v] : z.rtc)
    for (auto& c : v) c = uniform(rng, -scale, scale);
  return z;
}

// Independent evaluation of -H + beta E[f] over the 3-bit space.
inline double enumerated_objective(const SurrogateDecision& z, const Oracle& f,
                            const H2MGContext& x, double beta) {
  auto sig = [](double a) { return 1.0 / (1.0 + std::exp(-a)); };
  double p1[3] = {sig(z.line.at("lc23")), sig(z.shunt.at("sc2")), sig(z.shunt.at("sc3"))};
  double neg_h = 0, ef = 0;
  for (int i = 0; i < 8; ++i) {
    double p = 1;
    for (int b = 0; b < 3; ++b) p *= ((i >> b) & 1) ? p1[b] : 1 - p1[b];
    Decision y;
    y.line["lc23"] = i & 1;
    y.shunt["sc2"] = (i >> 1) & 1;
    y.shunt["sc3"] = (i >> 2) & 1;
    neg_h += p * std::log(p);
    ef += p * f(x, y).f;
  }
  return neg_h + beta * ef;
}

}  // namespace support
