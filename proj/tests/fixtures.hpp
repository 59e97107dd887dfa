#pragma once

#include "gridtvc/builder.hpp"

namespace fixtures {

using gridtvc::Address;
using gridtvc::GridBuilder;
using gridtvc::H2MGContext;

// Slack bus "b1" at V=1 feeding a PQ load on "b2" through one line.
inline H2MGContext two_bus(double p, double q, double r = 0.01,
                           double x = 0.1) {
  GridBuilder g;
  Address b1 = g.bus("b1");
  Address b2 = g.bus("b2");
  g.generator("g1", b1, 0.0, 1.0, -10, 10, true, true);
  g.line("l12", b1, b2, r, x);
  g.load("ld2", b2, p, q);
  return g.take();
}

// Meshed 3-bus grid: slack b1, PV b2, PQ b3, line charging and a shunt.
inline H2MGContext three_bus() {
  GridBuilder g;
  Address b1 = g.bus("b1");
  Address b2 = g.bus("b2");
  Address b3 = g.bus("b3");
  g.generator("g1", b1, 0.0, 1.02, -10, 10, true, true);
  g.generator("g2", b2, 0.4, 1.01, -10, 10, true);
  g.line("l12", b1, b2, 0.02, 0.08, 0.04);
  g.line("l13", b1, b3, 0.03, 0.12, 0.02);
  g.line("l23", b2, b3, 0.015, 0.06, 0.01);
  g.load("ld3", b3, 0.9, 0.35);
  g.shunt("sh3", b3, 0.0, 0.1);
  return g.take();
}

// One controller of each class on a 5-bus radial feeder with an LV pocket.
inline H2MGContext control_grid() {
  GridBuilder g;
  Address b1 = g.bus("b1");
  Address b2 = g.bus("b2");
  Address b3 = g.bus("b3");
  Address b4 = g.bus("b4", 0.5625);
  Address b5 = g.bus("b5");
  g.generator("g1", b1, 0.0, 1.02, -10, 10, true, true);
  Address gz = g.generator("g5", b5, 0.2, 1.0, -0.5, 0.5, false);
  g.line("l12", b1, b2, 0.01, 0.08, 0.05, 4.0);
  Address l23a = g.line("l23a", b2, b3, 0.02, 0.12, 0.02, 4.0);
  g.line("l23b", b2, b3, 0.02, 0.12, 0.02, 4.0);
  g.line("l35", b3, b5, 0.01, 0.06, 0.01, 4.0);
  Address t = g.twt("t34", b3, b4, 0.005, 0.08, 4.0);
  g.load("ld3", b3, 0.4, 0.1);
  g.load("ld4", b4, 0.3, 0.1);
  Address sh = g.shunt("sh2", b2, 0.0, 0.15);
  g.line_controller("lc23a", l23a);
  g.shunt_controller("sc2", sh);
  g.rtc("r34", t, b4, 0.5625);
  g.rtc_controller("rc34", t, 0.5625, 0.5625);
  Address z = g.svr_zone("z5", b3, 1.0);
  g.svr_unit("u5", gz, z);
  g.svr_controller("sv5", z);
  return g.take();
}

// Capacitor on a lightly loaded bus pushes it above V_max; switching the shunt
// off is the only fix.
inline H2MGContext overvoltage_shunt() {
  GridBuilder g;
  Address b1 = g.bus("b1");
  Address b2 = g.bus("b2");
  g.generator("g1", b1, 0.0, 1.0, -10, 10, true, true);
  g.line("l12", b1, b2, 0.01, 0.1);
  g.load("ld2", b2, 0.1, 0.0);
  Address sh = g.shunt("sh2", b2, 0.0, 0.8);
  g.shunt_controller("sc2", sh);
  return g.take();
}

// Three binary controllers (one line, two shunts): 8 joint decisions.
inline H2MGContext three_binary() {
  GridBuilder g;
  Address b1 = g.bus("b1");
  Address b2 = g.bus("b2");
  Address b3 = g.bus("b3");
  g.generator("g1", b1, 0.0, 1.0, -10, 10, true, true);
  g.line("l12", b1, b2, 0.01, 0.1, 0.0, 2.0);
  g.line("l13", b1, b3, 0.01, 0.1, 0.0, 2.0);
  Address l23 = g.line("l23", b2, b3, 0.02, 0.15, 0.0, 2.0);
  g.load("ld2", b2, 0.5, 0.2);
  g.load("ld3", b3, 0.3, 0.05);
  Address s2 = g.shunt("sh2", b2, 0.0, 0.3);
  Address s3 = g.shunt("sh3", b3, 0.0, 0.6, false);
  g.line_controller("lc23", l23);
  g.shunt_controller("sc2", s2);
  g.shunt_controller("sc3", s3);
  return g.take();
}

// One SVR zone whose target sits below V_min of its pilot bus.
inline H2MGContext low_svr() {
  GridBuilder g;
  Address b1 = g.bus("b1");
  Address b2 = g.bus("b2");
  g.generator("g1", b1, 0.0, 1.0, -10, 10, true, true);
  Address gen = g.generator("g2", b2, 0.1, 1.0, -1.0, 1.0, false);
  g.line("l12", b1, b2, 0.01, 0.1);
  g.load("ld2", b2, 0.3, 0.1);
  Address z = g.svr_zone("z2", b2, 0.93);
  g.svr_unit("u2", gen, z);
  g.svr_controller("sv2", z);
  return g.take();
}

}  // namespace fixtures
