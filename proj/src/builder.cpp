#include "gridtvc/builder.hpp"

namespace gridtvc {

Address GridBuilder::bus(const std::string& id, double v_nom, double v_min,
                         double v_max) {
  Address a = ctx_.new_address();
  auto& e = ctx_.add_edge(cls::bus, id, {a});
  set(cls::bus, e, "V", v_nom);
  set(cls::bus, e, "theta", 0.0);
  set(cls::bus, e, "V_nom", v_nom);
  set(cls::bus, e, "V_min", v_min * v_nom);
  set(cls::bus, e, "V_max", v_max * v_nom);
  set(cls::bus, e, "opt", 1.0);
  return a;
}

void GridBuilder::load(const std::string& id, Address bus, double p, double q) {
  auto& e = ctx_.add_edge(cls::load, id, {bus});
  set(cls::load, e, "P_target", p);
  set(cls::load, e, "Q_target", q);
}

namespace {

void branch(std::string_view c, HyperEdge& e, double r, double x, double b,
            std::optional<double> rating) {
  set(c, e, "R", r);
  set(c, e, "X", x);
  set(c, e, "G", 0.0);
  set(c, e, "B", b);
  set(c, e, "I1_max", rating);
  set(c, e, "I2_max", rating);
  set(c, e, "opt", 1.0);
}

}  // namespace

Address GridBuilder::line(const std::string& id, Address bus1, Address bus2,
                          double r, double x, double b,
                          std::optional<double> rating) {
  Address a = ctx_.new_address();
  auto& e = ctx_.add_edge(cls::line, id, {a, bus1, bus2});
  branch(cls::line, e, r, x, b, rating);
  return a;
}

Address GridBuilder::generator(const std::string& id, Address bus, double p,
                               double v_target, double q_min, double q_max,
                               bool regulating, bool slack) {
  Address a = ctx_.new_address();
  auto& e = ctx_.add_edge(cls::generator, id, {a, bus});
  set(cls::generator, e, "P_target", p);
  set(cls::generator, e, "Q_target", 0.0);
  set(cls::generator, e, "V_target", v_target);
  set(cls::generator, e, "Q_min", q_min);
  set(cls::generator, e, "Q_max", q_max);
  set(cls::generator, e, "regulation_mode", regulating ? 1.0 : 0.0);
  set(cls::generator, e, "slack", slack ? 1.0 : 0.0);
  return a;
}

Address GridBuilder::shunt(const std::string& id, Address bus, double g,
                           double b, bool connected) {
  Address a = ctx_.new_address();
  auto& e = ctx_.add_edge(cls::shunt, id, {a, bus});
  set(cls::shunt, e, "G", g);
  set(cls::shunt, e, "B", b);
  set(cls::shunt, e, "connected", connected ? 1.0 : 0.0);
  return a;
}

Address GridBuilder::twt(const std::string& id, Address bus1, Address bus2,
                         double r, double x, std::optional<double> rating) {
  Address a = ctx_.new_address();
  auto& e = ctx_.add_edge(cls::twt, id, {a, bus1, bus2});
  branch(cls::twt, e, r, x, 0.0, rating);
  set(cls::twt, e, "alpha", 0.0);
  return a;
}

void GridBuilder::rtc(const std::string& id, Address twt, Address regulated_bus,
                      double v_target) {
  auto& e = ctx_.add_edge(cls::rtc, id, {twt, regulated_bus});
  set(cls::rtc, e, "V_target", v_target);
}

void GridBuilder::rtc_controller(const std::string& id, Address twt,
                                 double v_target, double v_nom) {
  auto& e = ctx_.add_edge(cls::rtc_controller, id, {twt});
  set(cls::rtc_controller, e, "V_target", v_target);
  set(cls::rtc_controller, e, "V_nom", v_nom);
}

void GridBuilder::line_controller(const std::string& id, Address line) {
  ctx_.add_edge(cls::line_controller, id, {line});
}

void GridBuilder::shunt_controller(const std::string& id, Address shunt) {
  ctx_.add_edge(cls::shunt_controller, id, {shunt});
}

Address GridBuilder::svr_zone(const std::string& id, Address regulated_bus,
                              double v_target, double v_nom) {
  Address a = ctx_.new_address();
  auto& e = ctx_.add_edge(cls::svr_zone, id, {a, regulated_bus});
  set(cls::svr_zone, e, "V_nom", v_nom);
  set(cls::svr_zone, e, "V_target", v_target);
  return a;
}

void GridBuilder::svr_unit(const std::string& id, Address gen, Address zone) {
  auto& e = ctx_.add_edge(cls::svr_unit, id, {gen, zone});
  set(cls::svr_unit, e, "participate", 1.0);
}

void GridBuilder::svr_controller(const std::string& id, Address zone) {
  ctx_.add_edge(cls::svr_controller, id, {zone});
}

}  // namespace gridtvc
