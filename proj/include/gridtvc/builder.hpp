#pragma once

// Incremental construction of bus-branch contexts. Every call allocates the
// addresses it needs and fills the features it is given; the rest stay absent.
// Bus voltage limits are passed as fractions of V_nom.

#include <optional>
#include <string>

#include "gridtvc/h2mg.hpp"

namespace gridtvc {

class GridBuilder {
 public:
  Address bus(const std::string& id, double v_nom = 1.0, double v_min = 0.95,
              double v_max = 1.05);
  void load(const std::string& id, Address bus, double p, double q);
  Address line(const std::string& id, Address bus1, Address bus2, double r,
               double x, double b = 0.0, std::optional<double> rating = {});
  Address generator(const std::string& id, Address bus, double p,
                    double v_target, double q_min, double q_max,
                    bool regulating, bool slack = false);
  Address shunt(const std::string& id, Address bus, double g, double b,
                bool connected = true);
  Address twt(const std::string& id, Address bus1, Address bus2, double r,
              double x, std::optional<double> rating = {});
  void rtc(const std::string& id, Address twt, Address regulated_bus,
           double v_target);
  void rtc_controller(const std::string& id, Address twt, double v_target,
                      double v_nom);
  void line_controller(const std::string& id, Address line);
  void shunt_controller(const std::string& id, Address shunt);
  Address svr_zone(const std::string& id, Address regulated_bus,
                   double v_target, double v_nom = 1.0);
  void svr_unit(const std::string& id, Address gen, Address zone);
  void svr_controller(const std::string& id, Address zone);

  H2MGContext& context() { return ctx_; }
  H2MGContext take() { return std::move(ctx_); }

 private:
  H2MGContext ctx_;
};

}  // namespace gridtvc
