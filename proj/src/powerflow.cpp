#include "gridtvc/powerflow.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <iostream>
#include <limits>
#include <map>
#include <set>

#include <Eigen/Dense>

namespace gridtvc {

void SolverOptions::validate() const {
  if (!(tolerance > 0) || max_inner_iterations < 1 || max_outer_loops < 0 ||
      tap_positions < 2 || !(tap_max > tap_min) || !(rtc_deadband > 0) ||
      !(prohibitive_cost > 0))
    throw std::invalid_argument("invalid solver options");
}

namespace {

using cd = std::complex<double>;
constexpr double kInf = std::numeric_limits<double>::infinity();

void warn_inert_classes(const H2MGContext& g) {
  static std::atomic<bool> warned{false};
  for (auto c : {cls::battery, cls::svc, cls::vsc_station, cls::hvdc_line})
    if (g.count(c) > 0 && !warned.exchange(true)) {
      std::clog << "gridtvc: Battery/SVC/VSC/HVDC edges are ignored by the "
                   "power-flow solver\n";
      return;
    }
}

struct Branch {
  int from = -1;
  int to = -1;
  cd y11, y12, y21, y22;
};

struct Gen {
  int bus = -1;
  double p = 0;
  double q_target = 0;
  double v_target = 1;
  double qmin = -kInf;
  double qmax = kInf;
  bool slack = false;
  bool regulating = false;
  int zone = -1;          // SVR zone index when participating
  bool q_fixed = false;   // PV generator switched to PQ at a limit
  double q_fixed_value = 0;
};

struct Unit {
  std::size_t gen = 0;
  double range = 0;
  bool frozen = false;
  double q = 0;
};

struct Zone {
  int reg_bus = -1;
  double target = 1;
  std::vector<Unit> units;
  bool active = false;
  double k = 0;
};

struct Rtc {
  std::size_t twt = 0;
  int reg_bus = -1;
  double target = 1;
  double v_nom = 1;
  double sign = 1;
  double rho_nom = 1;
  int tap = 0;
  int last_dir = 0;
  bool locked = false;
};

enum class BusType { pq, pv, slack, dead };

class Network {
 public:
  Network(const H2MGContext& g, const SolverOptions& o) : grid_(g), opts_(o) {
    build();
  }

  PowerFlowSolution solve();

 private:
  void build();
  void stamp_ybus();
  void classify();
  void index_unknowns();
  bool newton(std::string& why);
  void mismatch(Eigen::VectorXd& f) const;
  Eigen::MatrixXd jacobian() const;
  double q_spec(int b) const;
  double p_spec(int b) const;
  bool rtc_step();
  bool svr_dispatch();
  bool q_limits();
  cd injection(int b) const;
  double tap_ratio(const Rtc& r) const {
    double step = (opts_.tap_max - opts_.tap_min) / (opts_.tap_positions - 1);
    return r.rho_nom * (opts_.tap_min + step * r.tap);
  }

  const H2MGContext& grid_;
  const SolverOptions& opts_;

  int n_ = 0;
  std::map<Address, int> bus_at_;
  std::vector<double> vm_, va_, vnom_;
  std::vector<double> pload_, qload_;
  std::vector<cd> yshunt_;
  std::vector<BusType> type_;
  std::vector<double> pv_target_;
  std::vector<Branch> lines_, twts_;
  std::vector<double> twt_rho_, twt_alpha_;
  std::vector<cd> twt_y_, twt_ysh_;
  std::vector<Gen> gens_;
  std::vector<Zone> zones_;
  std::vector<Rtc> rtcs_;
  std::vector<double> shunt_g_, shunt_b_;
  std::vector<int> shunt_bus_;
  std::vector<bool> shunt_on_;
  int slack_ = -1;
  bool islanded_injection_ = false;

  Eigen::MatrixXcd ybus_;
  std::vector<int> pvpq_, pq_, active_zones_;
  std::vector<int> col_theta_, col_v_;  // bus -> unknown column or -1

  int inner_iterations_ = 0;
};

double feature_or(std::string_view cls_name, const HyperEdge& e,
                  std::string_view f, double fallback) {
  return value_or(cls_name, e, f, fallback);
}

void Network::build() {
  const auto& buses = grid_.of(cls::bus);
  n_ = static_cast<int>(buses.size());
  vm_.resize(n_);
  va_.resize(n_);
  vnom_.resize(n_);
  pload_.assign(n_, 0);
  qload_.assign(n_, 0);
  yshunt_.assign(n_, cd{});
  pv_target_.assign(n_, 0);
  for (int b = 0; b < n_; ++b) {
    const auto& e = buses[b];
    bus_at_[e.ports.at(0)] = b;
    vnom_[b] = feature_or(cls::bus, e, "V_nom", 1.0);
    double v0 = feature_or(cls::bus, e, "V", vnom_[b]);
    if (!(v0 > 0.5 * vnom_[b] && v0 < 1.5 * vnom_[b])) v0 = vnom_[b];
    vm_[b] = v0;
    va_[b] = feature_or(cls::bus, e, "theta", 0.0);
  }
  auto bus_of = [&](Address a) {
    auto it = bus_at_.find(a);
    if (it == bus_at_.end())
      throw SchemaError("port address " + std::to_string(a) + " is not a bus");
    return it->second;
  };

  for (const auto& e : grid_.of(cls::line)) {
    Branch br;
    br.from = bus_of(port(cls::line, e, "Bus1"));
    br.to = bus_of(port(cls::line, e, "Bus2"));
    cd y = 1.0 / cd(feature_or(cls::line, e, "R", 0.0),
                    feature_or(cls::line, e, "X", 0.0));
    cd ysh(feature_or(cls::line, e, "G", 0.0),
           feature_or(cls::line, e, "B", 0.0));
    br.y11 = y + ysh / 2.0;
    br.y22 = y + ysh / 2.0;
    br.y12 = -y;
    br.y21 = -y;
    lines_.push_back(br);
  }

  std::map<Address, std::size_t> twt_at;
  const auto& twts = grid_.of(cls::twt);
  for (std::size_t i = 0; i < twts.size(); ++i) {
    const auto& e = twts[i];
    twt_at[port(cls::twt, e, "TWT")] = i;
    Branch br;
    br.from = bus_of(port(cls::twt, e, "Bus1"));
    br.to = bus_of(port(cls::twt, e, "Bus2"));
    twts_.push_back(br);
    twt_y_.push_back(1.0 / cd(feature_or(cls::twt, e, "R", 0.0),
                              feature_or(cls::twt, e, "X", 0.0)));
    twt_ysh_.push_back(cd(feature_or(cls::twt, e, "G", 0.0),
                          feature_or(cls::twt, e, "B", 0.0)));
    double rho_nom = vnom_[br.to] / vnom_[br.from];
    twt_rho_.push_back(feature_or(cls::twt, e, "rho", rho_nom));
    twt_alpha_.push_back(feature_or(cls::twt, e, "alpha", 0.0));
  }

  for (const auto& e : grid_.of(cls::rtc)) {
    auto it = twt_at.find(port(cls::rtc, e, "TWT"));
    if (it == twt_at.end()) continue;
    Rtc r;
    r.twt = it->second;
    r.reg_bus = bus_of(port(cls::rtc, e, "RegulatedBus"));
    r.v_nom = vnom_[r.reg_bus];
    r.target = std::clamp(feature_or(cls::rtc, e, "V_target", r.v_nom),
                          opts_.min_target_voltage, opts_.max_target_voltage);
    const auto& br = twts_[r.twt];
    r.sign = r.reg_bus == br.from ? -1.0 : 1.0;
    r.rho_nom = vnom_[br.to] / vnom_[br.from];
    double step = (opts_.tap_max - opts_.tap_min) / (opts_.tap_positions - 1);
    double pos = (twt_rho_[r.twt] / r.rho_nom - opts_.tap_min) / step;
    r.tap = std::clamp(static_cast<int>(std::lround(pos)), 0,
                       opts_.tap_positions - 1);
    rtcs_.push_back(r);
  }
  for (const auto& r : rtcs_) twt_rho_[r.twt] = tap_ratio(r);

  for (const auto& e : grid_.of(cls::shunt)) {
    shunt_bus_.push_back(bus_of(port(cls::shunt, e, "Bus")));
    shunt_g_.push_back(feature_or(cls::shunt, e, "G", 0.0));
    shunt_b_.push_back(feature_or(cls::shunt, e, "B", 0.0));
    shunt_on_.push_back(feature_or(cls::shunt, e, "connected", 1.0) > 0.5);
  }
  for (std::size_t s = 0; s < shunt_bus_.size(); ++s)
    if (shunt_on_[s]) yshunt_[shunt_bus_[s]] += cd(shunt_g_[s], shunt_b_[s]);

  for (const auto& e : grid_.of(cls::load)) {
    int b = bus_of(port(cls::load, e, "Bus"));
    pload_[b] += feature_or(cls::load, e, "P_target",
                            feature_or(cls::load, e, "P", 0.0));
    qload_[b] += feature_or(cls::load, e, "Q_target",
                            feature_or(cls::load, e, "Q", 0.0));
  }

  std::map<Address, std::size_t> gen_at;
  for (const auto& e : grid_.of(cls::generator)) {
    Gen g;
    g.bus = bus_of(port(cls::generator, e, "Bus"));
    g.p = feature_or(cls::generator, e, "P_target", 0.0);
    g.q_target = feature_or(cls::generator, e, "Q_target", 0.0);
    g.v_target = std::clamp(
        feature_or(cls::generator, e, "V_target", vnom_[g.bus]),
        opts_.min_target_voltage, opts_.max_target_voltage);
    g.qmin = feature_or(cls::generator, e, "Q_min", -kInf);
    g.qmax = feature_or(cls::generator, e, "Q_max", kInf);
    g.slack = feature_or(cls::generator, e, "slack", 0.0) > 0.5;
    g.regulating = feature_or(cls::generator, e, "regulation_mode", 0.0) > 0.5;
    gen_at[port(cls::generator, e, "Gen")] = gens_.size();
    gens_.push_back(g);
  }

  std::map<Address, int> zone_at;
  for (const auto& e : grid_.of(cls::svr_zone)) {
    Zone z;
    z.reg_bus = bus_of(port(cls::svr_zone, e, "RegulatedBus"));
    z.target = std::clamp(
        feature_or(cls::svr_zone, e, "V_target", vnom_[z.reg_bus]),
        opts_.min_target_voltage, opts_.max_target_voltage);
    zone_at[port(cls::svr_zone, e, "Zone")] = static_cast<int>(zones_.size());
    zones_.push_back(z);
  }
  for (const auto& e : grid_.of(cls::svr_unit)) {
    if (feature_or(cls::svr_unit, e, "participate", 1.0) < 0.5) continue;
    auto g = gen_at.find(port(cls::svr_unit, e, "Gen"));
    auto z = zone_at.find(port(cls::svr_unit, e, "Zone"));
    if (g == gen_at.end() || z == zone_at.end()) continue;
    auto& gen = gens_[g->second];
    if (gen.slack || gen.zone >= 0) continue;
    gen.zone = z->second;
    Unit u;
    u.gen = g->second;
    u.range = std::isfinite(gen.qmax - gen.qmin) ? gen.qmax - gen.qmin : 0.0;
    zones_[z->second].units.push_back(u);
  }

  for (std::size_t i = 0; i < gens_.size(); ++i)
    if (gens_[i].slack) {
      slack_ = gens_[i].bus;
      break;
    }
  classify();
}

void Network::stamp_ybus() {
  ybus_ = Eigen::MatrixXcd::Zero(n_, n_);
  for (int b = 0; b < n_; ++b) ybus_(b, b) += yshunt_[b];
  auto stamp = [&](const Branch& br) {
    ybus_(br.from, br.from) += br.y11;
    ybus_(br.from, br.to) += br.y12;
    ybus_(br.to, br.from) += br.y21;
    ybus_(br.to, br.to) += br.y22;
  };
  for (const auto& br : lines_) stamp(br);
  for (std::size_t i = 0; i < twts_.size(); ++i) {
    auto& br = twts_[i];
    cd ratio = std::polar(twt_rho_[i], twt_alpha_[i]);
    double r2 = twt_rho_[i] * twt_rho_[i];
    br.y11 = r2 * (twt_y_[i] + twt_ysh_[i]);
    br.y12 = -std::conj(ratio) * twt_y_[i];
    br.y21 = -ratio * twt_y_[i];
    br.y22 = twt_y_[i];
    stamp(br);
  }
}

// Bus types from connectivity and generator state. Buses not reachable from
// the slack are dead; a dead bus carrying a load or generator makes the grid
// unsolvable.
void Network::classify() {
  type_.assign(n_, BusType::dead);
  if (slack_ < 0) return;
  std::vector<std::vector<int>> adj(n_);
  for (const auto* list : {&lines_, &twts_})
    for (const auto& br : *list) {
      adj[br.from].push_back(br.to);
      adj[br.to].push_back(br.from);
    }
  std::vector<int> stack{slack_};
  type_[slack_] = BusType::pq;
  while (!stack.empty()) {
    int b = stack.back();
    stack.pop_back();
    for (int nb : adj[b])
      if (type_[nb] == BusType::dead) {
        type_[nb] = BusType::pq;
        stack.push_back(nb);
      }
  }
  for (int b = 0; b < n_; ++b)
    if (type_[b] == BusType::dead && (pload_[b] != 0 || qload_[b] != 0))
      islanded_injection_ = true;
  for (const auto& g : gens_) {
    if (type_[g.bus] == BusType::dead) {
      islanded_injection_ = true;
      continue;
    }
    if (g.zone < 0 && g.regulating && !g.q_fixed && !g.slack &&
        type_[g.bus] == BusType::pq) {
      type_[g.bus] = BusType::pv;
      pv_target_[g.bus] = g.v_target;
    }
  }
  type_[slack_] = BusType::slack;
  for (const auto& g : gens_)
    if (g.slack && g.bus == slack_) {
      pv_target_[slack_] = g.v_target;
      break;
    }
  for (int b = 0; b < n_; ++b) {
    if (type_[b] == BusType::pv || type_[b] == BusType::slack)
      vm_[b] = pv_target_[b];
    if (type_[b] == BusType::dead) vm_[b] = 0, va_[b] = 0;
  }
  va_[slack_] = 0;
  for (auto& z : zones_) {
    z.active = false;
    if (type_[z.reg_bus] != BusType::pq) continue;
    for (const auto& u : z.units)
      if (!u.frozen && u.range > 0 && type_[gens_[u.gen].bus] == BusType::pq)
        z.active = true;
  }
}

void Network::index_unknowns() {
  pvpq_.clear();
  pq_.clear();
  active_zones_.clear();
  col_theta_.assign(n_, -1);
  col_v_.assign(n_, -1);
  for (int b = 0; b < n_; ++b)
    if (type_[b] == BusType::pq || type_[b] == BusType::pv) pvpq_.push_back(b);
  for (int b = 0; b < n_; ++b)
    if (type_[b] == BusType::pq) pq_.push_back(b);
  for (std::size_t z = 0; z < zones_.size(); ++z)
    if (zones_[z].active) active_zones_.push_back(static_cast<int>(z));
  int c = 0;
  for (int b : pvpq_) col_theta_[b] = c++;
  for (int b : pq_) col_v_[b] = c++;
}

double Network::p_spec(int b) const {
  double p = -pload_[b];
  for (const auto& g : gens_)
    if (g.bus == b) p += g.p;
  return p;
}

double Network::q_spec(int b) const {
  double q = -qload_[b];
  for (const auto& g : gens_) {
    if (g.bus != b) continue;
    if (g.zone >= 0) continue;  // added below
    if (g.q_fixed)
      q += g.q_fixed_value;
    else if (!g.regulating && !g.slack)
      q += g.q_target;
  }
  for (const auto& z : zones_)
    for (const auto& u : z.units) {
      if (gens_[u.gen].bus != b) continue;
      if (u.frozen)
        q += u.q;
      else if (z.active)
        q += z.k * u.range;
      else
        q += gens_[u.gen].q_target;
    }
  return q;
}

cd Network::injection(int b) const {
  cd i{};
  for (int k = 0; k < n_; ++k)
    if (ybus_(b, k) != cd{}) i += ybus_(b, k) * std::polar(vm_[k], va_[k]);
  return std::polar(vm_[b], va_[b]) * std::conj(i);
}

void Network::mismatch(Eigen::VectorXd& f) const {
  const std::size_t m = pvpq_.size() + pq_.size() + active_zones_.size();
  f.resize(static_cast<Eigen::Index>(m));
  Eigen::VectorXcd v(n_);
  for (int b = 0; b < n_; ++b) v[b] = std::polar(vm_[b], va_[b]);
  Eigen::VectorXcd s = v.cwiseProduct((ybus_ * v).conjugate());
  Eigen::Index r = 0;
  for (int b : pvpq_) f[r++] = s[b].real() - p_spec(b);
  for (int b : pq_) f[r++] = s[b].imag() - q_spec(b);
  for (int z : active_zones_) f[r++] = vm_[zones_[z].reg_bus] - zones_[z].target;
}

Eigen::MatrixXd Network::jacobian() const {
  const auto npvpq = static_cast<Eigen::Index>(pvpq_.size());
  const auto npq = static_cast<Eigen::Index>(pq_.size());
  const auto nz = static_cast<Eigen::Index>(active_zones_.size());
  const Eigen::Index m = npvpq + npq + nz;
  Eigen::MatrixXd j = Eigen::MatrixXd::Zero(m, m);

  Eigen::VectorXcd v(n_), vn(n_);
  for (int b = 0; b < n_; ++b) {
    v[b] = std::polar(vm_[b], va_[b]);
    vn[b] = vm_[b] > 0 ? std::polar(1.0, va_[b]) : cd{};
  }
  Eigen::VectorXcd ibus = ybus_ * v;
  const cd jj(0, 1);
  // dS_i/dVa_k = j V_i conj(delta_ik I_i - Y_ik V_k)
  // dS_i/dVm_k = V_i conj(Y_ik Vn_k) + delta_ik conj(I_i) Vn_i
  auto ds_dva = [&](int i, int k) {
    cd d = -ybus_(i, k) * v[k];
    if (i == k) d += ibus[i];
    return jj * v[i] * std::conj(d);
  };
  auto ds_dvm = [&](int i, int k) {
    cd d = v[i] * std::conj(ybus_(i, k) * vn[k]);
    if (i == k) d += std::conj(ibus[i]) * vn[i];
    return d;
  };

  auto row_p = [&](int b) { return col_theta_[b]; };
  auto row_q = [&](int b) { return npvpq + (col_v_[b] - npvpq); };
  for (int i : pvpq_) {
    for (int k : pvpq_) {
      if (ybus_(i, k) == cd{} && i != k) continue;
      cd d = ds_dva(i, k);
      j(row_p(i), col_theta_[k]) = d.real();
      if (col_v_[i] >= 0) j(row_q(i), col_theta_[k]) = d.imag();
    }
    for (int k : pq_) {
      if (ybus_(i, k) == cd{} && i != k) continue;
      cd d = ds_dvm(i, k);
      j(row_p(i), col_v_[k]) = d.real();
      if (col_v_[i] >= 0) j(row_q(i), col_v_[k]) = d.imag();
    }
  }
  for (Eigen::Index zi = 0; zi < nz; ++zi) {
    const auto& z = zones_[active_zones_[zi]];
    const Eigen::Index col = npvpq + npq + zi;
    for (const auto& u : z.units) {
      if (u.frozen) continue;
      int b = gens_[u.gen].bus;
      if (col_v_[b] >= 0) j(row_q(b), col) -= u.range;
    }
    j(col, col_v_[z.reg_bus]) = 1.0;
  }
  return j;
}

bool Network::newton(std::string& why) {
  index_unknowns();
  Eigen::VectorXd f;
  for (int it = 0;; ++it) {
    stamp_ybus();
    mismatch(f);
    double worst = f.size() ? f.cwiseAbs().maxCoeff() : 0.0;
    if (!std::isfinite(worst)) {
      why = "non-finite mismatch";
      return false;
    }
    if (worst <= opts_.tolerance) return true;
    if (it >= opts_.max_inner_iterations) {
      why = "inner iterations exhausted";
      return false;
    }
    Eigen::MatrixXd j = jacobian();
    Eigen::VectorXd dx = j.partialPivLu().solve(-f);
    if (!dx.allFinite()) {
      why = "singular Jacobian";
      return false;
    }
    for (int b : pvpq_) va_[b] += dx[col_theta_[b]];
    for (int b : pq_) vm_[b] += dx[col_v_[b]];
    const auto base = static_cast<Eigen::Index>(pvpq_.size() + pq_.size());
    for (std::size_t zi = 0; zi < active_zones_.size(); ++zi)
      zones_[active_zones_[zi]].k += dx[base + static_cast<Eigen::Index>(zi)];
    ++inner_iterations_;
    for (int b : pq_)
      if (!(vm_[b] > opts_.min_plausible_voltage &&
            vm_[b] < opts_.max_plausible_voltage)) {
        why = "implausible voltage";
        return false;
      }
  }
}

bool Network::rtc_step() {
  bool changed = false;
  for (auto& r : rtcs_) {
    if (r.locked || type_[r.reg_bus] == BusType::dead) continue;
    double err = vm_[r.reg_bus] - r.target;
    if (std::abs(err) <= opts_.rtc_deadband * r.v_nom) continue;
    int dir = static_cast<int>((err < 0 ? 1.0 : -1.0) * r.sign);
    if (r.last_dir != 0 && dir != r.last_dir) {
      r.locked = true;  // crossed the band: settle on this tap
      continue;
    }
    int next = r.tap + dir;
    if (next < 0 || next >= opts_.tap_positions) continue;
    r.tap = next;
    r.last_dir = dir;
    twt_rho_[r.twt] = tap_ratio(r);
    changed = true;
  }
  return changed;
}

bool Network::svr_dispatch() {
  bool changed = false;
  for (auto& z : zones_) {
    if (!z.active) continue;
    for (auto& u : z.units) {
      if (u.frozen) continue;
      const auto& g = gens_[u.gen];
      double q = z.k * u.range;
      if (q > g.qmax + 1e-9) {
        u.frozen = true, u.q = g.qmax, changed = true;
      } else if (q < g.qmin - 1e-9) {
        u.frozen = true, u.q = g.qmin, changed = true;
      }
    }
  }
  if (changed) classify();
  return changed;
}

bool Network::q_limits() {
  bool changed = false;
  for (int b = 0; b < n_; ++b) {
    if (type_[b] != BusType::pv) continue;
    double qmin = 0, qmax = 0, q_other = -qload_[b];
    std::vector<std::size_t> reg;
    for (std::size_t i = 0; i < gens_.size(); ++i) {
      const auto& g = gens_[i];
      if (g.bus != b) continue;
      if (g.zone < 0 && g.regulating && !g.q_fixed && !g.slack) {
        reg.push_back(i);
        qmin += g.qmin;
        qmax += g.qmax;
      }
    }
    // Reactive output the regulating units at b must supply.
    q_other = q_spec(b);
    double q_reg = injection(b).imag() - q_other;
    bool high = q_reg > qmax + 1e-9, low = q_reg < qmin - 1e-9;
    if (!high && !low) continue;
    for (auto i : reg) {
      gens_[i].q_fixed = true;
      gens_[i].q_fixed_value = high ? gens_[i].qmax : gens_[i].qmin;
    }
    changed = true;
  }
  if (changed) classify();
  return changed;
}

PowerFlowSolution Network::solve() {
  PowerFlowSolution sol;
  auto fail = [&](std::string why) {
    sol.converged = false;
    sol.failure = std::move(why);
    sol.inner_iterations = inner_iterations_;
    return sol;
  };
  if (slack_ < 0) return fail("no slack generator");
  if (islanded_injection_) return fail("islanded bus with injection");

  std::string why;
  if (!newton(why)) return fail(why);
  int outer = 0;
  for (;;) {
    bool changed = rtc_step();
    changed = svr_dispatch() || changed;
    changed = q_limits() || changed;
    if (!changed) break;
    if (++outer > opts_.max_outer_loops) {
      sol.outer_loops = outer - 1;
      return fail("outer loops exhausted");
    }
    if (!newton(why)) {
      sol.outer_loops = outer;
      return fail(why);
    }
  }

  sol.converged = true;
  sol.inner_iterations = inner_iterations_;
  sol.outer_loops = outer;
  stamp_ybus();
  Eigen::VectorXd f;
  mismatch(f);
  sol.max_mismatch = f.size() ? f.cwiseAbs().maxCoeff() : 0.0;

  sol.v = vm_;
  sol.theta = va_;
  sol.energized.resize(n_);
  for (int b = 0; b < n_; ++b) sol.energized[b] = type_[b] != BusType::dead;

  auto flow = [&](const Branch& br) {
    cd v1 = std::polar(vm_[br.from], va_[br.from]);
    cd v2 = std::polar(vm_[br.to], va_[br.to]);
    cd i1 = br.y11 * v1 + br.y12 * v2;
    cd i2 = br.y21 * v1 + br.y22 * v2;
    cd s1 = v1 * std::conj(i1), s2 = v2 * std::conj(i2);
    return BranchFlow{s1.real(), s1.imag(), std::abs(i1),
                      s2.real(), s2.imag(), std::abs(i2)};
  };
  for (const auto& br : lines_) sol.lines.push_back(flow(br));
  for (const auto& br : twts_) sol.twts.push_back(flow(br));
  sol.twt_rho = twt_rho_;

  sol.gen_p.assign(gens_.size(), 0);
  sol.gen_q.assign(gens_.size(), 0);
  for (std::size_t i = 0; i < gens_.size(); ++i) sol.gen_p[i] = gens_[i].p;
  for (const auto& z : zones_)
    for (const auto& u : z.units)
      sol.gen_q[u.gen] = u.frozen ? u.q
                         : z.active ? z.k * u.range
                                    : gens_[u.gen].q_target;
  for (std::size_t i = 0; i < gens_.size(); ++i) {
    const auto& g = gens_[i];
    if (g.zone >= 0) continue;
    if (g.q_fixed)
      sol.gen_q[i] = g.q_fixed_value;
    else if (!g.regulating && !g.slack)
      sol.gen_q[i] = g.q_target;
  }
  // Regulating and slack units at each bus share the residual injection.
  for (int b = 0; b < n_; ++b) {
    if (type_[b] != BusType::pv && type_[b] != BusType::slack) continue;
    cd s = injection(b);
    std::vector<std::size_t> reg;
    double q_fixed = -qload_[b], p_fixed = -pload_[b];
    std::size_t slack_gen = gens_.size();
    for (std::size_t i = 0; i < gens_.size(); ++i) {
      const auto& g = gens_[i];
      if (g.bus != b) continue;
      bool is_reg = g.slack || (g.zone < 0 && g.regulating && !g.q_fixed);
      if (is_reg)
        reg.push_back(i);
      else
        q_fixed += sol.gen_q[i];
      if (g.slack && slack_gen == gens_.size())
        slack_gen = i;
      else
        p_fixed += g.p;
    }
    if (slack_gen < gens_.size()) sol.gen_p[slack_gen] = s.real() - p_fixed;
    if (reg.empty()) continue;
    double q_total = s.imag() - q_fixed;
    double range_sum = 0;
    for (auto i : reg) {
      double r = gens_[i].qmax - gens_[i].qmin;
      range_sum += std::isfinite(r) ? r : 0.0;
    }
    for (auto i : reg) {
      double r = gens_[i].qmax - gens_[i].qmin;
      double share = range_sum > 0 && std::isfinite(r)
                         ? r / range_sum
                         : 1.0 / static_cast<double>(reg.size());
      sol.gen_q[i] = q_total * share;
    }
  }
  sol.shunt_q.assign(shunt_bus_.size(), 0);
  for (std::size_t s = 0; s < shunt_bus_.size(); ++s)
    if (shunt_on_[s])
      sol.shunt_q[s] = -shunt_b_[s] * vm_[shunt_bus_[s]] * vm_[shunt_bus_[s]];
  return sol;
}

}  // namespace

PowerFlowSolution solve_ac(const H2MGContext& grid, const SolverOptions& opts) {
  opts.validate();
  warn_inert_classes(grid);
  try {
    Network net(grid, opts);
    return net.solve();
  } catch (const SchemaError& e) {
    PowerFlowSolution sol;
    sol.failure = e.what();
    return sol;
  }
}

void write_solution(H2MGContext& grid, const PowerFlowSolution& sol) {
  auto& buses = grid.of(cls::bus);
  std::map<Address, std::size_t> bus_at;
  for (std::size_t b = 0; b < buses.size(); ++b) {
    bus_at[buses[b].ports.at(0)] = b;
    set(cls::bus, buses[b], "V", sol.v.at(b));
    set(cls::bus, buses[b], "theta", sol.theta.at(b));
  }
  auto vm = [&](Address a) { return sol.v.at(bus_at.at(a)); };
  auto write_branch = [&](std::string_view c, HyperEdge& e,
                          const BranchFlow& f) {
    set(c, e, "P1", f.p1);
    set(c, e, "Q1", f.q1);
    set(c, e, "I1", f.i1);
    set(c, e, "P2", f.p2);
    set(c, e, "Q2", f.q2);
    set(c, e, "I2", f.i2);
  };
  auto& lines = grid.of(cls::line);
  for (std::size_t i = 0; i < lines.size(); ++i)
    write_branch(cls::line, lines[i], sol.lines.at(i));
  auto& twts = grid.of(cls::twt);
  for (std::size_t i = 0; i < twts.size(); ++i) {
    write_branch(cls::twt, twts[i], sol.twts.at(i));
    set(cls::twt, twts[i], "rho", sol.twt_rho.at(i));
  }
  auto current = [](double p, double q, double v) {
    return v > 0 ? std::hypot(p, q) / v : 0.0;
  };
  auto& gens = grid.of(cls::generator);
  for (std::size_t i = 0; i < gens.size(); ++i) {
    double v = vm(port(cls::generator, gens[i], "Bus"));
    set(cls::generator, gens[i], "P", sol.gen_p.at(i));
    set(cls::generator, gens[i], "Q", sol.gen_q.at(i));
    set(cls::generator, gens[i], "I", current(sol.gen_p[i], sol.gen_q[i], v));
  }
  for (auto& e : grid.of(cls::load)) {
    double p = value_or(cls::load, e, "P_target", 0.0);
    double q = value_or(cls::load, e, "Q_target", 0.0);
    set(cls::load, e, "P", p);
    set(cls::load, e, "Q", q);
    set(cls::load, e, "I", current(p, q, vm(port(cls::load, e, "Bus"))));
  }
  auto& shunts = grid.of(cls::shunt);
  for (std::size_t s = 0; s < shunts.size(); ++s) {
    double v = vm(port(cls::shunt, shunts[s], "Bus"));
    bool on = value_or(cls::shunt, shunts[s], "connected", 1.0) > 0.5;
    double p = on ? value_or(cls::shunt, shunts[s], "G", 0.0) * v * v : 0.0;
    set(cls::shunt, shunts[s], "P", p);
    set(cls::shunt, shunts[s], "Q", sol.shunt_q.at(s));
    set(cls::shunt, shunts[s], "I", current(p, sol.shunt_q[s], v));
  }
  for (auto& z : grid.of(cls::svr_zone)) {
    auto b = bus_at.at(port(cls::svr_zone, z, "RegulatedBus"));
    set(cls::svr_zone, z, "V", sol.v.at(b));
    set(cls::svr_zone, z, "theta", sol.theta.at(b));
  }
}

H2MGContext apply_decision(const H2MGContext& x, const Decision& y,
                           const SolverOptions& opts) {
  H2MGContext g = x;

  {
    std::map<Address, std::size_t> line_at;
    const auto& lines = g.of(cls::line);
    for (std::size_t i = 0; i < lines.size(); ++i)
      line_at[port(cls::line, lines[i], "Line")] = i;
    std::set<std::size_t> drop_lines;
    std::set<std::string> drop_ctrl;
    for (const auto& c : g.of(cls::line_controller)) {
      auto it = y.line.find(c.id);
      if (it == y.line.end()) throw PairingError(c.id + ": no decision");
      auto l = line_at.find(port(cls::line_controller, c, "Line"));
      if (l == line_at.end())
        throw PairingError(c.id + ": controlled line absent");
      if (it->second == 1) {
        drop_lines.insert(l->second);
        drop_ctrl.insert(c.id);
      }
    }
    if (!drop_lines.empty()) {
      std::vector<HyperEdge> kept;
      for (std::size_t i = 0; i < lines.size(); ++i)
        if (!drop_lines.count(i)) kept.push_back(lines[i]);
      g.of(cls::line) = std::move(kept);
      auto& ctrls = g.of(cls::line_controller);
      std::erase_if(ctrls, [&](const HyperEdge& e) {
        return drop_ctrl.count(e.id) > 0;
      });
    }
  }

  {
    std::map<Address, std::size_t> shunt_at;
    auto& shunts = g.of(cls::shunt);
    for (std::size_t i = 0; i < shunts.size(); ++i)
      shunt_at[port(cls::shunt, shunts[i], "Shunt")] = i;
    for (const auto& c : g.of(cls::shunt_controller)) {
      auto it = y.shunt.find(c.id);
      if (it == y.shunt.end()) throw PairingError(c.id + ": no decision");
      auto s = shunt_at.find(port(cls::shunt_controller, c, "Shunt"));
      if (s == shunt_at.end())
        throw PairingError(c.id + ": controlled shunt absent");
      if (it->second == 1) {
        auto& e = shunts[s->second];
        bool on = value_or(cls::shunt, e, "connected", 1.0) > 0.5;
        set(cls::shunt, e, "connected", on ? 0.0 : 1.0);
      }
    }
  }

  {
    std::map<Address, std::size_t> zone_at;
    auto& zones = g.of(cls::svr_zone);
    for (std::size_t i = 0; i < zones.size(); ++i)
      zone_at[port(cls::svr_zone, zones[i], "Zone")] = i;
    for (const auto& c : g.of(cls::svr_controller)) {
      auto it = y.svr.find(c.id);
      if (it == y.svr.end()) throw PairingError(c.id + ": no decision");
      auto z = zone_at.find(port(cls::svr_controller, c, "Zone"));
      if (z == zone_at.end())
        throw PairingError(c.id + ": controlled zone absent");
      auto& e = zones[z->second];
      double base = value_or(cls::svr_zone, e, "V_target",
                             value_or(cls::svr_zone, e, "V", 1.0));
      set(cls::svr_zone, e, "V_target",
          std::clamp(base + it->second, opts.min_target_voltage,
                     opts.max_target_voltage));
    }
  }

  {
    std::map<Address, double> vnom_at;
    for (const auto& b : g.of(cls::bus))
      vnom_at[b.ports.at(0)] = value_or(cls::bus, b, "V_nom", 1.0);
    std::map<Address, std::size_t> rtc_at;
    auto& rtcs = g.of(cls::rtc);
    for (std::size_t i = 0; i < rtcs.size(); ++i)
      rtc_at[port(cls::rtc, rtcs[i], "TWT")] = i;
    for (auto& c : g.of(cls::rtc_controller)) {
      auto it = y.rtc.find(c.id);
      if (it == y.rtc.end()) throw PairingError(c.id + ": no decision");
      if (it->second < 0 || it->second >= kRtcCategories)
        throw PairingError(c.id + ": RTC category out of range");
      auto r = rtc_at.find(port(cls::rtc_controller, c, "TWT"));
      if (r == rtc_at.end())
        throw PairingError(c.id + ": controlled RTC absent");
      auto& e = rtcs[r->second];
      auto vn = vnom_at.find(port(cls::rtc, e, "RegulatedBus"));
      double v_nom = vn == vnom_at.end() ? 1.0 : vn->second;
      double target = kRtcRatios[static_cast<std::size_t>(it->second)] * v_nom;
      set(cls::rtc, e, "V_target", target);
      set(cls::rtc_controller, c, "V_target", target);
    }
  }
  return g;
}

double normalized_voltage(const HyperEdge& bus, double v) {
  double lo = value_or(cls::bus, bus, "V_min", NAN);
  double hi = value_or(cls::bus, bus, "V_max", NAN);
  return (v - lo) / (hi - lo);
}

double branch_loading(std::string_view class_name, const HyperEdge& branch,
                      const BranchFlow& flow) {
  double loading = 0;
  double r1 = value_or(class_name, branch, "I1_max", NAN);
  double r2 = value_or(class_name, branch, "I2_max", NAN);
  if (r1 > 0) loading = std::max(loading, flow.i1 / r1);
  if (r2 > 0) loading = std::max(loading, flow.i2 / r2);
  return loading;
}

namespace {

bool optimized(std::string_view c, const HyperEdge& e) {
  return value_or(c, e, "opt", 0.0) > 0.5;
}

bool rated(std::string_view c, const HyperEdge& e) {
  return value_or(c, e, "I1_max", 0.0) > 0 || value_or(c, e, "I2_max", 0.0) > 0;
}

}  // namespace

ObjectiveBreakdown objective_from_solution(const H2MGContext& grid,
                                           const PowerFlowSolution& sol,
                                           const SolverOptions& opts) {
  ObjectiveBreakdown out;
  if (!sol.converged) {
    out.total = opts.prohibitive_cost;
    return out;
  }
  out.converged = true;
  const auto& buses = grid.of(cls::bus);
  for (std::size_t b = 0; b < buses.size(); ++b) {
    if (!optimized(cls::bus, buses[b])) continue;
    double v = normalized_voltage(buses[b], sol.v[b]);
    if (std::isnan(v)) continue;
    double d = std::max({0.0, opts.eps_v - v, v - 1.0 + opts.eps_v});
    out.f_v += d * d;
  }
  auto branches = [&](std::string_view c, const std::vector<BranchFlow>& flows) {
    const auto& list = grid.of(c);
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (!optimized(c, list[i])) continue;
      if (rated(c, list[i])) {
        double d =
            std::max(0.0, branch_loading(c, list[i], flows[i]) - 1.0 + opts.eps_i);
        out.f_i += d * d;
      }
      out.f_j += std::abs(flows[i].p1 + flows[i].p2);
    }
  };
  branches(cls::line, sol.lines);
  branches(cls::twt, sol.twts);
  out.f_v *= opts.lambda_v;
  out.f_i *= opts.lambda_i;
  out.f_j *= opts.lambda_j;
  out.total = out.f_v + out.f_i + out.f_j;
  return out;
}

ObjectiveBreakdown evaluate_objective(const H2MGContext& x, const Decision& y,
                                      const SolverOptions& opts) {
  auto grid = apply_decision(x, y, opts);
  return objective_from_solution(grid, solve_ac(grid, opts), opts);
}

Metrics metrics_from_solution(const H2MGContext& grid,
                              const PowerFlowSolution& sol,
                              const SolverOptions& opts) {
  Metrics m;
  m.objective = objective_from_solution(grid, sol, opts);
  if (!sol.converged) return m;
  m.valid = true;
  const auto& buses = grid.of(cls::bus);
  for (std::size_t b = 0; b < buses.size(); ++b) {
    if (!optimized(cls::bus, buses[b])) continue;
    double v = normalized_voltage(buses[b], sol.v[b]);
    if (std::isnan(v)) continue;
    m.normalized_voltages.push_back(v);
    if (v > 1) ++m.over_voltages;
    if (v < 0) ++m.under_voltages;
  }
  m.violations = m.over_voltages + m.under_voltages;
  auto branches = [&](std::string_view c, const std::vector<BranchFlow>& flows) {
    const auto& list = grid.of(c);
    for (std::size_t i = 0; i < list.size(); ++i) {
      if (!optimized(c, list[i])) continue;
      if (rated(c, list[i]) && branch_loading(c, list[i], flows[i]) > 1)
        ++m.overflows;
      m.joule_losses += std::abs(flows[i].p1 + flows[i].p2);
    }
  };
  branches(cls::line, sol.lines);
  branches(cls::twt, sol.twts);
  return m;
}

Metrics count_metrics(const H2MGContext& x, const Decision& y,
                      const SolverOptions& opts) {
  auto grid = apply_decision(x, y, opts);
  return metrics_from_solution(grid, solve_ac(grid, opts), opts);
}

}  // namespace gridtvc
