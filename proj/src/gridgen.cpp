#include "gridtvc/gridgen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "gridtvc/builder.hpp"
#include "gridtvc/parallel.hpp"

namespace gridtvc {

namespace fs = std::filesystem;
using nlohmann::json;

void GridFamilySpec::validate() const {
  auto fail = [](const std::string& m) {
    throw std::invalid_argument("infeasible grid family: " + m);
  };
  if (zones < 0 || buses_per_zone < 1 || rtcs < 0 || lv_leaf_buses < 0 ||
      shunts < 0 || mesh_lines < 0 || optional_lines < 0)
    fail("negative or zero counts");
  if (units_per_zone < 1 || units_per_zone > buses_per_zone)
    fail("units_per_zone must be in 1..buses_per_zone");
  if (rtc_controllers < 0 || rtc_controllers > rtcs)
    fail("more RTC controllers than RTCs");
  if (shunt_controllers < 0 || shunt_controllers > shunts)
    fail("more shunt controllers than shunts");
  if (line_controllers < 0 || line_controllers > mesh_lines)
    fail("more line controllers than mesh lines");
  if (lv_leaf_buses > 0 && rtcs == 0) fail("LV leaves need an LV root");
  const int hv = 1 + zones * buses_per_zone;
  const long long free_pairs =
      static_cast<long long>(zones) *
      (buses_per_zone * (buses_per_zone - 1) / 2 - (buses_per_zone - 1));
  if (mesh_lines + optional_lines > free_pairs)
    fail("not enough bus pairs for mesh and optional lines");
  for (auto r : {hv_load_p, lv_load_p, power_factor, load_scale, hv_r, hv_x,
                 hv_b, lv_r, lv_x, shunt_b, unit_q, svr_target, rtc_target})
    if (!(r.lo <= r.hi) || !std::isfinite(r.lo) || !std::isfinite(r.hi))
      fail("range with lo > hi");
  if (!(load_scale.lo > 0)) fail("load scale must be positive");
  if (!(power_factor.lo > 0 && power_factor.hi <= 1))
    fail("power factor outside (0, 1]");
  if (!(load_noise >= 0 && load_noise < 1)) fail("load_noise outside [0, 1)");
  if (!(optional_line_probability >= 0 && optional_line_probability <= 1))
    fail("optional_line_probability outside [0, 1]");
  if (!(rating_margin > 0)) fail("rating_margin must be positive");
  if (!(tie_x_factor > 0)) fail("tie_x_factor must be positive");
  if (max_attempts < 1) fail("max_attempts must be positive");
}

namespace {

json range_json(Range r) { return json::array({r.lo, r.hi}); }
Range range_from(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

}  // namespace

void to_json(json& j, const GridFamilySpec& s) {
  j = json{{"voltage_levels", s.voltage_levels},
           {"zones", s.zones},
           {"buses_per_zone", s.buses_per_zone},
           {"units_per_zone", s.units_per_zone},
           {"rtcs", s.rtcs},
           {"rtc_controllers", s.rtc_controllers},
           {"lv_leaf_buses", s.lv_leaf_buses},
           {"shunts", s.shunts},
           {"shunt_controllers", s.shunt_controllers},
           {"mesh_lines", s.mesh_lines},
           {"line_controllers", s.line_controllers},
           {"optional_lines", s.optional_lines},
           {"optional_line_probability", s.optional_line_probability},
           {"hv_load_p", range_json(s.hv_load_p)},
           {"lv_load_p", range_json(s.lv_load_p)},
           {"power_factor", range_json(s.power_factor)},
           {"load_scale", range_json(s.load_scale)},
           {"load_noise", s.load_noise},
           {"generation_share", s.generation_share},
           {"hv_r", range_json(s.hv_r)},
           {"hv_x", range_json(s.hv_x)},
           {"hv_b", range_json(s.hv_b)},
           {"lv_r", range_json(s.lv_r)},
           {"lv_x", range_json(s.lv_x)},
           {"twt_x", s.twt_x},
           {"tie_x_factor", s.tie_x_factor},
           {"shunt_b", range_json(s.shunt_b)},
           {"unit_q", range_json(s.unit_q)},
           {"rating_margin", s.rating_margin},
           {"slack_voltage", s.slack_voltage},
           {"svr_target", range_json(s.svr_target)},
           {"rtc_target", range_json(s.rtc_target)},
           {"shunt_on_probability", s.shunt_on_probability},
           {"max_attempts", s.max_attempts},
           {"seed", s.seed}};
}

void from_json(const json& j, GridFamilySpec& s) {
  GridFamilySpec d;
  json full;
  to_json(full, d);
  for (const auto& [k, _] : j.items())
    if (!full.contains(k)) throw std::invalid_argument("unknown spec key " + k);
  auto num = [&](const char* k, auto& dst) {
    if (j.contains(k)) j.at(k).get_to(dst);
  };
  auto rng = [&](const char* k, Range& dst) {
    if (j.contains(k)) dst = range_from(j.at(k));
  };
  s = d;
  num("voltage_levels", s.voltage_levels);
  num("zones", s.zones);
  num("buses_per_zone", s.buses_per_zone);
  num("units_per_zone", s.units_per_zone);
  num("rtcs", s.rtcs);
  num("rtc_controllers", s.rtc_controllers);
  num("lv_leaf_buses", s.lv_leaf_buses);
  num("shunts", s.shunts);
  num("shunt_controllers", s.shunt_controllers);
  num("mesh_lines", s.mesh_lines);
  num("line_controllers", s.line_controllers);
  num("optional_lines", s.optional_lines);
  num("optional_line_probability", s.optional_line_probability);
  rng("hv_load_p", s.hv_load_p);
  rng("lv_load_p", s.lv_load_p);
  rng("power_factor", s.power_factor);
  rng("load_scale", s.load_scale);
  num("load_noise", s.load_noise);
  num("generation_share", s.generation_share);
  rng("hv_r", s.hv_r);
  rng("hv_x", s.hv_x);
  rng("hv_b", s.hv_b);
  rng("lv_r", s.lv_r);
  rng("lv_x", s.lv_x);
  num("twt_x", s.twt_x);
  num("tie_x_factor", s.tie_x_factor);
  rng("shunt_b", s.shunt_b);
  rng("unit_q", s.unit_q);
  num("rating_margin", s.rating_margin);
  num("slack_voltage", s.slack_voltage);
  rng("svr_target", s.svr_target);
  rng("rtc_target", s.rtc_target);
  num("shunt_on_probability", s.shunt_on_probability);
  num("max_attempts", s.max_attempts);
  num("seed", s.seed);
}

GridFamilySpec load_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open spec file " + path);
  GridFamilySpec s = json::parse(in).get<GridFamilySpec>();
  s.validate();
  return s;
}

namespace {

struct BaseLine {
  int a = 0, b = 0;
  double r = 0, x = 0, bsh = 0;
  bool optional = false;
  bool controlled = false;
  double rating = 0;
};

struct BaseTwt {
  int hv = 0, lv = 0;
  double rating = 0;
  bool controlled = false;
};

struct BaseUnit {
  int bus = 0;
  int zone = 0;
};

struct BaseShunt {
  int bus = 0;
  double b = 0;
  bool controlled = false;
};

struct Base {
  std::vector<double> vnom;
  std::vector<double> load_p, load_tan;  // 0 load_p means no load
  std::vector<BaseLine> lines;
  std::vector<BaseTwt> twts;
  std::vector<BaseUnit> units;
  std::vector<int> pilots;
  std::vector<BaseShunt> shunts;
};

struct Draw {
  double scale = 1;
  std::vector<double> noise;       // per bus
  std::vector<bool> optional_on;   // per line
  std::vector<double> svr_target;  // per zone
  std::vector<double> rtc_target;  // per twt, fraction of V_nom
  std::vector<bool> shunt_on;
};

std::string bus_name(int b) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "bus%03d", b);
  return buf;
}

std::string indexed(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%03zu", prefix, i);
  return buf;
}

H2MGContext assemble(const GridFamilySpec& s, const Base& base, const Draw& d,
                     bool rated) {
  GridBuilder g;
  const int n = static_cast<int>(base.vnom.size());
  std::vector<Address> bus(n);
  for (int b = 0; b < n; ++b) bus[b] = g.bus(bus_name(b), base.vnom[b]);

  double total_p = 0;
  for (int b = 0; b < n; ++b) total_p += base.load_p[b] * d.scale * d.noise[b];

  g.generator("gen_slack", bus[0], 0.0, s.slack_voltage, -10.0, 10.0, true,
              true);
  std::vector<Address> unit_gen;
  const double unit_p =
      base.units.empty() ? 0.0
                         : s.generation_share * total_p /
                               static_cast<double>(base.units.size());
  for (std::size_t u = 0; u < base.units.size(); ++u)
    unit_gen.push_back(g.generator(indexed("gen", u), bus[base.units[u].bus],
                                   unit_p, 1.0, s.unit_q.lo, s.unit_q.hi,
                                   true));

  std::size_t controlled = 0;
  for (std::size_t i = 0; i < base.lines.size(); ++i) {
    const auto& l = base.lines[i];
    if (l.optional && !d.optional_on[i]) continue;
    std::optional<double> rating;
    if (rated) rating = l.rating;
    Address a = g.line(indexed("line", i), bus[l.a], bus[l.b], l.r, l.x, l.bsh,
                       rating);
    if (l.controlled) g.line_controller(indexed("lctrl", controlled++), a);
  }

  for (std::size_t t = 0; t < base.twts.size(); ++t) {
    const auto& tw = base.twts[t];
    std::optional<double> rating;
    if (rated) rating = tw.rating;
    Address a = g.twt(indexed("twt", t), bus[tw.hv], bus[tw.lv], 0.1 * s.twt_x,
                      s.twt_x, rating);
    double target = d.rtc_target[t] * base.vnom[tw.lv];
    g.rtc(indexed("rtc", t), a, bus[tw.lv], target);
    if (tw.controlled)
      g.rtc_controller(indexed("rctrl", t), a, target, base.vnom[tw.lv]);
  }

  for (std::size_t i = 0; i < base.shunts.size(); ++i) {
    const auto& sh = base.shunts[i];
    Address a = g.shunt(indexed("shunt", i), bus[sh.bus], 0.0, sh.b,
                        d.shunt_on[i]);
    if (sh.controlled) g.shunt_controller(indexed("sctrl", i), a);
  }

  for (std::size_t z = 0; z < base.pilots.size(); ++z) {
    Address za = g.svr_zone(indexed("zone", z), bus[base.pilots[z]],
                            d.svr_target[z], base.vnom[base.pilots[z]]);
    for (std::size_t u = 0; u < base.units.size(); ++u)
      if (base.units[u].zone == static_cast<int>(z))
        g.svr_unit(indexed("unit", u), unit_gen[u], za);
    g.svr_controller(indexed("svrctrl", z), za);
  }

  for (int b = 0; b < n; ++b) {
    if (base.load_p[b] <= 0) continue;
    double p = base.load_p[b] * d.scale * d.noise[b];
    g.load(indexed("load", static_cast<std::size_t>(b)), bus[b], p,
           p * base.load_tan[b]);
  }
  return g.take();
}

Draw nominal_draw(const GridFamilySpec& s, const Base& base) {
  Draw d;
  d.scale = 1.0;
  d.noise.assign(base.vnom.size(), 1.0);
  d.optional_on.assign(base.lines.size(), true);
  d.svr_target.assign(base.pilots.size(), 1.0);
  d.rtc_target.assign(base.twts.size(), 1.0);
  d.shunt_on.assign(base.shunts.size(), false);
  (void)s;
  return d;
}

Base build_base(const GridFamilySpec& s, const SolverOptions& opts) {
  s.validate();
  Rng rng = make_stream(s.seed, {0xba5eull});
  Base base;
  const int hv = 1 + s.zones * s.buses_per_zone;
  const int n = s.bus_count();
  base.vnom.assign(n, s.voltage_levels[1]);
  for (int b = 0; b < hv; ++b) base.vnom[b] = s.voltage_levels[0];
  base.load_p.assign(n, 0.0);
  base.load_tan.assign(n, 0.0);
  auto zone_bus = [&](int z, int k) { return 1 + z * s.buses_per_zone + k; };

  std::set<std::pair<int, int>> used;
  auto add_line = [&](int a, int b, bool lv) {
    BaseLine l;
    l.a = std::min(a, b);
    l.b = std::max(a, b);
    used.insert({l.a, l.b});
    if (lv) {
      l.r = uniform(rng, s.lv_r.lo, s.lv_r.hi);
      l.x = uniform(rng, s.lv_x.lo, s.lv_x.hi);
    } else {
      l.r = uniform(rng, s.hv_r.lo, s.hv_r.hi);
      l.x = uniform(rng, s.hv_x.lo, s.hv_x.hi);
      l.bsh = uniform(rng, s.hv_b.lo, s.hv_b.hi);
    }
    base.lines.push_back(l);
    return base.lines.size() - 1;
  };

  // Spanning tree: every zone root ties to the slack bus, zone buses attach
  // to an earlier bus of the same zone.
  for (int z = 0; z < s.zones; ++z)
    for (int k = 0; k < s.buses_per_zone; ++k) {
      int parent = k == 0 ? 0 : zone_bus(z, static_cast<int>(uniform_index(rng, k)));
      auto i = add_line(parent, zone_bus(z, k), false);
      if (k == 0) base.lines[i].x *= s.tie_x_factor;
    }

  // Cycle-closing lines stay inside one zone.
  auto draw_pair = [&]() {
    for (;;) {
      int z = static_cast<int>(uniform_index(rng, s.zones));
      int a = zone_bus(z, static_cast<int>(uniform_index(rng, s.buses_per_zone)));
      int b = zone_bus(z, static_cast<int>(uniform_index(rng, s.buses_per_zone)));
      if (a == b || used.count({std::min(a, b), std::max(a, b)})) continue;
      return std::pair{a, b};
    }
  };
  for (int m = 0; m < s.mesh_lines; ++m) {
    auto [a, b] = draw_pair();
    auto i = add_line(a, b, false);
    base.lines[i].controlled = m < s.line_controllers;
  }
  for (int m = 0; m < s.optional_lines; ++m) {
    auto [a, b] = draw_pair();
    base.lines[add_line(a, b, false)].optional = true;
  }

  // The pilot is the best-connected bus of its zone; units sit elsewhere
  // in the zone when there is room.
  std::vector<int> degree(n, 0);
  for (const auto& l : base.lines) ++degree[l.a], ++degree[l.b];
  for (int z = 0; z < s.zones; ++z) {
    int pilot = zone_bus(z, 0);
    for (int k = 1; k < s.buses_per_zone; ++k)
      if (degree[zone_bus(z, k)] > degree[pilot]) pilot = zone_bus(z, k);
    base.pilots.push_back(pilot);
    std::vector<int> others;
    for (int k = 0; k < s.buses_per_zone; ++k)
      if (zone_bus(z, k) != pilot) others.push_back(zone_bus(z, k));
    std::shuffle(others.begin(), others.end(), rng);
    if (s.units_per_zone > static_cast<int>(others.size()))
      others.push_back(pilot);
    for (int u = 0; u < s.units_per_zone; ++u)
      base.units.push_back({others[u], z});
  }

  for (int r = 0; r < s.rtcs; ++r) {
    BaseTwt t;
    t.hv = 1 + static_cast<int>(uniform_index(rng, hv - 1));
    t.lv = hv + r;
    t.controlled = r < s.rtc_controllers;
    base.twts.push_back(t);
  }
  for (int l = 0; l < s.lv_leaf_buses; ++l) {
    int root = hv + static_cast<int>(uniform_index(rng, s.rtcs));
    add_line(root, hv + s.rtcs + l, true);
  }

  for (int b = 1; b < n; ++b) {
    const Range& r = b < hv ? s.hv_load_p : s.lv_load_p;
    base.load_p[b] = uniform(rng, r.lo, r.hi);
    double pf = uniform(rng, s.power_factor.lo, s.power_factor.hi);
    base.load_tan[b] = std::sqrt(1.0 - pf * pf) / pf;
  }

  for (int i = 0; i < s.shunts; ++i) {
    BaseShunt sh;
    sh.bus = 1 + static_cast<int>(uniform_index(rng, hv - 1));
    double mag = uniform(rng, s.shunt_b.lo, s.shunt_b.hi);
    sh.b = i % 2 == 0 ? -mag : mag;  // alternate reactors and capacitors
    sh.controlled = i < s.shunt_controllers;
    base.shunts.push_back(sh);
  }

  // Ratings from a nominal operating point.
  auto nominal = assemble(s, base, nominal_draw(s, base), false);
  auto sol = solve_ac(nominal, opts);
  if (!sol.converged)
    throw std::invalid_argument("infeasible grid family: nominal case does "
                                "not converge (" + sol.failure + ")");
  std::vector<double> currents;
  for (const auto& f : sol.lines) currents.push_back(std::max(f.i1, f.i2));
  std::vector<double> sorted = currents;
  std::sort(sorted.begin(), sorted.end());
  double floor_i = sorted.empty() ? 1.0 : sorted[sorted.size() / 2];
  for (std::size_t i = 0; i < base.lines.size(); ++i)
    base.lines[i].rating = s.rating_margin * std::max(currents[i], floor_i);
  for (std::size_t t = 0; t < base.twts.size(); ++t)
    base.twts[t].rating =
        s.rating_margin * std::max({sol.twts[t].i1, sol.twts[t].i2, 0.05});
  return base;
}

Draw random_draw(const GridFamilySpec& s, const Base& base, Rng& rng) {
  Draw d;
  d.scale = std::exp(uniform(rng, std::log(s.load_scale.lo),
                             std::log(s.load_scale.hi)));
  for (std::size_t b = 0; b < base.vnom.size(); ++b)
    d.noise.push_back(uniform(rng, 1.0 - s.load_noise, 1.0 + s.load_noise));
  for (const auto& l : base.lines)
    d.optional_on.push_back(!l.optional ||
                            uniform(rng, 0, 1) < s.optional_line_probability);
  for (std::size_t z = 0; z < base.pilots.size(); ++z)
    d.svr_target.push_back(uniform(rng, s.svr_target.lo, s.svr_target.hi));
  for (std::size_t t = 0; t < base.twts.size(); ++t)
    d.rtc_target.push_back(uniform(rng, s.rtc_target.lo, s.rtc_target.hi));
  for (std::size_t i = 0; i < base.shunts.size(); ++i)
    d.shunt_on.push_back(uniform(rng, 0, 1) < s.shunt_on_probability);
  return d;
}

H2MGContext draw_context(const GridFamilySpec& s, const Base& base,
                         std::uint64_t seed, std::uint64_t index,
                         const SolverOptions& opts) {
  Rng rng = make_stream(seed, {index});
  for (int attempt = 0; attempt < s.max_attempts; ++attempt) {
    auto x = assemble(s, base, random_draw(s, base, rng), true);
    auto sol = solve_ac(x, opts);
    if (!sol.converged) continue;
    write_solution(x, sol);
    x.metadata["origin"] = "gridgen";
    x.metadata["family_seed"] = std::to_string(s.seed);
    x.metadata["seed"] = std::to_string(seed);
    x.metadata["index"] = std::to_string(index);
    x.metadata["attempts"] = std::to_string(attempt + 1);
    return x;
  }
  throw std::runtime_error("context " + std::to_string(index) +
                           ": no solvable draw in " +
                           std::to_string(s.max_attempts) + " attempts");
}

}  // namespace

H2MGContext generate_context(const GridFamilySpec& spec, std::uint64_t seed,
                             std::uint64_t index, const SolverOptions& opts) {
  return draw_context(spec, build_base(spec, opts), seed, index, opts);
}

H2MGContext Dataset::load(std::size_t i) const {
  return load_context((fs::path(dir) / files.at(i)).string());
}

std::vector<H2MGContext> Dataset::load_all(
    const std::vector<std::size_t>& ids) const {
  std::vector<H2MGContext> out;
  out.reserve(ids.size());
  for (auto i : ids) out.push_back(load(i));
  return out;
}

namespace {

std::vector<std::size_t> iota_range(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> v;
  for (std::size_t i = lo; i < hi; ++i) v.push_back(i);
  return v;
}

}  // namespace

void generate_dataset(const GridFamilySpec& spec, std::size_t count,
                      std::uint64_t seed, const std::string& dir,
                      std::optional<std::array<std::size_t, 3>> split,
                      std::size_t workers) {
  SolverOptions opts;
  Base base = build_base(spec, opts);
  std::array<std::size_t, 3> sizes{};
  if (split) {
    sizes = *split;
    if (sizes[0] + sizes[1] + sizes[2] > count)
      throw std::invalid_argument("split sizes exceed context count");
  } else {
    sizes[1] = count / 10;
    sizes[2] = count / 10;
    sizes[0] = count - sizes[1] - sizes[2];
  }
  fs::create_directories(dir);
  std::vector<std::string> files(count);
  parallel_for(count, workers, [&](std::size_t i) {
    char name[32];
    std::snprintf(name, sizeof name, "context_%05zu.json", i);
    files[i] = name;
    save_context(draw_context(spec, base, seed, i, opts),
                 (fs::path(dir) / name).string());
  });
  json manifest{{"format", "gridtvc-dataset"},
                {"count", count},
                {"seed", seed},
                {"spec", spec},
                {"files", files},
                {"splits",
                 {{"train", {0, sizes[0]}},
                  {"val", {sizes[0], sizes[0] + sizes[1]}},
                  {"test",
                   {sizes[0] + sizes[1], sizes[0] + sizes[1] + sizes[2]}}}}};
  std::ofstream out(fs::path(dir) / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write manifest in " + dir);
}

Dataset open_dataset(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir);
  json m = json::parse(in);
  Dataset d;
  d.dir = dir;
  d.files = m.at("files").get<std::vector<std::string>>();
  auto range = [&](const char* k) {
    auto r = m.at("splits").at(k);
    auto lo = r.at(0).get<std::size_t>(), hi = r.at(1).get<std::size_t>();
    if (lo > hi || hi > d.files.size())
      throw std::runtime_error(std::string("bad split range ") + k);
    return iota_range(lo, hi);
  };
  d.splits.train = range("train");
  d.splits.val = range("val");
  d.splits.test = range("test");
  return d;
}

// ---------------------------------------------------------------------------
// Normalizer

double FeatureMap::operator()(double v) const {
  if (identity) return v;
  if (values.size() == 1) return levels[0];
  if (v < values.front()) return 0.0;
  if (v > values.back()) return 1.0;
  auto it = std::upper_bound(values.begin(), values.end(), v);
  if (it == values.end()) return levels.back();
  std::size_t hi = static_cast<std::size_t>(it - values.begin());
  std::size_t lo = hi - 1;
  if (values[lo] == v) return levels[lo];
  double t = (v - values[lo]) / (values[hi] - values[lo]);
  return levels[lo] + t * (levels[hi] - levels[lo]);
}

double Normalizer::apply(std::string_view class_name, std::size_t feature,
                         const FeatureValue& v) const {
  if (!v) return 0.0;
  auto it = maps.find(std::string(class_name));
  if (it == maps.end() || feature >= it->second.size())
    throw SchemaError("normalizer has no map for " + std::string(class_name));
  return it->second[feature](*v);
}

json Normalizer::to_json() const {
  json classes = json::object();
  for (const auto& [name, list] : maps) {
    const auto& s = class_schema(name);
    json feats = json::object();
    for (std::size_t f = 0; f < list.size(); ++f) {
      const auto& m = list[f];
      if (m.identity) {
        feats[s.features[f]] = "identity";
        continue;
      }
      json pts = json::array();
      for (std::size_t k = 0; k < m.values.size(); ++k)
        pts.push_back({m.values[k], m.levels[k]});
      feats[s.features[f]] = pts;
    }
    classes[name] = feats;
  }
  return json{{"knots", knots}, {"classes", classes}};
}

Normalizer Normalizer::from_json(const json& doc) {
  Normalizer n;
  n.knots = doc.at("knots").get<int>();
  for (const auto& [name, feats] : doc.at("classes").items()) {
    const auto& s = class_schema(name);
    std::vector<FeatureMap> list(s.features.size());
    for (const auto& [fname, pts] : feats.items()) {
      auto& m = list.at(s.feature_index(fname));
      if (pts.is_string()) {
        m.identity = true;
        continue;
      }
      for (const auto& p : pts) {
        m.values.push_back(p.at(0).get<double>());
        m.levels.push_back(p.at(1).get<double>());
      }
      if (m.values.empty())
        throw SchemaError("empty breakpoint list for " + name + "." + fname);
    }
    for (std::size_t f = 0; f < list.size(); ++f)
      if (!list[f].identity && list[f].values.empty())
        throw SchemaError("missing map for " + name + "." + s.features[f]);
    n.maps[name] = std::move(list);
  }
  for (const auto& s : schema())
    if (!n.maps.count(s.name))
      throw SchemaError("normalizer lacks class " + s.name);
  return n;
}

std::uint64_t Normalizer::hash() const { return fnv1a(to_json().dump()); }

namespace {

double quantile(const std::vector<double>& sorted, double q) {
  double h = q * static_cast<double>(sorted.size() - 1);
  auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[lo + 1] - sorted[lo]);
}

FeatureMap fit_map(std::vector<double> v, int knots) {
  FeatureMap m;
  std::sort(v.begin(), v.end());
  if (v.front() == v.back()) {
    m.values = {v.front()};
    m.levels = {0.5};
    return m;
  }
  std::vector<double> qv(knots), ql(knots);
  for (int k = 0; k < knots; ++k) {
    ql[k] = static_cast<double>(k) / (knots - 1);
    qv[k] = quantile(v, ql[k]);
  }
  // Runs of equal breakpoint values collapse onto their mid level.
  for (int k = 0; k < knots;) {
    int j = k;
    while (j + 1 < knots && qv[j + 1] == qv[k]) ++j;
    m.values.push_back(qv[k]);
    m.levels.push_back(0.5 * (ql[k] + ql[j]));
    k = j + 1;
  }
  return m;
}

}  // namespace

Normalizer fit_normalizer(const std::vector<H2MGContext>& dataset, int knots) {
  if (dataset.empty()) throw std::invalid_argument("empty dataset");
  if (knots < 2) throw std::invalid_argument("knots must be at least 2");
  Normalizer n;
  n.knots = knots;
  std::vector<std::string> missing;
  for (const auto& s : schema()) {
    std::vector<std::vector<double>> values(s.features.size());
    for (const auto& x : dataset)
      for (const auto& e : x.of(s.name))
        for (std::size_t f = 0; f < s.features.size(); ++f)
          if (f < e.features.size() && e.features[f])
            values[f].push_back(*e.features[f]);
    auto& list = n.maps[s.name];
    for (std::size_t f = 0; f < s.features.size(); ++f) {
      if (values[f].empty()) {
        FeatureMap m;
        m.identity = true;
        list.push_back(m);
        missing.push_back(s.name + "." + s.features[f]);
      } else {
        list.push_back(fit_map(std::move(values[f]), knots));
      }
    }
  }
  if (!missing.empty()) {
    std::clog << "gridtvc: " << missing.size()
              << " features absent from the dataset, identity maps emitted:";
    for (const auto& m : missing) std::clog << ' ' << m;
    std::clog << '\n';
  }
  return n;
}

H2MGContext normalize(const H2MGContext& x, const Normalizer& n) {
  H2MGContext out = x;
  for (auto& [name, list] : out.edges)
    for (auto& e : list)
      for (std::size_t f = 0; f < e.features.size(); ++f)
        e.features[f] = n.apply(name, f, e.features[f]);
  return out;
}

void save_normalizer(const Normalizer& n, const std::string& path) {
  std::ofstream out(path);
  out << n.to_json().dump() << '\n';
  if (!out) throw std::runtime_error("cannot write " + path);
}

Normalizer load_normalizer(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return Normalizer::from_json(json::parse(in));
}

}  // namespace gridtvc
