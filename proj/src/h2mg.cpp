#include "gridtvc/h2mg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

namespace gridtvc {

namespace {

ClassSchema make(std::string_view name, std::vector<std::string> ports,
                 std::vector<std::string> features,
                 DecisionKind decision = DecisionKind::none,
                 std::string decision_name = {}) {
  ClassSchema s;
  s.name = std::string(name);
  s.ports = std::move(ports);
  s.features = std::move(features);
  s.decision = decision;
  s.decision_name = std::move(decision_name);
  switch (decision) {
    case DecisionKind::none: s.decision_width = 0; break;
    case DecisionKind::binary:
    case DecisionKind::continuous: s.decision_width = 1; break;
    case DecisionKind::categorical: s.decision_width = kRtcCategories; break;
  }
  return s;
}

std::vector<ClassSchema> build_schema() {
  std::vector<ClassSchema> s;
  s.push_back(make(cls::bus, {"Bus"},
                   {"V", "theta", "V_nom", "V_max", "V_min", "opt"}));
  s.push_back(make(cls::load, {"Bus"}, {"P", "Q", "I", "P_target", "Q_target"}));
  s.push_back(make(cls::battery, {"Bus"},
                   {"P", "Q", "I", "P_target", "Q_target", "V_target", "P_max",
                    "P_min", "Q_max", "Q_min", "regulation_mode"}));
  s.push_back(make(cls::svc, {"Bus"},
                   {"P", "Q", "I", "V_target", "Q_target", "regulation_mode"}));
  s.push_back(make(cls::vsc_station, {"Station", "Bus"},
                   {"P", "Q", "I", "V_target", "Q_target", "Q_min", "Q_max",
                    "regulation_mode"}));
  s.push_back(make(cls::hvdc_line, {"Station1", "Station2"},
                   {"P_target", "P_max", "R", "droop"}));
  s.push_back(make(cls::line, {"Line", "Bus1", "Bus2"},
                   {"P1", "Q1", "I1", "P2", "Q2", "I2", "R", "X", "G", "B",
                    "I1_max", "I2_max", "opt"}));
  s.push_back(make(cls::line_controller, {"Line"}, {}, DecisionKind::binary,
                   "Connected"));
  s.push_back(make(cls::shunt, {"Shunt", "Bus"},
                   {"P", "Q", "I", "G", "B", "connected"}));
  s.push_back(make(cls::shunt_controller, {"Shunt"}, {}, DecisionKind::binary,
                   "SwitchStatus"));
  s.push_back(make(cls::generator, {"Gen", "Bus"},
                   {"P", "Q", "I", "P_target", "Q_target", "V_target", "Q_max",
                    "Q_min", "regulation_mode", "slack"}));
  s.push_back(make(cls::svr_unit, {"Gen", "Zone"}, {"participate"}));
  s.push_back(make(cls::svr_zone, {"Zone", "RegulatedBus"},
                   {"V", "theta", "V_nom", "V_target"}));
  s.push_back(make(cls::svr_controller, {"Zone"}, {}, DecisionKind::continuous,
                   "DeltaV_target"));
  s.push_back(make(cls::twt, {"TWT", "Bus1", "Bus2"},
                   {"P1", "Q1", "I1", "P2", "Q2", "I2", "R", "X", "G", "B",
                    "rho", "alpha", "I1_max", "I2_max", "opt"}));
  s.push_back(make(cls::rtc, {"TWT", "RegulatedBus"}, {"V_target"}));
  s.push_back(make(cls::rtc_controller, {"TWT"}, {"V_target", "V_nom"},
                   DecisionKind::categorical, "Setpoint"));
  std::sort(s.begin(), s.end(),
            [](const auto& a, const auto& b) { return a.name < b.name; });
  return s;
}

std::size_t index_of(const std::vector<std::string>& names,
                     std::string_view name) {
  auto it = std::find(names.begin(), names.end(), name);
  return static_cast<std::size_t>(it - names.begin());
}

const std::vector<HyperEdge>& empty_edges() {
  static const std::vector<HyperEdge> empty;
  return empty;
}

}  // namespace

std::size_t ClassSchema::port_index(std::string_view port) const {
  auto i = index_of(ports, port);
  if (i == ports.size())
    throw SchemaError("class " + name + " has no port " + std::string(port));
  return i;
}

std::size_t ClassSchema::feature_index(std::string_view feature) const {
  auto i = find_feature(feature);
  if (!i)
    throw SchemaError("class " + name + " has no feature " +
                      std::string(feature));
  return *i;
}

std::optional<std::size_t> ClassSchema::find_feature(
    std::string_view feature) const {
  auto i = index_of(features, feature);
  if (i == features.size()) return std::nullopt;
  return i;
}

const std::vector<ClassSchema>& schema() {
  static const std::vector<ClassSchema> s = build_schema();
  return s;
}

const ClassSchema* find_class_schema(std::string_view name) {
  for (const auto& c : schema())
    if (c.name == name) return &c;
  return nullptr;
}

const ClassSchema& class_schema(std::string_view name) {
  if (const auto* c = find_class_schema(name)) return *c;
  throw SchemaError("unknown class " + std::string(name));
}

std::string_view controller_class_name(ControllerClass c) {
  switch (c) {
    case ControllerClass::line: return cls::line_controller;
    case ControllerClass::shunt: return cls::shunt_controller;
    case ControllerClass::svr: return cls::svr_controller;
    case ControllerClass::rtc: return cls::rtc_controller;
  }
  return {};
}

DecisionKind decision_kind(ControllerClass c) {
  return class_schema(controller_class_name(c)).decision;
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t schema_hash() {
  std::string text;
  for (const auto& c : schema()) {
    text += c.name + "|";
    for (const auto& p : c.ports) text += p + ",";
    text += "|";
    for (const auto& f : c.features) text += f + ",";
    text += "|" + std::to_string(static_cast<int>(c.decision)) + ";";
  }
  return fnv1a(text);
}

bool is_bus_port(std::string_view class_name, std::string_view port) {
  if (class_name == cls::bus) return false;
  return port == "Bus" || port == "Bus1" || port == "Bus2" ||
         port == "RegulatedBus";
}

// ---------------------------------------------------------------------------

const std::vector<HyperEdge>& H2MGContext::of(std::string_view name) const {
  auto it = edges.find(std::string(name));
  return it == edges.end() ? empty_edges() : it->second;
}

std::vector<HyperEdge>& H2MGContext::of(std::string_view name) {
  return edges[std::string(name)];
}

std::size_t H2MGContext::count(std::string_view name) const {
  return of(name).size();
}

HyperEdge& H2MGContext::add_edge(std::string_view class_name, std::string id,
                                 std::vector<Address> ports) {
  const auto& s = class_schema(class_name);
  if (ports.size() != s.ports.size())
    throw SchemaError("class " + s.name + " expects " +
                      std::to_string(s.ports.size()) + " ports");
  auto& list = edges[s.name];
  list.push_back(HyperEdge{std::move(id), std::move(ports),
                           std::vector<FeatureValue>(s.features.size())});
  return list.back();
}

double get(const H2MGContext&, std::string_view class_name, const HyperEdge& e,
           std::string_view feature) {
  const auto& s = class_schema(class_name);
  const auto& v = e.features.at(s.feature_index(feature));
  if (!v)
    throw SchemaError(s.name + " " + e.id + ": feature " +
                      std::string(feature) + " is absent");
  return *v;
}

double value_or(std::string_view class_name, const HyperEdge& e,
                std::string_view feature, double fallback) {
  const auto& s = class_schema(class_name);
  auto i = s.find_feature(feature);
  if (!i || !e.features.at(*i)) return fallback;
  return *e.features[*i];
}

void set(std::string_view class_name, HyperEdge& e, std::string_view feature,
         FeatureValue v) {
  const auto& s = class_schema(class_name);
  e.features.at(s.feature_index(feature)) = v;
}

Address port(std::string_view class_name, const HyperEdge& e,
             std::string_view port_name) {
  return e.ports.at(class_schema(class_name).port_index(port_name));
}

// ---------------------------------------------------------------------------
// Validation

namespace {

struct PortIndex {
  // address -> ids of edges of one class plugged there through one port
  std::map<Address, std::vector<const HyperEdge*>> by_address;

  PortIndex(const H2MGContext& x, std::string_view class_name,
            std::string_view port_name) {
    const auto* s = find_class_schema(class_name);
    auto p = s->port_index(port_name);
    for (const auto& e : x.of(class_name))
      if (p < e.ports.size()) by_address[e.ports[p]].push_back(&e);
  }
  std::size_t count(Address a) const {
    auto it = by_address.find(a);
    return it == by_address.end() ? 0 : it->second.size();
  }
  const HyperEdge* unique(Address a) const {
    auto it = by_address.find(a);
    if (it == by_address.end() || it->second.size() != 1) return nullptr;
    return it->second.front();
  }
};

void wiring_rule(const H2MGContext& x, std::vector<Violation>& out,
                 std::string_view from_class, std::string_view from_port,
                 std::string_view to_class, std::string_view to_port) {
  PortIndex target(x, to_class, to_port);
  const auto& s = class_schema(from_class);
  auto p = s.port_index(from_port);
  for (const auto& e : x.of(from_class)) {
    if (p >= e.ports.size()) continue;
    auto n = target.count(e.ports[p]);
    if (n != 1)
      out.push_back({s.name, e.id, "wiring",
                     std::string(from_port) + " port matches " +
                         std::to_string(n) + " " + std::string(to_class) +
                         " edges (expected 1)"});
  }
}

}  // namespace

std::vector<Violation> validate_context(const H2MGContext& x) {
  std::vector<Violation> out;

  for (const auto& [name, list] : x.edges) {
    const auto* s = find_class_schema(name);
    if (!s) {
      for (const auto& e : list)
        out.push_back({name, e.id, "unknown-class", "class not registered"});
      continue;
    }
    std::set<std::string> ids;
    for (const auto& e : list) {
      if (!ids.insert(e.id).second)
        out.push_back({name, e.id, "duplicate-id", "edge id repeated"});
      if (e.ports.size() != s->ports.size())
        out.push_back({name, e.id, "port-arity", "wrong number of ports"});
      if (e.features.size() != s->features.size())
        out.push_back({name, e.id, "feature-arity", "wrong number of features"});
      for (std::size_t i = 0; i < e.ports.size(); ++i)
        if (e.ports[i] >= x.address_count)
          out.push_back({name, e.id, "dangling-port",
                         "port " + (i < s->ports.size() ? s->ports[i] : "?") +
                             " -> address " + std::to_string(e.ports[i]) +
                             " outside 0.." +
                             std::to_string(x.address_count)});
    }
  }

  std::set<Address> bus_addresses;
  for (const auto& b : x.of(cls::bus)) {
    if (b.ports.empty()) continue;
    if (!bus_addresses.insert(b.ports[0]).second)
      out.push_back({std::string(cls::bus), b.id, "bus-address",
                     "address shared with another Bus"});
    auto vmin = value_or(cls::bus, b, "V_min", NAN);
    auto vmax = value_or(cls::bus, b, "V_max", NAN);
    if (!std::isnan(vmin) && !std::isnan(vmax) && !(vmin < vmax))
      out.push_back({std::string(cls::bus), b.id, "voltage-limits",
                     "V_min must be below V_max"});
  }

  for (const auto& [name, list] : x.edges) {
    const auto* s = find_class_schema(name);
    if (!s) continue;
    for (std::size_t p = 0; p < s->ports.size(); ++p) {
      if (!is_bus_port(name, s->ports[p])) continue;
      for (const auto& e : list)
        if (p < e.ports.size() && !bus_addresses.count(e.ports[p]))
          out.push_back({name, e.id, "bus-port",
                         s->ports[p] + " port does not resolve to a Bus"});
    }
    if (name == cls::line || name == cls::twt) {
      for (const auto& e : list)
        for (auto f : {"I1_max", "I2_max"}) {
          auto v = value_or(name, e, f, NAN);
          if (!std::isnan(v) && !(v > 0))
            out.push_back({name, e.id, "rating",
                           std::string(f) + " must be positive"});
        }
    }
  }

  wiring_rule(x, out, cls::line_controller, "Line", cls::line, "Line");
  wiring_rule(x, out, cls::shunt_controller, "Shunt", cls::shunt, "Shunt");
  wiring_rule(x, out, cls::svr_controller, "Zone", cls::svr_zone, "Zone");
  wiring_rule(x, out, cls::svr_unit, "Gen", cls::generator, "Gen");
  wiring_rule(x, out, cls::svr_unit, "Zone", cls::svr_zone, "Zone");
  wiring_rule(x, out, cls::rtc_controller, "TWT", cls::rtc, "TWT");
  wiring_rule(x, out, cls::rtc, "TWT", cls::twt, "TWT");

  {
    PortIndex units(x, cls::svr_unit, "Zone");
    for (const auto& e : x.of(cls::svr_controller))
      if (!e.ports.empty() && units.count(e.ports[0]) == 0)
        out.push_back({std::string(cls::svr_controller), e.id, "wiring",
                       "Zone port has no participating SVRUnit"});
  }
  return out;
}

std::vector<Incidence> neighborhood(const H2MGContext& x, Address a) {
  if (a >= x.address_count)
    throw std::out_of_range("address " + std::to_string(a) +
                            " outside context");
  std::vector<Incidence> out;
  for (const auto& [name, list] : x.edges) {
    const auto& s = class_schema(name);
    for (const auto& e : list)
      for (std::size_t p = 0; p < e.ports.size(); ++p)
        if (e.ports[p] == a) out.push_back({name, e.id, s.ports[p]});
  }
  std::sort(out.begin(), out.end(), [](const auto& l, const auto& r) {
    return std::tie(l.class_name, l.edge_id, l.port_name) <
           std::tie(r.class_name, r.edge_id, r.port_name);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json to_json(const H2MGContext& x) {
  nlohmann::json doc;
  doc["address_count"] = x.address_count;
  auto& classes = doc["classes"] = nlohmann::json::object();
  for (const auto& [name, list] : x.edges) {
    if (list.empty()) continue;
    const auto& s = class_schema(name);
    auto& arr = classes[name] = nlohmann::json::array();
    for (const auto& e : list) {
      nlohmann::json je;
      je["id"] = e.id;
      auto& ports = je["ports"] = nlohmann::json::object();
      for (std::size_t p = 0; p < s.ports.size(); ++p)
        ports[s.ports[p]] = e.ports.at(p);
      auto& feats = je["features"] = nlohmann::json::object();
      for (std::size_t f = 0; f < s.features.size(); ++f) {
        const auto& v = e.features.at(f);
        if (v)
          feats[s.features[f]] = *v;
        else
          feats[s.features[f]] = "absent";
      }
      arr.push_back(std::move(je));
    }
  }
  doc["metadata"] = x.metadata;
  return doc;
}

H2MGContext context_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw SchemaError("grid document must be an object");
  for (const auto& [key, _] : doc.items())
    if (key != "address_count" && key != "classes" && key != "metadata")
      throw SchemaError("unexpected top-level key " + key);
  if (!doc.contains("address_count") ||
      !doc["address_count"].is_number_unsigned())
    throw SchemaError("address_count must be a non-negative integer");

  H2MGContext x;
  x.address_count = doc["address_count"].get<std::size_t>();
  if (doc.contains("metadata")) {
    if (!doc["metadata"].is_object())
      throw SchemaError("metadata must be an object");
    for (const auto& [k, v] : doc["metadata"].items()) {
      if (!v.is_string()) throw SchemaError("metadata values must be strings");
      x.metadata[k] = v.get<std::string>();
    }
  }
  if (!doc.contains("classes")) return x;
  if (!doc["classes"].is_object())
    throw SchemaError("classes must be an object");

  for (const auto& [name, arr] : doc["classes"].items()) {
    const auto* s = find_class_schema(name);
    if (!s) throw SchemaError("unknown class " + name);
    if (!arr.is_array()) throw SchemaError(name + " must map to an array");
    auto& list = x.edges[name];
    for (const auto& je : arr) {
      if (!je.is_object() || !je.contains("id") || !je["id"].is_string())
        throw SchemaError(name + ": edge without string id");
      HyperEdge e;
      e.id = je["id"].get<std::string>();
      e.ports.resize(s->ports.size());
      e.features.resize(s->features.size());

      const auto& ports = je.value("ports", nlohmann::json::object());
      if (!ports.is_object()) throw SchemaError(name + ": ports not an object");
      std::vector<bool> seen(s->ports.size(), false);
      for (const auto& [pname, addr] : ports.items()) {
        auto p = index_of(s->ports, pname);
        if (p == s->ports.size())
          throw SchemaError(name + " " + e.id + ": unknown port " + pname);
        if (!addr.is_number_unsigned())
          throw SchemaError(name + " " + e.id + ": port " + pname +
                            " must be a non-negative integer");
        e.ports[p] = addr.get<Address>();
        seen[p] = true;
      }
      for (std::size_t p = 0; p < seen.size(); ++p)
        if (!seen[p])
          throw SchemaError(name + " " + e.id + ": missing port " +
                            s->ports[p]);

      const auto& feats = je.value("features", nlohmann::json::object());
      if (!feats.is_object())
        throw SchemaError(name + ": features not an object");
      seen.assign(s->features.size(), false);
      for (const auto& [fname, val] : feats.items()) {
        auto f = index_of(s->features, fname);
        if (f == s->features.size())
          throw SchemaError(name + " " + e.id + ": unknown feature " + fname);
        if (val.is_number()) {
          e.features[f] = val.get<double>();
        } else if (val.is_string() && val.get<std::string>() == "absent") {
          e.features[f] = std::nullopt;
        } else {
          throw SchemaError(name + " " + e.id + ": feature " + fname +
                            " must be a number or \"absent\"");
        }
        seen[f] = true;
      }
      for (std::size_t f = 0; f < seen.size(); ++f)
        if (!seen[f])
          throw SchemaError(name + " " + e.id + ": missing feature " +
                            s->features[f]);
      list.push_back(std::move(e));
    }
  }
  return x;
}

std::string serialize(const H2MGContext& x) { return to_json(x).dump(); }

H2MGContext deserialize(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("malformed grid document: ") + e.what());
  }
  return context_from_json(doc);
}

H2MGContext load_context(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

void save_context(const H2MGContext& x, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << serialize(x);
}

// ---------------------------------------------------------------------------
// Decisions

std::vector<std::string> controller_ids(const H2MGContext& x,
                                        ControllerClass c) {
  std::vector<std::string> ids;
  for (const auto& e : x.of(controller_class_name(c))) ids.push_back(e.id);
  std::sort(ids.begin(), ids.end());
  return ids;
}

namespace {

template <class Map>
void check_keys(const H2MGContext& x, ControllerClass c, const Map& m) {
  auto ids = controller_ids(x, c);
  bool same = ids.size() == m.size();
  if (same) {
    auto it = m.begin();
    for (const auto& id : ids) {
      if (it->first != id) {
        same = false;
        break;
      }
      ++it;
    }
  }
  if (!same)
    throw PairingError(std::string(controller_class_name(c)) +
                       ": controller set does not match the context");
}

}  // namespace

void check_paired(const H2MGContext& x, const Decision& y) {
  check_keys(x, ControllerClass::line, y.line);
  check_keys(x, ControllerClass::shunt, y.shunt);
  check_keys(x, ControllerClass::svr, y.svr);
  check_keys(x, ControllerClass::rtc, y.rtc);
  for (const auto* m : {&y.line, &y.shunt})
    for (const auto& [id, v] : *m)
      if (v != 0 && v != 1) throw PairingError(id + ": binary value not 0/1");
  for (const auto& [id, v] : y.svr)
    if (!std::isfinite(v)) throw PairingError(id + ": non-finite setpoint");
  for (const auto& [id, v] : y.rtc)
    if (v < 0 || v >= kRtcCategories)
      throw PairingError(id + ": RTC category out of range");
}

void check_paired(const H2MGContext& x, const SurrogateDecision& z) {
  check_keys(x, ControllerClass::line, z.line);
  check_keys(x, ControllerClass::shunt, z.shunt);
  check_keys(x, ControllerClass::svr, z.svr);
  check_keys(x, ControllerClass::rtc, z.rtc);
  for (const auto* m : {&z.line, &z.shunt, &z.svr})
    for (const auto& [id, v] : *m)
      if (!std::isfinite(v)) throw PairingError(id + ": non-finite entry");
  for (const auto& [id, v] : z.rtc)
    for (double d : v)
      if (!std::isfinite(d)) throw PairingError(id + ": non-finite entry");
}

SurrogateDecision zero_surrogate(const H2MGContext& x) {
  SurrogateDecision z;
  for (const auto& id : controller_ids(x, ControllerClass::line)) z.line[id] = 0;
  for (const auto& id : controller_ids(x, ControllerClass::shunt))
    z.shunt[id] = 0;
  for (const auto& id : controller_ids(x, ControllerClass::svr)) z.svr[id] = 0;
  for (const auto& id : controller_ids(x, ControllerClass::rtc))
    z.rtc[id] = RtcLogits{};
  return z;
}

SurrogateDecision zero_like(const SurrogateDecision& z) {
  SurrogateDecision g;
  for (const auto& [id, _] : z.line) g.line[id] = 0;
  for (const auto& [id, _] : z.shunt) g.shunt[id] = 0;
  for (const auto& [id, _] : z.svr) g.svr[id] = 0;
  for (const auto& [id, _] : z.rtc) g.rtc[id] = RtcLogits{};
  return g;
}

nlohmann::json to_json(const Decision& y) {
  nlohmann::json doc = nlohmann::json::object();
  doc[std::string(cls::line_controller)] = y.line;
  doc[std::string(cls::shunt_controller)] = y.shunt;
  doc[std::string(cls::svr_controller)] = y.svr;
  doc[std::string(cls::rtc_controller)] = y.rtc;
  return doc;
}

Decision decision_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw SchemaError("decision must be an object");
  Decision y;
  for (const auto& [name, m] : doc.items()) {
    if (!m.is_object()) throw SchemaError(name + " must map ids to values");
    for (const auto& [id, v] : m.items()) {
      if (!v.is_number()) throw SchemaError(name + " " + id + ": not a number");
      if (name == cls::line_controller)
        y.line[id] = v.get<int>();
      else if (name == cls::shunt_controller)
        y.shunt[id] = v.get<int>();
      else if (name == cls::svr_controller)
        y.svr[id] = v.get<double>();
      else if (name == cls::rtc_controller)
        y.rtc[id] = v.get<int>();
      else
        throw SchemaError("unknown controller class " + name);
    }
  }
  return y;
}

}  // namespace gridtvc
