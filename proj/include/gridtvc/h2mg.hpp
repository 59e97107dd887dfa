#pragma once

// Hyper-heterogeneous multi-graph (H2MG) data model for grid operating
// conditions. A context is a set of typed hyper-edges whose named ports plug
// into shared integer addresses. Controller hyper-edges carry the decision
// variables; everything else is context.

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace gridtvc {

using Address = std::uint32_t;

/// A feature value; std::nullopt is the explicit "absent" sentinel.
using FeatureValue = std::optional<double>;

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class PairingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DecisionKind { none, binary, continuous, categorical };

/// Controller classes that carry decision variables.
enum class ControllerClass { line, shunt, svr, rtc };

inline constexpr std::array<ControllerClass, 4> kControllerClasses = {
    ControllerClass::line, ControllerClass::shunt, ControllerClass::svr,
    ControllerClass::rtc};

inline constexpr int kRtcCategories = 4;

/// Allowed RTC setpoints as fractions of the regulated bus nominal voltage.
inline constexpr std::array<double, kRtcCategories> kRtcRatios = {1.00, 1.02,
                                                                   1.05, 1.07};

namespace cls {
inline constexpr std::string_view bus = "Bus";
inline constexpr std::string_view load = "Load";
inline constexpr std::string_view battery = "Battery";
inline constexpr std::string_view svc = "SVC";
inline constexpr std::string_view vsc_station = "VSCStation";
inline constexpr std::string_view hvdc_line = "HVDCLine";
inline constexpr std::string_view line = "Line";
inline constexpr std::string_view line_controller = "LineController";
inline constexpr std::string_view shunt = "Shunt";
inline constexpr std::string_view shunt_controller = "ShuntController";
inline constexpr std::string_view generator = "Generator";
inline constexpr std::string_view svr_unit = "SVRUnit";
inline constexpr std::string_view svr_zone = "SVRZone";
inline constexpr std::string_view svr_controller = "SVRController";
inline constexpr std::string_view twt = "TWT";
inline constexpr std::string_view rtc = "RTC";
inline constexpr std::string_view rtc_controller = "RTCController";
}  // namespace cls

struct ClassSchema {
  std::string name;
  std::vector<std::string> ports;     // schema order
  std::vector<std::string> features;  // schema order
  DecisionKind decision = DecisionKind::none;
  std::string decision_name;
  int decision_width = 0;

  /// Index of a port or feature name; throws SchemaError when unknown.
  std::size_t port_index(std::string_view port) const;
  std::size_t feature_index(std::string_view feature) const;
  std::optional<std::size_t> find_feature(std::string_view feature) const;
};

/// The 17 registered classes, sorted by name.
const std::vector<ClassSchema>& schema();
const ClassSchema& class_schema(std::string_view name);
const ClassSchema* find_class_schema(std::string_view name);
std::string_view controller_class_name(ControllerClass c);
DecisionKind decision_kind(ControllerClass c);
/// Stable 64-bit fingerprint of the registered schema.
std::uint64_t schema_hash();

/// FNV-1a over raw bytes; used for schema and normalizer fingerprints.
std::uint64_t fnv1a(std::string_view bytes);

/// Ports whose addresses must be occupied by Bus hyper-edges.
bool is_bus_port(std::string_view class_name, std::string_view port);

struct HyperEdge {
  std::string id;
  std::vector<Address> ports;          // aligned with ClassSchema::ports
  std::vector<FeatureValue> features;  // aligned with ClassSchema::features

  bool operator==(const HyperEdge&) const = default;
};

struct H2MGContext {
  std::size_t address_count = 0;
  std::map<std::string, std::vector<HyperEdge>> edges;
  std::map<std::string, std::string> metadata;

  bool operator==(const H2MGContext&) const = default;

  const std::vector<HyperEdge>& of(std::string_view class_name) const;
  std::vector<HyperEdge>& of(std::string_view class_name);
  std::size_t count(std::string_view class_name) const;

  /// Appends an edge with every feature absent; returns a reference to it.
  HyperEdge& add_edge(std::string_view class_name, std::string id,
                      std::vector<Address> ports);
  Address new_address() { return static_cast<Address>(address_count++); }
};

/// Feature accessors by name. get() throws SchemaError if the feature is
/// absent, value_or() substitutes a default.
double get(const H2MGContext& ctx, std::string_view class_name,
           const HyperEdge& e, std::string_view feature);
double value_or(std::string_view class_name, const HyperEdge& e,
                std::string_view feature, double fallback);
void set(std::string_view class_name, HyperEdge& e, std::string_view feature,
         FeatureValue v);
Address port(std::string_view class_name, const HyperEdge& e,
             std::string_view port_name);

struct Violation {
  std::string class_name;
  std::string edge_id;
  std::string rule;
  std::string detail;
};

std::vector<Violation> validate_context(const H2MGContext& x);

struct Incidence {
  std::string class_name;
  std::string edge_id;
  std::string port_name;
  bool operator==(const Incidence&) const = default;
};

/// (class, edge, port) triples plugged into address a, ordered by class name,
/// edge id then port name. Throws std::out_of_range for a >= address_count.
std::vector<Incidence> neighborhood(const H2MGContext& x, Address a);

nlohmann::json to_json(const H2MGContext& x);
H2MGContext context_from_json(const nlohmann::json& doc);
std::string serialize(const H2MGContext& x);
H2MGContext deserialize(std::string_view text);
H2MGContext load_context(const std::string& path);
void save_context(const H2MGContext& x, const std::string& path);

// ---------------------------------------------------------------------------
// Decisions

/// Joint decision y. Keys are controller ids.
///  line:  1 requests disconnection of the controlled line, 0 keeps it.
///  shunt: 1 toggles the controlled shunt's connection status.
///  svr:   additive change of the zone voltage target (p.u.).
///  rtc:   category index into kRtcRatios.
struct Decision {
  std::map<std::string, int> line;
  std::map<std::string, int> shunt;
  std::map<std::string, double> svr;
  std::map<std::string, int> rtc;

  bool operator==(const Decision&) const = default;
  std::size_t size() const {
    return line.size() + shunt.size() + svr.size() + rtc.size();
  }
};

using RtcLogits = std::array<double, kRtcCategories>;

/// Surrogate decision z: real parameters of the factorized policy.
struct SurrogateDecision {
  std::map<std::string, double> line;
  std::map<std::string, double> shunt;
  std::map<std::string, double> svr;
  std::map<std::string, RtcLogits> rtc;

  bool operator==(const SurrogateDecision&) const = default;
  std::size_t size() const {
    return line.size() + shunt.size() + svr.size() + rtc.size();
  }
};

/// Sorted controller ids of a class in x.
std::vector<std::string> controller_ids(const H2MGContext& x, ControllerClass c);

/// Throws PairingError unless the key sets match x's controllers exactly and
/// all values are in domain (bits 0/1, categories 0..3, finite reals).
void check_paired(const H2MGContext& x, const Decision& y);
void check_paired(const H2MGContext& x, const SurrogateDecision& z);

/// A zero-valued surrogate decision (and gradient buffer) shaped for x.
SurrogateDecision zero_surrogate(const H2MGContext& x);
SurrogateDecision zero_like(const SurrogateDecision& z);

nlohmann::json to_json(const Decision& y);
Decision decision_from_json(const nlohmann::json& doc);

}  // namespace gridtvc
