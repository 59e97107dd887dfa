#pragma once

// Synthetic operating-condition family and the ECDF input normalizer.
//
// A family has one fixed base topology drawn from its seed: a slack bus, SVR
// zones of HV buses hanging off it, LV pockets behind RTC transformers, and
// shunts on HV buses. Each context redraws loads, optional line availability,
// initial setpoints and shunt statuses, then embeds a base-case solution.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gridtvc/h2mg.hpp"
#include "gridtvc/powerflow.hpp"
#include "gridtvc/rng.hpp"

namespace gridtvc {

struct Range {
  double lo = 0;
  double hi = 0;
};

struct GridFamilySpec {
  std::array<double, 2> voltage_levels{1.0, 0.5625};  // HV, LV nominal

  int zones = 3;
  int buses_per_zone = 6;
  int units_per_zone = 2;
  int rtcs = 8;
  int rtc_controllers = 8;
  int lv_leaf_buses = 4;
  int shunts = 6;
  int shunt_controllers = 6;
  int mesh_lines = 6;  // permanent cycle-closing lines inside zones
  int line_controllers = 4;
  int optional_lines = 3;
  double optional_line_probability = 0.7;

  Range hv_load_p{0.15, 0.45};
  Range lv_load_p{0.04, 0.12};
  Range power_factor{0.92, 0.99};
  Range load_scale{0.6, 1.3};  // log-uniform per context
  double load_noise = 0.2;     // per-load multiplicative +-
  double generation_share = 0.6;

  Range hv_r{0.004, 0.012};
  Range hv_x{0.04, 0.10};
  Range hv_b{0.10, 0.30};
  Range lv_r{0.01, 0.03};
  Range lv_x{0.03, 0.06};
  double twt_x = 0.06;
  double tie_x_factor = 1.5;  // zone-to-slack lines
  Range shunt_b{0.10, 0.30};
  Range unit_q{-1.0, 1.5};
  double rating_margin = 1.6;

  double slack_voltage = 1.0;
  Range svr_target{0.95, 1.08};
  Range rtc_target{0.995, 1.04};  // fraction of V_nom
  double shunt_on_probability = 0.5;
  int max_attempts = 50;

  std::uint64_t seed = 1;

  int bus_count() const {
    return 1 + zones * buses_per_zone + rtcs + lv_leaf_buses;
  }
  /// Throws std::invalid_argument when the spec cannot be realized.
  void validate() const;
};

void to_json(nlohmann::json& j, const GridFamilySpec& s);
void from_json(const nlohmann::json& j, GridFamilySpec& s);
GridFamilySpec load_spec(const std::string& path);

/// One context of the family; index selects the independent random stream.
H2MGContext generate_context(const GridFamilySpec& spec, std::uint64_t seed,
                             std::uint64_t index,
                             const SolverOptions& opts = {});

struct DatasetSplits {
  std::vector<std::size_t> train, val, test;
};

struct Dataset {
  std::string dir;
  std::vector<std::string> files;  // relative to dir
  DatasetSplits splits;

  std::size_t size() const { return files.size(); }
  H2MGContext load(std::size_t i) const;
  std::vector<H2MGContext> load_all(const std::vector<std::size_t>& ids) const;
};

/// Writes count contexts and manifest.json. Split sizes default to 80/10/10.
void generate_dataset(const GridFamilySpec& spec, std::size_t count,
                      std::uint64_t seed, const std::string& dir,
                      std::optional<std::array<std::size_t, 3>> split = {},
                      std::size_t workers = 1);

Dataset open_dataset(const std::string& dir);

// ---------------------------------------------------------------------------
// Normalizer

struct FeatureMap {
  bool identity = false;
  std::vector<double> values;  // strictly increasing
  std::vector<double> levels;  // nondecreasing in [0, 1]

  double operator()(double v) const;
};

struct Normalizer {
  int knots = 101;
  std::map<std::string, std::vector<FeatureMap>> maps;  // schema feature order

  double apply(std::string_view class_name, std::size_t feature,
               const FeatureValue& v) const;
  nlohmann::json to_json() const;
  static Normalizer from_json(const nlohmann::json& doc);
  std::uint64_t hash() const;
};

Normalizer fit_normalizer(const std::vector<H2MGContext>& dataset,
                          int knots = 101);
/// Every feature replaced by its normalized value; absent becomes 0.
H2MGContext normalize(const H2MGContext& x, const Normalizer& n);

void save_normalizer(const Normalizer& n, const std::string& path);
Normalizer load_normalizer(const std::string& path);

}  // namespace gridtvc
