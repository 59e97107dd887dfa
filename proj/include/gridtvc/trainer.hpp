#pragma once

// Training loop, the Init baseline and evaluation reports.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gridtvc/estimator.hpp"
#include "gridtvc/gridgen.hpp"
#include "gridtvc/model.hpp"
#include "gridtvc/policy.hpp"
#include "gridtvc/powerflow.hpp"

namespace gridtvc {

// ---------------------------------------------------------------------------
// Init baseline

struct BaselineConfig {
  std::optional<double> offset;  // skip the search when set
  double grid_lo = -0.03;
  double grid_hi = 0.03;
  double grid_step = 0.005;

  std::vector<double> grid() const;
};

/// Keep topology, keep shunts, SVR target = initial pilot voltage + offset,
/// RTC setpoint projected onto the allowed ladder (ties toward the lower).
Decision init_baseline(const H2MGContext& x, double offset);

/// Nearest allowed RTC ratio index for a setpoint given as a fraction of
/// V_nom.
int nearest_rtc_category(double ratio);

struct OffsetSearch {
  double offset = 0;
  std::vector<std::pair<double, double>> scores;  // offset, mean objective
};

/// Grid search minimizing the mean objective; ties go to the smaller |offset|.
OffsetSearch tune_baseline_offset(const std::vector<H2MGContext>& train,
                                  const BaselineConfig& cfg,
                                  const SolverOptions& opts,
                                  std::size_t workers = 1);

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  void validate() const;
};

struct AdamState {
  std::vector<double> m, v;
  std::int64_t t = 0;
};

struct AdamResult {
  bool ok = true;
  std::string diagnostic;
};

/// Bias-corrected Adam update in place. A gradient with a non-finite entry
/// is rejected and leaves theta and state untouched.
AdamResult adam_step(std::vector<double>& theta, const std::vector<double>& grad,
                     AdamState& state, const AdamConfig& cfg);

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
  std::string data;
  std::string out;
  std::string normalizer;  // fitted on the train split when empty
  std::uint64_t seed = 1;
  int iterations = 20000;
  int eval_every = 500;
  int minibatch = 4;
  std::size_t workers = 1;
  std::optional<std::size_t> train_limit;
  std::optional<std::size_t> val_limit;
  bool zero_decoder_output = true;

  AdamConfig adam;
  EstimatorConfig estimator;
  PolicyConfig policy;
  SolverOptions solver;
  ModelConfig model;
  BaselineConfig baseline;

  void validate() const;
};

void to_json(nlohmann::json& j, const SolverOptions& o);
void from_json(const nlohmann::json& j, SolverOptions& o);
void to_json(nlohmann::json& j, const EstimatorConfig& c);
void from_json(const nlohmann::json& j, EstimatorConfig& c);
void to_json(nlohmann::json& j, const PolicyConfig& c);
void from_json(const nlohmann::json& j, PolicyConfig& c);
void to_json(nlohmann::json& j, const AdamConfig& c);
void from_json(const nlohmann::json& j, AdamConfig& c);
void to_json(nlohmann::json& j, const BaselineConfig& c);
void from_json(const nlohmann::json& j, BaselineConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig load_train_config(const std::string& path);

// ---------------------------------------------------------------------------
// Training

/// A context ready for the training loop.
struct PreparedContext {
  std::size_t id = 0;
  H2MGContext raw;
  CompiledContext compiled;
  Decision baseline;
};

std::vector<PreparedContext> prepare_contexts(
    const std::vector<std::size_t>& ids, std::vector<H2MGContext> raw,
    const Normalizer& norm, double offset);

struct ContextGradient {
  std::vector<double> grad;
  double f_ref = 0;
  bool converged = false;
  std::array<double, 4> class_norms{};
  double entropy = 0;  // discrete part, per controller
};

ContextGradient context_gradient(const H2mgNode& net,
                                 const std::vector<double>& theta,
                                 const PreparedContext& x,
                                 const TrainConfig& cfg, Rng& rng);

struct BatchGradient {
  std::vector<double> grad;  // mean over the minibatch
  double mean_f_ref = 0;
  double convergence = 0;
  std::array<double, 4> class_norms{};
  double entropy = 0;
};

/// Estimator stream of minibatch slot s at an iteration.
Rng slot_stream(std::uint64_t seed, std::uint64_t iteration, std::size_t slot);

/// Slot s draws its estimator samples from slot_stream(seed, iteration, s).
BatchGradient minibatch_gradient(const H2mgNode& net,
                                 const std::vector<double>& theta,
                                 const std::vector<const PreparedContext*>& batch,
                                 const TrainConfig& cfg, std::uint64_t iteration);

struct ValidationScore {
  double mean_objective = 0;  // prohibitive cost for divergent contexts
  double mean_violations = 0;  // over converged contexts
  double convergence = 0;
};

ValidationScore validate_policy(const H2mgNode& net,
                                const std::vector<double>& theta,
                                const std::vector<PreparedContext>& contexts,
                                const TrainConfig& cfg);

struct TrainResult {
  std::string best_checkpoint;
  std::string last_checkpoint;
  std::string log;
  std::string validation_log;
  int best_iteration = 0;
  double best_validation = 0;
  double baseline_offset = 0;
};

TrainResult train(const TrainConfig& cfg);

/// GNN decision y_rho(z) for a prepared context.
Decision gnn_decision(const H2mgNode& net, const std::vector<double>& theta,
                      const PreparedContext& x, const PolicyConfig& pcfg);

// ---------------------------------------------------------------------------
// Evaluation

struct PolicyReport {
  std::size_t contexts = 0;
  std::size_t converged = 0;
  double convergence_rate = 0;
  // Means over contexts where both compared policies converge.
  double over_voltages = 0;
  double under_voltages = 0;
  double violations = 0;
  double overflows = 0;
  double joule_losses = 0;
  double objective = 0;
  // Lever usage.
  double lines_opened_pct = 0;
  double shunts_switched_pct = 0;
  double svr_setpoint_mean = 0;
  double svr_setpoint_std = 0;
  std::array<double, 4> rtc_category_share{};
};

struct EvaluationReport {
  std::size_t contexts = 0;
  std::size_t common_converged = 0;
  std::optional<PolicyReport> gnn;
  PolicyReport baseline;
  double baseline_offset = 0;
};

nlohmann::json to_json(const EvaluationReport& r);

/// Evaluates the checkpoint (or only the baseline when ckpt is empty) on a
/// split of the dataset and writes report.json plus histogram files to out.
EvaluationReport evaluate(const std::string& ckpt, const std::string& data,
                          const std::string& out, const std::string& split = "test",
                          std::size_t workers = 1,
                          std::optional<double> baseline_offset = {});

}  // namespace gridtvc
