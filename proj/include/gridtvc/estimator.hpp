#pragma once

// Score-function estimates of the surrogate gradient
//   g(z; x) = -grad H(rho(.|z)) + beta * grad E_{y~rho(.|z)}[f(y; x)]
// and an exact enumeration oracle for small decision spaces.

#include <array>
#include <cstdint>
#include <functional>

#include "gridtvc/h2mg.hpp"
#include "gridtvc/policy.hpp"
#include "gridtvc/powerflow.hpp"
#include "gridtvc/rng.hpp"

namespace gridtvc {

struct EstimatorConfig {
  double beta = 1e-4;
  double tau = 0.1;
  // Samples per controller class, indexed like kControllerClasses.
  std::array<int, 4> samples{8, 16, 16, 8};
  double prohibitive_cost = 100.0;
  std::size_t workers = 1;

  int samples_for(ControllerClass c) const {
    return samples[static_cast<std::size_t>(c)];
  }
  void validate() const;
};

struct OracleResult {
  double f = 0;
  bool converged = false;
};

/// f(y; x). Must be pure and thread-safe.
using Oracle = std::function<OracleResult(const H2MGContext&, const Decision&)>;

/// The power-flow objective with the given solver options.
Oracle objective_oracle(const SolverOptions& opts = {});

struct GradEstimate {
  SurrogateDecision grad;
  double f_ref = 0;
  bool converged = false;
  std::array<double, 4> class_norms{};  // Euclidean norm per class
  std::size_t oracle_calls = 0;
};

/// tanh((f - f_ref) / tau).
double clip_score(double f, double f_ref, double tau);

/// Adjusted estimator: per-class decomposition around the mode, clipped
/// scores, unary modifications for discrete classes and joint Gaussian
/// samples for SVR. Returns a zero gradient when the mode itself diverges.
GradEstimate estimate_gradient(const H2MGContext& x, const SurrogateDecision& z,
                               const EstimatorConfig& cfg,
                               const PolicyConfig& pcfg, const Oracle& oracle,
                               Rng& rng);

struct RawEstimate {
  SurrogateDecision grad;
  SurrogateDecision std_error;  // per coordinate, of the sampled term
};

/// Unadjusted estimator: n joint samples from rho(.|z), raw costs, no
/// clipping.
RawEstimate estimate_gradient_raw(const H2MGContext& x,
                                  const SurrogateDecision& z, double beta,
                                  std::size_t n, const PolicyConfig& pcfg,
                                  const Oracle& oracle, Rng& rng,
                                  std::size_t workers = 1);

struct ExactGradient {
  SurrogateDecision grad;
  double z_beta = 0;      // sum_y exp(-beta f(y))
  double kl = 0;          // KL(rho(.|z) || exp(-beta f) / z_beta)
  double expected_f = 0;  // E_rho[f]
  double entropy = 0;     // discrete part only
  std::size_t decisions = 0;
};

inline constexpr std::size_t kMaxEnumeratedDecisions = 4096;

/// Full enumeration over line, shunt and RTC decisions; SVR decisions are
/// held at y = z and contribute nothing. Throws std::invalid_argument when
/// the space exceeds kMaxEnumeratedDecisions.
ExactGradient exact_gradient_oracle(const H2MGContext& x,
                                    const SurrogateDecision& z, double beta,
                                    const PolicyConfig& pcfg,
                                    const Oracle& oracle,
                                    std::size_t workers = 1);

}  // namespace gridtvc
