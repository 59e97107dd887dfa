#pragma once

// Factorized surrogate distribution rho(y|z): Bernoulli for line and shunt
// controllers, Gaussian with fixed sigma for SVR setpoint changes, softmax
// over the four RTC setpoint categories.

#include <vector>

#include "gridtvc/h2mg.hpp"
#include "gridtvc/rng.hpp"

namespace gridtvc {

struct PolicyConfig {
  double sigma = 0.0025;
  double binary_offset = -2.0;
  double rtc_offset_scale = 2.0;
  // Use the printed elementwise RTC entropy derivative -z p (1 - p) instead
  // of the exact softmax-entropy gradient.
  bool table_rtc_entropy = false;

  void validate() const;
};

namespace policy {

double sigmoid(double z);
double softplus(double z);
RtcLogits softmax(const RtcLogits& z);
double log_sum_exp(const RtcLogits& z);

double log_prob_binary(int y, double z);
double log_prob_gaussian(double y, double z, double sigma);
double log_prob_categorical(int y, const RtcLogits& z);

double entropy_binary(double z);
double entropy_categorical(const RtcLogits& z);

double entropy_grad_binary(double z);
RtcLogits entropy_grad_categorical(const RtcLogits& z, bool table_form = false);

double log_prob_grad_binary(int y, double z);
double log_prob_grad_gaussian(double y, double z, double sigma);
RtcLogits log_prob_grad_categorical(int y, const RtcLogits& z);

int sample_binary(double z, Rng& rng);
double sample_gaussian(double z, double sigma, Rng& rng);
int sample_categorical(const RtcLogits& z, Rng& rng);

int mode_binary(double z);
int mode_categorical(const RtcLogits& z);

std::vector<int> unary_neighbors_binary(int y);
std::vector<int> unary_neighbors_categorical(int y);
/// Throws std::invalid_argument for the continuous SVR class.
std::vector<int> unary_neighbors(ControllerClass c, int y);

}  // namespace policy

/// Flat view in the order line, shunt, svr, rtc (4 logits each), ids
/// ascending within a class.
std::vector<double> flatten(const SurrogateDecision& z);
/// Inverse of flatten using shape for the keys.
SurrogateDecision unflatten(const SurrogateDecision& shape,
                            const std::vector<double>& v);

/// Component-wise mode y_rho(z).
Decision most_probable(const SurrogateDecision& z);

/// log rho(y|z), summed over controllers.
double log_prob(const Decision& y, const SurrogateDecision& z,
                const PolicyConfig& cfg);

/// Entropy of the discrete classes plus the Gaussian differential entropy.
double entropy(const SurrogateDecision& z, const PolicyConfig& cfg);

SurrogateDecision entropy_grad(const SurrogateDecision& z,
                               const PolicyConfig& cfg);
SurrogateDecision log_prob_grad(const Decision& y, const SurrogateDecision& z,
                                const PolicyConfig& cfg);

/// Joint sample of every controller.
Decision sample(const SurrogateDecision& z, const PolicyConfig& cfg, Rng& rng);

/// Shifts raw outputs so that a zero output has the baseline y0 as its mode.
SurrogateDecision apply_offsets(const SurrogateDecision& z_raw,
                                const Decision& baseline,
                                const PolicyConfig& cfg);

}  // namespace gridtvc
