#include "gridtvc/policy.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace gridtvc {

void PolicyConfig::validate() const {
  if (!(sigma > 0) || !std::isfinite(sigma))
    throw std::invalid_argument("policy sigma must be positive");
  if (!std::isfinite(binary_offset) || !std::isfinite(rtc_offset_scale))
    throw std::invalid_argument("policy offsets must be finite");
}

namespace policy {

namespace {

void check_category(int y) {
  if (y < 0 || y >= kRtcCategories)
    throw std::invalid_argument("RTC category " + std::to_string(y) +
                                " out of range");
}

void check_bit(int y) {
  if (y != 0 && y != 1)
    throw std::invalid_argument("binary decision must be 0 or 1");
}

}  // namespace

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

double log_sum_exp(const RtcLogits& z) {
  double m = z[0];
  for (double v : z) m = std::max(m, v);
  double s = 0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

RtcLogits softmax(const RtcLogits& z) {
  double lse = log_sum_exp(z);
  RtcLogits p;
  for (int j = 0; j < kRtcCategories; ++j) p[j] = std::exp(z[j] - lse);
  return p;
}

double log_prob_binary(int y, double z) {
  check_bit(y);
  return y * z - softplus(z);
}

double log_prob_gaussian(double y, double z, double sigma) {
  double u = (y - z) / sigma;
  return -std::log(sigma * std::sqrt(2.0 * std::numbers::pi)) - 0.5 * u * u;
}

double log_prob_categorical(int y, const RtcLogits& z) {
  check_category(y);
  return z[y] - log_sum_exp(z);
}

double entropy_binary(double z) { return softplus(z) - z * sigmoid(z); }

double entropy_categorical(const RtcLogits& z) {
  double lse = log_sum_exp(z);
  double h = 0;
  for (double v : z) h -= std::exp(v - lse) * (v - lse);
  return h;
}

double entropy_grad_binary(double z) {
  double e = std::exp(-std::abs(z));
  return -z * e / ((1.0 + e) * (1.0 + e));
}

RtcLogits entropy_grad_categorical(const RtcLogits& z, bool table_form) {
  double lse = log_sum_exp(z);
  RtcLogits g;
  if (table_form) {
    for (int j = 0; j < kRtcCategories; ++j) {
      double p = std::exp(z[j] - lse);
      g[j] = -z[j] * p * (1.0 - p);
    }
    return g;
  }
  double h = entropy_categorical(z);
  for (int j = 0; j < kRtcCategories; ++j) {
    double lp = z[j] - lse;
    g[j] = -std::exp(lp) * (lp + h);
  }
  return g;
}

double log_prob_grad_binary(int y, double z) {
  check_bit(y);
  return y - sigmoid(z);
}

double log_prob_grad_gaussian(double y, double z, double sigma) {
  return (y - z) / (sigma * sigma);
}

RtcLogits log_prob_grad_categorical(int y, const RtcLogits& z) {
  check_category(y);
  RtcLogits g = softmax(z);
  for (auto& v : g) v = -v;
  g[y] += 1.0;
  return g;
}

int sample_binary(double z, Rng& rng) {
  return uniform(rng, 0.0, 1.0) < sigmoid(z) ? 1 : 0;
}

double sample_gaussian(double z, double sigma, Rng& rng) {
  return std::normal_distribution<double>(z, sigma)(rng);
}

int sample_categorical(const RtcLogits& z, Rng& rng) {
  RtcLogits p = softmax(z);
  double u = uniform(rng, 0.0, 1.0);
  double c = 0;
  for (int j = 0; j < kRtcCategories - 1; ++j) {
    c += p[j];
    if (u < c) return j;
  }
  return kRtcCategories - 1;
}

int mode_binary(double z) { return z > 0 ? 1 : 0; }

int mode_categorical(const RtcLogits& z) {
  int best = 0;
  for (int j = 1; j < kRtcCategories; ++j)
    if (z[j] > z[best]) best = j;
  return best;
}

std::vector<int> unary_neighbors_binary(int y) {
  check_bit(y);
  return {1 - y};
}

std::vector<int> unary_neighbors_categorical(int y) {
  check_category(y);
  std::vector<int> out;
  for (int j = 0; j < kRtcCategories; ++j)
    if (j != y) out.push_back(j);
  return out;
}

std::vector<int> unary_neighbors(ControllerClass c, int y) {
  switch (decision_kind(c)) {
    case DecisionKind::binary:
      return unary_neighbors_binary(y);
    case DecisionKind::categorical:
      return unary_neighbors_categorical(y);
    default:
      throw std::invalid_argument("no unary neighbors for a continuous class");
  }
}

}  // namespace policy

std::vector<double> flatten(const SurrogateDecision& z) {
  std::vector<double> v;
  v.reserve(z.line.size() + z.shunt.size() + z.svr.size() +
            kRtcCategories * z.rtc.size());
  for (const auto& [_, a] : z.line) v.push_back(a);
  for (const auto& [_, a] : z.shunt) v.push_back(a);
  for (const auto& [_, a] : z.svr) v.push_back(a);
  for (const auto& [_, a] : z.rtc) v.insert(v.end(), a.begin(), a.end());
  return v;
}

SurrogateDecision unflatten(const SurrogateDecision& shape,
                            const std::vector<double>& v) {
  if (v.size() != flatten(shape).size())
    throw std::invalid_argument("unflatten: size mismatch");
  SurrogateDecision z = shape;
  std::size_t k = 0;
  for (auto& [_, a] : z.line) a = v[k++];
  for (auto& [_, a] : z.shunt) a = v[k++];
  for (auto& [_, a] : z.svr) a = v[k++];
  for (auto& [_, a] : z.rtc)
    for (auto& c : a) c = v[k++];
  return z;
}

Decision most_probable(const SurrogateDecision& z) {
  Decision y;
  for (const auto& [id, v] : z.line) y.line[id] = policy::mode_binary(v);
  for (const auto& [id, v] : z.shunt) y.shunt[id] = policy::mode_binary(v);
  for (const auto& [id, v] : z.svr) y.svr[id] = v;
  for (const auto& [id, v] : z.rtc) y.rtc[id] = policy::mode_categorical(v);
  return y;
}

double log_prob(const Decision& y, const SurrogateDecision& z,
                const PolicyConfig& cfg) {
  double s = 0;
  for (const auto& [id, v] : z.line) s += policy::log_prob_binary(y.line.at(id), v);
  for (const auto& [id, v] : z.shunt)
    s += policy::log_prob_binary(y.shunt.at(id), v);
  for (const auto& [id, v] : z.svr)
    s += policy::log_prob_gaussian(y.svr.at(id), v, cfg.sigma);
  for (const auto& [id, v] : z.rtc)
    s += policy::log_prob_categorical(y.rtc.at(id), v);
  return s;
}

double entropy(const SurrogateDecision& z, const PolicyConfig& cfg) {
  double h = 0;
  for (const auto& [_, v] : z.line) h += policy::entropy_binary(v);
  for (const auto& [_, v] : z.shunt) h += policy::entropy_binary(v);
  for (const auto& [_, v] : z.rtc) h += policy::entropy_categorical(v);
  h += static_cast<double>(z.svr.size()) * 0.5 *
       std::log(2.0 * std::numbers::pi * std::numbers::e * cfg.sigma * cfg.sigma);
  return h;
}

SurrogateDecision entropy_grad(const SurrogateDecision& z,
                               const PolicyConfig& cfg) {
  SurrogateDecision g = zero_like(z);
  for (const auto& [id, v] : z.line) g.line[id] = policy::entropy_grad_binary(v);
  for (const auto& [id, v] : z.shunt)
    g.shunt[id] = policy::entropy_grad_binary(v);
  for (const auto& [id, v] : z.rtc)
    g.rtc[id] = policy::entropy_grad_categorical(v, cfg.table_rtc_entropy);
  return g;
}

SurrogateDecision log_prob_grad(const Decision& y, const SurrogateDecision& z,
                                const PolicyConfig& cfg) {
  SurrogateDecision g = zero_like(z);
  for (const auto& [id, v] : z.line)
    g.line[id] = policy::log_prob_grad_binary(y.line.at(id), v);
  for (const auto& [id, v] : z.shunt)
    g.shunt[id] = policy::log_prob_grad_binary(y.shunt.at(id), v);
  for (const auto& [id, v] : z.svr)
    g.svr[id] = policy::log_prob_grad_gaussian(y.svr.at(id), v, cfg.sigma);
  for (const auto& [id, v] : z.rtc)
    g.rtc[id] = policy::log_prob_grad_categorical(y.rtc.at(id), v);
  return g;
}

Decision sample(const SurrogateDecision& z, const PolicyConfig& cfg, Rng& rng) {
  Decision y;
  for (const auto& [id, v] : z.line) y.line[id] = policy::sample_binary(v, rng);
  for (const auto& [id, v] : z.shunt) y.shunt[id] = policy::sample_binary(v, rng);
  for (const auto& [id, v] : z.svr)
    y.svr[id] = policy::sample_gaussian(v, cfg.sigma, rng);
  for (const auto& [id, v] : z.rtc) y.rtc[id] = policy::sample_categorical(v, rng);
  return y;
}

SurrogateDecision apply_offsets(const SurrogateDecision& z_raw,
                                const Decision& baseline,
                                const PolicyConfig& cfg) {
  auto need = [](const auto& m, const std::string& id) -> const auto& {
    auto it = m.find(id);
    if (it == m.end()) throw PairingError(id + ": no baseline decision");
    return it->second;
  };
  SurrogateDecision z = z_raw;
  for (auto& [id, v] : z.line) v += cfg.binary_offset;
  for (auto& [id, v] : z.shunt) v += cfg.binary_offset;
  for (auto& [id, v] : z.svr) v += need(baseline.svr, id);
  for (auto& [id, v] : z.rtc) {
    int cat = need(baseline.rtc, id);
    if (cat < 0 || cat >= kRtcCategories)
      throw PairingError(id + ": baseline category out of range");
    v[cat] += cfg.rtc_offset_scale;
  }
  return z;
}

}  // namespace gridtvc
