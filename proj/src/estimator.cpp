#include "gridtvc/estimator.hpp"

#include <cmath>
#include <stdexcept>

#include "gridtvc/parallel.hpp"

namespace gridtvc {

void EstimatorConfig::validate() const {
  if (!(beta >= 0) || !std::isfinite(beta))
    throw std::invalid_argument("estimator beta must be nonnegative");
  if (!(tau > 0) || !std::isfinite(tau))
    throw std::invalid_argument("estimator tau must be positive");
  for (int n : samples)
    if (n < 0) throw std::invalid_argument("sample counts must be nonnegative");
}

Oracle objective_oracle(const SolverOptions& opts) {
  return [opts](const H2MGContext& x, const Decision& y) {
    auto o = evaluate_objective(x, y, opts);
    return OracleResult{o.total, o.converged};
  };
}

double clip_score(double f, double f_ref, double tau) {
  return std::tanh((f - f_ref) / tau);
}

namespace {

double call(const Oracle& oracle, const H2MGContext& x, const Decision& y,
            double prohibitive) {
  try {
    auto r = oracle(x, y);
    if (!r.converged || !std::isfinite(r.f)) return prohibitive;
    return r.f;
  } catch (const std::exception&) {
    return prohibitive;
  }
}

// Adds s * grad_z log rho(y|z), restricted to class c, into g.
void add_score(SurrogateDecision& g, ControllerClass c, const Decision& y,
               const SurrogateDecision& z, double s, const PolicyConfig& pcfg) {
  switch (c) {
    case ControllerClass::line:
      for (const auto& [id, v] : z.line)
        g.line[id] += s * policy::log_prob_grad_binary(y.line.at(id), v);
      break;
    case ControllerClass::shunt:
      for (const auto& [id, v] : z.shunt)
        g.shunt[id] += s * policy::log_prob_grad_binary(y.shunt.at(id), v);
      break;
    case ControllerClass::svr:
      for (const auto& [id, v] : z.svr)
        g.svr[id] +=
            s * policy::log_prob_grad_gaussian(y.svr.at(id), v, pcfg.sigma);
      break;
    case ControllerClass::rtc:
      for (const auto& [id, v] : z.rtc) {
        auto d = policy::log_prob_grad_categorical(y.rtc.at(id), v);
        for (int j = 0; j < kRtcCategories; ++j) g.rtc[id][j] += s * d[j];
      }
      break;
  }
}

std::size_t class_size(const SurrogateDecision& z, ControllerClass c) {
  switch (c) {
    case ControllerClass::line: return z.line.size();
    case ControllerClass::shunt: return z.shunt.size();
    case ControllerClass::svr: return z.svr.size();
    case ControllerClass::rtc: return z.rtc.size();
  }
  return 0;
}

double class_norm(const SurrogateDecision& g, ControllerClass c) {
  double s = 0;
  switch (c) {
    case ControllerClass::line:
      for (const auto& [_, v] : g.line) s += v * v;
      break;
    case ControllerClass::shunt:
      for (const auto& [_, v] : g.shunt) s += v * v;
      break;
    case ControllerClass::svr:
      for (const auto& [_, v] : g.svr) s += v * v;
      break;
    case ControllerClass::rtc:
      for (const auto& [_, v] : g.rtc)
        for (double a : v) s += a * a;
      break;
  }
  return std::sqrt(s);
}

// Unary modifications of the mode restricted to class c.
struct Neighbor {
  std::string id;
  int value;
};

std::vector<Neighbor> unary_set(const Decision& ymp, ControllerClass c) {
  std::vector<Neighbor> out;
  const auto& m = c == ControllerClass::line    ? ymp.line
                  : c == ControllerClass::shunt ? ymp.shunt
                                                : ymp.rtc;
  for (const auto& [id, v] : m)
    for (int n : policy::unary_neighbors(c, v)) out.push_back({id, n});
  return out;
}

void set_value(Decision& y, ControllerClass c, const Neighbor& n) {
  switch (c) {
    case ControllerClass::line: y.line[n.id] = n.value; break;
    case ControllerClass::shunt: y.shunt[n.id] = n.value; break;
    case ControllerClass::rtc: y.rtc[n.id] = n.value; break;
    case ControllerClass::svr: break;
  }
}

}  // namespace

GradEstimate estimate_gradient(const H2MGContext& x, const SurrogateDecision& z,
                               const EstimatorConfig& cfg,
                               const PolicyConfig& pcfg, const Oracle& oracle,
                               Rng& rng) {
  check_paired(x, z);
  GradEstimate out;
  out.grad = zero_like(z);
  const Decision ymp = most_probable(z);
  {
    auto r = [&] {
      try {
        return oracle(x, ymp);
      } catch (const std::exception&) {
        return OracleResult{cfg.prohibitive_cost, false};
      }
    }();
    out.oracle_calls = 1;
    out.f_ref = r.converged && std::isfinite(r.f) ? r.f : cfg.prohibitive_cost;
    out.converged = r.converged && std::isfinite(r.f);
  }
  if (!out.converged) return out;

  // Draw every sample first so the RNG stream is consumed in a fixed order.
  struct Batch {
    ControllerClass c;
    std::size_t begin, end;
  };
  std::vector<Decision> ys;
  std::vector<Batch> batches;
  for (ControllerClass c : kControllerClasses) {
    const int n = cfg.samples_for(c);
    if (class_size(z, c) == 0 || n == 0) continue;
    Batch b{c, ys.size(), ys.size() + static_cast<std::size_t>(n)};
    if (c == ControllerClass::svr) {
      for (int i = 0; i < n; ++i) {
        Decision y = ymp;
        for (const auto& [id, v] : z.svr)
          y.svr[id] = policy::sample_gaussian(v, pcfg.sigma, rng);
        ys.push_back(std::move(y));
      }
    } else {
      auto nb = unary_set(ymp, c);
      for (int i = 0; i < n; ++i) {
        Decision y = ymp;
        set_value(y, c, nb[uniform_index(rng, nb.size())]);
        ys.push_back(std::move(y));
      }
    }
    batches.push_back(b);
  }

  std::vector<double> f(ys.size());
  parallel_for(ys.size(), cfg.workers, [&](std::size_t i) {
    f[i] = call(oracle, x, ys[i], cfg.prohibitive_cost);
  });
  out.oracle_calls += ys.size();

  SurrogateDecision eg = entropy_grad(z, pcfg);
  out.grad = eg;
  auto v = flatten(out.grad);
  for (auto& a : v) a = -a;
  out.grad = unflatten(z, v);
  for (const auto& b : batches) {
    const double w = cfg.beta / static_cast<double>(b.end - b.begin);
    for (std::size_t i = b.begin; i < b.end; ++i)
      add_score(out.grad, b.c, ys[i], z,
                w * clip_score(f[i], out.f_ref, cfg.tau), pcfg);
  }
  for (std::size_t k = 0; k < kControllerClasses.size(); ++k)
    out.class_norms[k] = class_norm(out.grad, kControllerClasses[k]);
  return out;
}

RawEstimate estimate_gradient_raw(const H2MGContext& x,
                                  const SurrogateDecision& z, double beta,
                                  std::size_t n, const PolicyConfig& pcfg,
                                  const Oracle& oracle, Rng& rng,
                                  std::size_t workers) {
  if (n < 2) throw std::invalid_argument("raw estimator needs n >= 2");
  const std::size_t dim = flatten(z).size();
  std::vector<double> mean(dim, 0.0), m2(dim, 0.0);
  const std::size_t chunk = 4096;
  std::size_t seen = 0;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    std::vector<Decision> ys(m);
    for (auto& y : ys) y = sample(z, pcfg, rng);
    std::vector<double> f(m);
    parallel_for(m, workers, [&](std::size_t i) {
      f[i] = call(oracle, x, ys[i], 100.0);
    });
    for (std::size_t i = 0; i < m; ++i) {
      auto t = flatten(log_prob_grad(ys[i], z, pcfg));
      ++seen;
      for (std::size_t k = 0; k < dim; ++k) {
        double term = beta * f[i] * t[k];
        double d = term - mean[k];
        mean[k] += d / static_cast<double>(seen);
        m2[k] += d * (term - mean[k]);
      }
    }
  }
  auto h = flatten(entropy_grad(z, pcfg));
  std::vector<double> g(dim), se(dim);
  for (std::size_t k = 0; k < dim; ++k) {
    g[k] = -h[k] + mean[k];
    se[k] = std::sqrt(m2[k] / static_cast<double>(seen - 1) /
                      static_cast<double>(seen));
  }
  return {unflatten(z, g), unflatten(z, se)};
}

ExactGradient exact_gradient_oracle(const H2MGContext& x,
                                    const SurrogateDecision& z, double beta,
                                    const PolicyConfig& pcfg,
                                    const Oracle& oracle, std::size_t workers) {
  check_paired(x, z);
  struct Slot {
    ControllerClass c;
    std::string id;
    int arity;
  };
  std::vector<Slot> slots;
  for (const auto& [id, _] : z.line) slots.push_back({ControllerClass::line, id, 2});
  for (const auto& [id, _] : z.shunt) slots.push_back({ControllerClass::shunt, id, 2});
  for (const auto& [id, _] : z.rtc)
    slots.push_back({ControllerClass::rtc, id, kRtcCategories});
  std::size_t total = 1;
  for (const auto& s : slots) {
    total *= static_cast<std::size_t>(s.arity);
    if (total > kMaxEnumeratedDecisions)
      throw std::invalid_argument("decision space exceeds " +
                                  std::to_string(kMaxEnumeratedDecisions));
  }

  auto decode = [&](std::size_t idx) {
    Decision y;
    for (const auto& [id, v] : z.svr) y.svr[id] = v;
    for (const auto& s : slots) {
      int v = static_cast<int>(idx % static_cast<std::size_t>(s.arity));
      idx /= static_cast<std::size_t>(s.arity);
      set_value(y, s.c, {s.id, v});
    }
    return y;
  };

  std::vector<double> f(total);
  parallel_for(total, workers, [&](std::size_t i) {
    f[i] = call(oracle, x, decode(i), 100.0);
  });

  SurrogateDecision discrete = z;
  discrete.svr.clear();
  const std::size_t dim = flatten(z).size();
  std::vector<double> acc(dim, 0.0);
  ExactGradient out;
  out.decisions = total;
  double lz_max = -INFINITY;
  for (double v : f) lz_max = std::max(lz_max, -beta * v);
  double zsum = 0;
  for (std::size_t i = 0; i < total; ++i) {
    Decision y = decode(i);
    Decision yd = y;
    yd.svr.clear();
    double lp = log_prob(yd, discrete, pcfg);
    double p = std::exp(lp);
    out.entropy -= p * lp;
    out.expected_f += p * f[i];
    zsum += std::exp(-beta * f[i] - lz_max);
    auto t = flatten(log_prob_grad(y, z, pcfg));
    for (std::size_t k = 0; k < dim; ++k) acc[k] += beta * p * f[i] * t[k];
  }
  auto h = flatten(entropy_grad(z, pcfg));
  for (std::size_t k = 0; k < dim; ++k) acc[k] -= h[k];
  // SVR held at y = z: its score term is identically zero.
  out.grad = unflatten(z, acc);
  for (auto& [_, v] : out.grad.svr) v = 0.0;
  const double log_z = lz_max + std::log(zsum);
  out.z_beta = std::exp(log_z);
  out.kl = -out.entropy + beta * out.expected_f + log_z;
  return out;
}

}  // namespace gridtvc
