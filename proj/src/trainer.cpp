#include "gridtvc/trainer.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <stdexcept>

#include "gridtvc/parallel.hpp"

namespace gridtvc {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Init baseline

std::vector<double> BaselineConfig::grid() const {
  if (!(grid_step > 0) || !(grid_lo <= grid_hi))
    throw std::invalid_argument("bad baseline offset grid");
  std::vector<double> g;
  const auto n = static_cast<long>(std::floor((grid_hi - grid_lo) / grid_step + 1e-9));
  for (long k = 0; k <= n; ++k) {
    double v = grid_lo + static_cast<double>(k) * grid_step;
    // snap to the step lattice so 0 is exactly representable
    g.push_back(std::round(v / grid_step) * grid_step);
  }
  return g;
}

int nearest_rtc_category(double ratio) {
  int best = 0;
  double bd = std::abs(ratio - kRtcRatios[0]);
  for (int k = 1; k < kRtcCategories; ++k) {
    double d = std::abs(ratio - kRtcRatios[k]);
    if (d < bd - 1e-9) {
      bd = d;
      best = k;
    }
  }
  return best;
}

Decision init_baseline(const H2MGContext& x, double offset) {
  Decision y;
  for (const auto& e : x.of(cls::line_controller)) y.line[e.id] = 0;
  for (const auto& e : x.of(cls::shunt_controller)) y.shunt[e.id] = 0;
  std::map<Address, const HyperEdge*> bus_at, zone_at;
  for (const auto& b : x.of(cls::bus)) bus_at[port(cls::bus, b, "Bus")] = &b;
  for (const auto& z : x.of(cls::svr_zone)) zone_at[port(cls::svr_zone, z, "Zone")] = &z;
  for (const auto& c : x.of(cls::svr_controller)) {
    auto z = zone_at.find(port(cls::svr_controller, c, "Zone"));
    if (z == zone_at.end()) throw PairingError(c.id + ": zone not found");
    const HyperEdge& zone = *z->second;
    auto b = bus_at.find(port(cls::svr_zone, zone, "RegulatedBus"));
    if (b == bus_at.end()) throw PairingError(c.id + ": regulated bus not found");
    double v0 = value_or(cls::bus, *b->second, "V",
                         value_or(cls::svr_zone, zone, "V_target", 1.0));
    double target = value_or(cls::svr_zone, zone, "V_target", v0);
    y.svr[c.id] = v0 + offset - target;
  }
  for (const auto& c : x.of(cls::rtc_controller)) {
    double vn = value_or(cls::rtc_controller, c, "V_nom", 1.0);
    double vt = value_or(cls::rtc_controller, c, "V_target", vn);
    y.rtc[c.id] = nearest_rtc_category(vt / vn);
  }
  return y;
}

OffsetSearch tune_baseline_offset(const std::vector<H2MGContext>& train,
                                  const BaselineConfig& cfg,
                                  const SolverOptions& opts,
                                  std::size_t workers) {
  if (train.empty()) throw std::invalid_argument("empty train set");
  OffsetSearch out;
  const auto grid = cfg.grid();
  bool any = false;
  double best = INFINITY;
  for (double off : grid) {
    std::vector<ObjectiveBreakdown> r(train.size());
    parallel_for(train.size(), workers, [&](std::size_t i) {
      r[i] = evaluate_objective(train[i], init_baseline(train[i], off), opts);
    });
    double s = 0;
    for (const auto& o : r) {
      s += o.total;
      any = any || o.converged;
    }
    double mean = s / static_cast<double>(train.size());
    out.scores.emplace_back(off, mean);
    if (mean < best || (mean == best && std::abs(off) < std::abs(out.offset))) {
      best = mean;
      out.offset = off;
    }
  }
  if (!any) throw std::runtime_error("baseline offset search: no evaluation converged");
  return out;
}

// ---------------------------------------------------------------------------
// Adam

void AdamConfig::validate() const {
  if (!(lr > 0)) throw std::invalid_argument("adam lr must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw std::invalid_argument("adam betas must be in [0, 1)");
  if (!(eps > 0)) throw std::invalid_argument("adam eps must be positive");
}

AdamResult adam_step(std::vector<double>& theta, const std::vector<double>& grad,
                     AdamState& s, const AdamConfig& cfg) {
  if (grad.size() != theta.size())
    throw std::invalid_argument("adam: gradient and parameter sizes differ");
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!std::isfinite(grad[i]))
      return {false, "non-finite gradient entry at index " + std::to_string(i)};
  if (s.m.empty()) {
    s.m.assign(theta.size(), 0.0);
    s.v.assign(theta.size(), 0.0);
  }
  ++s.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    s.m[i] = cfg.beta1 * s.m[i] + (1 - cfg.beta1) * grad[i];
    s.v[i] = cfg.beta2 * s.v[i] + (1 - cfg.beta2) * grad[i] * grad[i];
    theta[i] -= cfg.lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + cfg.eps);
  }
  return {};
}

// ---------------------------------------------------------------------------
// Configuration documents

namespace {

void reject_unknown(const json& j, const json& known, const std::string& what) {
  if (!j.is_object()) throw std::invalid_argument(what + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key()))
      throw std::invalid_argument("unknown " + what + " key " + it.key());
}

template <class T>
void take(const json& j, const char* k, T& v) {
  if (j.contains(k)) j.at(k).get_to(v);
}

template <class T>
void take_opt(const json& j, const char* k, std::optional<T>& v) {
  if (!j.contains(k)) return;
  if (j.at(k).is_null()) v.reset();
  else v = j.at(k).get<T>();
}

template <class T>
json opt_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace

void to_json(json& j, const SolverOptions& o) {
  j = json{{"tolerance", o.tolerance},
           {"max_inner_iterations", o.max_inner_iterations},
           {"max_outer_loops", o.max_outer_loops},
           {"tap_positions", o.tap_positions},
           {"tap_min", o.tap_min},
           {"tap_max", o.tap_max},
           {"rtc_deadband", o.rtc_deadband},
           {"lambda_v", o.lambda_v},
           {"lambda_i", o.lambda_i},
           {"lambda_j", o.lambda_j},
           {"eps_v", o.eps_v},
           {"eps_i", o.eps_i},
           {"prohibitive_cost", o.prohibitive_cost},
           {"min_target_voltage", o.min_target_voltage},
           {"max_target_voltage", o.max_target_voltage},
           {"min_plausible_voltage", o.min_plausible_voltage},
           {"max_plausible_voltage", o.max_plausible_voltage}};
}

void from_json(const json& j, SolverOptions& o) {
  reject_unknown(j, json(SolverOptions{}), "solver");
  take(j, "tolerance", o.tolerance);
  take(j, "max_inner_iterations", o.max_inner_iterations);
  take(j, "max_outer_loops", o.max_outer_loops);
  take(j, "tap_positions", o.tap_positions);
  take(j, "tap_min", o.tap_min);
  take(j, "tap_max", o.tap_max);
  take(j, "rtc_deadband", o.rtc_deadband);
  take(j, "lambda_v", o.lambda_v);
  take(j, "lambda_i", o.lambda_i);
  take(j, "lambda_j", o.lambda_j);
  take(j, "eps_v", o.eps_v);
  take(j, "eps_i", o.eps_i);
  take(j, "prohibitive_cost", o.prohibitive_cost);
  take(j, "min_target_voltage", o.min_target_voltage);
  take(j, "max_target_voltage", o.max_target_voltage);
  take(j, "min_plausible_voltage", o.min_plausible_voltage);
  take(j, "max_plausible_voltage", o.max_plausible_voltage);
}

void to_json(json& j, const EstimatorConfig& c) {
  j = json{{"beta", c.beta},
           {"tau", c.tau},
           {"samples",
            {{"line", c.samples[0]}, {"shunt", c.samples[1]}, {"svr", c.samples[2]},
             {"rtc", c.samples[3]}}},
           {"prohibitive_cost", c.prohibitive_cost},
           {"workers", c.workers}};
}

void from_json(const json& j, EstimatorConfig& c) {
  reject_unknown(j, json(EstimatorConfig{}), "estimator");
  take(j, "beta", c.beta);
  take(j, "tau", c.tau);
  if (j.contains("samples")) {
    const auto& s = j.at("samples");
    reject_unknown(s, json{{"line", 0}, {"shunt", 0}, {"svr", 0}, {"rtc", 0}},
                   "estimator.samples");
    take(s, "line", c.samples[0]);
    take(s, "shunt", c.samples[1]);
    take(s, "svr", c.samples[2]);
    take(s, "rtc", c.samples[3]);
  }
  take(j, "prohibitive_cost", c.prohibitive_cost);
  take(j, "workers", c.workers);
}

void to_json(json& j, const PolicyConfig& c) {
  j = json{{"sigma", c.sigma},
           {"binary_offset", c.binary_offset},
           {"rtc_offset_scale", c.rtc_offset_scale},
           {"table_rtc_entropy", c.table_rtc_entropy}};
}

void from_json(const json& j, PolicyConfig& c) {
  reject_unknown(j, json(PolicyConfig{}), "policy");
  take(j, "sigma", c.sigma);
  take(j, "binary_offset", c.binary_offset);
  take(j, "rtc_offset_scale", c.rtc_offset_scale);
  take(j, "table_rtc_entropy", c.table_rtc_entropy);
}

void to_json(json& j, const AdamConfig& c) {
  j = json{{"lr", c.lr}, {"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}};
}

void from_json(const json& j, AdamConfig& c) {
  reject_unknown(j, json(AdamConfig{}), "adam");
  take(j, "lr", c.lr);
  take(j, "beta1", c.beta1);
  take(j, "beta2", c.beta2);
  take(j, "eps", c.eps);
}

void to_json(json& j, const BaselineConfig& c) {
  j = json{{"offset", opt_json(c.offset)},
           {"grid_lo", c.grid_lo},
           {"grid_hi", c.grid_hi},
           {"grid_step", c.grid_step}};
}

void from_json(const json& j, BaselineConfig& c) {
  reject_unknown(j, json(BaselineConfig{}), "baseline");
  take_opt(j, "offset", c.offset);
  take(j, "grid_lo", c.grid_lo);
  take(j, "grid_hi", c.grid_hi);
  take(j, "grid_step", c.grid_step);
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"data", c.data},
           {"out", c.out},
           {"normalizer", c.normalizer},
           {"seed", c.seed},
           {"iterations", c.iterations},
           {"eval_every", c.eval_every},
           {"minibatch", c.minibatch},
           {"workers", c.workers},
           {"train_limit", opt_json(c.train_limit)},
           {"val_limit", opt_json(c.val_limit)},
           {"zero_decoder_output", c.zero_decoder_output},
           {"adam", c.adam},
           {"estimator", c.estimator},
           {"policy", c.policy},
           {"solver", c.solver},
           {"model", c.model},
           {"baseline", c.baseline}};
}

void from_json(const json& j, TrainConfig& c) {
  reject_unknown(j, json(TrainConfig{}), "train config");
  take(j, "data", c.data);
  take(j, "out", c.out);
  take(j, "normalizer", c.normalizer);
  take(j, "seed", c.seed);
  take(j, "iterations", c.iterations);
  take(j, "eval_every", c.eval_every);
  take(j, "minibatch", c.minibatch);
  take(j, "workers", c.workers);
  take_opt(j, "train_limit", c.train_limit);
  take_opt(j, "val_limit", c.val_limit);
  take(j, "zero_decoder_output", c.zero_decoder_output);
  take(j, "adam", c.adam);
  take(j, "estimator", c.estimator);
  take(j, "policy", c.policy);
  take(j, "solver", c.solver);
  take(j, "model", c.model);
  take(j, "baseline", c.baseline);
}

void TrainConfig::validate() const {
  if (iterations < 0) throw std::invalid_argument("iterations must be >= 0");
  if (eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
  if (minibatch < 1) throw std::invalid_argument("minibatch must be >= 1");
  adam.validate();
  estimator.validate();
  policy.validate();
  solver.validate();
  model.validate();
  baseline.grid();
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  TrainConfig c = json::parse(in).get<TrainConfig>();
  // Relative dataset and output paths resolve against the config's folder.
  auto base = fs::path(path).parent_path();
  auto resolve = [&](std::string& p) {
    if (!p.empty() && fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
  };
  resolve(c.data);
  resolve(c.out);
  resolve(c.normalizer);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Training

std::vector<PreparedContext> prepare_contexts(const std::vector<std::size_t>& ids,
                                              std::vector<H2MGContext> raw,
                                              const Normalizer& norm, double offset) {
  if (ids.size() != raw.size()) throw std::invalid_argument("ids and contexts differ");
  std::vector<PreparedContext> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out[i].id = ids[i];
    out[i].compiled = compile_context(normalize(raw[i], norm));
    out[i].baseline = init_baseline(raw[i], offset);
    out[i].raw = std::move(raw[i]);
  }
  return out;
}

Decision gnn_decision(const H2mgNode& net, const std::vector<double>& theta,
                      const PreparedContext& x, const PolicyConfig& pcfg) {
  return most_probable(apply_offsets(net.forward(theta, x.compiled), x.baseline, pcfg));
}

namespace {

double discrete_entropy_per_controller(const SurrogateDecision& z) {
  double h = 0;
  std::size_t n = 0;
  for (const auto& [_, v] : z.line) h += policy::entropy_binary(v), ++n;
  for (const auto& [_, v] : z.shunt) h += policy::entropy_binary(v), ++n;
  for (const auto& [_, v] : z.rtc) h += policy::entropy_categorical(v), ++n;
  return n ? h / static_cast<double>(n) : 0.0;
}

}  // namespace

ContextGradient context_gradient(const H2mgNode& net, const std::vector<double>& theta,
                                 const PreparedContext& x, const TrainConfig& cfg,
                                 Rng& rng) {
  ContextGradient out;
  ForwardTape tape;
  auto z_raw = net.forward(theta, x.compiled, &tape);
  auto z = apply_offsets(z_raw, x.baseline, cfg.policy);
  out.entropy = discrete_entropy_per_controller(z);
  auto est = estimate_gradient(x.raw, z, cfg.estimator, cfg.policy,
                               objective_oracle(cfg.solver), rng);
  out.f_ref = est.f_ref;
  out.converged = est.converged;
  out.class_norms = est.class_norms;
  if (!est.converged) {
    out.grad.assign(net.size(), 0.0);
    return out;
  }
  // The offsets are additive constants, so d/dz_raw equals d/dz.
  out.grad = net.vjp(theta, x.compiled, est.grad, &tape);
  return out;
}

Rng slot_stream(std::uint64_t seed, std::uint64_t iteration, std::size_t slot) {
  return make_stream(seed, {0x5a3b1e, iteration, slot});
}

BatchGradient minibatch_gradient(const H2mgNode& net, const std::vector<double>& theta,
                                 const std::vector<const PreparedContext*>& batch,
                                 const TrainConfig& cfg, std::uint64_t iteration) {
  if (batch.empty()) throw std::invalid_argument("empty minibatch");
  std::vector<ContextGradient> slots(batch.size());
  parallel_for(batch.size(), cfg.workers, [&](std::size_t s) {
    Rng rng = slot_stream(cfg.seed, iteration, s);
    slots[s] = context_gradient(net, theta, *batch[s], cfg, rng);
  });
  BatchGradient out;
  out.grad.assign(net.size(), 0.0);
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : slots) {
    for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += s.grad[i];
    out.mean_f_ref += s.f_ref * inv;
    out.convergence += (s.converged ? 1.0 : 0.0) * inv;
    for (std::size_t k = 0; k < 4; ++k) out.class_norms[k] += s.class_norms[k] * inv;
    out.entropy += s.entropy * inv;
  }
  for (auto& g : out.grad) g *= inv;
  return out;
}

ValidationScore validate_policy(const H2mgNode& net, const std::vector<double>& theta,
                                const std::vector<PreparedContext>& contexts,
                                const TrainConfig& cfg) {
  std::vector<Metrics> m(contexts.size());
  parallel_for(contexts.size(), cfg.workers, [&](std::size_t i) {
    m[i] = count_metrics(contexts[i].raw,
                         gnn_decision(net, theta, contexts[i], cfg.policy), cfg.solver);
  });
  ValidationScore s;
  std::size_t conv = 0;
  for (const auto& r : m) {
    s.mean_objective += r.objective.total;
    if (r.valid) {
      ++conv;
      s.mean_violations += r.violations;
    }
  }
  if (!contexts.empty()) s.mean_objective /= static_cast<double>(contexts.size());
  if (conv) s.mean_violations /= static_cast<double>(conv);
  s.convergence = contexts.empty() ? 0 : static_cast<double>(conv) / contexts.size();
  return s;
}

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::size_t> limit(std::vector<std::size_t> ids, std::optional<std::size_t> n) {
  if (n && ids.size() > *n) ids.resize(*n);
  return ids;
}

}  // namespace

TrainResult train(const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.out.empty()) throw std::invalid_argument("train config needs an output folder");
  Dataset data = open_dataset(cfg.data);
  auto train_ids = limit(data.splits.train, cfg.train_limit);
  auto val_ids = limit(data.splits.val, cfg.val_limit);
  if (train_ids.empty()) throw std::invalid_argument("train split is empty");
  fs::create_directories(cfg.out);
  const fs::path out(cfg.out);

  auto train_raw = data.load_all(train_ids);
  Normalizer norm = cfg.normalizer.empty() ? fit_normalizer(train_raw, 101)
                                           : load_normalizer(cfg.normalizer);
  save_normalizer(norm, (out / "normalizer.json").string());

  double offset;
  json offset_doc;
  if (cfg.baseline.offset) {
    offset = *cfg.baseline.offset;
  } else {
    auto search = tune_baseline_offset(train_raw, cfg.baseline, cfg.solver, cfg.workers);
    offset = search.offset;
    for (auto [o, s] : search.scores) offset_doc.push_back({o, s});
  }

  auto train_set = prepare_contexts(train_ids, std::move(train_raw), norm, offset);
  auto val_set = prepare_contexts(val_ids, data.load_all(val_ids), norm, offset);

  {
    json resolved = cfg;
    resolved["baseline_offset"] = offset;
    resolved["offset_search"] = offset_doc;
    std::ofstream f(out / "config.json");
    f << resolved.dump(2) << '\n';
  }

  H2mgNode net(cfg.model);
  std::vector<double> theta =
      net.init(cfg.seed, {.zero = false, .zero_decoder_output = cfg.zero_decoder_output});
  AdamState adam;

  TrainResult result;
  result.baseline_offset = offset;
  result.log = (out / "train_log.tsv").string();
  result.validation_log = (out / "val_log.tsv").string();
  result.best_checkpoint = (out / "best.ckpt.json").string();
  result.last_checkpoint = (out / "last.ckpt.json").string();

  std::ofstream log(result.log);
  std::ofstream vlog(result.validation_log);
  if (!log || !vlog) throw std::runtime_error("cannot write logs in " + cfg.out);
  log << "iteration\tepoch\tmean_f_ref\tconvergence\tgnorm_line\tgnorm_shunt\t"
         "gnorm_svr\tgnorm_rtc\tgrad_norm\tentropy\tstep_ok\n";
  vlog << "iteration\tval_objective\tval_violations\tval_convergence\tbest\n";

  auto checkpoint = [&](int iteration, const ValidationScore& v) {
    Checkpoint c;
    c.model = cfg.model;
    c.theta = theta;
    c.seed = cfg.seed;
    c.schema_hash = schema_hash();
    c.normalizer_hash = norm.hash();
    c.extra = {{"normalizer", norm.to_json()},
               {"policy", cfg.policy},
               {"solver", cfg.solver},
               {"baseline_offset", offset},
               {"iteration", iteration},
               {"val_objective", v.mean_objective},
               {"val_violations", v.mean_violations}};
    return c;
  };
  auto evaluate_now = [&](int it) {
    auto v = validate_policy(net, theta, val_set, cfg);
    bool better = it == 0 || v.mean_objective < result.best_validation;
    auto ck = checkpoint(it, v);
    save_checkpoint(net, ck, result.last_checkpoint);
    if (better) {
      result.best_validation = v.mean_objective;
      result.best_iteration = it;
      save_checkpoint(net, ck, result.best_checkpoint);
    }
    vlog << it << '\t' << fmt(v.mean_objective) << '\t' << fmt(v.mean_violations) << '\t'
         << fmt(v.convergence) << '\t' << (better ? 1 : 0) << '\n';
    vlog.flush();
    std::clog << "gridtvc: iteration " << it << " val objective " << v.mean_objective
              << " violations " << v.mean_violations << (better ? " (best)" : "") << '\n';
  };

  if (val_set.empty()) throw std::invalid_argument("validation split is empty");
  evaluate_now(0);

  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  std::uint64_t epoch = 0;
  auto next_index = [&]() {
    if (cursor == order.size()) {
      order.resize(train_set.size());
      std::iota(order.begin(), order.end(), 0);
      Rng r = make_stream(cfg.seed, {0xe90c, epoch++});
      std::shuffle(order.begin(), order.end(), r);
      cursor = 0;
    }
    return order[cursor++];
  };

  std::vector<const PreparedContext*> batch(static_cast<std::size_t>(cfg.minibatch));
  for (int it = 1; it <= cfg.iterations; ++it) {
    for (auto& b : batch) b = &train_set[next_index()];
    auto g = minibatch_gradient(net, theta, batch, cfg, static_cast<std::uint64_t>(it));
    double gn = 0;
    for (double v : g.grad) gn += v * v;
    auto step = adam_step(theta, g.grad, adam, cfg.adam);
    if (!step.ok) std::clog << "gridtvc: iteration " << it << " step rejected: " << step.diagnostic << '\n';
    log << it << '\t' << epoch << '\t' << fmt(g.mean_f_ref) << '\t' << fmt(g.convergence);
    for (double v : g.class_norms) log << '\t' << fmt(v);
    log << '\t' << fmt(std::sqrt(gn)) << '\t' << fmt(g.entropy) << '\t' << (step.ok ? 1 : 0)
        << '\n';
    if (it % cfg.eval_every == 0 || it == cfg.iterations) {
      log.flush();
      evaluate_now(it);
    }
  }
  if (!log || !vlog) throw std::runtime_error("failed writing training logs");
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

struct Outcome {
  Metrics m;
  Decision y;
  std::vector<double> svr_setpoints;
};

Outcome run_policy(const H2MGContext& x, Decision y, const SolverOptions& opts) {
  Outcome o;
  o.m = count_metrics(x, y, opts);
  std::map<Address, const HyperEdge*> zone_at;
  for (const auto& z : x.of(cls::svr_zone)) zone_at[port(cls::svr_zone, z, "Zone")] = &z;
  for (const auto& c : x.of(cls::svr_controller)) {
    auto z = zone_at.find(port(cls::svr_controller, c, "Zone"));
    if (z == zone_at.end()) continue;
    o.svr_setpoints.push_back(value_or(cls::svr_zone, *z->second, "V_target", 1.0) +
                              y.svr.at(c.id));
  }
  o.y = std::move(y);
  return o;
}

PolicyReport summarize(const std::vector<Outcome>& r, const std::vector<bool>& common) {
  PolicyReport p;
  p.contexts = r.size();
  std::size_t n = 0, lines = 0, opened = 0, shunts = 0, switched = 0, rtcs = 0;
  std::vector<double> sp;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (r[i].m.valid) ++p.converged;
    if (!common[i]) continue;
    ++n;
    const auto& m = r[i].m;
    p.over_voltages += m.over_voltages;
    p.under_voltages += m.under_voltages;
    p.violations += m.violations;
    p.overflows += m.overflows;
    p.joule_losses += m.joule_losses;
    p.objective += m.objective.total;
    for (const auto& [_, v] : r[i].y.line) lines++, opened += v == 1;
    for (const auto& [_, v] : r[i].y.shunt) shunts++, switched += v == 1;
    for (const auto& [_, v] : r[i].y.rtc) rtcs++, p.rtc_category_share[v] += 1;
    sp.insert(sp.end(), r[i].svr_setpoints.begin(), r[i].svr_setpoints.end());
  }
  p.convergence_rate = r.empty() ? 0 : static_cast<double>(p.converged) / r.size();
  if (n) {
    const double k = static_cast<double>(n);
    p.over_voltages /= k;
    p.under_voltages /= k;
    p.violations /= k;
    p.overflows /= k;
    p.joule_losses /= k;
    p.objective /= k;
  }
  if (lines) p.lines_opened_pct = 100.0 * opened / lines;
  if (shunts) p.shunts_switched_pct = 100.0 * switched / shunts;
  if (rtcs)
    for (auto& s : p.rtc_category_share) s /= static_cast<double>(rtcs);
  if (!sp.empty()) {
    double mean = 0;
    for (double v : sp) mean += v;
    mean /= static_cast<double>(sp.size());
    double var = 0;
    for (double v : sp) var += (v - mean) * (v - mean);
    p.svr_setpoint_mean = mean;
    p.svr_setpoint_std = std::sqrt(var / static_cast<double>(sp.size()));
  }
  return p;
}

json report_json(const PolicyReport& p) {
  return json{{"contexts", p.contexts},
              {"converged", p.converged},
              {"convergence_rate", p.convergence_rate},
              {"mean_over_voltages", p.over_voltages},
              {"mean_under_voltages", p.under_voltages},
              {"mean_violations", p.violations},
              {"mean_overflows", p.overflows},
              {"mean_joule_losses", p.joule_losses},
              {"mean_objective", p.objective},
              {"lines_opened_pct", p.lines_opened_pct},
              {"shunts_switched_pct", p.shunts_switched_pct},
              {"svr_setpoint_mean", p.svr_setpoint_mean},
              {"svr_setpoint_std", p.svr_setpoint_std},
              {"rtc_category_share", p.rtc_category_share}};
}

// Equal-width bins on [lo, hi) plus underflow and overflow rows.
std::vector<std::size_t> histogram(const std::vector<double>& v, double lo, double hi,
                                   int bins) {
  std::vector<std::size_t> h(static_cast<std::size_t>(bins) + 2, 0);
  for (double a : v) {
    if (a < lo) ++h[0];
    else if (a >= hi) ++h.back();
    else ++h[1 + static_cast<std::size_t>(std::min(bins - 1, static_cast<int>((a - lo) / (hi - lo) * bins)))];
  }
  return h;
}

void write_hist(const fs::path& path, const std::vector<std::vector<double>>& cols,
                const std::vector<std::string>& names, double lo, double hi, int bins) {
  std::ofstream f(path);
  f << "bin_lo\tbin_hi";
  for (const auto& n : names) f << '\t' << n;
  f << '\n';
  std::vector<std::vector<std::size_t>> h;
  for (const auto& c : cols) h.push_back(histogram(c, lo, hi, bins));
  const double w = (hi - lo) / bins;
  for (int b = 0; b < bins + 2; ++b) {
    double a = b == 0 ? -INFINITY : lo + (b - 1) * w;
    double z = b == bins + 1 ? INFINITY : lo + b * w;
    f << fmt(a) << '\t' << fmt(z);
    for (const auto& c : h) f << '\t' << c[static_cast<std::size_t>(b)];
    f << '\n';
  }
  if (!f) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace

json to_json(const EvaluationReport& r) {
  json j{{"contexts", r.contexts},
         {"common_converged", r.common_converged},
         {"baseline_offset", r.baseline_offset},
         {"baseline", report_json(r.baseline)}};
  if (r.gnn) j["gnn"] = report_json(*r.gnn);
  return j;
}

EvaluationReport evaluate(const std::string& ckpt, const std::string& data_dir,
                          const std::string& out_dir, const std::string& split,
                          std::size_t workers, std::optional<double> baseline_offset) {
  Dataset data = open_dataset(data_dir);
  const std::vector<std::size_t>* ids = split == "test"    ? &data.splits.test
                                        : split == "val"   ? &data.splits.val
                                        : split == "train" ? &data.splits.train
                                                           : nullptr;
  if (!ids) throw std::invalid_argument("unknown split " + split);

  EvaluationReport rep;
  SolverOptions solver;
  PolicyConfig pcfg;
  std::optional<Checkpoint> ck;
  std::optional<H2mgNode> net;
  Normalizer norm;
  double offset = 0;
  if (!ckpt.empty()) {
    ck = load_checkpoint(ckpt);
    net.emplace(ck->model);
    norm = Normalizer::from_json(ck->extra.at("normalizer"));
    if (norm.hash() != ck->normalizer_hash)
      throw SchemaError("checkpoint normalizer does not match its hash");
    pcfg = ck->extra.at("policy").get<PolicyConfig>();
    solver = ck->extra.at("solver").get<SolverOptions>();
    offset = ck->extra.at("baseline_offset").get<double>();
  } else if (baseline_offset) {
    offset = *baseline_offset;
  } else {
    auto train = data.load_all(data.splits.train);
    offset = tune_baseline_offset(train, BaselineConfig{}, solver, workers).offset;
  }
  rep.baseline_offset = offset;

  auto raw = data.load_all(*ids);
  rep.contexts = raw.size();
  std::vector<Outcome> base(raw.size()), gnn(ck ? raw.size() : 0);
  parallel_for(raw.size(), workers, [&](std::size_t i) {
    base[i] = run_policy(raw[i], init_baseline(raw[i], offset), solver);
    if (ck) {
      PreparedContext p;
      p.compiled = compile_context(normalize(raw[i], norm));
      p.baseline = base[i].y;
      gnn[i] = run_policy(raw[i], gnn_decision(*net, ck->theta, p, pcfg), solver);
    }
  });

  std::vector<bool> common(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    common[i] = base[i].m.valid && (!ck || gnn[i].m.valid);
    rep.common_converged += common[i];
  }
  rep.baseline = summarize(base, common);
  if (ck) rep.gnn = summarize(gnn, common);

  fs::create_directories(out_dir);
  const fs::path out(out_dir);
  {
    std::ofstream f(out / "report.json");
    f << to_json(rep).dump(2) << '\n';
    if (!f) throw std::runtime_error("cannot write report in " + out_dir);
  }
  std::vector<std::string> names;
  std::vector<const std::vector<Outcome>*> pols;
  if (ck) {
    names.push_back("gnn");
    pols.push_back(&gnn);
  }
  names.push_back("baseline");
  pols.push_back(&base);

  // Per-context table.
  {
    std::ofstream f(out / "contexts.tsv");
    f << "context";
    for (const auto& n : names)
      f << '\t' << n << "_converged\t" << n << "_violations\t" << n << "_overflows\t" << n
        << "_joule_losses\t" << n << "_objective";
    f << '\n';
    for (std::size_t i = 0; i < raw.size(); ++i) {
      f << (*ids)[i];
      for (const auto* p : pols) {
        const auto& m = (*p)[i].m;
        f << '\t' << m.valid << '\t' << m.violations << '\t' << m.overflows << '\t'
          << fmt(m.joule_losses) << '\t' << fmt(m.objective.total);
      }
      f << '\n';
    }
  }
  // Violation counts per context, converged contexts only.
  {
    int top = 0;
    for (const auto* p : pols)
      for (std::size_t i = 0; i < raw.size(); ++i)
        if (common[i]) top = std::max(top, (*p)[i].m.violations);
    std::ofstream f(out / "violations_hist.tsv");
    f << "violations";
    for (const auto& n : names) f << '\t' << n;
    f << '\n';
    for (int v = 0; v <= top; ++v) {
      f << v;
      for (const auto* p : pols) {
        std::size_t c = 0;
        for (std::size_t i = 0; i < raw.size(); ++i)
          if (common[i] && (*p)[i].m.violations == v) ++c;
        f << '\t' << c;
      }
      f << '\n';
    }
  }
  // Normalized voltages and SVR setpoints.
  std::vector<std::vector<double>> volts, setpoints;
  for (const auto* p : pols) {
    std::vector<double> v, s;
    for (std::size_t i = 0; i < raw.size(); ++i) {
      if (!common[i]) continue;
      const auto& o = (*p)[i];
      v.insert(v.end(), o.m.normalized_voltages.begin(), o.m.normalized_voltages.end());
      s.insert(s.end(), o.svr_setpoints.begin(), o.svr_setpoints.end());
    }
    volts.push_back(std::move(v));
    setpoints.push_back(std::move(s));
  }
  write_hist(out / "voltage_hist.tsv", volts, names, -1.0, 2.0, 60);
  write_hist(out / "svr_setpoint_hist.tsv", setpoints, names, 0.9, 1.15, 50);
  {
    std::ofstream f(out / "levers.tsv");
    f << "lever";
    for (const auto& n : names) f << '\t' << n;
    f << '\n';
    std::vector<PolicyReport> reps;
    if (rep.gnn) reps.push_back(*rep.gnn);
    reps.push_back(rep.baseline);
    auto row = [&](const std::string& name, auto get) {
      f << name;
      for (const auto& r : reps) f << '\t' << fmt(get(r));
      f << '\n';
    };
    row("lines_opened_pct", [](const PolicyReport& r) { return r.lines_opened_pct; });
    row("shunts_switched_pct", [](const PolicyReport& r) { return r.shunts_switched_pct; });
    row("svr_setpoint_mean", [](const PolicyReport& r) { return r.svr_setpoint_mean; });
    row("svr_setpoint_std", [](const PolicyReport& r) { return r.svr_setpoint_std; });
    for (int k = 0; k < kRtcCategories; ++k)
      row("rtc_share_" + std::to_string(k),
          [k](const PolicyReport& r) { return r.rtc_category_share[k]; });
  }
  return rep;
}

}  // namespace gridtvc
