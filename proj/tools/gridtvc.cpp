// gridtvc command line.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gridtvc/gridgen.hpp"
#include "gridtvc/h2mg.hpp"
#include "gridtvc/powerflow.hpp"
#include "gridtvc/trainer.hpp"

using namespace gridtvc;
using nlohmann::json;

namespace {

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return json::parse(in);
}

json objective_json(const ObjectiveBreakdown& o) {
  return {{"f_v", o.f_v}, {"f_i", o.f_i}, {"f_j", o.f_j}, {"total", o.total},
          {"converged", o.converged}};
}

int cmd_pf(const std::string& grid_path, const std::string& decision_path) {
  H2MGContext x = load_context(grid_path);
  SolverOptions opts;
  H2MGContext g = x;
  if (!decision_path.empty()) {
    Decision y = decision_from_json(read_json(decision_path));
    g = apply_decision(x, y, opts);
  }
  PowerFlowSolution sol = solve_ac(g, opts);
  Metrics m = metrics_from_solution(g, sol, opts);
  json out{{"converged", sol.converged},
           {"failure", sol.failure},
           {"inner_iterations", sol.inner_iterations},
           {"outer_loops", sol.outer_loops},
           {"max_mismatch", sol.max_mismatch},
           {"objective", objective_json(m.objective)}};
  if (sol.converged) {
    out["metrics"] = {{"over_voltages", m.over_voltages},
                      {"under_voltages", m.under_voltages},
                      {"violations", m.violations},
                      {"overflows", m.overflows},
                      {"joule_losses", m.joule_losses}};
    json buses = json::object();
    const auto& bs = g.of(cls::bus);
    for (std::size_t i = 0; i < bs.size(); ++i)
      buses[bs[i].id] = {{"V", sol.v[i]}, {"theta", sol.theta[i]}};
    out["buses"] = buses;
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

void print_report(const EvaluationReport& r) {
  std::cout << to_json(r).dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Topology and voltage control on synthetic grids"};
  app.require_subcommand(1);
  std::size_t workers = 1;
  app.add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);

  std::string spec_path, out, data, grid, decision, config, ckpt, split = "test";
  std::size_t count = 0;
  std::uint64_t seed = 1;
  int knots = 101;
  std::optional<double> offset;

  auto* gen = app.add_subcommand("gridgen", "Generate a dataset of contexts");
  gen->add_option("--spec", spec_path, "Family spec (JSON)")->required();
  gen->add_option("--count", count, "Number of contexts")->required();
  gen->add_option("--seed", seed, "Dataset seed")->required();
  gen->add_option("--out", out, "Output folder")->required();
  std::vector<std::size_t> split_sizes;
  gen->add_option("--split", split_sizes, "Train, val and test sizes (default 80/10/10)")
      ->expected(3);

  auto* fit = app.add_subcommand("fit-norm", "Fit the input normalizer on the train split");
  fit->add_option("--data", data, "Dataset folder")->required();
  fit->add_option("--knots", knots, "Knots per feature")->check(CLI::Range(2, 100000));
  fit->add_option("--out", out, "Normalizer file")->required();

  auto* pf = app.add_subcommand("pf", "Solve a grid, optionally after a decision");
  pf->add_option("--grid", grid, "Grid file")->required();
  pf->add_option("--decision", decision, "Decision file");

  auto* tr = app.add_subcommand("train", "Train a policy");
  tr->add_option("--config", config, "Training config (JSON)")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint against the baseline");
  ev->add_option("--ckpt", ckpt, "Checkpoint")->required();
  ev->add_option("--data", data, "Dataset folder")->required();
  ev->add_option("--out", out, "Report folder")->required();
  ev->add_option("--split", split, "Split")->check(CLI::IsMember({"train", "val", "test"}));

  auto* bl = app.add_subcommand("baseline", "Evaluate the Init baseline");
  bl->add_option("--data", data, "Dataset folder")->required();
  bl->add_option("--out", out, "Report folder")->required();
  bl->add_option("--split", split, "Split")->check(CLI::IsMember({"train", "val", "test"}));
  bl->add_option("--offset", offset, "Fixed SVR offset, tuned on train when omitted");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      std::optional<std::array<std::size_t, 3>> sizes;
      if (!split_sizes.empty()) sizes = {split_sizes[0], split_sizes[1], split_sizes[2]};
      generate_dataset(load_spec(spec_path), count, seed, out, sizes, workers);
    } else if (*fit) {
      Dataset d = open_dataset(data);
      save_normalizer(fit_normalizer(d.load_all(d.splits.train), knots), out);
    } else if (*pf) {
      return cmd_pf(grid, decision);
    } else if (*tr) {
      TrainConfig c = load_train_config(config);
      if (app.count("--workers")) c.workers = workers;
      TrainResult r = train(c);
      std::cout << json{{"best_checkpoint", r.best_checkpoint},
                        {"last_checkpoint", r.last_checkpoint},
                        {"best_iteration", r.best_iteration},
                        {"best_validation", r.best_validation},
                        {"baseline_offset", r.baseline_offset}}
                       .dump(2)
                << '\n';
    } else if (*ev) {
      print_report(evaluate(ckpt, data, out, split, workers));
    } else if (*bl) {
      print_report(evaluate("", data, out, split, workers, offset));
    }
  } catch (const SchemaError& e) {
    std::fprintf(stderr, "gridtvc: schema error: %s\n", e.what());
    return 3;
  } catch (const PairingError& e) {
    std::fprintf(stderr, "gridtvc: pairing error: %s\n", e.what());
    return 4;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "gridtvc: invalid input: %s\n", e.what());
    return 2;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "gridtvc: malformed document: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "gridtvc: runtime error: %s\n", e.what());
    return 1;
  }
  return 0;
}
