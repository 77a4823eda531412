// hpr: command-line front end for training, attacking, diagnosing and
// sweeping hyperparameters of ensemble classifiers.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "hpr/attacks.hpp"
#include "hpr/binary_io.hpp"
#include "hpr/diagnostics.hpp"
#include "hpr/ensemble.hpp"
#include "hpr/error.hpp"
#include "hpr/experiment.hpp"
#include "hpr/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t jobs = 1;
  std::optional<double> epsilon, rho;
  std::optional<std::size_t> queries, steps, samples, epochs;
  std::string ra_mode;
};

std::string timestamp_dir() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[64];
  std::strftime(buf, sizeof buf, "runs/%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

hpr::ExperimentConfig make_config(const Globals& g) {
  hpr::ExperimentConfig c;
  if (!g.config.empty()) c = hpr::load_config(g.config);
  if (g.seed) c.seed = *g.seed;
  if (g.epsilon) c.attacks.budget.epsilon = *g.epsilon;
  if (g.rho) c.attacks.rho = *g.rho;
  if (g.queries) c.attacks.budget.queries = *g.queries;
  if (g.steps) c.attacks.budget.steps = *g.steps;
  if (g.samples) c.attacks.samples = *g.samples;
  if (g.epochs) c.model.epochs = *g.epochs;
  if (!g.ra_mode.empty()) c.attacks.mode = hpr::parse_ra_mode(g.ra_mode);
  return c;
}

fs::path out_dir(const Globals& g) {
  const fs::path p = g.out.empty() ? fs::path(timestamp_dir()) : fs::path(g.out);
  fs::create_directories(p);
  return p;
}

hpr::Instantiation parse_label(const std::string& label) {
  hpr::Instantiation inst;
  const auto dash = label.find_last_of('-');
  if (dash != std::string::npos && dash + 1 < label.size() &&
      label.find_first_not_of("0123456789", dash + 1) == std::string::npos) {
    inst.kind = hpr::parse_ensemble_kind(label.substr(0, dash));
    inst.nodes = std::stoul(label.substr(dash + 1));
  } else {
    inst.kind = hpr::parse_ensemble_kind(label);
  }
  if (inst.kind == hpr::EnsembleKind::kCentralized) inst.nodes = 1;
  return inst;
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw hpr::InvalidArgument("--values: cannot parse '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw hpr::InvalidArgument("--values: empty list");
  return out;
}

void say(const std::string& line) { std::cout << line << std::endl; }

// --- subcommands ---------------------------------------------------------

int cmd_gen_data(const Globals& g) {
  const hpr::ExperimentConfig c = make_config(g);
  const fs::path dir = out_dir(g);
  hpr::GeneratorConfig gc = c.dataset.generator;
  if (g.seed) gc.seed = *g.seed;
  const hpr::Dataset ds = hpr::generate(gc);
  hpr::save_dataset(dir / "dataset.bin", ds);
  say("wrote " + (dir / "dataset.bin").string() + " (" + std::to_string(ds.size()) + " rows)");
  return 0;
}

struct TrainArgs {
  std::string inst;
  std::optional<double> eta, lambda, mu;
  std::optional<std::size_t> batch;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  const hpr::ExperimentConfig c = make_config(g);
  c.validate();
  const fs::path dir = out_dir(g);
  const hpr::DataSplits data = hpr::prepare_data(c);
  const hpr::Instantiation inst = a.inst.empty() ? c.ensembles.front() : parse_label(a.inst);
  hpr::HyperParams hp = c.ablation.defaults;
  if (a.eta) hp.eta = *a.eta;
  if (a.lambda) hp.lambda = *a.lambda;
  if (a.mu) hp.mu = *a.mu;
  if (a.batch) hp.batch = *a.batch;
  hp.epochs = c.model.epochs;
  hp.patience = c.model.patience;
  hp.validate();
  hpr::BuildOptions bo;
  bo.jobs = g.jobs;
  bo.train.val_fraction = c.model.val_fraction;
  const std::uint64_t key = hpr::derive_key(c.seed, {0x7EA1ULL});
  const hpr::EnsembleModel model =
      hpr::build_ensemble(inst.spec(hpr::derive_key(key, {1})),
                          c.model.spec(data.full.dims, data.full.num_classes), data.defender, hp,
                          key, bo);
  hpr::save_ensemble(dir / "model", model);
  for (std::size_t i = 0; i < model.size(); ++i) {
    hpr::io::write_file(dir / ("train_log_" + std::to_string(i) + ".csv"),
                        model.train_logs()[i].to_csv());
  }
  const auto ids = hpr::attack_sample_ids(data.test, data.test.size());
  char buf[128];
  std::snprintf(buf, sizeof buf, "%s trained, test accuracy %.4f", model.spec().label().c_str(),
                hpr::clean_accuracy(model, data.test, ids));
  say(buf);
  return 0;
}

struct AttackArgs {
  std::string model;
  std::string surrogates;
  std::string family = "both";
};

int cmd_attack(const Globals& g, const AttackArgs& a) {
  const hpr::ExperimentConfig c = make_config(g);
  c.validate();
  const fs::path dir = out_dir(g);
  const hpr::DataSplits data = hpr::prepare_data(c);
  const hpr::EnsembleModel target = hpr::load_ensemble(a.model);
  const auto ids = hpr::attack_sample_ids(data.test, c.attacks.samples);
  hpr::EvalOptions eo;
  eo.seed = hpr::derive_key(c.seed, {0xA7ULL});
  eo.jobs = g.jobs;
  eo.rho = c.attacks.rho;
  std::vector<hpr::AdvResult> transfer, query;
  if (a.family == "transfer" || a.family == "both") {
    const hpr::EnsembleModel sur = a.surrogates.empty() ? hpr::train_surrogates(c, data, g.jobs)
                                                        : hpr::load_ensemble(a.surrogates);
    transfer = hpr::evaluate_transfer_attack(target, sur, data.test, ids, c.attacks.budget, eo);
    hpr::io::write_file(dir / "adv_transfer.jsonl", hpr::to_jsonl(transfer));
  }
  if (a.family == "query" || a.family == "both") {
    query = hpr::evaluate_query_attack(target, data.test, ids, c.attacks.budget, eo);
    hpr::io::write_file(dir / "adv_query.jsonl", hpr::to_jsonl(query));
  }
  const auto report = hpr::build_report(target, data.test, ids, transfer, query, c.attacks.mode);
  const std::string json = hpr::to_json(report);
  hpr::io::write_file(dir / "report.json", json);
  say(json);
  return 0;
}

struct DiagnoseArgs {
  std::string model;
  std::string surrogates;
};

int cmd_diagnose(const Globals& g, const DiagnoseArgs& a) {
  const hpr::ExperimentConfig c = make_config(g);
  c.validate();
  const fs::path dir = out_dir(g);
  const hpr::DataSplits data = hpr::prepare_data(c);
  const hpr::EnsembleModel model = hpr::load_ensemble(a.model);
  const auto ids = hpr::attack_sample_ids(data.test, c.attacks.samples);
  hpr::PowerOptions po;
  po.seed = hpr::derive_key(c.seed, {0xD1A6ULL});

  ordered_json out;
  const hpr::SmoothnessEstimate smooth = hpr::input_smoothness(model, data.test, ids, po);
  hpr::io::write_file(dir / "smoothness.csv", hpr::to_csv(smooth));
  out["smoothness"] = ordered_json::parse(hpr::to_json(smooth));
  ordered_json sharp = ordered_json::array();
  for (std::size_t i = 0; i < model.size(); ++i) {
    ordered_json m;
    m["member"] = i;
    try {
      const hpr::PowerResult r = hpr::param_sharpness(model.members()[i], data.defender, po);
      m["sharpness"] = r.magnitude();
      m["iterations"] = r.iterations;
    } catch (const hpr::NumericError& e) {
      m["sharpness"] = nullptr;
      m["error"] = e.what();
    }
    sharp.push_back(m);
  }
  out["param_sharpness"] = sharp;
  if (!a.surrogates.empty()) {
    const hpr::EnsembleModel sur = hpr::load_ensemble(a.surrogates);
    const double radius = c.attacks.budget.epsilon * std::sqrt(static_cast<double>(data.full.dims));
    const hpr::BoundInputs in = hpr::estimate_bound_inputs(sur, model, data.test, ids, radius, po);
    out["transfer_bound"] = ordered_json::parse(hpr::to_json(in, hpr::transfer_bound(in)));
  }
  const std::string text = out.dump(2) + "\n";
  hpr::io::write_file(dir / "diagnostics.json", text);
  std::cout << text;
  return 0;
}

struct AblateArgs {
  std::string param;
  std::string values;
  std::optional<std::size_t> repeats;
  std::vector<std::string> ensembles;
};

int cmd_ablate(const Globals& g, const AblateArgs& a) {
  hpr::ExperimentConfig c = make_config(g);
  if (!a.param.empty()) c.ablation.param = a.param;
  if (!a.values.empty()) c.ablation.values = parse_values(a.values);
  if (a.repeats) c.ablation.repeats = *a.repeats;
  if (!a.ensembles.empty()) {
    c.ensembles.clear();
    for (const auto& e : a.ensembles) c.ensembles.push_back(parse_label(e));
  }
  const hpr::AblationResult r = hpr::run_ablation(c, out_dir(g), g.jobs);
  std::size_t failed = 0;
  for (const auto& cell : r.cells) failed += cell.failed;
  say("cells " + std::to_string(r.cells.size()) + ", failed " + std::to_string(failed) +
      ", adversarial results " + std::to_string(r.adv_total) + ", constraint violations " +
      std::to_string(r.violations));
  say("tables in " + (r.run_dir / "tables").string());
  return 0;
}

struct SearchArgs {
  std::optional<std::size_t> population, generations;
  std::vector<std::string> ensembles;
};

int cmd_search(const Globals& g, const SearchArgs& a) {
  hpr::ExperimentConfig c = make_config(g);
  if (a.population) c.search.config.population = *a.population;
  if (a.generations) c.search.config.generations = *a.generations;
  if (!a.ensembles.empty()) {
    c.search.instantiations.clear();
    for (const auto& e : a.ensembles) c.search.instantiations.push_back(parse_label(e));
  }
  const hpr::SearchRun run = hpr::run_search(c, out_dir(g), g.jobs);
  for (const auto& s : run.runs) {
    say(s.inst.label() + ": " + std::to_string(s.result.evaluations) + " evaluations, front size " +
        std::to_string(s.result.front.size()));
  }
  return 0;
}

int cmd_report(const std::string& run) {
  hpr::write_report(run);
  say("tables regenerated in " + (fs::path(run) / "tables").string());
  return 0;
}

int fail(const std::string& kind, const std::string& message) {
  ordered_json j;
  j["error"] = kind;
  j["message"] = message;
  std::cerr << j.dump() << std::endl;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hyperparameter robustness experiments for ensemble classifiers", "hpr"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config, "JSON experiment config")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Master seed (overrides the config)");
  app.add_option("--out", g.out, "Output directory (default runs/<timestamp>)");
  app.add_option("--jobs", g.jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--epsilon", g.epsilon, "l-inf attack budget");
  app.add_option("--queries", g.queries, "Query budget of the square attack");
  app.add_option("--steps", g.steps, "Transfer attack iterations");
  app.add_option("--rho", g.rho, "SAM radius of the transfer attack (negative: epsilon/2)");
  app.add_option("--samples", g.samples, "Attacked test samples");
  app.add_option("--epochs", g.epochs, "Training epochs");
  app.add_option("--ra-mode", g.ra_mode, "literal or conditioned")
      ->check(CLI::IsMember({"literal", "conditioned"}));

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train one instantiation on the defender split");
  train->add_option("--instantiation", ta.inst, "centralized, full-N, iid-N or non-iid-N");
  train->add_option("--eta", ta.eta);
  train->add_option("--lambda", ta.lambda);
  train->add_option("--mu", ta.mu);
  train->add_option("--batch", ta.batch);

  AttackArgs aa;
  auto* attack = app.add_subcommand("attack", "Attack a trained model");
  attack->add_option("--model", aa.model, "Model directory from `train`")
      ->required()
      ->check(CLI::ExistingDirectory);
  attack->add_option("--surrogates", aa.surrogates, "Surrogate ensemble directory")
      ->check(CLI::ExistingDirectory);
  attack->add_option("--family", aa.family)->check(CLI::IsMember({"transfer", "query", "both"}));

  DiagnoseArgs da;
  auto* diagnose = app.add_subcommand("diagnose", "Curvature and bound diagnostics");
  diagnose->add_option("--model", da.model)->required()->check(CLI::ExistingDirectory);
  diagnose->add_option("--surrogates", da.surrogates)->check(CLI::ExistingDirectory);

  AblateArgs ab;
  auto* ablate = app.add_subcommand("ablate", "One-parameter ablation");
  ablate->add_option("--param", ab.param)->check(CLI::IsMember({"eta", "lambda", "mu", "batch"}));
  ablate->add_option("--values", ab.values, "Comma-separated values");
  ablate->add_option("--repeats", ab.repeats)->check(CLI::PositiveNumber);
  ablate->add_option("--ensemble", ab.ensembles, "Instantiation label, repeatable");

  SearchArgs sa;
  auto* search = app.add_subcommand("search", "NSGA-II hyperparameter search");
  search->add_option("--population", sa.population);
  search->add_option("--generations", sa.generations);
  search->add_option("--ensemble", sa.ensembles, "Instantiation label, repeatable");

  std::string run;
  auto* report = app.add_subcommand("report", "Rebuild tables and plots of an ablation run");
  report->add_option("--run", run, "Run directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(g);
    if (*train) return cmd_train(g, ta);
    if (*attack) return cmd_attack(g, aa);
    if (*diagnose) return cmd_diagnose(g, da);
    if (*ablate) return cmd_ablate(g, ab);
    if (*search) return cmd_search(g, sa);
    if (*report) return cmd_report(run);
  } catch (const hpr::Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
  return 2;
}
