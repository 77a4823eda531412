#include "hpr/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <sstream>

#include "hpr/binary_io.hpp"
#include "hpr/error.hpp"
#include "hpr/parallel.hpp"
#include "hpr/rng.hpp"

namespace hpr {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

std::string Instantiation::label() const {
  if (kind == EnsembleKind::kCentralized) return "centralized";
  return to_string(kind) + "-" + std::to_string(nodes);
}

EnsembleSpec Instantiation::spec(std::uint64_t partition_seed) const {
  EnsembleSpec s;
  s.kind = kind;
  s.nodes = kind == EnsembleKind::kCentralized ? 1 : nodes;
  s.alpha = alpha;
  s.partition_seed = partition_seed;
  return s;
}

ModelSpec ModelSection::spec(std::size_t dims, std::size_t classes) const {
  if (kind == ModelKind::kCnnLite) {
    ModelSpec s = ModelSpec::cnn_lite(image, classes);
    if (s.input_dims != dims) {
      throw InvalidArgument("config: cnn-lite image shape does not match dataset dims");
    }
    return s;
  }
  return ModelSpec::mlp(dims, classes, hidden);
}

void AblationPlan::validate() const {
  static const std::set<std::string> params = {"eta", "lambda", "mu", "batch"};
  if (!params.count(param)) throw InvalidArgument("ablation: unknown parameter '" + param + "'");
  if (values.empty()) throw InvalidArgument("ablation: no values");
  if (repeats < 1) throw InvalidArgument("ablation: repeats must be at least 1");
  for (double v : values) {
    const HyperParams hp = at(v);
    hp.validate();
    if (!hp.within_search_ranges()) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "ablation: %s=%g lies outside the admissible range",
                    param.c_str(), v);
      throw InvalidArgument(buf);
    }
    if (param == "batch" && v != std::floor(v)) {
      throw InvalidArgument("ablation: batch values must be integers");
    }
  }
}

HyperParams AblationPlan::at(double value) const {
  HyperParams hp = defaults;
  if (param == "eta") hp.eta = value;
  else if (param == "lambda") hp.lambda = value;
  else if (param == "mu") hp.mu = value;
  else if (param == "batch") hp.batch = static_cast<std::size_t>(std::llround(value));
  else throw InvalidArgument("ablation: unknown parameter '" + param + "'");
  return hp;
}

void ExperimentConfig::validate() const {
  if (dataset.path.empty()) {
    if (dataset.generator.classes < 2 || dataset.generator.dims < 1 ||
        dataset.generator.per_class < 4) {
      throw InvalidArgument("config: dataset needs >= 2 classes, >= 1 dim, >= 4 per class");
    }
  }
  const double a = dataset.attacker_fraction, t = dataset.test_fraction;
  if (!(a > 0.0) || !(t > 0.0) || !(a + t < 1.0)) {
    throw InvalidArgument("config: attacker and test fractions must be positive and sum below 1");
  }
  if (model.epochs < 1) throw InvalidArgument("config: epochs must be at least 1");
  if (ensembles.empty()) throw InvalidArgument("config: no instantiations");
  attacks.budget.validate();
  if (attacks.samples < 1) throw InvalidArgument("config: attacks.samples must be at least 1");
  ablation.validate();
  search.config.validate();
}

namespace {

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void check_keys(const json& j, const char* section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw FormatError(std::string("config: '") + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) ok = ok || it.key() == k;
    if (!ok) throw FormatError(std::string("config: unknown key '") + it.key() + "' in " + section);
  }
}

Instantiation parse_inst(const json& j) {
  check_keys(j, "instantiation", {"kind", "nodes", "alpha"});
  Instantiation i;
  i.kind = parse_ensemble_kind(j.at("kind").get<std::string>());
  take(j, "nodes", i.nodes);
  take(j, "alpha", i.alpha);
  if (i.kind == EnsembleKind::kCentralized) i.nodes = 1;
  return i;
}

// "ensembles": [{"kind": "iid", "nodes": [3, 5]}] expands to one entry per N.
std::vector<Instantiation> parse_inst_list(const json& j) {
  std::vector<Instantiation> out;
  for (const json& e : j) {
    if (e.contains("nodes") && e.at("nodes").is_array()) {
      for (const json& n : e.at("nodes")) {
        json one = e;
        one["nodes"] = n;
        out.push_back(parse_inst(one));
      }
    } else {
      out.push_back(parse_inst(e));
    }
  }
  return out;
}

ordered_json inst_json(const Instantiation& i) {
  return {{"kind", to_string(i.kind)}, {"nodes", i.nodes}, {"alpha", i.alpha}};
}

ordered_json hp_json(const HyperParams& hp) {
  return {{"eta", hp.eta},       {"lambda", hp.lambda}, {"mu", hp.mu},
          {"batch", hp.batch},   {"epochs", hp.epochs}, {"patience", hp.patience}};
}

HyperParams parse_hp(const json& j) {
  check_keys(j, "hyperparameters", {"eta", "lambda", "mu", "batch", "epochs", "patience"});
  HyperParams hp;
  take(j, "eta", hp.eta);
  take(j, "lambda", hp.lambda);
  take(j, "mu", hp.mu);
  take(j, "batch", hp.batch);
  take(j, "epochs", hp.epochs);
  take(j, "patience", hp.patience);
  return hp;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  ExperimentConfig c;
  try {
    const json j = json::parse(text);
    check_keys(j, "config",
               {"seed", "dataset", "model", "ensembles", "surrogate", "attacks", "ablation",
                "search"});
    take(j, "seed", c.seed);
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      check_keys(d, "dataset",
                 {"classes", "dims", "per_class", "spread", "seed", "name", "path",
                  "attacker_fraction", "test_fraction"});
      auto& g = c.dataset.generator;
      take(d, "classes", g.classes);
      take(d, "dims", g.dims);
      take(d, "per_class", g.per_class);
      take(d, "spread", g.spread);
      take(d, "seed", g.seed);
      take(d, "name", g.name);
      take(d, "path", c.dataset.path);
      take(d, "attacker_fraction", c.dataset.attacker_fraction);
      take(d, "test_fraction", c.dataset.test_fraction);
    }
    if (j.contains("model")) {
      const json& m = j.at("model");
      check_keys(m, "model", {"kind", "hidden", "image", "epochs", "patience", "val_fraction"});
      if (m.contains("kind")) c.model.kind = parse_model_kind(m.at("kind").get<std::string>());
      take(m, "hidden", c.model.hidden);
      if (m.contains("image")) {
        const auto img = m.at("image").get<std::vector<std::size_t>>();
        if (img.size() != 3) throw FormatError("config: model.image must be [height, width, channels]");
        c.model.image = {img[0], img[1], img[2]};
      }
      take(m, "epochs", c.model.epochs);
      take(m, "patience", c.model.patience);
      take(m, "val_fraction", c.model.val_fraction);
    }
    if (j.contains("ensembles")) c.ensembles = parse_inst_list(j.at("ensembles"));
    if (j.contains("surrogate")) c.surrogate = parse_inst(j.at("surrogate"));
    if (j.contains("attacks")) {
      const json& a = j.at("attacks");
      check_keys(a, "attacks", {"epsilon", "queries", "steps", "rho", "samples", "ra_mode"});
      take(a, "epsilon", c.attacks.budget.epsilon);
      take(a, "queries", c.attacks.budget.queries);
      take(a, "steps", c.attacks.budget.steps);
      take(a, "rho", c.attacks.rho);
      take(a, "samples", c.attacks.samples);
      if (a.contains("ra_mode")) c.attacks.mode = parse_ra_mode(a.at("ra_mode").get<std::string>());
    }
    if (j.contains("ablation")) {
      const json& a = j.at("ablation");
      check_keys(a, "ablation", {"param", "values", "repeats", "defaults"});
      take(a, "param", c.ablation.param);
      take(a, "values", c.ablation.values);
      take(a, "repeats", c.ablation.repeats);
      if (a.contains("defaults")) c.ablation.defaults = parse_hp(a.at("defaults"));
    }
    if (j.contains("search")) {
      const json& s = j.at("search");
      check_keys(s, "search",
                 {"population", "generations", "crossover_prob", "sbx_index", "mutation_index",
                  "mutation_prob", "seed", "ensembles"});
      auto& sc = c.search.config;
      take(s, "population", sc.population);
      take(s, "generations", sc.generations);
      take(s, "crossover_prob", sc.crossover_prob);
      take(s, "sbx_index", sc.sbx_index);
      take(s, "mutation_index", sc.mutation_index);
      take(s, "mutation_prob", sc.mutation_prob);
      take(s, "seed", sc.seed);
      if (s.contains("ensembles")) c.search.instantiations = parse_inst_list(s.at("ensembles"));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
  return c;
}

std::string ExperimentConfig::to_json() const {
  ordered_json j;
  j["seed"] = seed;
  const auto& g = dataset.generator;
  j["dataset"] = {{"classes", g.classes},
                  {"dims", g.dims},
                  {"per_class", g.per_class},
                  {"spread", g.spread},
                  {"seed", g.seed},
                  {"name", g.name},
                  {"path", dataset.path},
                  {"attacker_fraction", dataset.attacker_fraction},
                  {"test_fraction", dataset.test_fraction}};
  j["model"] = {{"kind", to_string(model.kind)},
                {"hidden", model.hidden},
                {"image", {model.image.height, model.image.width, model.image.channels}},
                {"epochs", model.epochs},
                {"patience", model.patience},
                {"val_fraction", model.val_fraction}};
  ordered_json ens = ordered_json::array();
  for (const auto& i : ensembles) ens.push_back(inst_json(i));
  j["ensembles"] = ens;
  j["surrogate"] = inst_json(surrogate);
  j["attacks"] = {{"epsilon", attacks.budget.epsilon}, {"queries", attacks.budget.queries},
                  {"steps", attacks.budget.steps},     {"rho", attacks.rho},
                  {"samples", attacks.samples},        {"ra_mode", to_string(attacks.mode)}};
  ordered_json defaults = hp_json(ablation.defaults);
  j["ablation"] = {{"param", ablation.param},
                   {"values", ablation.values},
                   {"repeats", ablation.repeats},
                   {"defaults", defaults}};
  ordered_json sens = ordered_json::array();
  for (const auto& i : search.instantiations) sens.push_back(inst_json(i));
  const auto& sc = search.config;
  j["search"] = {{"population", sc.population},         {"generations", sc.generations},
                 {"crossover_prob", sc.crossover_prob}, {"sbx_index", sc.sbx_index},
                 {"mutation_index", sc.mutation_index}, {"mutation_prob", sc.mutation_prob},
                 {"seed", sc.seed},                     {"ensembles", sens}};
  return j.dump(2) + "\n";
}

ExperimentConfig load_config(const fs::path& path) {
  return ExperimentConfig::from_json(io::read_file(path));
}

DataSplits prepare_data(const ExperimentConfig& config) {
  DataSplits d;
  d.full = config.dataset.path.empty() ? generate(config.dataset.generator)
                                       : load_dataset(config.dataset.path);
  const double t = config.dataset.test_fraction;
  const double a = config.dataset.attacker_fraction / (1.0 - t);
  Split first = split_validation(d.full, t, derive_key(config.seed, {0xD47AULL, 1}));
  Split second = split_validation(first.train, a, derive_key(config.seed, {0xD47AULL, 2}));
  d.test = std::move(first.val);
  d.test.name = d.full.name + "/test";
  d.attacker = std::move(second.val);
  d.attacker.name = d.full.name + "/attacker";
  d.defender = std::move(second.train);
  d.defender.name = d.full.name + "/defender";
  return d;
}

std::vector<std::size_t> attack_sample_ids(const Dataset& test, std::size_t count) {
  std::vector<std::size_t> ids(std::min(count, test.size()));
  std::iota(ids.begin(), ids.end(), 0);
  return ids;
}

EnsembleModel train_surrogates(const ExperimentConfig& config, const DataSplits& data,
                               std::size_t jobs) {
  HyperParams hp;  // Table 1 defaults
  hp.epochs = config.model.epochs;
  hp.patience = config.model.patience;
  BuildOptions bo;
  bo.jobs = jobs;
  bo.train.val_fraction = config.model.val_fraction;
  const std::uint64_t key = derive_key(config.seed, {0x5B7AULL});
  return build_ensemble(config.surrogate.spec(derive_key(key, {1})),
                        config.model.spec(data.full.dims, data.full.num_classes), data.attacker,
                        hp, key, bo);
}

std::string cell_file_name(const CellRecord& c) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%02zu_%s_%s-%02zu_r%02zu.jsonl", c.inst_index,
                c.inst.label().c_str(), c.param.c_str(), c.value_index, c.repeat);
  return buf;
}

namespace {

ordered_json adv_json(const AdvResult& r, const char* family) {
  ordered_json j;
  j["kind"] = family;
  j["sample_id"] = r.sample_id;
  j["success"] = r.success;
  j["queries"] = r.queries_used;
  j["linf"] = r.linf();
  j["clean_label"] = r.clean_label;
  j["adv_label"] = r.adv_label;
  j["true_label"] = r.true_label;
  return j;
}

}  // namespace

std::string cell_jsonl(const CellRecord& c, RaMode mode) {
  ordered_json head;
  head["inst_index"] = c.inst_index;
  head["instantiation"] = c.inst.label();
  head["kind"] = to_string(c.inst.kind);
  head["nodes"] = c.inst.nodes;
  head["alpha"] = c.inst.alpha;
  head["param"] = c.param;
  head["value_index"] = c.value_index;
  head["value"] = c.value;
  head["repeat"] = c.repeat;
  head["hp"] = hp_json(c.hp);
  head["ra_mode"] = to_string(mode);
  head["failed"] = c.failed;
  head["error"] = c.error;
  std::string out = ordered_json{{"cell", head}}.dump() + "\n";
  for (std::size_t i = 0; i < c.sample_ids.size(); ++i) {
    ordered_json j;
    j["kind"] = "clean";
    j["sample_id"] = c.sample_ids[i];
    j["true_label"] = c.labels[i];
    j["pred"] = c.clean_pred[i];
    out += j.dump() + "\n";
  }
  for (const auto& r : c.transfer) out += adv_json(r, "transfer").dump() + "\n";
  for (const auto& r : c.query) out += adv_json(r, "query").dump() + "\n";
  return out;
}

CellSummary summarize_cell(const std::string& jsonl) {
  CellSummary s;
  std::istringstream in(jsonl);
  std::string line;
  RaMode mode = RaMode::kLiteral;
  bool have_head = false;
  std::size_t n_clean = 0, correct = 0, n_t = 0, rob_t = 0, n_q = 0, rob_q = 0;
  try {
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      if (j.contains("cell")) {
        const json& h = j.at("cell");
        s.inst_index = h.at("inst_index").get<std::size_t>();
        s.inst.kind = parse_ensemble_kind(h.at("kind").get<std::string>());
        s.inst.nodes = h.at("nodes").get<std::size_t>();
        s.inst.alpha = h.at("alpha").get<double>();
        s.param = h.at("param").get<std::string>();
        s.value_index = h.at("value_index").get<std::size_t>();
        s.value = h.at("value").get<double>();
        s.repeat = h.at("repeat").get<std::size_t>();
        s.hp = parse_hp(h.at("hp"));
        s.failed = h.at("failed").get<bool>();
        mode = parse_ra_mode(h.at("ra_mode").get<std::string>());
        have_head = true;
        continue;
      }
      const std::string kind = j.at("kind").get<std::string>();
      if (kind == "clean") {
        ++n_clean;
        correct += j.at("pred").get<std::size_t>() == j.at("true_label").get<std::size_t>();
        continue;
      }
      const auto clean = j.at("clean_label").get<std::size_t>();
      const auto adv = j.at("adv_label").get<std::size_t>();
      const auto y = j.at("true_label").get<std::size_t>();
      const bool kept = mode == RaMode::kLiteral ? clean == adv : (clean == y && adv == y);
      if (kind == "transfer") {
        ++n_t;
        rob_t += kept;
      } else {
        ++n_q;
        rob_q += kept;
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("cell artifact: ") + e.what());
  }
  if (!have_head) throw FormatError("cell artifact: missing header line");
  auto frac = [](std::size_t a, std::size_t b) {
    return b ? static_cast<double>(a) / static_cast<double>(b) : 0.0;
  };
  s.ca = frac(correct, n_clean);
  s.ra_t = frac(rob_t, n_t);
  s.ra_q = frac(rob_q, n_q);
  return s;
}

namespace {

struct Stat {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
};

Stat stat(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  s.std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return s;
}

struct Group {
  std::string label;
  EnsembleKind kind;
  std::string nodes;
  std::string param;
  std::size_t value_index = 0;
  double value = 0.0;
  HyperParams hp;
  std::size_t cells = 0, failed = 0;
  std::vector<double> ca, ra_t, ra_q;
};

std::vector<Group> group_cells(std::span<const CellSummary> cells, bool average_nodes) {
  std::vector<Group> groups;
  std::map<std::pair<std::string, std::size_t>, std::size_t> index;
  std::map<std::string, std::set<std::size_t>> nodes_of;
  for (const CellSummary& c : cells) {
    if (average_nodes) nodes_of[to_string(c.inst.kind)].insert(c.inst.nodes);
  }
  for (const CellSummary& c : cells) {
    const std::string label = average_nodes ? to_string(c.inst.kind) : c.inst.label();
    auto key = std::make_pair(label, c.value_index);
    auto it = index.find(key);
    if (it == index.end()) {
      Group g;
      g.label = label;
      g.kind = c.inst.kind;
      if (average_nodes) {
        for (std::size_t n : nodes_of[label]) {
          g.nodes += (g.nodes.empty() ? "" : ";") + std::to_string(n);
        }
      } else {
        g.nodes = std::to_string(c.inst.nodes);
      }
      g.param = c.param;
      g.value_index = c.value_index;
      g.value = c.value;
      g.hp = c.hp;
      it = index.emplace(key, groups.size()).first;
      groups.push_back(std::move(g));
    }
    Group& g = groups[it->second];
    ++g.cells;
    if (c.failed) {
      ++g.failed;
      continue;
    }
    g.ca.push_back(c.ca);
    g.ra_t.push_back(c.ra_t);
    g.ra_q.push_back(c.ra_q);
  }
  return groups;
}

}  // namespace

std::string ablation_table_csv(std::span<const CellSummary> cells, bool average_nodes) {
  std::string out =
      "instantiation,kind,nodes,param,value,eta,lambda,mu,batch,cells,failed,ca_mean,ca_std,"
      "ra_t_mean,ra_t_std,ra_q_mean,ra_q_std\n";
  char buf[512];
  for (const Group& g : group_cells(cells, average_nodes)) {
    const Stat ca = stat(g.ca), rt = stat(g.ra_t), rq = stat(g.ra_q);
    std::snprintf(buf, sizeof buf,
                  "%s,%s,%s,%s,%.10g,%.10g,%.10g,%.10g,%zu,%zu,%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                  g.label.c_str(), to_string(g.kind).c_str(), g.nodes.c_str(), g.param.c_str(),
                  g.value, g.hp.eta, g.hp.lambda, g.hp.mu, g.hp.batch, g.cells, g.failed, ca.mean,
                  ca.std, rt.mean, rt.std, rq.mean, rq.std);
    out += buf;
  }
  return out;
}

std::string ablation_svg(std::span<const CellSummary> cells) {
  const auto groups = group_cells(cells, true);
  std::vector<std::string> kinds;
  std::vector<double> values;
  std::size_t n_values = 0;
  std::string param;
  for (const Group& g : groups) {
    if (std::find(kinds.begin(), kinds.end(), g.label) == kinds.end()) kinds.push_back(g.label);
    n_values = std::max(n_values, g.value_index + 1);
    param = g.param;
  }
  values.assign(n_values, 0.0);
  for (const Group& g : groups) values[g.value_index] = g.value;

  const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  const char* titles[] = {"CA", "RA_T", "RA_Q"};
  const double pw = 260, ph = 200, left = 50, top = 40, gap = 40;
  const double width = left + 3 * pw + 2 * gap + 20, height = top + ph + 90;
  std::string s;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" "
                "font-family=\"sans-serif\" font-size=\"11\">\n",
                width, height);
  s += buf;
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  auto xpos = [&](double ox, std::size_t vi) {
    return n_values > 1 ? ox + pw * static_cast<double>(vi) / static_cast<double>(n_values - 1)
                        : ox + pw / 2;
  };
  for (int panel = 0; panel < 3; ++panel) {
    const double ox = left + panel * (pw + gap);
    std::snprintf(buf, sizeof buf,
                  "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\" fill=\"none\" "
                  "stroke=\"#444\"/>\n<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\" "
                  "font-size=\"13\">%s</text>\n",
                  ox, top, pw, ph, ox + pw / 2, top - 12, titles[panel]);
    s += buf;
    for (int t = 0; t <= 4; ++t) {
      const double y = top + ph - ph * t / 4.0;
      std::snprintf(buf, sizeof buf,
                    "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#ddd\"/>\n"
                    "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"end\">%.2f</text>\n",
                    ox, y, ox + pw, y, ox - 4, y + 4, t / 4.0);
      s += buf;
    }
    for (std::size_t vi = 0; vi < n_values; ++vi) {
      std::snprintf(buf, sizeof buf,
                    "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%g</text>\n",
                    xpos(ox, vi), top + ph + 16, values[vi]);
      s += buf;
    }
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%s</text>\n",
                  ox + pw / 2, top + ph + 34, param.c_str());
    s += buf;
    for (std::size_t k = 0; k < kinds.size(); ++k) {
      std::string pts;
      for (const Group& g : groups) {
        if (g.label != kinds[k]) continue;
        const auto& v = panel == 0 ? g.ca : (panel == 1 ? g.ra_t : g.ra_q);
        const Stat st = stat(v);
        if (!std::isfinite(st.mean)) continue;
        std::snprintf(buf, sizeof buf, "%.1f,%.1f ", xpos(ox, g.value_index),
                      top + ph - ph * std::clamp(st.mean, 0.0, 1.0));
        pts += buf;
      }
      std::snprintf(buf, sizeof buf,
                    "<polyline points=\"%s\" fill=\"none\" stroke=\"%s\" stroke-width=\"2\"/>\n",
                    pts.c_str(), colors[k % 6]);
      s += buf;
    }
  }
  for (std::size_t k = 0; k < kinds.size(); ++k) {
    const double x = left + 140.0 * static_cast<double>(k);
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"%s\" "
                  "stroke-width=\"2\"/>\n<text x=\"%.1f\" y=\"%.1f\">%s</text>\n",
                  x, height - 20, x + 20, height - 20, colors[k % 6], x + 26, height - 16,
                  kinds[k].c_str());
    s += buf;
  }
  s += "</svg>\n";
  return s;
}

AblationResult run_ablation(const ExperimentConfig& config, const fs::path& run_dir,
                            std::size_t jobs) {
  config.validate();
  fs::create_directories(run_dir / "cells");
  io::write_file(run_dir / "config.json", config.to_json());

  const DataSplits data = prepare_data(config);
  const EnsembleModel surrogates = train_surrogates(config, data, jobs);
  save_ensemble(run_dir / "surrogates", surrogates);
  const ModelSpec mspec = config.model.spec(data.full.dims, data.full.num_classes);
  const std::vector<std::size_t> ids = attack_sample_ids(data.test, config.attacks.samples);
  const AblationPlan& plan = config.ablation;

  AblationResult result;
  result.run_dir = run_dir;
  for (std::size_t ii = 0; ii < config.ensembles.size(); ++ii) {
    for (std::size_t vi = 0; vi < plan.values.size(); ++vi) {
      for (std::size_t r = 0; r < plan.repeats; ++r) {
        CellRecord c;
        c.inst_index = ii;
        c.inst = config.ensembles[ii];
        c.param = plan.param;
        c.value_index = vi;
        c.value = plan.values[vi];
        c.repeat = r;
        c.hp = plan.at(c.value);
        c.hp.epochs = config.model.epochs;
        c.hp.patience = config.model.patience;
        result.cells.push_back(std::move(c));
      }
    }
  }

  parallel_for(result.cells.size(), jobs, [&](std::size_t k) {
    CellRecord& c = result.cells[k];
    const std::uint64_t cell_seed = derive_key(config.seed, {0xCE11ULL, c.value_index, c.repeat});
    try {
      BuildOptions bo;
      bo.train.val_fraction = config.model.val_fraction;
      const EnsembleModel target = build_ensemble(c.inst.spec(derive_key(cell_seed, {1})), mspec,
                                                  data.defender, c.hp, cell_seed, bo);
      c.sample_ids = ids;
      for (std::size_t id : ids) {
        c.labels.push_back(data.test.labels[id]);
        c.clean_pred.push_back(target.predict(data.test.row(id)));
      }
      EvalOptions eo;
      eo.seed = derive_key(cell_seed, {2});
      eo.rho = config.attacks.rho;
      c.transfer = evaluate_transfer_attack(target, surrogates, data.test, ids,
                                            config.attacks.budget, eo);
      c.query = evaluate_query_attack(target, data.test, ids, config.attacks.budget, eo);
    } catch (const Error& e) {
      c.failed = true;
      c.error = e.what();
      c.sample_ids.clear();
      c.labels.clear();
      c.clean_pred.clear();
      c.transfer.clear();
      c.query.clear();
    }
  });

  for (const CellRecord& c : result.cells) {
    io::write_file(run_dir / "cells" / cell_file_name(c), cell_jsonl(c, config.attacks.mode));
    for (const auto* family : {&c.transfer, &c.query}) {
      for (const AdvResult& r : *family) {
        ++result.adv_total;
        if (!satisfies_constraints(r, data.test.row(r.sample_id), config.attacks.budget.epsilon)) {
          ++result.violations;
        }
      }
    }
    for (const AdvResult& r : c.query) {
      result.max_queries = std::max(result.max_queries, r.queries_used);
      if (r.queries_used > config.attacks.budget.queries) ++result.violations;
    }
  }
  ordered_json audit;
  audit["adv_results"] = result.adv_total;
  audit["violations"] = result.violations;
  audit["max_queries"] = result.max_queries;
  audit["query_budget"] = config.attacks.budget.queries;
  audit["epsilon"] = config.attacks.budget.epsilon;
  io::write_file(run_dir / "audit.json", audit.dump(2) + "\n");

  write_report(run_dir);
  return result;
}

void write_report(const fs::path& run_dir) {
  const fs::path cells_dir = run_dir / "cells";
  if (!fs::is_directory(cells_dir)) {
    throw InvalidArgument("report: no cells directory under " + run_dir.string());
  }
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(cells_dir)) {
    if (e.path().extension() == ".jsonl") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::map<std::string, std::vector<CellSummary>> by_param;
  for (const auto& f : files) {
    CellSummary s = summarize_cell(io::read_file(f));
    by_param[s.param].push_back(std::move(s));
  }
  for (auto& [param, cells] : by_param) {
    std::stable_sort(cells.begin(), cells.end(), [](const CellSummary& a, const CellSummary& b) {
      return std::tie(a.inst_index, a.value_index, a.repeat) <
             std::tie(b.inst_index, b.value_index, b.repeat);
    });
    io::write_file(run_dir / "tables" / ("ablation_" + param + ".csv"),
                   ablation_table_csv(cells, false));
    io::write_file(run_dir / "tables" / ("ablation_" + param + "_avg_nodes.csv"),
                   ablation_table_csv(cells, true));
    io::write_file(run_dir / "plots" / ("ablation_" + param + ".svg"), ablation_svg(cells));
  }
}

std::size_t best_trial(const SearchResult& result) {
  if (result.front.empty()) throw InvalidArgument("best_trial: empty front");
  std::size_t best = result.front.front();
  for (std::size_t i : result.front) {
    const auto& a = result.trials[i].objectives;
    const auto& b = result.trials[best].objectives;
    if (a[1] > b[1] || (a[1] == b[1] && a[0] > b[0])) best = i;
  }
  return best;
}

namespace {

std::string front_plot_svg(const std::vector<InstantiationSearch>& runs) {
  const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  const double left = 60, top = 30, w = 360, h = 300;
  std::string s;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" "
                "font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"100%%\" "
                "height=\"100%%\" fill=\"white\"/>\n<rect x=\"%.0f\" y=\"%.0f\" width=\"%.0f\" "
                "height=\"%.0f\" fill=\"none\" stroke=\"#444\"/>\n",
                left + w + 180, top + h + 50, left, top, w, h);
  s += buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%.0f\" y=\"%.0f\" text-anchor=\"middle\">CA</text>\n<text x=\"%.0f\" "
                "y=\"%.0f\" text-anchor=\"middle\" transform=\"rotate(-90 %.0f %.0f)\">"
                "min(RA_T, RA_Q)</text>\n",
                left + w / 2, top + h + 36, left - 40, top + h / 2, left - 40, top + h / 2);
  s += buf;
  for (std::size_t k = 0; k < runs.size(); ++k) {
    const auto& res = runs[k].result;
    for (const auto& t : res.trials) {
      std::snprintf(buf, sizeof buf,
                    "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"2.5\" fill=\"%s\" opacity=\"0.35\"/>\n",
                    left + w * t.objectives[0], top + h - h * t.objectives[1], colors[k % 6]);
      s += buf;
    }
    std::vector<std::size_t> front = res.front;
    std::sort(front.begin(), front.end(), [&](std::size_t a, std::size_t b) {
      return res.trials[a].objectives[0] < res.trials[b].objectives[0];
    });
    std::string pts;
    for (std::size_t i : front) {
      std::snprintf(buf, sizeof buf, "%.1f,%.1f ", left + w * res.trials[i].objectives[0],
                    top + h - h * res.trials[i].objectives[1]);
      pts += buf;
    }
    std::snprintf(buf, sizeof buf,
                  "<polyline points=\"%s\" fill=\"none\" stroke=\"%s\" stroke-width=\"2\"/>\n"
                  "<text x=\"%.0f\" y=\"%.0f\" fill=\"%s\">%s</text>\n",
                  pts.c_str(), colors[k % 6], left + w + 20, top + 20 + 18.0 * k, colors[k % 6],
                  runs[k].inst.label().c_str());
    s += buf;
  }
  s += "</svg>\n";
  return s;
}

}  // namespace

SearchRun run_search(const ExperimentConfig& config, const fs::path& run_dir, std::size_t jobs) {
  config.validate();
  fs::create_directories(run_dir);
  io::write_file(run_dir / "config.json", config.to_json());
  const DataSplits data = prepare_data(config);
  const EnsembleModel surrogates = train_surrogates(config, data, jobs);
  const ModelSpec mspec = config.model.spec(data.full.dims, data.full.num_classes);

  SearchRun run;
  run.run_dir = run_dir;
  std::string fronts = "instantiation,trial,generation,eta,lambda,mu,batch,ca,min_ra\n";
  std::string best = "instantiation,trial,eta,lambda,mu,batch,ca,ra_t,ra_q,min_ra\n";
  char buf[512];
  for (std::size_t ii = 0; ii < config.search.instantiations.size(); ++ii) {
    const Instantiation& inst = config.search.instantiations[ii];
    ObjectiveContext ctx;
    ctx.train = &data.defender;
    ctx.test = &data.test;
    ctx.attack_ids = attack_sample_ids(data.test, config.attacks.samples);
    ctx.model = mspec;
    ctx.ensemble = inst.spec(derive_key(config.seed, {0x5EA2ULL, ii}));
    ctx.surrogates = &surrogates;
    ctx.transfer_budget = config.attacks.budget;
    ctx.query_budget = config.attacks.budget;
    ctx.rho = config.attacks.rho;
    ctx.mode = config.attacks.mode;
    ctx.epochs = config.model.epochs;
    ctx.patience = config.model.patience;

    std::mutex mu;
    std::map<std::uint64_t, RobustnessReport> reports;
    SearchConfig sc = config.search.config;
    sc.seed = derive_key(config.seed, {0x5EA3ULL, sc.seed, ii});
    sc.jobs = jobs;
    InstantiationSearch is;
    is.inst = inst;
    is.result = evolve(sc, [&](const Genes& g, std::uint64_t seed) {
      ObjectiveOutcome o = objective_eval(g, ctx, seed);
      if (o.failed) throw NumericError(o.error);
      std::lock_guard lock(mu);
      reports[seed] = o.report;
      return o.objectives;
    });
    for (const Individual& t : is.result.trials) {
      auto it = reports.find(t.seed);
      is.reports.push_back(it == reports.end() ? RobustnessReport{} : it->second);
    }

    const fs::path dir = run_dir / "search" / inst.label();
    io::write_file(dir / "trace.jsonl", trace_jsonl(is.result));
    io::write_file(dir / "front.csv", front_csv(is.result));
    for (std::size_t i : is.result.front) {
      const Individual& t = is.result.trials[i];
      std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.10g,%.10g,%.10g,%zu,%.10g,%.10g\n",
                    inst.label().c_str(), t.trial, t.generation, t.genes.eta, t.genes.lambda,
                    t.genes.mu, t.genes.batch, t.objectives[0], t.objectives[1]);
      fronts += buf;
    }
    const std::size_t b = best_trial(is.result);
    const Individual& t = is.result.trials[b];
    const RobustnessReport& rep = is.reports[b];
    std::snprintf(buf, sizeof buf, "%s,%zu,%.10g,%.10g,%.10g,%zu,%.10g,%.10g,%.10g,%.10g\n",
                  inst.label().c_str(), t.trial, t.genes.eta, t.genes.lambda, t.genes.mu,
                  t.genes.batch, t.objectives[0], rep.ra_t.value_or(0.0), rep.ra_q.value_or(0.0),
                  t.objectives[1]);
    best += buf;
    run.runs.push_back(std::move(is));
  }
  io::write_file(run_dir / "tables" / "search_fronts.csv", fronts);
  io::write_file(run_dir / "tables" / "search_best.csv", best);
  io::write_file(run_dir / "plots" / "search_fronts.svg", front_plot_svg(run.runs));
  return run;
}

}  // namespace hpr
