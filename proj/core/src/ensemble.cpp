#include "hpr/ensemble.hpp"

#include <cmath>
#include <optional>
#include <nlohmann/json.hpp>

#include "hpr/binary_io.hpp"
#include "hpr/parallel.hpp"
#include "hpr/rng.hpp"

namespace hpr {

using nlohmann::json;

std::string to_string(EnsembleKind kind) {
  switch (kind) {
    case EnsembleKind::kCentralized: return "centralized";
    case EnsembleKind::kFull: return "full";
    case EnsembleKind::kIid: return "iid";
    case EnsembleKind::kNonIid: return "non-iid";
  }
  return "?";
}

EnsembleKind parse_ensemble_kind(const std::string& name) {
  if (name == "centralized" || name == "central") return EnsembleKind::kCentralized;
  if (name == "full" || name == "ens-full") return EnsembleKind::kFull;
  if (name == "iid" || name == "ens-iid") return EnsembleKind::kIid;
  if (name == "non-iid" || name == "noniid" || name == "ens-non-iid" || name == "dirichlet") {
    return EnsembleKind::kNonIid;
  }
  throw InvalidArgument("unknown ensemble kind '" + name + "'");
}

void EnsembleSpec::validate() const {
  if (nodes == 0) throw InvalidArgument("ensemble: N must be at least 1");
  if (kind == EnsembleKind::kCentralized && nodes != 1) {
    throw InvalidArgument("ensemble: centralized uses exactly one model");
  }
  if (kind == EnsembleKind::kNonIid && !(alpha > 0.0)) {
    throw InvalidArgument("ensemble: dirichlet alpha must be > 0");
  }
  if (!member_seeds.empty() && member_seeds.size() != nodes) {
    throw InvalidArgument("ensemble: " + std::to_string(member_seeds.size()) +
                          " member seeds given for N=" + std::to_string(nodes));
  }
}

PartitionSpec EnsembleSpec::partition_spec() const {
  PartitionSpec p;
  p.nodes = nodes;
  p.alpha = alpha;
  p.seed = partition_seed;
  switch (kind) {
    case EnsembleKind::kCentralized: p.scheme = PartitionScheme::kCentralized; break;
    case EnsembleKind::kFull: p.scheme = PartitionScheme::kFullReplicated; break;
    case EnsembleKind::kIid: p.scheme = PartitionScheme::kIidDisjoint; break;
    case EnsembleKind::kNonIid: p.scheme = PartitionScheme::kDirichlet; break;
  }
  return p;
}

std::string EnsembleSpec::label() const {
  if (kind == EnsembleKind::kCentralized) return "centralized";
  return to_string(kind) + "-" + std::to_string(nodes);
}

std::uint64_t member_seed(std::uint64_t master_seed, std::size_t index) {
  return derive_key(master_seed, {0xE45EULL, index});
}

EnsembleModel::EnsembleModel(EnsembleSpec spec, std::vector<Classifier> members,
                             std::vector<TrainLog> logs)
    : spec_(std::move(spec)), members_(std::move(members)), logs_(std::move(logs)) {
  if (members_.empty()) throw InvalidArgument("ensemble: no members");
  if (members_.size() != spec_.nodes) {
    throw InvalidArgument("ensemble: spec says N=" + std::to_string(spec_.nodes) + " but " +
                          std::to_string(members_.size()) + " members were given");
  }
  for (const Classifier& m : members_) {
    if (m.input_dims() != members_[0].input_dims() ||
        m.num_classes() != members_[0].num_classes()) {
      throw ShapeError("ensemble: members disagree on input or output dimension");
    }
  }
}

std::size_t EnsembleModel::input_dims() const { return members_[0].input_dims(); }
std::size_t EnsembleModel::num_classes() const { return members_[0].num_classes(); }

Tensor EnsembleModel::logits(const Tensor& x) const {
  Tensor acc = members_[0].logits(x);
  for (std::size_t i = 1; i < members_.size(); ++i) acc = add(acc, members_[i].logits(x));
  if (members_.size() == 1) return acc;
  return scale(acc, 1.0 / static_cast<double>(members_.size()));
}

std::vector<double> EnsembleModel::ens_logits(std::span<const double> x) const {
  if (x.size() != input_dims()) {
    throw ShapeError("ensemble: input has " + std::to_string(x.size()) + " features, expected " +
                     std::to_string(input_dims()));
  }
  NoGradGuard no_grad;
  const Tensor xb = as_batch(x);
  std::vector<double> acc(num_classes(), 0.0);
  for (std::size_t i = 0; i < members_.size(); ++i) {
    const Tensor z = members_[i].logits(xb);
    auto v = z.data();
    for (std::size_t k = 0; k < acc.size(); ++k) {
      if (std::isnan(v[k])) {
        throw NumericError("ensemble: member " + std::to_string(i) + " produced NaN logits");
      }
      acc[k] += v[k];
    }
  }
  for (double& a : acc) a /= static_cast<double>(members_.size());
  return acc;
}

std::size_t EnsembleModel::ens_predict(std::span<const double> x) const {
  const auto z = ens_logits(x);
  return predict_label(z);
}

EnsembleModel build_ensemble(const EnsembleSpec& spec, const ModelSpec& model, const Dataset& data,
                             const HyperParams& hp, std::uint64_t master_seed,
                             const BuildOptions& options) {
  spec.validate();
  hp.validate();
  const std::vector<Dataset> shards = partition(data, spec.partition_spec());

  std::vector<std::uint64_t> seeds = spec.member_seeds;
  if (seeds.empty()) {
    for (std::size_t i = 0; i < spec.nodes; ++i) seeds.push_back(member_seed(master_seed, i));
  }

  std::vector<std::optional<TrainResult>> results(spec.nodes);
  parallel_for(spec.nodes, options.jobs, [&](std::size_t i) {
    try {
      results[i] = train(model, shards[i], hp, seeds[i], options.train);
    } catch (const TrainingDiverged& e) {
      throw TrainingDiverged("member " + std::to_string(i) + ": " + e.what(), e.partial_log());
    } catch (const Error& e) {
      throw Error(e.kind(), "member " + std::to_string(i) + ": " + e.what());
    }
  });

  std::vector<Classifier> members;
  std::vector<TrainLog> logs;
  for (auto& r : results) {
    members.push_back(std::move(r->model));
    logs.push_back(std::move(r->log));
  }
  EnsembleSpec resolved = spec;
  resolved.member_seeds = seeds;
  return EnsembleModel(std::move(resolved), std::move(members), std::move(logs));
}

namespace {

std::string member_file(std::size_t i) { return "member_" + std::to_string(i) + ".rtck"; }

}  // namespace

void save_ensemble(const std::filesystem::path& dir, const EnsembleModel& model) {
  const EnsembleSpec& s = model.spec();
  json j;
  j["kind"] = to_string(s.kind);
  j["nodes"] = s.nodes;
  j["alpha"] = s.alpha;
  j["partition_seed"] = s.partition_seed;
  j["member_seeds"] = s.member_seeds;
  json files = json::array();
  for (std::size_t i = 0; i < model.size(); ++i) {
    save_checkpoint(dir / member_file(i), model.members()[i]);
    files.push_back(member_file(i));
  }
  j["members"] = files;
  io::write_file(dir / "manifest.json", j.dump(2) + "\n");
}

EnsembleModel load_ensemble(const std::filesystem::path& dir) {
  const std::string text = io::read_file(dir / "manifest.json");
  EnsembleSpec s;
  std::vector<std::string> files;
  try {
    const json j = json::parse(text);
    s.kind = parse_ensemble_kind(j.at("kind").get<std::string>());
    s.nodes = j.at("nodes").get<std::size_t>();
    s.alpha = j.at("alpha").get<double>();
    s.partition_seed = j.at("partition_seed").get<std::uint64_t>();
    s.member_seeds = j.at("member_seeds").get<std::vector<std::uint64_t>>();
    files = j.at("members").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("ensemble manifest: ") + e.what());
  }
  if (files.size() != s.nodes) throw FormatError("ensemble manifest: member count mismatch");
  std::vector<Classifier> members;
  for (const auto& f : files) members.push_back(load_checkpoint(dir / f));
  return EnsembleModel(std::move(s), std::move(members));
}

}  // namespace hpr
