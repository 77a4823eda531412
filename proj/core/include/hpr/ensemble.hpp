#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hpr/dataset.hpp"
#include "hpr/model.hpp"
#include "hpr/trainer.hpp"

namespace hpr {

/// The four ML instantiations: one centralized model, a deep ensemble on the
/// full data with distinct initialisations, and distributed ensembles on
/// IID or Dirichlet non-IID shards.
enum class EnsembleKind { kCentralized, kFull, kIid, kNonIid };

std::string to_string(EnsembleKind kind);
EnsembleKind parse_ensemble_kind(const std::string& name);

struct EnsembleSpec {
  EnsembleKind kind = EnsembleKind::kCentralized;
  std::size_t nodes = 1;
  double alpha = 0.9;
  std::uint64_t partition_seed = 0;
  /// Explicit member seeds; when empty they are derived from the master seed.
  std::vector<std::uint64_t> member_seeds;

  void validate() const;
  PartitionSpec partition_spec() const;
  /// "centralized", "full-3", "iid-5", "non-iid-3", ...
  std::string label() const;
};

/// Seed used for member `index` when no explicit seeds are given.
std::uint64_t member_seed(std::uint64_t master_seed, std::size_t index);

/// Logit-averaging ensemble. Immutable after construction.
class EnsembleModel final : public LogitModel {
 public:
  EnsembleModel(EnsembleSpec spec, std::vector<Classifier> members,
                std::vector<TrainLog> logs = {});

  std::size_t input_dims() const override;
  std::size_t num_classes() const override;
  /// Mean of member logits, summed in member order. Differentiable in x.
  Tensor logits(const Tensor& x) const override;

  /// Averaged logits for one input; NaN member logits raise a NumericError
  /// naming the member.
  std::vector<double> ens_logits(std::span<const double> x) const;
  std::size_t ens_predict(std::span<const double> x) const;

  const EnsembleSpec& spec() const noexcept { return spec_; }
  const std::vector<Classifier>& members() const noexcept { return members_; }
  const std::vector<TrainLog>& train_logs() const noexcept { return logs_; }
  std::size_t size() const noexcept { return members_.size(); }

 private:
  EnsembleSpec spec_;
  std::vector<Classifier> members_;
  std::vector<TrainLog> logs_;
};

struct BuildOptions {
  std::size_t jobs = 1;
  TrainOptions train;
};

/// Trains every member independently: centralized/full on the whole dataset
/// with distinct seeds, iid/non-iid on their partition shard.
EnsembleModel build_ensemble(const EnsembleSpec& spec, const ModelSpec& model,
                             const Dataset& data, const HyperParams& hp,
                             std::uint64_t master_seed, const BuildOptions& options = {});

/// Directory layout: manifest.json plus member_<i>.rtck per member.
void save_ensemble(const std::filesystem::path& dir, const EnsembleModel& model);
EnsembleModel load_ensemble(const std::filesystem::path& dir);

}  // namespace hpr
