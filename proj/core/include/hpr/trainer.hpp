#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hpr/dataset.hpp"
#include "hpr/error.hpp"
#include "hpr/model.hpp"

namespace hpr {

/// SGD hyperparameters H = (eta, lambda, mu, B) plus schedule settings.
struct HyperParams {
  double eta = 0.1;
  double lambda = 0.0005;
  double mu = 0.9;
  std::size_t batch = 128;
  std::size_t epochs = 200;
  std::size_t patience = 20;

  /// Positivity and basic sanity; used by every training entry point.
  void validate() const;
  bool within_search_ranges() const;
  bool operator==(const HyperParams&) const = default;
};

/// Table of admissible values when sampling or ablating H.
struct SearchRanges {
  static constexpr double kEtaMin = 1e-4, kEtaMax = 0.4;
  static constexpr double kLambdaMin = 1e-6, kLambdaMax = 1e-2;
  static constexpr double kMuMin = 0.8, kMuMax = 0.99;
  static constexpr std::size_t kBatchMin = 32, kBatchMax = 2048;
};

struct OptimizerState {
  std::vector<Tensor> velocity;
  std::size_t step = 0;

  static OptimizerState zeros_like(const std::vector<Tensor>& params);
};

/// eta_t = eta_max/2 * (1 + cos(pi * epoch / total_epochs)).
double cosine_eta(double eta_max, std::size_t epoch, std::size_t total_epochs);

/// In-place update on leaf parameters given the mean minibatch gradient:
///   g = grad + lambda * theta;  v = mu * v + g;  theta -= eta_t * v.
/// Throws NumericError naming the step if any gradient entry is non-finite.
void apply_sgd_update(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                      const HyperParams& hp, OptimizerState& state, double eta_t);

using BatchLossFn = std::function<Tensor(const std::vector<Tensor>& params)>;

/// Differentiates `batch_loss` (a mean over the minibatch) at `params` and
/// applies one SGD step. Returns the loss value before the update.
double sgd_step(std::vector<Tensor>& params, const BatchLossFn& batch_loss, const HyperParams& hp,
                OptimizerState& state, double eta_t);

struct EpochRecord {
  std::size_t epoch = 0;
  double eta = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  bool stopped_early = false;
  std::size_t best_epoch = 0;
  double best_val_loss = 0.0;
  std::vector<std::string> warnings;

  /// Columns: epoch,eta_t,train_loss,val_loss,stopped_early.
  std::string to_csv() const;
  bool operator==(const TrainLog&) const = default;
};

struct TrainOptions {
  double val_fraction = 0.2;
  double min_delta = 1e-4;
};

struct TrainResult {
  Classifier model;
  TrainLog log;
};

class TrainingDiverged : public NumericError {
 public:
  TrainingDiverged(const std::string& what, TrainLog partial)
      : NumericError(what), partial_(std::move(partial)) {}
  const TrainLog& partial_log() const noexcept { return partial_; }

 private:
  TrainLog partial_;
};

/// Epoch loop with shuffled minibatches, cosine-annealed learning rate,
/// per-epoch validation on a stratified hold-out and early stopping. Returns
/// the parameters with the lowest validation loss.
TrainResult train(const ModelSpec& spec, const Dataset& data, const HyperParams& hp,
                  std::uint64_t seed, const TrainOptions& options = {});

}  // namespace hpr
