#include "hpr/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <numeric>

#include "hpr/rng.hpp"

namespace hpr {

void HyperParams::validate() const {
  if (!(eta > 0.0) || !std::isfinite(eta)) throw InvalidArgument("hyperparams: eta must be > 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw InvalidArgument("hyperparams: lambda must be >= 0");
  }
  if (!(mu >= 0.0 && mu < 1.0)) throw InvalidArgument("hyperparams: mu must lie in [0, 1)");
  if (batch == 0) throw InvalidArgument("hyperparams: batch must be positive");
  if (epochs == 0) throw InvalidArgument("hyperparams: epochs must be positive");
}

bool HyperParams::within_search_ranges() const {
  using R = SearchRanges;
  return eta >= R::kEtaMin && eta <= R::kEtaMax && lambda >= R::kLambdaMin &&
         lambda <= R::kLambdaMax && mu >= R::kMuMin && mu <= R::kMuMax && batch >= R::kBatchMin &&
         batch <= R::kBatchMax;
}

OptimizerState OptimizerState::zeros_like(const std::vector<Tensor>& params) {
  OptimizerState s;
  for (const Tensor& p : params) s.velocity.push_back(Tensor::zeros(p.shape()));
  return s;
}

double cosine_eta(double eta_max, std::size_t epoch, std::size_t total_epochs) {
  if (total_epochs == 0 || epoch > total_epochs) {
    throw InvalidArgument("cosine_eta: epoch must lie in [0, total_epochs]");
  }
  const double frac = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return 0.5 * eta_max * (1.0 + std::cos(std::numbers::pi * frac));
}

void apply_sgd_update(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                      const HyperParams& hp, OptimizerState& state, double eta_t) {
  if (!(eta_t > 0.0)) throw InvalidArgument("sgd_step: eta_t must be positive");
  if (grads.size() != params.size()) throw ShapeError("sgd_step: gradient count mismatch");
  if (state.velocity.empty()) state = OptimizerState::zeros_like(params);
  if (state.velocity.size() != params.size()) throw ShapeError("sgd_step: velocity count mismatch");

  for (std::size_t i = 0; i < params.size(); ++i) {
    for (double g : grads[i].data()) {
      if (!std::isfinite(g)) {
        throw NumericError("sgd_step: non-finite gradient at step " + std::to_string(state.step));
      }
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].mutable_data();
    auto v = state.velocity[i].mutable_data();
    auto g = grads[i].data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gt = g[j] + hp.lambda * theta[j];
      v[j] = hp.mu * v[j] + gt;
      theta[j] -= eta_t * v[j];
    }
  }
  ++state.step;
}

double sgd_step(std::vector<Tensor>& params, const BatchLossFn& batch_loss, const HyperParams& hp,
                OptimizerState& state, double eta_t) {
  std::vector<Tensor> grads;
  double value = 0.0;
  {
    EnableGradGuard enable;
    for (Tensor& p : params) p.set_requires_grad(true);
    Tensor loss = batch_loss(params);
    value = loss.item();
    grads = grad(loss, params, false);
  }
  apply_sgd_update(params, grads, hp, state, eta_t);
  return value;
}

std::string TrainLog::to_csv() const {
  std::string out = "epoch,eta_t,train_loss,val_loss,stopped_early\n";
  char buf[160];
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto& e = epochs[i];
    const int flag = (stopped_early && i + 1 == epochs.size()) ? 1 : 0;
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%d\n", e.epoch, e.eta, e.train_loss,
                  e.val_loss, flag);
    out += buf;
  }
  return out;
}

namespace {

// Stratified split that keeps singleton classes in the training part, for
// small shards where a class may occur only once.
Split lenient_split(const Dataset& data, double fraction, std::uint64_t seed) {
  auto counts = data.class_counts();
  std::vector<std::size_t> keep, singles;
  for (std::size_t i = 0; i < data.size(); ++i) {
    (counts[data.labels[i]] >= 2 ? keep : singles).push_back(i);
  }
  if (singles.empty()) return split_validation(data, fraction, seed);
  Dataset multi = data.subset(keep);
  Split s = split_validation(multi, fraction, seed);
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i : s.train_indices) train_idx.push_back(keep[i]);
  for (std::size_t i : s.val_indices) val_idx.push_back(keep[i]);
  train_idx.insert(train_idx.end(), singles.begin(), singles.end());
  std::sort(train_idx.begin(), train_idx.end());
  Split out;
  out.train_indices = train_idx;
  out.val_indices = val_idx;
  out.train = data.subset(train_idx, data.name + "/train");
  out.val = data.subset(val_idx, data.name + "/val");
  return out;
}

}  // namespace

TrainResult train(const ModelSpec& spec, const Dataset& data, const HyperParams& hp,
                  std::uint64_t seed, const TrainOptions& options) {
  hp.validate();
  spec.validate();
  if (data.dims != spec.input_dims) {
    throw ShapeError("train: dataset has " + std::to_string(data.dims) + " features, model expects " +
                     std::to_string(spec.input_dims));
  }
  if (data.size() < 2) throw InvalidArgument("train: need at least two samples");

  Split split = lenient_split(data, options.val_fraction, derive_key(seed, {0x7A11ULL}));
  if (split.val.empty() || split.train.empty()) {
    throw InvalidArgument("train: validation split left an empty part");
  }

  TrainLog log;
  std::size_t batch = hp.batch;
  if (batch > split.train.size()) {
    batch = split.train.size();
    log.warnings.push_back("batch size " + std::to_string(hp.batch) + " clamped to " +
                           std::to_string(batch) + " training samples");
  }

  Classifier model = Classifier::initialize(spec, seed);
  std::vector<Tensor> params = model.mutable_params().tensors();
  OptimizerState state = OptimizerState::zeros_like(params);
  ModelParams best = model.params().clone();
  double best_checkpoint = std::numeric_limits<double>::infinity();
  double reference = std::numeric_limits<double>::infinity();
  std::size_t wait = 0;

  const Tensor val_x = split.val.inputs();
  std::vector<std::size_t> order(split.train.size());

  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    const double eta_t = cosine_eta(hp.eta, epoch, hp.epochs);
    std::iota(order.begin(), order.end(), 0);
    CounterRng rng(derive_key(seed, {0x5EFFULL, epoch}));
    std::shuffle(order.begin(), order.end(), rng);

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t len = std::min(batch, order.size() - start);
      std::span<const std::size_t> idx(order.data() + start, len);
      const Tensor xb = split.train.gather(idx);
      const std::vector<std::size_t> yb = split.train.gather_labels(idx);
      double value = 0.0;
      try {
        value = sgd_step(
            params,
            [&](const std::vector<Tensor>& p) {
              return softmax_cross_entropy(forward(spec, p, xb), yb);
            },
            hp, state, eta_t);
      } catch (const NumericError& e) {
        throw TrainingDiverged(std::string("train: ") + e.what(), log);
      }
      if (!std::isfinite(value)) {
        throw TrainingDiverged("train: non-finite training loss at epoch " + std::to_string(epoch),
                               log);
      }
      loss_sum += value * static_cast<double>(len);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.eta = eta_t;
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    {
      NoGradGuard no_grad;
      rec.val_loss = softmax_cross_entropy(forward(spec, params, val_x), split.val.labels).item();
    }
    log.epochs.push_back(rec);
    if (!std::isfinite(rec.val_loss)) {
      throw TrainingDiverged("train: non-finite validation loss at epoch " + std::to_string(epoch),
                             log);
    }

    if (rec.val_loss < best_checkpoint) {
      best_checkpoint = rec.val_loss;
      log.best_epoch = epoch;
      for (std::size_t i = 0; i < params.size(); ++i) {
        best.entries[i].value = params[i].detach();
      }
    }
    if (rec.val_loss < reference - options.min_delta) {
      reference = rec.val_loss;
      wait = 0;
    } else if (++wait >= std::max<std::size_t>(hp.patience, 1)) {
      log.stopped_early = true;
      break;
    }
  }
  log.best_val_loss = best_checkpoint;
  return {Classifier(spec, std::move(best)), std::move(log)};
}

}  // namespace hpr
