#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hpr/dataset.hpp"
#include "hpr/model.hpp"

namespace hpr {

/// l-infinity threat model. epsilon = 0 is accepted and yields x_adv = x.
struct AttackBudget {
  double epsilon = 8.0 / 255.0;
  std::size_t queries = 500;
  std::size_t steps = 20;

  void validate() const;
  /// alpha = 2 * epsilon / steps.
  double step_size() const { return 2.0 * epsilon / static_cast<double>(steps); }
};

struct AdvResult {
  std::size_t sample_id = 0;
  std::vector<double> x_adv;
  std::vector<double> delta;
  std::size_t queries_used = 0;
  /// The attacked model no longer predicts the true label at x_adv.
  bool success = false;
  /// Margin f_y - max_{k != y} f_k after the initial check and after each
  /// accepted proposal (square attack), or after each step (gradient attacks).
  std::vector<double> margin_trace;
  std::size_t true_label = 0;
  std::size_t clean_label = 0;  // C(x)
  std::size_t adv_label = 0;    // C(x_adv)

  double linf() const;
};

/// True when ||delta||_inf <= epsilon + 1e-12 and x_adv in [0,1]^d, with
/// delta consistent with x_adv - x.
bool satisfies_constraints(const AdvResult& r, std::span<const double> x, double epsilon);

/// f_y - max_{k != y} f_k.
double margin_loss(std::span<const double> logits, std::size_t y);

/// Scalar loss of a [1, d] input; what PGD ascends.
using InputLossFn = std::function<Tensor(const Tensor& x)>;

/// x' <- clip01(Proj_eps(x' + alpha * sign(grad L))) for `steps` iterations,
/// starting at x. Only x_adv, delta and queries_used (= steps) are filled.
AdvResult pgd(const InputLossFn& loss, std::span<const double> x, const AttackBudget& budget);
/// Cross-entropy PGD against `model`; labels and success filled from `model`.
AdvResult pgd(const LogitModel& model, std::span<const double> x, std::size_t y,
              const AttackBudget& budget);

/// MI-FGSM: m <- m + g/||g||_1, x' <- clip01(Proj_eps(x' + alpha * sign(m))).
AdvResult momentum_pgd(const LogitModel& model, std::span<const double> x, std::size_t y,
                       const AttackBudget& budget);

/// Momentum attack on the averaged-logit cross-entropy of `surrogates` with a
/// sharpness-aware inner ascent of radius rho before each gradient. With
/// rho = 0 this is exactly momentum_pgd.
AdvResult transfer_attack(const LogitModel& surrogates, std::span<const double> x, std::size_t y,
                          const AttackBudget& budget, double rho);

/// Score oracle: logits for one input.
using LogitOracle = std::function<std::vector<double>(std::span<const double> x)>;

struct SquareOptions {
  double p_init = 0.8;
  /// Query fractions at which p is halved.
  std::vector<double> milestones = {0.02, 0.10, 0.40, 0.80};
  /// Treat inputs as images for 2-D squares; flat windows otherwise.
  std::optional<ImageShape> image;
};

/// Fraction of coordinates changed per proposal after `query` of `total`.
double square_p(const SquareOptions& options, std::size_t query, std::size_t total);

/// Random-search l-inf attack with square (or contiguous window) updates.
/// Never calls the oracle more than budget.queries times.
AdvResult square_attack(const LogitOracle& oracle, std::span<const double> x, std::size_t y,
                        const AttackBudget& budget, std::uint64_t seed,
                        const SquareOptions& options = {});

enum class AttackFamily { kTransfer, kQuery };
std::string to_string(AttackFamily family);

struct EvalOptions {
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  double rho = -1.0;  // SAM radius; negative means epsilon / 2
  SquareOptions square;
};

/// Query attack against `target` on the listed rows of `data`. Sample ids are
/// the row indices; per-sample randomness is keyed by (seed, id).
std::vector<AdvResult> evaluate_query_attack(const LogitModel& target, const Dataset& data,
                                             std::span<const std::size_t> ids,
                                             const AttackBudget& budget,
                                             const EvalOptions& options = {});

/// Transfer attack crafted on `surrogates` and judged on `target`.
std::vector<AdvResult> evaluate_transfer_attack(const LogitModel& target,
                                                const LogitModel& surrogates, const Dataset& data,
                                                std::span<const std::size_t> ids,
                                                const AttackBudget& budget,
                                                const EvalOptions& options = {});

/// One JSON object per line: sample_id, success, queries, linf, clean_label,
/// adv_label, true_label.
std::string to_jsonl(const std::vector<AdvResult>& results);

}  // namespace hpr
