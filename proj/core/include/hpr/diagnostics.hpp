#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hpr/attacks.hpp"
#include "hpr/dataset.hpp"
#include "hpr/model.hpp"

namespace hpr {

double clean_accuracy(const LogitModel& model, const Dataset& data,
                      std::span<const std::size_t> ids);

/// How robust accuracy counts a pair (x, x').
///   kLiteral:     C(x) = C(x'), regardless of the true label.
///   kConditioned: C(x) = y and C(x') = y.
enum class RaMode { kLiteral, kConditioned };
std::string to_string(RaMode mode);
RaMode parse_ra_mode(const std::string& name);

/// Robust accuracy from recorded labels. Empty input gives 0.
double robust_accuracy(std::span<const AdvResult> results, RaMode mode = RaMode::kLiteral);

struct AdvPair {
  std::vector<double> x;
  std::vector<double> x_adv;
  std::size_t label = 0;
};
/// Re-predicts both members of every pair with `model`.
double robust_accuracy(const LogitModel& model, std::span<const AdvPair> pairs,
                       RaMode mode = RaMode::kLiteral);

/// 1 iff F(x) = y, G(x) = y, F(x') != y and G(x') != y.
int transfer_indicator(const LogitModel& f, const LogitModel& g, std::span<const double> x,
                       std::size_t y, std::span<const double> x_adv);

/// Result of power iteration for the largest-magnitude eigenvalue.
struct PowerResult {
  double eigenvalue = 0.0;  // signed Rayleigh quotient
  std::vector<double> eigenvector;
  std::size_t iterations = 0;
  double residual = 0.0;  // ||Hv - lambda v|| for the returned unit v
  bool converged = false;

  double magnitude() const { return eigenvalue < 0 ? -eigenvalue : eigenvalue; }
};

using HvpFn = std::function<std::vector<double>(std::span<const double> v)>;

/// Power iteration on a symmetric operator given by Hessian-vector products.
/// Converged once successive Rayleigh quotients differ by less than
/// tol * |lambda| and the residual is at most sqrt(tol) * |lambda|. Restarts from a fresh random vector if an iterate collapses
/// to zero.
PowerResult power_iteration(const HvpFn& hvp_fn, std::size_t n, double tol, std::size_t max_iters,
                            std::uint64_t seed);

struct PowerOptions {
  double tol = 1e-6;
  std::size_t max_iters = 500;
  std::uint64_t seed = 0;
};

struct SmoothnessEstimate {
  std::vector<std::size_t> sample_ids;
  std::vector<double> eigenvalues;  // |lambda| per sample
  std::vector<double> residuals;
  std::vector<bool> converged;
  double mean = 0.0;  // over converged samples
  double max = 0.0;   // over converged samples
  std::size_t flagged = 0;
};

/// Largest |eigenvalue| of the input Hessian of the cross-entropy, per sample.
SmoothnessEstimate input_smoothness(const LogitModel& model, const Dataset& data,
                                    std::span<const std::size_t> ids,
                                    const PowerOptions& options = {});

/// Largest |eigenvalue| of the Hessian of `loss` w.r.t. `params`. Throws a
/// NumericError carrying the residual if power iteration does not converge.
PowerResult param_sharpness(const MultiLossFn& loss, const std::vector<Tensor>& params,
                            const PowerOptions& options = {});
/// Same, for the mean cross-entropy of `model` on all of `data`.
PowerResult param_sharpness(const Classifier& model, const Dataset& data,
                            const PowerOptions& options = {});

struct SimilarityStats {
  std::vector<std::size_t> sample_ids;
  std::vector<double> values;
  std::vector<bool> zero_gradient;
  double mean = 0.0;
  double max = -1.0;
};

/// Cosine similarity of input gradients of the two models' cross-entropy.
SimilarityStats gradient_similarity(const LogitModel& f, const LogitModel& g, const Dataset& data,
                                    std::span<const std::size_t> ids);

struct BoundInputs {
  double xi_f = 0.0, xi_g = 0.0;
  double b_f = 0.0, b_g = 0.0;
  double lmin_f = 0.0, lmin_g = 0.0;
  double sigma_f = 0.0, sigma_g = 0.0;
  double s_bar = 0.0;
  double epsilon = 0.0;  // radius of the l2 ball the bound is stated for

  void validate() const;
};

struct BoundResult {
  bool vacuous = false;
  double denom_f = 0.0, denom_g = 0.0;
  double raw = 0.0;      // sum of both terms, meaningful only when not vacuous
  double clamped = 0.0;  // raw clamped to [0, 1]
};

/// xi/(Lmin - eps*B*(1 + sqrt((1 + S)/2)) - sigma*eps^2) summed over F and G.
BoundResult transfer_bound(const BoundInputs& in);

/// Plugs sample estimates into BoundInputs: xi is the mean cross-entropy, B
/// the max input-gradient norm, Lmin the min wrong-label loss, sigma the max
/// input-Hessian eigenvalue and S the max gradient cosine. `l2_radius` is
/// stored as epsilon.
BoundInputs estimate_bound_inputs(const LogitModel& f, const LogitModel& g, const Dataset& data,
                                  std::span<const std::size_t> ids, double l2_radius,
                                  const PowerOptions& options = {});

struct QueryBounds {
  double lower = 0.0;
  double upper = 0.0;
  bool upper_infinite = false;
  double gap = 0.0;  // c = t - L(x, y)
  double grad_norm = 0.0;
  double sigma = 0.0;
};

/// l2 bounds on the perturbation needed to push the loss from L(x, y) up to
/// `threshold`: c/|g| - 2 sigma c^2/|g|^3 <= |delta| <= c/(g.u).
QueryBounds query_bounds(const InputLossFn& loss, std::span<const double> x, double threshold,
                         const PowerOptions& options = {});
QueryBounds query_bounds(const LogitModel& model, std::span<const double> x, std::size_t y,
                         double threshold, const PowerOptions& options = {});

struct RobustnessReport {
  std::size_t n_clean = 0, correct = 0;
  std::size_t n_transfer = 0, robust_transfer = 0;
  std::size_t n_query = 0, robust_query = 0;
  double ca = 0.0;
  std::optional<double> ra_t, ra_q, asr_t, asr_q;
  RaMode mode = RaMode::kLiteral;
};

/// Aggregates counts; an attack family with no results is left absent.
RobustnessReport build_report(const LogitModel& target, const Dataset& data,
                              std::span<const std::size_t> ids,
                              std::span<const AdvResult> transfer,
                              std::span<const AdvResult> query, RaMode mode = RaMode::kLiteral);

/// Spearman rank correlation with average ranks for ties. NaN when either
/// side is constant.
double spearman(std::span<const double> a, std::span<const double> b);

std::string to_json(const RobustnessReport& report);
std::string to_json(const SmoothnessEstimate& estimate);
std::string to_json(const SimilarityStats& stats);
std::string to_json(const BoundInputs& inputs, const BoundResult& bound);
/// sample_id,eigenvalue,residual,converged
std::string to_csv(const SmoothnessEstimate& estimate);

}  // namespace hpr
