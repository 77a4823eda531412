#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "hpr/attacks.hpp"
#include "hpr/diagnostics.hpp"
#include "hpr/ensemble.hpp"
#include "hpr/trainer.hpp"

namespace hpr {

/// (CA, min(RA_T, RA_Q)), both maximized.
using Objectives = std::array<double, 2>;

/// a is at least as good everywhere and strictly better somewhere.
bool dominates(std::span<const double> a, std::span<const double> b);
inline bool dominates(const Objectives& a, const Objectives& b) {
  return dominates(std::span<const double>(a), std::span<const double>(b));
}

/// Indices (ascending) of points no other point dominates.
std::vector<std::size_t> pareto_front(std::span<const Objectives> points);

/// Fast non-dominated sort. Each front is ascending by index.
std::vector<std::vector<std::size_t>> nondominated_sort(std::span<const Objectives> points);

/// Crowding distance of each member of `front` (aligned with it). Boundary
/// points of every objective get +inf.
std::vector<double> crowding_distance(std::span<const Objectives> points,
                                      std::span<const std::size_t> front);

/// One point of the search space.
struct Genes {
  double eta = 0.1;
  double lambda = 0.0005;
  double mu = 0.9;
  std::size_t batch = 128;

  bool operator==(const Genes&) const = default;
};

/// Unit-cube genome: log-scaled eta and lambda, linear mu, and the batch
/// exponent over {32, ..., 2048} as a continuous gene.
using Genome = std::array<double, 4>;
Genome encode(const Genes& genes);
Genes decode(const Genome& genome);

struct SearchConfig {
  std::size_t population = 20;
  std::size_t generations = 5;
  double crossover_prob = 0.9;
  double sbx_index = 15.0;
  double mutation_index = 20.0;
  double mutation_prob = 0.25;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;

  void validate() const;
};

struct Individual {
  std::size_t trial = 0;
  std::size_t generation = 0;
  std::uint64_t seed = 0;  // passed to the evaluator
  Genome genome{};
  Genes genes;
  Objectives objectives{0.0, 0.0};
  /// Non-domination rank among all evaluated trials.
  std::size_t rank = 0;
  double crowding = 0.0;
  bool failed = false;
  std::string error;
};

/// Maps genes to objectives. Must be deterministic in (genes, trial_seed).
using Evaluator = std::function<Objectives(const Genes& genes, std::uint64_t trial_seed)>;

struct SearchResult {
  std::vector<Individual> trials;  // in trial order
  std::vector<std::size_t> front;  // indices into trials
  std::size_t evaluations = 0;
};

/// NSGA-II with exactly population * generations evaluator calls: the first
/// generation is the random initial population, every later one a full set
/// of offspring followed by (rank, crowding) environmental selection.
SearchResult evolve(const SearchConfig& config, const Evaluator& evaluator);

/// Trace as JSON lines: trial, generation, genes, objectives, rank, failed.
std::string trace_jsonl(const SearchResult& result);
/// trial,generation,eta,lambda,mu,batch,ca,min_ra
std::string front_csv(const SearchResult& result);

/// What objective_eval needs besides the genes.
struct ObjectiveContext {
  const Dataset* train = nullptr;
  const Dataset* test = nullptr;
  std::vector<std::size_t> attack_ids;  // rows of *test
  ModelSpec model;
  EnsembleSpec ensemble;
  const LogitModel* surrogates = nullptr;
  AttackBudget transfer_budget;
  AttackBudget query_budget;
  double rho = -1.0;
  RaMode mode = RaMode::kLiteral;
  std::size_t epochs = 200;
  std::size_t patience = 20;
  SquareOptions square;
  std::size_t jobs = 1;
};

struct ObjectiveOutcome {
  Objectives objectives{0.0, 0.0};
  bool failed = false;
  std::string error;
  RobustnessReport report;
  std::vector<AdvResult> transfer;
  std::vector<AdvResult> query;
};

/// Trains the instantiation with H = genes and runs both attacks. Divergence
/// yields (0, 0) with the failure flag set.
ObjectiveOutcome objective_eval(const Genes& genes, const ObjectiveContext& ctx,
                                std::uint64_t trial_seed);

}  // namespace hpr
