#include "hpr/hyperopt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>
#include <optional>
#include <set>
#include <tuple>

#include "hpr/error.hpp"
#include "hpr/parallel.hpp"
#include "hpr/rng.hpp"

namespace hpr {

bool dominates(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("dominates: objective count mismatch");
  bool strictly = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] < b[i]) return false;
    if (a[i] > b[i]) strictly = true;
  }
  return strictly;
}

std::vector<std::size_t> pareto_front(std::span<const Objectives> points) {
  std::vector<std::size_t> front;
  for (std::size_t i = 0; i < points.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < points.size() && !dominated; ++j) {
      dominated = j != i && dominates(points[j], points[i]);
    }
    if (!dominated) front.push_back(i);
  }
  return front;
}

std::vector<std::vector<std::size_t>> nondominated_sort(std::span<const Objectives> points) {
  const std::size_t n = points.size();
  std::vector<std::vector<std::size_t>> dominated_by_me(n);
  std::vector<std::size_t> count(n, 0);
  std::vector<std::vector<std::size_t>> fronts;
  std::vector<std::size_t> current;
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = 0; q < n; ++q) {
      if (p == q) continue;
      if (dominates(points[p], points[q])) {
        dominated_by_me[p].push_back(q);
      } else if (dominates(points[q], points[p])) {
        ++count[p];
      }
    }
    if (count[p] == 0) current.push_back(p);
  }
  while (!current.empty()) {
    std::vector<std::size_t> next;
    for (std::size_t p : current) {
      for (std::size_t q : dominated_by_me[p]) {
        if (--count[q] == 0) next.push_back(q);
      }
    }
    std::sort(next.begin(), next.end());
    fronts.push_back(std::move(current));
    current = std::move(next);
  }
  return fronts;
}

std::vector<double> crowding_distance(std::span<const Objectives> points,
                                      std::span<const std::size_t> front) {
  if (front.empty()) throw InvalidArgument("crowding_distance: empty front");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(front.size(), 0.0);
  if (front.size() <= 2) {
    std::fill(dist.begin(), dist.end(), inf);
    return dist;
  }
  std::vector<std::size_t> order(front.size());
  for (std::size_t m = 0; m < std::tuple_size_v<Objectives>; ++m) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return points[front[a]][m] < points[front[b]][m];
    });
    const double lo = points[front[order.front()]][m];
    const double hi = points[front[order.back()]][m];
    dist[order.front()] = inf;
    dist[order.back()] = inf;
    if (hi == lo) continue;
    for (std::size_t k = 1; k + 1 < order.size(); ++k) {
      const double gap = points[front[order[k + 1]]][m] - points[front[order[k - 1]]][m];
      dist[order[k]] += gap / (hi - lo);
    }
  }
  return dist;
}

namespace {

constexpr std::size_t kBatchSteps = 6;  // 32 * 2^k, k = 0..6

double unit(double v, double lo, double hi) { return std::clamp((v - lo) / (hi - lo), 0.0, 1.0); }

}  // namespace

Genome encode(const Genes& g) {
  using R = SearchRanges;
  const double k = std::log2(static_cast<double>(std::max<std::size_t>(g.batch, 1)) / 32.0);
  return {unit(std::log(g.eta), std::log(R::kEtaMin), std::log(R::kEtaMax)),
          unit(std::log(g.lambda), std::log(R::kLambdaMin), std::log(R::kLambdaMax)),
          unit(g.mu, R::kMuMin, R::kMuMax), std::clamp(k / kBatchSteps, 0.0, 1.0)};
}

Genes decode(const Genome& x) {
  using R = SearchRanges;
  auto log_map = [](double u, double lo, double hi) {
    return std::clamp(std::exp(std::log(lo) + std::clamp(u, 0.0, 1.0) * (std::log(hi) - std::log(lo))),
                      lo, hi);
  };
  Genes g;
  g.eta = log_map(x[0], R::kEtaMin, R::kEtaMax);
  g.lambda = log_map(x[1], R::kLambdaMin, R::kLambdaMax);
  g.mu = std::clamp(R::kMuMin + std::clamp(x[2], 0.0, 1.0) * (R::kMuMax - R::kMuMin), R::kMuMin,
                    R::kMuMax);
  const auto k = static_cast<std::size_t>(std::llround(std::clamp(x[3], 0.0, 1.0) * kBatchSteps));
  g.batch = std::size_t{32} << k;
  return g;
}

void SearchConfig::validate() const {
  if (population < 2 || population % 2 != 0) {
    throw InvalidArgument("search: population must be even and at least 2");
  }
  if (generations < 1) throw InvalidArgument("search: generations must be at least 1");
  if (!(sbx_index >= 0.0) || !(mutation_index >= 0.0)) {
    throw InvalidArgument("search: distribution indices must be >= 0");
  }
  if (!(crossover_prob >= 0.0 && crossover_prob <= 1.0) ||
      !(mutation_prob >= 0.0 && mutation_prob <= 1.0)) {
    throw InvalidArgument("search: probabilities must lie in [0, 1]");
  }
}

namespace {

void sbx(Genome& a, Genome& b, double index, CounterRng& rng) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (rng.uniform() > 0.5) continue;
    if (std::abs(a[i] - b[i]) <= 1e-14) continue;
    const double y1 = std::min(a[i], b[i]), y2 = std::max(a[i], b[i]);
    const double u = rng.uniform();
    auto betaq = [&](double beta) {
      const double alpha = 2.0 - std::pow(beta, -(index + 1.0));
      return u <= 1.0 / alpha ? std::pow(u * alpha, 1.0 / (index + 1.0))
                              : std::pow(1.0 / (2.0 - u * alpha), 1.0 / (index + 1.0));
    };
    const double span = y2 - y1;
    double c1 = 0.5 * ((y1 + y2) - betaq(1.0 + 2.0 * y1 / span) * span);
    double c2 = 0.5 * ((y1 + y2) + betaq(1.0 + 2.0 * (1.0 - y2) / span) * span);
    c1 = std::clamp(c1, 0.0, 1.0);
    c2 = std::clamp(c2, 0.0, 1.0);
    if (rng.uniform() < 0.5) std::swap(c1, c2);
    a[i] = c1;
    b[i] = c2;
  }
}

void polynomial_mutation(Genome& x, double index, double prob, CounterRng& rng) {
  const double power = 1.0 / (index + 1.0);
  for (double& y : x) {
    if (rng.uniform() >= prob) continue;
    const double u = rng.uniform();
    double dq;
    if (u < 0.5) {
      const double val = 2.0 * u + (1.0 - 2.0 * u) * std::pow(1.0 - y, index + 1.0);
      dq = std::pow(val, power) - 1.0;
    } else {
      const double val = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * std::pow(y, index + 1.0);
      dq = 1.0 - std::pow(val, power);
    }
    y = std::clamp(y + dq, 0.0, 1.0);
  }
}

struct Ranked {
  std::vector<std::size_t> rank;
  std::vector<double> crowding;
};

Ranked rank_population(const std::vector<Individual>& all, std::span<const std::size_t> members) {
  std::vector<Objectives> pts;
  for (std::size_t m : members) pts.push_back(all[m].objectives);
  Ranked r{std::vector<std::size_t>(members.size()), std::vector<double>(members.size())};
  const auto fronts = nondominated_sort(pts);
  for (std::size_t f = 0; f < fronts.size(); ++f) {
    const auto cd = crowding_distance(pts, fronts[f]);
    for (std::size_t k = 0; k < fronts[f].size(); ++k) {
      r.rank[fronts[f][k]] = f;
      r.crowding[fronts[f][k]] = cd[k];
    }
  }
  return r;
}

}  // namespace

SearchResult evolve(const SearchConfig& config, const Evaluator& evaluator) {
  config.validate();
  SearchResult result;
  CounterRng rng(derive_key(config.seed, {0x45A2ULL}));
  auto& trials = result.trials;

  auto evaluate = [&](std::size_t first, std::size_t count) {
    parallel_for(count, config.jobs, [&](std::size_t i) {
      Individual& ind = trials[first + i];
      try {
        ind.objectives = evaluator(ind.genes, ind.seed);
      } catch (const std::exception& e) {
        ind.objectives = {0.0, 0.0};
        ind.failed = true;
        ind.error = e.what();
      }
    });
    result.evaluations += count;
  };
  // Settings already in the trace. A clone is mutated again (all genes) so
  // every trial evaluates a new combination; after kMaxRedraws it is kept.
  std::set<std::tuple<double, double, double, std::size_t>> seen;
  auto key = [](const Genes& g) { return std::make_tuple(g.eta, g.lambda, g.mu, g.batch); };
  auto add = [&](Genome genome, std::size_t generation) {
    constexpr int kMaxRedraws = 20;
    for (int k = 0; k < kMaxRedraws && seen.count(key(decode(genome))); ++k) {
      polynomial_mutation(genome, config.mutation_index, 1.0, rng);
    }
    seen.insert(key(decode(genome)));
    Individual ind;
    ind.trial = trials.size();
    ind.generation = generation;
    ind.genome = genome;
    ind.genes = decode(genome);
    ind.seed = derive_key(config.seed, {0x7E1A1ULL, ind.trial});
    trials.push_back(std::move(ind));
  };

  for (std::size_t i = 0; i < config.population; ++i) {
    Genome g{rng.uniform(), rng.uniform(), rng.uniform(),
             static_cast<double>(rng.below(kBatchSteps + 1)) / kBatchSteps};
    add(g, 0);
  }
  evaluate(0, config.population);
  std::vector<std::size_t> population(config.population);
  std::iota(population.begin(), population.end(), 0);

  for (std::size_t gen = 1; gen < config.generations; ++gen) {
    const Ranked ranked = rank_population(trials, population);
    auto tournament = [&]() -> const Individual& {
      const std::size_t a = rng.below(population.size());
      const std::size_t b = rng.below(population.size());
      std::size_t win;
      if (ranked.rank[a] != ranked.rank[b]) {
        win = ranked.rank[a] < ranked.rank[b] ? a : b;
      } else if (ranked.crowding[a] != ranked.crowding[b]) {
        win = ranked.crowding[a] > ranked.crowding[b] ? a : b;
      } else {
        win = std::min(a, b);
      }
      return trials[population[win]];
    };
    const std::size_t first = trials.size();
    while (trials.size() - first < config.population) {
      Genome c1 = tournament().genome;
      Genome c2 = tournament().genome;
      if (rng.uniform() < config.crossover_prob) sbx(c1, c2, config.sbx_index, rng);
      polynomial_mutation(c1, config.mutation_index, config.mutation_prob, rng);
      polynomial_mutation(c2, config.mutation_index, config.mutation_prob, rng);
      add(c1, gen);
      add(c2, gen);
    }
    evaluate(first, config.population);

    // Environmental selection over parents + offspring.
    std::vector<std::size_t> pool = population;
    for (std::size_t i = first; i < trials.size(); ++i) pool.push_back(i);
    const Ranked pr = rank_population(trials, pool);
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (pr.rank[a] != pr.rank[b]) return pr.rank[a] < pr.rank[b];
      if (pr.crowding[a] != pr.crowding[b]) return pr.crowding[a] > pr.crowding[b];
      return pool[a] < pool[b];
    });
    population.clear();
    for (std::size_t k = 0; k < config.population; ++k) population.push_back(pool[order[k]]);
    std::sort(population.begin(), population.end());
  }

  std::vector<std::size_t> all(trials.size());
  std::iota(all.begin(), all.end(), 0);
  const Ranked global = rank_population(trials, all);
  for (std::size_t i = 0; i < trials.size(); ++i) {
    trials[i].rank = global.rank[i];
    trials[i].crowding = global.crowding[i];
    if (global.rank[i] == 0) result.front.push_back(i);
  }
  return result;
}

std::string trace_jsonl(const SearchResult& result) {
  std::string out;
  for (const Individual& t : result.trials) {
    nlohmann::ordered_json j;
    j["trial"] = t.trial;
    j["generation"] = t.generation;
    j["genes"] = {{"eta", t.genes.eta}, {"lambda", t.genes.lambda}, {"mu", t.genes.mu},
                  {"batch", t.genes.batch}};
    j["objectives"] = {{"ca", t.objectives[0]}, {"min_ra", t.objectives[1]}};
    j["rank"] = t.rank;
    j["failed"] = t.failed;
    if (t.failed) j["error"] = t.error;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::string front_csv(const SearchResult& result) {
  std::string out = "trial,generation,eta,lambda,mu,batch,ca,min_ra\n";
  char buf[256];
  for (std::size_t i : result.front) {
    const Individual& t = result.trials[i];
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.10g,%.10g,%.10g,%zu,%.10g,%.10g\n", t.trial,
                  t.generation, t.genes.eta, t.genes.lambda, t.genes.mu, t.genes.batch,
                  t.objectives[0], t.objectives[1]);
    out += buf;
  }
  return out;
}

ObjectiveOutcome objective_eval(const Genes& genes, const ObjectiveContext& ctx,
                                std::uint64_t trial_seed) {
  if (!ctx.train || !ctx.test) throw InvalidArgument("objective_eval: datasets not set");
  if (!ctx.surrogates) throw InvalidArgument("objective_eval: surrogate ensemble not set");
  HyperParams hp;
  hp.eta = genes.eta;
  hp.lambda = genes.lambda;
  hp.mu = genes.mu;
  hp.batch = genes.batch;
  hp.epochs = ctx.epochs;
  hp.patience = ctx.patience;

  ObjectiveOutcome out;
  std::optional<EnsembleModel> target;
  try {
    BuildOptions bo;
    bo.jobs = ctx.jobs;
    target.emplace(build_ensemble(ctx.ensemble, ctx.model, *ctx.train, hp, trial_seed, bo));
  } catch (const NumericError& e) {
    out.failed = true;
    out.error = e.what();
    return out;
  }
  EvalOptions eo;
  eo.seed = derive_key(trial_seed, {0xA77ULL});
  eo.jobs = ctx.jobs;
  eo.rho = ctx.rho;
  eo.square = ctx.square;
  try {
    out.transfer = evaluate_transfer_attack(*target, *ctx.surrogates, *ctx.test, ctx.attack_ids,
                                            ctx.transfer_budget, eo);
    out.query = evaluate_query_attack(*target, *ctx.test, ctx.attack_ids, ctx.query_budget, eo);
  } catch (const NumericError& e) {
    out.failed = true;
    out.error = e.what();
    return out;
  }
  out.report = build_report(*target, *ctx.test, ctx.attack_ids, out.transfer, out.query, ctx.mode);
  out.objectives = {out.report.ca, std::min(out.report.ra_t.value_or(0.0),
                                            out.report.ra_q.value_or(0.0))};
  return out;
}

}  // namespace hpr
