// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   hpr_acceptance <path to hpr> <desk config> <scratch dir>

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "hpr/attacks.hpp"
#include "hpr/diagnostics.hpp"
#include "hpr/ensemble.hpp"
#include "hpr/error.hpp"
#include "hpr/experiment.hpp"
#include "hpr/hyperopt.hpp"
#include "hpr/rng.hpp"
#include "hpr/trainer.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace hpr;

namespace {

// Tolerances and sizes, pinned.
constexpr double kGradTol = 1e-4;
constexpr double kHvpTol = 1e-3;
constexpr double kAutodiffSeconds = 60.0;
constexpr std::size_t kAutodiffPoints = 100;
constexpr double kSgdTol = 1e-12;
constexpr double kEigenTol = 1e-3;
constexpr std::size_t kEigenModels = 50;
constexpr std::size_t kFuzzCases = 1000;
constexpr std::size_t kFuzzMaxPoints = 200;
constexpr double kGeneTol = 0.05;
constexpr std::size_t kQueryBudget = 500;
constexpr double kNearSuccess = 0.95;
constexpr std::size_t kLinearCases = 200;  // per side of the margin threshold
constexpr std::size_t kSharpnessSeeds = 3;
constexpr std::size_t kBoundPairs = 5;
constexpr std::size_t kBoundSamples = 200;
constexpr std::size_t kSearchEvaluations = 100;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[1024];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int run_cli(const std::string& hpr, const std::string& args, const fs::path& log) {
  const std::string cmd = hpr + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Average ranks, then Pearson on the ranks.
double spearman_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

std::vector<double> flatten(const std::vector<Tensor>& ts) {
  std::vector<double> out;
  for (const Tensor& t : ts) {
    const auto v = t.to_vector();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

std::vector<Tensor> unflatten_like(const std::vector<Tensor>& like, const std::vector<double>& v) {
  std::vector<Tensor> out;
  std::size_t k = 0;
  for (const Tensor& t : like) {
    std::vector<double> part(v.begin() + k, v.begin() + k + t.numel());
    k += t.numel();
    out.push_back(Tensor::from(t.shape(), part));
  }
  return out;
}

// 1. Input and parameter gradients and Hessian-vector products of the
// cross-entropy against finite differences of a plain-double mirror.
Outcome autodiff() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 gen(101);
  std::uniform_int_distribution<std::size_t> dim(2, 8), width(2, 8), cls(2, 5), layers(1, 2);
  std::normal_distribution<double> nd(0.0, 1.0);
  double wg = 0, wh = 0;
  for (std::size_t k = 0; k < kAutodiffPoints; ++k) {
    const std::size_t d = dim(gen), c = cls(gen);
    std::vector<std::size_t> hidden(layers(gen));
    for (auto& h : hidden) h = width(gen);
    const auto model = oracle::random_mlp(d, hidden, c, 9000 + k);
    const auto m = oracle::mirror(model);
    std::vector<double> x(d), v(d);
    for (double& e : x) e = nd(gen);
    for (double& e : v) e = nd(gen);
    const std::vector<std::size_t> lab{k % c};

    // input space
    LossFn f = [&](const Tensor& t) { return model.loss(t, lab); };
    const Tensor px = Tensor::from({1, d}, x);
    auto plain = [&](std::span<const double> p) { return oracle::loss(m, p, lab[0]); };
    wg = std::max(wg, oracle::rel_err(gradient(f, px).to_vector(),
                                      oracle::fd_gradient(plain, x, 1e-6)));
    wh = std::max(wh, oracle::rel_err(hvp(f, px, Tensor::from({1, d}, v)).to_vector(),
                                      oracle::fd_hvp(plain, x, v, 1e-4)));

    // parameter space
    const ModelSpec& spec = model.spec();
    MultiLossFn pf = [&](const std::vector<Tensor>& p) {
      return softmax_cross_entropy(forward(spec, p, px), lab);
    };
    std::vector<Tensor> params = model.params().clone().tensors();
    for (Tensor& p : params) p.set_requires_grad(true);
    const auto g = flatten(grad(pf(params), params));
    const auto flat = m.flat();
    std::vector<double> u(flat.size());
    for (double& e : u) e = nd(gen);
    const auto h = flatten(hvp(pf, model.params().tensors(), unflatten_like(params, u)));
    auto pplain = [&](std::span<const double> p) { return oracle::loss(m.with_flat(p), x, lab[0]); };
    wg = std::max(wg, oracle::rel_err(g, oracle::fd_gradient(pplain, flat, 1e-6)));
    wh = std::max(wh, oracle::rel_err(h, oracle::fd_hvp(pplain, flat, u, 1e-4)));
  }
  const double secs = seconds_since(t0);
  return {wg < kGradTol && wh < kHvpTol && secs < kAutodiffSeconds,
          fmt("%zu points; max rel err grad %.2e (< %.0e), hvp %.2e (< %.0e); %.1f s (< %.0f s)",
              kAutodiffPoints, wg, kGradTol, wh, kHvpTol, secs, kAutodiffSeconds)};
}

// 2. Two SGD steps on L = 0.5 sum a_i t_i^2 against the hand recursion.
Outcome sgd_exactness() {
  HyperParams hp;
  hp.eta = 0.1;
  hp.lambda = 0.5;
  hp.mu = 0.9;
  const std::vector<double> a{2.0, -0.7, 3.5, 0.01}, t0{1.0, -2.0, 0.25, 7.0};
  std::vector<Tensor> params{Tensor::from({4}, t0)};
  OptimizerState state;
  const Tensor at = Tensor::from({4}, a);
  auto loss = [&](const std::vector<Tensor>& p) {
    return scale(sum(mul(at, mul(p[0], p[0]))), 0.5);
  };
  sgd_step(params, loss, hp, state, hp.eta);
  sgd_step(params, loss, hp, state, hp.eta);
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double t = t0[i], v = 0.0;
    for (int k = 0; k < 2; ++k) {
      const double g = a[i] * t + hp.lambda * t;
      v = hp.mu * v + g;
      t -= hp.eta * v;
    }
    worst = std::max({worst, std::abs(params[0][i] - t), std::abs(state.velocity[0][i] - v)});
  }
  return {worst <= kSgdTol, fmt("max |diff| %.2e (<= %.0e)", worst, kSgdTol)};
}

Dataset random_rows(std::size_t d, std::size_t n, std::size_t classes, std::uint64_t seed) {
  GeneratorConfig g;
  g.classes = classes;
  g.dims = d;
  g.per_class = n;
  g.seed = seed;
  return generate(g);
}

// 3. Power-iteration eigenvalues against dense eigendecompositions.
Outcome eigen_oracle() {
  std::mt19937_64 gen(303);
  std::uniform_int_distribution<std::size_t> dim(2, 16);
  // Parameter-space shapes with at most 16 parameters: (dims, hidden, classes).
  const std::vector<std::tuple<std::size_t, std::vector<std::size_t>, std::size_t>> shapes{
      {2, {2}, 3}, {2, {2}, 2}, {3, {2}, 2}, {4, {2}, 2}, {4, {}, 3}, {7, {}, 2}, {5, {}, 2}};
  double w_in = 0, w_par = 0;
  std::size_t failures = 0;
  PowerOptions po;  // library defaults: tol 1e-6, 500 iterations
  for (std::size_t k = 0; k < kEigenModels; ++k) {
    po.seed = k;
    const std::size_t d = dim(gen);
    const Dataset ds = random_rows(d, 4, 3, 500 + k);
    const auto model = oracle::random_mlp(d, {6}, 3, 600 + k, 2.0);
    const auto m = oracle::mirror(model);
    const std::vector<std::size_t> ids{0, 5, 10};
    const auto est = input_smoothness(model, ds, ids, po);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const double want = oracle::top_abs_eigenvalue(
          oracle::input_hessian(m, ds.row(ids[i]), ds.labels[ids[i]]));
      if (!est.converged[i]) ++failures;
      w_in = std::max(w_in, std::abs(est.eigenvalues[i] - want) / std::max(want, 1e-12));
    }

    const auto& [pd, hidden, pc] = shapes[k % shapes.size()];
    const Dataset pds = random_rows(pd, 3, pc, 700 + k);
    const auto pm = oracle::random_mlp(pd, hidden, pc, 800 + k, 1.5);
    const auto pmm = oracle::mirror(pm);
    oracle::ScalarFn f = [&](std::span<const double> p) {
      return oracle::mean_loss(pmm.with_flat(p), pds);
    };
    const double want = oracle::top_abs_eigenvalue(oracle::fd_hessian(f, pmm.flat(), 1e-4));
    try {
      const double got = param_sharpness(pm, pds, po).magnitude();
      w_par = std::max(w_par, std::abs(got - want) / std::max(want, 1e-12));
    } catch (const NumericError&) {
      ++failures;
    }
  }
  return {w_in < kEigenTol && w_par < kEigenTol && failures == 0,
          fmt("%zu models; max rel err input %.2e, param %.2e (< %.0e); non-converged %zu",
              kEigenModels, w_in, w_par, kEigenTol, failures)};
}

// 4. Sorting, fronts and crowding against brute force and hand values, plus
// the analytic bi-objective toy.
Outcome nsga_machinery() {
  std::mt19937_64 gen(404);
  std::uniform_int_distribution<std::size_t> count(1, kFuzzMaxPoints);
  std::uniform_int_distribution<int> grid(0, 15);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t mismatches = 0;
  for (std::size_t t = 0; t < kFuzzCases; ++t) {
    std::vector<Objectives> pts(count(gen));
    const bool coarse = t % 2 == 0;
    for (auto& p : pts) p = coarse ? Objectives{grid(gen) / 15.0, grid(gen) / 15.0}
                                   : Objectives{u(gen), u(gen)};
    const std::vector<oracle::Point> ref(pts.begin(), pts.end());
    if (pareto_front(pts) != oracle::brute_front(ref)) ++mismatches;
    if (nondominated_sort(pts) != oracle::peel_fronts(ref)) ++mismatches;
  }

  // (0,1) (0.25,0.8) (0.5,0.4) (1,0): interior distances 0.5+0.6 and 0.75+0.8.
  const std::vector<Objectives> fx{{0.5, 0.4}, {0.0, 1.0}, {1.0, 0.0}, {0.25, 0.8}};
  const auto cd = crowding_distance(fx, std::vector<std::size_t>{0, 1, 2, 3});
  const bool crowd_ok = std::isinf(cd[1]) && std::isinf(cd[2]) &&
                        std::abs(cd[3] - 1.1) < 1e-12 && std::abs(cd[0] - 1.55) < 1e-12;

  const double a = 0.3, b = 0.7;
  Evaluator toy = [&](const Genes& g, std::uint64_t) {
    const double x = encode(g)[0];
    return Objectives{-(x - a) * (x - a), -(x - b) * (x - b)};
  };
  SearchConfig sc;
  sc.seed = 11;
  const SearchResult r = evolve(sc, toy);
  double lo = 1, hi = 0;
  bool inside = true;
  for (std::size_t i : r.front) {
    const double x = r.trials[i].genome[0];
    inside = inside && x >= a - kGeneTol && x <= b + kGeneTol;
    lo = std::min(lo, x);
    hi = std::max(hi, x);
  }
  const bool toy_ok = inside && lo <= a + kGeneTol && hi >= b - kGeneTol;
  return {mismatches == 0 && crowd_ok && toy_ok,
          fmt("%zu fuzz cases, %zu mismatches; crowding %s; toy front x in [%.3f, %.3f] "
              "vs [%.1f, %.1f] +- %.2f",
              kFuzzCases, mismatches, crowd_ok ? "ok" : "wrong", lo, hi, a, b, kGeneTol)};
}

struct AblationRun {
  ExperimentConfig config;
  DataSplits data;
  AblationResult result;
};

// 5. Every AdvResult of the ablation run re-checked against the clean input.
Outcome constraint_audit(const AblationRun& run) {
  const double eps = run.config.attacks.budget.epsilon;
  std::size_t total = 0, bad = 0, over = 0, max_q = 0, failed = 0;
  for (const CellRecord& c : run.result.cells) {
    failed += c.failed;
    auto check = [&](const AdvResult& r) {
      ++total;
      const auto x = run.data.test.row(r.sample_id);
      bool ok = r.x_adv.size() == x.size() && r.delta.size() == x.size();
      for (std::size_t i = 0; ok && i < x.size(); ++i) {
        const double dx = r.x_adv[i] - x[i];
        ok = std::abs(dx) <= eps + 1e-12 && r.x_adv[i] >= 0.0 && r.x_adv[i] <= 1.0;
      }
      bad += !ok;
    };
    for (const auto& r : c.transfer) check(r);
    for (const auto& r : c.query) {
      check(r);
      max_q = std::max(max_q, r.queries_used);
      over += r.queries_used > kQueryBudget;
    }
  }
  const std::size_t expected = run.result.cells.size() * 2 * run.config.attacks.samples;
  return {bad == 0 && over == 0 && total == expected && failed == 0 && total > 0,
          fmt("%zu/%zu results checked, %zu constraint violations, max queries %zu (<= %zu), "
              "%zu failed cells",
              total, expected, bad, max_q, kQueryBudget, failed)};
}

// 6. Two-class linear model: success is possible iff the clean margin is
// below eps * ||w0 - w1||_1.
Outcome linear_oracle() {
  std::mt19937_64 gen(606);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> dim(4, 32);
  std::uniform_real_distribution<double> near_f(0.0, 1.0), far_f(1.0, 2.0);
  AttackBudget budget;
  budget.queries = kQueryBudget;
  const double eps = budget.epsilon;
  std::uniform_real_distribution<double> inner(eps, 1.0 - eps);
  std::size_t near_ok = 0, far_ok = 0, over = 0;
  double worst_near = 0.0;  // largest margin factor that still failed
  for (std::size_t t = 0; t < 2 * kLinearCases; ++t) {
    const bool near = t % 2 == 0;
    const std::size_t d = dim(gen);
    std::vector<double> w(d), x(d);
    double l1 = 0.0, wx = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      w[i] = nd(gen);
      x[i] = inner(gen);
      l1 += std::abs(w[i]);
      wx += w[i] * x[i];
    }
    const double factor = near ? near_f(gen) : far_f(gen);
    // f0 = w.x + b0, f1 = 0; margin of the true class 0 is factor * eps * l1.
    const double b0 = factor * eps * l1 - wx;
    LogitOracle f = [&](std::span<const double> p) {
      double z = b0;
      for (std::size_t i = 0; i < d; ++i) z += w[i] * p[i];
      return std::vector<double>{z, 0.0};
    };
    const AdvResult r = square_attack(f, x, 0, budget, 5000 + t);
    over += r.queries_used > kQueryBudget;
    if (near) {
      near_ok += r.success;
      if (!r.success) worst_near = std::max(worst_near, factor);
    } else {
      far_ok += r.success;
    }
  }
  const double rate = static_cast<double>(near_ok) / kLinearCases;
  return {rate >= kNearSuccess && far_ok == 0 && over == 0,
          fmt("below threshold %zu/%zu = %.3f (>= %.2f); above threshold %zu/%zu (== 0); "
              "query overruns %zu",
              near_ok, kLinearCases, rate, kNearSuccess, far_ok, kLinearCases, over)};
}

// 7. Direction of RA against eta over the per-cell results of ENS-IID N=3.
Outcome trend(const AblationRun& run) {
  std::vector<double> eta, rt, rq;
  std::map<double, std::vector<double>> mt, mq;
  for (const CellRecord& c : run.result.cells) {
    if (c.inst.label() != "iid-3" || c.failed) continue;
    eta.push_back(c.value);
    rt.push_back(robust_accuracy(c.transfer, run.config.attacks.mode));
    rq.push_back(robust_accuracy(c.query, run.config.attacks.mode));
    mt[c.value].push_back(rt.back());
    mq[c.value].push_back(rq.back());
  }
  if (eta.size() < 2) return {false, "not enough completed cells"};
  const double st = spearman_oracle(eta, rt), sq = spearman_oracle(eta, rq);
  std::string means;
  for (const auto& [v, xs] : mt) {
    const double a = std::accumulate(xs.begin(), xs.end(), 0.0) / xs.size();
    const double b = std::accumulate(mq[v].begin(), mq[v].end(), 0.0) / mq[v].size();
    means += fmt(" %.3g:%.3f/%.3f", v, a, b);
  }
  return {st < 0.0 && sq > 0.0,
          fmt("%zu cells; spearman(eta, RA_T) = %.3f (< 0), spearman(eta, RA_Q) = %.3f (> 0); "
              "mean RA_T/RA_Q by eta:%s",
              eta.size(), st, sq, means.c_str())};
}

// 8. Parameter sharpness of fixture models trained at eta 0.005 and 0.2.
Outcome sharpness_direction(const ExperimentConfig& config, const DataSplits& data) {
  const ModelSpec spec = config.model.spec(data.full.dims, data.full.num_classes);
  std::size_t wins = 0;
  std::string detail;
  for (std::size_t s = 0; s < kSharpnessSeeds; ++s) {
    const std::uint64_t seed = derive_key(config.seed, {0x5A4BULL, s});
    double sharp[2] = {0, 0};
    bool ok = true;
    const double etas[2] = {0.005, 0.2};
    for (int k = 0; k < 2; ++k) {
      HyperParams hp = config.ablation.defaults;
      hp.eta = etas[k];
      hp.epochs = config.model.epochs;
      hp.patience = config.model.patience;
      const TrainResult tr = train(spec, data.defender, hp, seed);
      try {
        sharp[k] = param_sharpness(tr.model, data.defender).magnitude();
      } catch (const NumericError&) {
        ok = false;
      }
    }
    const bool win = ok && sharp[0] > sharp[1];
    wins += win;
    detail += fmt(" seed%zu %.2f vs %.2f%s;", s, sharp[0], sharp[1], ok ? "" : " (no conv)");
  }
  return {2 * wins > kSharpnessSeeds,
          fmt("eta 0.005 sharper in %zu/%zu seeds (majority needed):%s", wins, kSharpnessSeeds,
              detail.c_str())};
}

// 9. Transfer bound against the measured transfer rate on surrogate/target pairs.
Outcome bound_dominance(const ExperimentConfig& config, const DataSplits& data) {
  const ModelSpec spec = config.model.spec(data.full.dims, data.full.num_classes);
  const auto ids = attack_sample_ids(data.test, kBoundSamples);
  const double radius =
      config.attacks.budget.epsilon * std::sqrt(static_cast<double>(data.full.dims));
  std::size_t vacuous = 0, dominated = 0, violated = 0;
  std::string detail;
  for (std::size_t p = 0; p < kBoundPairs; ++p) {
    const std::uint64_t key = derive_key(config.seed, {0xB0D5ULL, p});
    HyperParams hp = config.ablation.defaults;
    hp.epochs = config.model.epochs;
    hp.patience = config.model.patience;
    BuildOptions bo;
    bo.train.val_fraction = config.model.val_fraction;
    const EnsembleModel target = build_ensemble(config.ensembles.front().spec(derive_key(key, {1})),
                                                spec, data.defender, hp, key, bo);
    ExperimentConfig sc = config;
    sc.seed = derive_key(key, {2});
    const EnsembleModel surrogate = train_surrogates(sc, data);

    EvalOptions eo;
    eo.seed = derive_key(key, {3});
    eo.rho = config.attacks.rho;
    const auto adv = evaluate_transfer_attack(target, surrogate, data.test, ids,
                                              config.attacks.budget, eo);
    std::size_t hits = 0;
    for (const AdvResult& r : adv) {
      hits += transfer_indicator(target, surrogate, data.test.row(r.sample_id),
                                 data.test.labels[r.sample_id], r.x_adv);
    }
    const double rate = static_cast<double>(hits) / static_cast<double>(adv.size());
    const BoundInputs in = estimate_bound_inputs(target, surrogate, data.test, ids, radius);
    const BoundResult b = transfer_bound(in);
    if (b.vacuous) {
      ++vacuous;
      detail += fmt(" pair%zu vacuous (denoms %.3g, %.3g; Lmin %.3g/%.3g, B %.3g/%.3g, "
                    "sigma %.3g/%.3g, S %.2f), rate %.3f;",
                    p, b.denom_f, b.denom_g, in.lmin_f, in.lmin_g, in.b_f, in.b_g, in.sigma_f,
                    in.sigma_g, in.s_bar, rate);
    } else {
      (b.clamped >= rate ? dominated : violated) += 1;
      detail += fmt(" pair%zu bound %.3f vs rate %.3f;", p, b.clamped, rate);
    }
  }
  // All-vacuous leaves nothing to compare, which does not establish dominance.
  return {violated == 0 && dominated > 0,
          fmt("%zu pairs, %zu samples, l2 radius %.4f: %zu non-vacuous and dominating, %zu "
              "violating, %zu vacuous;%s",
              kBoundPairs, kBoundSamples, radius, dominated, violated, vacuous, detail.c_str())};
}

// 10. The CLI ablation twice with the same seed.
Outcome determinism(const std::string& hpr, const std::string& config, const fs::path& root,
                    const fs::path& inproc) {
  const fs::path a = root / "ablate_a", b = root / "ablate_b";
  const int ra = run_cli(hpr, "--config " + config + " --out " + a.string() + " ablate",
                         root / "ablate_a.log");
  const int rb = run_cli(hpr, "--config " + config + " --out " + b.string() + " ablate",
                         root / "ablate_b.log");
  if (ra != 0 || rb != 0) return {false, fmt("ablate exit codes %d, %d", ra, rb)};
  std::size_t files = 0, differ = 0, vs_inproc = 0;
  for (const auto& e : fs::directory_iterator(a / "tables")) {
    if (e.path().extension() != ".csv") continue;
    ++files;
    const std::string one = slurp(e.path());
    if (one.empty() || one != slurp(b / "tables" / e.path().filename())) ++differ;
    if (fs::exists(inproc / "tables" / e.path().filename()) &&
        one != slurp(inproc / "tables" / e.path().filename())) {
      ++vs_inproc;
    }
  }
  return {files > 0 && differ == 0,
          fmt("%zu CSV files, %zu differ between runs (also %zu differ from the in-process run)",
              files, differ, vs_inproc)};
}

// 11. CLI search: evaluation count and front maximality against the trace.
Outcome search_accounting(const std::string& hpr, const std::string& config, const fs::path& root) {
  const fs::path out = root / "search";
  const int rc = run_cli(hpr, "--config " + config + " --out " + out.string() + " search",
                         root / "search.log");
  if (rc != 0) return {false, fmt("search exit code %d", rc)};
  std::size_t checked = 0;
  std::string detail;
  bool ok = true;
  for (const auto& dir : fs::directory_iterator(out / "search")) {
    std::vector<oracle::Point> pts;
    std::set<std::size_t> trials;
    std::set<std::tuple<double, double, double, std::size_t>> genes;
    std::istringstream tr(slurp(dir.path() / "trace.jsonl"));
    for (std::string line; std::getline(tr, line);) {
      const auto j = nlohmann::json::parse(line);
      trials.insert(j.at("trial").get<std::size_t>());
      const auto& g = j.at("genes");
      genes.insert({g.at("eta").get<double>(), g.at("lambda").get<double>(),
                    g.at("mu").get<double>(), g.at("batch").get<std::size_t>()});
      pts.push_back({j.at("objectives").at("ca").get<double>(),
                     j.at("objectives").at("min_ra").get<double>()});
    }
    std::set<std::size_t> front;
    std::istringstream fc(slurp(dir.path() / "front.csv"));
    std::string line;
    std::getline(fc, line);  // header
    while (std::getline(fc, line)) front.insert(std::stoul(line.substr(0, line.find(','))));

    // Antichain: no front member dominates another. Maximal: every trial
    // outside the front is dominated by a front member, none inside is
    // dominated by any trial.
    std::size_t inside_dominated = 0, outside_free = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      bool by_front = false, by_any = false;
      for (std::size_t j = 0; j < pts.size(); ++j) {
        if (!oracle::dominates(pts[j], pts[i])) continue;
        by_any = true;
        by_front = by_front || front.count(j);
      }
      if (front.count(i)) inside_dominated += by_any;
      else outside_free += !by_front;
    }
    const bool this_ok = pts.size() == kSearchEvaluations && trials.size() == kSearchEvaluations &&
                         *trials.rbegin() == kSearchEvaluations - 1 &&
                         genes.size() == kSearchEvaluations && !front.empty() &&
                         inside_dominated == 0 && outside_free == 0;
    ok = ok && this_ok;
    ++checked;
    detail += fmt(" %s: %zu evaluations, %zu distinct trials, %zu distinct settings, front %zu, "
                  "dominated in front %zu, undominated outside %zu;",
                  dir.path().filename().c_str(), pts.size(), trials.size(), genes.size(),
                  front.size(), inside_dominated, outside_free);
  }
  return {ok && checked > 0, fmt("%zu searches;%s", checked, detail.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 4) {
    std::fprintf(stderr, "usage: %s <hpr> <config.json> <scratch dir>\n", argv[0]);
    return 2;
  }
  const std::string hpr = argv[1], config_path = argv[2];
  const fs::path root = argv[3];
  fs::remove_all(root);
  fs::create_directories(root);

  int failures = 0;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s AC%-2d %-22s %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, name,
                o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
  };

  report(1, "autodiff", autodiff);
  report(2, "sgd-step", sgd_exactness);
  report(3, "eigen-oracle", eigen_oracle);
  report(4, "nsga-machinery", nsga_machinery);

  AblationRun run;
  std::string setup_error;
  try {
    run.config = load_config(config_path);
    run.data = prepare_data(run.config);
    run.result = run_ablation(run.config, root / "ablate_inproc", 1);
  } catch (const std::exception& e) {
    setup_error = e.what();
  }
  auto needs_run = [&](auto fn) {
    return [&, fn]() -> Outcome {
      if (!setup_error.empty()) return {false, "ablation run failed: " + setup_error};
      return fn();
    };
  };
  report(5, "attack-constraints", needs_run([&] { return constraint_audit(run); }));
  report(6, "linear-square-oracle", linear_oracle);
  report(7, "eta-trend", needs_run([&] { return trend(run); }));
  report(8, "sharpness-direction",
         needs_run([&] { return sharpness_direction(run.config, run.data); }));
  report(9, "bound-dominance", needs_run([&] { return bound_dominance(run.config, run.data); }));
  report(10, "determinism", [&] {
    return determinism(hpr, config_path, root, root / "ablate_inproc");
  });
  report(11, "search-accounting", [&] { return search_accounting(hpr, config_path, root); });

  std::printf("%d of 11 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
