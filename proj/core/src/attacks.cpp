#include "hpr/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>

#include "hpr/error.hpp"
#include "hpr/parallel.hpp"
#include "hpr/rng.hpp"

namespace hpr {

void AttackBudget::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) {
    throw InvalidArgument("attack budget: epsilon must be finite and >= 0");
  }
  if (queries < 1) throw InvalidArgument("attack budget: Q must be at least 1");
  if (steps < 1) throw InvalidArgument("attack budget: steps must be at least 1");
}

double AdvResult::linf() const {
  double m = 0.0;
  for (double d : delta) m = std::max(m, std::abs(d));
  return m;
}

bool satisfies_constraints(const AdvResult& r, std::span<const double> x, double epsilon) {
  if (r.x_adv.size() != x.size() || r.delta.size() != x.size()) return false;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = r.x_adv[i];
    if (!(v >= 0.0 && v <= 1.0)) return false;
    if (std::abs(r.delta[i]) > epsilon + 1e-12) return false;
    if (std::abs((v - x[i]) - r.delta[i]) > 1e-15) return false;
  }
  return true;
}

double margin_loss(std::span<const double> logits, std::size_t y) {
  if (y >= logits.size()) throw InvalidArgument("margin_loss: label out of range");
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < logits.size(); ++k) {
    if (k != y) other = std::max(other, logits[k]);
  }
  return logits[y] - other;
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

// Step then project back into the epsilon ball around x and the unit box.
void step_and_project(std::vector<double>& xp, std::span<const double> x,
                      std::span<const double> direction, double alpha, double eps) {
  for (std::size_t j = 0; j < xp.size(); ++j) {
    double v = xp[j] + alpha * sign(direction[j]);
    v = std::clamp(v, x[j] - eps, x[j] + eps);
    xp[j] = clip01(v);
  }
}

Tensor row_tensor(std::span<const double> x) {
  return Tensor::from({1, x.size()}, std::vector<double>(x.begin(), x.end()));
}

std::vector<double> input_grad(const LogitModel& model, std::span<const double> x, std::size_t y) {
  const std::size_t label[1] = {y};
  Tensor g = gradient([&](const Tensor& xt) { return model.loss(xt, label); }, row_tensor(x));
  auto d = g.data();
  return {d.begin(), d.end()};
}

std::vector<double> logits_of(const LogitModel& model, std::span<const double> x) {
  NoGradGuard no_grad;
  Tensor z = model.logits(row_tensor(x));
  auto d = z.data();
  return {d.begin(), d.end()};
}

void check_input(std::span<const double> x, std::size_t dims, const char* who) {
  if (x.size() != dims) {
    throw ShapeError(std::string(who) + ": input has " + std::to_string(x.size()) +
                     " features, model expects " + std::to_string(dims));
  }
}

// Fills delta and the labels/success against `model`.
void finish(AdvResult& r, const LogitModel& model, std::span<const double> x, std::size_t y) {
  r.delta.resize(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) r.delta[j] = r.x_adv[j] - x[j];
  r.true_label = y;
  r.clean_label = predict_label(logits_of(model, x));
  r.adv_label = predict_label(logits_of(model, r.x_adv));
  r.success = r.adv_label != y;
}

}  // namespace

AdvResult pgd(const InputLossFn& loss, std::span<const double> x, const AttackBudget& budget) {
  budget.validate();
  const double alpha = budget.step_size();
  AdvResult r;
  r.x_adv.assign(x.begin(), x.end());
  for (std::size_t t = 0; t < budget.steps; ++t) {
    Tensor g = gradient(loss, row_tensor(r.x_adv));
    step_and_project(r.x_adv, x, g.data(), alpha, budget.epsilon);
  }
  r.delta.resize(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) r.delta[j] = r.x_adv[j] - x[j];
  r.queries_used = budget.steps;
  return r;
}

AdvResult pgd(const LogitModel& model, std::span<const double> x, std::size_t y,
              const AttackBudget& budget) {
  check_input(x, model.input_dims(), "pgd");
  const std::size_t label[1] = {y};
  AdvResult r = pgd([&](const Tensor& xt) { return model.loss(xt, label); }, x, budget);
  finish(r, model, x, y);
  return r;
}

AdvResult momentum_pgd(const LogitModel& model, std::span<const double> x, std::size_t y,
                       const AttackBudget& budget) {
  budget.validate();
  check_input(x, model.input_dims(), "momentum_pgd");
  const double alpha = budget.step_size();
  AdvResult r;
  r.x_adv.assign(x.begin(), x.end());
  std::vector<double> m(x.size(), 0.0);
  for (std::size_t t = 0; t < budget.steps; ++t) {
    const std::vector<double> g = input_grad(model, r.x_adv, y);
    double l1 = 0.0;
    for (double v : g) l1 += std::abs(v);
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += l1 > 0.0 ? g[j] / l1 : g[j];
    step_and_project(r.x_adv, x, m, alpha, budget.epsilon);
    r.margin_trace.push_back(margin_loss(logits_of(model, r.x_adv), y));
  }
  r.queries_used = budget.steps;
  finish(r, model, x, y);
  return r;
}

AdvResult transfer_attack(const LogitModel& surrogates, std::span<const double> x, std::size_t y,
                          const AttackBudget& budget, double rho) {
  budget.validate();
  check_input(x, surrogates.input_dims(), "transfer_attack");
  if (!(rho >= 0.0)) throw InvalidArgument("transfer_attack: rho must be >= 0");
  const double alpha = budget.step_size();
  AdvResult r;
  r.x_adv.assign(x.begin(), x.end());
  std::vector<double> m(x.size(), 0.0);
  std::vector<double> probe(x.size());
  for (std::size_t t = 0; t < budget.steps; ++t) {
    std::vector<double> g;
    if (rho > 0.0) {
      const std::vector<double> g0 = input_grad(surrogates, r.x_adv, y);
      for (std::size_t j = 0; j < probe.size(); ++j) probe[j] = clip01(r.x_adv[j] + rho * sign(g0[j]));
      g = input_grad(surrogates, probe, y);
    } else {
      g = input_grad(surrogates, r.x_adv, y);
    }
    double l1 = 0.0;
    for (double v : g) l1 += std::abs(v);
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += l1 > 0.0 ? g[j] / l1 : g[j];
    step_and_project(r.x_adv, x, m, alpha, budget.epsilon);
    r.margin_trace.push_back(margin_loss(logits_of(surrogates, r.x_adv), y));
  }
  r.queries_used = budget.steps;
  finish(r, surrogates, x, y);
  return r;
}

double square_p(const SquareOptions& options, std::size_t query, std::size_t total) {
  double p = options.p_init;
  const double frac = total == 0 ? 0.0 : static_cast<double>(query) / static_cast<double>(total);
  for (double milestone : options.milestones) {
    if (frac >= milestone) p *= 0.5;
  }
  return p;
}

namespace {

struct Window {
  std::vector<std::size_t> coords;          // affected coordinates
  std::vector<std::size_t> channel_of;      // channel index per coordinate
};

Window propose_window(std::size_t d, const std::optional<ImageShape>& image, double p,
                      CounterRng& rng) {
  Window w;
  if (!image) {
    const auto len = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(p * static_cast<double>(d))), 1, d);
    const std::size_t start = rng.below(d - len + 1);
    for (std::size_t i = 0; i < len; ++i) {
      w.coords.push_back(start + i);
      w.channel_of.push_back(0);
    }
    return w;
  }
  const ImageShape& s = *image;
  const double area = p * static_cast<double>(s.height * s.width);
  const auto side = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(std::sqrt(area))),
                                            1, std::min(s.height, s.width));
  const std::size_t r0 = rng.below(s.height - side + 1);
  const std::size_t c0 = rng.below(s.width - side + 1);
  for (std::size_t r = r0; r < r0 + side; ++r) {
    for (std::size_t c = c0; c < c0 + side; ++c) {
      for (std::size_t ch = 0; ch < s.channels; ++ch) {
        w.coords.push_back((r * s.width + c) * s.channels + ch);
        w.channel_of.push_back(ch);
      }
    }
  }
  return w;
}

}  // namespace

AdvResult square_attack(const LogitOracle& oracle, std::span<const double> x, std::size_t y,
                        const AttackBudget& budget, std::uint64_t seed,
                        const SquareOptions& options) {
  budget.validate();
  const std::size_t d = x.size();
  if (d == 0) throw ShapeError("square_attack: empty input");
  if (options.image && options.image->numel() != d) {
    throw ShapeError("square_attack: image shape does not match input size");
  }
  const std::size_t channels = options.image ? options.image->channels : 1;
  const double eps = budget.epsilon;
  CounterRng rng(derive_key(seed, {0x5A4AULL}));

  AdvResult r;
  std::size_t used = 0;
  auto query = [&](std::span<const double> v) {
    const std::size_t index = used++;
    try {
      return oracle(v);
    } catch (const Error& e) {
      throw Error(e.kind(), "square_attack: oracle failed at query " + std::to_string(index) +
                                ": " + e.what());
    } catch (const std::exception& e) {
      throw Error("oracle", "square_attack: oracle failed at query " + std::to_string(index) +
                                ": " + e.what());
    }
  };

  auto done = [&](std::vector<double> best, const std::vector<double>& logits) {
    r.x_adv = std::move(best);
    r.delta.resize(d);
    for (std::size_t j = 0; j < d; ++j) r.delta[j] = r.x_adv[j] - x[j];
    r.queries_used = used;
    r.true_label = y;
    r.adv_label = predict_label(logits);
    r.success = r.adv_label != y;
    return r;
  };

  const std::vector<double> clean = query(x);
  r.clean_label = predict_label(clean);
  if (r.clean_label != y || used >= budget.queries) {
    r.margin_trace.push_back(margin_loss(clean, y));
    return done({x.begin(), x.end()}, clean);
  }

  // Vertical stripes: one random sign per (column, channel), shared down rows.
  std::vector<double> best(d);
  {
    const std::size_t height = options.image ? options.image->height : 1;
    const std::size_t width = d / (height * channels);
    std::vector<double> stripe(width * channels);
    for (double& s : stripe) s = rng.below(2) ? eps : -eps;
    for (std::size_t j = 0; j < d; ++j) best[j] = clip01(x[j] + stripe[j % (width * channels)]);
  }
  std::vector<double> best_logits = query(best);
  double best_margin = margin_loss(best_logits, y);
  r.margin_trace.push_back(best_margin);
  if (predict_label(best_logits) != y) return done(std::move(best), best_logits);

  std::vector<double> cand(d);
  std::vector<double> vals(channels);
  while (used < budget.queries) {
    const double p = square_p(options, used, budget.queries);
    cand = best;
    bool changed = false;
    for (int attempt = 0; attempt < 10 && !changed; ++attempt) {
      const Window w = propose_window(d, options.image, p, rng);
      for (double& v : vals) v = rng.below(2) ? eps : -eps;
      for (std::size_t k = 0; k < w.coords.size(); ++k) {
        const std::size_t j = w.coords[k];
        cand[j] = clip01(x[j] + vals[w.channel_of[k]]);
        changed = changed || cand[j] != best[j];
      }
    }
    std::vector<double> logits = query(cand);
    const double m = margin_loss(logits, y);
    if (m < best_margin) {
      best_margin = m;
      best.swap(cand);
      best_logits = std::move(logits);
      r.margin_trace.push_back(m);
      if (predict_label(best_logits) != y) break;
    }
  }
  return done(std::move(best), best_logits);
}

std::string to_string(AttackFamily family) {
  return family == AttackFamily::kTransfer ? "transfer" : "query";
}

namespace {

void check_rows(const LogitModel& target, const Dataset& data, std::span<const std::size_t> ids) {
  if (data.dims != target.input_dims()) {
    throw ShapeError("evaluate_attack: dataset has " + std::to_string(data.dims) +
                     " features, model expects " + std::to_string(target.input_dims()));
  }
  for (std::size_t id : ids) {
    if (id >= data.size()) throw InvalidArgument("evaluate_attack: sample id out of range");
  }
}

}  // namespace

std::vector<AdvResult> evaluate_query_attack(const LogitModel& target, const Dataset& data,
                                             std::span<const std::size_t> ids,
                                             const AttackBudget& budget,
                                             const EvalOptions& options) {
  budget.validate();
  check_rows(target, data, ids);
  std::vector<AdvResult> out(ids.size());
  const LogitOracle oracle = [&](std::span<const double> v) { return logits_of(target, v); };
  parallel_for(ids.size(), options.jobs, [&](std::size_t i) {
    const std::size_t id = ids[i];
    AdvResult r = square_attack(oracle, data.row(id), data.labels[id], budget,
                                derive_key(options.seed, {id}), options.square);
    r.sample_id = id;
    out[i] = std::move(r);
  });
  return out;
}

std::vector<AdvResult> evaluate_transfer_attack(const LogitModel& target,
                                                const LogitModel& surrogates, const Dataset& data,
                                                std::span<const std::size_t> ids,
                                                const AttackBudget& budget,
                                                const EvalOptions& options) {
  budget.validate();
  check_rows(target, data, ids);
  check_rows(surrogates, data, ids);
  const double rho = options.rho < 0.0 ? budget.epsilon / 2.0 : options.rho;
  std::vector<AdvResult> out(ids.size());
  parallel_for(ids.size(), options.jobs, [&](std::size_t i) {
    const std::size_t id = ids[i];
    const auto x = data.row(id);
    AdvResult r = transfer_attack(surrogates, x, data.labels[id], budget, rho);
    r.sample_id = id;
    // Judge on the target; the transfer attack never queries it.
    finish(r, target, x, data.labels[id]);
    r.queries_used = 0;
    out[i] = std::move(r);
  });
  return out;
}

std::string to_jsonl(const std::vector<AdvResult>& results) {
  std::string out;
  for (const AdvResult& r : results) {
    nlohmann::ordered_json j;
    j["sample_id"] = r.sample_id;
    j["success"] = r.success;
    j["queries"] = r.queries_used;
    j["linf"] = r.linf();
    j["clean_label"] = r.clean_label;
    j["adv_label"] = r.adv_label;
    j["true_label"] = r.true_label;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace hpr
