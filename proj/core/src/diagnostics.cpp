#include "hpr/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>

#include "hpr/error.hpp"
#include "hpr/rng.hpp"

namespace hpr {

using nlohmann::ordered_json;

namespace {

Tensor row_tensor(std::span<const double> x) {
  return Tensor::from({1, x.size()}, std::vector<double>(x.begin(), x.end()));
}

std::size_t predict_row(const LogitModel& model, std::span<const double> x) {
  return model.predict(x);
}

double norm2(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dotp(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double ce_at(const LogitModel& model, std::span<const double> x, std::size_t y) {
  NoGradGuard no_grad;
  const std::size_t label[1] = {y};
  return model.loss(row_tensor(x), label).item();
}

std::vector<double> input_gradient(const LogitModel& model, std::span<const double> x,
                                   std::size_t y) {
  const std::size_t label[1] = {y};
  Tensor g = gradient([&](const Tensor& xt) { return model.loss(xt, label); }, row_tensor(x));
  auto d = g.data();
  return {d.begin(), d.end()};
}

}  // namespace

double clean_accuracy(const LogitModel& model, const Dataset& data,
                      std::span<const std::size_t> ids) {
  if (ids.empty()) throw InvalidArgument("clean_accuracy: no samples");
  std::size_t correct = 0;
  for (std::size_t id : ids) correct += predict_row(model, data.row(id)) == data.labels[id];
  return static_cast<double>(correct) / static_cast<double>(ids.size());
}

std::string to_string(RaMode mode) {
  return mode == RaMode::kLiteral ? "literal" : "conditioned";
}

RaMode parse_ra_mode(const std::string& name) {
  if (name == "literal") return RaMode::kLiteral;
  if (name == "conditioned") return RaMode::kConditioned;
  throw InvalidArgument("unknown robust-accuracy mode '" + name + "'");
}

namespace {

bool robust(std::size_t clean, std::size_t adv, std::size_t y, RaMode mode) {
  return mode == RaMode::kLiteral ? clean == adv : (clean == y && adv == y);
}

}  // namespace

double robust_accuracy(std::span<const AdvResult> results, RaMode mode) {
  if (results.empty()) return 0.0;
  std::size_t n = 0;
  for (const AdvResult& r : results) n += robust(r.clean_label, r.adv_label, r.true_label, mode);
  return static_cast<double>(n) / static_cast<double>(results.size());
}

double robust_accuracy(const LogitModel& model, std::span<const AdvPair> pairs, RaMode mode) {
  if (pairs.empty()) return 0.0;
  std::size_t n = 0;
  for (const AdvPair& p : pairs) {
    n += robust(predict_row(model, p.x), predict_row(model, p.x_adv), p.label, mode);
  }
  return static_cast<double>(n) / static_cast<double>(pairs.size());
}

int transfer_indicator(const LogitModel& f, const LogitModel& g, std::span<const double> x,
                       std::size_t y, std::span<const double> x_adv) {
  return (predict_row(f, x) == y && predict_row(g, x) == y && predict_row(f, x_adv) != y &&
          predict_row(g, x_adv) != y)
             ? 1
             : 0;
}

PowerResult power_iteration(const HvpFn& hvp_fn, std::size_t n, double tol, std::size_t max_iters,
                            std::uint64_t seed) {
  if (n == 0) throw InvalidArgument("power_iteration: empty operator");
  if (!(tol > 0.0) || max_iters == 0) {
    throw InvalidArgument("power_iteration: tol must be > 0 and max_iters >= 1");
  }
  CounterRng rng(derive_key(seed, {0x9017ULL}));
  auto random_unit = [&] {
    std::vector<double> v(n);
    for (double& x : v) x = 2.0 * rng.uniform() - 1.0;
    const double nv = norm2(v);
    for (double& x : v) x /= nv;
    return v;
  };

  PowerResult out;
  std::vector<double> v = random_unit();
  double prev = std::numeric_limits<double>::quiet_NaN();
  int restarts = 0;
  for (std::size_t it = 1; it <= max_iters; ++it) {
    const std::vector<double> w = hvp_fn(v);
    if (w.size() != n) throw ShapeError("power_iteration: hvp returned the wrong size");
    const double nw = norm2(w);
    if (!std::isfinite(nw)) throw NumericError("power_iteration: non-finite Hessian-vector product");
    out.iterations = it;
    if (nw == 0.0) {
      if (restarts++ < 2) {
        v = random_unit();
        prev = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      // Repeatedly annihilated: treat the operator as zero.
      out.eigenvalue = 0.0;
      out.eigenvector = v;
      out.residual = 0.0;
      out.converged = true;
      return out;
    }
    const double lambda = dotp(v, w);
    double res = 0.0;
    for (std::size_t i = 0; i < n; ++i) res += (w[i] - lambda * v[i]) * (w[i] - lambda * v[i]);
    out.eigenvalue = lambda;
    out.eigenvector = v;
    out.residual = std::sqrt(res);
    // A settled Rayleigh quotient alone is not enough: with eigenvalues +l
    // and -l the quotient is constant while the iterate flips sign.
    if (std::isfinite(prev) && std::abs(lambda - prev) < tol * std::abs(lambda) &&
        out.residual <= std::sqrt(tol) * std::abs(lambda)) {
      out.converged = true;
      return out;
    }
    prev = lambda;
    for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / nw;
  }
  return out;
}

SmoothnessEstimate input_smoothness(const LogitModel& model, const Dataset& data,
                                    std::span<const std::size_t> ids,
                                    const PowerOptions& options) {
  SmoothnessEstimate est;
  double sum = 0.0;
  std::size_t kept = 0;
  for (std::size_t id : ids) {
    const std::size_t label[1] = {data.labels[id]};
    const LossFn loss = [&](const Tensor& xt) { return model.loss(xt, label); };
    const Tensor point = row_tensor(data.row(id));
    const HvpFn op = [&](std::span<const double> v) {
      Tensor hv = hvp(loss, point, Tensor::from({1, v.size()}, {v.begin(), v.end()}));
      auto d = hv.data();
      return std::vector<double>(d.begin(), d.end());
    };
    const PowerResult r =
        power_iteration(op, data.dims, options.tol, options.max_iters, derive_key(options.seed, {id}));
    est.sample_ids.push_back(id);
    est.eigenvalues.push_back(r.magnitude());
    est.residuals.push_back(r.residual);
    est.converged.push_back(r.converged);
    if (r.converged) {
      sum += r.magnitude();
      est.max = kept == 0 ? r.magnitude() : std::max(est.max, r.magnitude());
      ++kept;
    } else {
      ++est.flagged;
    }
  }
  est.mean = kept ? sum / static_cast<double>(kept) : 0.0;
  return est;
}

PowerResult param_sharpness(const MultiLossFn& loss, const std::vector<Tensor>& params,
                            const PowerOptions& options) {
  std::size_t n = 0;
  for (const Tensor& p : params) n += p.numel();
  const HvpFn op = [&](std::span<const double> v) {
    std::vector<Tensor> dirs;
    std::size_t off = 0;
    for (const Tensor& p : params) {
      dirs.push_back(Tensor::from(p.shape(), {v.begin() + off, v.begin() + off + p.numel()}));
      off += p.numel();
    }
    const std::vector<Tensor> hv = hvp(loss, params, dirs);
    std::vector<double> out;
    out.reserve(n);
    for (const Tensor& t : hv) out.insert(out.end(), t.data().begin(), t.data().end());
    return out;
  };
  PowerResult r = power_iteration(op, n, options.tol, options.max_iters, options.seed);
  if (!r.converged) {
    char buf[160];
    std::snprintf(buf, sizeof buf,
                  "param_sharpness: power iteration did not converge in %zu iterations "
                  "(residual %.3g, estimate %.6g)",
                  r.iterations, r.residual, r.eigenvalue);
    throw NumericError(buf);
  }
  return r;
}

PowerResult param_sharpness(const Classifier& model, const Dataset& data,
                            const PowerOptions& options) {
  const Tensor x = data.inputs();
  const ModelSpec& spec = model.spec();
  return param_sharpness(
      [&](const std::vector<Tensor>& p) {
        return softmax_cross_entropy(forward(spec, p, x), data.labels);
      },
      model.params().tensors(), options);
}

SimilarityStats gradient_similarity(const LogitModel& f, const LogitModel& g, const Dataset& data,
                                    std::span<const std::size_t> ids) {
  if (f.input_dims() != g.input_dims()) {
    throw ShapeError("gradient_similarity: models disagree on input dimension");
  }
  SimilarityStats s;
  double sum = 0.0;
  for (std::size_t id : ids) {
    const auto gf = input_gradient(f, data.row(id), data.labels[id]);
    const auto gg = input_gradient(g, data.row(id), data.labels[id]);
    const double nf = norm2(gf), ng = norm2(gg);
    const bool zero = nf == 0.0 || ng == 0.0;
    const double c = zero ? 0.0 : std::clamp(dotp(gf, gg) / (nf * ng), -1.0, 1.0);
    s.sample_ids.push_back(id);
    s.values.push_back(c);
    s.zero_gradient.push_back(zero);
    sum += c;
    s.max = std::max(s.max, c);
  }
  if (!ids.empty()) s.mean = sum / static_cast<double>(ids.size());
  return s;
}

void BoundInputs::validate() const {
  for (double v : {xi_f, xi_g, b_f, b_g, lmin_f, lmin_g, sigma_f, sigma_g, epsilon}) {
    if (!(v >= 0.0)) throw InvalidArgument("transfer_bound: inputs must be non-negative");
  }
  if (!(s_bar >= -1.0 && s_bar <= 1.0)) {
    throw InvalidArgument("transfer_bound: gradient similarity must lie in [-1, 1]");
  }
}

BoundResult transfer_bound(const BoundInputs& in) {
  in.validate();
  const double e = in.epsilon;
  const double sim = 1.0 + std::sqrt((1.0 + in.s_bar) / 2.0);
  BoundResult r;
  r.denom_f = in.lmin_f - e * in.b_f * sim - in.sigma_f * e * e;
  r.denom_g = in.lmin_g - e * in.b_g * sim - in.sigma_g * e * e;
  if (!(r.denom_f > 0.0) || !(r.denom_g > 0.0)) {
    r.vacuous = true;
    r.raw = std::numeric_limits<double>::infinity();
    r.clamped = 1.0;
    return r;
  }
  r.raw = in.xi_f / r.denom_f + in.xi_g / r.denom_g;
  r.clamped = std::clamp(r.raw, 0.0, 1.0);
  return r;
}

BoundInputs estimate_bound_inputs(const LogitModel& f, const LogitModel& g, const Dataset& data,
                                  std::span<const std::size_t> ids, double l2_radius,
                                  const PowerOptions& options) {
  if (ids.empty()) throw InvalidArgument("estimate_bound_inputs: no samples");
  struct Side {
    double xi = 0.0, b = 0.0, lmin = std::numeric_limits<double>::infinity(), sigma = 0.0;
  };
  auto side = [&](const LogitModel& m) {
    Side s;
    for (std::size_t id : ids) {
      const auto x = data.row(id);
      const std::size_t y = data.labels[id];
      s.xi += ce_at(m, x, y);
      s.b = std::max(s.b, norm2(input_gradient(m, x, y)));
      for (std::size_t k = 0; k < m.num_classes(); ++k) {
        if (k != y) s.lmin = std::min(s.lmin, ce_at(m, x, k));
      }
    }
    s.xi /= static_cast<double>(ids.size());
    s.sigma = input_smoothness(m, data, ids, options).max;
    return s;
  };
  const Side sf = side(f), sg = side(g);
  BoundInputs in;
  in.xi_f = sf.xi;
  in.xi_g = sg.xi;
  in.b_f = sf.b;
  in.b_g = sg.b;
  in.lmin_f = sf.lmin;
  in.lmin_g = sg.lmin;
  in.sigma_f = sf.sigma;
  in.sigma_g = sg.sigma;
  in.s_bar = gradient_similarity(f, g, data, ids).max;
  in.epsilon = l2_radius;
  return in;
}

QueryBounds query_bounds(const InputLossFn& loss, std::span<const double> x, double threshold,
                         const PowerOptions& options) {
  const Tensor point = row_tensor(x);
  double value = 0.0;
  {
    NoGradGuard no_grad;
    value = loss(point).item();
  }
  QueryBounds q;
  q.gap = threshold - value;
  if (q.gap < 0.0) {
    throw InvalidArgument("query_bounds: loss already exceeds the threshold");
  }
  const Tensor gt = gradient(loss, point);
  const std::vector<double> g(gt.data().begin(), gt.data().end());
  q.grad_norm = norm2(g);
  if (!(q.grad_norm > 0.0)) throw InvalidArgument("query_bounds: zero input gradient");

  const HvpFn op = [&](std::span<const double> v) {
    Tensor hv = hvp(loss, point, Tensor::from({1, v.size()}, {v.begin(), v.end()}));
    return std::vector<double>(hv.data().begin(), hv.data().end());
  };
  const PowerResult pr = power_iteration(op, x.size(), options.tol, options.max_iters, options.seed);
  q.sigma = pr.magnitude();
  // The eigenvector's sign is arbitrary; orient it along the gradient.
  const double gu = std::abs(dotp(g, pr.eigenvector));
  const double c = q.gap, gn = q.grad_norm;
  q.lower = c / gn - 2.0 * q.sigma * c * c / (gn * gn * gn);
  if (gu > 0.0) {
    q.upper = c / gu;
  } else {
    q.upper = std::numeric_limits<double>::infinity();
    q.upper_infinite = true;
  }
  return q;
}

QueryBounds query_bounds(const LogitModel& model, std::span<const double> x, std::size_t y,
                         double threshold, const PowerOptions& options) {
  const std::size_t label[1] = {y};
  return query_bounds([&](const Tensor& xt) { return model.loss(xt, label); }, x, threshold,
                      options);
}

RobustnessReport build_report(const LogitModel& target, const Dataset& data,
                              std::span<const std::size_t> ids,
                              std::span<const AdvResult> transfer,
                              std::span<const AdvResult> query, RaMode mode) {
  RobustnessReport r;
  r.mode = mode;
  r.n_clean = ids.size();
  for (std::size_t id : ids) r.correct += predict_row(target, data.row(id)) == data.labels[id];
  r.ca = r.n_clean ? static_cast<double>(r.correct) / static_cast<double>(r.n_clean) : 0.0;
  auto fold = [&](std::span<const AdvResult> rs, std::size_t& n, std::size_t& kept,
                  std::optional<double>& ra, std::optional<double>& asr) {
    n = rs.size();
    if (n == 0) return;
    for (const AdvResult& a : rs) kept += robust(a.clean_label, a.adv_label, a.true_label, mode);
    ra = static_cast<double>(kept) / static_cast<double>(n);
    asr = static_cast<double>(n - kept) / static_cast<double>(n);
  };
  fold(transfer, r.n_transfer, r.robust_transfer, r.ra_t, r.asr_t);
  fold(query, r.n_query, r.robust_query, r.ra_q, r.asr_q);
  return r;
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("spearman: length mismatch");
  if (a.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

std::string to_json(const RobustnessReport& r) {
  ordered_json j;
  j["mode"] = to_string(r.mode);
  j["ca"] = r.ca;
  j["n_clean"] = r.n_clean;
  j["correct"] = r.correct;
  auto opt = [](const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(); };
  j["ra_t"] = opt(r.ra_t);
  j["asr_t"] = opt(r.asr_t);
  j["n_transfer"] = r.n_transfer;
  j["ra_q"] = opt(r.ra_q);
  j["asr_q"] = opt(r.asr_q);
  j["n_query"] = r.n_query;
  return j.dump(2);
}

std::string to_json(const SmoothnessEstimate& e) {
  ordered_json j;
  j["sample_ids"] = e.sample_ids;
  j["eigenvalues"] = e.eigenvalues;
  j["residuals"] = e.residuals;
  j["converged"] = e.converged;
  j["mean"] = e.mean;
  j["max"] = e.max;
  j["flagged"] = e.flagged;
  return j.dump(2);
}

std::string to_json(const SimilarityStats& s) {
  ordered_json j;
  j["sample_ids"] = s.sample_ids;
  j["values"] = s.values;
  j["zero_gradient"] = s.zero_gradient;
  j["mean"] = s.mean;
  j["max"] = s.max;
  return j.dump(2);
}

std::string to_json(const BoundInputs& in, const BoundResult& b) {
  ordered_json j;
  j["xi_f"] = in.xi_f;
  j["xi_g"] = in.xi_g;
  j["b_f"] = in.b_f;
  j["b_g"] = in.b_g;
  j["lmin_f"] = in.lmin_f;
  j["lmin_g"] = in.lmin_g;
  j["sigma_f"] = in.sigma_f;
  j["sigma_g"] = in.sigma_g;
  j["s_bar"] = in.s_bar;
  j["epsilon"] = in.epsilon;
  j["vacuous"] = b.vacuous;
  j["denom_f"] = b.denom_f;
  j["denom_g"] = b.denom_g;
  j["bound"] = b.vacuous ? ordered_json() : ordered_json(b.raw);
  j["bound_clamped"] = b.clamped;
  return j.dump(2);
}

std::string to_csv(const SmoothnessEstimate& e) {
  std::string out = "sample_id,eigenvalue,residual,converged\n";
  char buf[128];
  for (std::size_t i = 0; i < e.sample_ids.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.3g,%d\n", e.sample_ids[i], e.eigenvalues[i],
                  e.residuals[i], e.converged[i] ? 1 : 0);
    out += buf;
  }
  return out;
}

}  // namespace hpr
