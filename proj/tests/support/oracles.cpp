#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace oracle {

std::size_t Mlp::param_count() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < w.size(); ++l) n += w[l].size() + b[l].size();
  return n;
}

std::vector<double> Mlp::flat() const {
  std::vector<double> out;
  for (std::size_t l = 0; l < w.size(); ++l) {
    out.insert(out.end(), w[l].begin(), w[l].end());
    out.insert(out.end(), b[l].begin(), b[l].end());
  }
  return out;
}

Mlp Mlp::with_flat(std::span<const double> flat) const {
  Mlp m = *this;
  std::size_t k = 0;
  for (std::size_t l = 0; l < w.size(); ++l) {
    for (double& v : m.w[l]) v = flat[k++];
    for (double& v : m.b[l]) v = flat[k++];
  }
  return m;
}

Mlp mirror(const hpr::Classifier& model) {
  Mlp m;
  const auto& spec = model.spec();
  m.sizes.push_back(spec.input_dims);
  for (std::size_t h : spec.hidden) m.sizes.push_back(h);
  m.sizes.push_back(spec.num_classes);
  const auto& e = model.params().entries;
  for (std::size_t i = 0; i + 1 < e.size(); i += 2) {
    m.w.push_back(e[i].value.to_vector());
    m.b.push_back(e[i + 1].value.to_vector());
  }
  return m;
}

std::vector<double> logits(const Mlp& m, std::span<const double> x) {
  std::vector<double> h(x.begin(), x.end());
  for (std::size_t l = 0; l < m.w.size(); ++l) {
    const std::size_t in = m.sizes[l], out = m.sizes[l + 1];
    std::vector<double> z(m.b[l]);
    for (std::size_t i = 0; i < in; ++i) {
      for (std::size_t j = 0; j < out; ++j) z[j] += h[i] * m.w[l][i * out + j];
    }
    if (l + 1 < m.w.size()) {
      for (double& v : z) v = std::max(v, 0.0);
    }
    h = std::move(z);
  }
  return h;
}

double cross_entropy(std::span<const double> z, std::size_t y) {
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  return mx + std::log(s) - z[y];
}

double loss(const Mlp& m, std::span<const double> x, std::size_t y) {
  return cross_entropy(logits(m, x), y);
}

double mean_loss(const Mlp& m, const hpr::Dataset& data) {
  double s = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) s += loss(m, data.row(i), data.labels[i]);
  return s / static_cast<double>(data.size());
}

Eigen::MatrixXd input_hessian(const Mlp& m, std::span<const double> x, std::size_t) {
  // Forward, keeping the Jacobian of each layer's output w.r.t. x.
  const std::size_t d = m.sizes.front();
  Eigen::MatrixXd jac = Eigen::MatrixXd::Identity(d, d);  // [units, d]
  std::vector<double> h(x.begin(), x.end());
  for (std::size_t l = 0; l < m.w.size(); ++l) {
    const std::size_t in = m.sizes[l], out = m.sizes[l + 1];
    Eigen::MatrixXd wt(out, in);
    for (std::size_t i = 0; i < in; ++i) {
      for (std::size_t j = 0; j < out; ++j) wt(j, i) = m.w[l][i * out + j];
    }
    std::vector<double> z(m.b[l]);
    for (std::size_t i = 0; i < in; ++i) {
      for (std::size_t j = 0; j < out; ++j) z[j] += h[i] * m.w[l][i * out + j];
    }
    jac = wt * jac;
    if (l + 1 < m.w.size()) {
      for (std::size_t j = 0; j < out; ++j) {
        if (z[j] <= 0.0) {
          z[j] = 0.0;
          jac.row(j).setZero();
        }
      }
    }
    h = std::move(z);
  }
  const double mx = *std::max_element(h.begin(), h.end());
  Eigen::VectorXd p(h.size());
  for (std::size_t k = 0; k < h.size(); ++k) p(k) = std::exp(h[k] - mx);
  p /= p.sum();
  const Eigen::MatrixXd s = Eigen::MatrixXd(p.asDiagonal()) - p * p.transpose();
  return jac.transpose() * s * jac;
}

hpr::Classifier random_mlp(std::size_t dims, std::vector<std::size_t> hidden, std::size_t classes,
                           std::uint64_t seed, double scale) {
  const auto spec = hpr::ModelSpec::mlp(dims, classes, std::move(hidden));
  hpr::Classifier c = hpr::Classifier::initialize(spec, seed);
  std::mt19937_64 gen(seed ^ 0xB1A5ULL);
  std::normal_distribution<double> nd(0.0, 0.5);
  for (auto& e : c.mutable_params().entries) {
    auto data = e.value.mutable_data();
    const bool bias = e.name.find("bias") != std::string::npos;
    for (double& v : data) v = bias ? nd(gen) : v * scale;
  }
  return c;
}

std::vector<double> fd_gradient(const ScalarFn& f, std::span<const double> x, double h) {
  std::vector<double> p(x.begin(), x.end()), g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = p[i];
    p[i] = x0 + h;
    const double fp = f(p);
    p[i] = x0 - h;
    const double fm = f(p);
    p[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

std::vector<double> fd_hvp(const ScalarFn& f, std::span<const double> x,
                           std::span<const double> v, double h) {
  const std::size_t n = x.size();
  std::vector<double> out(n), p(n);
  auto at = [&](double sv, std::size_t i, double si) {
    for (std::size_t k = 0; k < n; ++k) p[k] = x[k] + sv * h * v[k];
    p[i] += si * h;
    return f(p);
  };
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = (at(1, i, 1) - at(1, i, -1) - at(-1, i, 1) + at(-1, i, -1)) / (4.0 * h * h);
  }
  return out;
}

Eigen::MatrixXd fd_hessian(const ScalarFn& f, std::span<const double> x, double h) {
  const std::size_t n = x.size();
  Eigen::MatrixXd hm(n, n);
  std::vector<double> e(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    e[j] = 1.0;
    const auto col = fd_hvp(f, x, e, h);
    e[j] = 0.0;
    for (std::size_t i = 0; i < n; ++i) hm(i, j) = col[i];
  }
  return 0.5 * (hm + hm.transpose());
}

double top_abs_eigenvalue(const Eigen::MatrixXd& h) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

double rel_err(std::span<const double> a, std::span<const double> b, double floor) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  return diff / std::max(scale, floor);
}

bool dominates(const Point& a, const Point& b) {
  return a[0] >= b[0] && a[1] >= b[1] && (a[0] > b[0] || a[1] > b[1]);
}

std::vector<std::size_t> brute_front(std::span<const Point> pts) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    bool dominated = false;
    for (std::size_t j = 0; j < pts.size() && !dominated; ++j) {
      dominated = dominates(pts[j], pts[i]);
    }
    if (!dominated) out.push_back(i);
  }
  return out;
}

std::vector<std::vector<std::size_t>> peel_fronts(std::span<const Point> pts) {
  std::vector<std::vector<std::size_t>> fronts;
  std::vector<std::size_t> left(pts.size());
  for (std::size_t i = 0; i < left.size(); ++i) left[i] = i;
  while (!left.empty()) {
    std::vector<Point> sub;
    for (std::size_t i : left) sub.push_back(pts[i]);
    std::vector<std::size_t> f, rest;
    const auto local = brute_front(sub);
    std::size_t k = 0;
    for (std::size_t i = 0; i < left.size(); ++i) {
      if (k < local.size() && local[k] == i) {
        f.push_back(left[i]);
        ++k;
      } else {
        rest.push_back(left[i]);
      }
    }
    fronts.push_back(f);
    left = rest;
  }
  return fronts;
}

}  // namespace oracle
