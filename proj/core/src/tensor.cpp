#include "hpr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <unordered_map>

#include "hpr/error.hpp"

namespace hpr {

namespace {

thread_local bool g_grad_enabled = true;

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const Shape& b) {
  throw ShapeError(op + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const std::string& why) {
  throw ShapeError(op + ": " + why + " (shape " + to_string(a) + ")");
}

Tensor constant_like(const Tensor& a, std::vector<double> values) {
  return make_tensor(a.shape(), std::move(values));
}

// Returns both operands expanded to a common shape.
std::pair<Tensor, Tensor> broadcast_pair(const Tensor& a, const Tensor& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) return {a, b};
  if (b.numel() == 1 && (sb.empty() || a.numel() != 1)) return {a, expand_scalar(b, sa)};
  if (a.numel() == 1 && (sa.empty() || b.numel() != 1)) return {expand_scalar(a, sb), b};
  if (sb.size() + 1 == sa.size() && std::equal(sb.begin(), sb.end(), sa.begin() + 1)) {
    return {a, expand_axis(b, 0, sa[0])};
  }
  if (sa.size() + 1 == sb.size() && std::equal(sa.begin(), sa.end(), sb.begin() + 1)) {
    return {expand_axis(a, 0, sb[0]), b};
  }
  shape_fail(op, sa, sb);
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t extent = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

std::size_t same_pad(std::size_t kernel, Padding padding) {
  return padding == Padding::kSame ? (kernel - 1) / 2 : 0;
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

bool GradMode::enabled() noexcept { return g_grad_enabled; }
void GradMode::set_enabled(bool on) noexcept { g_grad_enabled = on; }

// ---- Tensor ----------------------------------------------------------------

Tensor make_tensor(Shape shape, std::vector<double> values) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + to_string(shape) + " holds " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }
Tensor Tensor::full(Shape shape, double value) {
  const std::size_t n = shape_numel(shape);
  return make_tensor(std::move(shape), std::vector<double>(n, value));
}
Tensor Tensor::scalar(double value) { return make_tensor({}, {value}); }
Tensor Tensor::from(Shape shape, std::vector<double> values) {
  return make_tensor(std::move(shape), std::move(values));
}

const Shape& Tensor::shape() const {
  if (!impl_) throw GraphError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) shape_fail("dim", s, "axis " + std::to_string(axis) + " out of range");
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  shape();
  if (impl_->grad_fn) throw GraphError("cannot write into a tensor produced by a recorded op");
  return impl_->data;
}

std::vector<double> Tensor::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

double Tensor::item() const {
  if (numel() != 1) shape_fail("item", shape(), "expected a single element");
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  shape();
  if (impl_->grad_fn && !on) throw GraphError("cannot clear requires_grad on a non-leaf tensor");
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return impl_ && !impl_->grad_fn; }

Tensor Tensor::grad() const {
  if (!impl_ || !impl_->grad) return Tensor();
  return Tensor(impl_->grad);
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.reset();
}

Tensor Tensor::detach() const { return make_tensor(shape(), impl_->data); }

const std::shared_ptr<Node>& Tensor::grad_fn() const {
  shape();
  return impl_->grad_fn;
}

Tensor record(Tensor out, std::string op, std::vector<Tensor> inputs, BackwardFn backward,
              bool twice_differentiable) {
  if (!GradMode::enabled()) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->op = std::move(op);
  node->inputs = std::move(inputs);
  node->backward = std::move(backward);
  node->twice_differentiable = twice_differentiable;
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
  return out;
}

// ---- elementwise -------------------------------------------------------------

namespace {

template <class F>
Tensor map_unary(const Tensor& a, F f) {
  auto src = a.data();
  std::vector<double> out(src.size());
  std::transform(src.begin(), src.end(), out.begin(), f);
  return constant_like(a, std::move(out));
}

template <class F>
Tensor map_binary(const Tensor& a, const Tensor& b, F f) {
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
  return constant_like(a, std::move(out));
}

}  // namespace

Tensor add(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0, "add");
  Tensor out = map_binary(a, b, std::plus<>());
  return record(std::move(out), "add", {a, b},
                [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

Tensor sub(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0, "sub");
  Tensor out = map_binary(a, b, std::minus<>());
  return record(std::move(out), "sub", {a, b},
                [](const Tensor& g) { return std::vector<Tensor>{g, neg(g)}; });
}

Tensor mul(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0, "mul");
  Tensor out = map_binary(a, b, std::multiplies<>());
  return record(std::move(out), "mul", {a, b}, [a, b](const Tensor& g) {
    Tensor ga = a.requires_grad() ? mul(g, b) : Tensor();
    Tensor gb = b.requires_grad() ? mul(g, a) : Tensor();
    return std::vector<Tensor>{ga, gb};
  });
}

Tensor div(const Tensor& a0, const Tensor& b0) {
  auto [a, b] = broadcast_pair(a0, b0, "div");
  Tensor out = map_binary(a, b, std::divides<>());
  return record(std::move(out), "div", {a, b}, [a, b](const Tensor& g) {
    return std::vector<Tensor>{div(g, b), neg(div(mul(g, a), mul(b, b)))};
  });
}

Tensor neg(const Tensor& a) {
  return record(map_unary(a, std::negate<>()), "neg", {a},
                [](const Tensor& g) { return std::vector<Tensor>{neg(g)}; });
}

Tensor scale(const Tensor& a, double factor) {
  return record(map_unary(a, [factor](double v) { return v * factor; }), "scale", {a},
                [factor](const Tensor& g) { return std::vector<Tensor>{scale(g, factor)}; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return record(map_unary(a, [value](double v) { return v + value; }), "add_scalar", {a},
                [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

Tensor relu(const Tensor& a) {
  Tensor out = map_unary(a, [](double v) { return v > 0.0 ? v : 0.0; });
  return record(std::move(out), "relu", {a}, [a](const Tensor& g) {
    // Subgradient at exactly zero is zero.
    Tensor mask = map_unary(a, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
    return std::vector<Tensor>{mul(g, mask)};
  });
}

Tensor log(const Tensor& a) {
  return record(map_unary(a, [](double v) { return std::log(v); }), "log", {a},
                [a](const Tensor& g) { return std::vector<Tensor>{div(g, a)}; });
}

Tensor exp(const Tensor& a) {
  return record(map_unary(a, [](double v) { return std::exp(v); }), "exp", {a},
                [a](const Tensor& g) { return std::vector<Tensor>{mul(g, exp(a))}; });
}

// ---- shape and reductions -----------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    shape_fail("reshape", a.shape(), "cannot reshape to " + to_string(shape));
  }
  Tensor out = make_tensor(shape, a.to_vector());
  Shape original = a.shape();
  return record(std::move(out), "reshape", {a}, [original](const Tensor& g) {
    return std::vector<Tensor>{reshape(g, original)};
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) shape_fail("transpose", a.shape(), "expected rank 2");
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto src = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = src[i * n + j];
  return record(make_tensor({n, m}, std::move(out)), "transpose", {a},
                [](const Tensor& g) { return std::vector<Tensor>{transpose(g)}; });
}

Tensor sum(const Tensor& a) {
  auto d = a.data();
  double s = 0.0;
  for (double v : d) s += v;
  Shape original = a.shape();
  return record(Tensor::scalar(s), "sum", {a}, [original](const Tensor& g) {
    return std::vector<Tensor>{expand_scalar(g, original)};
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) shape_fail("mean", a.shape(), "empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor expand_scalar(const Tensor& a, Shape shape) {
  if (a.numel() != 1) shape_fail("expand_scalar", a.shape(), "expected a single element");
  Tensor out = Tensor::full(shape, a.data()[0]);
  Shape original = a.shape();
  return record(std::move(out), "expand_scalar", {a}, [original](const Tensor& g) {
    return std::vector<Tensor>{reshape(sum(g), original)};
  });
}

Tensor sum_axis(const Tensor& a, std::size_t axis) {
  const Shape& s = a.shape();
  if (axis >= s.size()) shape_fail("sum_axis", s, "axis out of range");
  const AxisSplit sp = split_at(s, axis);
  auto src = a.data();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.extent; ++k) {
      const double* row = src.data() + (o * sp.extent + k) * sp.inner;
      double* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += row[i];
    }
  Shape reduced = s;
  reduced.erase(reduced.begin() + static_cast<std::ptrdiff_t>(axis));
  const std::size_t n = sp.extent;
  return record(make_tensor(reduced, std::move(out)), "sum_axis", {a},
                [axis, n](const Tensor& g) { return std::vector<Tensor>{expand_axis(g, axis, n)}; });
}

Tensor expand_axis(const Tensor& a, std::size_t axis, std::size_t n) {
  Shape s = a.shape();
  if (axis > s.size()) shape_fail("expand_axis", s, "axis out of range");
  s.insert(s.begin() + static_cast<std::ptrdiff_t>(axis), n);
  const AxisSplit sp = split_at(s, axis);
  auto src = a.data();
  std::vector<double> out(shape_numel(s));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.extent; ++k)
      std::copy_n(src.data() + o * sp.inner, sp.inner,
                  out.data() + (o * sp.extent + k) * sp.inner);
  return record(make_tensor(s, std::move(out)), "expand_axis", {a},
                [axis](const Tensor& g) { return std::vector<Tensor>{sum_axis(g, axis)}; });
}

Tensor max_last(const Tensor& a) {
  const Shape& s = a.shape();
  if (s.empty()) shape_fail("max_last", s, "expected rank >= 1");
  const std::size_t n = s.back();
  if (n == 0) shape_fail("max_last", s, "empty axis");
  const std::size_t rows = a.numel() / n;
  auto src = a.data();
  std::vector<double> out(rows);
  std::vector<double> mask(a.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (src[r * n + j] > src[r * n + best]) best = j;
    out[r] = src[r * n + best];
    mask[r * n + best] = 1.0;
  }
  Shape reduced(s.begin(), s.end() - 1);
  const std::size_t last = s.size() - 1;
  Tensor mask_t = constant_like(a, std::move(mask));
  return record(make_tensor(reduced, std::move(out)), "max_last", {a},
                [mask_t, last, n](const Tensor& g) {
                  return std::vector<Tensor>{mul(expand_axis(g, last, n), mask_t)};
                });
}

std::vector<std::size_t> argmax_last(const Tensor& a) {
  const Shape& s = a.shape();
  if (s.empty() || s.size() > 2) shape_fail("argmax_last", s, "expected rank 1 or 2");
  const std::size_t n = s.back();
  const std::size_t rows = s.size() == 1 ? 1 : s[0];
  auto src = a.data();
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j)
      if (src[r * n + j] > src[r * n + best]) best = j;
    out[r] = best;
  }
  return out;
}

Tensor softmax(const Tensor& logits) {
  const Shape& s = logits.shape();
  if (s.empty()) shape_fail("softmax", s, "expected rank >= 1");
  const std::size_t n = s.back();
  const std::size_t rows = logits.numel() / n;
  auto src = logits.data();
  std::vector<double> out(logits.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = src.data() + r * n;
    const double m = *std::max_element(z, z + n);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += (out[r * n + j] = std::exp(z[j] - m));
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= total;
  }
  const std::size_t last = s.size() - 1;
  return record(constant_like(logits, std::move(out)), "softmax", {logits},
                [logits, last, n](const Tensor& g) {
                  Tensor p = softmax(logits);
                  Tensor inner = expand_axis(sum_axis(mul(p, g), last), last, n);
                  return std::vector<Tensor>{mul(p, sub(g, inner))};
                });
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels,
                             Reduction reduction) {
  const Shape& s = logits.shape();
  if (s.size() != 2) shape_fail("softmax_cross_entropy", s, "expected logits [batch, classes]");
  const std::size_t rows = s[0], c = s[1];
  if (labels.size() != rows) {
    shape_fail("softmax_cross_entropy", s,
               "got " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                   " rows");
  }
  auto src = logits.data();
  std::vector<double> per_row(rows);
  std::vector<double> onehot(logits.numel(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= c) {
      throw InvalidArgument("softmax_cross_entropy: label " + std::to_string(labels[r]) +
                            " out of range for " + std::to_string(c) + " classes");
    }
    const double* z = src.data() + r * c;
    const double m = *std::max_element(z, z + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(z[j] - m);
    per_row[r] = m + std::log(total) - z[labels[r]];
    onehot[r * c + labels[r]] = 1.0;
  }
  Tensor onehot_t = constant_like(logits, std::move(onehot));

  Tensor out;
  if (reduction == Reduction::kNone) {
    out = make_tensor({rows}, std::move(per_row));
  } else {
    double total = 0.0;
    for (double v : per_row) total += v;
    if (reduction == Reduction::kMean) total /= static_cast<double>(rows);
    out = Tensor::scalar(total);
  }
  return record(std::move(out), "softmax_cross_entropy", {logits},
                [logits, onehot_t, reduction, rows, c](const Tensor& g) {
                  Tensor diff = sub(softmax(logits), onehot_t);
                  Tensor weight;
                  switch (reduction) {
                    case Reduction::kNone:
                      weight = expand_axis(g, 1, c);
                      break;
                    case Reduction::kMean:
                      weight = scale(g, 1.0 / static_cast<double>(rows));
                      break;
                    case Reduction::kSum:
                      weight = g;
                      break;
                  }
                  return std::vector<Tensor>{mul(diff, weight)};
                });
}

Tensor l2_norm(const Tensor& a) {
  double ss = 0.0;
  for (double v : a.data()) ss += v * v;
  return record(Tensor::scalar(std::sqrt(ss)), "l2_norm", {a}, [a](const Tensor& g) {
    Tensor n = l2_norm(a);
    if (n.item() == 0.0) return std::vector<Tensor>{Tensor::zeros(a.shape())};
    return std::vector<Tensor>{mul(a, div(g, n))};
  });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("dot", a.shape(), b.shape());
  return sum(mul(a, b));
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto x = a.data();
  auto y = b.data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* dst = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double xv = x[i * k + p];
      if (xv == 0.0) continue;
      const double* row = y.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) dst[j] += xv * row[j];
    }
  }
  return record(make_tensor({m, n}, std::move(out)), "matmul", {a, b}, [a, b](const Tensor& g) {
    Tensor ga = a.requires_grad() ? matmul(g, transpose(b)) : Tensor();
    Tensor gb = b.requires_grad() ? matmul(transpose(a), g) : Tensor();
    return std::vector<Tensor>{ga, gb};
  });
}

// ---- convolution -------------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t batch, height, width, channels, kernel, pad, out_h, out_w;

  std::size_t rows() const { return batch * out_h * out_w; }
  std::size_t cols() const { return kernel * kernel * channels; }

  // Calls f(col_index, image_index) for every in-bounds patch element.
  template <class F>
  void for_each(F f) const {
    const std::size_t ncols = cols();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t oy = 0; oy < out_h; ++oy)
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const std::size_t row = (b * out_h + oy) * out_w + ox;
          for (std::size_t ky = 0; ky < kernel; ++ky) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) -
                                      static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
            for (std::size_t kx = 0; kx < kernel; ++kx) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + kx) -
                                        static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width)) continue;
              const std::size_t img =
                  ((b * height + static_cast<std::size_t>(iy)) * width + static_cast<std::size_t>(ix)) *
                  channels;
              const std::size_t col = row * ncols + (ky * kernel + kx) * channels;
              for (std::size_t c = 0; c < channels; ++c) f(col + c, img + c);
            }
          }
        }
  }
};

ConvGeometry conv_geometry(const Shape& image_shape, std::size_t kernel, Padding padding,
                           const char* op) {
  if (image_shape.size() != 4) shape_fail(op, image_shape, "expected images [B,H,W,C]");
  if (kernel == 0 || (padding == Padding::kSame && kernel % 2 == 0)) {
    shape_fail(op, image_shape, "kernel must be positive (and odd for same padding)");
  }
  ConvGeometry g{image_shape[0], image_shape[1], image_shape[2], image_shape[3], kernel,
                 same_pad(kernel, padding), 0, 0};
  if (g.height + 2 * g.pad < kernel || g.width + 2 * g.pad < kernel) {
    shape_fail(op, image_shape, "kernel larger than padded image");
  }
  g.out_h = g.height + 2 * g.pad - kernel + 1;
  g.out_w = g.width + 2 * g.pad - kernel + 1;
  return g;
}

}  // namespace

Tensor im2col(const Tensor& images, std::size_t kernel, Padding padding) {
  const ConvGeometry geo = conv_geometry(images.shape(), kernel, padding, "im2col");
  auto src = images.data();
  std::vector<double> out(geo.rows() * geo.cols(), 0.0);
  geo.for_each([&](std::size_t col, std::size_t img) { out[col] = src[img]; });
  Shape image_shape = images.shape();
  return record(make_tensor({geo.rows(), geo.cols()}, std::move(out)), "im2col", {images},
                [image_shape, kernel, padding](const Tensor& g) {
                  return std::vector<Tensor>{col2im(g, image_shape, kernel, padding)};
                });
}

Tensor col2im(const Tensor& cols, const Shape& image_shape, std::size_t kernel, Padding padding) {
  const ConvGeometry geo = conv_geometry(image_shape, kernel, padding, "col2im");
  if (cols.shape() != Shape{geo.rows(), geo.cols()}) {
    shape_fail("col2im", cols.shape(), Shape{geo.rows(), geo.cols()});
  }
  auto src = cols.data();
  std::vector<double> out(shape_numel(image_shape), 0.0);
  geo.for_each([&](std::size_t col, std::size_t img) { out[img] += src[col]; });
  return record(make_tensor(image_shape, std::move(out)), "col2im", {cols},
                [kernel, padding](const Tensor& g) {
                  return std::vector<Tensor>{im2col(g, kernel, padding)};
                });
}

Tensor conv2d(const Tensor& images, const Tensor& weight, const Tensor& bias, std::size_t kernel,
              Padding padding) {
  const ConvGeometry geo = conv_geometry(images.shape(), kernel, padding, "conv2d");
  if (weight.rank() != 2 || weight.dim(0) != geo.cols()) {
    shape_fail("conv2d", images.shape(), weight.shape());
  }
  const std::size_t out_channels = weight.dim(1);
  if (bias.shape() != Shape{out_channels}) shape_fail("conv2d", weight.shape(), bias.shape());
  Tensor out = add(matmul(im2col(images, kernel, padding), weight), bias);
  return reshape(out, {geo.batch, geo.out_h, geo.out_w, out_channels});
}

// ---- differentiation -----------------------------------------------------------

namespace {

Tensor accumulate(const Tensor& current, const Tensor& extra) {
  if (!current.defined()) return extra;
  return add(current, extra);
}

std::vector<Node*> topological_order(const Tensor& root) {
  std::vector<Node*> order;
  std::unordered_map<Node*, bool> seen;
  // Iterative post-order DFS: (node, next input index).
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (root.grad_fn()) {
    stack.emplace_back(root.grad_fn().get(), 0);
    seen[root.grad_fn().get()] = true;
  }
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const Tensor& in = node->inputs[next++];
      Node* child = in.defined() ? in.grad_fn().get() : nullptr;
      if (child && !seen[child]) {
        seen[child] = true;
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  std::reverse(order.begin(), order.end());
  return order;
}

struct GradTable {
  std::unordered_map<Node*, Tensor> by_node;
  std::unordered_map<TensorImpl*, Tensor> by_leaf;
};

GradTable run_backward(const Tensor& output, bool create_graph) {
  if (!output.defined()) throw GraphError("backward: undefined output");
  if (output.numel() != 1) {
    throw GraphError("backward: output must be a scalar, got shape " + to_string(output.shape()));
  }
  if (!output.requires_grad()) {
    throw GraphError("backward: output is detached from any graph (nothing requires grad)");
  }

  GradTable table;
  Tensor seed = Tensor::ones(output.shape());
  if (!output.grad_fn()) {
    table.by_leaf[output.impl()] = seed;
    return table;
  }
  table.by_node[output.grad_fn().get()] = seed;

  std::optional<NoGradGuard> no_grad;
  std::optional<EnableGradGuard> with_grad;
  if (create_graph) {
    with_grad.emplace();
  } else {
    no_grad.emplace();
  }

  for (Node* node : topological_order(output)) {
    auto it = table.by_node.find(node);
    if (it == table.by_node.end()) continue;
    if (create_graph && !node->twice_differentiable) {
      throw GraphError("second-order differentiation through primitive '" + node->op +
                       "' is not supported (first-order backward only)");
    }
    const Tensor upstream = it->second;
    std::vector<Tensor> grads = node->backward(upstream);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      const Tensor& in = node->inputs[i];
      if (!in.requires_grad() || i >= grads.size() || !grads[i].defined()) continue;
      if (grads[i].shape() != in.shape()) {
        throw ShapeError("backward of '" + node->op + "' produced gradient shape " +
                         to_string(grads[i].shape()) + " for input " + to_string(in.shape()));
      }
      if (in.grad_fn()) {
        auto& slot = table.by_node[in.grad_fn().get()];
        slot = accumulate(slot, grads[i]);
      } else {
        auto& slot = table.by_leaf[in.impl()];
        slot = accumulate(slot, grads[i]);
      }
    }
    // Intermediate gradients are no longer needed once propagated.
    if (node != output.grad_fn().get()) table.by_node.erase(node);
  }
  return table;
}

}  // namespace

void backward(const Tensor& output) {
  GradTable table = run_backward(output, false);
  for (auto& [impl, g] : table.by_leaf) {
    if (!impl->requires_grad) continue;
    if (impl->grad) {
      auto& dst = impl->grad->data;
      auto src = g.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    } else {
      impl->grad = std::make_shared<TensorImpl>();
      impl->grad->shape = impl->shape;
      impl->grad->data = g.to_vector();
    }
  }
}

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt, bool create_graph) {
  for (const Tensor& w : wrt) {
    if (!w.defined()) throw GraphError("grad: undefined differentiation target");
    if (!w.is_leaf()) throw GraphError("grad: differentiation targets must be leaf tensors");
  }
  GradTable table = run_backward(output, create_graph);
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const Tensor& w : wrt) {
    auto it = table.by_leaf.find(w.impl());
    if (it == table.by_leaf.end()) {
      out.push_back(Tensor::zeros(w.shape()));
    } else {
      out.push_back(create_graph ? it->second : it->second.detach());
    }
  }
  return out;
}

std::vector<Tensor> hvp(const MultiLossFn& loss_fn, const std::vector<Tensor>& point,
                        const std::vector<Tensor>& vector) {
  if (point.size() != vector.size()) {
    throw ShapeError("hvp: " + std::to_string(point.size()) + " points but " +
                     std::to_string(vector.size()) + " direction tensors");
  }
  for (std::size_t i = 0; i < point.size(); ++i) {
    if (point[i].shape() != vector[i].shape()) shape_fail("hvp", point[i].shape(), vector[i].shape());
  }
  EnableGradGuard enable;
  std::vector<Tensor> leaves;
  leaves.reserve(point.size());
  for (const Tensor& p : point) leaves.push_back(p.detach().set_requires_grad(true));

  Tensor loss = loss_fn(leaves);
  std::vector<Tensor> first = grad(loss, leaves, /*create_graph=*/true);
  Tensor inner;
  for (std::size_t i = 0; i < first.size(); ++i) {
    Tensor term = dot(first[i], vector[i].detach());
    inner = inner.defined() ? add(inner, term) : term;
  }
  if (!inner.defined() || !inner.requires_grad()) {
    // Gradient does not depend on the point: the Hessian vanishes.
    std::vector<Tensor> zeros;
    for (const Tensor& p : point) zeros.push_back(Tensor::zeros(p.shape()));
    return zeros;
  }
  return grad(inner, leaves, /*create_graph=*/false);
}

Tensor hvp(const LossFn& loss_fn, const Tensor& point, const Tensor& vector) {
  return hvp([&](const std::vector<Tensor>& p) { return loss_fn(p[0]); }, {point}, {vector})[0];
}

Tensor gradient(const LossFn& loss_fn, const Tensor& point) {
  EnableGradGuard enable;
  Tensor leaf = point.detach().set_requires_grad(true);
  Tensor loss = loss_fn(leaf);
  if (!loss.requires_grad()) return Tensor::zeros(point.shape());
  return grad(loss, {leaf}, false)[0];
}

}  // namespace hpr
