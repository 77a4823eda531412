#pragma once

// Dense f64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle to shared storage, like a smart pointer: copies
// alias the same data and graph node. Every primitive records a backward rule
// that is itself written in terms of primitives, so gradients can be
// differentiated again (Hessian-vector products via double backward).

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hpr {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct TensorImpl;
struct Node;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  /// Writable view. Only valid on tensors without a recorded graph node.
  std::span<double> mutable_data();
  std::vector<double> to_vector() const;
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;

  /// Accumulated gradient of a leaf after backward(); undefined if none.
  Tensor grad() const;
  void zero_grad();

  /// Same values, no graph linkage, fresh storage.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<Node>& grad_fn() const;
  TensorImpl* impl() const noexcept { return impl_.get(); }

  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::shared_ptr<TensorImpl> grad;
  std::shared_ptr<Node> grad_fn;
};

/// One recorded operation. `backward` maps the gradient of the output to one
/// gradient per input (undefined Tensor for inputs that need none).
struct Node {
  std::string op;
  std::vector<Tensor> inputs;
  BackwardFn backward;
  bool twice_differentiable = true;
};

Tensor make_tensor(Shape shape, std::vector<double> values);

/// Attaches a graph node to `out` when gradient recording is enabled and any
/// input requires a gradient. Exposed for user-defined primitives.
Tensor record(Tensor out, std::string op, std::vector<Tensor> inputs, BackwardFn backward,
              bool twice_differentiable = true);

/// Thread-local switch for graph recording.
class GradMode {
 public:
  static bool enabled() noexcept;
  static void set_enabled(bool on) noexcept;
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class EnableGradGuard {
 public:
  EnableGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(true); }
  ~EnableGradGuard() { GradMode::set_enabled(prev_); }
  EnableGradGuard(const EnableGradGuard&) = delete;
  EnableGradGuard& operator=(const EnableGradGuard&) = delete;

 private:
  bool prev_;
};

// ---- primitives -----------------------------------------------------------
//
// Binary elementwise ops accept identical shapes, a single-element operand, or
// an operand whose shape equals the other's shape without its leading axis
// (row-wise broadcast over a batch).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor relu(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sum over `axis`, removing it.
Tensor sum_axis(const Tensor& a, std::size_t axis);
/// Inserts `axis` of extent `n` by repetition; adjoint of sum_axis.
Tensor expand_axis(const Tensor& a, std::size_t axis, std::size_t n);
/// Broadcasts a single-element tensor to `shape`; adjoint of sum.
Tensor expand_scalar(const Tensor& a, Shape shape);

/// Maximum over the last axis; ties resolve to the lowest index.
Tensor max_last(const Tensor& a);
/// Index of the maximum over the last axis of a rank-1 or rank-2 tensor.
std::vector<std::size_t> argmax_last(const Tensor& a);

Tensor softmax(const Tensor& logits);

enum class Reduction { kMean, kSum, kNone };

/// Cross-entropy of softmax(logits) against integer labels, computed with a
/// stabilized log-sum-exp. logits: [B, c].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels,
                             Reduction reduction = Reduction::kMean);

Tensor l2_norm(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);

enum class Padding { kValid, kSame };

/// Patch extraction for channels-last images [B, H, W, C] with a square
/// kernel and stride 1; returns [B*Ho*Wo, k*k*C].
Tensor im2col(const Tensor& images, std::size_t kernel, Padding padding);
/// Scatter-add adjoint of im2col.
Tensor col2im(const Tensor& cols, const Shape& image_shape, std::size_t kernel, Padding padding);
/// 2-D cross-correlation. images [B,H,W,C], weight [k*k*C, Cout], bias [Cout].
Tensor conv2d(const Tensor& images, const Tensor& weight, const Tensor& bias, std::size_t kernel,
              Padding padding);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

// ---- differentiation -------------------------------------------------------

/// Accumulates d(output)/d(leaf) into every reachable leaf that requires a
/// gradient. `output` must be a scalar connected to a graph.
void backward(const Tensor& output);

/// Returns d(output)/d(w) for each w in `wrt` without touching leaf grads.
/// Unreachable targets receive zeros. With `create_graph` the returned
/// gradients are themselves differentiable.
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt,
                         bool create_graph = false);

using MultiLossFn = std::function<Tensor(const std::vector<Tensor>&)>;
using LossFn = std::function<Tensor(const Tensor&)>;

/// Hessian-vector product of a scalar loss at `point` along `vector`, computed
/// as the gradient of <grad loss, vector>.
std::vector<Tensor> hvp(const MultiLossFn& loss_fn, const std::vector<Tensor>& point,
                        const std::vector<Tensor>& vector);
Tensor hvp(const LossFn& loss_fn, const Tensor& point, const Tensor& vector);

/// Gradient of a scalar loss at `point`, detached.
Tensor gradient(const LossFn& loss_fn, const Tensor& point);

}  // namespace hpr
