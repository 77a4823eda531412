#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "hpr/tensor.hpp"

namespace hpr {

enum class ModelKind { kMlp, kCnnLite };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

/// Channels-last image geometry used by cnn-lite to reinterpret flat inputs.
struct ImageShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;

  std::size_t numel() const { return height * width * channels; }
  bool operator==(const ImageShape&) const = default;
};

struct ModelSpec {
  ModelKind kind = ModelKind::kMlp;
  std::size_t input_dims = 0;
  std::size_t num_classes = 0;
  /// Hidden widths of the MLP. Empty means a linear softmax classifier.
  std::vector<std::size_t> hidden = {64, 64};
  ImageShape image;
  std::vector<std::size_t> conv_channels = {8, 16};
  std::size_t kernel = 3;
  Padding padding = Padding::kSame;

  static ModelSpec mlp(std::size_t input_dims, std::size_t num_classes,
                       std::vector<std::size_t> hidden = {64, 64});
  static ModelSpec cnn_lite(ImageShape image, std::size_t num_classes);

  /// Throws InvalidArgument when the spec is inconsistent.
  void validate() const;
  bool operator==(const ModelSpec&) const = default;
};

std::string spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const std::string& text);

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Ordered parameter list; order is the declaration order used by the
/// forward pass and by checkpoints.
struct ModelParams {
  std::vector<NamedTensor> entries;

  std::vector<Tensor> tensors() const;
  std::size_t count() const;  // total scalar parameters
  ModelParams clone() const;
  void set_requires_grad(bool on);
};

/// Fan-in scaled uniform init: weights ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in))
/// drawn from a counter-based stream keyed by (seed, layer index); biases 0.
ModelParams init_params(const ModelSpec& spec, std::uint64_t seed);

/// Logits [B, c] for inputs [B, d] under explicit parameter tensors (given in
/// declaration order). Differentiable w.r.t. both.
Tensor forward(const ModelSpec& spec, const std::vector<Tensor>& params, const Tensor& x);

/// Index of the largest logit, lowest index on ties. NaN logits raise a
/// NumericError (diverged training).
std::size_t predict_label(std::span<const double> logits);
std::vector<std::size_t> predict_labels(const Tensor& logits);

/// Anything that maps inputs to differentiable logits.
class LogitModel {
 public:
  virtual ~LogitModel() = default;
  virtual std::size_t input_dims() const = 0;
  virtual std::size_t num_classes() const = 0;
  /// x: [B, d] -> [B, c].
  virtual Tensor logits(const Tensor& x) const = 0;

  std::size_t predict(std::span<const double> x) const;
  std::vector<std::size_t> predict_batch(const Tensor& x) const;
  /// Cross-entropy of the model's logits.
  Tensor loss(const Tensor& x, std::span<const std::size_t> labels,
              Reduction reduction = Reduction::kMean) const;
};

class Classifier final : public LogitModel {
 public:
  Classifier(ModelSpec spec, ModelParams params);
  static Classifier initialize(const ModelSpec& spec, std::uint64_t seed);

  std::size_t input_dims() const override { return spec_.input_dims; }
  std::size_t num_classes() const override { return spec_.num_classes; }
  Tensor logits(const Tensor& x) const override;

  const ModelSpec& spec() const noexcept { return spec_; }
  const ModelParams& params() const noexcept { return params_; }
  ModelParams& mutable_params() noexcept { return params_; }

 private:
  ModelSpec spec_;
  ModelParams params_;
};

/// Wraps one input row as a [1, d] batch.
Tensor as_batch(std::span<const double> x);

// Checkpoint format: "RTCK", u16 version, u32 byte length of the JSON spec,
// the JSON spec, then each parameter tensor as little-endian f64 values in
// declaration order.
inline constexpr std::uint16_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Classifier& model);
Classifier parse_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Classifier& model);
Classifier load_checkpoint(const std::filesystem::path& path);

}  // namespace hpr
