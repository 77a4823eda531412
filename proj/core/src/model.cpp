#include "hpr/model.hpp"

#include <cmath>

#include <nlohmann/json.hpp>

#include "hpr/binary_io.hpp"
#include "hpr/error.hpp"
#include "hpr/rng.hpp"

namespace hpr {

using nlohmann::json;

std::string to_string(ModelKind kind) { return kind == ModelKind::kMlp ? "mlp" : "cnn-lite"; }

ModelKind parse_model_kind(const std::string& name) {
  if (name == "mlp") return ModelKind::kMlp;
  if (name == "cnn-lite" || name == "cnn") return ModelKind::kCnnLite;
  throw InvalidArgument("unknown model kind '" + name + "' (expected mlp or cnn-lite)");
}

ModelSpec ModelSpec::mlp(std::size_t input_dims, std::size_t num_classes,
                         std::vector<std::size_t> hidden) {
  ModelSpec s;
  s.kind = ModelKind::kMlp;
  s.input_dims = input_dims;
  s.num_classes = num_classes;
  s.hidden = std::move(hidden);
  return s;
}

ModelSpec ModelSpec::cnn_lite(ImageShape image, std::size_t num_classes) {
  ModelSpec s;
  s.kind = ModelKind::kCnnLite;
  s.input_dims = image.numel();
  s.num_classes = num_classes;
  s.hidden.clear();
  s.image = image;
  return s;
}

void ModelSpec::validate() const {
  if (input_dims == 0) throw InvalidArgument("model spec: input_dims must be positive");
  if (num_classes < 2) throw InvalidArgument("model spec: need at least 2 classes");
  if (kind == ModelKind::kMlp) {
    for (std::size_t h : hidden)
      if (h == 0) throw InvalidArgument("model spec: hidden widths must be positive");
    return;
  }
  if (image.numel() != input_dims) {
    throw InvalidArgument("model spec: image " + std::to_string(image.height) + "x" +
                          std::to_string(image.width) + "x" + std::to_string(image.channels) +
                          " does not match input_dims " + std::to_string(input_dims));
  }
  if (conv_channels.empty()) throw InvalidArgument("model spec: cnn-lite needs conv layers");
  for (std::size_t c : conv_channels)
    if (c == 0) throw InvalidArgument("model spec: conv channels must be positive");
  if (kernel == 0 || (padding == Padding::kSame && kernel % 2 == 0)) {
    throw InvalidArgument("model spec: kernel must be positive and odd for same padding");
  }
  if (padding == Padding::kValid) {
    const std::size_t shrink = conv_channels.size() * (kernel - 1);
    if (image.height <= shrink || image.width <= shrink) {
      throw InvalidArgument("model spec: image too small for valid convolutions");
    }
  }
}

std::string spec_to_json(const ModelSpec& spec) {
  json j;
  j["kind"] = to_string(spec.kind);
  j["input_dims"] = spec.input_dims;
  j["num_classes"] = spec.num_classes;
  j["activation"] = "relu";
  if (spec.kind == ModelKind::kMlp) {
    j["hidden"] = spec.hidden;
  } else {
    j["image"] = {spec.image.height, spec.image.width, spec.image.channels};
    j["conv_channels"] = spec.conv_channels;
    j["kernel"] = spec.kernel;
    j["padding"] = spec.padding == Padding::kSame ? "same" : "valid";
  }
  return j.dump();
}

ModelSpec spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("model spec json: ") + e.what());
  }
  try {
    ModelSpec s;
    s.kind = parse_model_kind(j.at("kind").get<std::string>());
    s.input_dims = j.at("input_dims").get<std::size_t>();
    s.num_classes = j.at("num_classes").get<std::size_t>();
    if (s.kind == ModelKind::kMlp) {
      s.hidden = j.at("hidden").get<std::vector<std::size_t>>();
    } else {
      s.hidden.clear();
      auto img = j.at("image").get<std::vector<std::size_t>>();
      if (img.size() != 3) throw FormatError("model spec json: image must have 3 extents");
      s.image = {img[0], img[1], img[2]};
      s.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
      s.kernel = j.at("kernel").get<std::size_t>();
      s.padding = j.at("padding").get<std::string>() == "valid" ? Padding::kValid : Padding::kSame;
    }
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw FormatError(std::string("model spec json: ") + e.what());
  }
}

// ---- params ------------------------------------------------------------------

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.value);
  return out;
}

std::size_t ModelParams::count() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.value.numel();
  return n;
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  for (const auto& e : entries) out.entries.push_back({e.name, e.value.detach()});
  return out;
}

void ModelParams::set_requires_grad(bool on) {
  for (auto& e : entries) e.value.set_requires_grad(on);
}

namespace {

struct LayerShape {
  std::string name;
  std::size_t fan_in;
  std::size_t fan_out;
};

std::vector<LayerShape> layer_shapes(const ModelSpec& spec) {
  std::vector<LayerShape> layers;
  if (spec.kind == ModelKind::kMlp) {
    std::size_t in = spec.input_dims;
    std::size_t idx = 0;
    for (std::size_t h : spec.hidden) {
      layers.push_back({"dense" + std::to_string(idx++), in, h});
      in = h;
    }
    layers.push_back({"dense" + std::to_string(idx), in, spec.num_classes});
    return layers;
  }
  std::size_t channels = spec.image.channels;
  std::size_t h = spec.image.height, w = spec.image.width;
  const std::size_t shrink = spec.padding == Padding::kSame ? 0 : spec.kernel - 1;
  for (std::size_t i = 0; i < spec.conv_channels.size(); ++i) {
    layers.push_back(
        {"conv" + std::to_string(i), spec.kernel * spec.kernel * channels, spec.conv_channels[i]});
    channels = spec.conv_channels[i];
    h -= shrink;
    w -= shrink;
  }
  layers.push_back({"dense", h * w * channels, spec.num_classes});
  return layers;
}

}  // namespace

ModelParams init_params(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  ModelParams params;
  const auto layers = layer_shapes(spec);
  for (std::size_t li = 0; li < layers.size(); ++li) {
    const auto& layer = layers[li];
    CounterRng rng(derive_key(seed, {0x1A7E4ULL, li}));
    const double bound = std::sqrt(6.0 / static_cast<double>(layer.fan_in));
    std::vector<double> w(layer.fan_in * layer.fan_out);
    for (double& v : w) v = (2.0 * rng.uniform() - 1.0) * bound;
    params.entries.push_back(
        {layer.name + ".weight", Tensor::from({layer.fan_in, layer.fan_out}, std::move(w))});
    params.entries.push_back({layer.name + ".bias", Tensor::zeros({layer.fan_out})});
  }
  return params;
}

Tensor forward(const ModelSpec& spec, const std::vector<Tensor>& params, const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != spec.input_dims) {
    throw ShapeError("model forward: expected input [batch, " + std::to_string(spec.input_dims) +
                     "], got " + to_string(x.shape()));
  }
  const auto layers = layer_shapes(spec);
  if (params.size() != 2 * layers.size()) {
    throw ShapeError("model forward: expected " + std::to_string(2 * layers.size()) +
                     " parameter tensors, got " + std::to_string(params.size()));
  }
  const std::size_t batch = x.dim(0);
  if (spec.kind == ModelKind::kMlp) {
    Tensor h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = add(matmul(h, params[2 * i]), params[2 * i + 1]);
      if (i + 1 < layers.size()) h = relu(h);
    }
    return h;
  }
  Tensor h = reshape(x, {batch, spec.image.height, spec.image.width, spec.image.channels});
  const std::size_t nconv = spec.conv_channels.size();
  for (std::size_t i = 0; i < nconv; ++i) {
    h = relu(conv2d(h, params[2 * i], params[2 * i + 1], spec.kernel, spec.padding));
  }
  h = reshape(h, {batch, h.numel() / batch});
  return add(matmul(h, params[2 * nconv]), params[2 * nconv + 1]);
}

std::size_t predict_label(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("predict: empty logit vector");
  std::size_t best = 0;
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (std::isnan(logits[j])) throw NumericError("predict: NaN logit (diverged model?)");
    if (logits[j] > logits[best]) best = j;
  }
  return best;
}

std::vector<std::size_t> predict_labels(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("predict: expected logits [batch, classes]");
  const std::size_t rows = logits.dim(0), c = logits.dim(1);
  auto d = logits.data();
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) out[r] = predict_label(d.subspan(r * c, c));
  return out;
}

Tensor as_batch(std::span<const double> x) {
  return Tensor::from({1, x.size()}, std::vector<double>(x.begin(), x.end()));
}

std::size_t LogitModel::predict(std::span<const double> x) const {
  NoGradGuard no_grad;
  return predict_label(logits(as_batch(x)).data());
}

std::vector<std::size_t> LogitModel::predict_batch(const Tensor& x) const {
  NoGradGuard no_grad;
  return predict_labels(logits(x));
}

Tensor LogitModel::loss(const Tensor& x, std::span<const std::size_t> labels,
                        Reduction reduction) const {
  return softmax_cross_entropy(logits(x), labels, reduction);
}

// ---- Classifier ----------------------------------------------------------------

Classifier::Classifier(ModelSpec spec, ModelParams params)
    : spec_(std::move(spec)), params_(std::move(params)) {
  spec_.validate();
  const auto layers = layer_shapes(spec_);
  if (params_.entries.size() != 2 * layers.size()) {
    throw ShapeError("classifier: parameter count does not match spec");
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Shape w{layers[i].fan_in, layers[i].fan_out};
    const Shape b{layers[i].fan_out};
    if (params_.entries[2 * i].value.shape() != w || params_.entries[2 * i + 1].value.shape() != b) {
      throw ShapeError("classifier: parameter '" + params_.entries[2 * i].name +
                       "' has shape " + to_string(params_.entries[2 * i].value.shape()) +
                       ", expected " + to_string(w));
    }
  }
}

Classifier Classifier::initialize(const ModelSpec& spec, std::uint64_t seed) {
  return Classifier(spec, init_params(spec, seed));
}

Tensor Classifier::logits(const Tensor& x) const { return forward(spec_, params_.tensors(), x); }

// ---- checkpoints -------------------------------------------------------------------

std::string serialize_checkpoint(const Classifier& model) {
  io::ByteWriter w;
  w.raw("RTCK");
  w.u16(kCheckpointVersion);
  const std::string spec = spec_to_json(model.spec());
  w.u32(static_cast<std::uint32_t>(spec.size()));
  w.raw(spec);
  for (const auto& e : model.params().entries) w.f64s(e.value.data());
  return w.bytes();
}

Classifier parse_checkpoint(std::string_view bytes) {
  io::ByteReader r(bytes, "checkpoint");
  if (r.raw(4) != "RTCK") throw FormatError("checkpoint: bad magic (expected RTCK)");
  const std::uint16_t version = r.u16();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t len = r.u32();
  ModelSpec spec = spec_from_json(std::string(r.raw(len)));
  ModelParams params = init_params(spec, 0);
  for (auto& e : params.entries) {
    auto dst = e.value.mutable_data();
    for (double& v : dst) v = r.f64();
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  return Classifier(std::move(spec), std::move(params));
}

void save_checkpoint(const std::filesystem::path& path, const Classifier& model) {
  io::write_file(path, serialize_checkpoint(model));
}

Classifier load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(io::read_file(path));
}

}  // namespace hpr
