#include "hpr/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>

#include "hpr/binary_io.hpp"
#include "hpr/error.hpp"

namespace hpr {

using nlohmann::json;

Tensor Dataset::inputs() const { return Tensor::from({size(), dims}, features); }

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  std::vector<double> out(indices.size() * dims);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto r = row(indices[i]);
    std::copy(r.begin(), r.end(), out.begin() + static_cast<std::ptrdiff_t>(i * dims));
  }
  return Tensor::from({indices.size(), dims}, std::move(out));
}

std::vector<std::size_t> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) out[i] = labels[indices[i]];
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices, std::string subset_name) const {
  Dataset out;
  out.name = subset_name.empty() ? name : std::move(subset_name);
  out.seed = seed;
  out.dims = dims;
  out.num_classes = num_classes;
  out.features.reserve(indices.size() * dims);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) {
    if (i >= size()) throw InvalidArgument("dataset subset: index out of range");
    auto r = row(i);
    out.features.insert(out.features.end(), r.begin(), r.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (std::size_t y : labels) ++counts.at(y);
  return counts;
}

void Dataset::validate(bool require_all_classes) const {
  if (features.size() != labels.size() * dims) {
    throw FormatError("dataset: feature count does not match N*d");
  }
  for (std::size_t y : labels)
    if (y >= num_classes) throw FormatError("dataset: label out of range");
  for (double v : features)
    if (!(v >= 0.0 && v <= 1.0)) throw FormatError("dataset: feature outside [0,1]");
  if (require_all_classes) {
    auto counts = class_counts();
    for (std::size_t k = 0; k < counts.size(); ++k)
      if (counts[k] == 0) throw FormatError("dataset: class " + std::to_string(k) + " is empty");
  }
}

Dataset generate(const GeneratorConfig& config) {
  if (config.classes < 2) throw InvalidArgument("generate: need at least 2 classes");
  if (config.dims < 2) throw InvalidArgument("generate: need at least 2 dimensions");
  if (config.per_class == 0) throw InvalidArgument("generate: per_class must be positive");
  if (!(config.spread > 0.0) || !std::isfinite(config.spread)) {
    throw InvalidArgument("generate: spread must be positive (degenerate mixture)");
  }
  const std::size_t c = config.classes, d = config.dims, n = c * config.per_class;

  std::normal_distribution<double> normal(0.0, 1.0);
  CounterRng mean_rng(derive_key(config.seed, {0xD5E7ULL, 0}));
  std::vector<double> means(c * d);
  for (std::size_t k = 0; k < c; ++k) {
    double norm = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      means[k * d + j] = normal(mean_rng);
      norm += means[k * d + j] * means[k * d + j];
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < d; ++j) means[k * d + j] /= norm;
  }

  // Interleave classes in a seeded random order.
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i % c;
  CounterRng shuffle_rng(derive_key(config.seed, {0xD5E7ULL, 1}));
  std::shuffle(order.begin(), order.end(), shuffle_rng);

  CounterRng noise_rng(derive_key(config.seed, {0xD5E7ULL, 2}));
  Dataset ds;
  ds.name = config.name;
  ds.seed = config.seed;
  ds.dims = d;
  ds.num_classes = c;
  ds.generator = config;
  ds.features.resize(n * d);
  ds.labels = order;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      ds.features[i * d + j] = means[order[i] * d + j] + config.spread * normal(noise_rng);

  for (std::size_t j = 0; j < d; ++j) {
    double lo = ds.features[j], hi = ds.features[j];
    for (std::size_t i = 0; i < n; ++i) {
      lo = std::min(lo, ds.features[i * d + j]);
      hi = std::max(hi, ds.features[i * d + j]);
    }
    const double range = hi - lo;
    for (std::size_t i = 0; i < n; ++i) {
      double& v = ds.features[i * d + j];
      v = range > 0.0 ? std::clamp((v - lo) / range, 0.0, 1.0) : 0.5;
    }
  }
  return ds;
}

Split split_validation(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw InvalidArgument("split_validation: fraction must lie in (0, 1)");
  }
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);

  Split out;
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& idx = by_class[k];
    if (idx.empty()) continue;
    if (idx.size() < 2) {
      throw InvalidArgument("split_validation: class " + std::to_string(k) +
                            " has fewer than 2 samples");
    }
    CounterRng rng(derive_key(seed, {0x5B117ULL, k}));
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_val =
        static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    out.val_indices.insert(out.val_indices.end(), idx.begin(),
                           idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    out.train_indices.insert(out.train_indices.end(),
                             idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  }
  std::sort(out.val_indices.begin(), out.val_indices.end());
  std::sort(out.train_indices.begin(), out.train_indices.end());
  out.train = ds.subset(out.train_indices, ds.name + "/train");
  out.val = ds.subset(out.val_indices, ds.name + "/val");
  return out;
}

// ---- partitioning ---------------------------------------------------------------

std::string to_string(PartitionScheme scheme) {
  switch (scheme) {
    case PartitionScheme::kCentralized:
      return "centralized";
    case PartitionScheme::kFullReplicated:
      return "full-replicated";
    case PartitionScheme::kIidDisjoint:
      return "iid-disjoint";
    case PartitionScheme::kDirichlet:
      return "dirichlet";
  }
  return "?";
}

PartitionScheme parse_partition_scheme(const std::string& name) {
  if (name == "centralized") return PartitionScheme::kCentralized;
  if (name == "full-replicated" || name == "full") return PartitionScheme::kFullReplicated;
  if (name == "iid-disjoint" || name == "iid") return PartitionScheme::kIidDisjoint;
  if (name == "dirichlet" || name == "non-iid") return PartitionScheme::kDirichlet;
  throw InvalidArgument("unknown partition scheme '" + name + "'");
}

void PartitionSpec::validate() const {
  if (nodes < 1) throw InvalidArgument("partition: need at least one node");
  if (scheme == PartitionScheme::kCentralized && nodes != 1) {
    throw InvalidArgument("partition: centralized scheme requires exactly one node");
  }
  if (scheme == PartitionScheme::kDirichlet && !(alpha > 0.0)) {
    throw InvalidArgument("partition: dirichlet alpha must be positive");
  }
}

std::vector<double> sample_dirichlet(double alpha, std::size_t n, CounterRng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(n);
  double total = 0.0;
  for (double& v : p) total += (v = gamma(rng));
  if (!(total > 0.0)) {
    // All draws underflowed (tiny alpha): put the mass on one uniform node.
    std::fill(p.begin(), p.end(), 0.0);
    p[rng.below(n)] = 1.0;
    return p;
  }
  for (double& v : p) v /= total;
  return p;
}

std::vector<std::vector<std::size_t>> partition_indices(const Dataset& ds,
                                                        const PartitionSpec& spec) {
  spec.validate();
  const std::size_t n = ds.size();
  std::vector<std::vector<std::size_t>> parts(spec.nodes);
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);

  switch (spec.scheme) {
    case PartitionScheme::kCentralized:
    case PartitionScheme::kFullReplicated:
      for (auto& p : parts) p = all;
      break;
    case PartitionScheme::kIidDisjoint: {
      CounterRng rng(derive_key(spec.seed, {0x9A27ULL}));
      std::shuffle(all.begin(), all.end(), rng);
      const std::size_t base = n / spec.nodes, extra = n % spec.nodes;
      std::size_t pos = 0;
      for (std::size_t i = 0; i < spec.nodes; ++i) {
        const std::size_t len = base + (i < extra ? 1 : 0);
        parts[i].assign(all.begin() + static_cast<std::ptrdiff_t>(pos),
                        all.begin() + static_cast<std::ptrdiff_t>(pos + len));
        pos += len;
      }
      break;
    }
    case PartitionScheme::kDirichlet: {
      std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
      for (std::size_t i = 0; i < n; ++i) by_class[ds.labels[i]].push_back(i);
      for (std::size_t k = 0; k < by_class.size(); ++k) {
        CounterRng rng(derive_key(spec.seed, {0xD1A1ULL, k}));
        const auto p = sample_dirichlet(spec.alpha, spec.nodes, rng);
        std::discrete_distribution<std::size_t> pick(p.begin(), p.end());
        for (std::size_t i : by_class[k]) parts[pick(rng)].push_back(i);
      }
      break;
    }
  }
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].empty()) {
      throw InvalidArgument("partition: node " + std::to_string(i) +
                            " received no samples; choose a different partition seed");
    }
    std::sort(parts[i].begin(), parts[i].end());
  }
  return parts;
}

std::vector<Dataset> partition(const Dataset& ds, const PartitionSpec& spec) {
  const auto parts = partition_indices(ds, spec);
  std::vector<Dataset> out;
  out.reserve(parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    out.push_back(ds.subset(parts[i], ds.name + "/node" + std::to_string(i)));
  }
  return out;
}

// ---- file format ---------------------------------------------------------------------

std::string serialize_dataset(const Dataset& ds) {
  io::ByteWriter w;
  w.raw("DSET");
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.dims));
  w.u32(static_cast<std::uint32_t>(ds.num_classes));
  w.f64s(ds.features);
  for (std::size_t y : ds.labels) w.u32(static_cast<std::uint32_t>(y));
  return w.bytes();
}

Dataset parse_dataset(std::string_view bytes) {
  io::ByteReader r(bytes, "dataset");
  if (r.raw(4) != "DSET") throw FormatError("dataset: bad magic (expected DSET)");
  const std::uint16_t version = r.u16();
  if (version != kDatasetVersion) {
    throw FormatError("dataset: unsupported version " + std::to_string(version));
  }
  Dataset ds;
  const std::size_t n = r.u32();
  ds.dims = r.u32();
  ds.num_classes = r.u32();
  ds.features.resize(n * ds.dims);
  for (double& v : ds.features) v = r.f64();
  ds.labels.resize(n);
  for (std::size_t& y : ds.labels) y = r.u32();
  if (r.remaining() != 0) throw FormatError("dataset: trailing bytes");
  ds.validate();
  return ds;
}

std::string dataset_manifest(const Dataset& ds) {
  json j;
  j["name"] = ds.name;
  j["seed"] = ds.seed;
  j["size"] = ds.size();
  j["dims"] = ds.dims;
  j["classes"] = ds.num_classes;
  if (ds.generator) {
    const auto& g = *ds.generator;
    j["generator"] = {{"kind", "gaussian-mixture"},
                      {"classes", g.classes},
                      {"dims", g.dims},
                      {"per_class", g.per_class},
                      {"spread", g.spread},
                      {"seed", g.seed}};
  }
  return j.dump(2) + "\n";
}

std::filesystem::path manifest_path(const std::filesystem::path& dataset_path) {
  return std::filesystem::path(dataset_path.string() + ".json");
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds) {
  io::write_file(path, serialize_dataset(ds));
  io::write_file(manifest_path(path), dataset_manifest(ds));
}

Dataset load_dataset(const std::filesystem::path& path) {
  Dataset ds = parse_dataset(io::read_file(path));
  const auto mpath = manifest_path(path);
  if (std::filesystem::exists(mpath)) {
    try {
      const json j = json::parse(io::read_file(mpath));
      ds.name = j.value("name", path.stem().string());
      ds.seed = j.value("seed", std::uint64_t{0});
      if (j.contains("generator")) {
        const auto& g = j["generator"];
        ds.generator = GeneratorConfig{g.at("classes").get<std::size_t>(),
                                       g.at("dims").get<std::size_t>(),
                                       g.at("per_class").get<std::size_t>(),
                                       g.at("spread").get<double>(),
                                       g.at("seed").get<std::uint64_t>(), ds.name};
      }
    } catch (const json::exception& e) {
      throw FormatError("dataset manifest " + mpath.string() + ": " + e.what());
    }
  } else {
    ds.name = path.stem().string();
  }
  return ds;
}

}  // namespace hpr
