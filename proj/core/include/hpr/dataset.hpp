#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hpr/rng.hpp"
#include "hpr/tensor.hpp"

namespace hpr {

/// Parameters of the Gaussian-mixture generator, recorded in the manifest.
struct GeneratorConfig {
  std::size_t classes = 10;
  std::size_t dims = 32;
  std::size_t per_class = 200;
  double spread = 0.25;
  std::uint64_t seed = 0;
  std::string name = "gaussian-mixture";
};

/// Labelled feature matrix, features in [0, 1].
struct Dataset {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t dims = 0;
  std::size_t num_classes = 0;
  std::vector<double> features;  // row-major, size() x dims
  std::vector<std::size_t> labels;
  std::optional<GeneratorConfig> generator;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::span<const double> row(std::size_t i) const {
    return {features.data() + i * dims, dims};
  }

  /// All rows as a [N, d] tensor.
  Tensor inputs() const;
  /// Selected rows as a [k, d] tensor.
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> gather_labels(std::span<const std::size_t> indices) const;
  Dataset subset(std::span<const std::size_t> indices, std::string subset_name = {}) const;
  std::vector<std::size_t> class_counts() const;

  /// Checks shape consistency, label range and the [0, 1] feature box. With
  /// `require_all_classes`, also that every class occurs.
  void validate(bool require_all_classes = false) const;
};

/// Gaussian mixture: class means are random points on the unit hypersphere,
/// isotropic noise with std `spread`, then per-feature min-max normalisation
/// to [0, 1]. Deterministic in `config.seed`.
Dataset generate(const GeneratorConfig& config);

struct Split {
  Dataset train;
  Dataset val;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> val_indices;
};

/// Stratified split: round(fraction * n_k) samples of every class go to the
/// validation part. Index lists are sorted ascending.
Split split_validation(const Dataset& ds, double fraction, std::uint64_t seed);

enum class PartitionScheme { kCentralized, kFullReplicated, kIidDisjoint, kDirichlet };

std::string to_string(PartitionScheme scheme);
PartitionScheme parse_partition_scheme(const std::string& name);

struct PartitionSpec {
  PartitionScheme scheme = PartitionScheme::kCentralized;
  std::size_t nodes = 1;
  double alpha = 0.9;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Index sets per node. Disjoint and covering except for kFullReplicated.
std::vector<std::vector<std::size_t>> partition_indices(const Dataset& ds,
                                                        const PartitionSpec& spec);
std::vector<Dataset> partition(const Dataset& ds, const PartitionSpec& spec);

/// One draw from Dir(alpha * 1_n) via normalised Gamma(alpha, 1) variates.
std::vector<double> sample_dirichlet(double alpha, std::size_t n, CounterRng& rng);

// Dataset file: "DSET", u16 version, u32 N, u32 d, u32 c, N*d f64 features,
// N u32 labels, all little-endian. The manifest sidecar lives at
// "<path>.json".
inline constexpr std::uint16_t kDatasetVersion = 1;

std::string serialize_dataset(const Dataset& ds);
Dataset parse_dataset(std::string_view bytes);
std::string dataset_manifest(const Dataset& ds);
void save_dataset(const std::filesystem::path& path, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& path);
std::filesystem::path manifest_path(const std::filesystem::path& dataset_path);

}  // namespace hpr
