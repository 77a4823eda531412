#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hpr/attacks.hpp"
#include "hpr/dataset.hpp"
#include "hpr/diagnostics.hpp"
#include "hpr/ensemble.hpp"
#include "hpr/hyperopt.hpp"
#include "hpr/model.hpp"
#include "hpr/trainer.hpp"

namespace hpr {

/// One ML instantiation: kind and number of nodes.
struct Instantiation {
  EnsembleKind kind = EnsembleKind::kCentralized;
  std::size_t nodes = 1;
  double alpha = 0.9;

  std::string label() const;
  EnsembleSpec spec(std::uint64_t partition_seed) const;
  bool operator==(const Instantiation&) const = default;
};

struct DatasetSection {
  GeneratorConfig generator;
  /// Load this dataset file instead of generating one.
  std::string path;
  double attacker_fraction = 0.25;
  double test_fraction = 0.25;
};

struct ModelSection {
  ModelKind kind = ModelKind::kMlp;
  std::vector<std::size_t> hidden = {64, 64};
  ImageShape image;
  std::size_t epochs = 80;
  std::size_t patience = 20;
  double val_fraction = 0.2;

  ModelSpec spec(std::size_t dims, std::size_t classes) const;
};

struct AttackSection {
  AttackBudget budget;
  double rho = -1.0;  // negative: epsilon / 2
  std::size_t samples = 200;
  RaMode mode = RaMode::kLiteral;
};

/// Vary one parameter; the rest stay at `defaults`.
struct AblationPlan {
  std::string param = "eta";
  std::vector<double> values = {0.005, 0.02, 0.1, 0.2};
  std::size_t repeats = 3;
  HyperParams defaults;

  void validate() const;
  HyperParams at(double value) const;
};

struct SearchSection {
  SearchConfig config;
  std::vector<Instantiation> instantiations = {{EnsembleKind::kCentralized, 1, 0.9}};
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  DatasetSection dataset;
  ModelSection model;
  std::vector<Instantiation> ensembles = {{EnsembleKind::kIid, 3, 0.9}};
  Instantiation surrogate{EnsembleKind::kFull, 3, 0.9};
  AttackSection attacks;
  AblationPlan ablation;
  SearchSection search;

  void validate() const;
  /// Missing keys keep their defaults; unknown keys are rejected.
  static ExperimentConfig from_json(const std::string& text);
  std::string to_json() const;
};

ExperimentConfig load_config(const std::filesystem::path& path);

/// Defender training data, attacker-held surrogate data and held-out test data.
struct DataSplits {
  Dataset full;
  Dataset defender;
  Dataset attacker;
  Dataset test;
};
DataSplits prepare_data(const ExperimentConfig& config);

/// First `count` rows of the test split (all rows if fewer).
std::vector<std::size_t> attack_sample_ids(const Dataset& test, std::size_t count);

EnsembleModel train_surrogates(const ExperimentConfig& config, const DataSplits& data,
                               std::size_t jobs = 1);

/// Everything one (instantiation, value, repeat) cell produced.
struct CellRecord {
  std::size_t inst_index = 0;
  Instantiation inst;
  std::string param;
  std::size_t value_index = 0;
  double value = 0.0;
  std::size_t repeat = 0;
  HyperParams hp;
  bool failed = false;
  std::string error;
  std::vector<std::size_t> sample_ids;
  std::vector<std::size_t> labels;
  std::vector<std::size_t> clean_pred;
  std::vector<AdvResult> transfer;
  std::vector<AdvResult> query;
};

/// Metrics of a cell, recomputed from its artifacts.
struct CellSummary {
  std::size_t inst_index = 0;
  Instantiation inst;
  std::string param;
  std::size_t value_index = 0;
  double value = 0.0;
  std::size_t repeat = 0;
  HyperParams hp;
  bool failed = false;
  double ca = 0.0;
  double ra_t = 0.0;
  double ra_q = 0.0;
};

std::string cell_file_name(const CellRecord& cell);
/// Header line with the cell metadata, then one line per clean prediction
/// and per AdvResult.
std::string cell_jsonl(const CellRecord& cell, RaMode mode);
CellSummary summarize_cell(const std::string& jsonl);

/// Per-(instantiation, value) rows, or with `average_nodes` per-(kind, value)
/// rows pooling every N. Mean and sample standard deviation over cells.
std::string ablation_table_csv(std::span<const CellSummary> cells, bool average_nodes);
/// Three panels (CA, RA_T, RA_Q) against the parameter value, one line per
/// kind, averaged over N.
std::string ablation_svg(std::span<const CellSummary> cells);

struct AblationResult {
  std::filesystem::path run_dir;
  std::vector<CellRecord> cells;
  std::size_t adv_total = 0;
  std::size_t violations = 0;
  std::size_t max_queries = 0;
};

/// Trains, attacks and records every cell, then writes tables and plots via
/// write_report. Cell failures are recorded and the run continues.
AblationResult run_ablation(const ExperimentConfig& config, const std::filesystem::path& run_dir,
                            std::size_t jobs = 1);

/// Rebuilds tables/*.csv and plots/*.svg from cells/*.jsonl.
void write_report(const std::filesystem::path& run_dir);

struct InstantiationSearch {
  Instantiation inst;
  SearchResult result;
  std::vector<RobustnessReport> reports;  // per trial
};

struct SearchRun {
  std::filesystem::path run_dir;
  std::vector<InstantiationSearch> runs;
};

/// One NSGA-II search per configured instantiation.
SearchRun run_search(const ExperimentConfig& config, const std::filesystem::path& run_dir,
                     std::size_t jobs = 1);

/// Front member with the largest min_ra (then CA, then lowest trial).
std::size_t best_trial(const SearchResult& result);

}  // namespace hpr
