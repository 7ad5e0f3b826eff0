#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sparsepert/dgp.hpp"
#include "sparsepert/encoder.hpp"
#include "sparsepert/oracle.hpp"
#include "sparsepert/perturb.hpp"

namespace sparsepert {

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class RegimeKind { kOneSparse, kBlockwise, kOverlappingContiguous, kRandomBlocks };
std::string to_string(RegimeKind kind);
RegimeKind regime_kind_from_string(const std::string& s);

enum class GuessKind { kExact, kCandidate };
std::string to_string(GuessKind kind);
GuessKind guess_kind_from_string(const std::string& s);

inline constexpr int kFullFidelityEpochs = 2000;
inline constexpr int kFullFidelityBatch = 10000;

/// INI schema (every key optional, defaults shown by the member initialisers):
///
///   [experiment] name, seeds (comma list), n_train, n_test
///   [dgp]        d, dist (uniform-independent | normal-blockwise), low, high,
///                rho, mode (all-m | single-random)
///   [perturb]    regime (one-sparse | blockwise | overlapping-contiguous |
///                random-blocks), p, s, per_group (0 means p),
///                guess (exact | candidate), candidate
///   [train]      learning_rate, batch_size, epochs, beta1, beta2, eps,
///                full_fidelity
struct ExperimentConfig {
  std::string name = "experiment";
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  int n_train = 10000;
  int n_test = 5000;

  int d = 6;
  LatentKind dist = LatentKind::kNormalBlockwise;
  double low = 0.0;
  double high = 1.0;
  double rho = 0.5;
  PairMode mode = PairMode::kAllM;

  RegimeKind regime = RegimeKind::kOneSparse;
  int p = 1;
  int s = 0;
  int per_group = 0;
  GuessKind guess = GuessKind::kExact;
  int candidate = 0;

  TrainConfig train;
  bool full_fidelity = false;

  LatentDistribution distribution() const;
  int group_size() const { return per_group > 0 ? per_group : p; }
  /// The training schedule after applying full_fidelity.
  TrainConfig effective_train() const;

  /// Throws ConfigError when a regime precondition fails.
  void validate() const;

  static ExperimentConfig from_ini_string(const std::string& text);
  static ExperimentConfig from_ini_file(const std::filesystem::path& path);
  /// Canonical INI text; identical configs give identical text.
  std::string to_ini() const;
  /// SHA-256 of to_ini().
  std::string hash() const;
};

struct ResultRow {
  int d = 0;
  std::string dist;
  std::string regime;
  int p = 1;
  std::string per_example_mode;
  std::uint64_t seed = 0;
  double mcc = 0.0;
  double bmcc = 0.0;  // NaN when the true blocks do not partition the latents
  double min_affine_r2 = 0.0;
  std::string structure;
  double final_loss = 0.0;
  int guess_span_rank = 0;
  double wall_time_s = 0.0;
  std::string status = "ok";  // "ok" or "error: ..."
};

/// d, dist, regime, p, per_example_mode, seed, mcc, bmcc, min_affine_r2,
/// structure, final_loss, guess_span_rank, wall_time_s, status
const std::vector<std::string>& csv_columns();
std::string csv_header();
std::string csv_line(const ResultRow& row);
/// The line without wall_time_s, which is the only column that varies across
/// reruns of the same (config, seed).
std::string csv_line_deterministic(const ResultRow& row);
std::string to_csv(const std::vector<ResultRow>& rows);

/// Everything one seed of an experiment produced.
struct SeedArtifacts {
  std::uint64_t seed = 0;
  MixingFunction mixing;
  PerturbationSet perturbations;
  Dataset train;
  Dataset test;
  EncoderModel model;
  TrainReport report;
  ResultRow row;
};

/// Builds g, the perturbation set, the train/test data and the guess mask for
/// one seed. Independent streams are derived from the seed. A given
/// perturbation set replaces the drawn one.
SeedArtifacts prepare_seed(const ExperimentConfig& config, std::uint64_t seed,
                           const PerturbationSet* perturbations = nullptr);

/// Trains art.model on the training observations, then scores it against the
/// held-out ground truth. Fills art.report and art.row.
ResultRow run_seed(const ExperimentConfig& config, SeedArtifacts& art);

/// One row per seed, in seed order, for any thread count. Per-seed failures
/// are recorded in the row's status and the run continues.
std::vector<ResultRow> run_experiment(const ExperimentConfig& config, int threads = 1,
                                      std::vector<SeedArtifacts>* artifacts = nullptr);

struct MaskSearchRun {
  oracle::MaskSearchResult search;
  SeedArtifacts artifacts;  // model holds the selected encoder
  PerturbationSet validation_perturbations;
  double bmcc = 0.0;        // selected model on the test split
  double mcc = 0.0;
};

/// Mask search on a one-sparse or blockwise config. Validation pairs come from
/// a fresh perturbation set on the same blocks, never seen in training.
MaskSearchRun run_mask_search(const ExperimentConfig& config, std::uint64_t seed, int threads = 1);

enum class TableId { kT1, kT2 };
TableId table_id_from_string(const std::string& s);

struct TableOptions {
  int seeds = 5;
  std::vector<int> d_values{6, 10, 20};
  int threads = 1;
  bool full_fidelity = false;
  std::optional<int> epochs;
};

struct TableResult {
  std::vector<ResultRow> rows;
  std::string formatted;  // mean +- std in the published layout
};

/// T1: d x {Normal, Uniform} rows; columns MCC one-sparse (all m), MCC
/// one-sparse (one random), BMCC blockwise p=2 (all m), BMCC blockwise (one
/// random). T2: d x {Normal, Uniform} rows; MCC for overlapping contiguous
/// blocks with p=2.
TableResult reproduce_table(TableId table, const TableOptions& options);

/// Base config for one cell of a table.
ExperimentConfig table_cell_config(TableId table, int d, LatentKind dist, int column);

struct OracleSuiteReport {
  std::vector<oracle::TheoremReport> theorems;
  std::vector<oracle::StationaryReport> stationary;
  std::vector<std::string> refinement_failures;
  bool ok = false;
  std::string formatted;
};

/// Theorem checks up to d_max (4..8), the stationary sweep n_balls = 2..20 and
/// the refinement examples.
OracleSuiteReport run_oracle_suite(int d_max = 8, int trials = 50, std::uint64_t seed = 0);

/// Writes config.ini, results.csv, a manifest with the config hash and format
/// versions, and one directory of binary artifacts per seed.
void save_artifacts(const std::filesystem::path& dir, const ExperimentConfig& config,
                    const std::vector<SeedArtifacts>& seeds);

struct LoadedArtifacts {
  ExperimentConfig config;
  std::string config_hash;
  std::vector<SeedArtifacts> seeds;
};

LoadedArtifacts load_artifacts(const std::filesystem::path& dir);

}  // namespace sparsepert
