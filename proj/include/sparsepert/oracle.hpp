#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "sparsepert/dgp.hpp"
#include "sparsepert/encoder.hpp"
#include "sparsepert/eval.hpp"
#include "sparsepert/perturb.hpp"

namespace sparsepert {

class InconsistentPartitionError : public Error {
 public:
  using Error::Error;
};

class ExhaustedCandidatesError : public Error {
 public:
  using Error::Error;
};

namespace oracle {

/// Linear instances carry exact zeros, so their support is read at a tolerance
/// near machine precision instead of the one used for trained maps.
inline constexpr double kExactStructureTol = 1e-9;
inline constexpr double kRecoveryResidualTol = 1e-10;

/// Perturbations are columns here: a * true_deltas = guessed_deltas.
struct LinearInstance {
  Matrix true_deltas;     // d x m
  Matrix guessed_deltas;  // d x m
  Matrix a;               // d x d
  Vector c;

  /// max |a * true_deltas - guessed_deltas|
  double residual() const;
};

/// guessed_deltas * true_deltas^-1 for square, invertible true_deltas.
Matrix linear_recovery_map(const Matrix& true_deltas, const Matrix& guessed_deltas);

LinearInstance make_linear_instance(const Matrix& true_deltas, const Matrix& guessed_deltas);

/// Every entry of the group-diagonal blocks of the inverse of the (square)
/// perturbation matrix is nonzero.
bool inverse_blocks_nonzero(const PerturbationSet& set, double rel_tol = kExactStructureTol);

/// Largest 2-norm condition number over the per-group blocks of a
/// non-overlapping set (rows: the group's vectors, columns: its latents).
double max_group_condition(const PerturbationSet& set);

/// Mask-search training sets are redrawn until every group block is at most
/// this ill-conditioned and inverse_blocks_nonzero holds.
inline constexpr double kMaskSearchMaxCondition = 5.0;

/// Draws make_blockwise_set(d, p, per_group, .) under salted seeds until the
/// mask-search admissibility conditions hold.
PerturbationSet admissible_blockwise_set(int d, int p, int per_group, std::uint64_t seed,
                                         int* resamples = nullptr);

enum class Theorem { kT1, kT2, kT4 };
std::string to_string(Theorem t);
Theorem theorem_from_string(const std::string& s);

struct TrialOutcome {
  bool passed = false;
  std::string structure;
  double residual = 0.0;
};

struct TheoremReport {
  Theorem theorem = Theorem::kT1;
  int d = 0;
  int p = 1;
  int trials = 0;
  int passed = 0;
  int resamples = 0;  // instances redrawn for violating the inverse-block condition
  double max_residual = 0.0;
  std::vector<TrialOutcome> outcomes;

  bool ok() const { return trials > 0 && passed == trials && max_residual <= kRecoveryResidualTol; }
};

/// T1: one-sparse perturbations, guesses one-sparse under a random
/// permutation -> permutation-scaling.
/// T2: blockwise p-sparse, guesses on a random reassignment of the blocks ->
/// permutation-block-diagonal(p).
/// T4: overlapping contiguous windows with exact masks. A generic map in the
/// feasible set must be permutation-scaling, and refining the two offset
/// partitions must leave every latent with a singleton support.
TheoremReport verify_theorem_structure(Theorem theorem, int d, int p, int trials,
                                       std::uint64_t seed);

/// (b1 & b2, b1 \ b2, b2 \ b1), each sorted.
std::tuple<IndexSet, IndexSet, IndexSet> block_refinement(const IndexSet& b1, const IndexSet& b2);

/// A fitted map together with the column blocks of the partition it was fitted
/// under. Row i of the map is an estimated latent.
struct PartitionMap {
  Matrix a;
  std::vector<IndexSet> blocks;
};

struct RefinedStructure {
  std::vector<IndexSet> row_support;     // admissible true latents per estimated latent
  std::vector<IndexSet> refined_blocks;  // distinct supports, sorted
  bool all_singletons = false;

  /// 0/1 pattern with row i set on row_support[i].
  Matrix pattern(int d) const;
};

/// Each estimated latent must load on exactly one block of every partition;
/// its admissible support is the intersection of those blocks.
RefinedStructure refine_identification(const std::vector<PartitionMap>& maps,
                                       double rel_tol = eval::kDefaultStructureTol);

struct StationaryReport {
  int n_balls = 0;
  double c = 0.0;
  Matrix a;
  std::vector<double> residuals;  // e_j, the perturbed component first
  double residual_sum = 0.0;
  double off_diagonal_ratio = 0.0;
  eval::StructureTag structure;        // of a at this n_balls
  eval::StructureTag limit_structure;  // of a as n_balls grows without bound
};

/// The symmetric stationary point of the pair loss for n_balls one-sparse
/// perturbations of size c: a[i][i] = 1/2, a[i][j] = -1/(2(n_balls - 1)).
/// Residuals are integer multiples of c/(2(n_balls - 1)) and are summed as such.
StationaryReport stationary_point_check(int n_balls, double c);

struct CandidateOutcome {
  int index = 0;
  bool passed = false;
  double final_loss = 0.0;
};

struct MaskSearchResult {
  GuessMask selected_mask;
  int selected_index = -1;
  int candidates_tried = 0;
  EncoderModel selected_model;
  TrainReport report;
  std::vector<eval::SparsityVerdict> validation_verdicts;
  std::vector<CandidateOutcome> tried;
};

/// Trains one encoder per admissible mask in lexicographic order and returns
/// the first whose model passes the sparsity test on every validation
/// perturbation. Up to `threads` candidates train at once; the selection is
/// the same for any thread count.
MaskSearchResult mask_search(const Observations& train_pairs, const Observations& validation_pairs,
                             std::span<const int> group_of, int d, int p,
                             const TrainConfig& config, std::uint64_t seed, int threads = 1,
                             double tau = eval::kDefaultSparsityTau);

}  // namespace oracle
}  // namespace sparsepert
