#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sparsepert/dgp.hpp"
#include "sparsepert/encoder.hpp"
#include "sparsepert/numerics.hpp"

namespace sparsepert {

class EmptyValidationError : public Error {
 public:
  using Error::Error;
};

namespace eval {

inline constexpr double kDefaultStructureTol = 0.05;
inline constexpr double kDefaultSparsityTau = 0.1;

struct MccResult {
  double score = 0.0;
  /// permutation[i] = true latent matched to estimated latent i.
  std::vector<int> permutation;
};

/// Mean absolute Pearson correlation under the optimal one-to-one matching.
MccResult mcc(const Matrix& z_hat, const Matrix& z_true);

struct BmccResult {
  double score = 0.0;
  /// block_matching[t] = hat block matched to true block t.
  std::vector<int> block_matching;
  Matrix r2;  // true block x hat block; pairs of unequal size hold NaN
};

/// Blockwise MCC: mean R^2 of each hat block regressed on each equal-size true
/// block, maximised over block matchings.
BmccResult bmcc(const Matrix& z_hat, const Matrix& z_true, const std::vector<IndexSet>& true_blocks,
                const std::vector<IndexSet>& hat_blocks);

struct AffineFit {
  Matrix a;   // d x d, z_hat ~ a z + c
  Vector c;
  Vector r2;  // per estimated latent
};

AffineFit fit_affine_map(const Matrix& z_hat, const Matrix& z_true);

enum class StructureKind {
  kPermutationScaling,
  kPermutationBlockDiagonal,
  kGeneralAffine,
  kNonInvertible,
};

struct StructureTag {
  StructureKind kind = StructureKind::kGeneralAffine;
  int block_size = 1;

  std::string str() const;
  bool operator==(const StructureTag&) const = default;
};

/// Entries below rel_tol times the largest magnitude in their row or column
/// are dropped.
Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> support_pattern(const Matrix& a,
                                                                    double rel_tol);

/// Tags a recovery map by the sparsity pattern of its thresholded support.
/// Block-diagonal means each column block (contiguous groups of p by default)
/// maps into its own set of exactly p rows, disjoint across blocks.
StructureTag classify_structure(const Matrix& a, int p, double rel_tol = kDefaultStructureTol,
                                const std::vector<IndexSet>* column_blocks = nullptr);

struct SparsityVerdict {
  int perturbation = 0;
  int changed_components = 0;
  bool passed = false;
  Vector mean_displacement;
};

/// For each perturbation present in `validation`, averages |f(x_tilde) - f(x)|
/// per component; a component changes when its average exceeds tau times the
/// largest one. Passes when at most p components change.
std::vector<SparsityVerdict> sparsity_test(const EncoderModel& model, const Observations& validation,
                                           int p, double tau = kDefaultSparsityTau);

struct IdentReport {
  MccResult mcc;
  std::optional<BmccResult> bmcc;
  AffineFit affine;
  StructureTag structure;
};

/// Full report for estimated latents against the truth. BMCC is computed when
/// both block lists are given.
IdentReport identification_report(const Matrix& z_hat, const Matrix& z_true, int p,
                                   const std::vector<IndexSet>* true_blocks = nullptr,
                                   const std::vector<IndexSet>* hat_blocks = nullptr);

}  // namespace eval
}  // namespace sparsepert
