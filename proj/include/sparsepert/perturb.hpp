#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "sparsepert/numerics.hpp"

namespace sparsepert {

class InvalidPerturbationError : public Error {
 public:
  using Error::Error;
};

/// The perturbation vectors together with their group labels and the block
/// (support) of each group.
struct PerturbationSet {
  int dim = 0;
  Matrix vectors;                         // m x dim, row k is perturbation k
  std::vector<int> group_of;              // m entries
  std::vector<IndexSet> block_of_group;   // sorted index sets
  bool non_overlapping = false;           // declared blockwise non-overlapping

  int size() const { return static_cast<int>(vectors.rows()); }
  int num_groups() const { return static_cast<int>(block_of_group.size()); }

  /// Throws InvalidPerturbationError if any structural invariant is broken.
  void validate() const;
};

/// Support pattern for the learner's guessed perturbations.
struct GuessMask {
  int dim = 0;
  std::vector<IndexSet> masks;  // one per guessed perturbation
  std::vector<int> group_of;

  int size() const { return static_cast<int>(masks.size()); }
  /// Common mask size, or -1 when masks differ in size.
  int sparsity() const;
  int total_slots() const;
  void validate() const;
};

namespace perturb {

/// delta_i = magnitudes[i] * e_i.
PerturbationSet make_one_sparse_set(std::span<const double> magnitudes);
/// Same, with magnitudes drawn from the default magnitude range.
PerturbationSet make_one_sparse_set(int d, std::uint64_t seed);

/// per_group vectors supported on each block of an arbitrary partition of
/// {0..d-1}; each group's restriction to its block has full rank.
PerturbationSet make_partition_set(int d, const std::vector<IndexSet>& blocks, int per_group,
                                   std::uint64_t seed);

/// Contiguous partition {0..p-1}, {p..2p-1}, ...
PerturbationSet make_blockwise_set(int d, int p, int per_group, std::uint64_t seed);

/// The d cyclic windows {i, i+1, ..., i+p-1} mod d.
PerturbationSet make_overlapping_contiguous_set(int d, int p, int per_group, std::uint64_t seed);

/// s distinct p-subsets drawn uniformly without replacement.
PerturbationSet make_random_blocks_set(int d, int p, int s, int per_group, std::uint64_t seed);

int span_dimension(const PerturbationSet& set);

/// Masks equal to the true supports.
struct ExactBlocks {};
/// Learner knows group labels and picks its own p-subset for each group.
struct AssignedBlocks {
  std::vector<IndexSet> block_of_group;
};
/// The index-th entry of enumerate_mask_candidates for this set.
struct MaskCandidate {
  int index = 0;
  int p = 1;
};
using GuessRegime = std::variant<ExactBlocks, AssignedBlocks, MaskCandidate>;

GuessMask derive_guess_masks(const PerturbationSet& set, const GuessRegime& regime);

/// All assignments of disjoint p-subsets of {0..d-1} to the d/p groups named in
/// group_of, in lexicographic order of (block of group 0, block of group 1, ...).
std::vector<GuessMask> enumerate_mask_candidates(std::span<const int> group_of, int d, int p);

/// d! / (p!)^(d/p)
std::uint64_t count_mask_candidates(int d, int p);

/// Whether blocks are pairwise disjoint and cover {0..d-1}.
bool is_partition(const std::vector<IndexSet>& blocks, int d);

std::string to_json(const PerturbationSet& set);
PerturbationSet perturbation_set_from_json(const std::string& text);

}  // namespace perturb
}  // namespace sparsepert
