#include "sparsepert/perturb.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "sparsepert/random.hpp"

namespace sparsepert {

namespace {

constexpr int kMaxRankRetries = 100;

[[noreturn]] void invalid(const std::string& what) { throw InvalidPerturbationError(what); }

IndexSet support_of(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  IndexSet s;
  for (Eigen::Index j = 0; j < row.size(); ++j)
    if (row(j) != 0.0) s.push_back(static_cast<int>(j));
  return s;
}

void check_block(const IndexSet& block, int d, const char* who) {
  if (block.empty()) invalid(std::string(who) + ": empty block");
  for (std::size_t i = 0; i < block.size(); ++i) {
    if (block[i] < 0 || block[i] >= d) invalid(std::string(who) + ": block index out of range");
    if (i > 0 && block[i] <= block[i - 1]) invalid(std::string(who) + ": block not sorted/unique");
  }
}

}  // namespace

void PerturbationSet::validate() const {
  if (dim <= 0) invalid("PerturbationSet: dim must be positive");
  if (vectors.cols() != dim) invalid("PerturbationSet: vector length != dim");
  if (static_cast<Eigen::Index>(group_of.size()) != vectors.rows())
    invalid("PerturbationSet: group_of size != number of vectors");
  if (!vectors.allFinite()) invalid("PerturbationSet: non-finite entry");
  for (const auto& b : block_of_group) check_block(b, dim, "PerturbationSet");
  for (int k = 0; k < size(); ++k) {
    const int g = group_of[k];
    if (g < 0 || g >= num_groups()) invalid("PerturbationSet: group id out of range");
    if (support_of(vectors.row(k)) != block_of_group[g])
      invalid("PerturbationSet: perturbation " + std::to_string(k) +
              " support differs from its group's block");
  }
  if (non_overlapping && !perturb::is_partition(block_of_group, dim))
    invalid("PerturbationSet: declared non-overlapping but blocks do not partition");
}

int GuessMask::sparsity() const {
  if (masks.empty()) return -1;
  const auto p = masks.front().size();
  for (const auto& m : masks)
    if (m.size() != p) return -1;
  return static_cast<int>(p);
}

int GuessMask::total_slots() const {
  int n = 0;
  for (const auto& m : masks) n += static_cast<int>(m.size());
  return n;
}

void GuessMask::validate() const {
  if (dim <= 0) invalid("GuessMask: dim must be positive");
  if (group_of.size() != masks.size()) invalid("GuessMask: group_of size != masks size");
  std::map<int, IndexSet> mask_of_group;
  for (std::size_t k = 0; k < masks.size(); ++k) {
    check_block(masks[k], dim, "GuessMask");
    auto [it, inserted] = mask_of_group.emplace(group_of[k], masks[k]);
    if (!inserted && it->second != masks[k])
      invalid("GuessMask: perturbations in one group have different masks");
  }
}

namespace perturb {

bool is_partition(const std::vector<IndexSet>& blocks, int d) {
  std::vector<int> seen(d, 0);
  for (const auto& b : blocks) {
    for (int i : b) {
      if (i < 0 || i >= d || seen[i]++) return false;
    }
  }
  return std::all_of(seen.begin(), seen.end(), [](int c) { return c == 1; });
}

PerturbationSet make_one_sparse_set(std::span<const double> magnitudes) {
  const int d = static_cast<int>(magnitudes.size());
  if (d == 0) invalid("make_one_sparse_set: empty magnitudes");
  PerturbationSet set;
  set.dim = d;
  set.non_overlapping = true;
  set.vectors = Matrix::Zero(d, d);
  for (int i = 0; i < d; ++i) {
    if (magnitudes[i] == 0.0 || !std::isfinite(magnitudes[i]))
      invalid("make_one_sparse_set: magnitude " + std::to_string(i) + " is zero");
    set.vectors(i, i) = magnitudes[i];
    set.group_of.push_back(i);
    set.block_of_group.push_back({i});
  }
  return set;
}

PerturbationSet make_one_sparse_set(int d, std::uint64_t seed) {
  if (d <= 0) invalid("make_one_sparse_set: d must be positive");
  Rng rng(seed, 0x1e5);
  std::vector<double> mags(d);
  for (auto& m : mags) m = rng.signed_magnitude();
  return make_one_sparse_set(mags);
}

namespace {

// Fills per_group rows per block, resampling a group until its restriction to
// the block has rank |block|.
PerturbationSet fill_blocks(int d, std::vector<IndexSet> blocks, int per_group, bool non_overlapping,
                            std::uint64_t seed, const char* who) {
  if (d <= 0) invalid(std::string(who) + ": d must be positive");
  for (auto& b : blocks) {
    std::sort(b.begin(), b.end());
    check_block(b, d, who);
    if (per_group < static_cast<int>(b.size()))
      invalid(std::string(who) + ": per_group must be at least the block length");
  }
  PerturbationSet set;
  set.dim = d;
  set.non_overlapping = non_overlapping;
  set.block_of_group = blocks;
  set.vectors = Matrix::Zero(static_cast<Eigen::Index>(blocks.size()) * per_group, d);
  Rng rng(seed, 0xb10c);
  Eigen::Index row = 0;
  for (std::size_t g = 0; g < blocks.size(); ++g) {
    const auto& b = blocks[g];
    const int p = static_cast<int>(b.size());
    Matrix local(per_group, p);
    int attempt = 0;
    for (;; ++attempt) {
      if (attempt == kMaxRankRetries)
        throw RankDeficientError(std::string(who) + ": could not draw a full-rank group");
      for (int r = 0; r < per_group; ++r)
        for (int c = 0; c < p; ++c) local(r, c) = rng.signed_magnitude();
      if (numerics::numerical_rank(local) == p) break;
    }
    for (int r = 0; r < per_group; ++r, ++row) {
      for (int c = 0; c < p; ++c) set.vectors(row, b[c]) = local(r, c);
      set.group_of.push_back(static_cast<int>(g));
    }
  }
  set.validate();
  return set;
}

void check_divisible(int d, int p, const char* who) {
  if (p <= 0 || d <= 0) invalid(std::string(who) + ": d and p must be positive");
  if (d % p != 0)
    invalid(std::string(who) + ": d=" + std::to_string(d) + " is not a multiple of p=" +
            std::to_string(p));
}

}  // namespace

PerturbationSet make_partition_set(int d, const std::vector<IndexSet>& blocks, int per_group,
                                   std::uint64_t seed) {
  std::vector<IndexSet> sorted = blocks;
  for (auto& b : sorted) std::sort(b.begin(), b.end());
  if (!is_partition(sorted, d)) invalid("make_partition_set: blocks do not partition {0..d-1}");
  return fill_blocks(d, sorted, per_group, true, seed, "make_partition_set");
}

PerturbationSet make_blockwise_set(int d, int p, int per_group, std::uint64_t seed) {
  check_divisible(d, p, "make_blockwise_set");
  std::vector<IndexSet> blocks;
  for (int start = 0; start < d; start += p) {
    IndexSet b(p);
    std::iota(b.begin(), b.end(), start);
    blocks.push_back(std::move(b));
  }
  return fill_blocks(d, blocks, per_group, true, seed, "make_blockwise_set");
}

PerturbationSet make_overlapping_contiguous_set(int d, int p, int per_group, std::uint64_t seed) {
  check_divisible(d, p, "make_overlapping_contiguous_set");
  if (p >= d) invalid("make_overlapping_contiguous_set: p must be smaller than d");
  std::vector<IndexSet> blocks;
  for (int start = 0; start < d; ++start) {
    IndexSet b;
    for (int o = 0; o < p; ++o) b.push_back((start + o) % d);
    blocks.push_back(std::move(b));
  }
  return fill_blocks(d, blocks, per_group, false, seed, "make_overlapping_contiguous_set");
}

namespace {

std::uint64_t binomial(int n, int k) {
  if (k < 0 || k > n) return 0;
  std::uint64_t r = 1;
  for (int i = 1; i <= k; ++i) r = r * static_cast<std::uint64_t>(n - k + i) / i;
  return r;
}

// Calls visit(subset) for every k-subset of pool in lexicographic order.
template <class F>
void for_each_subset(const IndexSet& pool, int k, F&& visit) {
  const int n = static_cast<int>(pool.size());
  if (k > n) return;
  std::vector<int> idx(k);
  std::iota(idx.begin(), idx.end(), 0);
  IndexSet subset(k);
  while (true) {
    for (int i = 0; i < k; ++i) subset[i] = pool[idx[i]];
    visit(subset);
    int i = k - 1;
    while (i >= 0 && idx[i] == n - k + i) --i;
    if (i < 0) return;
    ++idx[i];
    for (int j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
  }
}

}  // namespace

PerturbationSet make_random_blocks_set(int d, int p, int s, int per_group, std::uint64_t seed) {
  if (d <= 0 || p <= 0 || p > d) invalid("make_random_blocks_set: need 0 < p <= d");
  const std::uint64_t total = binomial(d, p);
  if (s <= 0 || static_cast<std::uint64_t>(s) > total)
    invalid("make_random_blocks_set: s must be in [1, C(d, p)]");
  if (total > 5'000'000) invalid("make_random_blocks_set: C(d, p) too large to enumerate");
  IndexSet all(d);
  std::iota(all.begin(), all.end(), 0);
  std::vector<IndexSet> subsets;
  subsets.reserve(total);
  for_each_subset(all, p, [&](const IndexSet& b) { subsets.push_back(b); });
  Rng rng(seed, 0x5b5);
  // Partial Fisher-Yates: the first s entries are a uniform sample without replacement.
  for (int i = 0; i < s; ++i) {
    const int j = i + rng.index(static_cast<int>(subsets.size()) - i);
    std::swap(subsets[i], subsets[j]);
  }
  subsets.resize(s);
  std::sort(subsets.begin(), subsets.end());
  const bool partition = is_partition(subsets, d);
  return fill_blocks(d, subsets, per_group, partition, Rng::mix(seed, 1), "make_random_blocks_set");
}

int span_dimension(const PerturbationSet& set) {
  if (set.size() == 0) invalid("span_dimension: empty set");
  return numerics::numerical_rank(set.vectors);
}

std::uint64_t count_mask_candidates(int d, int p) {
  check_divisible(d, p, "count_mask_candidates");
  std::uint64_t count = 1;
  for (int remaining = d; remaining > 0; remaining -= p) count *= binomial(remaining, p);
  return count;
}

std::vector<GuessMask> enumerate_mask_candidates(std::span<const int> group_of, int d, int p) {
  check_divisible(d, p, "enumerate_mask_candidates");
  const int groups = d / p;
  for (int g : group_of)
    if (g < 0 || g >= groups)
      invalid("enumerate_mask_candidates: expected " + std::to_string(groups) + " groups");
  if (count_mask_candidates(d, p) > 100'000)
    invalid("enumerate_mask_candidates: candidate space too large");

  std::vector<std::vector<IndexSet>> assignments;
  std::vector<IndexSet> current;
  auto recurse = [&](auto&& self, const IndexSet& remaining) -> void {
    if (remaining.empty()) {
      assignments.push_back(current);
      return;
    }
    for_each_subset(remaining, p, [&](const IndexSet& b) {
      IndexSet rest;
      std::set_difference(remaining.begin(), remaining.end(), b.begin(), b.end(),
                          std::back_inserter(rest));
      current.push_back(b);
      self(self, rest);
      current.pop_back();
    });
  };
  IndexSet all(d);
  std::iota(all.begin(), all.end(), 0);
  recurse(recurse, all);

  std::vector<GuessMask> out;
  out.reserve(assignments.size());
  for (const auto& blocks : assignments) {
    GuessMask mask;
    mask.dim = d;
    mask.group_of.assign(group_of.begin(), group_of.end());
    for (int g : group_of) mask.masks.push_back(blocks[g]);
    out.push_back(std::move(mask));
  }
  return out;
}

GuessMask derive_guess_masks(const PerturbationSet& set, const GuessRegime& regime) {
  set.validate();
  GuessMask mask;
  mask.dim = set.dim;
  mask.group_of = set.group_of;

  if (std::holds_alternative<ExactBlocks>(regime)) {
    for (int g : set.group_of) mask.masks.push_back(set.block_of_group[g]);
  } else if (const auto* assigned = std::get_if<AssignedBlocks>(&regime)) {
    if (static_cast<int>(assigned->block_of_group.size()) != set.num_groups())
      invalid("derive_guess_masks: one block per group required");
    std::vector<IndexSet> blocks = assigned->block_of_group;
    std::set<IndexSet> distinct;
    for (std::size_t g = 0; g < blocks.size(); ++g) {
      std::sort(blocks[g].begin(), blocks[g].end());
      check_block(blocks[g], set.dim, "derive_guess_masks");
      if (blocks[g].size() != set.block_of_group[g].size())
        invalid("derive_guess_masks: assigned block size differs from the group's block");
      if (!distinct.insert(blocks[g]).second)
        invalid("derive_guess_masks: assigned blocks are not distinct");
    }
    if (set.non_overlapping && !is_partition(blocks, set.dim))
      invalid("derive_guess_masks: assigned blocks must partition for a non-overlapping set");
    for (int g : set.group_of) mask.masks.push_back(blocks[g]);
  } else {
    const auto& cand = std::get<MaskCandidate>(regime);
    if (!set.non_overlapping)
      invalid("derive_guess_masks: mask candidates need a blockwise non-overlapping set");
    for (const auto& b : set.block_of_group)
      if (static_cast<int>(b.size()) != cand.p)
        invalid("derive_guess_masks: candidate p differs from the set's block length");
    auto all = enumerate_mask_candidates(set.group_of, set.dim, cand.p);
    if (cand.index < 0 || cand.index >= static_cast<int>(all.size()))
      invalid("derive_guess_masks: candidate index out of range");
    mask = std::move(all[cand.index]);
  }
  mask.validate();
  return mask;
}

std::string to_json(const PerturbationSet& set) {
  nlohmann::json j;
  j["format"] = "sparsepert.perturbations";
  j["version"] = 1;
  j["dim"] = set.dim;
  j["non_overlapping"] = set.non_overlapping;
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index k = 0; k < set.vectors.rows(); ++k) {
    std::vector<double> r(set.vectors.row(k).begin(), set.vectors.row(k).end());
    rows.push_back(r);
  }
  j["vectors"] = rows;
  j["group_of"] = set.group_of;
  j["block_of_group"] = set.block_of_group;
  return j.dump(2);
}

PerturbationSet perturbation_set_from_json(const std::string& text) {
  PerturbationSet set;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != "sparsepert.perturbations" || j.at("version") != 1)
      invalid("perturbation_set_from_json: unsupported format or version");
    set.dim = j.at("dim").get<int>();
    set.non_overlapping = j.at("non_overlapping").get<bool>();
    const auto rows = j.at("vectors").get<std::vector<std::vector<double>>>();
    set.vectors = Matrix::Zero(static_cast<Eigen::Index>(rows.size()), set.dim);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      if (static_cast<int>(rows[k].size()) != set.dim)
        invalid("perturbation_set_from_json: row length != dim");
      for (int c = 0; c < set.dim; ++c) set.vectors(static_cast<Eigen::Index>(k), c) = rows[k][c];
    }
    set.group_of = j.at("group_of").get<std::vector<int>>();
    set.block_of_group = j.at("block_of_group").get<std::vector<IndexSet>>();
  } catch (const nlohmann::json::exception& e) {
    invalid(std::string("perturbation_set_from_json: ") + e.what());
  }
  set.validate();
  return set;
}

}  // namespace perturb
}  // namespace sparsepert
