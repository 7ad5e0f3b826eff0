#include "sparsepert/oracle.hpp"

#include <algorithm>
#include <iterator>
#include <limits>
#include <numeric>
#include <set>
#include <thread>

#include "sparsepert/random.hpp"

namespace sparsepert::oracle {

double LinearInstance::residual() const {
  return numerics::max_abs(a * true_deltas - guessed_deltas);
}

Matrix linear_recovery_map(const Matrix& true_deltas, const Matrix& guessed_deltas) {
  if (true_deltas.rows() != true_deltas.cols())
    throw DimensionError("linear_recovery_map: true perturbations must form a square matrix");
  if (guessed_deltas.rows() != true_deltas.rows() || guessed_deltas.cols() != true_deltas.cols())
    throw DimensionError("linear_recovery_map: guessed and true perturbations differ in shape");
  return guessed_deltas * numerics::invert(true_deltas);
}

LinearInstance make_linear_instance(const Matrix& true_deltas, const Matrix& guessed_deltas) {
  LinearInstance inst;
  inst.true_deltas = true_deltas;
  inst.guessed_deltas = guessed_deltas;
  inst.a = linear_recovery_map(true_deltas, guessed_deltas);
  inst.c = Vector::Zero(true_deltas.rows());
  return inst;
}

namespace {
constexpr int kMaxResamples = 100;
}  // namespace

bool inverse_blocks_nonzero(const PerturbationSet& set, double rel_tol) {
  set.validate();
  if (set.size() != set.dim) throw DimensionError("inverse_blocks_nonzero: need m = d");
  // Rows of the inverse follow perturbations, columns follow latents.
  const Matrix inv = numerics::invert(Matrix(set.vectors.transpose()));
  const double floor = rel_tol * numerics::max_abs(inv);
  for (int k = 0; k < set.size(); ++k)
    for (int i : set.block_of_group[set.group_of[k]])
      if (!(std::abs(inv(k, i)) > floor)) return false;
  return true;
}

double max_group_condition(const PerturbationSet& set) {
  set.validate();
  if (!set.non_overlapping) throw DimensionError("max_group_condition: needs a non-overlapping set");
  double worst = 0.0;
  for (int g = 0; g < set.num_groups(); ++g) {
    const IndexSet& cols = set.block_of_group[g];
    std::vector<int> rows;
    for (int k = 0; k < set.size(); ++k)
      if (set.group_of[k] == g) rows.push_back(k);
    const Matrix block = set.vectors(rows, cols);
    const Vector sv = Eigen::JacobiSVD<Matrix>(block).singularValues();
    const double low = sv(sv.size() - 1);
    worst = std::max(worst, low > 0.0 ? sv(0) / low : std::numeric_limits<double>::infinity());
  }
  return worst;
}

PerturbationSet admissible_blockwise_set(int d, int p, int per_group, std::uint64_t seed,
                                         int* resamples) {
  for (int attempt = 0; attempt < kMaxResamples; ++attempt) {
    PerturbationSet set = perturb::make_blockwise_set(d, p, per_group, Rng::mix(seed, attempt));
    const bool square = set.size() == set.dim;
    if (max_group_condition(set) <= kMaskSearchMaxCondition && (!square || inverse_blocks_nonzero(set))) {
      if (resamples) *resamples = attempt;
      return set;
    }
  }
  throw RankDeficientError("admissible_blockwise_set: no well-conditioned draw");
}

std::string to_string(Theorem t) {
  switch (t) {
    case Theorem::kT1:
      return "T1";
    case Theorem::kT2:
      return "T2";
    case Theorem::kT4:
      return "T4";
  }
  return "?";
}

Theorem theorem_from_string(const std::string& s) {
  if (s == "T1" || s == "t1") return Theorem::kT1;
  if (s == "T2" || s == "t2") return Theorem::kT2;
  if (s == "T4" || s == "t4") return Theorem::kT4;
  throw Error("unknown theorem '" + s + "'");
}

namespace {

// Columns are perturbations; entries outside each mask are zero.
Matrix fill_masks(const GuessMask& mask, Rng& rng) {
  Matrix out = Matrix::Zero(mask.dim, mask.size());
  for (int k = 0; k < mask.size(); ++k)
    for (int i : mask.masks[k]) out(i, k) = rng.normal();
  return out;
}

std::vector<int> random_permutation(int n, Rng& rng) {
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  return perm;
}

TrialOutcome t1_trial(int d, std::uint64_t seed) {
  const PerturbationSet pset = perturb::make_one_sparse_set(d, seed);
  Rng rng(seed, 0x71);
  const std::vector<int> perm = random_permutation(d, rng);
  Matrix guessed = Matrix::Zero(d, d);
  for (int k = 0; k < d; ++k) guessed(perm[k], k) = rng.signed_magnitude();
  const auto inst = make_linear_instance(pset.vectors.transpose(), guessed);
  const auto tag = eval::classify_structure(inst.a, 1, kExactStructureTol);
  return {tag.kind == eval::StructureKind::kPermutationScaling, tag.str(), inst.residual()};
}

TrialOutcome t2_trial(int d, int p, std::uint64_t seed, int& resamples) {
  PerturbationSet pset;
  for (int attempt = 0;; ++attempt) {
    if (attempt == kMaxResamples)
      throw RankDeficientError("verify_theorem_structure: no instance with nonzero inverse blocks");
    pset = perturb::make_blockwise_set(d, p, p, Rng::mix(seed, attempt));
    if (inverse_blocks_nonzero(pset)) break;
    ++resamples;
  }
  Rng rng(seed, 0x72);
  const std::vector<int> perm = random_permutation(pset.num_groups(), rng);
  perturb::AssignedBlocks assigned;
  for (int g = 0; g < pset.num_groups(); ++g) assigned.block_of_group.push_back(pset.block_of_group[perm[g]]);
  const GuessMask mask = perturb::derive_guess_masks(pset, assigned);
  const auto inst = make_linear_instance(pset.vectors.transpose(), fill_masks(mask, rng));
  const auto tag = eval::classify_structure(inst.a, p, kExactStructureTol, &pset.block_of_group);
  return {tag == eval::StructureTag{eval::StructureKind::kPermutationBlockDiagonal, p}, tag.str(),
          inst.residual()};
}

// Rows of the right singular basis spanning the null space of c.
Matrix null_space(const Matrix& c, int d) {
  if (c.rows() == 0) return Matrix::Identity(d, d);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(c, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  const double tol = numerics::kDefaultRankTol * (sv.size() ? sv(0) : 0.0);
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > tol) ++rank;
  return svd.matrixV().rightCols(d - rank).transpose();
}

TrialOutcome t4_trial(int d, int p, std::uint64_t seed) {
  const PerturbationSet pset = perturb::make_overlapping_contiguous_set(d, p, p, seed);
  const GuessMask mask = perturb::derive_guess_masks(pset, perturb::ExactBlocks{});
  const Matrix deltas = pset.vectors.transpose();
  Rng rng(seed, 0x74);

  // Generic member of {A : A delta_k is supported on mask_k for every k}.
  Matrix a(d, d);
  for (int i = 0; i < d; ++i) {
    std::vector<int> outside;
    for (int k = 0; k < pset.size(); ++k)
      if (!std::binary_search(mask.masks[k].begin(), mask.masks[k].end(), i)) outside.push_back(k);
    Matrix c(static_cast<Eigen::Index>(outside.size()), d);
    for (std::size_t r = 0; r < outside.size(); ++r)
      c.row(static_cast<Eigen::Index>(r)) = pset.vectors.row(outside[r]);
    const Matrix basis = null_space(c, d);
    const Vector w = rng.normal_matrix(basis.rows(), 1).col(0);
    a.row(i) = w.transpose() * basis;
  }
  const Matrix image = a * deltas;
  double residual = 0.0;
  for (int k = 0; k < pset.size(); ++k)
    for (int i = 0; i < d; ++i)
      if (!std::binary_search(mask.masks[k].begin(), mask.masks[k].end(), i))
        residual = std::max(residual, std::abs(image(i, k)));
  const auto tag = eval::classify_structure(a, 1, kExactStructureTol);
  bool passed = tag.kind == eval::StructureKind::kPermutationScaling;

  // Each offset partition alone is a blockwise instance; refine across them.
  std::vector<PartitionMap> maps;
  for (int offset = 0; offset < p; ++offset) {
    std::vector<int> groups;
    for (int g = offset; g < d; g += p) groups.push_back(g);
    std::vector<int> cols;
    PartitionMap pm;
    for (int g : groups) {
      pm.blocks.push_back(pset.block_of_group[g]);
      for (int k = 0; k < pset.size(); ++k)
        if (pset.group_of[k] == g) cols.push_back(k);
    }
    Matrix part(d, static_cast<Eigen::Index>(cols.size()));
    Matrix guess = Matrix::Zero(d, part.cols());
    for (std::size_t j = 0; j < cols.size(); ++j) {
      part.col(static_cast<Eigen::Index>(j)) = deltas.col(cols[j]);
      for (int i : mask.masks[cols[j]]) guess(i, static_cast<Eigen::Index>(j)) = rng.normal();
    }
    const auto inst = make_linear_instance(part, guess);
    residual = std::max(residual, inst.residual());
    pm.a = inst.a;
    maps.push_back(std::move(pm));
  }
  const RefinedStructure refined = refine_identification(maps, kExactStructureTol);
  const auto refined_tag = eval::classify_structure(refined.pattern(d), 1, kExactStructureTol);
  passed = passed && refined.all_singletons &&
           refined_tag.kind == eval::StructureKind::kPermutationScaling;
  return {passed, tag.str(), residual};
}

}  // namespace

TheoremReport verify_theorem_structure(Theorem theorem, int d, int p, int trials,
                                       std::uint64_t seed) {
  TheoremReport report;
  report.theorem = theorem;
  report.d = d;
  report.p = theorem == Theorem::kT1 ? 1 : p;
  report.trials = trials;
  for (int t = 0; t < trials; ++t) {
    const std::uint64_t trial_seed = Rng::mix(seed, static_cast<std::uint64_t>(t));
    TrialOutcome outcome;
    try {
      switch (theorem) {
        case Theorem::kT1:
          outcome = t1_trial(d, trial_seed);
          break;
        case Theorem::kT2:
          outcome = t2_trial(d, p, trial_seed, report.resamples);
          break;
        case Theorem::kT4:
          outcome = t4_trial(d, p, trial_seed);
          break;
      }
    } catch (const Error& e) {
      outcome = {false, std::string("error: ") + e.what(), 0.0};
    }
    report.max_residual = std::max(report.max_residual, outcome.residual);
    if (outcome.passed && outcome.residual <= kRecoveryResidualTol) ++report.passed;
    report.outcomes.push_back(std::move(outcome));
  }
  return report;
}

std::tuple<IndexSet, IndexSet, IndexSet> block_refinement(const IndexSet& b1, const IndexSet& b2) {
  IndexSet s1 = b1, s2 = b2;
  std::sort(s1.begin(), s1.end());
  std::sort(s2.begin(), s2.end());
  IndexSet both, only1, only2;
  std::set_intersection(s1.begin(), s1.end(), s2.begin(), s2.end(), std::back_inserter(both));
  std::set_difference(s1.begin(), s1.end(), s2.begin(), s2.end(), std::back_inserter(only1));
  std::set_difference(s2.begin(), s2.end(), s1.begin(), s1.end(), std::back_inserter(only2));
  return {both, only1, only2};
}

Matrix RefinedStructure::pattern(int d) const {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(row_support.size()), d);
  for (std::size_t i = 0; i < row_support.size(); ++i)
    for (int j : row_support[i]) out(static_cast<Eigen::Index>(i), j) = 1.0;
  return out;
}

RefinedStructure refine_identification(const std::vector<PartitionMap>& maps, double rel_tol) {
  if (maps.empty()) throw InconsistentPartitionError("refine_identification: no maps");
  const Eigen::Index d = maps.front().a.rows();
  for (const auto& m : maps) {
    if (m.a.rows() != d || m.a.cols() != d)
      throw InconsistentPartitionError("refine_identification: maps differ in shape");
    if (!perturb::is_partition(m.blocks, static_cast<int>(d)))
      throw InconsistentPartitionError("refine_identification: blocks do not partition the latents");
  }

  RefinedStructure out;
  out.row_support.resize(d);
  for (std::size_t mi = 0; mi < maps.size(); ++mi) {
    const auto keep = eval::support_pattern(maps[mi].a, rel_tol);
    for (Eigen::Index i = 0; i < d; ++i) {
      int owner = -1;
      for (std::size_t b = 0; b < maps[mi].blocks.size(); ++b) {
        bool hit = false;
        for (int j : maps[mi].blocks[b]) hit = hit || keep(i, j);
        if (!hit) continue;
        if (owner != -1)
          throw InconsistentPartitionError("refine_identification: latent " + std::to_string(i) +
                                           " loads on several blocks of one partition");
        owner = static_cast<int>(b);
      }
      if (owner == -1)
        throw InconsistentPartitionError("refine_identification: latent " + std::to_string(i) +
                                         " loads on no block");
      IndexSet block = maps[mi].blocks[owner];
      std::sort(block.begin(), block.end());
      if (mi == 0) {
        out.row_support[i] = block;
      } else {
        out.row_support[i] = std::get<0>(block_refinement(out.row_support[i], block));
        if (out.row_support[i].empty())
          throw InconsistentPartitionError("refine_identification: latent " + std::to_string(i) +
                                           " has an empty refined support");
      }
    }
  }
  std::set<IndexSet> distinct(out.row_support.begin(), out.row_support.end());
  out.refined_blocks.assign(distinct.begin(), distinct.end());
  out.all_singletons = std::all_of(out.row_support.begin(), out.row_support.end(),
                                   [](const IndexSet& s) { return s.size() == 1; });
  return out;
}

namespace {

Matrix stationary_matrix(int n_balls) {
  const double off = -1.0 / (2.0 * (n_balls - 1));
  Matrix a = Matrix::Constant(n_balls, n_balls, off);
  a.diagonal().setConstant(0.5);
  return a;
}

}  // namespace

StationaryReport stationary_point_check(int n_balls, double c) {
  if (n_balls < 2) throw DimensionError("stationary_point_check: n_balls must be >= 2");
  if (c == 0.0) throw DimensionError("stationary_point_check: c must be nonzero");
  StationaryReport r;
  r.n_balls = n_balls;
  r.c = c;
  r.a = stationary_matrix(n_balls);

  // e_j = w_j * unit with w = (n_balls - 1, -1, ..., -1).
  const double unit = c / (2.0 * (n_balls - 1));
  long long weight_sum = 0;
  for (int j = 0; j < n_balls; ++j) {
    const long long w = j == 0 ? n_balls - 1 : -1;
    weight_sum += w;
    r.residuals.push_back(j == 0 ? c / 2.0 : -unit);
  }
  r.residual_sum = static_cast<double>(weight_sum) * unit;
  r.off_diagonal_ratio = std::abs(r.a(0, 1)) / r.a(0, 0);
  r.structure = eval::classify_structure(r.a, 1);
  r.limit_structure = eval::classify_structure(Matrix(0.5 * Matrix::Identity(n_balls, n_balls)), 1);
  return r;
}

namespace {

struct CandidateRun {
  EncoderModel model;
  TrainReport report;
  std::vector<eval::SparsityVerdict> verdicts;
  bool passed = false;
  std::string error;
};

CandidateRun run_candidate(const Observations& train_pairs, const Observations& validation_pairs,
                           const GuessMask& mask, int d, int p, const TrainConfig& config,
                           std::uint64_t seed, double tau) {
  CandidateRun run;
  try {
    run.model = init_model(train_pairs.obs_dim(), d, mask, seed);
    run.report = train(run.model, train_pairs, config);
    run.verdicts = eval::sparsity_test(run.model, validation_pairs, p, tau);
    run.passed = std::all_of(run.verdicts.begin(), run.verdicts.end(),
                             [](const eval::SparsityVerdict& v) { return v.passed; });
  } catch (const NonFiniteLossError& e) {
    run.error = e.what();
  }
  return run;
}

}  // namespace

MaskSearchResult mask_search(const Observations& train_pairs, const Observations& validation_pairs,
                             std::span<const int> group_of, int d, int p,
                             const TrainConfig& config, std::uint64_t seed, int threads,
                             double tau) {
  if (p <= 0 || d <= 0 || d % p != 0) throw DimensionError("mask_search: d must be a multiple of p");
  if (validation_pairs.num_pairs() == 0)
    throw EmptyValidationError("mask_search: no validation pairs");
  if (static_cast<int>(group_of.size()) != train_pairs.num_perturbations)
    throw DimensionError("mask_search: one group label per training perturbation required");
  config.validate();
  const std::vector<GuessMask> candidates = perturb::enumerate_mask_candidates(group_of, d, p);
  const int wave = std::max(1, threads);

  MaskSearchResult result;
  for (std::size_t begin = 0; begin < candidates.size(); begin += wave) {
    const std::size_t end = std::min(candidates.size(), begin + wave);
    std::vector<CandidateRun> runs(end - begin);
    const TrainConfig& cfg = config;
    if (wave == 1) {
      runs[0] = run_candidate(train_pairs, validation_pairs, candidates[begin], d, p, cfg, seed, tau);
    } else {
      std::vector<std::thread> workers;
      for (std::size_t i = begin; i < end; ++i)
        workers.emplace_back([&, i] {
          runs[i - begin] =
              run_candidate(train_pairs, validation_pairs, candidates[i], d, p, cfg, seed, tau);
        });
      for (auto& w : workers) w.join();
    }
    for (std::size_t i = begin; i < end; ++i) {
      CandidateRun& run = runs[i - begin];
      ++result.candidates_tried;
      result.tried.push_back({static_cast<int>(i), run.passed, run.report.final_loss});
      if (!run.passed) continue;
      result.selected_index = static_cast<int>(i);
      result.selected_mask = candidates[i];
      result.selected_model = std::move(run.model);
      result.report = std::move(run.report);
      result.validation_verdicts = std::move(run.verdicts);
      return result;
    }
  }
  throw ExhaustedCandidatesError("mask_search: none of " + std::to_string(candidates.size()) +
                                 " candidate masks passed the sparsity test");
}

}  // namespace sparsepert::oracle
