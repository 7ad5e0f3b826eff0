#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "sparsepert/dgp.hpp"
#include "sparsepert/eval.hpp"
#include "sparsepert/perturb.hpp"
#include "sparsepert/random.hpp"

using namespace sparsepert;
using eval::StructureKind;

namespace {

Matrix permutation_matrix(const std::vector<int>& perm) {
  Matrix p = Matrix::Zero(perm.size(), perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) p(i, perm[i]) = 1.0;
  return p;
}

std::vector<int> random_permutation(int n, Rng& rng) {
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  return perm;
}

}  // namespace

TEST_CASE("mcc is 1 under permutation, scaling and offset") {
  Rng rng(1);
  const Matrix z = sample_latents(LatentDistribution::normal_blockwise(6), 500, 3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto perm = random_permutation(6, rng);
    Vector scale(6), offset(6);
    for (int i = 0; i < 6; ++i) {
      scale(i) = rng.signed_magnitude(0.1, 10.0);
      offset(i) = rng.normal() * 5;
    }
    const Matrix a = scale.asDiagonal() * permutation_matrix(perm);
    const Matrix zh = (z * a.transpose()).rowwise() + offset.transpose();
    const auto r = eval::mcc(zh, z);
    CHECK(r.score == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(r.permutation == perm);
  }
}

TEST_CASE("mcc of independent noise is small") {
  const Matrix a = sample_latents(LatentDistribution::uniform(4), 5000, 1);
  const Matrix b = sample_latents(LatentDistribution::uniform(4), 5000, 2);
  CHECK(eval::mcc(a, b).score < 0.05);
}

TEST_CASE("mcc matches hand-computed correlations") {
  Matrix z(4, 2), zh(4, 2);
  z << 1, 0, 2, 1, 3, 0, 4, 1;
  zh << 0, 2, 1, 4, 0, 6, 1, 8;  // zh1 = z1 * 2, zh0 = z2
  const auto r = eval::mcc(zh, z);
  CHECK(r.score == doctest::Approx(1.0));
  CHECK(r.permutation == std::vector<int>{1, 0});
}

TEST_CASE("bmcc is 1 under within-block invertible mixes and block permutation") {
  Rng rng(2);
  const Matrix z = sample_latents(LatentDistribution::uniform(6), 600, 4);
  const std::vector<IndexSet> blocks{{0, 1}, {2, 3}, {4, 5}};
  for (int trial = 0; trial < 10; ++trial) {
    Matrix a = Matrix::Zero(6, 6);
    for (int b = 0; b < 3; ++b) a.block(2 * b, 2 * b, 2, 2) = rng.normal_matrix(2, 2) + 2 * Matrix::Identity(2, 2);
    const auto bperm = random_permutation(3, rng);
    Matrix p = Matrix::Zero(6, 6);
    for (int b = 0; b < 3; ++b) p.block(2 * b, 2 * bperm[b], 2, 2) = Matrix::Identity(2, 2);
    const Matrix zh = z * (p * a).transpose();
    const auto r = eval::bmcc(zh, z, blocks, blocks);
    CHECK(r.score == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK_THROWS_AS(eval::bmcc(z, z, {{0, 1}, {1, 2}, {4, 5}}, blocks), DimensionError);
  CHECK_THROWS_AS(eval::bmcc(z, z, {{0, 1, 2, 3}, {4, 5}}, blocks), DimensionError);
}

TEST_CASE("bmcc drops when blocks leak into each other") {
  const Matrix z = sample_latents(LatentDistribution::uniform(4), 2000, 5);
  Matrix a = Matrix::Identity(4, 4);
  a(0, 2) = 1.0;
  a(3, 1) = 1.0;
  const std::vector<IndexSet> blocks{{0, 1}, {2, 3}};
  CHECK(eval::bmcc(z * a.transpose(), z, blocks, blocks).score < 0.9);
}

TEST_CASE("fit_affine_map recovers the map") {
  Rng rng(3);
  const Matrix z = sample_latents(LatentDistribution::normal_blockwise(4), 300, 6);
  const Matrix a = rng.normal_matrix(4, 4);
  Vector c(4);
  c << 1, 2, 3, 4;
  const Matrix zh = (z * a.transpose()).rowwise() + c.transpose();
  const auto fit = eval::fit_affine_map(zh, z);
  CHECK((fit.a - a).cwiseAbs().maxCoeff() < 1e-10);
  CHECK((fit.c - c).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(fit.r2.minCoeff() > 1.0 - 1e-12);
}

TEST_CASE("classify_structure") {
  Matrix ps(3, 3);
  ps << 0, 2, 0, 0, 0, -0.5, 3, 0, 0;
  CHECK(eval::classify_structure(ps, 1).kind == StructureKind::kPermutationScaling);
  CHECK(eval::classify_structure(ps, 1).str() == "permutation-scaling");

  Matrix noisy = ps;
  noisy(0, 0) = 0.04;  // below 5% of the row maximum
  CHECK(eval::classify_structure(noisy, 1).kind == StructureKind::kPermutationScaling);
  noisy(0, 0) = 0.2;
  CHECK(eval::classify_structure(noisy, 1).kind == StructureKind::kGeneralAffine);

  Matrix bd = Matrix::Zero(4, 4);
  bd.block(0, 2, 2, 2) << 1, 2, 3, 4;
  bd.block(2, 0, 2, 2) << 1, -1, 1, 1;
  const auto tag = eval::classify_structure(bd, 2);
  CHECK(tag.kind == StructureKind::kPermutationBlockDiagonal);
  CHECK(tag.block_size == 2);
  CHECK(tag.str() == "permutation-block-diagonal(2)");

  Matrix leak = bd;
  leak(0, 0) = 1.0;
  CHECK(eval::classify_structure(leak, 2).kind == StructureKind::kGeneralAffine);

  Matrix singular = Matrix::Identity(3, 3);
  singular(2, 2) = 0.0;
  CHECK(eval::classify_structure(singular, 1).kind == StructureKind::kNonInvertible);

  // Non-contiguous column blocks supplied explicitly.
  Matrix odd = Matrix::Zero(4, 4);
  odd(0, 0) = odd(0, 2) = odd(1, 0) = odd(1, 2) = 1.0;
  odd(1, 2) = -1.0;
  odd(2, 1) = odd(2, 3) = odd(3, 1) = 1.0;
  odd(3, 3) = 2.0;
  const std::vector<IndexSet> cols{{0, 2}, {1, 3}};
  CHECK(eval::classify_structure(odd, 2, 0.05, &cols).kind == StructureKind::kPermutationBlockDiagonal);
  CHECK(eval::classify_structure(odd, 2).kind == StructureKind::kGeneralAffine);

  CHECK_THROWS_AS(eval::classify_structure(Matrix::Identity(2, 3), 1), DimensionError);
}

TEST_CASE("sparsity test counts changed components") {
  const auto dist = LatentDistribution::uniform(3);
  const auto g = build_mixing_mlp(3, 1, &dist);
  const auto pset = perturb::make_one_sparse_set(3, 1);
  const Dataset ds = generate_dataset(dist, g, pset, 50, PairMode::kAllM, 2);
  const auto mask = perturb::derive_guess_masks(pset, perturb::ExactBlocks{});
  EncoderModel m = init_model(3, 3, mask, 3);

  const auto verdicts = eval::sparsity_test(m, ds.observations, 1);
  REQUIRE(verdicts.size() == 3);
  const Matrix fx = forward(m, ds.observations.base), fxt = forward(m, ds.observations.perturbed);
  for (const auto& v : verdicts) {
    Vector mean = Vector::Zero(3);
    int count = 0;
    for (int r = 0; r < ds.observations.num_pairs(); ++r)
      if (ds.observations.pert_index[r] == v.perturbation) {
        mean += (fxt.row(r) - fx.row(ds.observations.base_index[r])).cwiseAbs().transpose();
        ++count;
      }
    mean /= count;
    CHECK((v.mean_displacement - mean).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(v.changed_components == (mean.array() > 0.1 * mean.maxCoeff()).count());
    CHECK(v.changed_components >= 2);
    CHECK(v.passed == (v.changed_components <= 1));
  }
  for (const auto& v : eval::sparsity_test(m, ds.observations, 3)) CHECK(v.passed);

  // Only output 0 depends on the input.
  const auto off = m.weight_offset(2);
  for (int h = 0; h < m.hidden(); ++h) {
    m.parameters()(off + h * 3 + 1) = 0.0;
    m.parameters()(off + h * 3 + 2) = 0.0;
  }
  for (const auto& v : eval::sparsity_test(m, ds.observations, 1)) {
    CHECK(v.changed_components == 1);
    CHECK(v.passed);
  }
  Observations empty = ds.observations.slice(0, 0);
  CHECK_THROWS_AS(eval::sparsity_test(m, empty, 1), EmptyValidationError);
}

TEST_CASE("identification report") {
  const Matrix z = sample_latents(LatentDistribution::uniform(4), 400, 9);
  Matrix a = Matrix::Zero(4, 4);
  a.block(0, 2, 2, 2) << 1, 1, 0, 1;
  a.block(2, 0, 2, 2) << 2, 0, 1, 1;
  const std::vector<IndexSet> blocks{{0, 1}, {2, 3}};
  const auto r = eval::identification_report(z * a.transpose(), z, 2, &blocks, &blocks);
  REQUIRE(r.bmcc.has_value());
  CHECK(r.bmcc->score == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.structure.str() == "permutation-block-diagonal(2)");
  CHECK(r.mcc.score < 1.0);
}
