#include "sparsepert/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace sparsepert::eval {

MccResult mcc(const Matrix& z_hat, const Matrix& z_true) {
  if (z_hat.cols() != z_true.cols())
    throw DimensionError("mcc: estimated and true latent dims differ");
  const Matrix corr = numerics::pearson_correlation_matrix(z_hat, z_true).cwiseAbs();
  const auto assignment = numerics::optimal_assignment(corr, true);
  MccResult out;
  out.permutation = assignment.permutation;
  out.score = assignment.total_score / static_cast<double>(corr.rows());
  return out;
}

namespace {

Matrix columns(const Matrix& m, const IndexSet& cols) {
  Matrix out(m.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t j = 0; j < cols.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = m.col(cols[j]);
  return out;
}

void check_partition(const std::vector<IndexSet>& blocks, Eigen::Index d, const char* which) {
  std::vector<int> seen(d, 0);
  for (const auto& b : blocks)
    for (int i : b) {
      if (i < 0 || i >= d || seen[i]++)
        throw DimensionError(std::string("bmcc: ") + which + " blocks do not partition the latents");
    }
  if (std::any_of(seen.begin(), seen.end(), [](int c) { return c != 1; }))
    throw DimensionError(std::string("bmcc: ") + which + " blocks do not cover the latents");
}

}  // namespace

BmccResult bmcc(const Matrix& z_hat, const Matrix& z_true, const std::vector<IndexSet>& true_blocks,
                const std::vector<IndexSet>& hat_blocks) {
  if (z_hat.cols() != z_true.cols()) throw DimensionError("bmcc: latent dims differ");
  check_partition(true_blocks, z_true.cols(), "true");
  check_partition(hat_blocks, z_hat.cols(), "estimated");
  if (true_blocks.size() != hat_blocks.size())
    throw DimensionError("bmcc: block counts differ");
  std::map<std::size_t, int> sizes;
  for (const auto& b : true_blocks) ++sizes[b.size()];
  for (const auto& b : hat_blocks) --sizes[b.size()];
  for (const auto& [size, count] : sizes)
    if (count != 0) throw DimensionError("bmcc: block size multisets differ");

  const auto nb = static_cast<Eigen::Index>(true_blocks.size());
  BmccResult out;
  out.r2 = Matrix::Constant(nb, nb, std::numeric_limits<double>::quiet_NaN());
  // Unequal-size pairs are forbidden by a score no feasible matching can beat.
  Matrix score = Matrix::Constant(nb, nb, -1e6);
  for (Eigen::Index t = 0; t < nb; ++t) {
    const Matrix x = columns(z_true, true_blocks[t]);
    for (Eigen::Index h = 0; h < nb; ++h) {
      if (true_blocks[t].size() != hat_blocks[h].size()) continue;
      const auto fit = numerics::least_squares_fit(x, columns(z_hat, hat_blocks[h]));
      out.r2(t, h) = fit.r2.mean();
      score(t, h) = out.r2(t, h);
    }
  }
  const auto assignment = numerics::optimal_assignment(score, true);
  out.block_matching = assignment.permutation;
  out.score = assignment.total_score / static_cast<double>(nb);
  return out;
}

AffineFit fit_affine_map(const Matrix& z_hat, const Matrix& z_true) {
  if (z_hat.rows() != z_true.rows()) throw DimensionError("fit_affine_map: sample counts differ");
  const auto fit = numerics::least_squares_fit(z_true, z_hat);
  return AffineFit{fit.coeffs.transpose(), fit.intercept, fit.r2};
}

std::string StructureTag::str() const {
  switch (kind) {
    case StructureKind::kPermutationScaling:
      return "permutation-scaling";
    case StructureKind::kPermutationBlockDiagonal:
      return "permutation-block-diagonal(" + std::to_string(block_size) + ")";
    case StructureKind::kGeneralAffine:
      return "general-affine";
    case StructureKind::kNonInvertible:
      return "non-invertible";
  }
  return "unknown";
}

Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> support_pattern(const Matrix& a,
                                                                    double rel_tol) {
  const Matrix mag = a.cwiseAbs();
  const Vector row_max = mag.rowwise().maxCoeff();
  const Eigen::RowVectorXd col_max = mag.colwise().maxCoeff();
  Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> keep(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      keep(i, j) = mag(i, j) > 0.0 && mag(i, j) >= rel_tol * std::max(row_max(i), col_max(j));
  return keep;
}

StructureTag classify_structure(const Matrix& a, int p, double rel_tol,
                                const std::vector<IndexSet>* column_blocks) {
  if (a.rows() != a.cols()) throw DimensionError("classify_structure: matrix must be square");
  if (!(rel_tol > 0.0 && rel_tol < 1.0))
    throw DimensionError("classify_structure: rel_tol must lie in (0, 1)");
  const int d = static_cast<int>(a.rows());
  if (d == 0 || numerics::numerical_rank(a) < d) return {StructureKind::kNonInvertible, 1};

  const auto keep = support_pattern(a, rel_tol);
  const auto row_counts = keep.cast<int>().rowwise().sum();
  const auto col_counts = keep.cast<int>().colwise().sum();
  if ((row_counts.array() == 1).all() && (col_counts.array() == 1).all())
    return {StructureKind::kPermutationScaling, 1};

  std::vector<IndexSet> blocks;
  if (column_blocks) {
    blocks = *column_blocks;
  } else if (p > 1 && p <= d && d % p == 0) {
    for (int start = 0; start < d; start += p) {
      IndexSet b;
      for (int j = start; j < start + p; ++j) b.push_back(j);
      blocks.push_back(std::move(b));
    }
  }
  if (!blocks.empty()) {
    std::vector<int> owner(d, -1);
    bool ok = true;
    for (std::size_t g = 0; g < blocks.size() && ok; ++g) {
      if (static_cast<int>(blocks[g].size()) != p) ok = false;
      int rows_used = 0;
      for (int i = 0; i < d && ok; ++i) {
        bool hit = false;
        for (int j : blocks[g]) hit = hit || keep(i, j);
        if (!hit) continue;
        if (owner[i] != -1) ok = false;
        owner[i] = static_cast<int>(g);
        ++rows_used;
      }
      if (rows_used != p) ok = false;
    }
    if (ok) return {StructureKind::kPermutationBlockDiagonal, p};
  }
  return {StructureKind::kGeneralAffine, 1};
}

std::vector<SparsityVerdict> sparsity_test(const EncoderModel& model, const Observations& validation,
                                           int p, double tau) {
  if (validation.num_pairs() == 0) throw EmptyValidationError("sparsity_test: no validation pairs");
  if (!(tau > 0.0 && tau < 1.0)) throw DimensionError("sparsity_test: tau must lie in (0, 1)");
  const Matrix f_base = forward(model, validation.base);
  const Matrix f_pert = forward(model, validation.perturbed);
  const int d = model.latent_dim();

  std::map<int, std::pair<Vector, int>> acc;
  for (int j = 0; j < validation.num_pairs(); ++j) {
    auto [it, inserted] = acc.try_emplace(validation.pert_index[j], Vector::Zero(d), 0);
    it->second.first += (f_pert.row(j) - f_base.row(validation.base_index[j])).cwiseAbs().transpose();
    ++it->second.second;
  }
  std::vector<SparsityVerdict> out;
  for (auto& [k, sum_count] : acc) {
    SparsityVerdict v;
    v.perturbation = k;
    v.mean_displacement = sum_count.first / sum_count.second;
    const double top = v.mean_displacement.maxCoeff();
    v.changed_components = static_cast<int>((v.mean_displacement.array() > tau * top).count());
    v.passed = v.changed_components <= p;
    out.push_back(std::move(v));
  }
  return out;
}

IdentReport identification_report(const Matrix& z_hat, const Matrix& z_true, int p,
                                   const std::vector<IndexSet>* true_blocks,
                                   const std::vector<IndexSet>* hat_blocks) {
  IdentReport r;
  r.mcc = mcc(z_hat, z_true);
  if (true_blocks && hat_blocks) r.bmcc = bmcc(z_hat, z_true, *true_blocks, *hat_blocks);
  r.affine = fit_affine_map(z_hat, z_true);
  r.structure = classify_structure(r.affine.a, p, kDefaultStructureTol, true_blocks);
  return r;
}

}  // namespace sparsepert::eval
