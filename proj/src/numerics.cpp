#include "sparsepert/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sparsepert::numerics {

double max_abs(const Matrix& m) {
  return m.size() == 0 ? 0.0 : m.cwiseAbs().maxCoeff();
}

int numerical_rank(const Matrix& m, double rel_tol) {
  if (m.size() == 0) return 0;
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const Vector& sv = svd.singularValues();
  if (sv.size() == 0 || sv(0) == 0.0) return 0;
  const double cutoff = rel_tol * sv(0);
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) {
    if (sv(i) > cutoff) ++rank;
  }
  return rank;
}

Matrix invert(const Matrix& m) {
  if (m.rows() != m.cols()) {
    throw DimensionError("invert: matrix is " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()) + ", expected square");
  }
  const int n = static_cast<int>(m.rows());
  const int rank = numerical_rank(m);
  if (rank < n) {
    throw SingularMatrixError("invert: numerical rank " + std::to_string(rank) + " < " +
                              std::to_string(n));
  }
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(m);
  Matrix inv = lu.inverse();
  if (!inv.allFinite()) throw SingularMatrixError("invert: non-finite inverse");
  return inv;
}

namespace {

// Centred columns scaled to unit norm; throws on a constant column.
Eigen::MatrixXd standardize_columns(const Matrix& a, const char* which) {
  Eigen::MatrixXd centred = a.rowwise() - a.colwise().mean();
  for (Eigen::Index j = 0; j < centred.cols(); ++j) {
    const double norm = centred.col(j).norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw ZeroVarianceError(std::string("pearson_correlation_matrix: column ") +
                              std::to_string(j) + " of " + which + " has zero variance");
    }
    centred.col(j) /= norm;
  }
  return centred;
}

}  // namespace

Matrix pearson_correlation_matrix(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("pearson_correlation_matrix: sample counts differ");
  }
  if (a.rows() < 2) {
    throw ZeroVarianceError("pearson_correlation_matrix: need at least two samples");
  }
  const Eigen::MatrixXd sa = standardize_columns(a, "A");
  const Eigen::MatrixXd sb = standardize_columns(b, "B");
  Matrix corr = sa.transpose() * sb;
  return corr.cwiseMax(-1.0).cwiseMin(1.0);
}

LinearFit least_squares_fit(const Matrix& x, const Matrix& y) {
  const Eigen::Index n = x.rows();
  const Eigen::Index p = x.cols();
  if (y.rows() != n) throw DimensionError("least_squares_fit: sample counts differ");
  if (n <= p + 1) {
    throw RankDeficientError("least_squares_fit: need more than p + 1 samples");
  }
  const Eigen::RowVectorXd x_mean = x.colwise().mean();
  const Eigen::RowVectorXd y_mean = y.colwise().mean();
  const Eigen::MatrixXd xc = x.rowwise() - x_mean;
  const Eigen::MatrixXd yc = y.rowwise() - y_mean;

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xc);
  qr.setThreshold(kDefaultRankTol);
  if (qr.rank() < p) {
    throw RankDeficientError("least_squares_fit: design rank " + std::to_string(qr.rank()) +
                             " < " + std::to_string(p));
  }
  LinearFit fit;
  fit.coeffs = qr.solve(yc);
  fit.intercept = (y_mean - x_mean * fit.coeffs).transpose();

  const Eigen::MatrixXd resid = yc - xc * fit.coeffs;
  fit.r2.resize(y.cols());
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    const double ss_tot = yc.col(j).squaredNorm();
    const double ss_res = resid.col(j).squaredNorm();
    if (ss_tot > 0.0) {
      fit.r2(j) = 1.0 - ss_res / ss_tot;
    } else {
      fit.r2(j) = ss_res == 0.0 ? 1.0 : 0.0;
    }
  }
  return fit;
}

AssignmentResult optimal_assignment(const Matrix& cost, bool maximize) {
  if (cost.rows() != cost.cols()) {
    throw DimensionError("optimal_assignment: cost matrix must be square");
  }
  const int n = static_cast<int>(cost.rows());
  AssignmentResult result;
  if (n == 0) return result;
  if (!cost.allFinite()) throw DimensionError("optimal_assignment: non-finite cost");

  const double sign = maximize ? -1.0 : 1.0;
  const auto c = [&](int i, int j) { return sign * cost(i, j); };
  const double inf = std::numeric_limits<double>::infinity();

  // 1-based potentials; column 0 is a virtual source.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> row_of_col(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    row_of_col[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = row_of_col[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[row_of_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (row_of_col[j0] != 0);
    do {
      const int j1 = way[j0];
      row_of_col[j0] = row_of_col[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  result.permutation.assign(n, -1);
  for (int j = 1; j <= n; ++j) result.permutation[row_of_col[j] - 1] = j - 1;
  for (int i = 0; i < n; ++i) result.total_score += cost(i, result.permutation[i]);
  return result;
}

}  // namespace sparsepert::numerics
