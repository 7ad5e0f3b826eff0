#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sparsepert {

/// Row-major so that one row is one sample, matching the on-disk layout.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using IndexSet = std::vector<int>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SingularMatrixError : public Error {
 public:
  using Error::Error;
};

class ZeroVarianceError : public Error {
 public:
  using Error::Error;
};

class RankDeficientError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

namespace numerics {

inline constexpr double kDefaultRankTol = 1e-6;

struct AssignmentResult {
  /// permutation[row] = column assigned to that row.
  std::vector<int> permutation;
  double total_score = 0.0;
};

struct LinearFit {
  Matrix coeffs;     // p x q
  Vector intercept;  // q
  Vector r2;         // q
};

/// Inverse by partial-pivot LU. Throws SingularMatrixError when the numerical
/// rank is below n.
Matrix invert(const Matrix& m);

/// Number of singular values above rel_tol times the largest one.
int numerical_rank(const Matrix& m, double rel_tol = kDefaultRankTol);

/// Entry (i, j) is the Pearson correlation of column i of a with column j of b.
Matrix pearson_correlation_matrix(const Matrix& a, const Matrix& b);

/// Ordinary least squares of y on x with an intercept column.
LinearFit least_squares_fit(const Matrix& x, const Matrix& y);

/// Hungarian algorithm (shortest augmenting path with potentials), O(n^3).
AssignmentResult optimal_assignment(const Matrix& cost, bool maximize);

/// max_ij |m_ij|
double max_abs(const Matrix& m);

}  // namespace numerics
}  // namespace sparsepert
