#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sparsepert/numerics.hpp"
#include "sparsepert/perturb.hpp"

namespace sparsepert {

enum class LatentKind { kUniformIndependent, kNormalBlockwise };

/// Latent prior P_Z. Uniform draws each coordinate independently on
/// [low, high]; normal-blockwise splits the coordinates into blocks of length
/// d/2 that are independent of each other, each an equicorrelated standard
/// normal with off-diagonal correlation rho.
struct LatentDistribution {
  LatentKind kind = LatentKind::kUniformIndependent;
  int dim = 0;
  double low = 0.0;
  double high = 1.0;
  double rho = 0.5;

  static LatentDistribution uniform(int d, double low = 0.0, double high = 1.0);
  static LatentDistribution normal_blockwise(int d, double rho = 0.5);

  int block_length() const;
  void validate() const;
};

std::string to_string(LatentKind kind);
LatentKind latent_kind_from_string(const std::string& s);

/// s(t) = alpha * t + (1 - alpha) * softplus(t). Analytic and strictly
/// increasing, with slope in (alpha, 1).
inline constexpr double kLeakSlope = 0.2;
double smooth_leaky(double t, double alpha = kLeakSlope);
double smooth_leaky_derivative(double t, double alpha = kLeakSlope);

/// g(z) = s(W2 s(W1 z + b1) + b2) with square orthogonal weights.
struct MixingFunction {
  int dim = 0;
  std::array<Matrix, 2> weights;  // out x in, applied as W z
  std::array<Vector, 2> biases;
  double alpha = kLeakSlope;

  /// Jacobian dg/dz at a single point.
  Matrix jacobian(const Vector& z) const;
  void validate() const;
};

class InjectivityError : public Error {
 public:
  using Error::Error;
};

inline constexpr double kMaxWeightCondition = 100.0;
inline constexpr double kMinJacobianSingular = 1e-4;
inline constexpr int kInjectivityAuditPoints = 1000;

/// Orthogonalised random weights; the injectivity witness is audited on
/// latents drawn from `audit` (or a standard normal when unset).
MixingFunction build_mixing_mlp(int d, std::uint64_t seed,
                                const LatentDistribution* audit = nullptr);

/// Smallest singular value of the Jacobian over the rows of z.
double min_jacobian_singular_value(const MixingFunction& g, const Matrix& z);

/// Row-by-row forward pass; each output row depends only on its input row, so
/// batched and single-row evaluation agree bit for bit.
Matrix apply_mixing(const MixingFunction& g, const Matrix& z);

Matrix sample_latents(const LatentDistribution& dist, int n, std::uint64_t seed);

enum class PairMode { kAllM, kSingleRandom };
std::string to_string(PairMode mode);
PairMode pair_mode_from_string(const std::string& s);

/// What the learner sees: base observations and (x, x_tilde_k, k) pairs.
/// Pairs are sorted by base index.
struct Observations {
  Matrix base;                   // N x n
  Matrix perturbed;              // P x n
  std::vector<int> base_index;   // P, row of `base` each pair belongs to
  std::vector<int> pert_index;   // P, perturbation index k
  int num_perturbations = 0;     // m

  int num_samples() const { return static_cast<int>(base.rows()); }
  int num_pairs() const { return static_cast<int>(perturbed.rows()); }
  int obs_dim() const { return static_cast<int>(base.cols()); }

  /// Base rows [begin, end) and all of their pairs, re-indexed.
  Observations slice(int begin, int end) const;
  /// Arbitrary base rows (in the given order) and their pairs.
  Observations gather(const std::vector<int>& rows) const;
  void validate() const;
};

/// Latents behind an Observations instance. Evaluation only: no training entry
/// point accepts this type.
struct GroundTruth {
  Matrix z;            // N x d
  Matrix z_perturbed;  // P x d, aligned with Observations::perturbed
};

struct Dataset {
  Observations observations;
  GroundTruth truth;
  PairMode mode = PairMode::kAllM;
  std::uint64_t seed = 0;
};

Dataset generate_dataset(const LatentDistribution& dist, const MixingFunction& g,
                         const PerturbationSet& pset, int n, PairMode mode, std::uint64_t seed);

}  // namespace sparsepert
