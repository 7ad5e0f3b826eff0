#include "sparsepert/dgp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "sparsepert/random.hpp"

namespace sparsepert {

LatentDistribution LatentDistribution::uniform(int d, double low, double high) {
  LatentDistribution dist;
  dist.kind = LatentKind::kUniformIndependent;
  dist.dim = d;
  dist.low = low;
  dist.high = high;
  dist.validate();
  return dist;
}

LatentDistribution LatentDistribution::normal_blockwise(int d, double rho) {
  LatentDistribution dist;
  dist.kind = LatentKind::kNormalBlockwise;
  dist.dim = d;
  dist.rho = rho;
  dist.validate();
  return dist;
}

int LatentDistribution::block_length() const {
  if (kind == LatentKind::kUniformIndependent) return 1;
  return dim == 1 ? 1 : dim / 2;
}

void LatentDistribution::validate() const {
  if (dim <= 0) throw DimensionError("LatentDistribution: dim must be positive");
  if (kind == LatentKind::kUniformIndependent) {
    if (!(low < high)) throw DimensionError("LatentDistribution: uniform needs low < high");
    return;
  }
  if (dim > 1 && dim % 2 != 0)
    throw DimensionError("LatentDistribution: normal-blockwise needs an even dimension");
  const int b = block_length();
  // Equicorrelation is positive definite iff -1/(b-1) < rho < 1.
  const double lower = b > 1 ? -1.0 / (b - 1) : -1.0;
  if (b > 1 && !(rho > lower && rho < 1.0))
    throw DimensionError("LatentDistribution: rho outside the positive definite range");
}

std::string to_string(LatentKind kind) {
  return kind == LatentKind::kUniformIndependent ? "uniform" : "normal";
}

LatentKind latent_kind_from_string(const std::string& s) {
  if (s == "uniform" || s == "uniform-independent") return LatentKind::kUniformIndependent;
  if (s == "normal" || s == "normal-blockwise") return LatentKind::kNormalBlockwise;
  throw Error("unknown latent distribution '" + s + "'");
}

double smooth_leaky(double t, double alpha) {
  const double softplus = std::max(t, 0.0) + std::log1p(std::exp(-std::abs(t)));
  return alpha * t + (1.0 - alpha) * softplus;
}

double smooth_leaky_derivative(double t, double alpha) {
  const double e = std::exp(-std::abs(t));
  const double sigmoid = t >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
  return alpha + (1.0 - alpha) * sigmoid;
}

namespace {

Vector layer_pre(const Matrix& w, const Vector& b, const Vector& in) {
  const Eigen::Index n = w.rows();
  Vector out(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    double acc = b(i);
    for (Eigen::Index j = 0; j < w.cols(); ++j) acc += w(i, j) * in(j);
    out(i) = acc;
  }
  return out;
}

}  // namespace

Matrix MixingFunction::jacobian(const Vector& z) const {
  const Vector a1 = layer_pre(weights[0], biases[0], z);
  Vector h1(a1.size());
  Vector d1(a1.size());
  for (Eigen::Index i = 0; i < a1.size(); ++i) {
    h1(i) = smooth_leaky(a1(i), alpha);
    d1(i) = smooth_leaky_derivative(a1(i), alpha);
  }
  const Vector a2 = layer_pre(weights[1], biases[1], h1);
  Vector d2(a2.size());
  for (Eigen::Index i = 0; i < a2.size(); ++i) d2(i) = smooth_leaky_derivative(a2(i), alpha);
  return d2.asDiagonal() * weights[1] * d1.asDiagonal() * weights[0];
}

void MixingFunction::validate() const {
  for (int l = 0; l < 2; ++l) {
    if (weights[l].rows() != dim || weights[l].cols() != dim || biases[l].size() != dim)
      throw DimensionError("MixingFunction: layer shapes must be dim x dim");
    if (!weights[l].allFinite() || !biases[l].allFinite())
      throw DimensionError("MixingFunction: non-finite parameter");
  }
}

double min_jacobian_singular_value(const MixingFunction& g, const Matrix& z) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(g.jacobian(z.row(r).transpose()));
    best = std::min(best, svd.singularValues().minCoeff());
  }
  return best;
}

MixingFunction build_mixing_mlp(int d, std::uint64_t seed, const LatentDistribution* audit) {
  if (d < 1) throw DimensionError("build_mixing_mlp: d must be >= 1");
  constexpr int kRetries = 10;
  for (int attempt = 0; attempt < kRetries; ++attempt) {
    Rng rng(seed, 0x9a1c0 + attempt);
    MixingFunction g;
    g.dim = d;
    for (int l = 0; l < 2; ++l) {
      const Eigen::MatrixXd raw = rng.normal_matrix(d, d);
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(raw);
      Eigen::MatrixXd q = qr.householderQ();
      // Fix column signs so Q is a deterministic function of the draw.
      for (int c = 0; c < d; ++c)
        if (qr.matrixQR()(c, c) < 0) q.col(c) *= -1.0;
      g.weights[l] = q;
      g.biases[l] = Vector(d);
      for (int i = 0; i < d; ++i) g.biases[l](i) = 0.1 * rng.normal();
    }
    g.validate();

    bool conditioned = true;
    for (const auto& w : g.weights) {
      const Eigen::JacobiSVD<Eigen::MatrixXd> svd(w);
      const auto& sv = svd.singularValues();
      if (sv(sv.size() - 1) <= 0.0 || sv(0) / sv(sv.size() - 1) > kMaxWeightCondition)
        conditioned = false;
    }
    Rng audit_rng(seed, 77);
    const Matrix points = audit ? sample_latents(*audit, kInjectivityAuditPoints, Rng::mix(seed, 77))
                                : audit_rng.normal_matrix(kInjectivityAuditPoints, d);
    if (conditioned && min_jacobian_singular_value(g, points) > kMinJacobianSingular) return g;
  }
  throw InjectivityError("build_mixing_mlp: injectivity witness failed after retries");
}

Matrix apply_mixing(const MixingFunction& g, const Matrix& z) {
  if (z.cols() != g.dim)
    throw DimensionError("apply_mixing: expected " + std::to_string(g.dim) + " columns");
  const int d = g.dim;
  Matrix out(z.rows(), d);
  Vector h(d);
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    for (int i = 0; i < d; ++i) {
      double acc = g.biases[0](i);
      for (int j = 0; j < d; ++j) acc += g.weights[0](i, j) * z(r, j);
      h(i) = smooth_leaky(acc, g.alpha);
    }
    for (int i = 0; i < d; ++i) {
      double acc = g.biases[1](i);
      for (int j = 0; j < d; ++j) acc += g.weights[1](i, j) * h(j);
      out(r, i) = smooth_leaky(acc, g.alpha);
    }
  }
  return out;
}

Matrix sample_latents(const LatentDistribution& dist, int n, std::uint64_t seed) {
  dist.validate();
  if (n < 1) throw DimensionError("sample_latents: n must be >= 1");
  Rng rng(seed, 0x1a7e);
  const int d = dist.dim;
  Matrix z(n, d);
  if (dist.kind == LatentKind::kUniformIndependent) {
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < d; ++c) z(r, c) = rng.uniform(dist.low, dist.high);
    return z;
  }
  const int b = dist.block_length();
  Eigen::MatrixXd cov = Eigen::MatrixXd::Constant(b, b, dist.rho);
  cov.diagonal().setOnes();
  const Eigen::LLT<Eigen::MatrixXd> llt(cov);
  if (llt.info() != Eigen::Success)
    throw DimensionError("sample_latents: block covariance not positive definite");
  const Eigen::MatrixXd chol = llt.matrixL();
  Vector eps(b);
  for (int r = 0; r < n; ++r) {
    for (int start = 0; start < d; start += b) {
      for (int i = 0; i < b; ++i) eps(i) = rng.normal();
      const Vector block = chol * eps;
      for (int i = 0; i < b; ++i) z(r, start + i) = block(i);
    }
  }
  return z;
}

std::string to_string(PairMode mode) {
  return mode == PairMode::kAllM ? "all-m" : "single-random";
}

PairMode pair_mode_from_string(const std::string& s) {
  if (s == "all-m" || s == "all") return PairMode::kAllM;
  if (s == "single-random" || s == "single") return PairMode::kSingleRandom;
  throw Error("unknown per-example mode '" + s + "'");
}

void Observations::validate() const {
  const auto p = static_cast<std::size_t>(perturbed.rows());
  if (base_index.size() != p || pert_index.size() != p)
    throw DimensionError("Observations: index arrays must have one entry per pair");
  if (perturbed.cols() != base.cols())
    throw DimensionError("Observations: base and perturbed widths differ");
  for (std::size_t j = 0; j < p; ++j) {
    if (base_index[j] < 0 || base_index[j] >= num_samples())
      throw DimensionError("Observations: base index out of range");
    if (j > 0 && base_index[j] < base_index[j - 1])
      throw DimensionError("Observations: pairs must be sorted by base index");
    if (pert_index[j] < 0 || pert_index[j] >= num_perturbations)
      throw DimensionError("Observations: perturbation index out of range");
  }
}

Observations Observations::slice(int begin, int end) const {
  const auto lo = std::lower_bound(base_index.begin(), base_index.end(), begin) - base_index.begin();
  const auto hi = std::lower_bound(base_index.begin(), base_index.end(), end) - base_index.begin();
  Observations out;
  out.num_perturbations = num_perturbations;
  out.base = base.middleRows(begin, end - begin);
  out.perturbed = perturbed.middleRows(lo, hi - lo);
  out.base_index.assign(base_index.begin() + lo, base_index.begin() + hi);
  for (int& b : out.base_index) b -= begin;
  out.pert_index.assign(pert_index.begin() + lo, pert_index.begin() + hi);
  return out;
}

Observations Observations::gather(const std::vector<int>& rows) const {
  // CSR offsets of pairs per base row
  std::vector<int> offsets(num_samples() + 1, 0);
  for (int b : base_index) ++offsets[b + 1];
  for (int i = 0; i < num_samples(); ++i) offsets[i + 1] += offsets[i];

  int total = 0;
  for (int r : rows) total += offsets[r + 1] - offsets[r];
  Observations out;
  out.num_perturbations = num_perturbations;
  out.base.resize(static_cast<Eigen::Index>(rows.size()), base.cols());
  out.perturbed.resize(total, base.cols());
  out.base_index.reserve(total);
  out.pert_index.reserve(total);
  int pos = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    out.base.row(static_cast<Eigen::Index>(i)) = base.row(r);
    for (int j = offsets[r]; j < offsets[r + 1]; ++j, ++pos) {
      out.perturbed.row(pos) = perturbed.row(j);
      out.base_index.push_back(static_cast<int>(i));
      out.pert_index.push_back(pert_index[j]);
    }
  }
  return out;
}

Dataset generate_dataset(const LatentDistribution& dist, const MixingFunction& g,
                         const PerturbationSet& pset, int n, PairMode mode, std::uint64_t seed) {
  pset.validate();
  if (dist.dim != g.dim || pset.dim != g.dim)
    throw DimensionError("generate_dataset: latent, mixing and perturbation dims differ");
  const int m = pset.size();
  Dataset ds;
  ds.mode = mode;
  ds.seed = seed;
  ds.truth.z = sample_latents(dist, n, Rng::mix(seed, 1));

  Rng pick(seed, 2);
  const int per_sample = mode == PairMode::kAllM ? m : 1;
  const Eigen::Index pairs = static_cast<Eigen::Index>(n) * per_sample;
  ds.truth.z_perturbed.resize(pairs, g.dim);
  auto& obs = ds.observations;
  obs.num_perturbations = m;
  obs.base_index.reserve(pairs);
  obs.pert_index.reserve(pairs);
  Eigen::Index row = 0;
  for (int i = 0; i < n; ++i) {
    for (int s = 0; s < per_sample; ++s, ++row) {
      const int k = mode == PairMode::kAllM ? s : pick.index(m);
      ds.truth.z_perturbed.row(row) = ds.truth.z.row(i) + pset.vectors.row(k);
      obs.base_index.push_back(i);
      obs.pert_index.push_back(k);
    }
  }
  obs.base = apply_mixing(g, ds.truth.z);
  obs.perturbed = apply_mixing(g, ds.truth.z_perturbed);
  return ds;
}

}  // namespace sparsepert
