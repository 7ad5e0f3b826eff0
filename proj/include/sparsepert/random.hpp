#pragma once

#include <cstdint>
#include <random>

#include "sparsepert/numerics.hpp"

namespace sparsepert {

/// Seeded engine shared by every generator in the library. Streams are derived
/// from a base seed and a salt so independent consumers never share draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t seed, std::uint64_t salt) : engine_(mix(seed, salt)) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(engine_); }
  int index(int n) { return std::uniform_int_distribution<int>(0, n - 1)(engine_); }

  /// Uniform on [-hi, -lo] U [lo, hi].
  double signed_magnitude(double lo = 0.5, double hi = 2.0) {
    const double mag = uniform(lo, hi);
    return uniform(0.0, 1.0) < 0.5 ? -mag : mag;
  }

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal();
    return m;
  }

  std::mt19937_64& engine() { return engine_; }

  /// splitmix64 finaliser
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace sparsepert
