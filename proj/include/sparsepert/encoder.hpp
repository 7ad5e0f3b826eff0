#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sparsepert/dgp.hpp"
#include "sparsepert/numerics.hpp"
#include "sparsepert/perturb.hpp"

namespace sparsepert {

class NonFiniteLossError : public Error {
 public:
  using Error::Error;
};

inline constexpr int kEncoderHidden = 100;

/// MLP encoder n -> 100 -> 100 -> d with the smooth leaky activation after
/// the two hidden layers, plus the learner's guessed perturbations laid over a
/// fixed GuessMask. Every trainable value lives in one flat vector:
///
///   [W1 (n x h) | b1 (h) | W2 (h x h) | b2 (h) | W3 (h x d) | b3 (d) | guesses]
///
/// Weights are stored input-major so a batch forward is X * W + b. Guess
/// values follow the mask order (perturbation k, then its sorted indices).
class EncoderModel {
 public:
  EncoderModel() = default;
  EncoderModel(int input_dim, int latent_dim, GuessMask mask, int hidden = kEncoderHidden,
               double alpha = kLeakSlope);

  int input_dim() const { return input_dim_; }
  int latent_dim() const { return latent_dim_; }
  int hidden() const { return hidden_; }
  double alpha() const { return alpha_; }
  const GuessMask& mask() const { return mask_; }
  int num_guesses() const { return mask_.size(); }

  Eigen::Index parameter_count() const { return params_.size(); }
  const Vector& parameters() const { return params_; }
  Vector& parameters() { return params_; }

  using ConstMatrixMap = Eigen::Map<const Matrix>;
  using ConstVectorMap = Eigen::Map<const Vector>;
  ConstMatrixMap weight(int layer) const;
  ConstVectorMap bias(int layer) const;
  Eigen::Index weight_offset(int layer) const { return w_off_[layer]; }
  Eigen::Index bias_offset(int layer) const { return b_off_[layer]; }
  Eigen::Index guess_offset() const { return guess_off_; }
  ConstVectorMap guess_values() const;

  /// Dense m x d matrix of guessed perturbations (zero outside the mask).
  Matrix guessed_deltas() const;

 private:
  int input_dim_ = 0;
  int latent_dim_ = 0;
  int hidden_ = kEncoderHidden;
  double alpha_ = kLeakSlope;
  GuessMask mask_;
  std::array<Eigen::Index, 3> w_off_{};
  std::array<Eigen::Index, 3> b_off_{};
  Eigen::Index guess_off_ = 0;
  Vector params_;
};

struct TrainConfig {
  double learning_rate = 0.005;
  int batch_size = 10000;  // base samples per step; >= N means full batch
  int epochs = 500;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

struct TrainReport {
  std::vector<double> loss_trace;  // per-epoch mean batch loss
  double final_loss = 0.0;         // full-data loss after the last update
  double wall_time_s = 0.0;
  int guess_span_rank = 0;
};

/// Weights and biases U(-1/sqrt(fan_in), 1/sqrt(fan_in)); guesses N(0, 1).
EncoderModel init_model(int n, int d, const GuessMask& mask, std::uint64_t seed);

Matrix forward(const EncoderModel& model, const Matrix& x);

/// Mean over pairs of ||f(x_tilde) - f(x) - delta'_k||^2.
double loss_batch(const EncoderModel& model, const Observations& pairs);

struct LossAndGradient {
  double loss = 0.0;
  Vector gradient;  // same layout as EncoderModel::parameters()
};

/// Exact reverse-mode gradient of loss_batch.
LossAndGradient gradients(const EncoderModel& model, const Observations& pairs);

/// Adam on the pair loss. Never sees ground-truth latents.
TrainReport train(EncoderModel& model, const Observations& data, const TrainConfig& config);

}  // namespace sparsepert
