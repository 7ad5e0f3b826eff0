#include <doctest.h>

#include <cmath>

#include "sparsepert/dgp.hpp"
#include "sparsepert/encoder.hpp"
#include "sparsepert/perturb.hpp"
#include "sparsepert/random.hpp"

using namespace sparsepert;

namespace {

Dataset small_dataset(int d, int n, std::uint64_t seed, PairMode mode = PairMode::kAllM) {
  const auto dist = LatentDistribution::uniform(d);
  const auto g = build_mixing_mlp(d, seed, &dist);
  const auto pset = perturb::make_one_sparse_set(d, seed);
  return generate_dataset(dist, g, pset, n, mode, seed);
}

// Direct per-pair evaluation of the loss.
double naive_loss(const EncoderModel& model, const Observations& o) {
  const Matrix fx = forward(model, o.base);
  const Matrix fxt = forward(model, o.perturbed);
  const Matrix guesses = model.guessed_deltas();
  double total = 0.0;
  for (int r = 0; r < o.num_pairs(); ++r)
    total += (fxt.row(r) - fx.row(o.base_index[r]) - guesses.row(o.pert_index[r])).squaredNorm();
  return total / o.num_pairs();
}

}  // namespace

TEST_CASE("parameter layout") {
  const auto pset = perturb::make_blockwise_set(4, 2, 3, 1);
  const auto mask = perturb::derive_guess_masks(pset, perturb::ExactBlocks{});
  const EncoderModel m(4, 4, mask, 7);
  CHECK(m.parameter_count() == 4 * 7 + 7 + 7 * 7 + 7 + 7 * 4 + 4 + mask.total_slots());
  CHECK(m.guess_offset() + mask.total_slots() == m.parameter_count());
  CHECK(m.weight(1).rows() == 7);
  CHECK(m.weight(2).cols() == 4);
}

TEST_CASE("guessed deltas are zero outside the mask") {
  const auto pset = perturb::make_overlapping_contiguous_set(6, 2, 2, 1);
  const auto mask = perturb::derive_guess_masks(pset, perturb::ExactBlocks{});
  const EncoderModel m = init_model(6, 6, mask, 3);
  const Matrix g = m.guessed_deltas();
  for (int k = 0; k < g.rows(); ++k)
    for (int j = 0; j < 6; ++j) {
      const bool on = std::binary_search(mask.masks[k].begin(), mask.masks[k].end(), j);
      CHECK((g(k, j) != 0.0) == on);
    }
}

TEST_CASE("init_model ranges") {
  const auto mask = perturb::derive_guess_masks(perturb::make_one_sparse_set(5, 0), perturb::ExactBlocks{});
  const EncoderModel m = init_model(5, 5, mask, 11);
  CHECK(m.weight(0).cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(5.0));
  CHECK(m.weight(1).cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(100.0));
  CHECK(m.bias(2).cwiseAbs().maxCoeff() <= 1.0 / std::sqrt(100.0));
  CHECK(init_model(5, 5, mask, 11).parameters() == m.parameters());
  CHECK(init_model(5, 5, mask, 12).parameters() != m.parameters());
}

TEST_CASE("loss matches a per-pair evaluation") {
  const Dataset ds = small_dataset(4, 40, 2);
  const EncoderModel m = init_model(4, 4, perturb::derive_guess_masks(perturb::make_one_sparse_set(4, 2), perturb::ExactBlocks{}), 5);
  CHECK(loss_batch(m, ds.observations) == doctest::Approx(naive_loss(m, ds.observations)).epsilon(1e-12));
  CHECK(gradients(m, ds.observations).loss == doctest::Approx(naive_loss(m, ds.observations)).epsilon(1e-12));
}

TEST_CASE("gradient matches central finite differences on a small model") {
  const Dataset ds = small_dataset(3, 12, 4, PairMode::kSingleRandom);
  const auto mask = perturb::derive_guess_masks(perturb::make_one_sparse_set(3, 4), perturb::ExactBlocks{});
  EncoderModel m(3, 3, mask, 5);
  Rng rng(9);
  for (Eigen::Index i = 0; i < m.parameter_count(); ++i) m.parameters()(i) = rng.normal();
  const Vector g = gradients(m, ds.observations).gradient;
  const double h = 1e-5;
  for (Eigen::Index i = 0; i < m.parameter_count(); ++i) {
    const double x = m.parameters()(i);
    m.parameters()(i) = x + h;
    const double up = loss_batch(m, ds.observations);
    m.parameters()(i) = x - h;
    const double down = loss_batch(m, ds.observations);
    m.parameters()(i) = x;
    const double fd = (up - down) / (2 * h);
    CHECK(std::abs(fd - g(i)) <= 1e-4 * std::max({std::abs(fd), std::abs(g(i)), 1e-3}));
  }
}

TEST_CASE("training lowers the loss and is reproducible") {
  const Dataset ds = small_dataset(3, 200, 6);
  const auto mask = perturb::derive_guess_masks(perturb::make_one_sparse_set(3, 6), perturb::ExactBlocks{});
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 50;
  cfg.seed = 1;
  EncoderModel a = init_model(3, 3, mask, 2), b = a;
  const double before = loss_batch(a, ds.observations);
  const TrainReport ra = train(a, ds.observations, cfg);
  train(b, ds.observations, cfg);
  CHECK(ra.loss_trace.size() == 30);
  CHECK(ra.final_loss < 0.5 * before);
  CHECK(ra.final_loss == doctest::Approx(loss_batch(a, ds.observations)).epsilon(1e-12));
  CHECK(a.parameters() == b.parameters());
  CHECK(ra.guess_span_rank == 3);
  const Matrix g = a.guessed_deltas();
  for (int k = 0; k < 3; ++k)
    for (int j = 0; j < 3; ++j)
      if (j != k) CHECK(g(k, j) == 0.0);
}

TEST_CASE("training never reads the latents") {
  // Poisoning the ground truth must leave the fitted parameters unchanged.
  Dataset clean = small_dataset(3, 100, 7);
  Dataset poisoned = clean;
  poisoned.truth.z.setConstant(NAN);
  poisoned.truth.z_perturbed.setRandom();
  const auto mask = perturb::derive_guess_masks(perturb::make_one_sparse_set(3, 7), perturb::ExactBlocks{});
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 25;
  EncoderModel a = init_model(3, 3, mask, 1), b = a;
  train(a, clean.observations, cfg);
  train(b, poisoned.observations, cfg);
  CHECK(a.parameters() == b.parameters());
}

TEST_CASE("full batch equals one gradient step per epoch") {
  const Dataset ds = small_dataset(3, 60, 8);
  const auto mask = perturb::derive_guess_masks(perturb::make_one_sparse_set(3, 8), perturb::ExactBlocks{});
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 1000;
  EncoderModel m = init_model(3, 3, mask, 4);
  const Vector g = gradients(m, ds.observations).gradient;
  const Vector before = m.parameters();
  train(m, ds.observations, cfg);
  // First Adam step moves every parameter with nonzero gradient by lr * sign(g).
  for (Eigen::Index i = 0; i < g.size(); ++i)
    if (std::abs(g(i)) > 1e-6)
      CHECK(before(i) - m.parameters()(i) == doctest::Approx(cfg.learning_rate * (g(i) > 0 ? 1 : -1)).epsilon(1e-3));
}

TEST_CASE("bad training configs are rejected") {
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  CHECK_THROWS(cfg.validate());
  cfg = TrainConfig{};
  cfg.epochs = -1;
  CHECK_THROWS(cfg.validate());
  cfg = TrainConfig{};
  cfg.beta1 = 1.0;
  CHECK_THROWS(cfg.validate());
  cfg = TrainConfig{};
  cfg.batch_size = 0;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("diverging training raises") {
  const Dataset ds = small_dataset(3, 50, 9);
  const auto mask = perturb::derive_guess_masks(perturb::make_one_sparse_set(3, 9), perturb::ExactBlocks{});
  EncoderModel m = init_model(3, 3, mask, 1);
  m.parameters()(0) = NAN;
  TrainConfig cfg;
  cfg.epochs = 2;
  CHECK_THROWS_AS(train(m, ds.observations, cfg), NonFiniteLossError);
}
