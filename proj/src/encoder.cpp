#include "sparsepert/encoder.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "sparsepert/random.hpp"

namespace sparsepert {

EncoderModel::EncoderModel(int input_dim, int latent_dim, GuessMask mask, int hidden, double alpha)
    : input_dim_(input_dim), latent_dim_(latent_dim), hidden_(hidden), alpha_(alpha),
      mask_(std::move(mask)) {
  if (input_dim <= 0 || latent_dim <= 0 || hidden <= 0)
    throw DimensionError("EncoderModel: dimensions must be positive");
  mask_.validate();
  if (mask_.dim != latent_dim) throw DimensionError("EncoderModel: mask dim != latent dim");
  const std::array<int, 3> in{input_dim, hidden, hidden};
  const std::array<int, 3> out{hidden, hidden, latent_dim};
  Eigen::Index off = 0;
  for (int l = 0; l < 3; ++l) {
    w_off_[l] = off;
    off += static_cast<Eigen::Index>(in[l]) * out[l];
    b_off_[l] = off;
    off += out[l];
  }
  guess_off_ = off;
  off += mask_.total_slots();
  params_ = Vector::Zero(off);
}

EncoderModel::ConstMatrixMap EncoderModel::weight(int layer) const {
  const int rows = layer == 0 ? input_dim_ : hidden_;
  const int cols = layer == 2 ? latent_dim_ : hidden_;
  return ConstMatrixMap(params_.data() + w_off_[layer], rows, cols);
}

EncoderModel::ConstVectorMap EncoderModel::bias(int layer) const {
  const int n = layer == 2 ? latent_dim_ : hidden_;
  return ConstVectorMap(params_.data() + b_off_[layer], n);
}

EncoderModel::ConstVectorMap EncoderModel::guess_values() const {
  return ConstVectorMap(params_.data() + guess_off_, params_.size() - guess_off_);
}

Matrix EncoderModel::guessed_deltas() const {
  Matrix out = Matrix::Zero(num_guesses(), latent_dim_);
  Eigen::Index pos = guess_off_;
  for (int k = 0; k < num_guesses(); ++k)
    for (int i : mask_.masks[k]) out(k, i) = params_(pos++);
  return out;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error("TrainConfig: learning_rate must be positive");
  if (batch_size < 1) throw Error("TrainConfig: batch_size must be >= 1");
  if (epochs < 0) throw Error("TrainConfig: epochs must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0))
    throw Error("TrainConfig: invalid Adam constants");
}

EncoderModel init_model(int n, int d, const GuessMask& mask, std::uint64_t seed) {
  EncoderModel model(n, d, mask);
  Rng rng(seed, 0xe1c0);
  Vector& p = model.parameters();
  const std::array<int, 3> fan_in{n, model.hidden(), model.hidden()};
  for (int l = 0; l < 3; ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in[l]));
    for (Eigen::Index i = model.weight_offset(l); i < model.bias_offset(l); ++i)
      p(i) = rng.uniform(-bound, bound);
    const Eigen::Index end = l < 2 ? model.weight_offset(l + 1) : model.guess_offset();
    for (Eigen::Index i = model.bias_offset(l); i < end; ++i) p(i) = rng.uniform(-bound, bound);
  }
  for (Eigen::Index i = model.guess_offset(); i < p.size(); ++i) p(i) = rng.normal();
  return model;
}

namespace {

// Rows per chunk for the blocked forward/backward passes.
constexpr Eigen::Index kChunkRows = 1024;

using RowArray = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Buffers reused across chunks and steps.
struct Activations {
  Matrix pre, h1, d1, h2, d2, out, back1, back2, r, g;
  RowArray soft;
};

// log(1 + e) rather than log1p: e lies in (0, 1], so there is no cancellation
// worth the scalar fallback Eigen uses for log1p. The logistic is recovered as
// exp(t - softplus(t)), which vectorizes better than a sign select.
void activate(const Matrix& pre, double alpha, Matrix& value, Matrix* deriv, RowArray& soft) {
  const auto a = pre.array();
  soft = a.max(0.0) + (1.0 + (-a.abs()).exp()).log();
  value = (alpha * a + (1.0 - alpha) * soft).matrix();
  if (deriv) *deriv = (alpha + (1.0 - alpha) * (a - soft).exp()).matrix();
}

void forward_into(const EncoderModel& model, const Eigen::Ref<const Matrix>& x, Activations& act,
                  bool keep_derivs) {
  Matrix& pre = act.pre;
  pre.noalias() = x * model.weight(0);
  pre.rowwise() += model.bias(0).transpose();
  activate(pre, model.alpha(), act.h1, keep_derivs ? &act.d1 : nullptr, act.soft);
  pre.noalias() = act.h1 * model.weight(1);
  pre.rowwise() += model.bias(1).transpose();
  activate(pre, model.alpha(), act.h2, keep_derivs ? &act.d2 : nullptr, act.soft);
  act.out.noalias() = act.h2 * model.weight(2);
  act.out.rowwise() += model.bias(2).transpose();
}

// A block of base samples and all of their pairs, stacked as [base; perturbed].
struct Chunk {
  Matrix input;
  int num_base = 0;
  std::vector<int> base_index;
  std::vector<int> pert_index;
};

std::vector<Chunk> make_chunks(const Observations& obs) {
  std::vector<Chunk> chunks;
  const int n = obs.num_samples();
  if (n == 0) return chunks;
  const double per_base = 1.0 + static_cast<double>(obs.num_pairs()) / n;
  const int step = std::max(1, static_cast<int>(kChunkRows / per_base));
  for (int begin = 0; begin < n; begin += step) {
    const int end = std::min(n, begin + step);
    Observations part = obs.slice(begin, end);
    Chunk c;
    c.num_base = part.num_samples();
    c.input.resize(part.num_samples() + part.num_pairs(), obs.obs_dim());
    c.input.topRows(part.num_samples()) = part.base;
    c.input.bottomRows(part.num_pairs()) = part.perturbed;
    c.base_index = std::move(part.base_index);
    c.pert_index = std::move(part.pert_index);
    chunks.push_back(std::move(c));
  }
  return chunks;
}

void residuals(const Chunk& c, const Matrix& out, const Matrix& deltas, Matrix& r) {
  const Eigen::Index pairs = static_cast<Eigen::Index>(c.pert_index.size());
  r.resize(pairs, out.cols());
  for (Eigen::Index j = 0; j < pairs; ++j) {
    r.row(j) = out.row(c.num_base + j) - out.row(c.base_index[j]) - deltas.row(c.pert_index[j]);
  }
}

// Adds this chunk's contribution to the gradient (dense guess gradient kept
// separately) and returns its sum of squared residuals.
double accumulate_chunk(const EncoderModel& model, const Chunk& c, const Matrix& deltas,
                        double scale, Vector& grad, Matrix& guess_grad, Activations& act) {
  forward_into(model, c.input, act, true);
  Matrix& r = act.r;
  residuals(c, act.out, deltas, r);
  const Eigen::Index pairs = r.rows();

  Matrix& g = act.g;
  g.setZero(act.out.rows(), act.out.cols());
  for (Eigen::Index j = 0; j < pairs; ++j) {
    const auto gj = (2.0 * scale) * r.row(j);
    g.row(c.num_base + j) = gj;
    g.row(c.base_index[j]) -= gj;
    guess_grad.row(c.pert_index[j]) -= gj;
  }

  const int n = model.input_dim();
  const int h = model.hidden();
  const int d = model.latent_dim();
  Eigen::Map<Matrix> dw3(grad.data() + model.weight_offset(2), h, d);
  Eigen::Map<Vector> db3(grad.data() + model.bias_offset(2), d);
  Eigen::Map<Matrix> dw2(grad.data() + model.weight_offset(1), h, h);
  Eigen::Map<Vector> db2(grad.data() + model.bias_offset(1), h);
  Eigen::Map<Matrix> dw1(grad.data() + model.weight_offset(0), n, h);
  Eigen::Map<Vector> db1(grad.data() + model.bias_offset(0), h);

  dw3.noalias() += act.h2.transpose() * g;
  db3 += g.colwise().sum().transpose();
  Matrix& back = act.back2;
  back.noalias() = g * model.weight(2).transpose();
  back.array() *= act.d2.array();
  dw2.noalias() += act.h1.transpose() * back;
  db2 += back.colwise().sum().transpose();
  Matrix& back1 = act.back1;
  back1.noalias() = back * model.weight(1).transpose();
  back1.array() *= act.d1.array();
  dw1.noalias() += c.input.transpose() * back1;
  db1 += back1.colwise().sum().transpose();
  return r.squaredNorm();
}

LossAndGradient chunked_gradient(const EncoderModel& model, const std::vector<Chunk>& chunks,
                                 int total_pairs, Activations& act) {
  LossAndGradient out;
  out.gradient = Vector::Zero(model.parameter_count());
  if (total_pairs == 0) throw DimensionError("gradients: empty batch");
  const Matrix deltas = model.guessed_deltas();
  Matrix guess_grad = Matrix::Zero(deltas.rows(), deltas.cols());
  const double scale = 1.0 / total_pairs;
  double sse = 0.0;
  for (const auto& c : chunks)
    sse += accumulate_chunk(model, c, deltas, scale, out.gradient, guess_grad, act);
  Eigen::Index pos = model.guess_offset();
  const auto& masks = model.mask().masks;
  for (std::size_t k = 0; k < masks.size(); ++k)
    for (int i : masks[k]) out.gradient(pos++) = guess_grad(static_cast<Eigen::Index>(k), i);
  out.loss = sse * scale;
  return out;
}

double chunked_loss(const EncoderModel& model, const std::vector<Chunk>& chunks, int total_pairs) {
  if (total_pairs == 0) throw DimensionError("loss_batch: empty batch");
  const Matrix deltas = model.guessed_deltas();
  Activations act;
  double sse = 0.0;
  for (const auto& c : chunks) {
    forward_into(model, c.input, act, false);
    residuals(c, act.out, deltas, act.r);
    sse += act.r.squaredNorm();
  }
  return sse / total_pairs;
}

void check_compatible(const EncoderModel& model, const Observations& obs) {
  if (obs.obs_dim() != model.input_dim())
    throw DimensionError("encoder: observation width " + std::to_string(obs.obs_dim()) +
                         " != model input " + std::to_string(model.input_dim()));
  for (int k : obs.pert_index)
    if (k < 0 || k >= model.num_guesses())
      throw DimensionError("encoder: perturbation index has no guess");
}

}  // namespace

Matrix forward(const EncoderModel& model, const Matrix& x) {
  if (x.cols() != model.input_dim())
    throw DimensionError("forward: expected " + std::to_string(model.input_dim()) + " columns");
  Matrix out(x.rows(), model.latent_dim());
  Activations act;
  for (Eigen::Index begin = 0; begin < x.rows(); begin += kChunkRows) {
    const Eigen::Index len = std::min(kChunkRows, x.rows() - begin);
    forward_into(model, x.middleRows(begin, len), act, false);
    out.middleRows(begin, len) = act.out;
  }
  return out;
}

double loss_batch(const EncoderModel& model, const Observations& pairs) {
  check_compatible(model, pairs);
  return chunked_loss(model, make_chunks(pairs), pairs.num_pairs());
}

LossAndGradient gradients(const EncoderModel& model, const Observations& pairs) {
  check_compatible(model, pairs);
  Activations act;
  return chunked_gradient(model, make_chunks(pairs), pairs.num_pairs(), act);
}

TrainReport train(EncoderModel& model, const Observations& data, const TrainConfig& config) {
  config.validate();
  data.validate();
  check_compatible(model, data);
  const auto start = std::chrono::steady_clock::now();
  TrainReport report;

  const int n = data.num_samples();
  const bool full_batch = config.batch_size >= n;
  std::vector<Chunk> full_chunks;
  Activations act;
  if (full_batch) full_chunks = make_chunks(data);

  Vector& params = model.parameters();
  Vector m1 = Vector::Zero(params.size());
  Vector m2 = Vector::Zero(params.size());
  long step = 0;
  std::mt19937_64 shuffle_engine(Rng::mix(config.seed, 0x5a0f));
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  auto adam_step = [&](const Vector& grad) {
    ++step;
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
    m1 = config.beta1 * m1 + (1.0 - config.beta1) * grad;
    m2 = config.beta2 * m2 + (1.0 - config.beta2) * grad.cwiseAbs2();
    params.array() -= config.learning_rate * (m1.array() / c1) /
                      ((m2.array() / c2).sqrt() + config.eps);
  };

  report.loss_trace.reserve(config.epochs);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    int batches = 0;
    if (full_batch) {
      const LossAndGradient lg = chunked_gradient(model, full_chunks, data.num_pairs(), act);
      if (!std::isfinite(lg.loss) || !lg.gradient.allFinite())
        throw NonFiniteLossError("train: non-finite loss/gradient at epoch " +
                                 std::to_string(epoch) + " (loss " + std::to_string(lg.loss) + ")");
      adam_step(lg.gradient);
      epoch_loss = lg.loss;
      batches = 1;
    } else {
      std::shuffle(order.begin(), order.end(), shuffle_engine);
      for (int begin = 0; begin < n; begin += config.batch_size) {
        const int end = std::min(n, begin + config.batch_size);
        std::vector<int> rows(order.begin() + begin, order.begin() + end);
        std::sort(rows.begin(), rows.end());
        const Observations batch = data.gather(rows);
        if (batch.num_pairs() == 0) continue;
        const LossAndGradient lg =
            chunked_gradient(model, make_chunks(batch), batch.num_pairs(), act);
        if (!std::isfinite(lg.loss) || !lg.gradient.allFinite())
          throw NonFiniteLossError("train: non-finite loss/gradient at epoch " +
                                   std::to_string(epoch) + " (loss " + std::to_string(lg.loss) +
                                   ")");
        adam_step(lg.gradient);
        epoch_loss += lg.loss;
        ++batches;
      }
    }
    report.loss_trace.push_back(batches ? epoch_loss / batches : 0.0);
  }
  if (!params.allFinite()) throw NonFiniteLossError("train: non-finite parameters after training");

  report.final_loss = full_batch ? chunked_loss(model, full_chunks, data.num_pairs())
                                 : loss_batch(model, data);
  report.guess_span_rank = numerics::numerical_rank(model.guessed_deltas());
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace sparsepert
