#include "sparsepert/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

#include "sparsepert/eval.hpp"
#include "sparsepert/random.hpp"
#include "sparsepert/serialize.hpp"
#include "sparsepert/version.hpp"

namespace sparsepert {

namespace pt = boost::property_tree;
using nlohmann::json;

std::string to_string(RegimeKind kind) {
  switch (kind) {
    case RegimeKind::kOneSparse:
      return "one-sparse";
    case RegimeKind::kBlockwise:
      return "blockwise";
    case RegimeKind::kOverlappingContiguous:
      return "overlapping-contiguous";
    case RegimeKind::kRandomBlocks:
      return "random-blocks";
  }
  return "?";
}

RegimeKind regime_kind_from_string(const std::string& s) {
  for (auto k : {RegimeKind::kOneSparse, RegimeKind::kBlockwise,
                 RegimeKind::kOverlappingContiguous, RegimeKind::kRandomBlocks})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown perturbation regime '" + s + "'");
}

std::string to_string(GuessKind kind) { return kind == GuessKind::kExact ? "exact" : "candidate"; }

GuessKind guess_kind_from_string(const std::string& s) {
  if (s == "exact") return GuessKind::kExact;
  if (s == "candidate") return GuessKind::kCandidate;
  throw ConfigError("unknown guess regime '" + s + "'");
}

LatentDistribution ExperimentConfig::distribution() const {
  return dist == LatentKind::kUniformIndependent ? LatentDistribution::uniform(d, low, high)
                                                 : LatentDistribution::normal_blockwise(d, rho);
}

TrainConfig ExperimentConfig::effective_train() const {
  TrainConfig t = train;
  if (full_fidelity) {
    t.epochs = kFullFidelityEpochs;
    t.batch_size = kFullFidelityBatch;
  }
  return t;
}

namespace {

std::uint64_t binomial(int n, int k) {
  std::uint64_t r = 1;
  for (int i = 1; i <= k; ++i) r = r * static_cast<std::uint64_t>(n - k + i) / i;
  return r;
}

}  // namespace

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("invalid config: " + msg); };
  if (seeds.empty()) fail("no seeds");
  if (d < 1) fail("d must be positive");
  if (n_train < 1) fail("n_train must be positive");
  if (n_test <= d + 1) fail("n_test must exceed d + 1 for the affine fit");
  try {
    distribution().validate();
    effective_train().validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    fail(e.what());
  }
  if (p < 1 || p > d) fail("p must lie in [1, d]");
  if (per_group < 0) fail("per_group must be >= 0");
  if (group_size() < p) fail("per_group must be at least p");
  switch (regime) {
    case RegimeKind::kOneSparse:
      if (p != 1) fail("one-sparse perturbations need p = 1");
      break;
    case RegimeKind::kBlockwise:
      if (d % p != 0) fail("blockwise perturbations need d divisible by p");
      break;
    case RegimeKind::kOverlappingContiguous:
      if (d % p != 0 || p >= d) fail("overlapping contiguous blocks need p < d with d divisible by p");
      break;
    case RegimeKind::kRandomBlocks:
      if (s < 1 || static_cast<std::uint64_t>(s) > binomial(d, p))
        fail("random blocks need 1 <= s <= C(d, p)");
      break;
  }
  if (guess == GuessKind::kCandidate) {
    if (regime != RegimeKind::kOneSparse && regime != RegimeKind::kBlockwise)
      fail("mask candidates need a blockwise non-overlapping regime");
    if (candidate < 0 || static_cast<std::uint64_t>(candidate) >= perturb::count_mask_candidates(d, p))
      fail("candidate index out of range");
  }
}

namespace {

// ptree's get(path, default) falls back to the default on a malformed value.
template <class T>
T read(const pt::ptree& tree, const std::string& path, const T& fallback) {
  const auto raw = tree.get_optional<std::string>(path);
  if (!raw) return fallback;
  const auto value = tree.get_optional<T>(path);
  if (!value) throw ConfigError("bad value '" + *raw + "' for " + path);
  return *value;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_ini_string(const std::string& text) {
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  static const std::map<std::string, std::set<std::string>> known{
      {"experiment", {"name", "seeds", "n_train", "n_test"}},
      {"dgp", {"d", "dist", "low", "high", "rho", "mode"}},
      {"perturb", {"regime", "p", "s", "per_group", "guess", "candidate"}},
      {"train", {"learning_rate", "batch_size", "epochs", "beta1", "beta2", "eps", "full_fidelity"}},
  };
  for (const auto& [section, body] : tree) {
    const auto it = known.find(section);
    if (it == known.end()) throw ConfigError("unknown config section [" + section + "]");
    if (!body.data().empty()) throw ConfigError("top-level key '" + section + "' outside a section");
    for (const auto& [key, value] : body)
      if (!it->second.count(key)) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
  }

  ExperimentConfig c;
  try {
    c.name = read(tree, "experiment.name", c.name);
    if (auto seeds = tree.get_optional<std::string>("experiment.seeds")) {
      c.seeds.clear();
      std::stringstream ss(*seeds);
      std::string item;
      while (std::getline(ss, item, ',')) {
        item.erase(0, item.find_first_not_of(" \t"));
        item.erase(item.find_last_not_of(" \t") + 1);
        if (item.empty()) continue;
        std::size_t used = 0;
        const auto v = std::stoull(item, &used);
        if (used != item.size()) throw ConfigError("bad seed '" + item + "'");
        c.seeds.push_back(v);
      }
    }
    c.n_train = read(tree, "experiment.n_train", c.n_train);
    c.n_test = read(tree, "experiment.n_test", c.n_test);
    c.d = read(tree, "dgp.d", c.d);
    if (auto v = tree.get_optional<std::string>("dgp.dist")) c.dist = latent_kind_from_string(*v);
    c.low = read(tree, "dgp.low", c.low);
    c.high = read(tree, "dgp.high", c.high);
    c.rho = read(tree, "dgp.rho", c.rho);
    if (auto v = tree.get_optional<std::string>("dgp.mode")) c.mode = pair_mode_from_string(*v);
    if (auto v = tree.get_optional<std::string>("perturb.regime")) c.regime = regime_kind_from_string(*v);
    c.p = read(tree, "perturb.p", c.p);
    c.s = read(tree, "perturb.s", c.s);
    c.per_group = read(tree, "perturb.per_group", c.per_group);
    if (auto v = tree.get_optional<std::string>("perturb.guess")) c.guess = guess_kind_from_string(*v);
    c.candidate = read(tree, "perturb.candidate", c.candidate);
    c.train.learning_rate = read(tree, "train.learning_rate", c.train.learning_rate);
    c.train.batch_size = read(tree, "train.batch_size", c.train.batch_size);
    c.train.epochs = read(tree, "train.epochs", c.train.epochs);
    c.train.beta1 = read(tree, "train.beta1", c.train.beta1);
    c.train.beta2 = read(tree, "train.beta2", c.train.beta2);
    c.train.eps = read(tree, "train.eps", c.train.eps);
    c.full_fidelity = read(tree, "train.full_fidelity", c.full_fidelity);
  } catch (const pt::ptree_error& e) {
    throw ConfigError(std::string("config value error: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config value error: ") + e.what());
  } catch (const std::out_of_range& e) {
    throw ConfigError(std::string("config value error: ") + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::from_ini_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_ini_string(buf.str());
}

std::string ExperimentConfig::to_ini() const {
  std::string seed_list;
  for (std::size_t i = 0; i < seeds.size(); ++i) seed_list += (i ? "," : "") + std::to_string(seeds[i]);
  const std::string dist_name = dist == LatentKind::kUniformIndependent ? "uniform-independent"
                                                                        : "normal-blockwise";
  return fmt::format(
      "[experiment]\nname = {}\nseeds = {}\nn_train = {}\nn_test = {}\n\n"
      "[dgp]\nd = {}\ndist = {}\nlow = {:.17g}\nhigh = {:.17g}\nrho = {:.17g}\nmode = {}\n\n"
      "[perturb]\nregime = {}\np = {}\ns = {}\nper_group = {}\nguess = {}\ncandidate = {}\n\n"
      "[train]\nlearning_rate = {:.17g}\nbatch_size = {}\nepochs = {}\nbeta1 = {:.17g}\n"
      "beta2 = {:.17g}\neps = {:.17g}\nfull_fidelity = {}\n",
      name, seed_list, n_train, n_test, d, dist_name, low, high, rho, to_string(mode),
      to_string(regime), p, s, per_group, to_string(guess), candidate, train.learning_rate,
      train.batch_size, train.epochs, train.beta1, train.beta2, train.eps,
      full_fidelity ? "true" : "false");
}

std::string ExperimentConfig::hash() const { return serialize::sha256_hex(to_ini()); }

const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols{
      "d",         "dist",          "regime",    "p",          "per_example_mode",
      "seed",      "mcc",           "bmcc",      "min_affine_r2", "structure",
      "final_loss", "guess_span_rank", "wall_time_s", "status"};
  return cols;
}

std::string csv_header() {
  std::string out;
  for (const auto& c : csv_columns()) out += (out.empty() ? "" : ",") + c;
  return out;
}

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  return fmt::format("{:.17g}", v);
}

std::string quoted(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

std::string csv_fields(const ResultRow& r, bool with_time) {
  std::string out = fmt::format("{},{},{},{},{},{},{},{},{},{},{},{}", r.d, r.dist, r.regime, r.p,
                                r.per_example_mode, r.seed, num(r.mcc), num(r.bmcc),
                                num(r.min_affine_r2), quoted(r.structure), num(r.final_loss),
                                r.guess_span_rank);
  if (with_time) out += "," + fmt::format("{:.3f}", r.wall_time_s);
  return out + "," + quoted(r.status);
}

}  // namespace

std::string csv_line(const ResultRow& row) { return csv_fields(row, true); }
std::string csv_line_deterministic(const ResultRow& row) { return csv_fields(row, false); }

std::string to_csv(const std::vector<ResultRow>& rows) {
  std::string out = csv_header() + "\n";
  for (const auto& r : rows) out += csv_line(r) + "\n";
  return out;
}

namespace {

enum Stream : std::uint64_t {
  kMixingStream = 0x6d1,
  kPerturbStream = 0x9e7,
  kTrainDataStream = 0x7a1,
  kTestDataStream = 0x7e5,
  kInitStream = 0xe4c,
  kOptimStream = 0x5ee,
  kValidationSetStream = 0x7a5,
  kValidationDataStream = 0x7a6,
};

PerturbationSet build_perturbations(const ExperimentConfig& c, std::uint64_t seed) {
  switch (c.regime) {
    case RegimeKind::kOneSparse:
      return perturb::make_one_sparse_set(c.d, seed);
    case RegimeKind::kBlockwise:
      return perturb::make_blockwise_set(c.d, c.p, c.group_size(), seed);
    case RegimeKind::kOverlappingContiguous:
      return perturb::make_overlapping_contiguous_set(c.d, c.p, c.group_size(), seed);
    case RegimeKind::kRandomBlocks:
      return perturb::make_random_blocks_set(c.d, c.p, c.s, c.group_size(), seed);
  }
  throw ConfigError("unknown regime");
}

ResultRow blank_row(const ExperimentConfig& c, std::uint64_t seed) {
  ResultRow r;
  r.d = c.d;
  r.dist = to_string(c.dist);
  r.regime = to_string(c.regime);
  r.p = c.p;
  r.per_example_mode = to_string(c.mode);
  r.seed = seed;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  r.mcc = r.bmcc = r.min_affine_r2 = r.final_loss = nan;
  return r;
}

}  // namespace

SeedArtifacts prepare_seed(const ExperimentConfig& config, std::uint64_t seed,
                           const PerturbationSet* perturbations) {
  SeedArtifacts art;
  art.seed = seed;
  art.row = blank_row(config, seed);
  const LatentDistribution dist = config.distribution();
  art.mixing = build_mixing_mlp(config.d, Rng::mix(seed, kMixingStream), &dist);
  art.perturbations =
      perturbations ? *perturbations : build_perturbations(config, Rng::mix(seed, kPerturbStream));
  art.train = generate_dataset(dist, art.mixing, art.perturbations, config.n_train, config.mode,
                               Rng::mix(seed, kTrainDataStream));
  art.test = generate_dataset(dist, art.mixing, art.perturbations, config.n_test, config.mode,
                              Rng::mix(seed, kTestDataStream));
  perturb::GuessRegime regime = perturb::ExactBlocks{};
  if (config.guess == GuessKind::kCandidate) regime = perturb::MaskCandidate{config.candidate, config.p};
  const GuessMask mask = perturb::derive_guess_masks(art.perturbations, regime);
  art.model = init_model(art.train.observations.obs_dim(), config.d, mask, Rng::mix(seed, kInitStream));
  return art;
}

ResultRow run_seed(const ExperimentConfig& config, SeedArtifacts& art) {
  const auto start = std::chrono::steady_clock::now();
  TrainConfig tc = config.effective_train();
  tc.seed = Rng::mix(art.seed, kOptimStream);
  art.report = train(art.model, art.train.observations, tc);

  const Matrix z_hat = forward(art.model, art.test.observations.base);
  const PerturbationSet& pset = art.perturbations;
  std::vector<IndexSet> hat_blocks(pset.num_groups());
  for (int k = 0; k < art.model.num_guesses(); ++k)
    hat_blocks[art.model.mask().group_of[k]] = art.model.mask().masks[k];
  const bool partition = pset.non_overlapping;
  const auto report = eval::identification_report(z_hat, art.test.truth.z, config.p,
                                                  partition ? &pset.block_of_group : nullptr,
                                                  partition ? &hat_blocks : nullptr);
  ResultRow& r = art.row;
  r.mcc = report.mcc.score;
  r.bmcc = report.bmcc ? report.bmcc->score : std::numeric_limits<double>::quiet_NaN();
  r.min_affine_r2 = report.affine.r2.minCoeff();
  r.structure = report.structure.str();
  r.final_loss = art.report.final_loss;
  r.guess_span_rank = art.report.guess_span_rank;
  r.status = "ok";
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::vector<ResultRow> run_experiment(const ExperimentConfig& config, int threads,
                                      std::vector<SeedArtifacts>* artifacts) {
  config.validate();
  const std::size_t n = config.seeds.size();
  std::vector<ResultRow> rows(n);
  std::vector<SeedArtifacts> arts(artifacts ? n : 0);
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      const std::uint64_t seed = config.seeds[i];
      SeedArtifacts art;
      art.row = blank_row(config, seed);
      try {
        art = prepare_seed(config, seed);
        run_seed(config, art);
      } catch (const std::exception& e) {
        art.row.status = std::string("error: ") + e.what();
      }
      rows[i] = art.row;
      if (artifacts) arts[i] = std::move(art);
    }
  };
  const int count = std::clamp(threads, 1, static_cast<int>(n));
  if (count == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < count; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (artifacts) *artifacts = std::move(arts);
  return rows;
}

MaskSearchRun run_mask_search(const ExperimentConfig& config, std::uint64_t seed, int threads) {
  config.validate();
  if (config.regime != RegimeKind::kOneSparse && config.regime != RegimeKind::kBlockwise)
    throw ConfigError("mask search needs a one-sparse or blockwise regime");
  MaskSearchRun run;
  if (config.regime == RegimeKind::kBlockwise) {
    const PerturbationSet admissible = oracle::admissible_blockwise_set(
        config.d, config.p, config.group_size(), Rng::mix(seed, kPerturbStream));
    run.artifacts = prepare_seed(config, seed, &admissible);
  } else {
    run.artifacts = prepare_seed(config, seed);
  }
  SeedArtifacts& art = run.artifacts;
  const LatentDistribution dist = config.distribution();
  run.validation_perturbations =
      config.regime == RegimeKind::kOneSparse
          ? perturb::make_one_sparse_set(config.d, Rng::mix(seed, kValidationSetStream))
          : perturb::make_blockwise_set(config.d, config.p, config.group_size(),
                                        Rng::mix(seed, kValidationSetStream));
  const Dataset validation = generate_dataset(dist, art.mixing, run.validation_perturbations,
                                              config.n_test, PairMode::kAllM,
                                              Rng::mix(seed, kValidationDataStream));
  TrainConfig tc = config.effective_train();
  tc.seed = Rng::mix(seed, kOptimStream);
  // Candidate encoders share the init stream so they differ only in their mask.
  run.search = oracle::mask_search(art.train.observations, validation.observations,
                                   art.perturbations.group_of, config.d, config.p, tc,
                                   Rng::mix(seed, kInitStream), threads);
  art.model = run.search.selected_model;
  art.report = run.search.report;

  const Matrix z_hat = forward(art.model, art.test.observations.base);
  std::vector<IndexSet> hat_blocks(art.perturbations.num_groups());
  for (int k = 0; k < art.model.num_guesses(); ++k)
    hat_blocks[art.model.mask().group_of[k]] = art.model.mask().masks[k];
  run.bmcc = eval::bmcc(z_hat, art.test.truth.z, art.perturbations.block_of_group, hat_blocks).score;
  run.mcc = eval::mcc(z_hat, art.test.truth.z).score;
  return run;
}

TableId table_id_from_string(const std::string& s) {
  if (s == "t1" || s == "T1") return TableId::kT1;
  if (s == "t2" || s == "T2") return TableId::kT2;
  throw ConfigError("unknown table '" + s + "' (expected t1 or t2)");
}

ExperimentConfig table_cell_config(TableId table, int d, LatentKind dist, int column) {
  ExperimentConfig c;
  c.d = d;
  c.dist = dist;
  c.name = fmt::format("{}-d{}-{}-c{}", table == TableId::kT1 ? "t1" : "t2", d, to_string(dist), column);
  if (table == TableId::kT1) {
    if (column < 0 || column > 3) throw ConfigError("table t1 has columns 0..3");
    c.regime = column < 2 ? RegimeKind::kOneSparse : RegimeKind::kBlockwise;
    c.p = column < 2 ? 1 : 2;
    c.mode = column % 2 == 0 ? PairMode::kAllM : PairMode::kSingleRandom;
  } else {
    if (column != 0) throw ConfigError("table t2 has a single column");
    c.regime = RegimeKind::kOverlappingContiguous;
    c.p = 2;
  }
  return c;
}

namespace {

std::string mean_std(const std::vector<ResultRow>& rows, bool use_bmcc) {
  std::vector<double> v;
  for (const auto& r : rows)
    if (r.status == "ok") v.push_back(use_bmcc ? r.bmcc : r.mcc);
  if (v.empty()) return "n/a";
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  var /= static_cast<double>(v.size());
  return fmt::format("{:.2f} ± {:.2f}", mean, std::sqrt(var));
}

}  // namespace

TableResult reproduce_table(TableId table, const TableOptions& options) {
  if (options.seeds < 1) throw ConfigError("reproduce_table: seeds must be >= 1");
  const int columns = table == TableId::kT1 ? 4 : 1;
  TableResult out;
  std::vector<std::string> lines;
  if (table == TableId::kT1) {
    lines.push_back(fmt::format("{:<4}{:<10}{:<16}{:<16}{:<16}{:<16}", "d", "p_Z", "MCC C-wise(d)",
                                "MCC C-wise(1)", "BMCC B-wise(d)", "BMCC B-wise(1)"));
  } else {
    lines.push_back(fmt::format("{:<4}{:<14}{:<16}", "d", "Distribution", "MCC"));
  }
  for (LatentKind dist : {LatentKind::kNormalBlockwise, LatentKind::kUniformIndependent}) {
    for (int d : options.d_values) {
      std::string line = fmt::format("{:<4}{:<{}}", d,
                                     dist == LatentKind::kNormalBlockwise ? "Normal" : "Uniform",
                                     table == TableId::kT1 ? 10 : 14);
      for (int col = 0; col < columns; ++col) {
        ExperimentConfig c = table_cell_config(table, d, dist, col);
        c.seeds.clear();
        for (int s = 0; s < options.seeds; ++s) c.seeds.push_back(static_cast<std::uint64_t>(s));
        c.full_fidelity = options.full_fidelity;
        if (options.epochs) c.train.epochs = *options.epochs;
        const auto rows = run_experiment(c, options.threads);
        const bool use_bmcc = table == TableId::kT1 && col >= 2;
        line += fmt::format("{:<16}", mean_std(rows, use_bmcc));
        out.rows.insert(out.rows.end(), rows.begin(), rows.end());
      }
      while (!line.empty() && line.back() == ' ') line.pop_back();
      lines.push_back(line);
    }
  }
  for (const auto& l : lines) out.formatted += l + "\n";
  return out;
}

OracleSuiteReport run_oracle_suite(int d_max, int trials, std::uint64_t seed) {
  if (d_max < 4 || d_max > 8) throw ConfigError("run_oracle_suite: d_max must lie in [4, 8]");
  if (trials < 1) throw ConfigError("run_oracle_suite: trials must be >= 1");
  OracleSuiteReport out;
  using oracle::Theorem;
  for (int d = 2; d <= d_max; ++d)
    out.theorems.push_back(oracle::verify_theorem_structure(Theorem::kT1, d, 1, trials, seed));
  for (int d = 4; d <= d_max; d += 2)
    out.theorems.push_back(oracle::verify_theorem_structure(Theorem::kT2, d, 2, trials, seed));
  for (int d = 4; d <= std::min(d_max, 6); d += 2)
    out.theorems.push_back(oracle::verify_theorem_structure(Theorem::kT4, d, 2, trials, seed));

  bool stationary_ok = true;
  for (int n = 2; n <= 20; ++n) {
    auto r = oracle::stationary_point_check(n, 1.0);
    stationary_ok = stationary_ok && r.residual_sum == 0.0 && r.off_diagonal_ratio == 1.0 / (n - 1) &&
                    r.limit_structure.kind == eval::StructureKind::kPermutationScaling;
    out.stationary.push_back(std::move(r));
  }

  auto expect_split = [&](const IndexSet& b1, const IndexSet& b2, const IndexSet& both,
                          const IndexSet& only1, const IndexSet& only2) {
    const auto [x, y, z] = oracle::block_refinement(b1, b2);
    if (x != both || y != only1 || z != only2)
      out.refinement_failures.push_back(fmt::format("block_refinement({}, {})", fmt::join(b1, " "),
                                                    fmt::join(b2, " ")));
  };
  expect_split({0, 1}, {1, 2}, {1}, {0}, {2});
  expect_split({0, 1}, {2, 3}, {}, {0, 1}, {2, 3});
  expect_split({0, 1, 2}, {1, 2, 3}, {1, 2}, {0}, {3});

  // Maps whose rows stay inside the block their index belongs to.
  Rng rng(seed, 0x5e7);
  auto block_map = [&](const std::vector<IndexSet>& blocks, int d) {
    Matrix a = Matrix::Zero(d, d);
    for (const auto& b : blocks)
      for (int i : b)
        for (int j : b) a(i, j) = rng.signed_magnitude();
    return a;
  };
  auto check_refined = [&](const std::vector<std::vector<IndexSet>>& partitions, int d,
                           const std::vector<IndexSet>& expected, const std::string& label) {
    std::vector<oracle::PartitionMap> maps;
    for (const auto& blocks : partitions) maps.push_back({block_map(blocks, d), blocks});
    try {
      const auto refined = oracle::refine_identification(maps);
      if (refined.refined_blocks != expected) out.refinement_failures.push_back(label);
    } catch (const Error& e) {
      out.refinement_failures.push_back(label + ": " + e.what());
    }
  };
  check_refined({{{0, 1}, {2, 3}}, {{1, 2}, {0, 3}}}, 4, {{0}, {1}, {2}, {3}}, "d=4 p=2 offset partitions");
  check_refined({{{0, 1}, {2, 3}}, {{0, 1}, {2, 3}}}, 4, {{0, 1}, {2, 3}}, "identical partitions");
  check_refined({{{0, 1, 2}, {3, 4, 5}}, {{1, 2, 3}, {0, 4, 5}}}, 6, {{0}, {1, 2}, {3}, {4, 5}},
                "d=6 p=3 offset partitions");

  bool theorems_ok = true;
  std::string text;
  for (const auto& t : out.theorems) {
    theorems_ok = theorems_ok && t.ok();
    text += fmt::format("{} d={} p={}: {}/{} passed, max residual {:.3g}{}\n", oracle::to_string(t.theorem),
                        t.d, t.p, t.passed, t.trials, t.max_residual, t.ok() ? "" : "  FAIL");
  }
  text += fmt::format("stationary point n_balls=2..20: {}\n", stationary_ok ? "all residual sums 0" : "FAIL");
  text += fmt::format("refinement examples: {}\n",
                      out.refinement_failures.empty() ? "ok" : "FAIL (" + fmt::format("{}", fmt::join(out.refinement_failures, "; ")) + ")");
  out.ok = theorems_ok && stationary_ok && out.refinement_failures.empty();
  out.formatted = text;
  return out;
}

namespace {

json row_to_json(const ResultRow& r) {
  auto number = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  return {{"d", r.d},
          {"dist", r.dist},
          {"regime", r.regime},
          {"p", r.p},
          {"per_example_mode", r.per_example_mode},
          {"seed", r.seed},
          {"mcc", number(r.mcc)},
          {"bmcc", number(r.bmcc)},
          {"min_affine_r2", number(r.min_affine_r2)},
          {"structure", r.structure},
          {"final_loss", number(r.final_loss)},
          {"guess_span_rank", r.guess_span_rank},
          {"wall_time_s", r.wall_time_s},
          {"status", r.status}};
}

ResultRow row_from_json(const json& j) {
  auto number = [](const json& v) {
    return v.is_null() ? std::numeric_limits<double>::quiet_NaN() : v.get<double>();
  };
  ResultRow r;
  r.d = j.at("d").get<int>();
  r.dist = j.at("dist").get<std::string>();
  r.regime = j.at("regime").get<std::string>();
  r.p = j.at("p").get<int>();
  r.per_example_mode = j.at("per_example_mode").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.mcc = number(j.at("mcc"));
  r.bmcc = number(j.at("bmcc"));
  r.min_affine_r2 = number(j.at("min_affine_r2"));
  r.structure = j.at("structure").get<std::string>();
  r.final_loss = number(j.at("final_loss"));
  r.guess_span_rank = j.at("guess_span_rank").get<int>();
  r.wall_time_s = j.at("wall_time_s").get<double>();
  r.status = j.at("status").get<std::string>();
  return r;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

constexpr const char* kManifestFormat = "sparsepert.artifacts";

}  // namespace

void save_artifacts(const std::filesystem::path& dir, const ExperimentConfig& config,
                    const std::vector<SeedArtifacts>& seeds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string ini = config.to_ini();
  write_text(dir / "config.ini", ini);
  std::vector<ResultRow> rows;
  json seed_list = json::array();
  json files = json::object();
  for (const auto& s : seeds) {
    rows.push_back(s.row);
    const std::string sub = "seed-" + std::to_string(s.seed);
    fs::create_directories(dir / sub);
    serialize::save_mixing(s.mixing, dir / sub / "mixing.bin");
    serialize::save_perturbations(s.perturbations, dir / sub / "perturbations.bin");
    serialize::save_dataset(s.train, dir / sub / "train.bin");
    serialize::save_dataset(s.test, dir / sub / "test.bin");
    serialize::save_model(s.model, dir / sub / "model.bin");
    const json report = {{"loss_trace", s.report.loss_trace},
                         {"final_loss", s.report.final_loss},
                         {"wall_time_s", s.report.wall_time_s},
                         {"guess_span_rank", s.report.guess_span_rank},
                         {"row", row_to_json(s.row)}};
    write_text(dir / sub / "report.json", report.dump(2) + "\n");
    seed_list.push_back({{"seed", s.seed}, {"dir", sub}});
    for (const char* f : {"mixing.bin", "perturbations.bin", "train.bin", "test.bin", "model.bin", "report.json"})
      files[sub + "/" + f] = serialize::sha256_hex(read_text(dir / sub / f));
  }
  write_text(dir / "results.csv", to_csv(rows));
  const json manifest = {{"format", kManifestFormat},
                         {"format_version", serialize::kFormatVersion},
                         {"library_version", kVersion},
                         {"config_hash", serialize::sha256_hex(ini)},
                         {"seeds", seed_list},
                         {"files", files}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

LoadedArtifacts load_artifacts(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw CorruptFileError(std::string("unreadable manifest: ") + e.what());
  }
  LoadedArtifacts out;
  try {
    if (manifest.at("format").get<std::string>() != kManifestFormat)
      throw CorruptFileError("not a sparsepert artifact manifest");
    const auto version = manifest.at("format_version").get<std::uint32_t>();
    if (version != serialize::kFormatVersion)
      throw VersionMismatchError(fmt::format("artifact format version {} but this build reads {}",
                                             version, serialize::kFormatVersion));
    const std::string ini = read_text(dir / "config.ini");
    out.config_hash = manifest.at("config_hash").get<std::string>();
    if (serialize::sha256_hex(ini) != out.config_hash)
      throw CorruptFileError("config.ini does not match the manifest hash");
    out.config = ExperimentConfig::from_ini_string(ini);
    for (const auto& [file, digest] : manifest.at("files").items())
      if (serialize::sha256_hex(read_text(dir / file)) != digest.get<std::string>())
        throw CorruptFileError("checksum mismatch for " + file);
    for (const auto& entry : manifest.at("seeds")) {
      const auto sub = dir / entry.at("dir").get<std::string>();
      SeedArtifacts s;
      s.seed = entry.at("seed").get<std::uint64_t>();
      s.mixing = serialize::load_mixing(sub / "mixing.bin");
      s.perturbations = serialize::load_perturbations(sub / "perturbations.bin");
      s.train = serialize::load_dataset(sub / "train.bin");
      s.test = serialize::load_dataset(sub / "test.bin");
      s.model = serialize::load_model(sub / "model.bin");
      const json report = json::parse(read_text(sub / "report.json"));
      s.report.loss_trace = report.at("loss_trace").get<std::vector<double>>();
      s.report.final_loss = report.at("final_loss").get<double>();
      s.report.wall_time_s = report.at("wall_time_s").get<double>();
      s.report.guess_span_rank = report.at("guess_span_rank").get<int>();
      s.row = row_from_json(report.at("row"));
      out.seeds.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw CorruptFileError(std::string("malformed manifest or report: ") + e.what());
  }
  return out;
}

}  // namespace sparsepert
