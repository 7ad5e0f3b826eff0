#include <CLI11.hpp>
#include <fmt/format.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "sparsepert/eval.hpp"
#include "sparsepert/experiment.hpp"
#include "sparsepert/oracle.hpp"
#include "sparsepert/serialize.hpp"
#include "sparsepert/version.hpp"

namespace fs = std::filesystem;
using namespace sparsepert;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRunFailure = 1;
constexpr int kExitBadConfig = 2;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> seeds;
  std::string out;
  bool full_fidelity = false;
  int threads = 1;
};

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : ExperimentConfig::from_ini_file(c.config);
  if (c.seed) cfg.seeds = {*c.seed};
  if (c.seeds) {
    if (*c.seeds < 1) throw ConfigError("--seeds must be >= 1");
    cfg.seeds.clear();
    for (int s = 0; s < *c.seeds; ++s) cfg.seeds.push_back(static_cast<std::uint64_t>(s));
  }
  if (c.full_fidelity) cfg.full_fidelity = true;
  cfg.validate();
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

fs::path out_dir(const Common& c, const char* fallback) { return c.out.empty() ? fs::path(fallback) : fs::path(c.out); }

int cmd_gen_data(const Common& c) {
  const ExperimentConfig cfg = load_config(c);
  const fs::path dir = out_dir(c, "data");
  fs::create_directories(dir);
  const SeedArtifacts art = prepare_seed(cfg, cfg.seeds.front());
  serialize::save_mixing(art.mixing, dir / "mixing.bin");
  serialize::save_perturbations(art.perturbations, dir / "perturbations.bin");
  serialize::save_dataset(art.train, dir / "train.bin");
  serialize::save_dataset(art.test, dir / "test.bin");
  write_file(dir / "config.ini", cfg.to_ini());
  fmt::print("wrote {} train / {} test samples ({} / {} pairs) to {}\n", art.train.observations.num_samples(),
             art.test.observations.num_samples(), art.train.observations.num_pairs(),
             art.test.observations.num_pairs(), dir.string());
  return kExitOk;
}

int cmd_train(const Common& c, const std::string& data_dir) {
  const ExperimentConfig cfg = load_config(c);
  const std::uint64_t seed = cfg.seeds.front();
  SeedArtifacts art = prepare_seed(cfg, seed);
  if (!data_dir.empty()) {
    art.mixing = serialize::load_mixing(fs::path(data_dir) / "mixing.bin");
    art.perturbations = serialize::load_perturbations(fs::path(data_dir) / "perturbations.bin");
    art.train = serialize::load_dataset(fs::path(data_dir) / "train.bin");
    art.test = serialize::load_dataset(fs::path(data_dir) / "test.bin");
  }
  const ResultRow row = run_seed(cfg, art);
  const fs::path dir = out_dir(c, "model");
  fs::create_directories(dir);
  serialize::save_model(art.model, dir / "model.bin");
  write_file(dir / "results.csv", to_csv({row}));
  fmt::print("{}\n{}\n", csv_header(), csv_line(row));
  return kExitOk;
}

int cmd_eval(const Common& c, const std::string& data_dir, const std::string& model_path) {
  const ExperimentConfig cfg = load_config(c);
  const Dataset test = serialize::load_dataset(fs::path(data_dir) / "test.bin");
  const PerturbationSet pset = serialize::load_perturbations(fs::path(data_dir) / "perturbations.bin");
  const EncoderModel model = serialize::load_model(model_path);
  const Matrix z_hat = forward(model, test.observations.base);
  std::vector<IndexSet> hat_blocks(pset.num_groups());
  for (int k = 0; k < model.num_guesses(); ++k) hat_blocks[model.mask().group_of[k]] = model.mask().masks[k];
  const bool partition = pset.non_overlapping;
  const auto r = eval::identification_report(z_hat, test.truth.z, cfg.p,
                                             partition ? &pset.block_of_group : nullptr,
                                             partition ? &hat_blocks : nullptr);
  fmt::print("mcc {:.6f}\n", r.mcc.score);
  if (r.bmcc) fmt::print("bmcc {:.6f}\n", r.bmcc->score);
  fmt::print("min_affine_r2 {:.6f}\nstructure {}\n", r.affine.r2.minCoeff(), r.structure.str());
  return kExitOk;
}

int report_rows(const std::vector<ResultRow>& rows) {
  fmt::print("{}\n", csv_header());
  bool ok = true;
  for (const auto& r : rows) {
    fmt::print("{}\n", csv_line(r));
    ok = ok && r.status == "ok";
  }
  return ok ? kExitOk : kExitRunFailure;
}

int cmd_run(const Common& c) {
  const ExperimentConfig cfg = load_config(c);
  std::vector<SeedArtifacts> arts;
  const auto rows = run_experiment(cfg, c.threads, c.out.empty() ? nullptr : &arts);
  if (!c.out.empty()) save_artifacts(c.out, cfg, arts);
  return report_rows(rows);
}

int cmd_reproduce(const Common& c, const std::string& table, std::optional<int> epochs,
                  const std::vector<int>& d_values) {
  TableOptions opt;
  opt.seeds = c.seeds.value_or(5);
  opt.threads = c.threads;
  opt.full_fidelity = c.full_fidelity;
  opt.epochs = epochs;
  if (!d_values.empty()) opt.d_values = d_values;
  const TableId id = table_id_from_string(table);
  const TableResult result = reproduce_table(id, opt);
  fmt::print("{}", result.formatted);
  if (!c.out.empty()) {
    const fs::path dir = c.out;
    write_file(dir / fmt::format("{}.csv", table), to_csv(result.rows));
    write_file(dir / fmt::format("{}.txt", table), result.formatted);
  }
  for (const auto& r : result.rows)
    if (r.status != "ok") return kExitRunFailure;
  return kExitOk;
}

int cmd_oracle(const Common& c, int d_max, int trials) {
  const OracleSuiteReport report = run_oracle_suite(d_max, trials, c.seed.value_or(0));
  fmt::print("{}", report.formatted);
  if (!c.out.empty()) {
    std::string csv = "theorem,d,p,trials,passed,max_residual\n";
    for (const auto& t : report.theorems)
      csv += fmt::format("{},{},{},{},{},{:.17g}\n", oracle::to_string(t.theorem), t.d, t.p, t.trials,
                         t.passed, t.max_residual);
    write_file(fs::path(c.out) / "oracle.csv", csv);
    write_file(fs::path(c.out) / "oracle.txt", report.formatted);
  }
  return report.ok ? kExitOk : kExitRunFailure;
}

int cmd_mask_search(const Common& c) {
  const ExperimentConfig cfg = load_config(c);
  const MaskSearchRun run = run_mask_search(cfg, cfg.seeds.front(), c.threads);
  for (const auto& t : run.search.tried)
    fmt::print("candidate {} final_loss {:.6g} {}\n", t.index, t.final_loss, t.passed ? "pass" : "fail");
  fmt::print("selected candidate {} after {} trained; test bmcc {:.4f}, mcc {:.4f}\n",
             run.search.selected_index, run.search.candidates_tried, run.bmcc, run.mcc);
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    serialize::save_model(run.search.selected_model, fs::path(c.out) / "model.bin");
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent identification from sparse perturbations: data, training, evaluation, oracles"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  Common common;
  std::string data_dir, model_path, table = "t1";
  std::optional<int> epochs;
  std::vector<int> d_values;
  int d_max = 8, trials = 50;

  auto add_common = [&](CLI::App* sub, bool with_config) {
    if (with_config) sub->add_option("--config", common.config, "INI experiment config")->check(CLI::ExistingFile);
    auto* seed = sub->add_option("--seed", common.seed, "Run a single seed");
    sub->add_option("--seeds", common.seeds, "Run seeds 0..N-1")->excludes(seed);
    sub->add_option("--out", common.out, "Output directory");
    sub->add_flag("--full-fidelity", common.full_fidelity, "2000 full-batch epochs");
    sub->add_option("--threads", common.threads, "Worker threads")->check(CLI::PositiveNumber);
  };

  auto* gen = app.add_subcommand("gen-data", "Generate train/test data for one seed");
  add_common(gen, true);
  auto* trn = app.add_subcommand("train", "Train an encoder for one seed");
  add_common(trn, true);
  trn->add_option("--data", data_dir, "Directory written by gen-data");
  auto* ev = app.add_subcommand("eval", "Score a saved encoder on saved test data");
  add_common(ev, true);
  ev->add_option("--data", data_dir, "Directory written by gen-data")->required();
  ev->add_option("--model", model_path, "Saved encoder")->required()->check(CLI::ExistingFile);
  auto* run = app.add_subcommand("run", "Full pipeline over every seed; CSV on stdout");
  add_common(run, true);
  auto* rep = app.add_subcommand("reproduce-table", "Run a published table's grid");
  add_common(rep, false);
  rep->add_option("--table", table, "t1 or t2")->check(CLI::IsMember({"t1", "t2"}));
  rep->add_option("--epochs", epochs, "Override epochs");
  rep->add_option("--d", d_values, "Latent dimensions (default 6 10 20)");
  auto* orc = app.add_subcommand("oracle", "Linear theorem checks and stationary-point sweep");
  add_common(orc, false);
  orc->add_option("--d-max", d_max, "Largest dimension (4..8)")->check(CLI::Range(4, 8));
  orc->add_option("--trials", trials, "Trials per theorem")->check(CLI::PositiveNumber);
  auto* mask = app.add_subcommand("mask-search", "Joint mask search and encoder learning");
  add_common(mask, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitBadConfig;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*trn) return cmd_train(common, data_dir);
    if (*ev) return cmd_eval(common, data_dir, model_path);
    if (*run) return cmd_run(common);
    if (*rep) return cmd_reproduce(common, table, epochs, d_values);
    if (*orc) return cmd_oracle(common, d_max, trials);
    if (*mask) return cmd_mask_search(common);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitBadConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRunFailure;
  }
  return kExitRunFailure;
}
