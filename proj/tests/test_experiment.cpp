#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "sparsepert/experiment.hpp"
#include "sparsepert/serialize.hpp"

using namespace sparsepert;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.d = 4;
  c.dist = LatentKind::kUniformIndependent;
  c.n_train = 200;
  c.n_test = 100;
  c.seeds = {0, 1, 2};
  c.train.epochs = 3;
  c.train.batch_size = 50;
  return c;
}

}  // namespace

TEST_CASE("config defaults and ini parsing") {
  const ExperimentConfig def;
  CHECK(def.d == 6);
  CHECK(def.seeds.size() == 5);
  CHECK(def.train.learning_rate == 0.005);
  CHECK_NOTHROW(def.validate());

  const auto c = ExperimentConfig::from_ini_file(SPARSEPERT_TEST_DATA_DIR "/tiny.ini");
  CHECK(c.name == "tiny");
  CHECK(c.seeds == std::vector<std::uint64_t>{3});
  CHECK(c.d == 4);
  CHECK(c.dist == LatentKind::kUniformIndependent);
  CHECK(c.train.epochs == 3);
  CHECK(c.train.batch_size == 100);
  CHECK(c.regime == RegimeKind::kOneSparse);

  const auto parsed = ExperimentConfig::from_ini_string(
      "[experiment]\nseeds = 4, 5,9\n[dgp]\nd = 8\nmode = single-random\n"
      "[perturb]\nregime = overlapping-contiguous\np = 2\nper_group = 3\n[train]\nfull_fidelity = true\n");
  CHECK(parsed.seeds == std::vector<std::uint64_t>{4, 5, 9});
  CHECK(parsed.mode == PairMode::kSingleRandom);
  CHECK(parsed.group_size() == 3);
  CHECK(parsed.effective_train().epochs == kFullFidelityEpochs);
  CHECK(parsed.effective_train().batch_size == kFullFidelityBatch);
}

TEST_CASE("config errors") {
  CHECK_THROWS_AS(ExperimentConfig::from_ini_string("[dgp]\nd = six\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_ini_string("[dgp]\ndim = 6\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_ini_string("[model]\nd = 6\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_ini_string("[perturb]\nregime = zigzag\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_ini_string("[experiment]\nseeds = 1,x\n"), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_ini_string("[dgp\nd=3\n"), ConfigError);

  auto bad = [](auto edit) {
    ExperimentConfig c;
    edit(c);
    CHECK_THROWS_AS(c.validate(), ConfigError);
  };
  bad([](ExperimentConfig& c) { c.p = 2; });  // one-sparse with p = 2
  bad([](ExperimentConfig& c) { c.regime = RegimeKind::kBlockwise; c.p = 4; });
  bad([](ExperimentConfig& c) { c.regime = RegimeKind::kBlockwise; c.p = 2; c.per_group = 1; });
  bad([](ExperimentConfig& c) { c.regime = RegimeKind::kOverlappingContiguous; c.p = 6; });
  bad([](ExperimentConfig& c) { c.regime = RegimeKind::kRandomBlocks; c.p = 2; c.s = 16; });
  bad([](ExperimentConfig& c) { c.d = 5; });  // normal-blockwise needs even d
  bad([](ExperimentConfig& c) { c.seeds.clear(); });
  bad([](ExperimentConfig& c) { c.train.learning_rate = -1; });
  bad([](ExperimentConfig& c) { c.n_test = 3; });
  bad([](ExperimentConfig& c) { c.regime = RegimeKind::kOverlappingContiguous; c.p = 2; c.guess = GuessKind::kCandidate; });
  bad([](ExperimentConfig& c) { c.guess = GuessKind::kCandidate; c.candidate = 720; });
}

TEST_CASE("canonical ini round trip and hash") {
  ExperimentConfig c = tiny();
  c.regime = RegimeKind::kRandomBlocks;
  c.p = 2;
  c.s = 3;
  const auto back = ExperimentConfig::from_ini_string(c.to_ini());
  CHECK(back.to_ini() == c.to_ini());
  CHECK(back.hash() == c.hash());
  CHECK(c.hash().size() == 64);
  ExperimentConfig other = c;
  other.train.epochs += 1;
  CHECK(other.hash() != c.hash());
}

TEST_CASE("csv format") {
  ResultRow r;
  r.d = 6;
  r.dist = "uniform-independent";
  r.regime = "one-sparse";
  r.per_example_mode = "all-m";
  r.seed = 2;
  r.mcc = 0.1;
  r.bmcc = NAN;
  r.structure = "permutation-scaling";
  r.wall_time_s = 1.23456;
  CHECK(csv_columns().size() == 14);
  CHECK(csv_header().rfind("d,dist,regime,p,per_example_mode,seed,mcc,bmcc", 0) == 0);
  const std::string line = csv_line(r);
  CHECK(line.find(",0.10000000000000001,nan,") != std::string::npos);
  CHECK(line.find(",1.235,ok") != std::string::npos);
  CHECK(csv_line_deterministic(r).find("1.235") == std::string::npos);
  CHECK(to_csv({r, r}) == csv_header() + "\n" + line + "\n" + line + "\n");
}

TEST_CASE("runs are deterministic across reruns and thread counts") {
  const ExperimentConfig c = tiny();
  const auto a = run_experiment(c, 1);
  const auto b = run_experiment(c, 3);
  REQUIRE(a.size() == 3);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].status == "ok");
    CHECK(a[i].seed == c.seeds[i]);
    CHECK(csv_line_deterministic(a[i]) == csv_line_deterministic(b[i]));
  }
  CHECK(csv_line_deterministic(a[0]) != csv_line_deterministic(a[1]));
}

TEST_CASE("a failing seed is recorded and the run continues") {
  ExperimentConfig c = tiny();
  c.train.learning_rate = 1e300;
  c.train.epochs = 5;
  const auto rows = run_experiment(c, 1);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) CHECK(r.status.rfind("error", 0) == 0);
}

TEST_CASE("artifacts round trip and detect tampering") {
  const ExperimentConfig c = tiny();
  std::vector<SeedArtifacts> arts;
  const auto rows = run_experiment(c, 1, &arts);
  const fs::path dir = fs::temp_directory_path() / "sparsepert_artifacts_test";
  fs::remove_all(dir);
  save_artifacts(dir, c, arts);
  const auto loaded = load_artifacts(dir);
  CHECK(loaded.config_hash == c.hash());
  REQUIRE(loaded.seeds.size() == arts.size());
  for (std::size_t i = 0; i < arts.size(); ++i) {
    CHECK(loaded.seeds[i].model.parameters() == arts[i].model.parameters());
    CHECK(csv_line(loaded.seeds[i].row) == csv_line(rows[i]));
  }
  {
    std::ofstream out(dir / "config.ini", std::ios::app);
    out << "\n";
  }
  CHECK_THROWS_AS(load_artifacts(dir), CorruptFileError);
}

TEST_CASE("table cells") {
  const auto c = table_cell_config(TableId::kT1, 10, LatentKind::kNormalBlockwise, 3);
  CHECK(c.regime == RegimeKind::kBlockwise);
  CHECK(c.p == 2);
  CHECK(c.mode == PairMode::kSingleRandom);
  const auto o = table_cell_config(TableId::kT2, 6, LatentKind::kUniformIndependent, 0);
  CHECK(o.regime == RegimeKind::kOverlappingContiguous);
  CHECK_NOTHROW(o.validate());
  CHECK_THROWS_AS(table_cell_config(TableId::kT1, 6, LatentKind::kNormalBlockwise, 4), ConfigError);
  CHECK(table_id_from_string("t2") == TableId::kT2);
}

TEST_CASE("oracle suite at small size") {
  const auto r = run_oracle_suite(4, 5, 0);
  CHECK(r.ok);
  CHECK(r.stationary.size() == 19);
  CHECK(r.refinement_failures.empty());
}
