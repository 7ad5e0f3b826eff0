#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "sparsepert/dgp.hpp"
#include "sparsepert/encoder.hpp"
#include "sparsepert/eval.hpp"
#include "sparsepert/experiment.hpp"
#include "sparsepert/oracle.hpp"
#include "sparsepert/perturb.hpp"
#include "sparsepert/serialize.hpp"
#include "sparsepert/version.hpp"

namespace py = pybind11;
using namespace sparsepert;

namespace {

py::dict row_dict(const ResultRow& r) {
  py::dict d;
  d["d"] = r.d;
  d["dist"] = r.dist;
  d["regime"] = r.regime;
  d["p"] = r.p;
  d["per_example_mode"] = r.per_example_mode;
  d["seed"] = r.seed;
  d["mcc"] = r.mcc;
  d["bmcc"] = r.bmcc;
  d["min_affine_r2"] = r.min_affine_r2;
  d["structure"] = r.structure;
  d["final_loss"] = r.final_loss;
  d["guess_span_rank"] = r.guess_span_rank;
  d["wall_time_s"] = r.wall_time_s;
  d["status"] = r.status;
  return d;
}

}  // namespace

PYBIND11_MODULE(_sparsepert, m) {
  m.doc() = "Latent identification from sparse perturbations";
  m.attr("__version__") = kVersion;

  py::register_exception<Error>(m, "Error");
  py::register_exception<ConfigError>(m, "ConfigError");
  py::register_exception<SingularMatrixError>(m, "SingularMatrixError");
  py::register_exception<CorruptFileError>(m, "CorruptFileError");
  py::register_exception<VersionMismatchError>(m, "VersionMismatchError");

  py::class_<LatentDistribution>(m, "LatentDistribution")
      .def_static("uniform", &LatentDistribution::uniform, py::arg("d"), py::arg("low") = 0.0,
                  py::arg("high") = 1.0)
      .def_static("normal_blockwise", &LatentDistribution::normal_blockwise, py::arg("d"),
                  py::arg("rho") = 0.5)
      .def_property_readonly("dim", [](const LatentDistribution& d) { return d.dim; })
      .def_property_readonly("kind", [](const LatentDistribution& d) { return to_string(d.kind); });

  py::class_<MixingFunction>(m, "MixingFunction")
      .def_property_readonly("dim", [](const MixingFunction& g) { return g.dim; })
      .def("jacobian", &MixingFunction::jacobian)
      .def("__call__", [](const MixingFunction& g, const Matrix& z) { return apply_mixing(g, z); });

  m.def("build_mixing_mlp", [](int d, std::uint64_t seed) { return build_mixing_mlp(d, seed); },
        py::arg("d"), py::arg("seed"));
  m.def("sample_latents", &sample_latents, py::arg("dist"), py::arg("n"), py::arg("seed"));

  py::class_<PerturbationSet>(m, "PerturbationSet")
      .def_readonly("dim", &PerturbationSet::dim)
      .def_readonly("vectors", &PerturbationSet::vectors)
      .def_readonly("group_of", &PerturbationSet::group_of)
      .def_readonly("block_of_group", &PerturbationSet::block_of_group)
      .def_readonly("non_overlapping", &PerturbationSet::non_overlapping)
      .def("__len__", &PerturbationSet::size);

  m.def("make_one_sparse_set", py::overload_cast<int, std::uint64_t>(&perturb::make_one_sparse_set),
        py::arg("d"), py::arg("seed"));
  m.def("make_blockwise_set", &perturb::make_blockwise_set, py::arg("d"), py::arg("p"),
        py::arg("per_group"), py::arg("seed"));
  m.def("make_overlapping_contiguous_set", &perturb::make_overlapping_contiguous_set, py::arg("d"),
        py::arg("p"), py::arg("per_group"), py::arg("seed"));
  m.def("span_dimension", &perturb::span_dimension);
  m.def("count_mask_candidates", &perturb::count_mask_candidates);

  py::class_<GuessMask>(m, "GuessMask")
      .def_readonly("masks", &GuessMask::masks)
      .def_readonly("group_of", &GuessMask::group_of);
  m.def("exact_masks", [](const PerturbationSet& s) { return perturb::derive_guess_masks(s, perturb::ExactBlocks{}); });

  py::class_<Observations>(m, "Observations")
      .def_readonly("base", &Observations::base)
      .def_readonly("perturbed", &Observations::perturbed)
      .def_readonly("base_index", &Observations::base_index)
      .def_readonly("pert_index", &Observations::pert_index)
      .def_property_readonly("num_pairs", &Observations::num_pairs);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("observations", &Dataset::observations)
      .def_property_readonly("z", [](const Dataset& d) { return d.truth.z; })
      .def_property_readonly("z_perturbed", [](const Dataset& d) { return d.truth.z_perturbed; });

  m.def(
      "generate_dataset",
      [](const LatentDistribution& dist, const MixingFunction& g, const PerturbationSet& pset, int n,
         const std::string& mode, std::uint64_t seed) {
        return generate_dataset(dist, g, pset, n, pair_mode_from_string(mode), seed);
      },
      py::arg("dist"), py::arg("g"), py::arg("perturbations"), py::arg("n"), py::arg("mode") = "all-m",
      py::arg("seed") = 0);

  py::class_<EncoderModel>(m, "EncoderModel")
      .def_property_readonly("parameter_count", &EncoderModel::parameter_count)
      .def_property(
          "parameters", [](const EncoderModel& e) { return e.parameters(); },
          [](EncoderModel& e, const Vector& v) {
            if (v.size() != e.parameter_count()) throw DimensionError("parameter vector has the wrong length");
            e.parameters() = v;
          })
      .def("guessed_deltas", &EncoderModel::guessed_deltas)
      .def("__call__", [](const EncoderModel& e, const Matrix& x) { return forward(e, x); });

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("learning_rate", &TrainConfig::learning_rate)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("seed", &TrainConfig::seed);

  py::class_<TrainReport>(m, "TrainReport")
      .def_readonly("loss_trace", &TrainReport::loss_trace)
      .def_readonly("final_loss", &TrainReport::final_loss)
      .def_readonly("wall_time_s", &TrainReport::wall_time_s)
      .def_readonly("guess_span_rank", &TrainReport::guess_span_rank);

  m.def("init_model", &init_model, py::arg("n"), py::arg("d"), py::arg("mask"), py::arg("seed"));
  m.def("forward", &forward);
  m.def("loss_batch", &loss_batch);
  m.def("gradients", [](const EncoderModel& e, const Observations& o) {
    auto lg = gradients(e, o);
    return py::make_tuple(lg.loss, lg.gradient);
  });
  m.def("train", &train, py::arg("model"), py::arg("data"), py::arg("config"),
        py::call_guard<py::gil_scoped_release>());

  m.def("mcc", [](const Matrix& zh, const Matrix& z) {
    auto r = eval::mcc(zh, z);
    return py::make_tuple(r.score, r.permutation);
  });
  m.def("bmcc", [](const Matrix& zh, const Matrix& z, const std::vector<IndexSet>& tb,
                   const std::vector<IndexSet>& hb) {
    auto r = eval::bmcc(zh, z, tb, hb);
    return py::make_tuple(r.score, r.block_matching);
  });
  m.def("fit_affine_map", [](const Matrix& zh, const Matrix& z) {
    auto r = eval::fit_affine_map(zh, z);
    return py::make_tuple(r.a, r.c, r.r2);
  });
  m.def(
      "classify_structure",
      [](const Matrix& a, int p, double tol) { return eval::classify_structure(a, p, tol).str(); },
      py::arg("a"), py::arg("p") = 1, py::arg("rel_tol") = eval::kDefaultStructureTol);

  m.def("linear_recovery_map", &oracle::linear_recovery_map);
  m.def("block_refinement", &oracle::block_refinement);
  m.def(
      "verify_theorem_structure",
      [](const std::string& theorem, int d, int p, int trials, std::uint64_t seed) {
        auto r = oracle::verify_theorem_structure(oracle::theorem_from_string(theorem), d, p, trials, seed);
        return py::make_tuple(r.passed, r.trials, r.max_residual);
      },
      py::arg("theorem"), py::arg("d"), py::arg("p") = 1, py::arg("trials") = 50, py::arg("seed") = 0);
  m.def("stationary_point_check", [](int n_balls, double c) {
    auto r = oracle::stationary_point_check(n_balls, c);
    py::dict d;
    d["a"] = r.a;
    d["residuals"] = r.residuals;
    d["residual_sum"] = r.residual_sum;
    d["off_diagonal_ratio"] = r.off_diagonal_ratio;
    d["structure"] = r.structure.str();
    d["limit_structure"] = r.limit_structure.str();
    return d;
  });

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def(py::init<>())
      .def_static("from_ini", &ExperimentConfig::from_ini_string)
      .def("to_ini", &ExperimentConfig::to_ini)
      .def("hash", &ExperimentConfig::hash)
      .def("validate", &ExperimentConfig::validate)
      .def_readwrite("d", &ExperimentConfig::d)
      .def_readwrite("seeds", &ExperimentConfig::seeds)
      .def_readwrite("n_train", &ExperimentConfig::n_train)
      .def_readwrite("n_test", &ExperimentConfig::n_test)
      .def_readwrite("p", &ExperimentConfig::p)
      .def_readwrite("train", &ExperimentConfig::train);

  m.def(
      "run_experiment",
      [](const ExperimentConfig& c, int threads) {
        std::vector<ResultRow> rows;
        {
          py::gil_scoped_release release;
          rows = run_experiment(c, threads);
        }
        py::list out;
        for (const auto& r : rows) out.append(row_dict(r));
        return out;
      },
      py::arg("config"), py::arg("threads") = 1);
  m.def("csv_columns", &csv_columns);
}
