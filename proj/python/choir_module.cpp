#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <random>
#include <string>
#include <vector>

#include "choir/corpus.hpp"
#include "choir/error.hpp"
#include "choir/metrics.hpp"
#include "choir/parallel.hpp"
#include "choir/pointcloud.hpp"
#include "choir/residual.hpp"
#include "choir/selfcheck.hpp"
#include "choir/so3.hpp"
#include "choir/training.hpp"

namespace py = pybind11;
using namespace choir;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

PointCloud cloud_from_array(const Array& a) {
  if (a.ndim() != 2 || a.shape(1) != 3) {
    throw py::value_error("expected an (N, 3) array");
  }
  PointCloud pc;
  pc.points.resize(static_cast<std::size_t>(a.shape(0)));
  auto r = a.unchecked<2>();
  for (py::ssize_t i = 0; i < a.shape(0); ++i) pc.points[i] = {r(i, 0), r(i, 1), r(i, 2)};
  return pc;
}

Array array_from_cloud(const PointCloud& pc) {
  Array out({static_cast<py::ssize_t>(pc.size()), py::ssize_t{3}});
  auto w = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < pc.size(); ++i) {
    for (int j = 0; j < 3; ++j) w(i, j) = pc.points[i][j];
  }
  return out;
}

Mat3 mat_from_array(const Array& a) {
  if (a.ndim() != 2 || a.shape(0) != 3 || a.shape(1) != 3) throw py::value_error("expected a (3, 3) array");
  Mat3 m;
  auto r = a.unchecked<2>();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) m(i, j) = r(i, j);
  }
  return m;
}

Array array_from_rotation(const Rotation& r) {
  Array out({3, 3});
  auto w = out.mutable_unchecked<2>();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) w(i, j) = r(i, j);
  }
  return out;
}

py::dict report_to_dict(const EvalReport& report) {
  py::list classes;
  for (const auto& c : report.classes) {
    py::dict d;
    d["class_id"] = c.class_id;
    d["mean_stability_deg"] = c.mean_stability_deg;
    d["consistency_deg"] = c.consistency_deg;
    d["degenerate_mean"] = c.degenerate_mean;
    py::dict per_instance;
    for (const auto& i : c.instances) per_instance[py::str(i.instance_id)] = i.stability_deg;
    d["instances"] = per_instance;
    classes.append(d);
  }
  py::dict out;
  out["classes"] = classes;
  out["warnings"] = report.warnings;
  out["metadata"] = report.metadata;
  out["mean_stability_deg"] = report.mean_stability();
  out["mean_consistency_deg"] = report.mean_consistency();
  return out;
}

Dataset dataset_from_clouds(const std::vector<std::tuple<std::string, std::string, Array>>& clouds) {
  Dataset data;
  for (const auto& [class_id, instance_id, points] : clouds) {
    PointCloud pc = cloud_from_array(points);
    pc.class_id = class_id;
    pc.instance_id = instance_id;
    data.clouds.push_back(std::move(pc));
  }
  return data;
}

}  // namespace

PYBIND11_MODULE(_choir, m) {
  m.doc() = "Rotation-equivariant canonical orientation of point clouds";

  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<NumericalError>(m, "NumericalError", PyExc_ArithmeticError);

  m.def("load_cloud", [](const std::filesystem::path& path) { return array_from_cloud(load_cloud(path)); },
        py::arg("path"), "Read a .xyz/.txt or .cpts/.bin file into an (N, 3) array.");
  m.def(
      "save_cloud",
      [](const std::filesystem::path& path, const Array& points) {
        save_cloud(path, cloud_from_array(points), format_from_path(path));
      },
      py::arg("path"), py::arg("points"));

  m.def(
      "sample_rotation",
      [](std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        return array_from_rotation(so3::sample_uniform(rng));
      },
      py::arg("seed"), "Haar-uniform rotation matrix.");
  m.def(
      "project_to_so3", [](const Array& a) { return array_from_rotation(so3::project_to_so3(mat_from_array(a)).rotation); },
      py::arg("matrix"));
  m.def(
      "chordal_mean",
      [](const std::vector<Array>& rotations) {
        std::vector<Rotation> rs;
        for (const auto& a : rotations) rs.push_back(Rotation::from_matrix(mat_from_array(a), 1e-6));
        const auto mean = so3::chordal_mean(rs);
        return py::make_tuple(array_from_rotation(mean.rotation), mean.degenerate);
      },
      py::arg("rotations"), "Returns (mean, degenerate).");
  m.def(
      "angle_between",
      [](const Array& a, const Array& b) {
        return so3::angle_between(Rotation::unchecked(mat_from_array(a)), Rotation::unchecked(mat_from_array(b)));
      },
      py::arg("a"), py::arg("b"), "Geodesic angle in radians.");

  m.def(
      "generate_corpus",
      [](std::size_t classes, std::size_t instances, std::size_t points, std::uint64_t seed) {
        const Dataset data = generate_synthetic_corpus(default_corpus_spec(classes, instances, points, seed));
        py::list out;
        for (const auto& pc : data.clouds) out.append(py::make_tuple(pc.class_id, pc.instance_id, array_from_cloud(pc)));
        return out;
      },
      py::arg("classes") = 3, py::arg("instances") = 64, py::arg("points") = 1024, py::arg("seed") = 0,
      "List of (class_id, instance_id, points) tuples.");

  py::class_<CharacteristicOrientationPredictor>(m, "Predictor")
      .def_static(
          "untrained",
          [](std::uint64_t seed, const std::string& knn_mode, const std::string& precision, bool use_residual) {
            PredictorConfig config;
            config.knn_mode = parse_knn_mode(knn_mode);
            config.precision = precision == "single" ? Dtype::f32 : Dtype::f64;
            config.use_residual = use_residual;
            std::mt19937_64 rng(derive_seed(seed, 0));
            return CharacteristicOrientationPredictor(config, rng);
          },
          py::arg("seed") = 0, py::arg("knn_mode") = "adaptive", py::arg("precision") = "double",
          py::arg("use_residual") = true)
      .def_static("load", &CharacteristicOrientationPredictor::load, py::arg("path"))
      .def("save", &CharacteristicOrientationPredictor::save, py::arg("path"))
      .def(
          "predict",
          [](const CharacteristicOrientationPredictor& self, const Array& points) {
            const PointCloud pc = cloud_from_array(points);
            Rotation r;
            {
              py::gil_scoped_release release;
              r = self.predict(pc);
            }
            return array_from_rotation(r);
          },
          py::arg("points"), "Orientation f(points) as a 3x3 matrix.")
      .def(
          "canonicalize",
          [](const CharacteristicOrientationPredictor& self, const Array& points) {
            const PointCloud pc = cloud_from_array(points);
            PointCloud out;
            {
              py::gil_scoped_release release;
              out = self.canonicalize(pc);
            }
            return array_from_cloud(out);
          },
          py::arg("points"), "points @ f(points).T")
      .def_property_readonly("knn_mode",
                             [](const CharacteristicOrientationPredictor& self) {
                               return knn_mode_name(self.config().knn_mode);
                             })
      .def_property_readonly("use_residual",
                             [](const CharacteristicOrientationPredictor& self) { return self.config().use_residual; })
      .def_property_readonly("parameter_count", [](const CharacteristicOrientationPredictor& self) {
        std::size_t n = 0;
        for (const auto& p : self.parameters()) n += p.value.numel();
        return n;
      });

  m.def(
      "evaluate",
      [](const CharacteristicOrientationPredictor& model,
         const std::vector<std::tuple<std::string, std::string, Array>>& clouds, std::size_t rotations,
         std::uint64_t seed, const std::string& knn_mode, const std::string& perturb, std::size_t points,
         std::size_t threads) {
        const Dataset data = dataset_from_clouds(clouds);
        EvalConfig cfg;
        cfg.rotations = rotations;
        cfg.seed = seed;
        if (!knn_mode.empty()) cfg.knn_mode = parse_knn_mode(knn_mode);
        cfg.perturbation = parse_perturbation(perturb);
        cfg.points = points;
        cfg.threads = threads ? threads : thread_budget();
        EvalReport report;
        {
          py::gil_scoped_release release;
          report = evaluate(data, model, cfg);
        }
        return report_to_dict(report);
      },
      py::arg("model"), py::arg("clouds"), py::arg("rotations") = 10, py::arg("seed") = 0, py::arg("knn_mode") = "",
      py::arg("perturb") = "none", py::arg("points") = 0, py::arg("threads") = 0,
      "Stability and consistency per class for (class_id, instance_id, points) tuples.");

  m.def(
      "train",
      [](const std::vector<std::tuple<std::string, std::string, Array>>& clouds, const py::dict& options) {
        TrainConfig cfg;
        for (const auto& [key, value] : options) {
          set_config_value(cfg, py::str(key), py::str(value));
        }
        const Dataset data = dataset_from_clouds(clouds);
        TrainResult result;
        {
          py::gil_scoped_release release;
          result = train(data, cfg);
        }
        py::list history;
        for (const auto& row : result.history) {
          py::dict d;
          d["epoch"] = row.epoch;
          d["loss"] = row.loss;
          d["val_stability_deg"] = row.val_stability_deg;
          d["val_consistency_deg"] = row.val_consistency_deg;
          d["selected"] = row.selected;
          history.append(d);
        }
        return py::make_tuple(result.model, history);
      },
      py::arg("clouds"), py::arg("options") = py::dict(),
      "Train on (class_id, instance_id, points) tuples. Options use the config file keys.");

  m.def(
      "selfcheck",
      [](std::size_t trials, std::size_t points, std::size_t gradcheck_draws, std::uint64_t seed) {
        selfcheck::Options opts;
        opts.trials = trials;
        opts.points = points;
        opts.gradcheck_points = gradcheck_draws;
        opts.seed = seed;
        std::vector<selfcheck::Check> checks;
        {
          py::gil_scoped_release release;
          checks = selfcheck::run_all(opts);
        }
        py::list out;
        for (const auto& c : checks) {
          py::dict d;
          d["name"] = c.name;
          d["value"] = c.value;
          d["threshold"] = c.threshold;
          d["passed"] = c.passed;
          out.append(d);
        }
        return out;
      },
      py::arg("trials") = 100, py::arg("points") = 256, py::arg("gradcheck_draws") = 20, py::arg("seed") = 0);

  m.attr("__version__") = CHOIR_VERSION;
}
