#include <sstream>
#include <string>
#include <vector>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "toan/checkpoint.hpp"
#include "toan/cli.hpp"
#include "toan/episodes.hpp"
#include "toan/error.hpp"
#include "toan/model.hpp"
#include "toan/trainer.hpp"
#include "toan/verify.hpp"

namespace py = pybind11;
using namespace toan;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

ad::Tensor<float> tensor_from(const FloatArray& a) {
  ad::Shape shape(a.shape(), a.shape() + a.ndim());
  return ad::Tensor<float>(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray array_from(const ad::Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  FloatArray out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

// Dataset as (images [n, 3, s, s] float32 in [0, 1], labels [n] int32, class names).
py::tuple dataset_arrays(const Dataset& ds) {
  const std::size_t n = ds.sample_count(), s = static_cast<std::size_t>(ds.image_size());
  FloatArray images({n, std::size_t(3), s, s});
  py::array_t<int> labels(std::vector<py::ssize_t>{static_cast<py::ssize_t>(n)});
  std::vector<std::string> names;
  float* dst = images.mutable_data();
  int* lab = labels.mutable_data();
  std::size_t i = 0;
  for (const auto& cls : ds.classes()) {
    names.push_back(cls.name);
    for (std::size_t ref : cls.samples) {
      const auto& img = ds.image(ref);
      std::copy(img.begin(), img.end(), dst + i * img.size());
      lab[i++] = cls.class_id;
    }
  }
  return py::make_tuple(images, labels, names);
}

// Parameters plus the model configuration they were built for.
struct Model {
  ModelConfig config;
  ParameterStore<float> store;
};

}  // namespace

PYBIND11_MODULE(_toan, m) {
  m.doc() = "TOAN few-shot fine-grained classifier";

  py::register_exception<Error>(m, "ToanError", PyExc_RuntimeError);

  m.def("build_id", [] { return std::string(build_id()); });

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = run_cli(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command-line tool in-process; returns (exit code, stdout, stderr).");

  m.def(
      "generate_synthetic",
      [](const std::string& spec_json) {
        const SyntheticSpec spec = synthetic_spec_from_json(nlohmann::json::parse(spec_json));
        return dataset_arrays(generate_synthetic(spec));
      },
      py::arg("spec_json") = "{}");

  m.def(
      "load_image_folder",
      [](const std::string& root, int size) { return dataset_arrays(load_image_folder(root, size)); },
      py::arg("root"), py::arg("image_size") = 84);

  m.def(
      "verify",
      [](const std::vector<std::string>& suites, bool f64) {
        py::list out;
        for (const auto& r : run_verify(suites, f64)) {
          py::dict d;
          d["suite"] = r.name;
          d["passed"] = r.passed;
          d["cases"] = r.cases;
          d["worst"] = r.worst;
          d["tolerance"] = r.tolerance;
          d["detail"] = r.detail;
          out.append(d);
        }
        return out;
      },
      py::arg("suites") = std::vector<std::string>{"all"}, py::arg("f64") = false);

  py::class_<Model>(m, "Model")
      .def_static(
          "create",
          [](const std::string& config_json, std::uint64_t seed) {
            Model md;
            md.config = model_config_from_json(nlohmann::json::parse(config_json));
            md.config.validate();
            md.store = init_parameters<float>(md.config, seed);
            return md;
          },
          py::arg("config_json") = "{}", py::arg("seed") = 1)
      .def_static(
          "load",
          [](const std::string& path) {
            Checkpoint ck = load_checkpoint(path);
            Model md{model_config_from_json(ck.config.at("model")), std::move(ck.store)};
            check_compatible(md.store, md.config);
            return md;
          },
          py::arg("path"))
      .def("save",
           [](const Model& md, const std::string& path) {
             save_checkpoint(path, md.store, {{"model", to_json(md.config)}});
           })
      .def_property_readonly("config_json", [](const Model& md) { return to_json(md.config).dump(); })
      .def_property_readonly("parameter_count",
                             [](const Model& md) { return md.store.parameter_count(); })
      .def("parameter_names",
           [](const Model& md) {
             std::vector<std::string> names;
             for (const auto& [name, t] : md.store.parameters()) names.push_back(name);
             return names;
           })
      .def("parameter", [](const Model& md, const std::string& name) {
        return array_from(md.store.get(name));
      })
      .def(
          "scores",
          [](Model& md, const FloatArray& images, std::size_t way, std::size_t shot) {
            // eval mode; images are raw [0, 1] values, support class-major then queries
            const ad::Tensor<float> x = tensor_from(images);
            ad::Tensor<float> scores;
            {
              py::gil_scoped_release release;
              LayerContext<float> ctx(md.store, ad::Mode::kEval);
              scores = forward_scores(x, way, shot, ctx, md.config);
            }
            return array_from(scores);
          },
          py::arg("images"), py::arg("way"), py::arg("shot"));
}
