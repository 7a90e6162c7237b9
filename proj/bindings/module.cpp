// Python bindings for the core operations: tensors/autodiff, models and
// training, decoy data, explainers, revision losses, and metrics.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "xiltk/explainers.hpp"
#include "xiltk/metrics.hpp"
#include "xiltk/xil.hpp"

namespace py = pybind11;
using namespace xiltk;

namespace {

Tensor tensor_from_numpy(py::array_t<double, py::array::c_style | py::array::forcecast> arr) {
  Shape shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[i] = arr.shape(i);
  std::vector<double> data(arr.data(), arr.data() + arr.size());
  return Tensor::from_data(shape, std::move(data));
}

py::array_t<double> tensor_to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

Batch make_batch(py::array_t<double, py::array::c_style | py::array::forcecast> images,
                 std::vector<int64_t> labels) {
  Batch b;
  b.images = tensor_from_numpy(images);
  b.labels = std::move(labels);
  return b;
}

// Opaque holder: GradMap keys raw node pointers, which have no Python
// representation, so it is exposed only through grad_of.
struct GradMapHolder {
  GradMap grads;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "explanation-guided model revision toolkit (C++ core)";

  py::register_exception<TensorError>(m, "TensorError");

  py::class_<Tensor>(m, "Tensor")
      .def(py::init(&tensor_from_numpy))
      .def_property_readonly("shape", [](const Tensor& t) { return t.shape(); })
      .def_property_readonly("requires_grad",
                             [](const Tensor& t) { return t.requires_grad(); })
      .def("set_requires_grad",
           [](Tensor& t, bool v) { t.set_requires_grad(v); })
      .def("numpy", &tensor_to_numpy)
      .def_static("zeros", [](Shape s) { return Tensor::zeros(std::move(s)); })
      .def_static("full",
                  [](Shape s, double v) { return Tensor::full(std::move(s), v); });

  // --- autodiff primitives ---
  m.def("add", &add);
  m.def("sub", &sub);
  m.def("mul", &mul);
  m.def("matmul", &matmul);
  m.def("relu", [](const Tensor& t) { return relu(t); });
  m.def("square", [](const Tensor& t) { return square(t); });
  m.def("sum", [](const Tensor& t) { return sum(t); });
  m.def("mean", [](const Tensor& t) { return mean(t); });
  m.def("softmax", &softmax);
  m.def("conv2d", &conv2d);
  py::class_<GradMapHolder>(m, "GradMap");
  m.def("backward",
        [](const Tensor& loss, bool create_graph) {
          return GradMapHolder{backward(loss, create_graph)};
        },
        py::arg("loss"), py::arg("create_graph") = false);
  m.def("grad_of", [](const GradMapHolder& g, const Tensor& t) {
    return grad_of(g.grads, t);
  });

  // --- models and training ---
  py::enum_<Arch>(m, "Arch").value("SCNN", Arch::SCNN).value("MLP", Arch::MLP);
  py::enum_<MaskSemantics>(m, "MaskSemantics")
      .value("penalty", MaskSemantics::penalty)
      .value("reward", MaskSemantics::reward);

  py::class_<Batch>(m, "Batch")
      .def(py::init(&make_batch), py::arg("images"), py::arg("labels"))
      .def_property_readonly("n", &Batch::n)
      .def("set_masks",
           [](Batch& b,
              py::array_t<double, py::array::c_style | py::array::forcecast> masks,
              MaskSemantics sem) {
             b.masks = tensor_from_numpy(masks);
             b.semantics = sem;
           },
           py::arg("masks"), py::arg("semantics") = MaskSemantics::penalty);

  py::class_<Model>(m, "Model")
      .def("forward", [](const Model& mm, const Tensor& x) { return mm.forward(x); })
      .def("param_count", &Model::param_count)
      .def("param",
           [](const Model& mm, const std::string& name) {
             return tensor_to_numpy(mm.params.at(name));
           })
      .def("param_names", [](const Model& mm) {
        std::vector<std::string> names;
        for (auto& [k, v] : mm.params) names.push_back(k);
        return names;
      });
  m.def("init_model", &init_model, py::arg("arch"), py::arg("seed"));
  m.def("cross_entropy", &cross_entropy);
  m.def("save_checkpoint", &save_checkpoint);
  m.def("load_checkpoint", &load_checkpoint);
  m.def("accuracy", &accuracy);

  // --- revision methods and training loop ---
  py::enum_<Method>(m, "Method")
      .value("VANILLA", Method::VANILLA)
      .value("RRR", Method::RRR)
      .value("RRRG", Method::RRRG)
      .value("RBR", Method::RBR)
      .value("CDEP", Method::CDEP)
      .value("HINT", Method::HINT)
      .value("CE", Method::CE);

  py::class_<XilConfig>(m, "XilConfig")
      .def(py::init<>())
      .def_readwrite("method", &XilConfig::method)
      .def_readwrite("lambda_", &XilConfig::lambda);
  m.def("default_lambda", &default_lambda);
  m.def("rrr_loss", &rrr_loss);
  m.def("rrrg_loss", &rrrg_loss);
  m.def("rbr_loss", &rbr_loss);
  m.def("cdep_loss", &cdep_loss);
  m.def("hint_loss", &hint_loss);

  py::class_<FitConfig>(m, "FitConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &FitConfig::epochs)
      .def_readwrite("batch_size", &FitConfig::batch_size)
      .def_readwrite("seed", &FitConfig::seed)
      .def_readwrite("xil", &FitConfig::xil);
  m.def("fit", [](const Model& mm, const Batch& train, const FitConfig& cfg) {
    return fit(mm.clone(), train, cfg);
  });

  // --- explainers and metrics ---
  py::enum_<ExplainerTag>(m, "ExplainerTag")
      .value("IG", ExplainerTag::IG)
      .value("GRADCAM", ExplainerTag::GRADCAM)
      .value("LIME", ExplainerTag::LIME)
      .value("CD", ExplainerTag::CD);
  m.def("explain",
        [](const Model& mm, ExplainerTag tag, const Tensor& x, uint64_t seed) {
          return tensor_to_numpy(explain(mm, tag, x, seed).map);
        },
        py::arg("model"), py::arg("tag"), py::arg("x"), py::arg("seed") = 0);
  m.def("wr_score", &wr_score);
  m.def("normalize_plus",
        [](const Tensor& t) { return tensor_to_numpy(normalize_plus(t)); });
}
