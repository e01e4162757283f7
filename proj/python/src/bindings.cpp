// Copyright (c) 2026 The msumamba Authors
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "msu/checkpoint.hpp"
#include "msu/metrics.hpp"
#include "msu/network.hpp"
#include "msu/runtime.hpp"
#include "msu/verify.hpp"

namespace py = pybind11;
using namespace msu;

namespace {

// JSON crosses the boundary as text; the Python side wraps it with json.loads.
nlohmann::json parse(const std::string& s) { return nlohmann::json::parse(s); }

Image to_image(py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw InputError("image must be an HxWx3 uint8 array");
  Image img(a.shape(0), a.shape(1));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

py::array_t<std::uint8_t> from_mask(const Mask& m) {
  py::array_t<std::uint8_t> out({m.height, m.width});
  std::copy(m.labels.begin(), m.labels.end(), out.mutable_data());
  return out;
}

LabelBatch to_labels(py::array_t<std::int32_t, py::array::c_style | py::array::forcecast> a) {
  if (a.ndim() != 2 && a.ndim() != 3) throw InputError("labels must be HxW or BxHxW");
  const bool batched = a.ndim() == 3;
  LabelBatch out(batched ? a.shape(0) : 1, a.shape(batched ? 1 : 0), a.shape(batched ? 2 : 1));
  std::copy(a.data(), a.data() + a.size(), out.values.begin());
  return out;
}

struct Model {
  std::shared_ptr<MSUMamba> net;

  py::array_t<double> forward(py::array_t<double, py::array::c_style | py::array::forcecast> x) {
    Shape shape(x.shape(), x.shape() + x.ndim());
    std::vector<double> values(x.data(), x.data() + x.size());
    Tensor y;
    {
      py::gil_scoped_release release;
      NoGradGuard ng;
      y = net->forward(Tensor::from_vector(shape, values, net->config().dtype), Context{});
    }
    auto v = y.to_vector();
    py::array_t<double> out(std::vector<py::ssize_t>(y.shape().begin(), y.shape().end()));
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
  }

  py::array_t<std::uint8_t> predict(py::array_t<std::uint8_t> image, bool pad_to_32) {
    Image img = to_image(image);
    Mask m;
    {
      py::gil_scoped_release release;
      m = predict_mask(*net, img, pad_to_32);
    }
    return from_mask(m);
  }

  std::string evaluate(const std::filesystem::path& data, int threads) {
    py::gil_scoped_release release;
    return msu::evaluate(*net, load_dataset(data, net->config().num_classes), threads).to_json().dump();
  }
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of msumamba";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ContractViolation>(m, "ContractViolation", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<InputError>(m, "InputError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());
  py::register_exception<CheckpointError>(m, "CheckpointError", base.ptr());
  py::register_exception<EvaluationError>(m, "EvaluationError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<TrainingAborted>(m, "TrainingAborted", base.ptr());

  py::class_<Model>(m, "Model")
      .def_static(
          "from_config",
          [](const std::string& cfg) {
            auto c = ModelConfig::from_json(parse(cfg));
            c.validate();
            return Model{std::make_shared<MSUMamba>(c)};
          },
          py::arg("config_json"))
      .def_static(
          "load", [](const std::filesystem::path& p) { return Model{std::move(load_checkpoint(p).model)}; },
          py::arg("path"))
      .def("save", [](const Model& self, const std::filesystem::path& p) { save_checkpoint(*self.net, p); },
           py::arg("path"))
      .def("forward", &Model::forward, py::arg("images"))
      .def("predict", &Model::predict, py::arg("image"), py::arg("pad_to_32") = false)
      .def("evaluate", &Model::evaluate, py::arg("data"), py::arg("threads") = 1)
      .def_property_readonly("config_json", [](const Model& self) { return self.net->config().to_json().dump(); })
      .def_property_readonly("num_parameters", [](const Model& self) { return count_parameters(*self.net); })
      .def_property_readonly("parameter_names", [](const Model& self) {
        std::vector<std::string> out;
        for (auto& [n, t] : self.net->named_parameters()) out.push_back(n);
        return out;
      });

  py::class_<Trainer>(m, "Trainer")
      .def(py::init([](const std::string& cfg, std::optional<std::filesystem::path> resume) {
             return std::make_unique<Trainer>(RunConfig::from_json(parse(cfg)), resume);
           }),
           py::arg("config_json"), py::arg("resume") = std::nullopt)
      .def(
          "run",
          [](Trainer& self, std::int64_t stop_after) {
            TrainResult r;
            {
              py::gil_scoped_release release;
              r = self.run(stop_after);
            }
            py::list steps;
            for (auto& s : r.steps) {
              py::dict d;
              d["step"] = s.step;
              d["epoch"] = s.epoch;
              d["loss"] = s.loss;
              d["focal"] = s.focal;
              d["dice"] = s.dice;
              d["lr"] = s.lr;
              steps.append(d);
            }
            return py::make_tuple(steps, r.finished);
          },
          py::arg("stop_after") = -1)
      .def_property_readonly("steps_done", &Trainer::steps_done)
      .def_property_readonly("total_steps", &Trainer::total_steps)
      .def("model", [](Trainer& self) {
        // Non-owning view kept valid by the trainer.
        return Model{std::shared_ptr<MSUMamba>(std::shared_ptr<MSUMamba>{}, &self.model())};
      }, py::keep_alive<0, 1>());

  m.def("default_run_config", [] { return RunConfig{}.to_json().dump(); });
  m.def("validate_run_config", [](const std::string& cfg) { RunConfig::from_json(parse(cfg)).validate(); },
        py::arg("config_json"));

  m.def(
      "synthesize",
      [](const std::filesystem::path& root, std::int64_t count, std::uint64_t seed, std::int64_t height,
         std::int64_t width) {
        PhantomSpec spec;
        spec.height = height;
        spec.width = width;
        synthesize_dataset(root, count, seed, spec);
      },
      py::arg("root"), py::arg("count"), py::arg("seed"), py::arg("height") = 64, py::arg("width") = 64);

  m.def(
      "phantom",
      [](std::uint64_t seed, std::int64_t height, std::int64_t width) {
        PhantomSpec spec;
        spec.height = height;
        spec.width = width;
        Sample s = generate_phantom(seed, spec);
        py::array_t<std::uint8_t> img({s.image.height, s.image.width, std::int64_t{3}});
        std::copy(s.image.pixels.begin(), s.image.pixels.end(), img.mutable_data());
        return py::make_tuple(img, from_mask(s.mask));
      },
      py::arg("seed"), py::arg("height") = 64, py::arg("width") = 64);

  m.def(
      "metrics",
      [](py::array_t<std::int32_t> pred, py::array_t<std::int32_t> gt, std::int64_t num_classes) {
        auto p = to_labels(pred), g = to_labels(gt);
        if (p.values.size() != g.values.size()) throw InputError("prediction and ground truth shapes differ");
        ConfusionCounts counts(num_classes);
        confusion_accumulate(p, g, counts);
        return compute_metrics(counts).to_json().dump();
      },
      py::arg("pred"), py::arg("gt"), py::arg("num_classes") = 7);

  m.def(
      "verify",
      [](const std::string& suite, const std::vector<std::string>& only, int trials, std::uint64_t seed) {
        VerifyOptions opts;
        opts.trials = trials;
        opts.seed = seed;
        std::vector<CheckResult> results;
        py::gil_scoped_release release;
        if (suite == "gradcheck")
          results = only.empty() ? run_gradcheck_suite(opts) : run_gradcheck(only, opts);
        else if (suite == "oracles")
          results = only.empty() ? run_oracle_suite(opts) : run_oracles(only, opts);
        else
          throw InputError("suite must be gradcheck or oracles");
        return verify_summary(results).dump();
      },
      py::arg("suite"), py::arg("only") = std::vector<std::string>{}, py::arg("trials") = 20,
      py::arg("seed") = 2024);
  m.def("gradcheck_names", &gradcheck_names);
  m.def("oracle_names", &oracle_names);
}
