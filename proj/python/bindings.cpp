#include "driftadapt/dataset.hpp"
#include "driftadapt/degradation.hpp"
#include "driftadapt/error.hpp"
#include "driftadapt/experiment.hpp"
#include "driftadapt/losses.hpp"
#include "driftadapt/optim.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
namespace da = driftadapt;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

da::Image to_image(const Array& a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw da::InputError("image must have shape (H, W, 3)");
  da::Image img(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy(a.data(), a.data() + a.size(), img.pixels.begin());
  return img;
}

Array from_image(const da::Image& img) {
  Array out({img.height, img.width, 3});
  std::copy(img.pixels.begin(), img.pixels.end(), out.mutable_data());
  return out;
}

py::tuple loss_tuple(const da::LossResult& r) { return py::make_tuple(r.value, r.grad); }

nlohmann::json parse_json(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw da::ConfigError(std::string("malformed JSON: ") + e.what());
  }
}

da::ExperimentConfig config_from(const std::string& json) { return da::ExperimentConfig::from_json(parse_json(json)); }

py::dict result_dict(const da::RunResult& r) {
  py::dict d;
  d["run_id"] = r.run_id;
  d["method"] = r.method;
  d["backbone"] = r.backbone;
  d["eta0"] = r.eta0;
  d["grad_norm"] = r.grad_norm;
  d["seed"] = r.seed;
  d["source_accuracy"] = r.source_accuracy;
  d["final_accuracy"] = r.final_accuracy;
  d["max_chunk_drop"] = r.max_chunk_drop;
  d["chunk_accuracies"] = r.chunk_accuracies;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Continual source-free adaptation core";

  auto base = py::register_exception<da::Error>(m, "DriftAdaptError");
  py::register_exception<da::InputError>(m, "InputError", base);
  py::register_exception<da::ValidationError>(m, "ValidationError", base);
  py::register_exception<da::ConfigError>(m, "ConfigError", base);
  py::register_exception<da::IoError>(m, "IoError", base);
  py::register_exception<da::NumericError>(m, "NumericError", base);

  m.def("entropy_loss", [](const da::Matrix& p) { return loss_tuple(da::entropy_loss(p)); }, py::arg("probs"),
        "Mean per-sample entropy and its gradient with respect to probs.");
  m.def("diversity_loss", [](const da::Matrix& p) { return loss_tuple(da::diversity_loss(p)); }, py::arg("probs"));
  m.def("equal_diversity_loss", [](const da::Matrix& p) { return loss_tuple(da::equal_diversity_loss(p)); },
        py::arg("probs"));
  m.def("pseudolabel_ce",
        [](const da::Matrix& p, const std::vector<int>& labels) { return loss_tuple(da::pseudolabel_ce(p, labels)); },
        py::arg("probs"), py::arg("labels"));
  m.def(
      "refine_pseudolabels",
      [](const da::Matrix& features, const da::Matrix& probs, int rounds) {
        const auto a = da::refine_pseudolabels(features, probs, rounds);
        return py::make_tuple(a.labels, a.confidences);
      },
      py::arg("features"), py::arg("probs"), py::arg("rounds") = 2, "Returns (labels, confidences).");
  m.def(
      "prototypical_contrastive_loss",
      [](const da::Matrix& f, const std::vector<int>& labels, const da::Matrix& bf, const std::vector<int>& blabels,
         double tau) {
        const auto r = da::prototypical_contrastive_loss(f, labels, bf, blabels, tau);
        return py::make_tuple(r.value, r.grad);
      },
      py::arg("features"), py::arg("labels"), py::arg("buffer_features"), py::arg("buffer_labels"),
      py::arg("tau") = 0.1);
  m.def("lr_at", &da::lr_at, py::arg("eta0"), py::arg("iteration"), py::arg("total_iterations"));

  m.def(
      "default_schedule",
      [](const std::string& kind, std::uint64_t seed) {
        return da::DegradationSchedule::make_default(da::parse_degradation_kind(kind), seed).to_json().dump();
      },
      py::arg("kind"), py::arg("seed") = 0, "Default schedule as a JSON string.");
  m.def(
      "degrade",
      [](const Array& image, const std::string& schedule_json, std::size_t level, std::uint64_t image_id) {
        const auto s = da::DegradationSchedule::from_json(parse_json(schedule_json));
        if (level >= s.levels.size()) throw da::InputError("level out of range");
        return from_image(da::apply_level(to_image(image), s.levels[level], s.seed, image_id));
      },
      py::arg("image"), py::arg("schedule"), py::arg("level"), py::arg("image_id") = 0);

  m.def(
      "make_shapes",
      [](const std::filesystem::path& root, int per_class, int size, std::uint64_t seed) {
        da::save_class_folders(root, da::make_shapes_dataset(per_class, size, seed));
      },
      py::arg("root"), py::arg("per_class"), py::arg("size") = 32, py::arg("seed") = 0);
  m.def("default_config", [] { return da::ExperimentConfig{}.to_json().dump(); });
  m.def("synthesize", [](const std::string& config) { return da::cmd_synthesize(config_from(config)); },
        py::arg("config"), "Writes the degraded sequence; returns the manifest hash.");
  m.def(
      "train_source",
      [](const std::string& config) { return da::cmd_train_source(config_from(config)).train_accuracy; },
      py::arg("config"), "Trains and saves the source model; returns train accuracy.");
  m.def(
      "adapt",
      [](const std::string& config, bool resume, bool quiet) {
        std::vector<da::RunResult> rows;
        {
          py::gil_scoped_release release;
          rows = da::cmd_adapt(config_from(config), {resume, quiet});
        }
        py::list out;
        for (const auto& r : rows) out.append(result_dict(r));
        return out;
      },
      py::arg("config"), py::arg("resume") = false, py::arg("quiet") = true);
  m.def(
      "report",
      [](const std::vector<std::filesystem::path>& results) {
        return da::format_report(da::cmd_report(results));
      },
      py::arg("results"));
}
