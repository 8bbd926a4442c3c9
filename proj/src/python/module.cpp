// SPDX-License-Identifier: Apache-2.0
// Python bindings: config, choice metric, FLOPs tables, overlap metrics and the commands.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dynaroute/choice_metric.hpp"
#include "dynaroute/config.hpp"
#include "dynaroute/errors.hpp"
#include "dynaroute/flops.hpp"
#include "dynaroute/metrics.hpp"
#include "dynaroute/pipeline.hpp"

namespace py = pybind11;
using namespace dynaroute;

namespace {

using LabelArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

std::span<const std::uint8_t> view(const LabelArray& a) {
  return {a.data(), static_cast<std::size_t>(a.size())};
}

void same_size(const LabelArray& a, const LabelArray& b) {
  if (a.size() != b.size()) throw ShapeError("prediction and truth differ in size");
}

ExperimentConfig parse_config(const std::string& text) {
  return text.empty() ? default_config() : config_from_json(nlohmann::json::parse(text));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Slice-wise dynamic routing for volumetric segmentation";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_OSError);

  m.def("default_config_json", [] { return config_to_json(default_config()).dump(); });
  m.def(
      "resolve_config",
      [](const std::string& text) {
        const auto cfg = parse_config(text);
        validate_config(cfg);
        return config_to_json(cfg).dump();
      },
      py::arg("config_json"));
  m.def(
      "config_hash", [](const std::string& text) { return config_hash(parse_config(text)); },
      py::arg("config_json") = "");

  m.def(
      "choice_label",
      [](std::vector<double> S, std::vector<flops::Count> F, std::int64_t pf, double alpha, bool softmax_on_S,
         bool softmax_on_F, double flops_unit) {
        return choice_label(SliceEvalRecord{"", 0, pf, std::move(S), std::move(F)},
                            MetricConfig{alpha, softmax_on_S, softmax_on_F, flops_unit});
      },
      py::arg("S"), py::arg("F"), py::arg("pf"), py::arg("alpha") = 0.001, py::arg("softmax_on_S") = false,
      py::arg("softmax_on_F") = true, py::arg("flops_unit") = 1e9);

  m.def(
      "candidate_flops",
      [](int height, int width) {
        std::vector<flops::Count> out;
        for (const auto& s : default_roster()) out.push_back(flops::candidate(s, height, width));
        return out;
      },
      py::arg("height") = 64, py::arg("width") = 64, "FLOPs of the default roster at one slice size");
  m.def(
      "decision_flops", [](int height, int width) { return flops::decision(DecisionNetSpec{}, height, width); },
      py::arg("height") = 64, py::arg("width") = 64);

  m.def(
      "dice_score",
      [](const LabelArray& pred, const LabelArray& truth, std::vector<int> region) {
        same_size(pred, truth);
        return dice_score(view(pred), view(truth), region);
      },
      py::arg("pred"), py::arg("truth"), py::arg("region"));
  m.def(
      "hd95",
      [](const LabelArray& pred, const LabelArray& truth, std::vector<int> region) -> std::optional<double> {
        same_size(pred, truth);
        if (pred.ndim() < 2 || pred.ndim() > 3) throw ShapeError("hd95 expects a 2D or 3D mask");
        MaskDims dims;
        dims.depth = pred.ndim() == 3 ? static_cast<int>(pred.shape(0)) : 1;
        dims.height = static_cast<int>(pred.shape(pred.ndim() - 2));
        dims.width = static_cast<int>(pred.shape(pred.ndim() - 1));
        const auto h = hd95(view(pred), view(truth), dims, region);
        if (!h.defined) return std::nullopt;
        return h.value;
      },
      py::arg("pred"), py::arg("truth"), py::arg("region"), "None when exactly one region is empty");

  m.def(
      "run_command",
      [](const std::string& name, const std::string& config_json, const std::string& out_dir,
         std::optional<int> force_decision, bool oracle_routing) {
        auto cfg = parse_config(config_json);
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        validate_config(cfg);
        RoutingOptions opts{force_decision, oracle_routing};
        CommandResult res;
        {
          py::gil_scoped_release release;
          res = run_command_safely(name, cfg, opts);
        }
        return py::make_tuple(res.exit_code, res.summary.dump());
      },
      py::arg("name"), py::arg("config_json") = "", py::arg("out_dir") = "", py::arg("force_decision") = py::none(),
      py::arg("oracle_routing") = false);
}
