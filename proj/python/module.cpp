#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <stdexcept>
#include <string>
#include <vector>

#include "dito/det_heads.hpp"
#include "dito/ovd.hpp"
#include "dito/pipeline.hpp"
#include "dito/pretrain.hpp"
#include "dito/roi_align.hpp"
#include "dito/swl.hpp"

namespace py = pybind11;
using namespace dito;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor::from(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

std::vector<NormBox> to_boxes(const Array& a) {
    if (a.ndim() != 2 || a.shape(1) != 4) throw std::invalid_argument("boxes must be an (n, 4) array of x0, y0, x1, y1");
    std::vector<NormBox> boxes;
    for (py::ssize_t i = 0; i < a.shape(0); ++i) boxes.push_back({a.at(i, 0), a.at(i, 1), a.at(i, 2), a.at(i, 3)});
    return boxes;
}

pipeline::Context make_context(const std::string& out, const std::string& config_json,
                               const std::vector<std::string>& overrides) {
    pipeline::Context ctx;
    ctx.cfg = config_json.empty() ? ExperimentConfig::defaults()
                                  : ExperimentConfig::from_json(nlohmann::json::parse(config_json));
    for (const auto& o : overrides) ctx.cfg.set_override(o);
    ctx.cfg.validate();
    ctx.paths = pipeline::Paths::under(out);
    return ctx;
}

pipeline::Metrics run_stage(const std::string& stage, const std::string& out, const std::string& config_json,
                            const std::vector<std::string>& overrides) {
    auto ctx = make_context(out, config_json, overrides);
    py::gil_scoped_release release;
    if (stage == "gen-data") return pipeline::gen_data(ctx);
    if (stage == "pretrain-clip") return pipeline::pretrain_clip(ctx);
    if (stage == "pretrain-dop") return pipeline::pretrain_dop(ctx);
    if (stage == "finetune") return pipeline::finetune(ctx);
    if (stage == "evaluate") return pipeline::evaluate(ctx);
    throw std::invalid_argument("unknown stage '" + stage + "'");
}

}  // namespace

PYBIND11_MODULE(_dito, m) {
    m.doc() = "Detection-oriented pretraining and shifted-window learning at desk scale";

    m.def("default_config", [] { return ExperimentConfig::defaults().dump(); },
          "Built-in configuration as nested JSON text");
    m.def("run_stage", &run_stage, py::arg("stage"), py::arg("out"), py::arg("config_json") = "",
          py::arg("overrides") = std::vector<std::string>{},
          "Run one pipeline stage under out and return its metrics");
    m.def(
        "ablate",
        [](const std::string& out, const std::string& config_json, const std::vector<std::string>& overrides,
           int threads) {
            auto ctx = make_context(out, config_json, overrides);
            py::gil_scoped_release release;
            return pipeline::ablate(ctx, out, threads);
        },
        py::arg("out"), py::arg("config_json") = "", py::arg("overrides") = std::vector<std::string>{},
        py::arg("threads") = 1, "Run the DOP x SWL ablation grid and return the aggregated metrics");

    m.def(
        "ensemble_score",
        [](const std::vector<double>& p, const std::vector<double>& z, double alpha, double beta,
           const std::vector<bool>& novel) { return ovd::ensemble_score(p, z, {alpha, beta}, novel); },
        py::arg("p"), py::arg("z"), py::arg("alpha"), py::arg("beta"), py::arg("novel"),
        "Geometric score ensemble; p has the background first, z covers the categories");
    m.def(
        "nms",
        [](const Array& boxes, const std::vector<double>& scores, double iou) {
            return det::nms(to_boxes(boxes), scores, iou);
        },
        py::arg("boxes"), py::arg("scores"), py::arg("iou_threshold"), "Indices kept by greedy NMS, best first");
    m.def(
        "roi_align",
        [](const Array& grid, const Array& boxes, int out_size, int samples_per_bin) {
            return to_array(roi_align(to_tensor(grid), to_boxes(boxes), out_size, samples_per_bin));
        },
        py::arg("grid"), py::arg("boxes"), py::arg("out_size"), py::arg("samples_per_bin") = 2,
        "RoI-Align of normalized boxes over an (h, w, c) grid");
    m.def(
        "info_nce",
        [](const Array& image_emb, const Array& text_emb, double tau) {
            return dop::info_nce(to_tensor(image_emb), to_tensor(text_emb), tau).item();
        },
        py::arg("image_emb"), py::arg("text_emb"), py::arg("tau"), "Symmetric InfoNCE of matched rows");
    m.def(
        "shift_size",
        [](int image_size, int patch_size, int grid, double q) {
            auto s = swl::compute_shift_size(image_size, patch_size, grid, q);
            return py::make_tuple(s.cell, s.shift);
        },
        py::arg("image_size"), py::arg("patch_size"), py::arg("grid"), py::arg("q"),
        "Window cell size and shift in tokens");
}
