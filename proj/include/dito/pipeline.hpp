#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dito/checkpoint.hpp"
#include "dito/config.hpp"
#include "dito/ovd.hpp"
#include "dito/pretrain.hpp"

namespace dito::pipeline {

using Metrics = std::map<std::string, double>;
using Logger = std::function<void(const std::string&)>;

// Artifact locations of one run. Defaults derive from an output directory.
struct Paths {
    std::filesystem::path data;      // holds pretrain/, finetune/, eval/
    std::filesystem::path clip;      // phase-1 checkpoint
    std::filesystem::path dop;       // phase-2 checkpoint
    std::filesystem::path detector;  // finetuned detector checkpoint
    std::filesystem::path reports;   // metrics and snapshots

    static Paths under(const std::filesystem::path& out);
};

struct Context {
    ExperimentConfig cfg = ExperimentConfig::defaults();
    Paths paths;
    Logger log;  // may be empty

    void info(const std::string& msg) const {
        if (log) log(msg);
    }
};

// "key=value" lines in key order, values with 6 decimals.
std::string format_metrics(const Metrics& m);
std::string metrics_table(const std::string& title, const Metrics& m);
// Writes <name>.txt (key=value) and <name>_table.txt under dir.
void write_metrics(const std::filesystem::path& dir, const std::string& name, const Metrics& m);
void write_snapshot(const Context& ctx);

// Phase-1 towers with their vocabulary.
struct Towers {
    text::Vocabulary vocab;
    dop::ClipModel clip;
};
Towers init_towers(const ExperimentConfig& cfg, Rng& rng);
Towers load_towers(const Checkpoint& ckpt, const ExperimentConfig& cfg);
dop::DopModel init_dop_heads(const ExperimentConfig& cfg, Rng& rng);
// Builds a category table from the synthetic categories and prompt templates.
ovd::CategoryTable build_category_table(const ExperimentConfig& cfg, const Towers& towers);

struct Detector {
    ovd::DetectorModel model;
    vit::ViTParams frozen;
    ovd::CategoryTable table;
    ExperimentConfig cfg;  // configuration the detector was trained with
};
Detector load_detector(const Checkpoint& ckpt);

Metrics gen_data(const Context& ctx);
Metrics pretrain_clip(const Context& ctx);
// Throws if any frozen tower parameter changes during phase 2.
Metrics pretrain_dop(const Context& ctx);
Metrics finetune(const Context& ctx);

struct EvalOptions {
    bool detection = true;
    bool retrieval = true;
    bool pointing = true;
};
Metrics evaluate(const Context& ctx, const EvalOptions& opt = {});

// Pointing-game targets: objects whose category occurs once in the image.
struct PointingTarget {
    int image;
    std::string category;
    NormBox box;
};
std::vector<PointingTarget> pointing_targets(const data::Dataset& ds);
// Hit rates of backbone-mode and dop-mode heatmaps.
std::pair<double, double> pointing_rates(const ExperimentConfig& cfg, const Towers& towers, const dop::DopModel& heads,
                                         const data::Dataset& ds);

// Raw (h, w, 1) heatmaps for one image and phrase.
std::pair<Tensor, Tensor> heatmaps(const ExperimentConfig& cfg, const Towers& towers, const dop::DopModel& heads,
                                   const data::Image& image, const std::string& phrase);
// Writes grayscale and overlay PNGs for the first heatmap.count eval images.
Metrics render_heatmaps(const Context& ctx, const std::filesystem::path& dir);

// {DOP on/off} x {SWL on/off} over ablate.seeds, plus the frozen-backbone
// ablation and the pointing game. Seeds run on up to `threads` threads.
// Wall-clock seconds per seed go to seed_seconds when given.
Metrics ablate(const Context& ctx, const std::filesystem::path& out, int threads,
               std::vector<double>* seed_seconds = nullptr);

}  // namespace dito::pipeline
