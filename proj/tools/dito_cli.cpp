// dito: experiment runner for detection-oriented pretraining and
// open-vocabulary detection on the synthetic shapes corpus.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <thread>

#include "CLI11.hpp"
#include "dito/pipeline.hpp"

namespace {

using dito::pipeline::Context;
using dito::pipeline::Metrics;

struct Common {
    std::string config;
    std::vector<std::string> overrides;
    bool deterministic = false;
    int seed = -1;
    std::string out = "runs/default";
    bool quiet = false;
};

int worker_threads() {
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("DITO_THREADS")) {
        const int n = std::atoi(env);
        if (n < 1) throw std::invalid_argument("DITO_THREADS must be a positive integer, got '" + std::string(env) + "'");
        return n;
    }
    return static_cast<int>(hw);
}

Context make_context(const Common& c) {
    Context ctx;
    ctx.cfg = c.config.empty() ? dito::ExperimentConfig::defaults() : dito::ExperimentConfig::load(c.config);
    for (const auto& o : c.overrides) ctx.cfg.set_override(o);
    if (c.seed >= 0) ctx.cfg.set("seed", c.seed);
    if (c.deterministic) ctx.cfg.set("deterministic", true);
    ctx.cfg.validate();
    ctx.paths = dito::pipeline::Paths::under(c.out);
    if (!c.quiet) {
        static std::mutex mu;
        const auto t0 = std::chrono::steady_clock::now();
        ctx.log = [t0](const std::string& msg) {
            const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::lock_guard<std::mutex> lock(mu);
            std::fprintf(stderr, "[%8.1fs] %s\n", s, msg.c_str());
        };
    }
    return ctx;
}

void print(const Metrics& m) { std::cout << dito::pipeline::format_metrics(m); }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dito: detection-oriented pretraining and open-vocabulary detection on synthetic shapes"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "JSON config overlaid on the built-in defaults")->check(CLI::ExistingFile);
        sub->add_option("--set", common.overrides, "override one key, e.g. --set finetune.steps=100")->take_all();
        sub->add_flag("--deterministic", common.deterministic, "force deterministic mode");
        sub->add_option("--seed", common.seed, "experiment seed (overrides the config)")->check(CLI::NonNegativeNumber);
        sub->add_option("--out", common.out, "run directory for data, checkpoints and reports");
        sub->add_flag("-q,--quiet", common.quiet, "suppress progress logging");
    };

    auto* gen = app.add_subcommand("gen-data", "generate the pretrain, finetune and eval splits");
    auto* clip = app.add_subcommand("pretrain-clip", "phase 1: image-text contrastive pretraining");
    auto* dop = app.add_subcommand("pretrain-dop", "phase 2: detection-oriented pretraining on frozen towers");
    auto* ft = app.add_subcommand("finetune", "finetune the detector on base categories");
    auto* ev = app.add_subcommand("evaluate", "AP50 (base/novel), retrieval recall and pointing game");
    auto* hm = app.add_subcommand("heatmap", "write backbone and DOP similarity heatmaps as PNG pairs");
    auto* ab = app.add_subcommand("ablate", "{DOP on/off} x {SWL on/off} grid over ablate.seeds");
    auto* show = app.add_subcommand("show-config", "print the resolved configuration");
    for (auto* s : {gen, clip, dop, ft, ev, hm, ab, show}) add_common(s);

    bool no_detection = false, no_retrieval = false, no_pointing = false;
    ev->add_flag("--no-detection", no_detection, "skip detection AP");
    ev->add_flag("--no-retrieval", no_retrieval, "skip retrieval recall");
    ev->add_flag("--no-pointing", no_pointing, "skip the pointing game");
    std::string heat_dir;
    hm->add_option("--dir", heat_dir, "output directory for PNGs (default <out>/heatmaps)");

    CLI11_PARSE(app, argc, argv);

    try {
        Context ctx = make_context(common);
        if (*show) {
            std::cout << ctx.cfg.dump() << "\n";
        } else if (*gen) {
            print(dito::pipeline::gen_data(ctx));
        } else if (*clip) {
            print(dito::pipeline::pretrain_clip(ctx));
        } else if (*dop) {
            print(dito::pipeline::pretrain_dop(ctx));
        } else if (*ft) {
            print(dito::pipeline::finetune(ctx));
        } else if (*ev) {
            print(dito::pipeline::evaluate(ctx, {!no_detection, !no_retrieval, !no_pointing}));
        } else if (*hm) {
            print(dito::pipeline::render_heatmaps(ctx, heat_dir.empty() ? ctx.paths.reports / "heatmaps" : std::filesystem::path(heat_dir)));
        } else if (*ab) {
            print(dito::pipeline::ablate(ctx, common.out, worker_threads()));
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "dito: error: %s\n", e.what());
        return 1;
    }
    return 0;
}
