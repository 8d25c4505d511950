#include "dito/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "dito/eval.hpp"

namespace dito::pipeline {

namespace fs = std::filesystem;

namespace {

std::uint64_t stream_seed(const ExperimentConfig& cfg, std::uint64_t stream) {
    return static_cast<std::uint64_t>(cfg.get_int("seed")) * 1000ULL + stream;
}

enum Stream : std::uint64_t { kClipInit = 1, kClipTrain, kDopInit, kDopTrain, kDetInit, kDetTrain, kOrder };

std::string join(const std::vector<std::string>& v, char sep) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? std::string(1, sep) : "") + v[i];
    return out;
}

std::vector<std::string> split_lines(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    std::string line;
    while (std::getline(in, line)) out.push_back(line);
    return out;
}

void ensure_parent(const fs::path& p) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// Cycles through a dataset in reshuffled epochs.
class BatchSampler {
public:
    BatchSampler(int n, int batch, std::uint64_t seed) : n_(n), batch_(batch), rng_(seed) {
        if (batch < 1 || batch > n) {
            throw std::invalid_argument("batch size " + std::to_string(batch) + " does not fit a split of " +
                                        std::to_string(n) + " images");
        }
        order_.resize(n);
        std::iota(order_.begin(), order_.end(), 0);
        pos_ = n_;
    }
    std::vector<int> next() {
        if (pos_ + batch_ > n_) {
            std::shuffle(order_.begin(), order_.end(), rng_.engine());
            pos_ = 0;
        }
        std::vector<int> rows(order_.begin() + pos_, order_.begin() + pos_ + batch_);
        pos_ += batch_;
        return rows;
    }

private:
    int n_, batch_, pos_;
    Rng rng_;
    std::vector<int> order_;
};

dop::Batch make_batch(const data::Dataset& ds, const std::vector<int>& rows, const text::Vocabulary& vocab,
                      int max_len) {
    std::vector<std::string> caps;
    for (int r : rows) caps.push_back(ds.records[r].caption);
    return {ds.batch(rows), text::TextBatch::from_sentences(vocab, caps, max_len)};
}

std::string fmt(double v, int decimals = 6) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
    return buf;
}

std::vector<bool> novel_mask(const ExperimentConfig& cfg, const std::vector<std::string>& names) {
    const auto novel = cfg.get_strings("data.novel");
    std::vector<bool> out;
    for (const auto& n : names) out.push_back(std::find(novel.begin(), novel.end(), n) != novel.end());
    return out;
}

}  // namespace

Paths Paths::under(const fs::path& out) {
    return {out / "data", out / "clip.ckpt", out / "dop.ckpt", out / "detector.ckpt", out};
}

std::string format_metrics(const Metrics& m) {
    std::string out;
    for (const auto& [k, v] : m) out += k + "=" + fmt(v) + "\n";
    return out;
}

std::string metrics_table(const std::string& title, const Metrics& m) {
    std::size_t w = 6;
    for (const auto& [k, v] : m) w = std::max(w, k.size());
    std::string rule(w + 15, '-');
    std::string out = title + "\n" + rule + "\n";
    for (const auto& [k, v] : m) {
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%-*s  %12.4f\n", static_cast<int>(w), k.c_str(), v);
        out += buf;
    }
    return out + rule + "\n";
}

void write_metrics(const fs::path& dir, const std::string& name, const Metrics& m) {
    fs::create_directories(dir);
    std::ofstream(dir / (name + ".txt"), std::ios::binary) << format_metrics(m);
    std::ofstream(dir / (name + "_table.txt"), std::ios::binary) << metrics_table(name, m);
}

void write_snapshot(const Context& ctx) {
    fs::create_directories(ctx.paths.reports);
    std::ofstream(ctx.paths.reports / "resolved_config.json", std::ios::binary) << ctx.cfg.dump();
}

Towers init_towers(const ExperimentConfig& cfg, Rng& rng) {
    const auto spec = synthetic_spec(cfg, data::Split::Pretrain, 0);
    Towers t{text::Vocabulary(data::vocabulary_words(spec)), {}};
    t.clip.image = vit::ViTParams::init(pretrain_vit_config(cfg), rng);
    t.clip.text = text::TextEncoderParams::init(text_config(cfg, t.vocab.size()), rng);
    t.clip.contrastive = dop::ContrastiveHead::init(cfg.get_double("clip.tau_init"));
    return t;
}

Towers load_towers(const Checkpoint& ckpt, const ExperimentConfig& cfg) {
    Rng rng(0);
    Towers t = init_towers(cfg, rng);
    auto it = ckpt.meta.find("vocab");
    if (it == ckpt.meta.end()) throw std::runtime_error("checkpoint (" + ckpt.stage + "): missing vocabulary");
    if (split_lines(it->second) != t.vocab.words()) {
        throw std::runtime_error("checkpoint (" + ckpt.stage + "): vocabulary differs from the configured dataset");
    }
    ParamList p = named_params(t.clip);
    ckpt.get(p);
    return t;
}

dop::DopModel init_dop_heads(const ExperimentConfig& cfg, Rng& rng) {
    const int ch = cfg.get_int("fpn.channels");
    dop::DopModel m;
    m.fpn = det::FpnParams::init(cfg.get_int("vit.embed_dim"), ch, rng);
    m.head = det::RcnnHeadParams::init(cfg.get_int("dop.roi_size"), ch, cfg.get_int("head.hidden"),
                                       cfg.get_int("vit.joint_dim"), rng);
    m.contrastive = dop::ContrastiveHead::init(cfg.get_double("dop.tau_init"));
    return m;
}

ovd::CategoryTable build_category_table(const ExperimentConfig& cfg, const Towers& towers) {
    const auto names = synthetic_spec(cfg, data::Split::Eval, 0).category_names();
    return ovd::category_embeddings(names, novel_mask(cfg, names), data::prompt_templates(), towers.vocab,
                                    towers.clip.text);
}

namespace {

ovd::DetectorModel init_detector(const ExperimentConfig& cfg, Rng& rng) {
    const int ch = cfg.get_int("fpn.channels");
    ovd::DetectorModel m;
    m.backbone = vit::ViTParams::init(detection_vit_config(cfg), rng);
    m.fpn = det::FpnParams::init(cfg.get_int("vit.embed_dim"), ch, rng);
    m.rpn = det::RpnParams::init(ch, rng);
    m.head = det::RcnnHeadParams::init(cfg.get_int("dop.roi_size"), ch, cfg.get_int("head.hidden"),
                                       cfg.get_int("vit.joint_dim"), rng);
    return m;
}

ExperimentConfig config_from_checkpoint(const Checkpoint& ckpt) {
    try {
        return ExperimentConfig::from_json(nlohmann::json::parse(ckpt.config));
    } catch (const std::exception& e) {
        throw std::runtime_error("checkpoint (" + ckpt.stage + "): stored configuration is unusable: " + e.what());
    }
}

}  // namespace

Detector load_detector(const Checkpoint& ckpt) {
    if (ckpt.stage != "finetune") throw std::runtime_error("checkpoint: expected a finetune checkpoint, got " + ckpt.stage);
    Detector d{{}, {}, {}, config_from_checkpoint(ckpt)};
    Rng rng(0);
    d.model = init_detector(d.cfg, rng);
    d.frozen = vit::ViTParams::init(pretrain_vit_config(d.cfg), rng);
    ParamList mp = named_params(d.model);
    ckpt.get(mp, "detector.");
    ParamList fp = named_params(d.frozen);
    ckpt.get(fp, "frozen.");
    set_requires_grad(fp, false);
    d.table.names = split_lines(ckpt.meta.at("categories"));
    for (char c : ckpt.meta.at("novel")) d.table.novel.push_back(c == '1');
    d.table.templates = split_lines(ckpt.meta.at("templates"));
    d.table.embeddings = ckpt.tensor("table.embeddings");
    d.table.background = ckpt.tensor("table.background", true);
    d.table.validate();
    return d;
}

Metrics gen_data(const Context& ctx) {
    write_snapshot(ctx);
    Metrics m;
    const auto seed = static_cast<std::uint64_t>(ctx.cfg.get_int("seed"));
    for (auto split : {data::Split::Pretrain, data::Split::Finetune, data::Split::Eval}) {
        const auto spec = synthetic_spec(ctx.cfg, split, seed);
        auto records = data::gen_synthetic_dataset(spec, ctx.paths.data / data::to_string(split));
        int objects = 0;
        for (const auto& r : records) objects += static_cast<int>(r.annotations.size());
        m["data." + data::to_string(split) + ".images"] = static_cast<double>(records.size());
        m["data." + data::to_string(split) + ".objects"] = objects;
        ctx.info("gen-data: " + data::to_string(split) + " " + std::to_string(records.size()) + " images, " +
                 std::to_string(objects) + " objects");
    }
    return m;
}

Metrics pretrain_clip(const Context& ctx) {
    write_snapshot(ctx);
    const auto& cfg = ctx.cfg;
    auto ds = data::Dataset::load(ctx.paths.data / "pretrain");
    Rng init(stream_seed(cfg, kClipInit));
    Towers t = init_towers(cfg, init);
    dop::ClipTrainer trainer(t.clip, pretrain_vit_config(cfg), clip_schedule(cfg), stream_seed(cfg, kClipTrain),
                             cfg.get_bool("clip.pe_crop"));
    BatchSampler sampler(ds.size(), cfg.get_int("clip.batch"), stream_seed(cfg, kOrder));
    const int steps = cfg.get_int("clip.steps");
    const int max_len = cfg.get_int("text.max_len");
    double recent = 0;
    int n_recent = 0;
    for (int s = 0; s < steps; ++s) {
        const double loss = trainer.step(make_batch(ds, sampler.next(), t.vocab, max_len));
        if (s >= steps - 20) recent += loss, ++n_recent;
        if (s % 50 == 0 || s + 1 == steps) ctx.info("pretrain-clip: step " + std::to_string(s) + " loss " + fmt(loss, 4));
    }
    Checkpoint ck;
    ck.stage = "pretrain-clip";
    ck.config = cfg.dump();
    ck.step = static_cast<std::uint64_t>(steps);
    ck.rng_state = trainer.rng().state();
    ck.meta["vocab"] = join(t.vocab.words(), '\n');
    ck.put(named_params(t.clip));
    ensure_parent(ctx.paths.clip);
    ck.save(ctx.paths.clip);
    return {{"clip.final_loss", n_recent ? recent / n_recent : 0.0}, {"clip.tau", t.clip.contrastive.tau()}};
}

Metrics pretrain_dop(const Context& ctx) {
    write_snapshot(ctx);
    const auto& cfg = ctx.cfg;
    Towers t = load_towers(require_checkpoint(ctx.paths.clip, "pretrain-clip"), cfg);
    ParamList tower_params = named_params(t.clip);
    set_requires_grad(tower_params, false);
    const auto before = flatten_values(tower_params);

    auto ds = data::Dataset::load(ctx.paths.data / "pretrain");
    Rng init(stream_seed(cfg, kDopInit));
    dop::DopModel heads = init_dop_heads(cfg, init);
    dop::DopTrainer trainer(t.clip, heads, pretrain_vit_config(cfg),
                            dop_options(cfg, static_cast<std::uint64_t>(cfg.get_int("seed"))), dop_schedule(cfg),
                            stream_seed(cfg, kDopTrain));
    BatchSampler sampler(ds.size(), cfg.get_int("dop.batch"), stream_seed(cfg, kOrder) + 1);
    const int steps = cfg.get_int("dop.steps");
    const int max_len = cfg.get_int("text.max_len");
    double recent = 0;
    int n_recent = 0;
    for (int s = 0; s < steps; ++s) {
        const double loss = trainer.step(make_batch(ds, sampler.next(), t.vocab, max_len));
        if (s >= steps - 20) recent += loss, ++n_recent;
        if (s % 25 == 0 || s + 1 == steps) ctx.info("pretrain-dop: step " + std::to_string(s) + " loss " + fmt(loss, 4));
    }
    if (flatten_values(tower_params) != before) {
        throw std::runtime_error("pretrain-dop: frozen image/text tower parameters changed during phase 2");
    }
    Checkpoint ck;
    ck.stage = "pretrain-dop";
    ck.config = cfg.dump();
    ck.step = static_cast<std::uint64_t>(steps);
    ck.rng_state = trainer.rng().state();
    ck.put(named_params(heads));
    ensure_parent(ctx.paths.dop);
    ck.save(ctx.paths.dop);
    return {{"dop.final_loss", n_recent ? recent / n_recent : 0.0}, {"dop.tau", heads.contrastive.tau()}};
}

Metrics finetune(const Context& ctx) {
    write_snapshot(ctx);
    const auto& cfg = ctx.cfg;
    Towers t = load_towers(require_checkpoint(ctx.paths.clip, "pretrain-clip"), cfg);
    ovd::CategoryTable table = build_category_table(cfg, t);

    Rng init(stream_seed(cfg, kDetInit));
    ovd::DetectorModel model = init_detector(cfg, init);
    {
        ParamList dst = named_params(model.backbone);
        copy_values(named_params(t.clip.image), dst);
    }
    if (cfg.get_bool("finetune.init_from_dop")) {
        Checkpoint dck = require_checkpoint(ctx.paths.dop, "pretrain-dop");
        ParamList fpn = named_params(model.fpn, "fpn.");
        dck.get(fpn);
        ParamList head = named_params(model.head, "head.");
        dck.get(head);
    }
    vit::ViTParams frozen = t.clip.image;
    set_requires_grad(named_params(frozen), false);

    auto ds = data::Dataset::load(ctx.paths.data / "finetune");
    std::vector<ovd::GroundTruth> gts;
    for (const auto& r : ds.records) {
        ovd::GroundTruth g;
        for (const auto& a : r.annotations) {
            g.boxes.push_back(a.box);
            g.labels.push_back(table.index_of(a.category));
        }
        gts.push_back(std::move(g));
    }

    ovd::FinetuneTrainer trainer(model, table, detector_config(cfg), finetune_schedule(cfg), stream_seed(cfg, kDetTrain));
    BatchSampler sampler(ds.size(), cfg.get_int("finetune.batch"), stream_seed(cfg, kOrder) + 2);
    const int steps = cfg.get_int("finetune.steps");
    ovd::FinetuneLosses avg;
    int n_recent = 0;
    for (int s = 0; s < steps; ++s) {
        auto rows = sampler.next();
        std::vector<ovd::GroundTruth> batch_gt;
        for (int r : rows) batch_gt.push_back(gts[r]);
        auto l = trainer.step(ds.batch(rows), batch_gt);
        if (s >= steps - 20) {
            avg.total += l.total, avg.rpn_cls += l.rpn_cls, avg.rpn_reg += l.rpn_reg, avg.cls += l.cls, avg.reg += l.reg;
            ++n_recent;
        }
        if (s % 25 == 0 || s + 1 == steps) {
            ctx.info("finetune: step " + std::to_string(s) + " loss " + fmt(l.total, 4) + " (rpn " + fmt(l.rpn_cls, 3) +
                     "/" + fmt(l.rpn_reg, 3) + ", cls " + fmt(l.cls, 3) + ", box " + fmt(l.reg, 3) + ")");
        }
    }

    Checkpoint ck;
    ck.stage = "finetune";
    ck.config = cfg.dump();
    ck.step = static_cast<std::uint64_t>(steps);
    ck.rng_state = trainer.rng().state();
    ck.meta["vocab"] = join(t.vocab.words(), '\n');
    ck.meta["categories"] = join(table.names, '\n');
    std::string novel;
    for (bool b : table.novel) novel += b ? '1' : '0';
    ck.meta["novel"] = novel;
    ck.meta["templates"] = join(table.templates, '\n');
    ck.put(named_params(model), "detector.");
    ck.put(named_params(frozen), "frozen.");
    ck.put("table.embeddings", table.embeddings);
    ck.put("table.background", table.background);
    ensure_parent(ctx.paths.detector);
    ck.save(ctx.paths.detector);
    const double n = std::max(n_recent, 1);
    return {{"finetune.loss", avg.total / n},  {"finetune.rpn_cls", avg.rpn_cls / n}, {"finetune.rpn_reg", avg.rpn_reg / n},
            {"finetune.cls", avg.cls / n},     {"finetune.box", avg.reg / n}};
}

std::vector<PointingTarget> pointing_targets(const data::Dataset& ds) {
    std::vector<PointingTarget> out;
    for (int i = 0; i < ds.size(); ++i) {
        const auto& anns = ds.records[i].annotations;
        for (const auto& a : anns) {
            const auto n = std::count_if(anns.begin(), anns.end(), [&](const auto& b) { return b.category == a.category; });
            if (n == 1) out.push_back({i, a.category, a.box});
        }
    }
    return out;
}

namespace {

Tensor phrase_embedding(const Towers& towers, const std::string& phrase, int max_len) {
    NoGradGuard guard;
    return text::encode_text(text::TextBatch::from_sentences(towers.vocab, {phrase}, max_len), towers.clip.text);
}

Tensor frozen_tokens(const ExperimentConfig& cfg, const Towers& towers, const Tensor& images) {
    NoGradGuard guard;
    const auto vcfg = pretrain_vit_config(cfg);
    return vit::vit_forward(vit::patchify(images, vcfg, towers.clip.image), vcfg, towers.clip.image);
}

Tensor image_slice(const Tensor& batch, int i) {
    const int per = static_cast<int>(batch.numel() / batch.dim(0));
    std::vector<double> v(batch.data().begin() + static_cast<std::size_t>(i) * per,
                          batch.data().begin() + static_cast<std::size_t>(i + 1) * per);
    Shape s(batch.shape().begin() + 1, batch.shape().end());
    return Tensor::from(s, std::move(v));
}

}  // namespace

std::pair<Tensor, Tensor> heatmaps(const ExperimentConfig& cfg, const Towers& towers, const dop::DopModel& heads,
                                   const data::Image& image, const std::string& phrase) {
    NoGradGuard guard;
    Tensor txt = phrase_embedding(towers, phrase, cfg.get_int("text.max_len"));
    Tensor tokens = frozen_tokens(cfg, towers, data::image_tensor({&image}));
    det::FeaturePyramid pyr = det::build_fpn(tokens, heads.fpn);
    Tensor bb = eval::backbone_heatmap(image_slice(tokens, 0), towers.clip.image, txt.data());
    Tensor dp = eval::dop_heatmap(image_slice(pyr.at(4), 0), heads.head, txt.data(), cfg.get_double("heatmap.window"),
                                  cfg.get_int("dop.roi_size"), cfg.get_int("dop.samples_per_bin"));
    return {bb, dp};
}

std::pair<double, double> pointing_rates(const ExperimentConfig& cfg, const Towers& towers, const dop::DopModel& heads,
                                         const data::Dataset& ds) {
    NoGradGuard guard;
    const auto targets = pointing_targets(ds);
    if (targets.empty()) return {0.0, 0.0};
    std::map<std::string, Tensor> text_emb;
    for (const auto& t : targets) {
        if (!text_emb.count(t.category))
            text_emb[t.category] = phrase_embedding(towers, "a " + t.category, cfg.get_int("text.max_len"));
    }
    const int chunk = 20;
    int hits_bb = 0, hits_dop = 0;
    std::size_t ti = 0;
    for (int start = 0; start < ds.size() && ti < targets.size(); start += chunk) {
        std::vector<int> rows;
        for (int i = start; i < std::min(ds.size(), start + chunk); ++i) rows.push_back(i);
        Tensor tokens = frozen_tokens(cfg, towers, ds.batch(rows));
        det::FeaturePyramid pyr = det::build_fpn(tokens, heads.fpn);
        for (; ti < targets.size() && targets[ti].image < start + static_cast<int>(rows.size()); ++ti) {
            const auto& t = targets[ti];
            const int local = t.image - start;
            auto txt = text_emb.at(t.category).data();
            Tensor bb = eval::backbone_heatmap(image_slice(tokens, local), towers.clip.image, txt);
            Tensor dp = eval::dop_heatmap(image_slice(pyr.at(4), local), heads.head, txt, cfg.get_double("heatmap.window"),
                                          cfg.get_int("dop.roi_size"), cfg.get_int("dop.samples_per_bin"));
            hits_bb += eval::pointing_hit(bb, t.box) ? 1 : 0;
            hits_dop += eval::pointing_hit(dp, t.box) ? 1 : 0;
        }
    }
    const double n = static_cast<double>(targets.size());
    return {hits_bb / n, hits_dop / n};
}

Metrics evaluate(const Context& ctx, const EvalOptions& opt) {
    write_snapshot(ctx);
    const auto& cfg = ctx.cfg;
    auto ds = data::Dataset::load(ctx.paths.data / "eval");
    Metrics m;
    if (opt.detection) {
        Detector d = load_detector(require_checkpoint(ctx.paths.detector, "finetune"));
        const auto dcfg = detector_config(d.cfg);
        const auto dopt = detect_options(cfg);
        std::vector<std::vector<eval::Detection>> dets;
        std::vector<std::vector<eval::GroundTruthBox>> gts;
        const int chunk = 20;
        std::size_t count = 0;
        for (int start = 0; start < ds.size(); start += chunk) {
            std::vector<int> rows;
            for (int i = start; i < std::min(ds.size(), start + chunk); ++i) rows.push_back(i);
            auto out = ovd::detect(ds.batch(rows), d.model, &d.frozen, d.table, dcfg, dopt);
            for (const auto& per_image : out) {
                std::vector<eval::Detection> v;
                for (const auto& sd : per_image) v.push_back({sd.box, sd.label, sd.s_ens});
                count += v.size();
                dets.push_back(std::move(v));
            }
        }
        for (const auto& r : ds.records) {
            std::vector<eval::GroundTruthBox> g;
            for (const auto& a : r.annotations) g.push_back({a.box, a.category});
            gts.push_back(std::move(g));
        }
        auto res = eval::eval_ap(dets, gts, d.table.names, d.table.novel);
        m["ap50"] = res.mean_ap50;
        m["ap"] = res.mean_ap;
        m["base_ap50"] = res.base_ap50;
        m["novel_ap50"] = res.novel_ap50;
        m["base_ap"] = res.base_ap;
        m["novel_ap"] = res.novel_ap;
        m["detections_per_image"] = static_cast<double>(count) / ds.size();
        ctx.info("evaluate: novel AP50 " + fmt(100 * res.novel_ap50, 2) + ", base AP50 " + fmt(100 * res.base_ap50, 2));
    }
    if (opt.retrieval || opt.pointing) {
        Towers t = load_towers(require_checkpoint(ctx.paths.clip, "pretrain-clip"), cfg);
        if (opt.retrieval) {
            NoGradGuard guard;
            std::vector<Tensor> img, txt;
            for (int start = 0; start < ds.size(); start += 50) {
                std::vector<int> rows;
                for (int i = start; i < std::min(ds.size(), start + 50); ++i) rows.push_back(i);
                auto b = make_batch(ds, rows, t.vocab, cfg.get_int("text.max_len"));
                img.push_back(vit::pool_image_embedding(frozen_tokens(cfg, t, b.images), t.clip.image));
                txt.push_back(text::encode_text(b.captions, t.clip.text));
            }
            Tensor I = concat_rows(img), T = concat_rows(txt);
            m["recall_at_1"] = eval::retrieval_recall(I, T, 1);
            m["recall_at_5"] = eval::retrieval_recall(I, T, 5);
        }
        if (opt.pointing) {
            Checkpoint dck = require_checkpoint(ctx.paths.dop, "pretrain-dop");
            Rng rng(0);
            dop::DopModel heads = init_dop_heads(cfg, rng);
            ParamList hp = named_params(heads);
            dck.get(hp);
            auto [bb, dp] = pointing_rates(cfg, t, heads, ds);
            m["pointing_backbone"] = bb;
            m["pointing_dop"] = dp;
        }
    }
    write_metrics(ctx.paths.reports, "metrics", m);
    return m;
}

Metrics render_heatmaps(const Context& ctx, const fs::path& dir) {
    write_snapshot(ctx);
    const auto& cfg = ctx.cfg;
    Towers t = load_towers(require_checkpoint(ctx.paths.clip, "pretrain-clip"), cfg);
    Checkpoint dck = require_checkpoint(ctx.paths.dop, "pretrain-dop");
    Rng rng(0);
    dop::DopModel heads = init_dop_heads(cfg, rng);
    ParamList hp = named_params(heads);
    dck.get(hp);
    auto ds = data::Dataset::load(ctx.paths.data / "eval");
    fs::create_directories(dir);
    const int count = std::min(cfg.get_int("heatmap.count"), ds.size());
    const std::string fixed = cfg.get_string("heatmap.phrase");
    int hits_bb = 0, hits_dop = 0, scored = 0;
    for (int i = 0; i < count; ++i) {
        const auto& rec = ds.records[i];
        if (fixed.empty() && rec.annotations.empty()) continue;
        const std::string phrase = fixed.empty() ? "a " + rec.annotations.front().category : fixed;
        auto [bb, dp] = heatmaps(cfg, t, heads, ds.images[i], phrase);
        if (fixed.empty()) {
            ++scored;
            hits_bb += eval::pointing_hit(bb, rec.annotations.front().box) ? 1 : 0;
            hits_dop += eval::pointing_hit(dp, rec.annotations.front().box) ? 1 : 0;
        }
        const auto& img = ds.images[i];
        for (const auto& [mode, map] : {std::pair<std::string, Tensor>{"backbone", bb}, {"dop", dp}}) {
            auto norm = eval::normalize_heatmap(map.data());
            const int h = map.dim(0), w = map.dim(1);
            std::vector<double> up(static_cast<std::size_t>(img.height) * img.width);
            data::Image overlay = img;
            for (int y = 0; y < img.height; ++y) {
                for (int x = 0; x < img.width; ++x) {
                    const double v = norm[(y * h / img.height) * w + (x * w / img.width)];
                    up[static_cast<std::size_t>(y) * img.width + x] = v;
                    auto* p = overlay.pixel(y, x);
                    p[0] = static_cast<std::uint8_t>(std::lround(0.5 * p[0] + 0.5 * 255 * v));
                    p[1] = static_cast<std::uint8_t>(std::lround(0.5 * p[1]));
                    p[2] = static_cast<std::uint8_t>(std::lround(0.5 * p[2] + 0.5 * 255 * (1 - v)));
                }
            }
            char name[64];
            std::snprintf(name, sizeof(name), "%03d_%s", i, mode.c_str());
            data::write_gray_png(dir / (std::string(name) + ".png"), img.height, img.width, up);
            data::write_png(dir / (std::string(name) + "_overlay.png"), overlay);
        }
        ctx.info("heatmap: image " + std::to_string(i) + " phrase \"" + phrase + "\"");
    }
    Metrics m{{"heatmap.images", static_cast<double>(count)}};
    if (scored > 0) {
        m["heatmap.pointing_backbone"] = static_cast<double>(hits_bb) / scored;
        m["heatmap.pointing_dop"] = static_cast<double>(hits_dop) / scored;
    }
    write_metrics(dir, "heatmap", m);
    return m;
}

namespace {

struct Variant {
    const char* name;
    bool dop;
    bool swl;
};
constexpr Variant kVariants[] = {{"baseline", false, false}, {"dop", true, false}, {"swl", false, true}, {"dop_swl", true, true}};

struct SeedResult {
    std::map<std::string, Metrics> variants;
    Metrics pointing;
};

SeedResult run_seed(const Context& base, int seed, const fs::path& dir) {
    Context c = base;
    c.cfg.set("seed", seed);
    c.paths = Paths::under(dir);
    const Logger parent = base.log;
    c.log = [parent, seed](const std::string& s) {
        if (parent) parent("[seed " + std::to_string(seed) + "] " + s);
    };
    gen_data(c);
    pretrain_clip(c);
    pretrain_dop(c);
    SeedResult r;
    for (const auto& v : kVariants) {
        Context vc = c;
        vc.cfg.set("finetune.init_from_dop", v.dop);
        vc.cfg.set("swl.finetuned", v.swl);
        vc.cfg.set("swl.frozen", v.swl);
        vc.paths.detector = dir / v.name / "detector.ckpt";
        vc.paths.reports = dir / v.name;
        vc.info("variant " + std::string(v.name));
        finetune(vc);
        r.variants[v.name] = evaluate(vc, {true, false, false});
        if (std::string(v.name) == "dop_swl") {
            Context nf = vc;
            nf.cfg.set("score.use_frozen", false);
            nf.paths.reports = dir / "dop_swl_no_frozen";
            r.variants["dop_swl_no_frozen"] = evaluate(nf, {true, false, false});
        }
    }
    Context pc = c;
    pc.paths.reports = dir / "pointing";
    r.pointing = evaluate(pc, {false, true, true});
    return r;
}

}  // namespace

Metrics ablate(const Context& ctx, const fs::path& out, int threads, std::vector<double>* seed_seconds) {
    const auto seeds = ctx.cfg.get_ints("ablate.seeds");
    Context base = ctx;
    base.paths = Paths::under(out);
    write_snapshot(base);
    std::vector<SeedResult> results(seeds.size());
    std::vector<std::exception_ptr> errors(seeds.size());
    std::vector<double> seconds(seeds.size(), 0.0);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < seeds.size(); i = next++) {
            const auto t0 = std::chrono::steady_clock::now();
            try {
                results[i] = run_seed(base, seeds[i], out / ("seed_" + std::to_string(seeds[i])));
                seconds[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const int n_threads = std::max(1, std::min<int>(threads, static_cast<int>(seeds.size())));
    std::vector<std::thread> pool;
    for (int i = 1; i < n_threads; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    if (seed_seconds) *seed_seconds = seconds;

    Metrics m;
    const double n = static_cast<double>(seeds.size());
    std::vector<std::string> names{"baseline", "dop", "swl", "dop_swl", "dop_swl_no_frozen"};
    for (const auto& name : names) {
        for (const char* key : {"novel_ap50", "base_ap50", "ap50"}) {
            double sum = 0;
            for (std::size_t i = 0; i < seeds.size(); ++i) {
                const double v = results[i].variants.at(name).at(key);
                m["seed" + std::to_string(seeds[i]) + "." + name + "." + key] = v;
                sum += v;
            }
            m[name + "." + key] = sum / n;
        }
    }
    for (const char* key : {"pointing_backbone", "pointing_dop", "recall_at_1"}) {
        double sum = 0;
        for (std::size_t i = 0; i < seeds.size(); ++i) {
            const double v = results[i].pointing.at(key);
            m["seed" + std::to_string(seeds[i]) + "." + key] = v;
            sum += v;
        }
        m[key] = sum / n;
    }
    m["delta.dop_swl_vs_baseline"] = m["dop_swl.novel_ap50"] - m["baseline.novel_ap50"];
    m["delta.dop_vs_baseline"] = m["dop.novel_ap50"] - m["baseline.novel_ap50"];
    m["delta.swl_vs_baseline"] = m["swl.novel_ap50"] - m["baseline.novel_ap50"];
    m["delta.no_frozen_vs_frozen"] = m["dop_swl_no_frozen.novel_ap50"] - m["dop_swl.novel_ap50"];
    m["delta.pointing_dop_vs_backbone"] = m["pointing_dop"] - m["pointing_backbone"];
    write_metrics(out, "ablation", m);

    // Human-readable comparison of the 2x2 grid.
    std::string table = "variant              novel AP50   base AP50   AP50\n";
    for (const auto& name : names) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-20s %10.2f %11.2f %6.2f\n", name.c_str(), 100 * m[name + ".novel_ap50"],
                      100 * m[name + ".base_ap50"], 100 * m[name + ".ap50"]);
        table += buf;
    }
    char buf[160];
    std::snprintf(buf, sizeof(buf), "pointing game: backbone %.3f  dop %.3f\n", m["pointing_backbone"], m["pointing_dop"]);
    table += buf;
    std::ofstream(out / "ablation_grid.txt", std::ios::binary) << table;
    ctx.info("\n" + table);
    return m;
}

}  // namespace dito::pipeline
