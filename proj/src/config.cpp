#include "dito/config.hpp"

#include <fstream>
#include <stdexcept>

namespace dito {

using nlohmann::json;

namespace {

const json& default_tree() {
    static const json tree = json::parse(R"({
  "seed": 0,
  "deterministic": true,
  "data": {
    "image_size": 64,
    "pretrain_images": 2000,
    "finetune_images": 400,
    "eval_images": 200,
    "colors": ["red", "green", "blue"],
    "shapes": ["circle", "square", "triangle", "cross"],
    "novel": ["green circle", "green square", "blue triangle", "red cross"],
    "objects_min": 1,
    "objects_max": 3,
    "size_min": 12,
    "size_max": 26
  },
  "vit": {
    "patch_size": 8,
    "embed_dim": 64,
    "depth": 4,
    "heads": 4,
    "mlp_ratio": 4,
    "joint_dim": 64,
    "grid": 2,
    "global_layers": 1,
    "pretrain_grid": 1,
    "pretrain_global_layers": 1
  },
  "text": {"dim": 64, "layers": 2, "heads": 4, "max_len": 24},
  "clip": {
    "steps": 500, "batch": 32, "lr": 0.001, "warmup": 50, "weight_decay": 0.01, "clip_norm": 1.0,
    "tau_init": 0.1, "pe_crop": true
  },
  "dop": {
    "steps": 150, "batch": 32, "lr": 0.001, "warmup": 20, "weight_decay": 0.01, "clip_norm": 1.0,
    "tau_init": 0.1, "pooling": "max_per_level", "levels": [2, 3, 4, 5], "n_per_level": [16, 8, 4, 2],
    "scale_lo": 0.2, "scale_hi": 1.0, "aspect_lo": 0.5, "aspect_hi": 2.0, "roi_size": 7, "samples_per_bin": 2
  },
  "fpn": {"channels": 32},
  "head": {"hidden": 128},
  "rpn": {
    "anchor_scale": 4.0, "batch": 64, "pos_iou": 0.7, "neg_iou": 0.3, "train_top_k": 64, "test_top_k": 100,
    "nms_iou": 0.7, "pre_nms_per_level": 200
  },
  "finetune": {
    "steps": 300, "batch": 8, "lr": 0.02, "backbone_lr_ratio": 0.6, "momentum": 0.9, "weight_decay": 0.0001,
    "warmup": 30, "milestones": [0.8, 0.9, 0.95], "decay": 0.1, "clip_norm": 10.0, "rois_per_image": 32,
    "pos_fraction": 0.25, "fg_iou": 0.5, "canonical_px": 32.0, "init_from_dop": true
  },
  "swl": {"q": 0.5, "finetuned": true, "frozen": true},
  "score": {
    "det_temp": 0.05, "vlm_temp": 0.01, "alpha": 0.35, "beta": 0.65, "thresh": 0.01, "nms_iou": 0.5,
    "max_dets": 20, "use_frozen": true
  },
  "heatmap": {"window": 2.0, "phrase": "", "count": 8},
  "ablate": {"seeds": [0, 1, 2]}
})");
    return tree;
}

void flatten(const json& node, const std::string& prefix, std::map<std::string, json>& out) {
    if (node.is_object()) {
        for (const auto& [k, v] : node.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
    } else {
        out[prefix] = node;
    }
}

std::string type_name(const json& v) {
    if (v.is_boolean()) return "boolean";
    if (v.is_number_integer()) return "integer";
    if (v.is_number()) return "number";
    if (v.is_string()) return "string";
    if (v.is_array()) return "list";
    return v.type_name();
}

bool element_compatible(const json& want, const json& got) {
    if (want.is_boolean()) return got.is_boolean();
    if (want.is_number_integer()) return got.is_number_integer();
    if (want.is_number()) return got.is_number();
    if (want.is_string()) return got.is_string();
    return false;
}

// Returns the value to store, converted to the default's type where lossless.
json coerce(const std::string& key, const json& want, const json& got) {
    if (want.is_array()) {
        if (!got.is_array()) throw std::invalid_argument("config: key '" + key + "' expects a list, got " + type_name(got));
        if (want.empty()) return got;
        json out = json::array();
        for (const auto& e : got) {
            if (!element_compatible(want.front(), e)) {
                throw std::invalid_argument("config: key '" + key + "' expects a list of " + type_name(want.front()) +
                                            ", got element " + e.dump());
            }
            out.push_back(want.front().is_number_float() ? json(e.get<double>()) : e);
        }
        return out;
    }
    if (!element_compatible(want, got)) {
        throw std::invalid_argument("config: key '" + key + "' expects " + type_name(want) + ", got " + type_name(got) +
                                    " " + got.dump());
    }
    return want.is_number_float() ? json(got.get<double>()) : got;
}

}  // namespace

ExperimentConfig ExperimentConfig::defaults() {
    ExperimentConfig c;
    flatten(default_tree(), "", c.values_);
    return c;
}

ExperimentConfig ExperimentConfig::from_json(const json& nested) {
    if (!nested.is_object()) throw std::invalid_argument("config: top level must be a JSON object");
    ExperimentConfig c = defaults();
    std::map<std::string, json> given;
    flatten(nested, "", given);
    for (const auto& [k, v] : given) c.set(k, v);
    c.validate();
    return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot read " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config: " + path.string() + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

void ExperimentConfig::set(const std::string& key, const json& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
    it->second = coerce(key, it->second, value);
}

void ExperimentConfig::set_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) {
        throw std::invalid_argument("config: override '" + assignment + "' must look like key=value");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    const json& current = at(key);
    if (current.is_string()) {
        set(key, json(raw));
        return;
    }
    json v;
    try {
        v = json::parse(raw);
    } catch (const json::parse_error&) {
        throw std::invalid_argument("config: value '" + raw + "' for key '" + key + "' is not valid (expects " +
                                    type_name(current) + ")");
    }
    set(key, v);
}

const json& ExperimentConfig::at(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("config: unknown key '" + key + "'");
    return it->second;
}

int ExperimentConfig::get_int(const std::string& key) const { return at(key).get<int>(); }
double ExperimentConfig::get_double(const std::string& key) const { return at(key).get<double>(); }
bool ExperimentConfig::get_bool(const std::string& key) const { return at(key).get<bool>(); }
std::string ExperimentConfig::get_string(const std::string& key) const { return at(key).get<std::string>(); }
std::vector<int> ExperimentConfig::get_ints(const std::string& key) const { return at(key).get<std::vector<int>>(); }
std::vector<double> ExperimentConfig::get_doubles(const std::string& key) const {
    return at(key).get<std::vector<double>>();
}
std::vector<std::string> ExperimentConfig::get_strings(const std::string& key) const {
    return at(key).get<std::vector<std::string>>();
}

json ExperimentConfig::nested() const {
    json out = json::object();
    for (const auto& [k, v] : values_) out[json::json_pointer("/" + [&] {
        std::string p = k;
        for (char& ch : p)
            if (ch == '.') ch = '/';
        return p;
    }())] = v;
    return out;
}

std::string ExperimentConfig::dump() const { return nested().dump(2) + "\n"; }

namespace {

void require(bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw std::invalid_argument("config: " + key + " " + what);
}

}  // namespace

void ExperimentConfig::validate() const {
    require(get_int("seed") >= 0, "seed", "must be non-negative");
    for (const char* k : {"data.pretrain_images", "data.finetune_images", "data.eval_images"}) {
        require(get_int(k) >= 1, k, "must be at least 1");
    }
    for (auto split : {data::Split::Pretrain, data::Split::Finetune, data::Split::Eval}) {
        synthetic_spec(*this, split, 0).validate();
    }
    pretrain_vit_config(*this).validate();
    const auto det_vit = detection_vit_config(*this);
    det_vit.validate();
    require(det_vit.token_side() >= 8 && det_vit.token_side() % 2 == 0, "data.image_size",
            "must give an even token grid of side >= 8 for the feature pyramid");
    require(get_int("text.dim") % get_int("text.heads") == 0, "text.heads", "must divide text.dim");
    require(get_int("text.layers") >= 1 && get_int("text.max_len") >= 4, "text.layers", "and text.max_len too small");
    for (const char* stage : {"clip", "dop"}) {
        const std::string s = stage;
        require(get_int(s + ".steps") >= 0, s + ".steps", "must be non-negative");
        require(get_int(s + ".batch") >= 2, s + ".batch", "must be at least 2 for a contrastive loss");
        require(get_double(s + ".lr") > 0, s + ".lr", "must be positive");
        require(get_int(s + ".warmup") >= 0, s + ".warmup", "must be non-negative");
        require(get_double(s + ".tau_init") >= dop::kMinTemperature, s + ".tau_init", "must be >= 0.005");
    }
    dop::parse_pooling(get_string("dop.pooling"));
    dop_options(*this, 0).sampler.validate();
    for (int l : get_ints("dop.levels")) require(l >= 2 && l <= 5, "dop.levels", "entries must be in 2..5");
    require(get_int("fpn.channels") >= 4, "fpn.channels", "must be at least 4");
    require(get_int("head.hidden") >= 4, "head.hidden", "must be at least 4");
    require(get_double("rpn.neg_iou") < get_double("rpn.pos_iou"), "rpn.neg_iou", "must be below rpn.pos_iou");
    require(get_int("rpn.train_top_k") >= 1 && get_int("rpn.test_top_k") >= 1, "rpn.test_top_k", "must be >= 1");
    require(get_int("finetune.steps") >= 0, "finetune.steps", "must be non-negative");
    require(get_int("finetune.batch") >= 1, "finetune.batch", "must be at least 1");
    require(get_double("finetune.lr") > 0, "finetune.lr", "must be positive");
    require(get_double("finetune.backbone_lr_ratio") >= 0, "finetune.backbone_lr_ratio", "must be non-negative");
    require(get_int("finetune.rois_per_image") >= 1, "finetune.rois_per_image", "must be at least 1");
    const double pf = get_double("finetune.pos_fraction");
    require(pf > 0 && pf <= 1, "finetune.pos_fraction", "must lie in (0, 1]");
    for (double m : get_doubles("finetune.milestones")) require(m > 0 && m <= 1, "finetune.milestones", "must lie in (0, 1]");
    swl::SwlConfig{get_double("swl.q"), true, true}.validate();
    detect_options(*this).ensemble.validate();
    require(get_double("score.det_temp") > 0 && get_double("score.vlm_temp") > 0, "score.det_temp",
            "and score.vlm_temp must be positive");
    require(get_int("score.max_dets") >= 1, "score.max_dets", "must be at least 1");
    require(get_double("heatmap.window") > 0, "heatmap.window", "must be positive");
    require(!get_ints("ablate.seeds").empty(), "ablate.seeds", "must list at least one seed");
}

data::SyntheticSpec synthetic_spec(const ExperimentConfig& cfg, data::Split split, std::uint64_t seed) {
    data::SyntheticSpec s;
    s.seed = seed;
    s.split = split;
    s.image_size = cfg.get_int("data.image_size");
    s.num_images = cfg.get_int(split == data::Split::Pretrain   ? "data.pretrain_images"
                               : split == data::Split::Finetune ? "data.finetune_images"
                                                                : "data.eval_images");
    s.colors = cfg.get_strings("data.colors");
    s.shapes = cfg.get_strings("data.shapes");
    s.novel_names = cfg.get_strings("data.novel");
    s.objects_min = cfg.get_int("data.objects_min");
    s.objects_max = cfg.get_int("data.objects_max");
    s.size_min = cfg.get_int("data.size_min");
    s.size_max = cfg.get_int("data.size_max");
    return s;
}

namespace {

vit::ViTConfig vit_common(const ExperimentConfig& cfg) {
    vit::ViTConfig v;
    v.patch_size = cfg.get_int("vit.patch_size");
    v.embed_dim = cfg.get_int("vit.embed_dim");
    v.depth = cfg.get_int("vit.depth");
    v.heads = cfg.get_int("vit.heads");
    v.mlp_ratio = cfg.get_int("vit.mlp_ratio");
    v.joint_dim = cfg.get_int("vit.joint_dim");
    v.image_size = cfg.get_int("data.image_size");
    return v;
}

dop::ScheduleOptions schedule(const ExperimentConfig& cfg, const std::string& stage) {
    return {cfg.get_double(stage + ".lr"), cfg.get_int(stage + ".warmup"), cfg.get_int(stage + ".steps"),
            cfg.get_double(stage + ".weight_decay"), cfg.get_double(stage + ".clip_norm")};
}

}  // namespace

vit::ViTConfig pretrain_vit_config(const ExperimentConfig& cfg) {
    auto v = vit_common(cfg);
    v.grid = cfg.get_int("vit.pretrain_grid");
    v.global_layers = cfg.get_int("vit.pretrain_global_layers");
    return v;
}

vit::ViTConfig detection_vit_config(const ExperimentConfig& cfg) {
    auto v = vit_common(cfg);
    v.grid = cfg.get_int("vit.grid");
    v.global_layers = cfg.get_int("vit.global_layers");
    return v;
}

text::TextConfig text_config(const ExperimentConfig& cfg, int vocab_size) {
    text::TextConfig t;
    t.vocab_size = vocab_size;
    t.dim = cfg.get_int("text.dim");
    t.layers = cfg.get_int("text.layers");
    t.heads = cfg.get_int("text.heads");
    t.max_len = cfg.get_int("text.max_len");
    t.joint_dim = cfg.get_int("vit.joint_dim");
    return t;
}

dop::ScheduleOptions clip_schedule(const ExperimentConfig& cfg) { return schedule(cfg, "clip"); }
dop::ScheduleOptions dop_schedule(const ExperimentConfig& cfg) { return schedule(cfg, "dop"); }

dop::DopOptions dop_options(const ExperimentConfig& cfg, std::uint64_t seed) {
    dop::DopOptions o;
    o.pooling = dop::parse_pooling(cfg.get_string("dop.pooling"));
    o.levels = cfg.get_ints("dop.levels");
    o.roi_size = cfg.get_int("dop.roi_size");
    o.samples_per_bin = cfg.get_int("dop.samples_per_bin");
    const auto n = cfg.get_ints("dop.n_per_level");
    if (n.size() != 4) throw std::invalid_argument("config: dop.n_per_level needs 4 counts (levels 2..5)");
    o.sampler.n_per_level.clear();
    for (int i = 0; i < 4; ++i) o.sampler.n_per_level[2 + i] = n[i];
    o.sampler.scale_lo = cfg.get_double("dop.scale_lo");
    o.sampler.scale_hi = cfg.get_double("dop.scale_hi");
    o.sampler.aspect_lo = cfg.get_double("dop.aspect_lo");
    o.sampler.aspect_hi = cfg.get_double("dop.aspect_hi");
    o.sampler.seed = seed;
    return o;
}

ovd::DetectorConfig detector_config(const ExperimentConfig& cfg) {
    ovd::DetectorConfig d;
    d.vit = detection_vit_config(cfg);
    d.swl = {cfg.get_double("swl.q"), cfg.get_bool("swl.finetuned"), cfg.get_bool("swl.frozen")};
    d.roi_size = cfg.get_int("dop.roi_size");
    d.samples_per_bin = cfg.get_int("dop.samples_per_bin");
    d.canonical_px = cfg.get_double("finetune.canonical_px");
    d.anchor_scale = cfg.get_double("rpn.anchor_scale");
    d.det_temp = cfg.get_double("score.det_temp");
    d.vlm_temp = cfg.get_double("score.vlm_temp");
    const double nms = cfg.get_double("rpn.nms_iou");
    const int pre = cfg.get_int("rpn.pre_nms_per_level");
    d.train_proposals = {cfg.get_int("rpn.train_top_k"), nms, pre, 1e-3, d.anchor_scale};
    d.test_proposals = {cfg.get_int("rpn.test_top_k"), nms, pre, 1e-3, d.anchor_scale};
    d.rpn_batch = cfg.get_int("rpn.batch");
    d.rpn_pos_iou = cfg.get_double("rpn.pos_iou");
    d.rpn_neg_iou = cfg.get_double("rpn.neg_iou");
    d.rois_per_image = cfg.get_int("finetune.rois_per_image");
    d.roi_pos_fraction = cfg.get_double("finetune.pos_fraction");
    d.fg_iou = cfg.get_double("finetune.fg_iou");
    return d;
}

ovd::FinetuneSchedule finetune_schedule(const ExperimentConfig& cfg) {
    ovd::FinetuneSchedule s;
    s.lr = cfg.get_double("finetune.lr");
    s.backbone_lr_ratio = cfg.get_double("finetune.backbone_lr_ratio");
    s.momentum = cfg.get_double("finetune.momentum");
    s.weight_decay = cfg.get_double("finetune.weight_decay");
    s.warmup = cfg.get_int("finetune.warmup");
    s.total = cfg.get_int("finetune.steps");
    s.milestones = cfg.get_doubles("finetune.milestones");
    s.decay = cfg.get_double("finetune.decay");
    s.clip_norm = cfg.get_double("finetune.clip_norm");
    return s;
}

ovd::DetectOptions detect_options(const ExperimentConfig& cfg) {
    ovd::DetectOptions o;
    o.ensemble = {cfg.get_double("score.alpha"), cfg.get_double("score.beta")};
    o.score_thresh = cfg.get_double("score.thresh");
    o.nms_iou = cfg.get_double("score.nms_iou");
    o.max_dets = cfg.get_int("score.max_dets");
    o.use_frozen = cfg.get_bool("score.use_frozen");
    return o;
}

}  // namespace dito
