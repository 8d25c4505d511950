#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dito/det_heads.hpp"
#include "dito/optim.hpp"
#include "dito/swl.hpp"
#include "dito/text.hpp"
#include "dito/vit.hpp"

namespace dito::ovd {

// Category text embeddings plus a learnable background row.
struct CategoryTable {
    std::vector<std::string> names;
    std::vector<bool> novel;             // split tag per name
    std::vector<std::string> templates;  // prompt templates, "{}" marks the name
    Tensor embeddings;                   // (K, d) unit rows, fixed
    Tensor background;                   // (1, d) learnable, normalized on use

    int size() const { return static_cast<int>(names.size()); }
    int dim() const { return embeddings.dim(1); }
    std::vector<int> base_indices() const;
    int index_of(const std::string& name) const;
    // Throws when split tags are missing or rows are not unit norm.
    void validate() const;
};

// Replaces "{}" in tmpl with name.
std::string fill_template(const std::string& tmpl, const std::string& name);

// Encodes every template instantiation per name, averages, re-normalizes.
// The background row starts as a fixed unit vector orthogonalized against
// the category rows.
CategoryTable category_embeddings(const std::vector<std::string>& names, const std::vector<bool>& novel,
                                  const std::vector<std::string>& templates, const text::Vocabulary& vocab,
                                  const text::TextEncoderParams& encoder);

enum class ScoreMode { Train, Test };

// Classifier rows: background first, then base categories (Train) or all
// categories (Test). Differentiable in the background row.
Tensor classifier_rows(const CategoryTable& table, ScoreMode mode);
// cos(r, rows) / temp for unit-norm region embeddings r (n, d).
Tensor detection_logits(const Tensor& region_emb, const CategoryTable& table, ScoreMode mode, double temp);
// Softmax of detection_logits: (n, 1 + |C_B|) or (n, 1 + |C_B u C_N|).
Tensor detection_score(const Tensor& region_emb, const CategoryTable& table, ScoreMode mode, double temp);

// VLM score over all categories (no background) for boxes on the last
// backbone map (b, h, w, C): RoI-Align, mean over bins, image projection,
// L2 normalize, cosine, softmax with temp. Returns (n, K).
Tensor vlm_score(std::span<const NormBox> boxes, std::span<const int> image_index, const Tensor& tokens,
                 const vit::ViTParams& projection_owner, const CategoryTable& table, double temp, int roi_size = 7,
                 int samples_per_bin = 2);

struct EnsembleParams {
    double alpha = 0.35;  // base exponent on p
    double beta = 0.65;   // novel exponent on p
    void validate() const;
};

// s_k = z_k^(1-alpha) p_k^alpha (base), z_k^(1-beta) p_k^beta (novel);
// s_0 = p_0 for background. p has 1 + K entries, z has K.
std::vector<double> ensemble_score(std::span<const double> p, std::span<const double> z, const EnsembleParams& params,
                                   const std::vector<bool>& novel);

struct ScoredDetection {
    NormBox box;
    int category = -1;
    std::string label;
    double p = 0.0;
    double z = 0.0;
    double s_ens = 0.0;
};

struct DetectorModel {
    vit::ViTParams backbone;  // finetuned copy
    det::FpnParams fpn;
    det::RpnParams rpn;
    det::RcnnHeadParams head;

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        backbone.visit(f, prefix + "backbone.");
        fpn.visit(f, prefix + "fpn.");
        rpn.visit(f, prefix + "rpn.");
        head.visit(f, prefix + "head.");
    }
};

struct DetectorConfig {
    vit::ViTConfig vit;
    swl::SwlConfig swl;
    int roi_size = 7;
    int samples_per_bin = 2;
    double canonical_px = 32.0;
    double anchor_scale = 4.0;
    double det_temp = 0.01;
    double vlm_temp = 0.01;

    det::ProposalOptions train_proposals{64, 0.7, 200, 1e-3, 4.0};
    det::ProposalOptions test_proposals{100, 0.7, 200, 1e-3, 4.0};
    int rpn_batch = 64;
    double rpn_pos_iou = 0.7;
    double rpn_neg_iou = 0.3;
    int rois_per_image = 128;
    double roi_pos_fraction = 0.25;
    double fg_iou = 0.5;
};

// Backbone tokens (b, s, s, C) for images, with shifted-window learning when
// `use_swl` (shift from the config's q and window cell).
Tensor backbone_tokens(const Tensor& images, const vit::ViTConfig& cfg, const vit::ViTParams& params, bool use_swl,
                       double q);

struct GroundTruth {
    std::vector<NormBox> boxes;
    std::vector<int> labels;  // category index into the CategoryTable
};

struct FinetuneLosses {
    double total = 0, rpn_cls = 0, rpn_reg = 0, cls = 0, reg = 0;
};

struct FinetuneSchedule {
    double lr = 0.02;
    double backbone_lr_ratio = 0.6;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int warmup = 1000;
    int total = 36800;
    std::vector<double> milestones{0.8, 0.9, 0.95};
    double decay = 0.1;
    double clip_norm = 10.0;
};

class FinetuneTrainer {
public:
    FinetuneTrainer(DetectorModel& model, CategoryTable& table, DetectorConfig cfg, FinetuneSchedule sched,
                    std::uint64_t seed);
    // Loss terms without an optimizer step.
    Tensor loss(const Tensor& images, std::span<const GroundTruth> gts, FinetuneLosses* parts = nullptr);
    FinetuneLosses step(const Tensor& images, std::span<const GroundTruth> gts);
    int step_count() const { return step_; }
    Rng& rng() { return rng_; }

private:
    DetectorModel& model_;
    CategoryTable& table_;
    DetectorConfig cfg_;
    FinetuneSchedule sched_;
    optim::Sgd opt_;
    Rng rng_;
    int step_ = 0;
};

struct DetectOptions {
    EnsembleParams ensemble;
    double score_thresh = 0.05;
    double nms_iou = 0.5;
    int max_dets = 20;
    // With no frozen backbone the VLM score reads the finetuned backbone.
    bool use_frozen = true;
};

// Full inference for a batch of images (b, H, W, 3); returns detections per
// image sorted by descending s_ens.
std::vector<std::vector<ScoredDetection>> detect(const Tensor& images, const DetectorModel& model,
                                                 const vit::ViTParams* frozen, const CategoryTable& table,
                                                 const DetectorConfig& cfg, const DetectOptions& opt);

// Detections from precomputed proposals, used by detect() and by tests.
std::vector<ScoredDetection> score_proposals(std::span<const NormBox> proposals, std::span<const double> p_rows,
                                             std::span<const double> z_rows, std::span<const NormBox> refined,
                                             const CategoryTable& table, const DetectOptions& opt);

}  // namespace dito::ovd
