#pragma once

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dito/det_heads.hpp"
#include "dito/optim.hpp"
#include "dito/text.hpp"
#include "dito/vit.hpp"

namespace dito::dop {

inline constexpr double kMinTemperature = 0.005;

// Learnable temperature stored as log(tau).
struct ContrastiveHead {
    Tensor log_tau;

    static ContrastiveHead init(double tau = 0.1);
    double tau() const;
    // Projects tau back to >= kMinTemperature.
    void clamp();

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        f(prefix + "log_tau", log_tau);
    }
};

// Symmetric InfoNCE: (L_I2T + L_T2I) / 2 with logits image . text / tau.
// Rows are expected unit norm. log_tau is a one-element tensor.
Tensor info_nce(const Tensor& image_emb, const Tensor& text_emb, const Tensor& log_tau);
Tensor info_nce(const Tensor& image_emb, const Tensor& text_emb, double tau);

struct RegionSamplerConfig {
    std::map<int, int> n_per_level{{2, 16}, {3, 8}, {4, 4}, {5, 2}};
    double scale_lo = 0.2, scale_hi = 1.0;
    double aspect_lo = 0.5, aspect_hi = 2.0;
    std::uint64_t seed = 0;

    // Counts must be non-negative and non-increasing with level.
    void validate() const;
};

// n_per_level[level] boxes: u ~ U(scale), a ~ U(aspect), h = clamp(u sqrt(a),
// 0.05, 1), w = clamp(u / sqrt(a), 0.05, 1), placed uniformly inside the image.
std::vector<NormBox> sample_regions(const RegionSamplerConfig& cfg, int level, Rng& rng);
// Deterministic form drawing from a generator seeded by (cfg.seed, level).
std::vector<NormBox> sample_regions(const RegionSamplerConfig& cfg, int level);

enum class PoolingMode { MaxPerLevel, MeanPerLevel, MaxAllLevels, WholeImage };

PoolingMode parse_pooling(const std::string& s);
std::string to_string(PoolingMode m);

// Component-wise max or mean over each group of embedding rows, then L2
// normalization. Throws on an empty group.
Tensor pool_embeddings(const Tensor& embeddings, const RowGroups& groups, bool use_max);

// List form: groups by source level (per-level modes) or pools everything
// (MaxAllLevels, key 0). WholeImage pools per level like MaxPerLevel.
std::map<int, std::vector<double>> pool_roi_embeddings(std::span<const det::RegionEmbedding> embeddings,
                                                       PoolingMode mode);

// Phase-1 towers.
struct ClipModel {
    vit::ViTParams image;
    text::TextEncoderParams text;
    ContrastiveHead contrastive;

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        image.visit(f, prefix + "image.");
        text.visit(f, prefix + "text.");
        contrastive.visit(f, prefix + "contrastive.");
    }
};

// Phase-2 detector heads trained against the frozen towers.
struct DopModel {
    det::FpnParams fpn;
    det::RcnnHeadParams head;
    ContrastiveHead contrastive;

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        fpn.visit(f, prefix + "fpn.");
        head.visit(f, prefix + "head.");
        contrastive.visit(f, prefix + "contrastive.");
    }
};

struct Batch {
    Tensor images;  // (b, H, W, 3)
    text::TextBatch captions;
};

struct DopOptions {
    RegionSamplerConfig sampler;
    PoolingMode pooling = PoolingMode::MaxPerLevel;
    std::vector<int> levels{2, 3, 4, 5};
    int roi_size = 7;
    int samples_per_bin = 2;
};

// Phase-1 loss with cropped positional embeddings (one crop per image).
Tensor clip_loss(const Batch& batch, std::span<const NormBox> crops, const vit::ViTConfig& cfg, const ClipModel& model);

// Per-level DOP losses from precomputed frozen backbone tokens and caption
// embeddings. Returns one scalar per contrastive term (one per level, or one
// for MaxAllLevels). Regions are drawn from `rng`.
std::vector<Tensor> dop_level_losses(const Tensor& frozen_tokens, const Tensor& text_emb, const DopModel& heads,
                                     const DopOptions& opt, Rng& rng);

// Full DOP loss: frozen backbone and text tower (no gradients reach them),
// FPN, sampled RoIs, R-CNN head, pooling, per-level InfoNCE, equal-weight sum.
Tensor dop_loss(const Batch& batch, const vit::ViTConfig& cfg, const ClipModel& frozen, const DopModel& heads,
                const DopOptions& opt, Rng& rng);

struct ScheduleOptions {
    double lr = 1e-4;
    int warmup = 5000;
    int total = 30000;
    double weight_decay = 0.01;
    double clip_norm = 1.0;  // <= 0 disables clipping
};

class ClipTrainer {
public:
    // Without cropped_pe the whole positional table is resized onto each image.
    ClipTrainer(ClipModel& model, vit::ViTConfig cfg, ScheduleOptions sched, std::uint64_t seed,
                bool cropped_pe = true);
    // One AdamW step; returns the pre-step loss. Throws on a non-finite loss.
    double step(const Batch& batch);
    int step_count() const { return step_; }
    Rng& rng() { return rng_; }

private:
    ClipModel& model_;
    vit::ViTConfig cfg_;
    ScheduleOptions sched_;
    optim::AdamW opt_;
    Rng rng_;
    bool cropped_pe_;
    int step_ = 0;
};

class DopTrainer {
public:
    DopTrainer(const ClipModel& frozen, DopModel& heads, vit::ViTConfig cfg, DopOptions opt, ScheduleOptions sched,
               std::uint64_t seed);
    double step(const Batch& batch);
    int step_count() const { return step_; }
    Rng& rng() { return rng_; }

private:
    const ClipModel& frozen_;
    DopModel& heads_;
    vit::ViTConfig cfg_;
    DopOptions opt_;
    ScheduleOptions sched_;
    optim::AdamW opt_adam_;
    Rng rng_;
    int step_ = 0;
};

}  // namespace dito::dop
