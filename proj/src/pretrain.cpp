#include "dito/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dito/roi_align.hpp"

namespace dito::dop {

ContrastiveHead ContrastiveHead::init(double tau) { return {Tensor::scalar(std::log(tau), true)}; }

double ContrastiveHead::tau() const { return std::exp(log_tau.item()); }

void ContrastiveHead::clamp() {
    auto v = log_tau.mutable_data();
    v[0] = std::max(v[0], std::log(kMinTemperature));
}

namespace {

Tensor info_nce_logits(const Tensor& logits) {
    for (double v : logits.data()) {
        if (!std::isfinite(v)) throw std::domain_error("info_nce: non-finite logits");
    }
    const int b = logits.rows();
    std::vector<int> diag(b);
    std::iota(diag.begin(), diag.end(), 0);
    Tensor i2t = cross_entropy_rows(logits, diag);
    Tensor t2i = cross_entropy_rows(transpose(logits), diag);
    return scale(add(i2t, t2i), 0.5);
}

void check_pair(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape() != b.shape() || a.rows() < 1) {
        throw std::invalid_argument("info_nce: need matching (B, d) embeddings with B >= 1, got " +
                                    shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
}

}  // namespace

Tensor info_nce(const Tensor& image_emb, const Tensor& text_emb, const Tensor& log_tau) {
    check_pair(image_emb, text_emb);
    return info_nce_logits(mul_scalar(matmul_nt(image_emb, text_emb), exp(scale(log_tau, -1.0))));
}

Tensor info_nce(const Tensor& image_emb, const Tensor& text_emb, double tau) {
    check_pair(image_emb, text_emb);
    if (!(tau > 0)) throw std::invalid_argument("info_nce: tau must be positive");
    return info_nce_logits(scale(matmul_nt(image_emb, text_emb), 1.0 / tau));
}

void RegionSamplerConfig::validate() const {
    int prev = -1;
    bool first = true;
    for (const auto& [level, n] : n_per_level) {
        if (level < 2 || level > 5) throw std::invalid_argument("sampler: level " + std::to_string(level) + " outside 2..5");
        if (n < 0) throw std::invalid_argument("sampler: negative region count");
        if (!first && n > prev) throw std::invalid_argument("sampler: region counts must not increase with level");
        prev = n;
        first = false;
    }
    if (!(0 < scale_lo && scale_lo <= scale_hi) || !(0 < aspect_lo && aspect_lo <= aspect_hi)) {
        throw std::invalid_argument("sampler: invalid scale or aspect range");
    }
}

std::vector<NormBox> sample_regions(const RegionSamplerConfig& cfg, int level, Rng& rng) {
    if (level < 2 || level > 5) throw std::invalid_argument("sample_regions: level must be in {2,3,4,5}");
    auto it = cfg.n_per_level.find(level);
    const int n = it == cfg.n_per_level.end() ? 0 : it->second;
    std::vector<NormBox> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        const double u = rng.uniform(cfg.scale_lo, cfg.scale_hi);
        const double a = rng.uniform(cfg.aspect_lo, cfg.aspect_hi);
        const double h = std::clamp(u * std::sqrt(a), 0.05, 1.0);
        const double w = std::clamp(u / std::sqrt(a), 0.05, 1.0);
        const double cy = rng.uniform(h / 2, 1.0 - h / 2);
        const double cx = rng.uniform(w / 2, 1.0 - w / 2);
        NormBox b{std::max(0.0, cx - w / 2), std::max(0.0, cy - h / 2), std::min(1.0, cx + w / 2),
                  std::min(1.0, cy + h / 2)};
        out.push_back(b);
    }
    return out;
}

std::vector<NormBox> sample_regions(const RegionSamplerConfig& cfg, int level) {
    Rng rng(cfg.seed * 1000003ULL + static_cast<std::uint64_t>(level));
    return sample_regions(cfg, level, rng);
}

PoolingMode parse_pooling(const std::string& s) {
    if (s == "max_per_level") return PoolingMode::MaxPerLevel;
    if (s == "mean_per_level") return PoolingMode::MeanPerLevel;
    if (s == "max_all_levels") return PoolingMode::MaxAllLevels;
    if (s == "whole_image") return PoolingMode::WholeImage;
    throw std::invalid_argument("unknown pooling mode '" + s +
                                "' (expected max_per_level, mean_per_level, max_all_levels or whole_image)");
}

std::string to_string(PoolingMode m) {
    switch (m) {
        case PoolingMode::MaxPerLevel: return "max_per_level";
        case PoolingMode::MeanPerLevel: return "mean_per_level";
        case PoolingMode::MaxAllLevels: return "max_all_levels";
        case PoolingMode::WholeImage: return "whole_image";
    }
    return "?";
}

Tensor pool_embeddings(const Tensor& embeddings, const RowGroups& groups, bool use_max) {
    return l2_normalize_rows(use_max ? group_max(embeddings, groups) : group_mean(embeddings, groups));
}

std::map<int, std::vector<double>> pool_roi_embeddings(std::span<const det::RegionEmbedding> embeddings,
                                                       PoolingMode mode) {
    if (embeddings.empty()) throw std::invalid_argument("pool_roi_embeddings: empty group");
    const int d = static_cast<int>(embeddings.front().embedding.size());
    std::map<int, std::vector<int>> members;
    std::vector<double> flat;
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        if (static_cast<int>(embeddings[i].embedding.size()) != d) throw std::invalid_argument("pool_roi_embeddings: dimension mismatch");
        flat.insert(flat.end(), embeddings[i].embedding.begin(), embeddings[i].embedding.end());
        const int key = mode == PoolingMode::MaxAllLevels ? 0 : embeddings[i].source_level;
        members[key].push_back(static_cast<int>(i));
    }
    RowGroups groups;
    std::vector<int> keys;
    for (const auto& [k, rows] : members) {
        groups.add(rows);
        keys.push_back(k);
    }
    NoGradGuard guard;
    Tensor pooled = pool_embeddings(Tensor::from({static_cast<int>(embeddings.size()), d}, flat), groups,
                                    mode != PoolingMode::MeanPerLevel);
    std::map<int, std::vector<double>> out;
    for (std::size_t g = 0; g < keys.size(); ++g) {
        auto row = pooled.data().subspan(g * d, d);
        out[keys[g]] = std::vector<double>(row.begin(), row.end());
    }
    return out;
}

Tensor clip_loss(const Batch& batch, std::span<const NormBox> crops, const vit::ViTConfig& cfg, const ClipModel& model) {
    Tensor tokens = vit::vit_forward(vit::patchify(batch.images, cfg, model.image, crops), cfg, model.image);
    Tensor img = vit::pool_image_embedding(tokens, model.image);
    Tensor txt = text::encode_text(batch.captions, model.text);
    return info_nce(img, txt, model.contrastive.log_tau);
}

std::vector<Tensor> dop_level_losses(const Tensor& frozen_tokens, const Tensor& text_emb, const DopModel& heads,
                                     const DopOptions& opt, Rng& rng) {
    const int b = frozen_tokens.dim(0);
    if (text_emb.rows() != b) throw std::invalid_argument("dop_loss: one caption embedding per image required");
    det::FeaturePyramid pyr = det::build_fpn(frozen_tokens, heads.fpn);

    std::vector<Tensor> level_emb;   // per level (n_l, joint)
    std::vector<RowGroups> level_groups;  // per level, one group per image
    for (int level : opt.levels) {
        std::vector<NormBox> boxes;
        std::vector<int> image;
        RowGroups groups;
        std::vector<int> rows;
        for (int i = 0; i < b; ++i) {
            auto bx = opt.pooling == PoolingMode::WholeImage ? std::vector<NormBox>{NormBox::whole()}
                                                             : sample_regions(opt.sampler, level, rng);
            if (bx.empty()) throw std::invalid_argument("dop_loss: no regions sampled for level " + std::to_string(level));
            rows.clear();
            for (const auto& box : bx) {
                rows.push_back(static_cast<int>(boxes.size()));
                boxes.push_back(box);
                image.push_back(i);
            }
            groups.add(rows);
        }
        Tensor feats = roi_align_batched(pyr.at(level), boxes, image, opt.roi_size, opt.samples_per_bin);
        level_emb.push_back(det::rcnn_embed(det::rcnn_hidden(feats, heads.head), heads.head));
        level_groups.push_back(std::move(groups));
    }

    std::vector<Tensor> losses;
    const bool use_max = opt.pooling != PoolingMode::MeanPerLevel;
    if (opt.pooling == PoolingMode::MaxAllLevels) {
        RowGroups all;
        int offset = 0;
        std::vector<std::vector<int>> per_image(b);
        for (std::size_t l = 0; l < level_emb.size(); ++l) {
            for (int i = 0; i < b; ++i)
                for (int r : level_groups[l].group(i)) per_image[i].push_back(r + offset);
            offset += level_emb[l].rows();
        }
        for (const auto& rows : per_image) all.add(rows);
        Tensor pooled = pool_embeddings(concat_rows(level_emb), all, true);
        losses.push_back(info_nce(pooled, text_emb, heads.contrastive.log_tau));
    } else {
        for (std::size_t l = 0; l < level_emb.size(); ++l) {
            Tensor pooled = pool_embeddings(level_emb[l], level_groups[l], use_max);
            losses.push_back(info_nce(pooled, text_emb, heads.contrastive.log_tau));
        }
    }
    return losses;
}

Tensor dop_loss(const Batch& batch, const vit::ViTConfig& cfg, const ClipModel& frozen, const DopModel& heads,
                const DopOptions& opt, Rng& rng) {
    Tensor tokens, text_emb;
    {
        NoGradGuard guard;
        tokens = vit::vit_forward(vit::patchify(batch.images, cfg, frozen.image), cfg, frozen.image).detach();
        text_emb = text::encode_text(batch.captions, frozen.text).detach();
    }
    auto losses = dop_level_losses(tokens, text_emb, heads, opt, rng);
    Tensor total = losses.front();
    for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
    return total;
}

namespace {

double finish_step(Tensor& loss, ParamList& params, optim::AdamW& opt, const ScheduleOptions& sched, int step,
                   const char* stage) {
    const double value = loss.item();
    if (!std::isfinite(value)) {
        throw std::runtime_error(std::string(stage) + ": non-finite loss at step " + std::to_string(step) +
                                 " (try a lower learning rate or check the input batch)");
    }
    optim::zero_grads(params);
    loss.backward();
    if (sched.clip_norm > 0) optim::clip_grad_norm(params, sched.clip_norm);
    opt.step(optim::warmup_linear_decay(step, sched.warmup, sched.total, sched.lr));
    optim::zero_grads(params);
    return value;
}

}  // namespace

ClipTrainer::ClipTrainer(ClipModel& model, vit::ViTConfig cfg, ScheduleOptions sched, std::uint64_t seed,
                         bool cropped_pe)
    : model_(model),
      cfg_(std::move(cfg)),
      sched_(sched),
      opt_(named_params(model), optim::AdamWOptions{0.9, 0.999, 1e-8, sched.weight_decay}),
      rng_(seed),
      cropped_pe_(cropped_pe) {}

double ClipTrainer::step(const Batch& batch) {
    std::vector<NormBox> crops;
    for (int i = 0; i < batch.images.dim(0); ++i)
        crops.push_back(cropped_pe_ ? vit::sample_pe_crop(rng_) : NormBox::whole());
    Tensor loss = clip_loss(batch, crops, cfg_, model_);
    ParamList params = opt_.params();
    const double v = finish_step(loss, params, opt_, sched_, step_, "pretrain-clip");
    model_.contrastive.clamp();
    ++step_;
    return v;
}

DopTrainer::DopTrainer(const ClipModel& frozen, DopModel& heads, vit::ViTConfig cfg, DopOptions opt,
                       ScheduleOptions sched, std::uint64_t seed)
    : frozen_(frozen),
      heads_(heads),
      cfg_(std::move(cfg)),
      opt_(std::move(opt)),
      sched_(sched),
      opt_adam_(named_params(heads), optim::AdamWOptions{0.9, 0.999, 1e-8, sched.weight_decay}),
      rng_(seed) {}

double DopTrainer::step(const Batch& batch) {
    Tensor loss = dop_loss(batch, cfg_, frozen_, heads_, opt_, rng_);
    ParamList params = opt_adam_.params();
    const double v = finish_step(loss, params, opt_adam_, sched_, step_, "pretrain-dop");
    heads_.contrastive.clamp();
    ++step_;
    return v;
}

}  // namespace dito::dop
