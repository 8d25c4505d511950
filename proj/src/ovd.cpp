#include "dito/ovd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include "dito/roi_align.hpp"

namespace dito::ovd {

namespace {

// Box-head regression targets are scaled so their magnitude is O(1).
constexpr std::array<double, 4> kBoxWeights{10.0, 10.0, 5.0, 5.0};
constexpr double kRpnBeta = 1.0 / 9.0;
constexpr double kBoxBeta = 1.0;

std::array<double, 4> weighted_targets(const NormBox& gt, const NormBox& proposal) {
    auto d = encode_deltas(gt, proposal);
    for (int i = 0; i < 4; ++i) d[i] *= kBoxWeights[i];
    return d;
}

NormBox apply_weighted(std::span<const double> d, const NormBox& proposal) {
    std::array<double, 4> u{};
    for (int i = 0; i < 4; ++i) u[i] = d[i] / kBoxWeights[i];
    return decode_deltas(u, proposal).clipped();
}

struct LevelRois {
    Tensor features;             // (n, roi, roi, c) in level-major order
    std::vector<int> order;      // order[j] = index into the input box list
};

LevelRois pool_by_level(const det::FeaturePyramid& pyr, std::span<const NormBox> boxes, std::span<const int> image,
                        const DetectorConfig& cfg) {
    std::map<int, std::vector<int>> by_level;
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        by_level[det::assign_level(boxes[i], cfg.vit.image_size, cfg.canonical_px)].push_back(static_cast<int>(i));
    }
    LevelRois out;
    std::vector<Tensor> parts;
    for (const auto& [level, members] : by_level) {
        std::vector<NormBox> bx;
        std::vector<int> im;
        for (int i : members) {
            bx.push_back(boxes[i]);
            im.push_back(image[i]);
            out.order.push_back(i);
        }
        parts.push_back(roi_align_batched(pyr.at(level), bx, im, cfg.roi_size, cfg.samples_per_bin));
    }
    out.features = parts.size() == 1 ? parts.front()
                                     : reshape(concat_rows(parts), {static_cast<int>(boxes.size()), cfg.roi_size,
                                                                    cfg.roi_size, pyr.at(4).dim(3)});
    return out;
}

}  // namespace

std::vector<int> CategoryTable::base_indices() const {
    std::vector<int> out;
    for (int k = 0; k < size(); ++k)
        if (!novel[k]) out.push_back(k);
    return out;
}

int CategoryTable::index_of(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw std::invalid_argument("unknown category '" + name + "'");
    return static_cast<int>(it - names.begin());
}

void CategoryTable::validate() const {
    if (names.empty()) throw std::invalid_argument("category table: no categories");
    if (novel.size() != names.size()) throw std::invalid_argument("category table: missing base/novel split tags");
    if (std::set<std::string>(names.begin(), names.end()).size() != names.size()) {
        throw std::invalid_argument("category table: duplicate category names");
    }
    if (!embeddings.defined() || embeddings.ndim() != 2 || embeddings.rows() != size()) {
        throw std::invalid_argument("category table: embeddings must have one row per category");
    }
    if (!background.defined() || background.shape() != Shape{1, dim()}) {
        throw std::invalid_argument("category table: background must be a (1, d) row");
    }
    const int d = dim();
    for (int k = 0; k < size(); ++k) {
        double n2 = 0;
        for (int j = 0; j < d; ++j) n2 += embeddings.data()[k * d + j] * embeddings.data()[k * d + j];
        if (std::abs(std::sqrt(n2) - 1.0) > 1e-5) {
            throw std::invalid_argument("category table: embedding of '" + names[k] + "' is not unit norm");
        }
    }
}

std::string fill_template(const std::string& tmpl, const std::string& name) {
    const auto pos = tmpl.find("{}");
    if (pos == std::string::npos) throw std::invalid_argument("template '" + tmpl + "' has no {} placeholder");
    std::string out = tmpl;
    out.replace(pos, 2, name);
    return out;
}

CategoryTable category_embeddings(const std::vector<std::string>& names, const std::vector<bool>& novel,
                                  const std::vector<std::string>& templates, const text::Vocabulary& vocab,
                                  const text::TextEncoderParams& encoder) {
    if (names.empty()) throw std::invalid_argument("category_embeddings: no category names");
    if (templates.empty()) throw std::invalid_argument("category_embeddings: empty template expansion");
    if (novel.size() != names.size()) throw std::invalid_argument("category_embeddings: missing base/novel split tags");
    NoGradGuard guard;
    const int K = static_cast<int>(names.size());
    const int T = static_cast<int>(templates.size());
    std::vector<std::string> sentences;
    for (const auto& n : names)
        for (const auto& t : templates) sentences.push_back(fill_template(t, n));
    Tensor enc = text::encode_text(text::TextBatch::from_sentences(vocab, sentences), encoder);
    Tensor emb = l2_normalize_rows(group_mean(enc, RowGroups::contiguous(K, T)));
    const int d = emb.cols();

    // Gram-Schmidt basis of the category rows, then the first coordinate
    // direction with a usable residual becomes the background row.
    std::vector<std::vector<double>> basis;
    for (int k = 0; k < K; ++k) {
        std::vector<double> v(emb.data().begin() + k * d, emb.data().begin() + (k + 1) * d);
        for (const auto& b : basis) {
            double dot = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
            for (int j = 0; j < d; ++j) v[j] -= dot * b[j];
        }
        const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
        if (n > 1e-8) {
            for (double& x : v) x /= n;
            basis.push_back(std::move(v));
        }
    }
    std::vector<double> bg;
    for (int c = 0; c < d && bg.empty(); ++c) {
        std::vector<double> v(d, 0.0);
        v[c] = 1.0;
        for (const auto& b : basis) {
            double dot = b[c];
            for (int j = 0; j < d; ++j) v[j] -= dot * b[j];
        }
        const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
        if (n > 1e-3) {
            for (double& x : v) x /= n;
            bg = std::move(v);
        }
    }
    if (bg.empty()) throw std::invalid_argument("category_embeddings: no direction orthogonal to all categories");

    CategoryTable table;
    table.names = names;
    table.novel = novel;
    table.templates = templates;
    table.embeddings = emb.detach();
    table.background = Tensor::from({1, d}, bg, true);
    table.validate();
    return table;
}

Tensor classifier_rows(const CategoryTable& table, ScoreMode mode) {
    Tensor bg = l2_normalize_rows(table.background);
    Tensor cats = mode == ScoreMode::Train ? gather_rows(table.embeddings, table.base_indices()) : table.embeddings;
    return concat_rows({bg, cats});
}

Tensor detection_logits(const Tensor& region_emb, const CategoryTable& table, ScoreMode mode, double temp) {
    if (!(temp > 0)) throw std::invalid_argument("detection score temperature must be positive");
    return scale(matmul_nt(region_emb, classifier_rows(table, mode)), 1.0 / temp);
}

Tensor detection_score(const Tensor& region_emb, const CategoryTable& table, ScoreMode mode, double temp) {
    return softmax_rows(detection_logits(region_emb, table, mode, temp));
}

Tensor vlm_score(std::span<const NormBox> boxes, std::span<const int> image_index, const Tensor& tokens,
                 const vit::ViTParams& projection_owner, const CategoryTable& table, double temp, int roi_size,
                 int samples_per_bin) {
    if (!(temp > 0)) throw std::invalid_argument("vlm score temperature must be positive");
    const int n = static_cast<int>(boxes.size());
    if (n == 0) return Tensor::zeros({0, table.size()});
    Tensor grid = tokens.ndim() == 3 ? reshape(tokens, {1, tokens.dim(0), tokens.dim(1), tokens.dim(2)}) : tokens;
    Tensor feats = roi_align_batched(grid, boxes, image_index, roi_size, samples_per_bin);
    const int bins = roi_size * roi_size;
    Tensor pooled = group_mean(reshape(feats, {n * bins, grid.dim(3)}), RowGroups::contiguous(n, bins));
    Tensor emb = l2_normalize_rows(projection_owner.image_proj(pooled));
    return softmax_rows(scale(matmul_nt(emb, table.embeddings), 1.0 / temp));
}

void EnsembleParams::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("ensemble.alpha must lie in [0, 1]");
    if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("ensemble.beta must lie in [0, 1]");
}

std::vector<double> ensemble_score(std::span<const double> p, std::span<const double> z, const EnsembleParams& params,
                                   const std::vector<bool>& novel) {
    params.validate();
    const std::size_t K = z.size();
    if (p.size() != K + 1 || novel.size() != K) {
        throw std::invalid_argument("ensemble_score: need p of size K+1, z and split mask of size K");
    }
    for (double v : p)
        if (!(v >= 0.0)) throw std::invalid_argument("ensemble_score: negative or NaN detection score");
    for (double v : z)
        if (!(v >= 0.0)) throw std::invalid_argument("ensemble_score: negative or NaN VLM score");
    std::vector<double> s(K + 1);
    s[0] = p[0];
    for (std::size_t k = 0; k < K; ++k) {
        const double w = novel[k] ? params.beta : params.alpha;
        s[k + 1] = std::pow(z[k], 1.0 - w) * std::pow(p[k + 1], w);
    }
    return s;
}

Tensor backbone_tokens(const Tensor& images, const vit::ViTConfig& cfg, const vit::ViTParams& params, bool use_swl,
                       double q) {
    Tensor tokens = vit::patchify(images, cfg, params);
    auto run = [&](const Tensor& x) { return vit::vit_forward(x, cfg, params); };
    if (!use_swl) return run(tokens);
    const auto shift = swl::compute_shift_size(cfg.image_size, cfg.patch_size, cfg.grid, q);
    return swl::swl_forward(tokens, run, shift.shift);
}

FinetuneTrainer::FinetuneTrainer(DetectorModel& model, CategoryTable& table, DetectorConfig cfg,
                                 FinetuneSchedule sched, std::uint64_t seed)
    : model_(model),
      table_(table),
      cfg_(std::move(cfg)),
      sched_(std::move(sched)),
      opt_(
          [&] {
              ParamList p = named_params(model);
              p.emplace_back("table.background", table.background);
              return p;
          }(),
          optim::SgdOptions{sched_.momentum, sched_.weight_decay},
          [&] {
              std::vector<double> m;
              model.visit([&](const std::string& n, Tensor&) { m.push_back(n.rfind("backbone.", 0) == 0 ? sched_.backbone_lr_ratio : 1.0); },
                          "");
              m.push_back(1.0);
              return m;
          }()),
      rng_(seed) {}

Tensor FinetuneTrainer::loss(const Tensor& images, std::span<const GroundTruth> gts, FinetuneLosses* parts) {
    const int B = images.dim(0);
    if (static_cast<int>(gts.size()) != B) throw std::invalid_argument("finetune: one ground-truth set per image");
    std::vector<int> column(table_.size(), -1);
    {
        auto base = table_.base_indices();
        for (std::size_t j = 0; j < base.size(); ++j) column[base[j]] = static_cast<int>(j) + 1;
    }
    for (const auto& gt : gts) {
        if (gt.boxes.size() != gt.labels.size()) throw std::invalid_argument("finetune: boxes and labels differ in length");
        for (int l : gt.labels) {
            if (l < 0 || l >= table_.size()) throw std::invalid_argument("finetune: label outside the category table");
            if (column[l] < 0) {
                throw std::invalid_argument("finetune: ground truth must be base categories, got novel '" +
                                            table_.names[l] + "'");
            }
        }
    }

    Tensor tokens = backbone_tokens(images, cfg_.vit, model_.backbone, cfg_.swl.enabled_on_finetuned, cfg_.swl.q);
    det::FeaturePyramid pyr = det::build_fpn(tokens, model_.fpn);
    det::RpnOutput rpn = det::rpn_forward(pyr, model_.rpn, cfg_.vit.image_size, cfg_.anchor_scale);
    const int A = static_cast<int>(rpn.anchors.boxes.size());

    // RPN anchor sampling.
    std::vector<int> obj_rows, reg_rows;
    std::vector<double> obj_targets, reg_targets;
    for (int b = 0; b < B; ++b) {
        const auto& gt = gts[b];
        std::vector<int> label(A, -1);
        std::vector<int> best_gt(A, -1);
        std::vector<double> best(A, 0.0);
        std::vector<double> gt_best(gt.boxes.size(), 0.0);
        for (int a = 0; a < A; ++a) {
            for (std::size_t g = 0; g < gt.boxes.size(); ++g) {
                const double v = iou(rpn.anchors.boxes[a], gt.boxes[g]);
                if (v > best[a]) {
                    best[a] = v;
                    best_gt[a] = static_cast<int>(g);
                }
                gt_best[g] = std::max(gt_best[g], v);
            }
        }
        for (int a = 0; a < A; ++a) {
            if (best[a] < cfg_.rpn_neg_iou) label[a] = 0;
            if (best[a] >= cfg_.rpn_pos_iou) label[a] = 1;
        }
        for (std::size_t g = 0; g < gt.boxes.size(); ++g) {
            if (gt_best[g] <= 0) continue;
            for (int a = 0; a < A; ++a) {
                if (iou(rpn.anchors.boxes[a], gt.boxes[g]) == gt_best[g]) {
                    label[a] = 1;
                    best_gt[a] = static_cast<int>(g);
                }
            }
        }
        std::vector<int> pos, neg;
        for (int a = 0; a < A; ++a) {
            if (label[a] == 1) pos.push_back(a);
            if (label[a] == 0) neg.push_back(a);
        }
        std::shuffle(pos.begin(), pos.end(), rng_.engine());
        std::shuffle(neg.begin(), neg.end(), rng_.engine());
        pos.resize(std::min<std::size_t>(pos.size(), cfg_.rpn_batch / 2));
        neg.resize(std::min<std::size_t>(neg.size(), cfg_.rpn_batch - pos.size()));
        for (int a : pos) {
            obj_rows.push_back(b * A + a);
            obj_targets.push_back(1.0);
            reg_rows.push_back(b * A + a);
            auto t = encode_deltas(gt.boxes[best_gt[a]], rpn.anchors.boxes[a]);
            reg_targets.insert(reg_targets.end(), t.begin(), t.end());
        }
        for (int a : neg) {
            obj_rows.push_back(b * A + a);
            obj_targets.push_back(0.0);
        }
    }
    const double n_anchor = std::max<std::size_t>(obj_rows.size(), 1);
    Tensor rpn_cls = scale(bce_with_logits_sum(gather_rows(reshape(rpn.objectness, {B * A, 1}), obj_rows), obj_targets),
                           1.0 / n_anchor);
    Tensor rpn_reg = reg_rows.empty() ? Tensor::scalar(0.0)
                                      : scale(smooth_l1_sum(gather_rows(reshape(rpn.deltas, {B * A, 4}), reg_rows),
                                                            reg_targets, kRpnBeta),
                                              1.0 / n_anchor);

    // Proposal sampling and matching.
    std::vector<NormBox> rois;
    std::vector<int> roi_image, roi_class;
    std::vector<NormBox> roi_gt;  // matched GT for positives
    for (int b = 0; b < B; ++b) {
        const auto& gt = gts[b];
        std::vector<NormBox> cand;
        for (const auto& p : det::proposals_from(rpn, b, cfg_.train_proposals)) cand.push_back(p.box);
        for (const auto& g : gt.boxes) cand.push_back(g);
        std::vector<int> pos, neg;
        std::vector<int> match(cand.size(), -1);
        for (std::size_t i = 0; i < cand.size(); ++i) {
            double best = 0;
            for (std::size_t g = 0; g < gt.boxes.size(); ++g) {
                const double v = iou(cand[i], gt.boxes[g]);
                if (v > best) {
                    best = v;
                    match[i] = static_cast<int>(g);
                }
            }
            if (best >= cfg_.fg_iou) {
                pos.push_back(static_cast<int>(i));
            } else {
                match[i] = -1;
                neg.push_back(static_cast<int>(i));
            }
        }
        std::shuffle(pos.begin(), pos.end(), rng_.engine());
        std::shuffle(neg.begin(), neg.end(), rng_.engine());
        const int max_pos = static_cast<int>(std::lround(cfg_.rois_per_image * cfg_.roi_pos_fraction));
        pos.resize(std::min<std::size_t>(pos.size(), max_pos));
        neg.resize(std::min<std::size_t>(neg.size(), cfg_.rois_per_image - pos.size()));
        for (int i : pos) {
            rois.push_back(cand[i]);
            roi_image.push_back(b);
            roi_class.push_back(column[gt.labels[match[i]]]);
            roi_gt.push_back(gt.boxes[match[i]]);
        }
        for (int i : neg) {
            rois.push_back(cand[i]);
            roi_image.push_back(b);
            roi_class.push_back(0);
            roi_gt.push_back(cand[i]);
        }
    }

    Tensor cls = Tensor::scalar(0.0), reg = Tensor::scalar(0.0);
    if (!rois.empty()) {
        LevelRois pooled = pool_by_level(pyr, rois, roi_image, cfg_);
        Tensor hidden = det::rcnn_hidden(pooled.features, model_.head);
        Tensor emb = det::rcnn_embed(hidden, model_.head);
        std::vector<int> targets;
        std::vector<int> pos_rows;
        std::vector<double> box_targets;
        for (std::size_t j = 0; j < pooled.order.size(); ++j) {
            const int i = pooled.order[j];
            targets.push_back(roi_class[i]);
            if (roi_class[i] > 0) {
                pos_rows.push_back(static_cast<int>(j));
                auto t = weighted_targets(roi_gt[i], rois[i]);
                box_targets.insert(box_targets.end(), t.begin(), t.end());
            }
        }
        cls = cross_entropy_rows(detection_logits(emb, table_, ScoreMode::Train, cfg_.det_temp), targets);
        if (!pos_rows.empty()) {
            Tensor deltas = gather_rows(model_.head.box(hidden), pos_rows);
            reg = scale(smooth_l1_sum(deltas, box_targets, kBoxBeta), 1.0 / static_cast<double>(rois.size()));
        }
    }
    Tensor total = add(add(rpn_cls, rpn_reg), add(cls, reg));
    if (parts) {
        *parts = {total.item(), rpn_cls.item(), rpn_reg.item(), cls.item(), reg.item()};
    }
    return total;
}

FinetuneLosses FinetuneTrainer::step(const Tensor& images, std::span<const GroundTruth> gts) {
    FinetuneLosses parts;
    Tensor l = loss(images, gts, &parts);
    if (!std::isfinite(parts.total)) {
        throw std::runtime_error("finetune: non-finite loss at step " + std::to_string(step_) + " (rpn_cls=" +
                                 std::to_string(parts.rpn_cls) + ", rpn_reg=" + std::to_string(parts.rpn_reg) +
                                 ", cls=" + std::to_string(parts.cls) + ", reg=" + std::to_string(parts.reg) +
                                 "); lower finetune.lr");
    }
    ParamList params = opt_.params();
    optim::zero_grads(params);
    l.backward();
    if (sched_.clip_norm > 0) optim::clip_grad_norm(params, sched_.clip_norm);
    opt_.step(optim::warmup_step_decay(step_, sched_.warmup, sched_.total, sched_.lr, sched_.milestones, sched_.decay));
    optim::zero_grads(params);
    ++step_;
    return parts;
}

std::vector<ScoredDetection> score_proposals(std::span<const NormBox> proposals, std::span<const double> p_rows,
                                             std::span<const double> z_rows, std::span<const NormBox> refined,
                                             const CategoryTable& table, const DetectOptions& opt) {
    if (table.novel.size() != table.names.size()) throw std::invalid_argument("detect: category table missing split tags");
    const std::size_t n = proposals.size();
    const std::size_t K = table.names.size();
    if (p_rows.size() != n * (K + 1) || z_rows.size() != n * K || refined.size() != n) {
        throw std::invalid_argument("score_proposals: score matrices do not match the proposal count");
    }
    std::vector<std::vector<ScoredDetection>> per_class(K);
    for (std::size_t i = 0; i < n; ++i) {
        auto p = p_rows.subspan(i * (K + 1), K + 1);
        auto z = z_rows.subspan(i * K, K);
        auto s = ensemble_score(p, z, opt.ensemble, table.novel);
        for (std::size_t k = 0; k < K; ++k) {
            if (s[k + 1] < opt.score_thresh || !refined[i].valid()) continue;
            per_class[k].push_back({refined[i], static_cast<int>(k), table.names[k], p[k + 1], z[k], s[k + 1]});
        }
    }
    std::vector<ScoredDetection> out;
    for (auto& cands : per_class) {
        std::vector<NormBox> boxes;
        std::vector<double> scores;
        for (const auto& c : cands) {
            boxes.push_back(c.box);
            scores.push_back(c.s_ens);
        }
        for (int i : det::nms(boxes, scores, opt.nms_iou)) out.push_back(cands[i]);
    }
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.s_ens > b.s_ens; });
    if (static_cast<int>(out.size()) > opt.max_dets) out.resize(opt.max_dets);
    return out;
}

std::vector<std::vector<ScoredDetection>> detect(const Tensor& images, const DetectorModel& model,
                                                 const vit::ViTParams* frozen, const CategoryTable& table,
                                                 const DetectorConfig& cfg, const DetectOptions& opt) {
    if (table.novel.size() != table.names.size()) throw std::invalid_argument("detect: category table missing split tags");
    opt.ensemble.validate();
    NoGradGuard guard;
    const int B = images.dim(0);
    Tensor tokens = backbone_tokens(images, cfg.vit, model.backbone, cfg.swl.enabled_on_finetuned, cfg.swl.q);
    det::FeaturePyramid pyr = det::build_fpn(tokens, model.fpn);
    det::RpnOutput rpn = det::rpn_forward(pyr, model.rpn, cfg.vit.image_size, cfg.anchor_scale);

    std::vector<NormBox> props;
    std::vector<int> image;
    for (int b = 0; b < B; ++b) {
        for (const auto& p : det::proposals_from(rpn, b, cfg.test_proposals)) {
            props.push_back(p.box);
            image.push_back(b);
        }
    }
    std::vector<std::vector<ScoredDetection>> out(B);
    if (props.empty()) return out;

    const int K = table.size();
    const std::size_t n = props.size();
    std::vector<double> p_rows(n * (K + 1));
    std::vector<NormBox> refined(n);
    {
        LevelRois pooled = pool_by_level(pyr, props, image, cfg);
        Tensor hidden = det::rcnn_hidden(pooled.features, model.head);
        Tensor p = detection_score(det::rcnn_embed(hidden, model.head), table, ScoreMode::Test, cfg.det_temp);
        Tensor deltas = model.head.box(hidden);
        for (std::size_t j = 0; j < n; ++j) {
            const int i = pooled.order[j];
            std::copy_n(p.data().begin() + j * (K + 1), K + 1, p_rows.begin() + static_cast<std::size_t>(i) * (K + 1));
            NormBox r = apply_weighted(deltas.data().subspan(j * 4, 4), props[i]);
            refined[i] = r.valid() && r.width() * cfg.vit.image_size >= 1.0 && r.height() * cfg.vit.image_size >= 1.0
                             ? r
                             : props[i];
        }
    }

    const bool use_frozen = opt.use_frozen && frozen != nullptr;
    const vit::ViTParams& owner = use_frozen ? *frozen : model.backbone;
    Tensor z_tokens = use_frozen ? backbone_tokens(images, cfg.vit, *frozen, cfg.swl.enabled_on_frozen, cfg.swl.q)
                                 : tokens;
    Tensor z = vlm_score(refined, image, z_tokens, owner, table, cfg.vlm_temp, cfg.roi_size, cfg.samples_per_bin);

    std::size_t start = 0;
    for (int b = 0; b < B; ++b) {
        std::size_t end = start;
        while (end < n && image[end] == b) ++end;
        const std::size_t m = end - start;
        out[b] = score_proposals(std::span(props).subspan(start, m),
                                 std::span<const double>(p_rows).subspan(start * (K + 1), m * (K + 1)),
                                 z.data().subspan(start * K, m * K), std::span(refined).subspan(start, m), table, opt);
        start = end;
    }
    return out;
}

}  // namespace dito::ovd
