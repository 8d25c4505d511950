#include "dito/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "dito/roi_align.hpp"

namespace dito::eval {

std::vector<double> coco_thresholds() {
    std::vector<double> t;
    for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
    return t;
}

double average_precision(std::span<const int> tp, int num_gt) {
    if (num_gt <= 0) throw std::invalid_argument("average_precision: class has no ground truth");
    const std::size_t n = tp.size();
    std::vector<double> recall(n), precision(n);
    int hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
        hits += tp[i] ? 1 : 0;
        recall[i] = static_cast<double>(hits) / num_gt;
        precision[i] = static_cast<double>(hits) / static_cast<double>(i + 1);
    }
    for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double sum = 0;
    for (int r = 0; r <= 100; ++r) {
        const double target = r / 100.0;
        auto it = std::lower_bound(recall.begin(), recall.end(), target - 1e-12);
        if (it != recall.end()) sum += precision[it - recall.begin()];
    }
    return sum / 101.0;
}

ApResult eval_ap(const std::vector<std::vector<Detection>>& detections,
                 const std::vector<std::vector<GroundTruthBox>>& ground_truth, const std::vector<std::string>& categories,
                 const std::vector<bool>& novel, const std::vector<double>& thresholds) {
    if (detections.size() != ground_truth.size()) throw std::invalid_argument("eval_ap: detections and GT differ in image count");
    if (novel.size() != categories.size()) throw std::invalid_argument("eval_ap: split mask size mismatch");
    if (thresholds.empty()) throw std::invalid_argument("eval_ap: no IoU thresholds");
    auto cat_index = [&](const std::string& c) {
        auto it = std::find(categories.begin(), categories.end(), c);
        if (it == categories.end()) throw std::invalid_argument("eval_ap: unknown category '" + c + "'");
        return static_cast<int>(it - categories.begin());
    };
    struct Ref {
        int image, index;
        double score;
    };
    const int K = static_cast<int>(categories.size());
    std::vector<std::vector<Ref>> dets(K);
    std::vector<int> num_gt(K, 0);
    for (std::size_t im = 0; im < detections.size(); ++im) {
        for (std::size_t i = 0; i < detections[im].size(); ++i) {
            const auto& d = detections[im][i];
            if (!std::isfinite(d.score)) throw std::invalid_argument("eval_ap: non-finite detection score");
            dets[cat_index(d.category)].push_back({static_cast<int>(im), static_cast<int>(i), d.score});
        }
        for (const auto& g : ground_truth[im]) ++num_gt[cat_index(g.category)];
    }

    ApResult res;
    std::vector<double> base50, novel50, base_all, novel_all;
    for (int k = 0; k < K; ++k) {
        if (num_gt[k] == 0) continue;
        auto& list = dets[k];
        std::stable_sort(list.begin(), list.end(), [](const Ref& a, const Ref& b) { return a.score > b.score; });
        double ap_sum = 0, ap50 = 0;
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            std::vector<std::vector<char>> used(ground_truth.size());
            for (std::size_t im = 0; im < ground_truth.size(); ++im) used[im].assign(ground_truth[im].size(), 0);
            std::vector<int> tp;
            tp.reserve(list.size());
            for (const auto& r : list) {
                const auto& box = detections[r.image][r.index].box;
                int best = -1;
                double best_iou = thresholds[t];
                for (std::size_t g = 0; g < ground_truth[r.image].size(); ++g) {
                    const auto& gt = ground_truth[r.image][g];
                    if (used[r.image][g] || gt.category != categories[k]) continue;
                    const double v = iou(box, gt.box);
                    if (v >= best_iou) {
                        best_iou = v;
                        best = static_cast<int>(g);
                    }
                }
                if (best >= 0) used[r.image][best] = 1;
                tp.push_back(best >= 0 ? 1 : 0);
            }
            const double ap = average_precision(tp, num_gt[k]);
            ap_sum += ap;
            if (std::abs(thresholds[t] - 0.5) < 1e-9) ap50 = ap;
        }
        const double ap_mean = ap_sum / static_cast<double>(thresholds.size());
        res.ap50[categories[k]] = ap50;
        res.ap[categories[k]] = ap_mean;
        (novel[k] ? novel50 : base50).push_back(ap50);
        (novel[k] ? novel_all : base_all).push_back(ap_mean);
    }
    auto avg = [](const std::vector<double>& v) {
        return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    std::vector<double> all50 = base50, all = base_all;
    all50.insert(all50.end(), novel50.begin(), novel50.end());
    all.insert(all.end(), novel_all.begin(), novel_all.end());
    res.mean_ap50 = avg(all50);
    res.mean_ap = avg(all);
    res.base_ap50 = avg(base50);
    res.novel_ap50 = avg(novel50);
    res.base_ap = avg(base_all);
    res.novel_ap = avg(novel_all);
    return res;
}

std::vector<double> normalize_heatmap(std::span<const double> v) {
    if (v.empty()) return {};
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    const double range = std::max(*hi - *lo, kHeatmapGuard);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - *lo) / range;
    return out;
}

namespace {

Tensor cosine_map(const Tensor& emb, std::span<const double> text_emb, int h, int w) {
    const int d = emb.cols();
    if (static_cast<int>(text_emb.size()) != d) throw std::invalid_argument("heatmap: text embedding dimension mismatch");
    std::vector<double> out(static_cast<std::size_t>(h) * w);
    for (int i = 0; i < h * w; ++i) {
        double s = 0;
        for (int j = 0; j < d; ++j) s += emb.data()[static_cast<std::size_t>(i) * d + j] * text_emb[j];
        out[i] = s;
    }
    return Tensor::from({h, w, 1}, std::move(out));
}

}  // namespace

Tensor backbone_heatmap(const Tensor& tokens, const vit::ViTParams& params, std::span<const double> text_emb) {
    NoGradGuard guard;
    if (tokens.ndim() != 3) throw std::invalid_argument("backbone_heatmap: expected one (h, w, C) token grid");
    return cosine_map(vit::project_tokens(tokens, params), text_emb, tokens.dim(0), tokens.dim(1));
}

Tensor dop_heatmap(const Tensor& level4, const det::RcnnHeadParams& head, std::span<const double> text_emb,
                   double window, int roi_size, int samples_per_bin) {
    NoGradGuard guard;
    if (level4.ndim() != 3) throw std::invalid_argument("dop_heatmap: expected one (h, w, C) level-4 map");
    if (!(window > 0)) throw std::invalid_argument("dop_heatmap: window must be positive");
    const int h = level4.dim(0), w = level4.dim(1);
    std::vector<NormBox> boxes;
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            boxes.push_back(NormBox{(j + 0.5 - window / 2) / w, (i + 0.5 - window / 2) / h, (j + 0.5 + window / 2) / w,
                                    (i + 0.5 + window / 2) / h}
                                .clipped());
        }
    }
    Tensor feats = roi_align(level4, boxes, roi_size, samples_per_bin);
    Tensor emb = det::rcnn_embed(det::rcnn_hidden(feats, head), head);
    return cosine_map(emb, text_emb, h, w);
}

bool pointing_hit(const Tensor& heatmap, const NormBox& box) {
    const int h = heatmap.dim(0), w = heatmap.dim(1);
    auto v = heatmap.data();
    const auto best = std::max_element(v.begin(), v.end()) - v.begin();
    const double cy = (static_cast<double>(best / w) + 0.5) / h;
    const double cx = (static_cast<double>(best % w) + 0.5) / w;
    return cx >= box.x0 && cx <= box.x1 && cy >= box.y0 && cy <= box.y1;
}

double pointing_game(const std::vector<Tensor>& heatmaps, const std::vector<NormBox>& boxes) {
    if (heatmaps.size() != boxes.size()) throw std::invalid_argument("pointing_game: one box per heatmap required");
    if (heatmaps.empty()) return 0.0;
    int hits = 0;
    for (std::size_t i = 0; i < heatmaps.size(); ++i) hits += pointing_hit(heatmaps[i], boxes[i]) ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(heatmaps.size());
}

double retrieval_recall(const Tensor& image_emb, const Tensor& text_emb, int k) {
    if (image_emb.shape() != text_emb.shape() || image_emb.ndim() != 2) {
        throw std::invalid_argument("retrieval_recall: need matching (N, d) embeddings");
    }
    NoGradGuard guard;
    Tensor sims = matmul_nt(image_emb, text_emb);
    const int n = image_emb.rows();
    if (n == 0) return 0.0;
    int hits = 0;
    for (int i = 0; i < n; ++i) {
        const double own = sims.data()[static_cast<std::size_t>(i) * n + i];
        int rank = 0;
        for (int j = 0; j < n; ++j)
            if (sims.data()[static_cast<std::size_t>(i) * n + j] > own) ++rank;
        hits += rank < k ? 1 : 0;
    }
    return static_cast<double>(hits) / n;
}

}  // namespace dito::eval
