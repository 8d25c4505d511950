#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "dito/box.hpp"
#include "dito/det_heads.hpp"
#include "dito/tensor.hpp"
#include "dito/vit.hpp"

namespace dito::eval {

struct Detection {
    NormBox box;
    std::string category;
    double score = 0.0;
};

struct GroundTruthBox {
    NormBox box;
    std::string category;
};

// IoU thresholds .50:.05:.95.
std::vector<double> coco_thresholds();

// Area under the 101-point interpolated precision/recall curve for one
// class at one threshold. `tp` follows detections in descending score order.
double average_precision(std::span<const int> tp, int num_gt);

struct ApResult {
    std::map<std::string, double> ap50;  // per category with at least one GT
    std::map<std::string, double> ap;    // mean over thresholds, per category
    double mean_ap50 = 0, mean_ap = 0;
    double base_ap50 = 0, novel_ap50 = 0;
    double base_ap = 0, novel_ap = 0;
};

// Greedy score-ordered matching per image and class (each GT matched once),
// per-class AP at every threshold, then means. Categories without GT are
// left out of the means. Throws on an unknown category or non-finite score.
ApResult eval_ap(const std::vector<std::vector<Detection>>& detections,
                 const std::vector<std::vector<GroundTruthBox>>& ground_truth, const std::vector<std::string>& categories,
                 const std::vector<bool>& novel, const std::vector<double>& thresholds = coco_thresholds());

// Heatmap normalization: (v - min) / max(max - min, kHeatmapGuard).
inline constexpr double kHeatmapGuard = 0.5;
std::vector<double> normalize_heatmap(std::span<const double> v);

// Cosine of every projected last-layer token (h, w, C) with a unit text
// embedding; returns raw cosines (h, w, 1) before normalization.
Tensor backbone_heatmap(const Tensor& tokens, const vit::ViTParams& params, std::span<const double> text_emb);

// Level-4 sliding window: a window of `window` cells centred on each
// position is RoI-aligned from the level-4 map (h, w, C) and embedded by the
// R-CNN head; returns raw cosines (h, w, 1).
Tensor dop_heatmap(const Tensor& level4, const det::RcnnHeadParams& head, std::span<const double> text_emb,
                   double window, int roi_size, int samples_per_bin);

// 1 when the argmax cell centre of the (h, w, 1) map lies inside the box.
bool pointing_hit(const Tensor& heatmap, const NormBox& box);
double pointing_game(const std::vector<Tensor>& heatmaps, const std::vector<NormBox>& boxes);

// Fraction of images whose own caption ranks in the top k by cosine; rank
// counts captions with strictly greater similarity.
double retrieval_recall(const Tensor& image_emb, const Tensor& text_emb, int k);

}  // namespace dito::eval
