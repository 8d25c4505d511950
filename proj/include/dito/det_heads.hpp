#pragma once

#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "dito/box.hpp"
#include "dito/nn.hpp"
#include "dito/ops.hpp"

namespace dito::det {

inline constexpr std::array<int, 4> kLevels{2, 3, 4, 5};

// Level index -> (b, side, side, channels). Level 4 matches the token grid.
struct FeaturePyramid {
    std::map<int, Tensor> levels;

    const Tensor& at(int level) const { return levels.at(level); }
    int side(int level) const { return at(level).dim(1); }
    int batch() const { return at(4).dim(0); }
};

// Unit-norm region embedding with its provenance.
struct RegionEmbedding {
    std::vector<double> embedding;
    int source_level = 4;
    NormBox box;
};

// 3x3 same-padded convolution as an im2col matmul: w is (9 * in, out).
Tensor conv3x3(const Tensor& x, const Linear& conv);
// 1x1 convolution over a (b, h, w, c) grid.
Tensor conv1x1(const Tensor& x, const Linear& conv);
// 2x2 stride-2 transposed convolution: conv maps in -> 4 * out.
Tensor deconv2x2(const Tensor& x, const Linear& conv);
// Channel layer norm at every grid position.
Tensor grid_layer_norm(const Tensor& x, const LayerNorm& ln);

struct FpnLevelParams {
    Linear lateral;  // 1x1
    LayerNorm lateral_ln;
    Linear output;  // 3x3
    LayerNorm output_ln;

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        lateral.visit(f, prefix + "lateral.");
        lateral_ln.visit(f, prefix + "lateral_ln.");
        output.visit(f, prefix + "output.");
        output_ln.visit(f, prefix + "output_ln.");
    }
};

struct FpnParams {
    Linear up4_a;  // level 2: deconv, LN, GELU, deconv
    LayerNorm up4_ln;
    Linear up4_b;
    Linear up2;  // level 3: deconv
    std::map<int, FpnLevelParams> level;

    static FpnParams init(int in_dim, int channels, Rng& rng);
    int channels() const { return level.at(4).output.out_dim(); }

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        up4_a.visit(f, prefix + "up4_a.");
        up4_ln.visit(f, prefix + "up4_ln.");
        up4_b.visit(f, prefix + "up4_b.");
        up2.visit(f, prefix + "up2.");
        for (auto& [l, p] : level) p.visit(f, prefix + "p" + std::to_string(l) + ".");
    }
};

// Simple feature pyramid from one (b, s, s, C) backbone map: levels 2/3 by
// transposed convolutions, 4 as identity, 5 by max pooling; each followed by
// 1x1 conv + LN and 3x3 conv + LN. Requires s >= 8 and even.
FeaturePyramid build_fpn(const Tensor& tokens, const FpnParams& params);

struct RcnnHeadParams {
    Linear fc1;
    LayerNorm ln1;
    Linear fc2;
    LayerNorm ln2;
    Linear embed;  // hidden -> joint
    Linear box;    // hidden -> 4 class-agnostic deltas

    static RcnnHeadParams init(int roi_size, int channels, int hidden, int joint, Rng& rng);

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        fc1.visit(f, prefix + "fc1.");
        ln1.visit(f, prefix + "ln1.");
        fc2.visit(f, prefix + "fc2.");
        ln2.visit(f, prefix + "ln2.");
        embed.visit(f, prefix + "embed.");
        box.visit(f, prefix + "box.");
    }
};

// (n, roi, roi, c) -> hidden (n, H) via two LN+GELU layers.
Tensor rcnn_hidden(const Tensor& roi_features, const RcnnHeadParams& head);
// hidden -> unit-norm (n, joint).
Tensor rcnn_embed(const Tensor& hidden, const RcnnHeadParams& head);
// Full path for one RoI feature grid (roi, roi, c).
RegionEmbedding rcnn_head_embed(const Tensor& roi_features, const RcnnHeadParams& head, int level = 4,
                                const NormBox& box = NormBox::whole());

// FPN level for a box: clamp(floor(4 + log2(sqrt(area_px) / canonical)), 2, 5).
int assign_level(const NormBox& box, int image_size, double canonical_px);

// Greedy NMS by descending score (ties: lower index first); a box is
// suppressed when IoU > threshold with an already kept box.
std::vector<int> nms(std::span<const NormBox> boxes, std::span<const double> scores, double iou_threshold);

inline constexpr std::array<double, 3> kAspectRatios{0.5, 1.0, 2.0};

struct AnchorSet {
    std::vector<NormBox> boxes;      // level-major, then row-major cells, then ratio
    std::vector<int> level_offset;   // start per kLevels entry, plus the total
};

// One square anchor scale per level (anchor_scale * stride pixels) and three
// height/width ratios. Anchor boxes are not clipped.
AnchorSet make_anchors(const std::map<int, int>& level_sides, int image_size, double anchor_scale);

struct RpnParams {
    Linear conv;  // 3x3, c -> c
    Linear cls;   // 1x1, c -> 3
    Linear reg;   // 1x1, c -> 12

    static RpnParams init(int channels, Rng& rng);

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        conv.visit(f, prefix + "conv.");
        cls.visit(f, prefix + "cls.");
        reg.visit(f, prefix + "reg.");
    }
};

struct RpnOutput {
    Tensor objectness;  // (b, A) logits, anchor order of AnchorSet
    Tensor deltas;      // (b, A, 4)
    AnchorSet anchors;
};

RpnOutput rpn_forward(const FeaturePyramid& pyramid, const RpnParams& params, int image_size, double anchor_scale);

struct Proposal {
    NormBox box;
    double objectness;  // sigmoid probability
};

struct ProposalOptions {
    int top_k = 100;
    double nms_iou = 0.7;
    int pre_nms_per_level = 200;
    double min_size = 1e-3;  // normalized side below which boxes are dropped
    double anchor_scale = 4.0;
};

// Proposals for image `image` of an already computed RPN output.
std::vector<Proposal> proposals_from(const RpnOutput& out, int image, const ProposalOptions& opt);
// Scores anchors, decodes deltas, clips to [0,1], NMS, keeps top_k.
std::vector<std::vector<Proposal>> rpn_propose(const FeaturePyramid& pyramid, const RpnParams& params,
                                               int image_size, const ProposalOptions& opt);

}  // namespace dito::det
