#include "dito/det_heads.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace dito::det {

namespace {

struct Dims {
    int b, h, w, c;
};

Dims dims4(const Tensor& x, const char* op) {
    if (x.ndim() != 4) throw std::invalid_argument(std::string(op) + ": expected (b, h, w, c), got " + shape_str(x.shape()));
    return {x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
}

Tensor rows_of(const Tensor& x) { return reshape(x, {x.rows(), x.cols()}); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Tensor conv3x3(const Tensor& x, const Linear& conv) {
    const auto d = dims4(x, "conv3x3");
    if (conv.in_dim() != 9 * d.c) throw std::invalid_argument("conv3x3: weight expects " + std::to_string(conv.in_dim() / 9) + " channels");
    std::vector<int> idx(static_cast<std::size_t>(d.b) * d.h * d.w * 9);
    std::size_t k = 0;
    for (int b = 0; b < d.b; ++b)
        for (int i = 0; i < d.h; ++i)
            for (int j = 0; j < d.w; ++j)
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        const int y = i + di, xx = j + dj;
                        idx[k++] = (y < 0 || y >= d.h || xx < 0 || xx >= d.w) ? -1 : (b * d.h + y) * d.w + xx;
                    }
    Tensor cols = reshape(gather_rows(rows_of(x), idx), {d.b * d.h * d.w, 9 * d.c});
    return reshape(conv(cols), {d.b, d.h, d.w, conv.out_dim()});
}

Tensor conv1x1(const Tensor& x, const Linear& conv) {
    const auto d = dims4(x, "conv1x1");
    return reshape(conv(rows_of(x)), {d.b, d.h, d.w, conv.out_dim()});
}

Tensor deconv2x2(const Tensor& x, const Linear& conv) {
    const auto d = dims4(x, "deconv2x2");
    if (conv.out_dim() % 4 != 0) throw std::invalid_argument("deconv2x2: output width must be 4 * channels");
    const int co = conv.out_dim() / 4;
    Tensor sub = reshape(conv(rows_of(x)), {d.b * d.h * d.w * 4, co});
    const int H = 2 * d.h, W = 2 * d.w;
    std::vector<int> idx(static_cast<std::size_t>(d.b) * H * W);
    for (int b = 0; b < d.b; ++b)
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
                const int src = ((b * d.h + y / 2) * d.w + xx / 2) * 4 + (y % 2) * 2 + (xx % 2);
                idx[(static_cast<std::size_t>(b) * H + y) * W + xx] = src;
            }
    return reshape(gather_rows(sub, idx), {d.b, H, W, co});
}

Tensor grid_layer_norm(const Tensor& x, const LayerNorm& ln) { return reshape(ln(rows_of(x)), x.shape()); }

FpnParams FpnParams::init(int in_dim, int channels, Rng& rng) {
    FpnParams p;
    p.up4_a = Linear::init(in_dim, 4 * channels, rng);
    p.up4_ln = LayerNorm::init(channels);
    p.up4_b = Linear::init(channels, 4 * channels, rng);
    p.up2 = Linear::init(in_dim, 4 * channels, rng);
    for (int l : kLevels) {
        const int lat_in = (l == 2 || l == 3) ? channels : in_dim;
        FpnLevelParams lp;
        lp.lateral = Linear::init(lat_in, channels, rng);
        lp.lateral_ln = LayerNorm::init(channels);
        lp.output = Linear::init(9 * channels, channels, rng);
        lp.output_ln = LayerNorm::init(channels);
        p.level[l] = lp;
    }
    return p;
}

FeaturePyramid build_fpn(const Tensor& tokens, const FpnParams& params) {
    Tensor x = tokens.ndim() == 3 ? reshape(tokens, {1, tokens.dim(0), tokens.dim(1), tokens.dim(2)}) : tokens;
    const auto d = dims4(x, "build_fpn");
    if (d.h != d.w) throw std::invalid_argument("build_fpn: token grid must be square");
    if (d.h < 8 || d.h % 2 != 0) {
        throw std::invalid_argument("build_fpn: token side " + std::to_string(d.h) +
                                    " too small for level 5 (need an even side >= 8)");
    }
    std::map<int, Tensor> raw;
    raw[2] = deconv2x2(gelu(grid_layer_norm(deconv2x2(x, params.up4_a), params.up4_ln)), params.up4_b);
    raw[3] = deconv2x2(x, params.up2);
    raw[4] = x;
    raw[5] = maxpool2x2(x);
    FeaturePyramid pyr;
    for (int l : kLevels) {
        const auto& lp = params.level.at(l);
        Tensor y = grid_layer_norm(conv1x1(raw[l], lp.lateral), lp.lateral_ln);
        y = grid_layer_norm(conv3x3(y, lp.output), lp.output_ln);
        pyr.levels[l] = y;
    }
    return pyr;
}

RcnnHeadParams RcnnHeadParams::init(int roi_size, int channels, int hidden, int joint, Rng& rng) {
    RcnnHeadParams h;
    h.fc1 = Linear::init(roi_size * roi_size * channels, hidden, rng);
    h.ln1 = LayerNorm::init(hidden);
    h.fc2 = Linear::init(hidden, hidden, rng);
    h.ln2 = LayerNorm::init(hidden);
    h.embed = Linear::init(hidden, joint, rng);
    h.box = Linear::init(hidden, 4, rng);
    // Small initial box deltas keep early proposals near their anchors.
    for (double& v : h.box.w.mutable_data()) v *= 0.01;
    return h;
}

Tensor rcnn_hidden(const Tensor& roi_features, const RcnnHeadParams& head) {
    const int n = roi_features.dim(0);
    Tensor flat = reshape(roi_features, {n, static_cast<int>(roi_features.numel() / std::max(n, 1))});
    Tensor h = gelu(head.ln1(head.fc1(flat)));
    return gelu(head.ln2(head.fc2(h)));
}

Tensor rcnn_embed(const Tensor& hidden, const RcnnHeadParams& head) { return l2_normalize_rows(head.embed(hidden)); }

RegionEmbedding rcnn_head_embed(const Tensor& roi_features, const RcnnHeadParams& head, int level, const NormBox& box) {
    Tensor f = roi_features.ndim() == 3
                   ? reshape(roi_features, {1, roi_features.dim(0), roi_features.dim(1), roi_features.dim(2)})
                   : roi_features;
    if (f.dim(0) != 1) throw std::invalid_argument("rcnn_head_embed: expected a single RoI");
    Tensor e = rcnn_embed(rcnn_hidden(f, head), head);
    return {std::vector<double>(e.data().begin(), e.data().end()), level, box};
}

int assign_level(const NormBox& box, int image_size, double canonical_px) {
    const double side = std::sqrt(std::max(box.area(), 1e-12)) * image_size;
    const int l = static_cast<int>(std::floor(4.0 + std::log2(side / canonical_px)));
    return std::clamp(l, 2, 5);
}

std::vector<int> nms(std::span<const NormBox> boxes, std::span<const double> scores, double iou_threshold) {
    if (boxes.size() != scores.size()) throw std::invalid_argument("nms: boxes and scores differ in length");
    std::vector<int> order(boxes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
    std::vector<int> keep;
    for (int i : order) {
        bool suppressed = false;
        for (int k : keep) {
            if (iou(boxes[i], boxes[k]) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) keep.push_back(i);
    }
    return keep;
}

AnchorSet make_anchors(const std::map<int, int>& level_sides, int image_size, double anchor_scale) {
    AnchorSet a;
    for (int l : kLevels) {
        a.level_offset.push_back(static_cast<int>(a.boxes.size()));
        const int side = level_sides.at(l);
        const double stride = static_cast<double>(image_size) / side;
        const double size = anchor_scale * stride / image_size;
        for (int i = 0; i < side; ++i)
            for (int j = 0; j < side; ++j) {
                const double cy = (i + 0.5) / side, cx = (j + 0.5) / side;
                for (double r : kAspectRatios) {
                    // r = height / width at constant area.
                    const double h = size * std::sqrt(r), w = size / std::sqrt(r);
                    a.boxes.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
                }
            }
    }
    a.level_offset.push_back(static_cast<int>(a.boxes.size()));
    return a;
}

RpnParams RpnParams::init(int channels, Rng& rng) {
    RpnParams p;
    p.conv = Linear::init(9 * channels, channels, rng);
    p.cls = Linear::init(channels, 3, rng);
    p.reg = Linear::init(channels, 12, rng);
    for (double& v : p.cls.w.mutable_data()) v *= 0.1;
    for (double& v : p.reg.w.mutable_data()) v *= 0.01;
    return p;
}

RpnOutput rpn_forward(const FeaturePyramid& pyramid, const RpnParams& params, int image_size, double anchor_scale) {
    const int b = pyramid.batch();
    std::map<int, int> sides;
    std::vector<Tensor> logits_parts, delta_parts;
    for (int l : kLevels) {
        const Tensor& f = pyramid.at(l);
        sides[l] = f.dim(1);
        Tensor h = relu(conv3x3(f, params.conv));
        const int cells = f.dim(1) * f.dim(2);
        // (b * cells, 3) -> per image (cells * 3)
        logits_parts.push_back(reshape(conv1x1(h, params.cls), {b, cells * 3}));
        delta_parts.push_back(reshape(conv1x1(h, params.reg), {b, cells * 12}));
    }
    // Interleave levels per image: concat along columns via transpose trick.
    auto concat_cols = [b](const std::vector<Tensor>& parts) {
        std::vector<Tensor> t;
        for (const auto& p : parts) t.push_back(reshape(transpose(p), {p.cols(), b}));
        return transpose(concat_rows(t));
    };
    RpnOutput out;
    out.objectness = concat_cols(logits_parts);
    Tensor d = concat_cols(delta_parts);
    out.deltas = reshape(d, {b, d.cols() / 4, 4});
    out.anchors = make_anchors(sides, image_size, anchor_scale);
    return out;
}

std::vector<Proposal> proposals_from(const RpnOutput& out, int image, const ProposalOptions& opt) {
    const int A = static_cast<int>(out.anchors.boxes.size());
    auto logits = out.objectness.data().subspan(static_cast<std::size_t>(image) * A, A);
    auto deltas = out.deltas.data().subspan(static_cast<std::size_t>(image) * A * 4, static_cast<std::size_t>(A) * 4);

    std::vector<int> cand;
    for (std::size_t li = 0; li + 1 < out.anchors.level_offset.size(); ++li) {
        const int lo = out.anchors.level_offset[li], hi = out.anchors.level_offset[li + 1];
        std::vector<int> idx(hi - lo);
        std::iota(idx.begin(), idx.end(), lo);
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return logits[a] > logits[b]; });
        if (static_cast<int>(idx.size()) > opt.pre_nms_per_level) idx.resize(opt.pre_nms_per_level);
        cand.insert(cand.end(), idx.begin(), idx.end());
    }
    std::sort(cand.begin(), cand.end());
    std::stable_sort(cand.begin(), cand.end(), [&](int a, int b) { return logits[a] > logits[b]; });

    std::vector<NormBox> boxes;
    std::vector<double> scores;
    for (int a : cand) {
        const std::array<double, 4> d{deltas[a * 4], deltas[a * 4 + 1], deltas[a * 4 + 2], deltas[a * 4 + 3]};
        NormBox bx = decode_deltas(d, out.anchors.boxes[a]).clipped();
        if (bx.width() < opt.min_size || bx.height() < opt.min_size) continue;
        boxes.push_back(bx);
        scores.push_back(sigmoid(logits[a]));
    }
    std::vector<Proposal> props;
    for (int k : nms(boxes, scores, opt.nms_iou)) {
        if (static_cast<int>(props.size()) >= opt.top_k) break;
        props.push_back({boxes[k], scores[k]});
    }
    return props;
}

std::vector<std::vector<Proposal>> rpn_propose(const FeaturePyramid& pyramid, const RpnParams& params,
                                               int image_size, const ProposalOptions& opt) {
    if (opt.top_k < 1) throw std::invalid_argument("rpn_propose: top_k must be >= 1");
    NoGradGuard guard;
    RpnOutput out = rpn_forward(pyramid, params, image_size, opt.anchor_scale);
    std::vector<std::vector<Proposal>> all;
    for (int b = 0; b < pyramid.batch(); ++b) all.push_back(proposals_from(out, b, opt));
    return all;
}

}  // namespace dito::det
