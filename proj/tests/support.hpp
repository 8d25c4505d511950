// Shared helpers for the unit and acceptance suites: random inputs and
// independent reference implementations written with plain loops.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "dito/box.hpp"
#include "dito/det_heads.hpp"
#include "dito/gradcheck.hpp"
#include "dito/nn.hpp"
#include "dito/ovd.hpp"
#include "dito/ops.hpp"
#include "dito/pretrain.hpp"
#include "dito/roi_align.hpp"
#include "dito/swl.hpp"
#include "dito/text.hpp"
#include "dito/vit.hpp"

namespace dito::testing {

inline Tensor rand_tensor(Shape shape, Rng& rng, bool requires_grad = false, double stddev = 1.0) {
    return randn(std::move(shape), stddev, rng, requires_grad);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) { return max_abs_diff(a.data(), b.data()); }

// Largest |a - b| / max(|b|, floor).
inline double max_rel_diff(std::span<const double> a, std::span<const double> b, double floor = 1e-3) {
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]) / std::max(std::abs(b[i]), floor));
    return m;
}

inline NormBox random_box(Rng& rng, double min_side = 0.05) {
    const double w = rng.uniform(min_side, 1.0), h = rng.uniform(min_side, 1.0);
    const double x0 = rng.uniform(0.0, 1.0 - w), y0 = rng.uniform(0.0, 1.0 - h);
    return {x0, y0, x0 + w, y0 + h};
}

// ---- reference kernels ----

// Bilinear read of an (h, w, c) array at continuous cell coordinates.
inline std::vector<double> bilinear_ref(std::span<const double> g, int h, int w, int c, double y, double x) {
    y = std::min(std::max(y, 0.0), h - 1.0);
    x = std::min(std::max(x, 0.0), w - 1.0);
    const int yl = static_cast<int>(y), xl = static_cast<int>(x);
    const int yh = yl + 1 < h ? yl + 1 : yl, xh = xl + 1 < w ? xl + 1 : xl;
    const double fy = y - yl, fx = x - xl;
    std::vector<double> out(c);
    for (int k = 0; k < c; ++k) {
        auto v = [&](int i, int j) { return g[(static_cast<std::size_t>(i) * w + j) * c + k]; };
        const double top = v(yl, xl) + fx * (v(yl, xh) - v(yl, xl));
        const double bot = v(yh, xl) + fx * (v(yh, xh) - v(yh, xl));
        out[k] = top + fy * (bot - top);
    }
    return out;
}

// RoI-Align by explicit enumeration of every sample point in pixel space.
inline std::vector<double> roi_align_ref(std::span<const double> g, int h, int w, int c, const NormBox& box, int out,
                                         int spb) {
    std::vector<double> res(static_cast<std::size_t>(out) * out * c, 0.0);
    const double bin_h = box.height() * h / out, bin_w = box.width() * w / out;
    for (int by = 0; by < out; ++by)
        for (int bx = 0; bx < out; ++bx)
            for (int sy = 0; sy < spb; ++sy)
                for (int sx = 0; sx < spb; ++sx) {
                    // Sample position in pixel units, then to cell-center coordinates.
                    const double py = box.y0 * h + bin_h * (by + (sy + 0.5) / spb);
                    const double px = box.x0 * w + bin_w * (bx + (sx + 0.5) / spb);
                    auto v = bilinear_ref(g, h, w, c, py - 0.5, px - 0.5);
                    for (int k = 0; k < c; ++k)
                        res[(static_cast<std::size_t>(by) * out + bx) * c + k] += v[k] / (spb * spb);
                }
    return res;
}

inline double iou_ref(const NormBox& a, const NormBox& b) {
    const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const double inter = iw * ih;
    const double uni = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    return uni > 0 ? inter / uni : 0.0;
}

// Suppression set as a fixed point: a box survives iff no surviving box
// ranked above it overlaps it by more than t. Iterates until stable.
inline std::vector<int> nms_ref(const std::vector<NormBox>& boxes, const std::vector<double>& scores, double t) {
    const int n = static_cast<int>(boxes.size());
    auto ranks_above = [&](int j, int i) { return scores[j] > scores[i] || (scores[j] == scores[i] && j < i); };
    std::vector<char> keep(n, 1);
    for (bool changed = true; changed;) {
        changed = false;
        std::vector<char> next(n, 1);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j)
                if (j != i && keep[j] && ranks_above(j, i) && iou_ref(boxes[i], boxes[j]) > t) next[i] = 0;
        if (next != keep) keep = next, changed = true;
    }
    std::vector<int> out;
    for (int i = 0; i < n; ++i)
        if (keep[i]) out.push_back(i);
    std::sort(out.begin(), out.end(), [&](int a, int b) { return ranks_above(a, b); });
    return out;
}

inline std::vector<double> softmax_ref(std::span<const double> row) {
    long double m = -std::numeric_limits<long double>::infinity(), s = 0;
    for (double v : row) m = std::max<long double>(m, v);
    std::vector<long double> e;
    for (double v : row) e.push_back(std::exp(static_cast<long double>(v) - m)), s += e.back();
    std::vector<double> out;
    for (auto v : e) out.push_back(static_cast<double>(v / s));
    return out;
}

// Symmetric InfoNCE by double loops in long double.
inline double info_nce_ref(const Tensor& img, const Tensor& txt, double tau) {
    const int b = img.rows(), d = img.cols();
    std::vector<std::vector<long double>> s(b, std::vector<long double>(b));
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < b; ++j) {
            long double dot = 0;
            for (int k = 0; k < d; ++k) dot += static_cast<long double>(img.at(i * d + k)) * txt.at(j * d + k);
            s[i][j] = dot / tau;
        }
    long double i2t = 0, t2i = 0;
    for (int i = 0; i < b; ++i) {
        long double zr = 0, zc = 0;
        for (int j = 0; j < b; ++j) zr += std::exp(s[i][j]), zc += std::exp(s[j][i]);
        i2t += -(s[i][i] - std::log(zr));
        t2i += -(s[i][i] - std::log(zc));
    }
    return static_cast<double>((i2t / b + t2i / b) / 2);
}

// One transformer block where attention runs over all tokens of a (1, s, s, c)
// grid but logits between different K x K windows are masked to -inf.
inline Tensor masked_block_ref(const Tensor& tokens, const vit::BlockParams& blk, int grid, int heads) {
    NoGradGuard guard;
    const int s = tokens.dim(1), c = tokens.dim(3), n = s * s, m = s / grid, dh = c / heads;
    Tensor x = reshape(tokens, {n, c});
    Tensor qkv = blk.qkv(blk.ln1(x));
    auto win = [&](int r) { return (r / s) / m * grid + (r % s) / m; };
    std::vector<double> att(static_cast<std::size_t>(n) * c, 0.0);
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < n; ++i) {
            std::vector<double> logit(n, -std::numeric_limits<double>::infinity());
            for (int j = 0; j < n; ++j) {
                if (win(i) != win(j)) continue;
                double dot = 0;
                for (int k = 0; k < dh; ++k) dot += qkv.at(i * 3 * c + h * dh + k) * qkv.at(j * 3 * c + c + h * dh + k);
                logit[j] = dot / std::sqrt(static_cast<double>(dh));
            }
            auto p = softmax_ref(logit);
            for (int j = 0; j < n; ++j)
                for (int k = 0; k < dh; ++k) att[i * c + h * dh + k] += p[j] * qkv.at(j * 3 * c + 2 * c + h * dh + k);
        }
    Tensor y = add(x, blk.proj(Tensor::from({n, c}, att)));
    y = add(y, blk.fc2(gelu(blk.fc1(blk.ln2(y)))));
    return reshape(y, tokens.shape());
}

// ---- gradient cases ----

struct GradProblem {
    std::function<Tensor()> f;
    std::vector<Tensor> params;
    std::size_t coords = 64;
};

struct GradCase {
    std::string name;
    std::function<GradProblem(Rng&)> make;
};

// Random fixed weights turn any output into a scalar with a dense gradient.
inline Tensor weigh(const Tensor& out, const Tensor& w) { return sum(mul(out, w)); }

inline Tensor weights_like(const Shape& s, Rng& rng) { return rand_tensor(s, rng, false); }

// Values bounded away from zero, for ops with a kink or a pole there.
inline Tensor away_from_zero(Shape s, Rng& rng, bool requires_grad = true) {
    std::vector<double> v(shape_numel(s));
    for (auto& x : v) x = (rng.uniform(0.0, 1.0) < 0.5 ? -1 : 1) * rng.uniform(0.2, 2.0);
    return Tensor::from(std::move(s), std::move(v), requires_grad);
}

// Elementwise and shape ops: f(x) = sum(op(x) * w).
inline GradCase unary_case(std::string name, std::function<Tensor(const Tensor&)> op, Shape s, bool avoid_zero = false) {
    return {name, [op, s, avoid_zero](Rng& rng) {
                Tensor x = avoid_zero ? away_from_zero(s, rng) : rand_tensor(s, rng, true);
                Tensor probe = op(x);
                Tensor w = weights_like(probe.shape(), rng);
                return GradProblem{[=] { return weigh(op(x), w); }, {x}};
            }};
}

inline std::vector<GradCase> op_grad_cases() {
    std::vector<GradCase> cases;
    auto binary = [&](std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op, Shape sa, Shape sb) {
        cases.push_back({name, [op, sa, sb](Rng& rng) {
                             Tensor a = rand_tensor(sa, rng, true), b = rand_tensor(sb, rng, true);
                             Tensor w = weights_like(op(a, b).shape(), rng);
                             return GradProblem{[=] { return weigh(op(a, b), w); }, {a, b}};
                         }});
    };
    binary("add", [](auto& a, auto& b) { return add(a, b); }, {3, 4}, {3, 4});
    binary("sub", [](auto& a, auto& b) { return sub(a, b); }, {3, 4}, {3, 4});
    binary("mul", [](auto& a, auto& b) { return mul(a, b); }, {3, 4}, {3, 4});
    binary("mul_scalar", [](auto& a, auto& b) { return mul_scalar(a, b); }, {3, 4}, {1});
    binary("add_row_bias", [](auto& a, auto& b) { return add_row_bias(a, b); }, {5, 4}, {4});
    binary("add_tiled", [](auto& a, auto& b) { return add_tiled(a, b); }, {6, 4}, {2, 4});
    binary("matmul", [](auto& a, auto& b) { return matmul(a, b); }, {3, 5}, {5, 4});
    binary("matmul_nt", [](auto& a, auto& b) { return matmul_nt(a, b); }, {3, 5}, {4, 5});
    cases.push_back({"linear", [](Rng& rng) {
                         Tensor x = rand_tensor({4, 5}, rng, true), w = rand_tensor({5, 3}, rng, true),
                                b = rand_tensor({3}, rng, true), p = weights_like({4, 3}, rng);
                         return GradProblem{[=] { return weigh(linear(x, w, b), p); }, {x, w, b}};
                     }});
    cases.push_back(unary_case("scale", [](const Tensor& x) { return scale(x, -1.7); }, {3, 4}));
    cases.push_back(unary_case("add_scalar", [](const Tensor& x) { return add_scalar(x, 0.3); }, {3, 4}));
    cases.push_back(unary_case("exp", [](const Tensor& x) { return exp(x); }, {3, 4}));
    cases.push_back(unary_case("log", [](const Tensor& x) { return log(add_scalar(mul(x, x), 0.1)); }, {3, 4}));
    cases.push_back(unary_case("gelu", [](const Tensor& x) { return gelu(x); }, {3, 4}));
    cases.push_back(unary_case("relu", [](const Tensor& x) { return relu(x); }, {3, 4}, true));
    cases.push_back(unary_case("transpose", [](const Tensor& x) { return transpose(x); }, {3, 4}));
    cases.push_back(unary_case("reshape", [](const Tensor& x) { return reshape(x, {2, 6}); }, {3, 4}));
    cases.push_back(unary_case("gather_rows", [](const Tensor& x) {
        const std::vector<int> idx{2, 0, -1, 2, 1};
        return gather_rows(x, idx);
    }, {3, 4}));
    cases.push_back(unary_case("concat_rows", [](const Tensor& x) { return concat_rows({x, scale(x, 2.0)}); }, {3, 4}));
    cases.push_back(unary_case("slice_rows", [](const Tensor& x) { return slice_rows(x, 1, 2); }, {4, 3}));
    cases.push_back(unary_case("slice_cols", [](const Tensor& x) { return slice_cols(x, 1, 2); }, {3, 4}));
    cases.push_back(unary_case("softmax_rows", [](const Tensor& x) { return softmax_rows(x); }, {3, 5}));
    cases.push_back(unary_case("log_softmax_rows", [](const Tensor& x) { return log_softmax_rows(x); }, {3, 5}));
    cases.push_back({"layer_norm", [](Rng& rng) {
                         Tensor x = rand_tensor({4, 6}, rng, true), g = rand_tensor({6}, rng, true),
                                b = rand_tensor({6}, rng, true), w = weights_like({4, 6}, rng);
                         return GradProblem{[=] { return weigh(layer_norm(x, g, b), w); }, {x, g, b}};
                     }});
    cases.push_back(unary_case("l2_normalize_rows", [](const Tensor& x) { return l2_normalize_rows(x); }, {3, 4}));
    cases.push_back(unary_case("sum", [](const Tensor& x) { return reshape(sum(x), {1}); }, {3, 4}));
    cases.push_back(unary_case("mean", [](const Tensor& x) { return reshape(mean(x), {1}); }, {3, 4}));
    cases.push_back(unary_case("group_mean", [](const Tensor& x) {
        RowGroups g;
        g.add(std::vector<int>{0, 2});
        g.add(std::vector<int>{1, 3, 4});
        return group_mean(x, g);
    }, {5, 3}));
    cases.push_back(unary_case("group_max", [](const Tensor& x) {
        RowGroups g;
        g.add(std::vector<int>{0, 2});
        g.add(std::vector<int>{1, 3, 4});
        return group_max(x, g);
    }, {5, 3}));
    cases.push_back(unary_case("roll2d", [](const Tensor& x) { return roll2d(x, 1, -2); }, {2, 3, 4, 2}));
    cases.push_back({"bilinear_sample", [](Rng& rng) {
                         Tensor g = rand_tensor({4, 5, 3}, rng, true), w = weights_like({3}, rng);
                         const double y = rng.uniform(-0.5, 3.5), x = rng.uniform(-0.5, 4.5);
                         return GradProblem{[=] { return weigh(bilinear_sample(g, y, x), w); }, {g}};
                     }});
    cases.push_back(unary_case("multihead_attention", [](const Tensor& x) {
        return multihead_attention(x, RowGroups::contiguous(2, 3), 2);
    }, {6, 12}));
    cases.push_back(unary_case("maxpool2x2", [](const Tensor& x) { return maxpool2x2(x); }, {1, 4, 4, 2}));
    cases.push_back(unary_case("nll_rows", [](const Tensor& x) {
        const std::vector<int> t{1, 0, 3};
        return reshape(nll_rows(log_softmax_rows(x), t), {1});
    }, {3, 4}));
    cases.push_back(unary_case("cross_entropy_rows", [](const Tensor& x) {
        const std::vector<int> t{2, 0, 1};
        return reshape(cross_entropy_rows(x, t), {1});
    }, {3, 4}));
    cases.push_back(unary_case("bce_with_logits_sum", [](const Tensor& x) {
        const std::vector<double> t{1, 0, 1, 1, 0, 0};
        return reshape(bce_with_logits_sum(x, t), {1});
    }, {6, 1}));
    cases.push_back(unary_case("smooth_l1_sum", [](const Tensor& x) {
        // Targets of zero keep |d| = |x| >= 0.2 away from the beta kink at 0.1.
        const std::vector<double> t(8, 0.0);
        return reshape(smooth_l1_sum(add(x, x), t, 0.1), {1});
    }, {2, 4}, true));
    cases.push_back({"roi_align", [](Rng& rng) {
                         Tensor g = rand_tensor({2, 5, 6, 3}, rng, true);
                         std::vector<NormBox> boxes{random_box(rng), random_box(rng), random_box(rng)};
                         std::vector<int> img{0, 1, 1};
                         Tensor w = weights_like({3, 2, 2, 3}, rng);
                         return GradProblem{[=] { return weigh(roi_align_batched(g, boxes, img, 2, 2), w); }, {g}};
                     }});
    cases.push_back({"crop_resize", [](Rng& rng) {
                         Tensor g = rand_tensor({5, 5, 2}, rng, true);
                         NormBox b = random_box(rng);
                         Tensor w = weights_like({3, 3, 2}, rng);
                         return GradProblem{[=] { return weigh(crop_resize(g, b, 3), w); }, {g}};
                     }});
    cases.push_back({"conv3x3", [](Rng& rng) {
                         Tensor x = rand_tensor({1, 3, 3, 2}, rng, true);
                         Linear c = Linear::init(18, 3, rng);
                         Tensor w = weights_like({1, 3, 3, 3}, rng);
                         return GradProblem{[=] { return weigh(det::conv3x3(x, c), w); }, {x, c.w, c.b}};
                     }});
    cases.push_back({"conv1x1", [](Rng& rng) {
                         Tensor x = rand_tensor({1, 2, 3, 2}, rng, true);
                         Linear c = Linear::init(2, 3, rng);
                         Tensor w = weights_like({1, 2, 3, 3}, rng);
                         return GradProblem{[=] { return weigh(det::conv1x1(x, c), w); }, {x, c.w, c.b}};
                     }});
    cases.push_back({"deconv2x2", [](Rng& rng) {
                         Tensor x = rand_tensor({1, 2, 2, 2}, rng, true);
                         Linear c = Linear::init(2, 12, rng);
                         Tensor w = weights_like({1, 4, 4, 3}, rng);
                         return GradProblem{[=] { return weigh(det::deconv2x2(x, c), w); }, {x, c.w, c.b}};
                     }});
    cases.push_back({"grid_layer_norm", [](Rng& rng) {
                         Tensor x = rand_tensor({1, 2, 2, 4}, rng, true);
                         LayerNorm ln = LayerNorm::init(4);
                         Tensor w = weights_like({1, 2, 2, 4}, rng);
                         return GradProblem{[=] { return weigh(det::grid_layer_norm(x, ln), w); }, {x, ln.gamma, ln.beta}};
                     }});
    cases.push_back({"info_nce", [](Rng& rng) {
                         Tensor a = rand_tensor({4, 5}, rng, true), b = rand_tensor({4, 5}, rng, true);
                         Tensor lt = Tensor::from({1}, {std::log(0.5)}, true);
                         return GradProblem{
                             [=] { return dop::info_nce(l2_normalize_rows(a), l2_normalize_rows(b), lt); }, {a, b, lt}};
                     }});
    return cases;
}

// Small model configurations shared by the composed-gradient checks.
inline vit::ViTConfig toy_vit(int image = 32, int patch = 4, int grid = 2, int depth = 2, int globals = 1) {
    vit::ViTConfig c;
    c.image_size = image;
    c.patch_size = patch;
    c.embed_dim = 8;
    c.depth = depth;
    c.heads = 2;
    c.grid = grid;
    c.global_layers = globals;
    c.joint_dim = 6;
    c.mlp_ratio = 2;
    return c;
}

inline text::TextConfig toy_text(int vocab) {
    text::TextConfig c;
    c.vocab_size = vocab;
    c.dim = 8;
    c.layers = 1;
    c.heads = 2;
    c.max_len = 6;
    c.joint_dim = 6;
    c.mlp_ratio = 2;
    return c;
}

inline std::vector<Tensor> param_tensors(const ParamList& p) {
    std::vector<Tensor> out;
    for (const auto& [n, t] : p) out.push_back(t);
    return out;
}

// Gradient checks of composed model pieces.
inline std::vector<GradCase> model_grad_cases() {
    std::vector<GradCase> cases;
    cases.push_back({"patchify", [](Rng& rng) {
                         auto cfg = toy_vit(16, 4);
                         auto p = vit::ViTParams::init(cfg, rng);
                         Tensor img = rand_tensor({1, 16, 16, 3}, rng, true);
                         const NormBox crop{0.1, 0.2, 0.8, 0.9};
                         Tensor w = weights_like({1, 4, 4, 8}, rng);
                         std::vector<NormBox> crops{crop};
                         return GradProblem{[=] { return weigh(vit::patchify(img, cfg, p, crops), w); },
                                            {img, p.patch.w, p.pos.table}};
                     }});
    cases.push_back({"window_attend", [](Rng& rng) {
                         auto blk = vit::BlockParams::init(8, 2, rng);
                         Tensor x = rand_tensor({1, 4, 4, 8}, rng, true);
                         Tensor w = weights_like({1, 4, 4, 8}, rng);
                         auto ps = param_tensors(named_params(blk));
                         ps.push_back(x);
                         return GradProblem{[=] { return weigh(vit::window_attend(x, blk, 2, 2), w); }, ps, 16};
                     }});
    cases.push_back({"vit_forward", [](Rng& rng) {
                         auto cfg = toy_vit(16, 4);
                         auto p = vit::ViTParams::init(cfg, rng);
                         Tensor x = rand_tensor({1, 4, 4, 8}, rng, true);
                         Tensor w = weights_like({1, 4, 4, 8}, rng);
                         auto ps = param_tensors(named_params(p));
                         ps.push_back(x);
                         return GradProblem{[=] { return weigh(vit::vit_forward(x, cfg, p), w); }, ps, 8};
                     }});
    cases.push_back({"pool_image_embedding", [](Rng& rng) {
                         auto cfg = toy_vit(16, 4);
                         auto p = vit::ViTParams::init(cfg, rng);
                         Tensor x = rand_tensor({2, 4, 4, 8}, rng, true);
                         Tensor w = weights_like({2, 6}, rng);
                         return GradProblem{[=] { return weigh(vit::pool_image_embedding(x, p), w); }, {x, p.image_proj.w}};
                     }});
    cases.push_back({"swl_forward", [](Rng& rng) {
                         auto cfg = toy_vit(16, 4);
                         auto p = vit::ViTParams::init(cfg, rng);
                         Tensor x = rand_tensor({1, 4, 4, 8}, rng, true);
                         Tensor w = weights_like({1, 4, 4, 8}, rng);
                         swl::Backbone bb = [=](const Tensor& t) { return vit::vit_forward(t, cfg, p); };
                         auto ps = param_tensors(named_params(p));
                         ps.push_back(x);
                         return GradProblem{[=] { return weigh(swl::swl_forward(x, bb, 1), w); }, ps, 8};
                     }});
    cases.push_back({"build_fpn", [](Rng& rng) {
                         // Eight output channels keep the layer norms well conditioned
                         // for central differences at eps 1e-4.
                         auto fpn = det::FpnParams::init(4, 8, rng);
                         Tensor x = rand_tensor({1, 8, 8, 4}, rng, true);
                         auto pyr = det::build_fpn(x, fpn);
                         std::map<int, Tensor> w;
                         for (auto& [l, t] : pyr.levels) w[l] = weights_like(t.shape(), rng);
                         auto ps = param_tensors(named_params(fpn));
                         ps.push_back(x);
                         return GradProblem{[=] {
                                                auto pr = det::build_fpn(x, fpn);
                                                Tensor s = Tensor::scalar(0.0);
                                                for (auto& [l, t] : pr.levels) s = add(s, weigh(t, w.at(l)));
                                                return s;
                                            },
                                            ps, 8};
                     }});
    cases.push_back({"rcnn_head", [](Rng& rng) {
                         auto head = det::RcnnHeadParams::init(2, 3, 8, 6, rng);
                         Tensor x = rand_tensor({3, 2, 2, 3}, rng, true);
                         Tensor w = weights_like({3, 6}, rng), wb = weights_like({3, 4}, rng);
                         auto ps = param_tensors(named_params(head));
                         ps.push_back(x);
                         return GradProblem{[=] {
                                                Tensor h = det::rcnn_hidden(x, head);
                                                return add(weigh(det::rcnn_embed(h, head), w), weigh(head.box(h), wb));
                                            },
                                            ps, 16};
                     }});
    cases.push_back({"encode_text", [](Rng& rng) {
                         auto p = text::TextEncoderParams::init(toy_text(5), rng);
                         auto batch = text::TextBatch::from_sequences({{1, 2}, {3, 4, 1}}, 6);
                         Tensor w = weights_like({2, 6}, rng);
                         return GradProblem{[=] { return weigh(text::encode_text(batch, p), w); },
                                            param_tensors(named_params(p)), 8};
                     }});
    return cases;
}

// ---- composed training losses ----

// Phase-1 towers and phase-2 heads sized for gradient checks.
struct ToyDop {
    vit::ViTConfig cfg = toy_vit(32, 4, 1, 2, 1);
    dop::ClipModel frozen;
    dop::DopModel heads;
    dop::DopOptions opt;
    dop::Batch batch;

    explicit ToyDop(Rng& rng, int batch_size = 2) {
        frozen.image = vit::ViTParams::init(cfg, rng);
        frozen.text = text::TextEncoderParams::init(toy_text(6), rng);
        frozen.contrastive = dop::ContrastiveHead::init();
        heads.fpn = det::FpnParams::init(8, 8, rng);
        heads.head = det::RcnnHeadParams::init(2, 8, 8, 6, rng);
        heads.contrastive = dop::ContrastiveHead::init(0.5);
        opt.sampler.n_per_level = {{2, 3}, {3, 2}, {4, 2}, {5, 1}};
        opt.sampler.seed = 1;
        opt.roi_size = 2;
        opt.samples_per_bin = 1;
        std::vector<std::vector<int>> seqs;
        for (int i = 0; i < batch_size; ++i) seqs.push_back({1 + i % 5, 1 + (i + 2) % 5, 1 + (3 * i + 1) % 5});
        batch = {rand_tensor({batch_size, 32, 32, 3}, rng), text::TextBatch::from_sequences(seqs, 6)};
    }
    Tensor loss(std::uint64_t region_seed) const {
        Rng r(region_seed);
        return dop::dop_loss(batch, cfg, frozen, heads, opt, r);
    }
    // Smallest gap between the two largest region values of any pooled
    // coordinate. Max pooling has a kink where that gap is zero.
    double pooling_margin(std::uint64_t region_seed) const {
        NoGradGuard guard;
        Tensor tokens = vit::vit_forward(vit::patchify(batch.images, cfg, frozen.image), cfg, frozen.image);
        auto pyr = det::build_fpn(tokens, heads.fpn);
        Rng draw(region_seed);
        double margin = std::numeric_limits<double>::infinity();
        for (int level : opt.levels) {
            const Tensor& g = pyr.at(level);
            for (int i = 0; i < g.dim(0); ++i) {
                auto boxes = dop::sample_regions(opt.sampler, level, draw);
                std::vector<int> index(boxes.size(), i);
                Tensor e = det::rcnn_embed(
                    det::rcnn_hidden(roi_align_batched(g, boxes, index, opt.roi_size, opt.samples_per_bin), heads.head),
                    heads.head);
                const int n = e.rows(), d = e.cols();
                for (int k = 0; k < d && n > 1; ++k) {
                    double top = -std::numeric_limits<double>::infinity(), second = top;
                    for (int r = 0; r < n; ++r) {
                        const double v = e.at(r * d + k);
                        if (v > top) {
                            second = top;
                            top = v;
                        } else if (v > second) {
                            second = v;
                        }
                    }
                    margin = std::min(margin, top - second);
                }
            }
        }
        return margin;
    }
};

// Detector with a 3-category table (one novel) on 32 px images.
struct ToyDetector {
    ovd::DetectorModel model;
    ovd::CategoryTable table;
    ovd::DetectorConfig cfg;
    Tensor images;
    std::vector<ovd::GroundTruth> gts;

    ToyDetector(Rng& rng, bool quiet_rpn) {
        cfg.vit = toy_vit(32, 4, 2, 2, 1);
        cfg.swl.q = 0.5;
        cfg.roi_size = 2;
        cfg.samples_per_bin = 1;
        cfg.canonical_px = 16;
        cfg.det_temp = 0.2;
        cfg.vlm_temp = 0.2;
        model.backbone = vit::ViTParams::init(cfg.vit, rng);
        model.fpn = det::FpnParams::init(8, 8, rng);
        model.rpn = det::RpnParams::init(8, rng);
        model.head = det::RcnnHeadParams::init(2, 8, 8, 6, rng);
        table.names = {"a", "b", "c"};
        table.novel = {false, true, false};
        table.templates = {"{}"};
        table.embeddings = l2_normalize_rows(rand_tensor({3, 6}, rng));
        table.background = l2_normalize_rows(rand_tensor({1, 6}, rng)).detach();
        table.background.set_requires_grad(true);
        images = rand_tensor({2, 32, 32, 3}, rng);
        gts = {{{{0.1, 0.1, 0.5, 0.6}, {0.55, 0.2, 0.95, 0.7}}, {0, 2}}, {{{0.2, 0.3, 0.8, 0.9}}, {2}}};
        if (quiet_rpn) {
            // Constant objectness and zero deltas: proposals become a fixed
            // anchor subset that does not move under perturbation.
            for (Tensor* t : {&model.rpn.cls.w, &model.rpn.cls.b, &model.rpn.reg.w, &model.rpn.reg.b})
                for (double& v : t->mutable_data()) v = 0.0;
            cfg.train_proposals = {16, 0.7, 16, 1e-3, 4.0};
            cfg.rpn_batch = 32;
            cfg.rois_per_image = 12;
        } else {
            // Keep every anchor as a proposal so ordering never matters;
            // deltas stay zero so boxes do not move.
            for (Tensor* t : {&model.rpn.reg.w, &model.rpn.reg.b})
                for (double& v : t->mutable_data()) v = 0.0;
            cfg.train_proposals = {100000, 0.99, 100000, 1e-3, 4.0};
            cfg.rpn_batch = 100000;
            cfg.rois_per_image = 100000;
            cfg.roi_pos_fraction = 0.5;
        }
    }
    // Parameters whose perturbation leaves the proposal set unchanged.
    std::vector<Tensor> checked_params(bool quiet_rpn) {
        std::vector<Tensor> out;
        for (const auto& [n, t] : named_params(model)) {
            if (n.starts_with("rpn.reg.")) continue;
            if (quiet_rpn && n.starts_with("rpn.cls.")) continue;
            out.push_back(t);
        }
        out.push_back(table.background);
        return out;
    }
    Tensor loss() {
        ovd::FinetuneSchedule sched;
        sched.warmup = 0;
        sched.total = 10;
        ovd::FinetuneTrainer tr(model, table, cfg, sched, 5);
        return tr.loss(images, gts);
    }
};

inline GradCase dop_loss_case() {
    return {"dop_loss", [](Rng& rng) {
                auto toy = std::make_shared<ToyDop>(rng);
                // Region draws whose pooling sits on a kink make central
                // differences meaningless; redraw until every max is clear.
                std::uint64_t rs = rng.next();
                while (toy->pooling_margin(rs) < 1e-3) rs = rng.next();
                return GradProblem{[toy, rs] { return toy->loss(rs); }, param_tensors(named_params(toy->heads)), 4};
            }};
}

inline GradCase finetune_loss_case(bool quiet_rpn = true) {
    return {quiet_rpn ? "finetune_loss" : "finetune_loss_all_anchors", [quiet_rpn](Rng& rng) {
                auto toy = std::make_shared<ToyDetector>(rng, quiet_rpn);
                return GradProblem{[toy] { return toy->loss(); }, toy->checked_params(quiet_rpn), 3};
            }};
}

inline GradReport run_grad_case(const GradCase& c, std::uint64_t seed, double tol) {
    Rng rng(seed);
    GradProblem prob = c.make(rng);
    GradCheckOptions opt;
    opt.eps = 1e-4;
    opt.tol = tol;
    opt.max_coords_per_param = prob.coords;
    return finite_diff_check(c.name, prob.f, prob.params, opt);
}

}  // namespace dito::testing
