#include "dito/vit.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "dito/roi_align.hpp"

namespace dito::vit {

namespace {

void fail(const std::string& what) { throw std::invalid_argument("ViTConfig: " + what); }

// (b, h, w, c) view of a 3- or 4-d token tensor.
struct GridShape {
    int b, h, w, c;
};

GridShape grid_shape(const Tensor& t) {
    if (t.ndim() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
    if (t.ndim() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
    throw std::invalid_argument("expected a (h, w, c) or (b, h, w, c) token grid, got " + shape_str(t.shape()));
}

Tensor block_forward(const Tensor& x2d, const BlockParams& blk, const RowGroups& groups, int heads) {
    Tensor attn = multihead_attention(blk.qkv(blk.ln1(x2d)), groups, heads);
    Tensor x = add(x2d, blk.proj(attn));
    Tensor h = blk.fc2(gelu(blk.fc1(blk.ln2(x))));
    return add(x, h);
}

}  // namespace

void ViTConfig::validate() const {
    if (patch_size < 1 || embed_dim < 1 || depth < 1 || heads < 1 || grid < 1 || image_size < 1 || joint_dim < 1 ||
        mlp_ratio < 1) {
        fail("all sizes must be positive");
    }
    if (image_size % patch_size != 0) {
        fail("image_size " + std::to_string(image_size) + " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (image_size % (patch_size * grid) != 0) {
        fail("image_size " + std::to_string(image_size) + " not divisible by patch_size*grid " +
             std::to_string(patch_size * grid));
    }
    if (global_layers < 0 || global_layers > depth) fail("global_layers must lie in [0, depth]");
    if (embed_dim % heads != 0) fail("heads must divide embed_dim");
}

std::vector<int> global_layer_indices(int depth, int global_layers) {
    std::vector<int> idx;
    for (int i = 0; i < global_layers; ++i) {
        // ceil(D (i+1) / L) - 1 in integer arithmetic.
        idx.push_back((depth * (i + 1) + global_layers - 1) / global_layers - 1);
    }
    return idx;
}

BlockParams BlockParams::init(int dim, int mlp_ratio, Rng& rng) {
    BlockParams b;
    b.ln1 = LayerNorm::init(dim);
    b.qkv = Linear::init(dim, 3 * dim, rng);
    b.proj = Linear::init(dim, dim, rng);
    b.ln2 = LayerNorm::init(dim);
    b.fc1 = Linear::init(dim, mlp_ratio * dim, rng);
    b.fc2 = Linear::init(mlp_ratio * dim, dim, rng);
    return b;
}

PosEmbed PosEmbed::init(int side, int dim, Rng& rng) { return {side, randn({side, side, dim}, 0.02, rng)}; }

Tensor PosEmbed::resized(int out_side, const NormBox& crop) const {
    crop.validate();
    if (out_side == full_grid_side && crop == NormBox::whole()) return table;
    return crop_resize(table, crop, out_side);
}

ViTParams ViTParams::init(const ViTConfig& cfg, Rng& rng) {
    cfg.validate();
    ViTParams p;
    p.patch = Linear::init(cfg.patch_size * cfg.patch_size * 3, cfg.embed_dim, rng);
    p.pos = PosEmbed::init(cfg.token_side(), cfg.embed_dim, rng);
    for (int i = 0; i < cfg.depth; ++i) p.blocks.push_back(BlockParams::init(cfg.embed_dim, cfg.mlp_ratio, rng));
    p.final_ln = LayerNorm::init(cfg.embed_dim);
    p.image_proj = Linear::init(cfg.embed_dim, cfg.joint_dim, rng, false);
    return p;
}

Tensor patchify(const Tensor& images, const ViTConfig& cfg, const ViTParams& params, std::span<const NormBox> crops) {
    if (images.ndim() != 4 || images.dim(3) != 3) {
        throw std::invalid_argument("patchify: expected (b, H, W, 3) images, got " + shape_str(images.shape()));
    }
    const int b = images.dim(0), H = images.dim(1), W = images.dim(2), p = cfg.patch_size;
    if (H % p != 0 || W % p != 0) {
        throw std::invalid_argument("patchify: image " + std::to_string(H) + "x" + std::to_string(W) +
                                    " not divisible by patch size " + std::to_string(p));
    }
    if (!crops.empty() && static_cast<int>(crops.size()) != b) {
        throw std::invalid_argument("patchify: need one crop per image");
    }
    if (H != W) throw std::invalid_argument("patchify: images must be square");
    const int side = H / p;
    const int C = params.patch.out_dim();

    // Pixel rows ordered token-major then (dy, dx) within the patch.
    std::vector<int> idx(static_cast<std::size_t>(b) * H * W);
    std::size_t k = 0;
    for (int bi = 0; bi < b; ++bi)
        for (int ti = 0; ti < side; ++ti)
            for (int tj = 0; tj < side; ++tj)
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        idx[k++] = (bi * H + ti * p + dy) * W + tj * p + dx;
    Tensor pix = gather_rows(reshape(images, {b * H * W, 3}), idx);
    Tensor tok = params.patch(reshape(pix, {b * side * side, p * p * 3}));

    if (crops.empty()) {
        tok = add_tiled(tok, reshape(params.pos.resized(side), {side * side, C}));
    } else {
        std::vector<Tensor> pes;
        pes.reserve(b);
        for (const auto& crop : crops) pes.push_back(reshape(params.pos.resized(side, crop), {side * side, C}));
        tok = add(tok, concat_rows(pes));
    }
    return reshape(tok, {b, side, side, C});
}

Tensor patchify_one(const Tensor& image, const ViTConfig& cfg, const ViTParams& params,
                    const std::optional<NormBox>& crop) {
    if (image.ndim() != 3) throw std::invalid_argument("patchify_one: expected (H, W, 3) image");
    Tensor batch = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)});
    Tensor out = crop ? patchify(batch, cfg, params, std::span<const NormBox>(&*crop, 1)) : patchify(batch, cfg, params);
    return reshape(out, {out.dim(1), out.dim(2), out.dim(3)});
}

RowGroups window_groups(int batch, int side, int grid) {
    if (grid < 1 || side % grid != 0) {
        throw std::invalid_argument("window grid " + std::to_string(grid) + " does not divide token side " +
                                    std::to_string(side));
    }
    const int m = side / grid;
    RowGroups g;
    std::vector<int> rows(static_cast<std::size_t>(m) * m);
    for (int b = 0; b < batch; ++b)
        for (int wy = 0; wy < grid; ++wy)
            for (int wx = 0; wx < grid; ++wx) {
                std::size_t k = 0;
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < m; ++j) rows[k++] = (b * side + wy * m + i) * side + wx * m + j;
                g.add(rows);
            }
    return g;
}

Tensor window_attend(const Tensor& tokens, const BlockParams& block, int grid, int heads) {
    const auto gs = grid_shape(tokens);
    if (gs.h != gs.w) throw std::invalid_argument("window_attend: token grid must be square");
    const RowGroups groups = window_groups(gs.b, gs.h, grid);
    Tensor x = block_forward(reshape(tokens, {gs.b * gs.h * gs.w, gs.c}), block, groups, heads);
    return reshape(x, tokens.shape());
}

Tensor vit_forward(const Tensor& tokens, const ViTConfig& cfg, const ViTParams& params) {
    const auto gs = grid_shape(tokens);
    if (gs.h != gs.w) throw std::invalid_argument("vit_forward: token grid must be square");
    const auto globals = global_layer_indices(cfg.depth, cfg.global_layers);
    const RowGroups global_groups = window_groups(gs.b, gs.h, 1);
    // Windowed groups only exist when some block needs them.
    const bool any_windowed = static_cast<int>(globals.size()) < cfg.depth;
    const RowGroups windowed = any_windowed ? window_groups(gs.b, gs.h, cfg.grid) : RowGroups{};

    Tensor x = reshape(tokens, {gs.b * gs.h * gs.w, gs.c});
    for (int i = 0; i < cfg.depth; ++i) {
        const bool is_global = std::find(globals.begin(), globals.end(), i) != globals.end();
        x = block_forward(x, params.blocks.at(i), is_global ? global_groups : windowed, cfg.heads);
    }
    x = params.final_ln(x);
    return reshape(x, tokens.shape());
}

Tensor pool_image_embedding(const Tensor& tokens, const ViTParams& params) {
    const auto gs = grid_shape(tokens);
    Tensor rows = reshape(tokens, {gs.b * gs.h * gs.w, gs.c});
    Tensor pooled = group_mean(rows, RowGroups::contiguous(gs.b, gs.h * gs.w));
    return l2_normalize_rows(params.image_proj(pooled));
}

Tensor project_tokens(const Tensor& tokens, const ViTParams& params) {
    const auto gs = grid_shape(tokens);
    return l2_normalize_rows(params.image_proj(reshape(tokens, {gs.b * gs.h * gs.w, gs.c})));
}

NormBox sample_pe_crop(Rng& rng, double scale_lo, double aspect_lo, double aspect_hi) {
    const double s = rng.uniform(scale_lo, 1.0);
    const double a = rng.uniform(aspect_lo, aspect_hi);
    const double h = std::clamp(s * std::sqrt(a), 0.05, 1.0);
    const double w = std::clamp(s / std::sqrt(a), 0.05, 1.0);
    const double y0 = rng.uniform(0.0, 1.0 - h);
    const double x0 = rng.uniform(0.0, 1.0 - w);
    return NormBox{x0, y0, std::min(1.0, x0 + w), std::min(1.0, y0 + h)};
}

}  // namespace dito::vit
