#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dito/box.hpp"
#include "dito/nn.hpp"
#include "dito/ops.hpp"

namespace dito::vit {

struct ViTConfig {
    int patch_size = 8;
    int embed_dim = 64;
    int depth = 4;
    int heads = 4;
    int grid = 2;           // window grid K per side
    int global_layers = 1;  // L evenly spaced global-attention blocks
    int image_size = 64;
    int joint_dim = 64;
    int mlp_ratio = 4;

    int token_side() const { return image_size / patch_size; }
    // Window cell size M in tokens.
    int cell_size() const { return token_side() / grid; }
    // Throws std::invalid_argument naming the first violated invariant.
    void validate() const;
};

// Block indices that use global attention: ceil(D * (i + 1) / L) - 1.
std::vector<int> global_layer_indices(int depth, int global_layers);

struct BlockParams {
    LayerNorm ln1;
    Linear qkv;
    Linear proj;
    LayerNorm ln2;
    Linear fc1;
    Linear fc2;

    static BlockParams init(int dim, int mlp_ratio, Rng& rng);

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        ln1.visit(f, prefix + "ln1.");
        qkv.visit(f, prefix + "qkv.");
        proj.visit(f, prefix + "proj.");
        ln2.visit(f, prefix + "ln2.");
        fc1.visit(f, prefix + "fc1.");
        fc2.visit(f, prefix + "fc2.");
    }
};

// Positional-embedding table at full (detection) resolution.
struct PosEmbed {
    int full_grid_side = 0;
    Tensor table;  // (side, side, embed_dim)

    static PosEmbed init(int side, int dim, Rng& rng);
    // Table region under `crop` bilinearly resized to out_side x out_side.
    Tensor resized(int out_side, const NormBox& crop = NormBox::whole()) const;
};

struct ViTParams {
    Linear patch;  // (patch^2 * 3) -> embed_dim
    PosEmbed pos;
    std::vector<BlockParams> blocks;
    LayerNorm final_ln;
    Linear image_proj;  // embed_dim -> joint_dim, no bias

    static ViTParams init(const ViTConfig& cfg, Rng& rng);

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        patch.visit(f, prefix + "patch.");
        f(prefix + "pos.table", pos.table);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(f, prefix + "blocks." + std::to_string(i) + ".");
        final_ln.visit(f, prefix + "final_ln.");
        image_proj.visit(f, prefix + "image_proj.");
    }
};

// Images (b, H, W, 3) -> tokens (b, H/p, W/p, C) with positional embedding.
// With no crops the whole table is resized to the token grid; otherwise one
// crop per image selects the table region resized onto that image's grid.
Tensor patchify(const Tensor& images, const ViTConfig& cfg, const ViTParams& params,
                std::span<const NormBox> crops = {});
// Single image (H, W, 3) -> (H/p, W/p, C).
Tensor patchify_one(const Tensor& image, const ViTConfig& cfg, const ViTParams& params,
                    const std::optional<NormBox>& crop = std::nullopt);

// Token rows of a (b, side, side) batch grouped into grid x grid windows.
RowGroups window_groups(int batch, int side, int grid);

// One pre-norm transformer block whose self-attention is restricted to the
// K x K window partition of each token grid (K = 1 is global attention).
Tensor window_attend(const Tensor& tokens, const BlockParams& block, int grid, int heads);

// All blocks (global at global_layer_indices, windowed elsewhere) and the
// final layer norm. Accepts (side, side, C) or (b, side, side, C).
Tensor vit_forward(const Tensor& tokens, const ViTConfig& cfg, const ViTParams& params);

// Mean over tokens -> image_proj -> L2 normalize. Returns (b, joint_dim).
Tensor pool_image_embedding(const Tensor& tokens, const ViTParams& params);

// Per-token projection into the joint space, L2 normalized: (b*h*w, joint).
Tensor project_tokens(const Tensor& tokens, const ViTParams& params);

// Random crop for cropped positional embeddings: scale ~ U(scale_lo, 1),
// aspect ~ U(aspect_lo, aspect_hi), uniformly placed inside the unit square.
NormBox sample_pe_crop(Rng& rng, double scale_lo = 0.3, double aspect_lo = 0.5, double aspect_hi = 2.0);

}  // namespace dito::vit
