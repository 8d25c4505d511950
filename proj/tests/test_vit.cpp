#include "doctest.h"
#include "support.hpp"

using namespace dito;
using namespace dito::testing;

namespace {

vit::ViTConfig cfg_for(int image, int patch, int grid, int depth, int globals, int dim = 8) {
    auto c = toy_vit(image, patch, grid, depth, globals);
    c.embed_dim = dim;
    return c;
}

void zero_pos(vit::ViTParams& p) {
    for (double& v : p.pos.table.mutable_data()) v = 0.0;
}

}  // namespace

TEST_SUITE("vit") {

TEST_CASE("patchify shapes") {
    Rng rng(1);
    auto cfg = cfg_for(32, 16, 1, 1, 1);
    auto p = vit::ViTParams::init(cfg, rng);
    Tensor t = vit::patchify(rand_tensor({1, 32, 32, 3}, rng), cfg, p);
    CHECK(t.shape() == Shape{1, 2, 2, 8});
    CHECK_THROWS(vit::patchify(rand_tensor({1, 30, 30, 3}, rng), cfg, p));
}

TEST_CASE("identity crop equals the plain path") {
    Rng rng(2);
    auto cfg = cfg_for(32, 8, 2, 2, 1);
    auto p = vit::ViTParams::init(cfg, rng);
    Tensor img = rand_tensor({2, 32, 32, 3}, rng);
    std::vector<NormBox> whole(2, NormBox::whole());
    CHECK(max_abs_diff(vit::patchify(img, cfg, p, whole), vit::patchify(img, cfg, p)) <= 1e-6);
}

TEST_CASE("cropped positional embedding is a bilinear resize of the crop") {
    Rng rng(3);
    auto cfg = cfg_for(64, 8, 2, 2, 1);
    auto p = vit::ViTParams::init(cfg, rng);
    for (double& v : p.patch.b.mutable_data()) v = 0.0;
    const NormBox crop{0.25, 0.25, 0.75, 0.75};
    std::vector<NormBox> crops{crop};
    Tensor t = vit::patchify(Tensor::zeros({1, 64, 64, 3}), cfg, p, crops);
    const int side = 8, c = 8;
    double worst = 0;
    for (int i = 0; i < side; ++i)
        for (int j = 0; j < side; ++j) {
            // Output cell centers spread evenly over the crop, in table cell units.
            const double y = (crop.y0 + (i + 0.5) * crop.height() / side) * side - 0.5;
            const double x = (crop.x0 + (j + 0.5) * crop.width() / side) * side - 0.5;
            auto ref = bilinear_ref(p.pos.table.data(), side, side, c, y, x);
            worst = std::max(worst, max_abs_diff(t.data().subspan((i * side + j) * c, c), ref));
        }
    CHECK(worst <= 1e-6);
}

TEST_CASE("global layer spacing rule") {
    CHECK(vit::global_layer_indices(8, 4) == std::vector<int>{1, 3, 5, 7});
    CHECK(vit::global_layer_indices(4, 4) == std::vector<int>{0, 1, 2, 3});
    CHECK(vit::global_layer_indices(12, 4) == std::vector<int>{2, 5, 8, 11});
    CHECK(vit::global_layer_indices(4, 1) == std::vector<int>{3});
    CHECK(vit::global_layer_indices(4, 0).empty());
}

TEST_CASE("one window equals global attention") {
    Rng rng(4);
    auto blk = vit::BlockParams::init(8, 2, rng);
    Tensor x = rand_tensor({1, 4, 4, 8}, rng);
    CHECK(max_abs_diff(vit::window_attend(x, blk, 1, 2), masked_block_ref(x, blk, 1, 2)) <= 1e-6);
}

TEST_CASE("two windows match the masked-attention oracle") {
    Rng rng(5);
    for (int t = 0; t < 5; ++t) {
        auto blk = vit::BlockParams::init(8, 2, rng);
        Tensor x = rand_tensor({1, 4, 4, 8}, rng);
        Tensor y = vit::window_attend(x, blk, 2, 2);
        CHECK(max_abs_diff(y, masked_block_ref(x, blk, 2, 2)) <= 1e-6);
        // Token (3, 3) sits in another window than (0, 0).
        Tensor xp = x.clone(false);
        for (int k = 0; k < 8; ++k) xp.mutable_data()[(3 * 4 + 3) * 8 + k] += 5.0;
        Tensor yp = vit::window_attend(xp, blk, 2, 2);
        CHECK(max_abs_diff(y.data().subspan(0, 8), yp.data().subspan(0, 8)) == 0.0);
        CHECK(max_abs_diff(y.data().subspan((3 * 4 + 3) * 8, 8), yp.data().subspan((3 * 4 + 3) * 8, 8)) > 1e-3);
    }
    CHECK_THROWS(vit::window_attend(rand_tensor({1, 6, 6, 8}, rng), vit::BlockParams::init(8, 2, rng), 4, 2));
}

TEST_CASE("window attention is equivariant to rolls by the cell size") {
    Rng rng(6);
    auto blk = vit::BlockParams::init(8, 2, rng);
    Tensor x = rand_tensor({1, 8, 8, 8}, rng);
    const int m = 4;
    Tensor a = vit::window_attend(roll2d(x, m, m), blk, 2, 2);
    Tensor b = roll2d(vit::window_attend(x, blk, 2, 2), m, m);
    CHECK(max_abs_diff(a, b) <= 1e-6);
}

TEST_CASE("all-global backbone ignores the grid setting") {
    Rng rng(7);
    auto c1 = cfg_for(32, 4, 1, 4, 4);
    auto c2 = cfg_for(32, 4, 4, 4, 4);
    auto p = vit::ViTParams::init(c1, rng);
    Tensor x = rand_tensor({1, 8, 8, 8}, rng);
    CHECK(max_abs_diff(vit::vit_forward(x, c1, p), vit::vit_forward(x, c2, p)) <= 1e-6);
}

TEST_CASE("grid 1 equals a pure global backbone") {
    Rng rng(8);
    auto c1 = cfg_for(32, 4, 1, 4, 1);
    auto c2 = cfg_for(32, 4, 1, 4, 4);
    auto p = vit::ViTParams::init(c1, rng);
    Tensor x = rand_tensor({1, 8, 8, 8}, rng);
    CHECK(max_abs_diff(vit::vit_forward(x, c1, p), vit::vit_forward(x, c2, p)) <= 1e-6);
}

TEST_CASE("zero residual branches reduce the backbone to its final norm") {
    Rng rng(9);
    auto cfg = cfg_for(32, 4, 2, 4, 1);
    auto p = vit::ViTParams::init(cfg, rng);
    for (auto& b : p.blocks)
        for (Tensor* t : {&b.proj.w, &b.proj.b, &b.fc2.w, &b.fc2.b})
            for (double& v : t->mutable_data()) v = 0.0;
    Tensor x = rand_tensor({1, 8, 8, 8}, rng);
    Tensor expect = reshape(p.final_ln(reshape(x, {64, 8})), x.shape());
    CHECK(max_abs_diff(vit::vit_forward(x, cfg, p), expect) <= 1e-6);
}

TEST_CASE("backbone without positional embedding is equivariant to cell-size rolls") {
    Rng rng(10);
    auto cfg = cfg_for(64, 8, 2, 4, 1);
    auto p = vit::ViTParams::init(cfg, rng);
    zero_pos(p);
    Tensor img = rand_tensor({1, 64, 64, 3}, rng);
    Tensor x = vit::patchify(img, cfg, p);
    Tensor a = vit::vit_forward(roll2d(x, 4, 4), cfg, p);
    Tensor b = roll2d(vit::vit_forward(x, cfg, p), 4, 4);
    CHECK(max_abs_diff(a, b) <= 1e-5);
}

TEST_CASE("pooled image embedding") {
    Rng rng(11);
    auto cfg = cfg_for(32, 8, 1, 1, 1);
    auto p = vit::ViTParams::init(cfg, rng);

    SUBCASE("matches mean, project, normalize") {
        Tensor x = rand_tensor({2, 4, 4, 8}, rng);
        Tensor e = vit::pool_image_embedding(x, p);
        for (int b = 0; b < 2; ++b) {
            std::vector<double> m(8, 0.0), proj(6, 0.0);
            for (int t = 0; t < 16; ++t)
                for (int k = 0; k < 8; ++k) m[k] += x.at((b * 16 + t) * 8 + k) / 16;
            double norm = 0;
            for (int j = 0; j < 6; ++j) {
                for (int k = 0; k < 8; ++k) proj[j] += m[k] * p.image_proj.w.at(k * 6 + j);
                norm += proj[j] * proj[j];
            }
            for (int j = 0; j < 6; ++j) CHECK(std::abs(e.at(b * 6 + j) - proj[j] / std::sqrt(norm)) <= 1e-9);
        }
    }
    SUBCASE("constant grid and permutations") {
        Tensor x = rand_tensor({1, 4, 4, 8}, rng);
        std::vector<int> perm(16);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        Tensor xp = reshape(gather_rows(reshape(x, {16, 8}), perm), x.shape());
        CHECK(max_abs_diff(vit::pool_image_embedding(x, p), vit::pool_image_embedding(xp, p)) <= 1e-7);

        Tensor row = rand_tensor({1, 8}, rng);
        std::vector<int> same(16, 0);
        Tensor c = reshape(gather_rows(row, same), {1, 4, 4, 8});
        Tensor e = vit::pool_image_embedding(c, p);
        Tensor expect = l2_normalize_rows(p.image_proj(row));
        CHECK(max_abs_diff(e, expect) <= 1e-12);
    }
    SUBCASE("zero vector is rejected") { CHECK_THROWS(vit::pool_image_embedding(Tensor::zeros({1, 4, 4, 8}), p)); }
}

TEST_CASE("config invariants") {
    auto c = cfg_for(64, 8, 2, 4, 1);
    CHECK_NOTHROW(c.validate());
    c.grid = 3;
    CHECK_THROWS(c.validate());
    c = cfg_for(64, 8, 2, 4, 1);
    c.heads = 3;
    CHECK_THROWS(c.validate());
    c = cfg_for(64, 8, 2, 4, 5);
    CHECK_THROWS(c.validate());
}

TEST_CASE("composed backbone gradients") {
    for (const auto& gc : model_grad_cases()) {
        if (gc.name != "patchify" && gc.name != "window_attend" && gc.name != "vit_forward" &&
            gc.name != "pool_image_embedding")
            continue;
        double worst = 0;
        for (std::uint64_t s = 0; s < 3; ++s) worst = std::max(worst, run_grad_case(gc, s, 1e-3).max_rel_error);
        INFO(gc.name << " " << worst);
        CHECK(worst <= 1e-3);
    }
}

}
