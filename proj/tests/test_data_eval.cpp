#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "dito/data.hpp"
#include "dito/eval.hpp"
#include "dito/pipeline.hpp"
#include "support.hpp"

using namespace dito;
using namespace dito::testing;
namespace fs = std::filesystem;

namespace {

data::SyntheticSpec small_spec(data::Split split, std::uint64_t seed = 3, int n = 40) {
    data::SyntheticSpec s;
    s.seed = seed;
    s.num_images = n;
    s.split = split;
    return s;
}

fs::path scratch(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("dito_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool colored(const data::Image& img, int y, int x) {
    const auto* p = img.pixel(y, x);
    return p[0] != p[1] || p[1] != p[2];
}

std::vector<std::vector<eval::Detection>> dets(std::vector<eval::Detection> d) { return {std::move(d)}; }
std::vector<std::vector<eval::GroundTruthBox>> gts(std::vector<eval::GroundTruthBox> g) { return {std::move(g)}; }

// (h, w, 1) map with a single peak.
Tensor peak_map(int h, int w, int py, int px) {
    std::vector<double> v(static_cast<std::size_t>(h) * w, 0.0);
    v[py * w + px] = 1.0;
    return Tensor::from({h, w, 1}, v);
}

}  // namespace

TEST_SUITE("data_eval") {

TEST_CASE("generator is deterministic") {
    auto spec = small_spec(data::Split::Eval);
    auto a = data::generate(spec), b = data::generate(spec);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image.rgb == b[i].image.rgb);
        CHECK(a[i].record.caption == b[i].record.caption);
    }
    auto d1 = scratch("gen1"), d2 = scratch("gen2");
    data::gen_synthetic_dataset(spec, d1);
    data::gen_synthetic_dataset(spec, d2);
    CHECK(slurp(d1 / "manifest.tsv") == slurp(d2 / "manifest.tsv"));
    CHECK(slurp(d1 / "images/00007.png") == slurp(d2 / "images/00007.png"));
    spec.seed = 4;
    CHECK(data::generate(spec)[0].image.rgb != a[0].image.rgb);
}

TEST_CASE("annotations are the exact raster extent of each shape") {
    for (auto split : {data::Split::Pretrain, data::Split::Eval}) {
        auto samples = data::generate(small_spec(split, 5, 60));
        for (const auto& s : samples) {
            const auto& img = s.image;
            const int W = img.width;
            std::vector<char> covered(static_cast<std::size_t>(W) * W, 0);
            for (const auto& a : s.record.annotations) {
                const int x0 = static_cast<int>(std::lround(a.box.x0 * W)), x1 = static_cast<int>(std::lround(a.box.x1 * W));
                const int y0 = static_cast<int>(std::lround(a.box.y0 * W)), y1 = static_cast<int>(std::lround(a.box.y1 * W));
                // Scan one pixel beyond the box; objects keep a two pixel gap.
                int minx = W, miny = W, maxx = -1, maxy = -1;
                for (int y = std::max(0, y0 - 1); y < std::min(W, y1 + 1); ++y)
                    for (int x = std::max(0, x0 - 1); x < std::min(W, x1 + 1); ++x)
                        if (colored(img, y, x)) {
                            minx = std::min(minx, x), maxx = std::max(maxx, x);
                            miny = std::min(miny, y), maxy = std::max(maxy, y);
                            covered[y * W + x] = 1;
                        }
                CHECK(minx == x0);
                CHECK(miny == y0);
                CHECK(maxx + 1 == x1);
                CHECK(maxy + 1 == y1);
            }
            int stray = 0;
            for (int y = 0; y < W; ++y)
                for (int x = 0; x < W; ++x) stray += colored(img, y, x) && !covered[y * W + x];
            CHECK(stray == 0);
        }
    }
}

TEST_CASE("split contracts") {
    auto ft = data::generate(small_spec(data::Split::Finetune, 1, 100));
    auto spec = small_spec(data::Split::Finetune);
    for (const auto& s : ft)
        for (const auto& a : s.record.annotations) CHECK_FALSE(spec.is_novel(a.category));

    auto pre = data::generate(small_spec(data::Split::Pretrain, 1, 100));
    bool novel_word = false;
    for (const auto& s : pre)
        for (const auto& n : spec.novel_names) novel_word = novel_word || s.record.caption.find(n) != std::string::npos;
    CHECK(novel_word);

    SUBCASE("category counts follow the balanced plan") {
        auto ev = data::generate(small_spec(data::Split::Eval, 2, 120));
        std::map<std::string, int> hist;
        for (const auto& s : ev)
            for (const auto& a : s.record.annotations) ++hist[a.category];
        REQUIRE(hist.size() == 12);
        int lo = 1 << 30, hi = 0;
        for (const auto& [k, v] : hist) lo = std::min(lo, v), hi = std::max(hi, v);
        CHECK(hi - lo <= 1);
    }
    SUBCASE("captions mention every object") {
        for (const auto& s : pre)
            for (const auto& a : s.record.annotations) CHECK(s.record.caption.find("a " + a.category) != std::string::npos);
    }
    SUBCASE("invalid specs") {
        auto bad = small_spec(data::Split::Eval);
        bad.novel_names = {"purple circle"};
        CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
        bad = small_spec(data::Split::Eval);
        bad.size_max = 40;
        CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    }
}

TEST_CASE("manifest round trip") {
    auto dir = scratch("manifest");
    std::vector<data::DatasetRecord> recs{
        {"images/00000.png", "a photo of a red circle", {{{0.1, 0.2, 0.30000000000000004, 0.4}, "red circle"}}},
        {"images/00001.png", "there is nothing", {}},
        {"images/00002.png", "two", {{{0, 0, 1, 1}, "blue square"}, {{1.0 / 3, 0.25, 0.5, 0.75}, "green cross"}}}};
    data::write_manifest(dir / "m.tsv", recs);
    auto back = data::read_manifest(dir / "m.tsv");
    REQUIRE(back.size() == recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        CHECK(back[i].image_path == recs[i].image_path);
        CHECK(back[i].caption == recs[i].caption);
        REQUIRE(back[i].annotations.size() == recs[i].annotations.size());
        for (std::size_t j = 0; j < recs[i].annotations.size(); ++j) {
            CHECK(back[i].annotations[j].box == recs[i].annotations[j].box);
            CHECK(back[i].annotations[j].category == recs[i].annotations[j].category);
        }
    }
    std::ofstream(dir / "bad.tsv") << "img.png\tcap\t0,0,x,1,red circle\n";
    CHECK_THROWS(data::read_manifest(dir / "bad.tsv"));
    CHECK_THROWS(data::read_manifest(dir / "missing.tsv"));
}

TEST_CASE("dataset loading and normalization") {
    auto dir = scratch("load");
    auto spec = small_spec(data::Split::Eval, 9, 4);
    data::gen_synthetic_dataset(spec, dir);
    auto ds = data::Dataset::load(dir);
    REQUIRE(ds.size() == 4);
    auto gen = data::generate(spec);
    CHECK(ds.images[2].rgb == gen[2].image.rgb);
    Tensor t = ds.batch({2});
    CHECK(t.shape() == Shape{1, 64, 64, 3});
    CHECK(t.at(0) == doctest::Approx((gen[2].image.rgb[0] / 255.0 - 0.5) / 0.5));
}

TEST_CASE("average precision examples") {
    const std::vector<std::string> cats{"a", "b"};
    const std::vector<bool> novel{false, true};
    const NormBox g{0.2, 0.2, 0.6, 0.6};
    SUBCASE("perfect detection") {
        auto r = eval::eval_ap(dets({{g, "a", 0.9}}), gts({{g, "a"}}), cats, novel);
        CHECK(r.ap50.at("a") == doctest::Approx(1.0));
        CHECK(r.base_ap50 == doctest::Approx(1.0));
        CHECK(r.ap.at("a") == doctest::Approx(1.0));
        CHECK(r.ap50.count("b") == 0);
    }
    SUBCASE("overlap below threshold") {
        const NormBox d{0.2, 0.2, 0.6, 0.36};  // IoU 0.4
        REQUIRE(iou(d, g) == doctest::Approx(0.4));
        auto r = eval::eval_ap(dets({{d, "a", 0.9}}), gts({{g, "a"}}), cats, novel);
        CHECK(r.ap50.at("a") == 0.0);
    }
    SUBCASE("ranking of a true and a false positive") {
        const NormBox miss{0.7, 0.7, 0.9, 0.9};
        auto good = eval::eval_ap(dets({{g, "a", 0.9}, {miss, "a", 0.5}}), gts({{g, "a"}}), cats, novel);
        CHECK(good.ap50.at("a") == doctest::Approx(1.0));
        auto bad = eval::eval_ap(dets({{g, "a", 0.5}, {miss, "a", 0.9}}), gts({{g, "a"}}), cats, novel);
        // Precision 1/2 at recall 1; the interpolated curve is 0.5 everywhere.
        CHECK(bad.ap50.at("a") == doctest::Approx(0.5));
    }
    SUBCASE("hand-computed 101-point curve") {
        // tp pattern 1,0,1 over 2 GT: precision 1 up to recall .5, then 2/3.
        std::vector<int> tp{1, 0, 1};
        const double expected = (51 * 1.0 + 50 * (2.0 / 3)) / 101;
        CHECK(eval::average_precision(tp, 2) == doctest::Approx(expected).epsilon(1e-12));
        CHECK(eval::average_precision(std::vector<int>{}, 3) == 0.0);
    }
    SUBCASE("novel split is reported separately") {
        auto r = eval::eval_ap({{{g, "b", 0.8}}}, {{{g, "b"}, {NormBox{0.7, 0.7, 0.9, 0.9}, "a"}}}, cats, novel);
        CHECK(r.novel_ap50 == doctest::Approx(1.0));
        CHECK(r.base_ap50 == 0.0);
        CHECK(r.mean_ap50 == doctest::Approx(0.5));
    }
    SUBCASE("errors") {
        CHECK_THROWS(eval::eval_ap(dets({{g, "zebra", 0.9}}), gts({{g, "a"}}), cats, novel));
        CHECK_THROWS(eval::eval_ap(dets({{g, "a", std::nan("")}}), gts({{g, "a"}}), cats, novel));
    }
}

TEST_CASE("average precision invariants") {
    const std::vector<std::string> cats{"a", "b", "c"};
    const std::vector<bool> novel{false, false, true};
    for (std::uint64_t s = 0; s < 30; ++s) {
        Rng rng(s);
        std::vector<std::vector<eval::Detection>> det(4);
        std::vector<std::vector<eval::GroundTruthBox>> gt(4);
        for (int i = 0; i < 4; ++i) {
            for (int k = 0; k < 3; ++k) gt[i].push_back({random_box(rng, 0.1), cats[rng.uniform_int(0, 2)]});
            for (int k = 0; k < 6; ++k) {
                // Half the detections jitter a ground-truth box.
                NormBox b = random_box(rng, 0.1);
                if (k % 2 == 0) {
                    const auto& t = gt[i][rng.uniform_int(0, 2)];
                    const double dx = rng.uniform(-0.03, 0.03);
                    b = NormBox{t.box.x0 + dx, t.box.y0, t.box.x1 + dx, t.box.y1}.clipped();
                    det[i].push_back({b, t.category, rng.uniform(0, 1)});
                } else {
                    det[i].push_back({b, cats[rng.uniform_int(0, 2)], rng.uniform(0, 1)});
                }
            }
        }
        auto base = eval::eval_ap(det, gt, cats, novel);
        auto mono = det;
        for (auto& img : mono)
            for (auto& d : img) d.score = std::exp(3 * d.score) - 7;
        auto r = eval::eval_ap(mono, gt, cats, novel);
        CHECK(std::abs(r.mean_ap - base.mean_ap) <= 1e-12);
        CHECK(std::abs(r.mean_ap50 - base.mean_ap50) <= 1e-12);

        // A lower-scored copy of a detection can only add a false positive.
        auto dup = det;
        auto copy = dup[0][0];
        copy.score -= 1.0;
        dup[0].push_back(copy);
        auto d = eval::eval_ap(dup, gt, cats, novel);
        CHECK(d.mean_ap50 <= base.mean_ap50 + 1e-12);
        CHECK(d.mean_ap <= base.mean_ap + 1e-12);
    }
}

TEST_CASE("pointing game") {
    const NormBox box{0.25, 0.25, 0.75, 0.75};
    CHECK(eval::pointing_hit(peak_map(8, 8, 3, 4), box));
    CHECK_FALSE(eval::pointing_hit(peak_map(8, 8, 0, 7), box));
    std::vector<Tensor> maps;
    std::vector<NormBox> boxes;
    for (int i = 0; i < 10; ++i) {
        maps.push_back(i < 7 ? peak_map(8, 8, 4, 4) : peak_map(8, 8, 7, 0));
        boxes.push_back(box);
    }
    CHECK(eval::pointing_game(maps, boxes) == doctest::Approx(0.7));
}

TEST_CASE("retrieval recall") {
    Rng rng(1);
    Tensor e = l2_normalize_rows(rand_tensor({20, 6}, rng)).detach();
    CHECK(eval::retrieval_recall(e, e, 1) == 1.0);
    Tensor f = l2_normalize_rows(rand_tensor({20, 6}, rng)).detach();
    CHECK(eval::retrieval_recall(e, f, 20) == 1.0);
    double mean = 0;
    const int trials = 200;
    for (int t = 0; t < trials; ++t) {
        Tensor a = l2_normalize_rows(rand_tensor({100, 8}, rng)).detach();
        Tensor b = l2_normalize_rows(rand_tensor({100, 8}, rng)).detach();
        mean += eval::retrieval_recall(a, b, 1) / trials;
    }
    CHECK(std::abs(mean - 0.01) <= 0.004);
}

TEST_CASE("heatmaps") {
    Rng rng(2);
    auto cfg = toy_vit(32, 4, 1, 2, 1);
    auto vp = vit::ViTParams::init(cfg, rng);
    for (double& v : vp.pos.table.mutable_data()) v = 0.0;
    auto head = det::RcnnHeadParams::init(3, 4, 8, 6, rng);
    std::vector<double> text(6, 0.0);
    text[1] = 1.0;

    SUBCASE("normalization guard") {
        auto n = eval::normalize_heatmap(std::vector<double>{0.1, 0.2, 0.3});
        CHECK(n[2] == doctest::Approx(0.2 / eval::kHeatmapGuard));
        auto w = eval::normalize_heatmap(std::vector<double>{-1, 1});
        CHECK(w[1] == doctest::Approx(1.0));
    }
    SUBCASE("uniform image") {
        Tensor img = Tensor::full({1, 32, 32, 3}, 0.3);
        Tensor tokens = vit::vit_forward(vit::patchify(img, cfg, vp), cfg, vp);
        Tensor grid = reshape(tokens, {8, 8, 8});
        Tensor bb = eval::backbone_heatmap(grid, vp, text);
        auto nb = eval::normalize_heatmap(bb.data());
        CHECK(*std::max_element(nb.begin(), nb.end()) - *std::min_element(nb.begin(), nb.end()) < 0.1);
        // Zero-padded convolutions make FPN borders differ, so the sliding
        // window is checked on a spatially constant level-4 map.
        std::vector<double> l4v;
        for (int i = 0; i < 64; ++i) l4v.insert(l4v.end(), {0.3, -0.2, 0.9, 0.1});
        Tensor l4 = Tensor::from({8, 8, 4}, l4v);
        Tensor dm = eval::dop_heatmap(l4, head, text, 2.0, 3, 2);
        CHECK(dm.shape() == bb.shape());
        auto nd = eval::normalize_heatmap(dm.data());
        CHECK(*std::max_element(nd.begin(), nd.end()) - *std::min_element(nd.begin(), nd.end()) < 0.1);
    }
    SUBCASE("orthogonal text gives zero cosines") {
        // Remove the text direction from the projection.
        for (int k = 0; k < 8; ++k) vp.image_proj.w.mutable_data()[k * 6 + 1] = 0.0;
        Tensor grid = rand_tensor({8, 8, 8}, rng);
        Tensor bb = eval::backbone_heatmap(grid, vp, text);
        for (double v : bb.data()) CHECK(std::abs(v) <= 1e-12);
        for (int k = 0; k < 8; ++k) head.embed.w.mutable_data()[k * 6 + 1] = 0.0;
        if (head.embed.b.defined()) head.embed.b.mutable_data()[1] = 0.0;
        Tensor dm = eval::dop_heatmap(rand_tensor({8, 8, 4}, rng), head, text, 2.0, 3, 2);
        for (double v : dm.data()) CHECK(std::abs(v) <= 1e-12);
    }
}

TEST_CASE("pointing targets take unique categories only") {
    data::Dataset ds;
    ds.records = {{"x", "c", {{{0, 0, .2, .2}, "red circle"}, {{.5, .5, .7, .7}, "red circle"}, {{.3, .3, .4, .4}, "blue square"}}},
                  {"y", "c", {{{0, 0, .2, .2}, "green cross"}}}};
    auto t = pipeline::pointing_targets(ds);
    REQUIRE(t.size() == 2);
    CHECK(t[0].category == "blue square");
    CHECK(t[0].image == 0);
    CHECK(t[1].image == 1);
}

}  // TEST_SUITE
