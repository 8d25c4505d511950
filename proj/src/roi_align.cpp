#include "dito/roi_align.hpp"

#include "dito/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace dito {

namespace {

struct GridDims {
    int h, w, c;
};

// Calls emit(bin_index, cell_index, weight) for every bilinear contribution
// of one box. Weights already include the 1/samples^2 average.
template <typename Emit>
void for_each_contribution(const GridDims& g, const NormBox& box, int out, int spb, Emit&& emit) {
    const double ys = box.y0 * g.h, ye = box.y1 * g.h;
    const double xs = box.x0 * g.w, xe = box.x1 * g.w;
    if (!(ye - ys > 0) || !(xe - xs > 0) || !std::isfinite(ys + ye + xs + xe)) {
        throw std::invalid_argument("roi_align: degenerate box " + box.str());
    }
    const double bh = (ye - ys) / out, bw = (xe - xs) / out;
    const double norm = 1.0 / (static_cast<double>(spb) * spb);
    for (int by = 0; by < out; ++by)
        for (int bx = 0; bx < out; ++bx) {
            const int bin = by * out + bx;
            for (int sy = 0; sy < spb; ++sy) {
                double y = ys + by * bh + (sy + 0.5) * bh / spb - 0.5;
                y = std::clamp(y, 0.0, static_cast<double>(g.h - 1));
                const int y0 = static_cast<int>(std::floor(y));
                const int y1 = std::min(y0 + 1, g.h - 1);
                const double ly = y - y0;
                for (int sx = 0; sx < spb; ++sx) {
                    double x = xs + bx * bw + (sx + 0.5) * bw / spb - 0.5;
                    x = std::clamp(x, 0.0, static_cast<double>(g.w - 1));
                    const int x0 = static_cast<int>(std::floor(x));
                    const int x1 = std::min(x0 + 1, g.w - 1);
                    const double lx = x - x0;
                    emit(bin, y0 * g.w + x0, norm * (1 - ly) * (1 - lx));
                    emit(bin, y0 * g.w + x1, norm * (1 - ly) * lx);
                    emit(bin, y1 * g.w + x0, norm * ly * (1 - lx));
                    emit(bin, y1 * g.w + x1, norm * ly * lx);
                }
            }
        }
}

}  // namespace

Tensor roi_align_batched(const Tensor& grid, std::span<const NormBox> boxes, std::span<const int> image_index,
                         int out_size, int samples_per_bin) {
    if (grid.ndim() != 4) {
        throw std::invalid_argument("roi_align: expected (b, h, w, c) grid, got " + shape_str(grid.shape()));
    }
    if (out_size < 1 || samples_per_bin < 1) throw std::invalid_argument("roi_align: out_size and samples_per_bin must be >= 1");
    if (image_index.size() != boxes.size()) throw std::invalid_argument("roi_align: one image index per box required");
    const int nb = grid.dim(0);
    const GridDims g{grid.dim(1), grid.dim(2), grid.dim(3)};
    const std::size_t image_cells = static_cast<std::size_t>(g.h) * g.w;
    const int n = static_cast<int>(boxes.size());
    const std::size_t per_box = static_cast<std::size_t>(out_size) * out_size * g.c;
    std::vector<double> out(per_box * n, 0.0);
    auto gv = grid.data();
    for (int b = 0; b < n; ++b) {
        if (image_index[b] < 0 || image_index[b] >= nb) throw std::out_of_range("roi_align: image index out of range");
        double* o = out.data() + per_box * b;
        const double* base = gv.data() + image_cells * image_index[b] * g.c;
        for_each_contribution(g, boxes[b], out_size, samples_per_bin, [&](int bin, int cell, double wt) {
            if (wt == 0.0) return;
            const double* src = base + static_cast<std::size_t>(cell) * g.c;
            double* dst = o + static_cast<std::size_t>(bin) * g.c;
            for (int j = 0; j < g.c; ++j) dst[j] += wt * src[j];
        });
    }
    std::vector<NormBox> kept(boxes.begin(), boxes.end());
    std::vector<int> img(image_index.begin(), image_index.end());
    return Tensor::make_result(
        {n, out_size, out_size, g.c}, std::move(out), {grid}, "roi_align",
        [g, kept = std::move(kept), img = std::move(img), out_size, samples_per_bin, per_box,
         image_cells](detail::Node& nd) {
            auto& gg = nd.parents[0]->grad;
            for (std::size_t b = 0; b < kept.size(); ++b) {
                const double* dy = nd.grad.data() + per_box * b;
                double* base = gg.data() + image_cells * img[b] * g.c;
                for_each_contribution(g, kept[b], out_size, samples_per_bin, [&](int bin, int cell, double wt) {
                    if (wt == 0.0) return;
                    const double* src = dy + static_cast<std::size_t>(bin) * g.c;
                    double* dst = base + static_cast<std::size_t>(cell) * g.c;
                    for (int j = 0; j < g.c; ++j) dst[j] += wt * src[j];
                });
            }
        });
}

Tensor roi_align(const Tensor& grid, std::span<const NormBox> boxes, int out_size, int samples_per_bin) {
    if (grid.ndim() != 3) throw std::invalid_argument("roi_align: expected (h, w, c) grid, got " + shape_str(grid.shape()));
    const std::vector<int> img(boxes.size(), 0);
    return roi_align_batched(reshape(grid, {1, grid.dim(0), grid.dim(1), grid.dim(2)}), boxes, img, out_size,
                             samples_per_bin);
}

Tensor roi_align(const Tensor& grid, const NormBox& box, int out_size, int samples_per_bin) {
    Tensor t = roi_align(grid, std::span<const NormBox>(&box, 1), out_size, samples_per_bin);
    return reshape(t, {out_size, out_size, grid.dim(2)});
}

Tensor crop_resize(const Tensor& grid, const NormBox& box, int out_size) {
    return roi_align(grid, box, out_size, 1);
}

}  // namespace dito
