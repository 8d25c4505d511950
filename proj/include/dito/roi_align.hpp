#pragma once

#include <span>

#include "dito/box.hpp"
#include "dito/tensor.hpp"

namespace dito {

// RoI-Align over one (h, w, c) feature grid. A normalized box maps to the
// continuous extent [y0*h, y1*h] x [x0*w, x1*w]; each of the out_size^2 bins
// averages samples_per_bin^2 bilinear reads taken at the centers of a regular
// sub-grid of the bin. Cell centers sit at integer coordinates (pixel-edge
// coordinate minus 0.5), reads outside the grid clamp to the border.
//
// Returns (n, out_size, out_size, c). Throws on a box of zero mapped area.
Tensor roi_align(const Tensor& grid, std::span<const NormBox> boxes, int out_size, int samples_per_bin);

// Boxes over a batch of grids (b, h, w, c); box i reads image image_index[i].
Tensor roi_align_batched(const Tensor& grid, std::span<const NormBox> boxes, std::span<const int> image_index,
                         int out_size, int samples_per_bin);

// Single-box form returning (out_size, out_size, c).
Tensor roi_align(const Tensor& grid, const NormBox& box, int out_size, int samples_per_bin);

// Bilinear resize of the box region of a grid onto an out_h x out_w grid
// (one sample per output cell). Used for cropped positional embeddings.
Tensor crop_resize(const Tensor& grid, const NormBox& box, int out_size);

}  // namespace dito
