#pragma once

#include <functional>

#include "dito/tensor.hpp"

namespace dito::swl {

struct SwlConfig {
    double q = 0.5;  // shift as a fraction of the window cell size
    bool enabled_on_finetuned = true;
    bool enabled_on_frozen = true;

    void validate() const;
};

struct ShiftSize {
    int cell;   // M, tokens per window side
    int shift;  // s = round(q * M), clamped to [1, M]
};

ShiftSize compute_shift_size(int image_size, int patch_size, int grid, double q);

using Backbone = std::function<Tensor(const Tensor&)>;

// (backbone(x) + roll(backbone(roll(x, s, s)), -s, -s)) / 2 over a
// (h, w, c) or (b, h, w, c) token grid. Both branches share the backbone.
Tensor swl_forward(const Tensor& tokens, const Backbone& backbone, int shift);

}  // namespace dito::swl
