#include "dito/swl.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "dito/ops.hpp"

namespace dito::swl {

void SwlConfig::validate() const {
    if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("swl.q must lie in (0, 1], got " + std::to_string(q));
}

ShiftSize compute_shift_size(int image_size, int patch_size, int grid, double q) {
    if (patch_size < 1 || grid < 1 || image_size % (patch_size * grid) != 0) {
        throw std::invalid_argument("compute_shift_size: image_size " + std::to_string(image_size) +
                                    " not divisible by patch_size*grid " + std::to_string(patch_size * grid));
    }
    if (!(q > 0.0 && q <= 1.0)) throw std::invalid_argument("compute_shift_size: q must lie in (0, 1]");
    const int m = image_size / (patch_size * grid);
    const int s = std::clamp(static_cast<int>(std::lround(q * m)), 1, m);
    return {m, s};
}

Tensor swl_forward(const Tensor& tokens, const Backbone& backbone, int shift) {
    Tensor plain = backbone(tokens);
    Tensor shifted = roll2d(backbone(roll2d(tokens, shift, shift)), -shift, -shift);
    return scale(add(plain, shifted), 0.5);
}

}  // namespace dito::swl
