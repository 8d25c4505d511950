#pragma once

#include <array>
#include <string>

namespace dito {

// Axis-aligned box in normalized [0, 1] image coordinates.
struct NormBox {
    double x0 = 0, y0 = 0, x1 = 1, y1 = 1;

    double width() const { return x1 - x0; }
    double height() const { return y1 - y0; }
    double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
    double cx() const { return 0.5 * (x0 + x1); }
    double cy() const { return 0.5 * (y0 + y1); }

    // 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1.
    bool valid() const;
    // Throws std::invalid_argument naming the violated bound.
    void validate() const;
    NormBox clipped() const;
    std::string str() const;

    static NormBox whole() { return {0.0, 0.0, 1.0, 1.0}; }

    friend bool operator==(const NormBox&, const NormBox&) = default;
};

double iou(const NormBox& a, const NormBox& b);

// Center/size regression targets (dx, dy, dw, dh) of gt relative to anchor.
std::array<double, 4> encode_deltas(const NormBox& gt, const NormBox& anchor);
// Inverse of encode_deltas; dw, dh are clamped to keep exp() bounded.
NormBox decode_deltas(const std::array<double, 4>& d, const NormBox& anchor);

}  // namespace dito
