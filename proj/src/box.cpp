#include "dito/box.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace dito {

namespace {
const double kMaxLogScale = std::log(1000.0 / 16.0);
}

bool NormBox::valid() const {
    return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1) && 0.0 <= x0 &&
           x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0;
}

void NormBox::validate() const {
    if (!valid()) throw std::invalid_argument("invalid NormBox " + str());
}

NormBox NormBox::clipped() const {
    return {std::clamp(x0, 0.0, 1.0), std::clamp(y0, 0.0, 1.0), std::clamp(x1, 0.0, 1.0), std::clamp(y1, 0.0, 1.0)};
}

std::string NormBox::str() const {
    std::ostringstream os;
    os << '[' << x0 << ", " << y0 << ", " << x1 << ", " << y1 << ']';
    return os.str();
}

double iou(const NormBox& a, const NormBox& b) {
    const double iw = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
    const double ih = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
    if (iw <= 0 || ih <= 0) return 0.0;
    const double inter = iw * ih;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

std::array<double, 4> encode_deltas(const NormBox& gt, const NormBox& anchor) {
    const double aw = anchor.width(), ah = anchor.height();
    return {(gt.cx() - anchor.cx()) / aw, (gt.cy() - anchor.cy()) / ah, std::log(gt.width() / aw),
            std::log(gt.height() / ah)};
}

NormBox decode_deltas(const std::array<double, 4>& d, const NormBox& anchor) {
    const double aw = anchor.width(), ah = anchor.height();
    const double cx = anchor.cx() + d[0] * aw;
    const double cy = anchor.cy() + d[1] * ah;
    const double w = aw * std::exp(std::min(d[2], kMaxLogScale));
    const double h = ah * std::exp(std::min(d[3], kMaxLogScale));
    return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

}  // namespace dito
