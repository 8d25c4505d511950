#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dito/tensor.hpp"

namespace dito {

struct GradReport {
    std::string op_name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;
    std::size_t coords_checked = 0;
};

struct GradCheckOptions {
    double eps = 1e-4;
    double tol = 1e-4;
    // Coordinates checked per parameter; larger parameters are subsampled
    // with a fixed stride so the check is deterministic.
    std::size_t max_coords_per_param = 64;
};

// Compares reverse-mode gradients of the scalar f() w.r.t. each parameter
// against central differences. The relative error of one coordinate is
// |analytic - numeric| / max(1, |analytic|, |numeric|).
GradReport finite_diff_check(const std::string& name, const std::function<Tensor()>& f,
                             std::vector<Tensor> params, const GradCheckOptions& opt = {});

}  // namespace dito
