#include "dito/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dito {

namespace {

double eval_scalar(const std::function<Tensor()>& f) {
    NoGradGuard guard;
    const double v = f().item();
    if (!std::isfinite(v)) throw std::domain_error("finite_diff_check: function value is not finite");
    return v;
}

}  // namespace

GradReport finite_diff_check(const std::string& name, const std::function<Tensor()>& f,
                             std::vector<Tensor> params, const GradCheckOptions& opt) {
    if (!(opt.eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.zero_grad();
    }
    Tensor out = f();
    if (!std::isfinite(out.item())) throw std::domain_error("finite_diff_check: function value is not finite");
    out.backward();

    GradReport rep{name, 0.0, opt.tol, false, 0};
    for (auto& p : params) {
        std::vector<double> analytic(p.grad().begin(), p.grad().end());
        const std::size_t n = p.numel();
        const std::size_t stride = std::max<std::size_t>(1, (n + opt.max_coords_per_param - 1) / opt.max_coords_per_param);
        auto vals = p.mutable_data();
        for (std::size_t i = 0; i < n; i += stride) {
            const double orig = vals[i];
            vals[i] = orig + opt.eps;
            const double fp = eval_scalar(f);
            vals[i] = orig - opt.eps;
            const double fm = eval_scalar(f);
            vals[i] = orig;
            const double numeric = (fp - fm) / (2.0 * opt.eps);
            const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
            rep.max_rel_error = std::max(rep.max_rel_error, std::abs(analytic[i] - numeric) / denom);
            ++rep.coords_checked;
        }
        p.zero_grad();
    }
    rep.passed = rep.max_rel_error <= rep.tolerance;
    return rep;
}

}  // namespace dito
