#include "dito/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dito::optim {

double warmup_linear_decay(int step, int warmup, int total, double peak) {
    if (step < warmup) return peak * static_cast<double>(step) / warmup;
    if (total <= warmup) return peak;
    return peak * std::max(0.0, static_cast<double>(total - step) / (total - warmup));
}

double warmup_step_decay(int step, int warmup, int total, double peak, std::span<const double> milestones,
                         double factor) {
    if (step < warmup) return peak * static_cast<double>(step) / warmup;
    double lr = peak;
    for (double m : milestones) {
        if (step >= m * total) lr *= factor;
    }
    return lr;
}

bool decays(const std::string& name, const Tensor& t) {
    if (t.ndim() < 2) return false;
    auto ends_with = [&](const std::string& s) {
        return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
    };
    return !(ends_with("pos.table") || ends_with("pos_embed") || ends_with("token_embed") || ends_with("background"));
}

double grad_norm(const ParamList& params) {
    double s = 0.0;
    for (const auto& [n, t] : params) {
        if (!t.has_grad()) continue;
        for (double g : t.grad()) s += g * g;
    }
    return std::sqrt(s);
}

void clip_grad_norm(ParamList& params, double max_norm) {
    const double n = grad_norm(params);
    if (n <= max_norm || n == 0.0) return;
    const double k = max_norm / n;
    for (auto& [name, t] : params) {
        if (!t.has_grad()) continue;
        for (double& g : t.mutable_grad()) g *= k;
    }
}

void zero_grads(ParamList& params) {
    for (auto& [n, t] : params) t.zero_grad();
}

AdamW::AdamW(ParamList params, AdamWOptions opt) : params_(std::move(params)), opt_(opt) {
    for (const auto& [n, t] : params_) {
        m_.emplace_back(t.numel(), 0.0);
        v_.emplace_back(t.numel(), 0.0);
        decay_.push_back(decays(n, t));
    }
}

void AdamW::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, t_);
    const double bc2 = 1.0 - std::pow(opt_.beta2, t_);
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = params_[k].second;
        if (!p.has_grad()) continue;
        auto g = p.grad();
        auto w = p.mutable_data();
        auto& m = m_[k];
        auto& v = v_[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = opt_.beta1 * m[i] + (1 - opt_.beta1) * g[i];
            v[i] = opt_.beta2 * v[i] + (1 - opt_.beta2) * g[i] * g[i];
            double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + opt_.eps);
            if (decay_[k]) upd += opt_.weight_decay * w[i];
            w[i] -= lr * upd;
        }
    }
}

Sgd::Sgd(ParamList params, SgdOptions opt, std::vector<double> lr_multiplier)
    : params_(std::move(params)), opt_(opt), mult_(std::move(lr_multiplier)) {
    if (mult_.size() != params_.size()) throw std::invalid_argument("Sgd: one lr multiplier per parameter required");
    for (const auto& [n, t] : params_) {
        buf_.emplace_back(t.numel(), 0.0);
        decay_.push_back(decays(n, t));
    }
}

void Sgd::step(double lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
        Tensor& p = params_[k].second;
        if (!p.has_grad() || mult_[k] == 0.0) continue;
        auto g = p.grad();
        auto w = p.mutable_data();
        auto& b = buf_[k];
        const double wd = decay_[k] ? opt_.weight_decay : 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            b[i] = opt_.momentum * b[i] + g[i] + wd * w[i];
            w[i] -= lr * mult_[k] * b[i];
        }
    }
}

}  // namespace dito::optim
