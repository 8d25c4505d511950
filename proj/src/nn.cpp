#include "dito/nn.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "dito/ops.hpp"

namespace dito {

std::string Rng::state() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
}

void Rng::set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (!is) throw std::invalid_argument("Rng::set_state: malformed engine state");
}

Tensor randn(Shape shape, double stddev, Rng& rng, bool requires_grad) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.normal(0.0, stddev);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

Linear Linear::init(int in, int out, Rng& rng, bool bias) {
    Linear l;
    l.w = randn({in, out}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    if (bias) l.b = Tensor::zeros({out}, true);
    return l;
}

Tensor Linear::operator()(const Tensor& x) const { return linear(x, w, b); }

LayerNorm LayerNorm::init(int dim) { return {Tensor::full({dim}, 1.0, true), Tensor::zeros({dim}, true)}; }

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

void copy_values(const ParamList& from, ParamList& into) {
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& [n, t] : from) by_name[n] = &t;
    for (auto& [n, t] : into) {
        auto it = by_name.find(n);
        if (it == by_name.end()) throw std::invalid_argument("copy_values: missing parameter '" + n + "'");
        if (it->second->shape() != t.shape()) {
            throw std::invalid_argument("copy_values: shape mismatch for '" + n + "': " +
                                        shape_str(it->second->shape()) + " vs " + shape_str(t.shape()));
        }
        auto src = it->second->data();
        auto dst = t.mutable_data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

void set_requires_grad(const ParamList& params, bool v) {
    for (const auto& [n, t] : params) {
        Tensor h = t;
        h.set_requires_grad(v);
    }
}

std::vector<double> flatten_values(const ParamList& params) {
    std::vector<double> out;
    for (const auto& [n, t] : params) out.insert(out.end(), t.data().begin(), t.data().end());
    return out;
}

}  // namespace dito
