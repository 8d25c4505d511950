#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dito/tensor.hpp"

namespace dito {

// Named parameter handles in a fixed order. Handles alias the model's storage.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : eng_(seed) {}

    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(eng_); }
    double normal(double mean, double stddev) { return std::normal_distribution<double>(mean, stddev)(eng_); }
    int uniform_int(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(eng_); }
    std::uint64_t next() { return eng_(); }
    std::mt19937_64& engine() { return eng_; }

    std::string state() const;
    void set_state(const std::string& s);

private:
    std::mt19937_64 eng_;
};

Tensor randn(Shape shape, double stddev, Rng& rng, bool requires_grad = true);

struct Linear {
    Tensor w;  // (in, out)
    Tensor b;  // (out); undefined for bias-free layers

    static Linear init(int in, int out, Rng& rng, bool bias = true);
    Tensor operator()(const Tensor& x) const;
    int in_dim() const { return w.dim(0); }
    int out_dim() const { return w.dim(1); }

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        f(prefix + "w", w);
        if (b.defined()) f(prefix + "b", b);
    }
};

struct LayerNorm {
    Tensor gamma, beta;

    static LayerNorm init(int dim);
    Tensor operator()(const Tensor& x) const;

    template <typename F>
    void visit(F&& f, const std::string& prefix) {
        f(prefix + "gamma", gamma);
        f(prefix + "beta", beta);
    }
};

// Parameter structs expose visit(f, prefix) calling f(name, Tensor&) per leaf.
template <typename Params>
ParamList named_params(const Params& p, const std::string& prefix = "") {
    Params view = p;
    ParamList out;
    view.visit([&](const std::string& n, Tensor& t) { out.emplace_back(n, t); }, prefix);
    return out;
}

// Deep copy of every parameter into fresh leaves.
template <typename Params>
Params clone_params(const Params& p) {
    Params c = p;
    c.visit([](const std::string&, Tensor& t) { t = t.clone(t.requires_grad()); }, "");
    return c;
}

// Copies values from `from` into the same-named entries of `into`.
void copy_values(const ParamList& from, ParamList& into);
void set_requires_grad(const ParamList& params, bool v);
// Byte-level fingerprint of parameter values, for freeze checks.
std::vector<double> flatten_values(const ParamList& params);

}  // namespace dito
