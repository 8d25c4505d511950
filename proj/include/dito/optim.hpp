#pragma once

#include <span>
#include <string>
#include <vector>

#include "dito/nn.hpp"

namespace dito::optim {

// Linear warmup from 0 to peak over `warmup` steps, then linear decay to 0 at
// `total` steps.
double warmup_linear_decay(int step, int warmup, int total, double peak);

// Linear warmup, then peak * factor^k where k counts the milestones
// (fractions of total) already passed.
double warmup_step_decay(int step, int warmup, int total, double peak, std::span<const double> milestones,
                         double factor);

// Weight decay skips biases, norms, embeddings tables and scalar parameters.
bool decays(const std::string& name, const Tensor& t);

// Global L2 norm of the current gradients.
double grad_norm(const ParamList& params);
void clip_grad_norm(ParamList& params, double max_norm);
void zero_grads(ParamList& params);

struct AdamWOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

class AdamW {
public:
    AdamW(ParamList params, AdamWOptions opt);
    void step(double lr);
    const ParamList& params() const { return params_; }
    int steps_taken() const { return t_; }

private:
    ParamList params_;
    AdamWOptions opt_;
    std::vector<std::vector<double>> m_, v_;
    std::vector<bool> decay_;
    int t_ = 0;
};

struct SgdOptions {
    double momentum = 0.9;
    double weight_decay = 1e-4;
};

class Sgd {
public:
    // lr_multiplier[i] scales the learning rate of params[i].
    Sgd(ParamList params, SgdOptions opt, std::vector<double> lr_multiplier);
    void step(double lr);
    const ParamList& params() const { return params_; }

private:
    ParamList params_;
    SgdOptions opt_;
    std::vector<double> mult_;
    std::vector<std::vector<double>> buf_;
    std::vector<bool> decay_;
};

}  // namespace dito::optim
