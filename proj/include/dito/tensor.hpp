#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dito {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until the first backward touches it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

// Dense row-major array with reverse-mode gradient tracking.
//
// A Tensor is a shared handle: copies alias the same storage. Most ops view a
// tensor as a matrix of rows() x cols(), where cols() is the last dimension.
// A FeatureGrid is a Tensor of shape (h, w, c), optionally with a leading
// batch dimension (b, h, w, c).
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    int dim(int i) const;
    int ndim() const { return static_cast<int>(shape().size()); }
    std::size_t numel() const;
    int rows() const;
    int cols() const;

    std::span<const double> data() const;
    // Direct write access. Only valid on leaves (parameters, inputs); mutating
    // an interior value silently invalidates gradients recorded through it.
    std::span<double> mutable_data();
    double item() const;
    double at(std::size_t i) const { return data()[i]; }

    bool requires_grad() const;
    void set_requires_grad(bool v);
    bool has_grad() const;
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    // Seeds d(this)/d(this) = 1 (scalar only) and accumulates into every
    // reachable tensor that requires grad.
    void backward() const;

    // New leaf sharing no history. Values are copied.
    Tensor detach() const;
    Tensor clone(bool requires_grad) const;

    bool same_node(const Tensor& o) const { return node_ == o.node_; }
    const std::shared_ptr<detail::Node>& node() const { return node_; }

    static Tensor make_result(Shape shape, std::vector<double> values,
                              std::vector<Tensor> parents, const char* op,
                              std::function<void(detail::Node&)> backward_fn);

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;
};

using FeatureGrid = Tensor;

// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

bool grad_enabled();

}  // namespace dito
