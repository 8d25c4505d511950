#include "dito/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace dito {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using MapM = Eigen::Map<RowMat>;

// Gradient buffer of parent i, or nullptr when that parent is constant.
std::vector<double>* pgrad(detail::Node& n, std::size_t i) {
    auto& p = n.parents[i];
    return p->requires_grad ? &p->grad : nullptr;
}

const std::vector<double>& pval(detail::Node& n, std::size_t i) { return n.parents[i]->value; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
    }
}

void require_matrix(const Tensor& a, const char* op) {
    if (!a.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
}

template <typename F, typename DF>
Tensor unary(const Tensor& a, const char* op, F f, DF df) {
    std::vector<double> out(a.numel());
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i]);
    return Tensor::make_result(a.shape(), std::move(out), {a}, op, [df](detail::Node& n) {
        auto* g = pgrad(n, 0);
        const auto& x = pval(n, 0);
        for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * df(x[i], n.value[i]);
    });
}

}  // namespace

void RowGroups::add(std::span<const int> rows) {
    index.insert(index.end(), rows.begin(), rows.end());
    offsets.push_back(static_cast<int>(index.size()));
}

RowGroups RowGroups::contiguous(int n_groups, int group_size) {
    RowGroups g;
    g.index.resize(static_cast<std::size_t>(n_groups) * group_size);
    for (std::size_t i = 0; i < g.index.size(); ++i) g.index[i] = static_cast<int>(i);
    for (int k = 1; k <= n_groups; ++k) g.offsets.push_back(k * group_size);
    return g;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, "add", [](detail::Node& n) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (auto* g = pgrad(n, k)) {
                for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
            }
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, "sub", [](detail::Node& n) {
        if (auto* g = pgrad(n, 0)) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
        }
        if (auto* g = pgrad(n, 1)) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    auto x = a.data(), y = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return Tensor::make_result(a.shape(), std::move(out), {a, b}, "mul", [](detail::Node& n) {
        const auto& x = pval(n, 0);
        const auto& y = pval(n, 1);
        if (auto* g = pgrad(n, 0)) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * y[i];
        }
        if (auto* g = pgrad(n, 1)) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * x[i];
        }
    });
}

Tensor scale(const Tensor& a, double k) {
    return unary(a, "scale", [k](double x) { return k * x; }, [k](double, double) { return k; });
}

Tensor add_scalar(const Tensor& a, double k) {
    return unary(a, "add_scalar", [k](double x) { return x + k; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw std::invalid_argument("mul_scalar: s must hold one value");
    const double k = s.item();
    std::vector<double> out(a.numel());
    auto x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * k;
    return Tensor::make_result(a.shape(), std::move(out), {a, s}, "mul_scalar", [](detail::Node& n) {
        const auto& x = pval(n, 0);
        const double k = pval(n, 1)[0];
        if (auto* g = pgrad(n, 0)) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i] * k;
        }
        if (auto* g = pgrad(n, 1)) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * x[i];
            (*g)[0] += acc;
        }
    });
}

Tensor exp(const Tensor& a) {
    return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor gelu(const Tensor& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    return unary(
        a, "gelu", [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [=](double x, double) {
            return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
        });
}

Tensor relu(const Tensor& a) {
    return unary(a, "relu", [](double x) { return x > 0 ? x : 0.0; },
                 [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor add_row_bias(const Tensor& x, const Tensor& b) {
    const int c = x.cols();
    if (static_cast<int>(b.numel()) != c) throw std::invalid_argument("add_row_bias: bias length mismatch");
    std::vector<double> out(x.data().begin(), x.data().end());
    auto bv = b.data();
    const int r = x.rows();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] += bv[j];
    return Tensor::make_result(x.shape(), std::move(out), {x, b}, "add_row_bias", [r, c](detail::Node& n) {
        if (auto* g = pgrad(n, 0)) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
        }
        if (auto* g = pgrad(n, 1)) {
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) (*g)[j] += n.grad[static_cast<std::size_t>(i) * c + j];
        }
    });
}

Tensor add_tiled(const Tensor& x, const Tensor& y) {
    if (x.cols() != y.cols() || y.rows() == 0 || x.rows() % y.rows() != 0) {
        throw std::invalid_argument("add_tiled: incompatible shapes " + shape_str(x.shape()) + " and " +
                                    shape_str(y.shape()));
    }
    const std::size_t period = y.numel();
    std::vector<double> out(x.data().begin(), x.data().end());
    auto yv = y.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += yv[i % period];
    return Tensor::make_result(x.shape(), std::move(out), {x, y}, "add_tiled", [period](detail::Node& n) {
        if (auto* g = pgrad(n, 0)) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i] += n.grad[i];
        }
        if (auto* g = pgrad(n, 1)) {
            for (std::size_t i = 0; i < n.grad.size(); ++i) (*g)[i % period] += n.grad[i];
        }
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    const int n = a.rows(), k = a.cols(), m = b.cols();
    if (b.rows() != k) {
        throw std::invalid_argument("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    }
    std::vector<double> out(static_cast<std::size_t>(n) * m);
    MapM(out.data(), n, m).noalias() = MapC(a.data().data(), n, k) * MapC(b.data().data(), k, m);
    return Tensor::make_result({n, m}, std::move(out), {a, b}, "matmul", [n, k, m](detail::Node& nd) {
        MapC dy(nd.grad.data(), n, m);
        if (auto* g = pgrad(nd, 0)) MapM(g->data(), n, k).noalias() += dy * MapC(pval(nd, 1).data(), k, m).transpose();
        if (auto* g = pgrad(nd, 1)) MapM(g->data(), k, m).noalias() += MapC(pval(nd, 0).data(), n, k).transpose() * dy;
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    const int n = a.rows(), k = a.cols(), m = b.rows();
    if (b.cols() != k) {
        throw std::invalid_argument("matmul_nt: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()) + "^T");
    }
    std::vector<double> out(static_cast<std::size_t>(n) * m);
    MapM(out.data(), n, m).noalias() = MapC(a.data().data(), n, k) * MapC(b.data().data(), m, k).transpose();
    return Tensor::make_result({n, m}, std::move(out), {a, b}, "matmul_nt", [n, k, m](detail::Node& nd) {
        MapC dy(nd.grad.data(), n, m);
        if (auto* g = pgrad(nd, 0)) MapM(g->data(), n, k).noalias() += dy * MapC(pval(nd, 1).data(), m, k);
        if (auto* g = pgrad(nd, 1))
            MapM(g->data(), m, k).noalias() += dy.transpose() * MapC(pval(nd, 0).data(), n, k);
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    const int n = x.rows(), in = x.cols();
    if (w.ndim() != 2 || w.dim(0) != in) {
        throw std::invalid_argument("linear: weight " + shape_str(w.shape()) + " does not accept input " +
                                    shape_str(x.shape()));
    }
    const int out_dim = w.dim(1);
    const bool has_bias = b.defined();
    if (has_bias && static_cast<int>(b.numel()) != out_dim) throw std::invalid_argument("linear: bias length mismatch");
    std::vector<double> out(static_cast<std::size_t>(n) * out_dim);
    MapM y(out.data(), n, out_dim);
    y.noalias() = MapC(x.data().data(), n, in) * MapC(w.data().data(), in, out_dim);
    if (has_bias) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data().data(), out_dim);
    Shape shape = x.shape();
    shape.back() = out_dim;
    std::vector<Tensor> parents{x, w};
    if (has_bias) parents.push_back(b);
    return Tensor::make_result(std::move(shape), std::move(out), std::move(parents), "linear",
                               [n, in, out_dim, has_bias](detail::Node& nd) {
                                   MapC dy(nd.grad.data(), n, out_dim);
                                   if (auto* g = pgrad(nd, 0))
                                       MapM(g->data(), n, in).noalias() +=
                                           dy * MapC(pval(nd, 1).data(), in, out_dim).transpose();
                                   if (auto* g = pgrad(nd, 1))
                                       MapM(g->data(), in, out_dim).noalias() +=
                                           MapC(pval(nd, 0).data(), n, in).transpose() * dy;
                                   if (has_bias) {
                                       // Fixed row-major order: Eigen's vectorized reductions peel by address.
                                       if (auto* g = pgrad(nd, 2))
                                           for (int r = 0; r < n; ++r)
                                               for (int j = 0; j < out_dim; ++j) (*g)[j] += dy(r, j);
                                   }
                               });
}

Tensor transpose(const Tensor& a) {
    const int n = a.rows(), m = a.cols();
    std::vector<double> out(a.numel());
    MapM(out.data(), m, n) = MapC(a.data().data(), n, m).transpose();
    return Tensor::make_result({m, n}, std::move(out), {a}, "transpose", [n, m](detail::Node& nd) {
        if (auto* g = pgrad(nd, 0)) MapM(g->data(), n, m) += MapC(nd.grad.data(), m, n).transpose();
    });
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return Tensor::make_result(std::move(shape), std::move(out), {a}, "reshape", [](detail::Node& nd) {
        if (auto* g = pgrad(nd, 0)) {
            for (std::size_t i = 0; i < nd.grad.size(); ++i) (*g)[i] += nd.grad[i];
        }
    });
}

Tensor gather_rows(const Tensor& x, std::span<const int> idx) {
    const int c = x.cols(), r = x.rows();
    std::vector<int> index(idx.begin(), idx.end());
    std::vector<double> out(index.size() * static_cast<std::size_t>(c), 0.0);
    auto xv = x.data();
    for (std::size_t i = 0; i < index.size(); ++i) {
        const int s = index[i];
        if (s >= r) throw std::out_of_range("gather_rows: row index out of range");
        if (s < 0) continue;
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(s) * c, c, out.begin() + static_cast<std::ptrdiff_t>(i) * c);
    }
    const int n_out = static_cast<int>(index.size());
    return Tensor::make_result({n_out, c}, std::move(out), {x}, "gather_rows",
                               [index = std::move(index), c](detail::Node& nd) {
                                   auto* g = pgrad(nd, 0);
                                   for (std::size_t i = 0; i < index.size(); ++i) {
                                       const int s = index[i];
                                       if (s < 0) continue;
                                       const double* src = nd.grad.data() + i * c;
                                       double* dst = g->data() + static_cast<std::size_t>(s) * c;
                                       for (int j = 0; j < c; ++j) dst[j] += src[j];
                                   }
                               });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    const int c = parts.front().cols();
    int total = 0;
    std::vector<double> out;
    for (const auto& p : parts) {
        if (p.cols() != c) throw std::invalid_argument("concat_rows: column mismatch");
        total += p.rows();
        out.insert(out.end(), p.data().begin(), p.data().end());
    }
    return Tensor::make_result({total, c}, std::move(out), parts, "concat_rows", [](detail::Node& nd) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < nd.parents.size(); ++k) {
            const std::size_t len = nd.parents[k]->value.size();
            if (auto* g = pgrad(nd, k)) {
                for (std::size_t i = 0; i < len; ++i) (*g)[i] += nd.grad[off + i];
            }
            off += len;
        }
    });
}

Tensor slice_rows(const Tensor& x, int begin, int count) {
    const int c = x.cols();
    if (begin < 0 || count < 0 || begin + count > x.rows()) throw std::out_of_range("slice_rows: out of range");
    auto xv = x.data();
    std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(begin) * c,
                            xv.begin() + static_cast<std::ptrdiff_t>(begin + count) * c);
    return Tensor::make_result({count, c}, std::move(out), {x}, "slice_rows", [begin, c](detail::Node& nd) {
        auto* g = pgrad(nd, 0);
        const std::size_t off = static_cast<std::size_t>(begin) * c;
        for (std::size_t i = 0; i < nd.grad.size(); ++i) (*g)[off + i] += nd.grad[i];
    });
}

Tensor slice_cols(const Tensor& x, int begin, int count) {
    const int c = x.cols(), r = x.rows();
    if (begin < 0 || count < 0 || begin + count > c) throw std::out_of_range("slice_cols: out of range");
    std::vector<double> out(static_cast<std::size_t>(r) * count);
    auto xv = x.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < count; ++j)
            out[static_cast<std::size_t>(i) * count + j] = xv[static_cast<std::size_t>(i) * c + begin + j];
    return Tensor::make_result({r, count}, std::move(out), {x}, "slice_cols", [r, c, begin, count](detail::Node& nd) {
        auto* g = pgrad(nd, 0);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < count; ++j)
                (*g)[static_cast<std::size_t>(i) * c + begin + j] += nd.grad[static_cast<std::size_t>(i) * count + j];
    });
}

Tensor softmax_rows(const Tensor& x) {
    const int r = x.rows(), c = x.cols();
    std::vector<double> out(x.numel());
    auto xv = x.data();
    for (int i = 0; i < r; ++i) {
        const double* row = xv.data() + static_cast<std::size_t>(i) * c;
        double* o = out.data() + static_cast<std::size_t>(i) * c;
        const double mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += (o[j] = std::exp(row[j] - mx));
        for (int j = 0; j < c; ++j) o[j] /= s;
    }
    return Tensor::make_result(x.shape(), std::move(out), {x}, "softmax_rows", [r, c](detail::Node& nd) {
        auto* g = pgrad(nd, 0);
        for (int i = 0; i < r; ++i) {
            const double* y = nd.value.data() + static_cast<std::size_t>(i) * c;
            const double* dy = nd.grad.data() + static_cast<std::size_t>(i) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += y[j] * dy[j];
            double* dx = g->data() + static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
    });
}

Tensor log_softmax_rows(const Tensor& x) {
    const int r = x.rows(), c = x.cols();
    std::vector<double> out(x.numel());
    auto xv = x.data();
    for (int i = 0; i < r; ++i) {
        const double* row = xv.data() + static_cast<std::size_t>(i) * c;
        double* o = out.data() + static_cast<std::size_t>(i) * c;
        const double mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += std::exp(row[j] - mx);
        const double lse = mx + std::log(s);
        for (int j = 0; j < c; ++j) o[j] = row[j] - lse;
    }
    return Tensor::make_result(x.shape(), std::move(out), {x}, "log_softmax_rows", [r, c](detail::Node& nd) {
        auto* g = pgrad(nd, 0);
        for (int i = 0; i < r; ++i) {
            const double* y = nd.value.data() + static_cast<std::size_t>(i) * c;
            const double* dy = nd.grad.data() + static_cast<std::size_t>(i) * c;
            double s = 0.0;
            for (int j = 0; j < c; ++j) s += dy[j];
            double* dx = g->data() + static_cast<std::size_t>(i) * c;
            for (int j = 0; j < c; ++j) dx[j] += dy[j] - std::exp(y[j]) * s;
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const int r = x.rows(), c = x.cols();
    if (static_cast<int>(gamma.numel()) != c || static_cast<int>(beta.numel()) != c) {
        throw std::invalid_argument("layer_norm: affine parameter length mismatch");
    }
    auto xhat = std::make_shared<std::vector<double>>(x.numel());
    auto inv_std = std::make_shared<std::vector<double>>(r);
    std::vector<double> out(x.numel());
    auto xv = x.data();
    auto gv = gamma.data(), bv = beta.data();
    for (int i = 0; i < r; ++i) {
        const double* row = xv.data() + static_cast<std::size_t>(i) * c;
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += row[j];
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= c;
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (int j = 0; j < c; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * c + j;
            (*xhat)[k] = (row[j] - mu) * is;
            out[k] = (*xhat)[k] * gv[j] + bv[j];
        }
    }
    return Tensor::make_result(x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
                               [r, c, xhat, inv_std](detail::Node& nd) {
                                   const auto& gv = pval(nd, 1);
                                   auto* gx = pgrad(nd, 0);
                                   auto* gg = pgrad(nd, 1);
                                   auto* gb = pgrad(nd, 2);
                                   for (int i = 0; i < r; ++i) {
                                       const std::size_t base = static_cast<std::size_t>(i) * c;
                                       const double* dy = nd.grad.data() + base;
                                       const double* xh = xhat->data() + base;
                                       if (gg || gb) {
                                           for (int j = 0; j < c; ++j) {
                                               if (gg) (*gg)[j] += dy[j] * xh[j];
                                               if (gb) (*gb)[j] += dy[j];
                                           }
                                       }
                                       if (gx) {
                                           double m1 = 0.0, m2 = 0.0;
                                           for (int j = 0; j < c; ++j) {
                                               const double d = dy[j] * gv[j];
                                               m1 += d;
                                               m2 += d * xh[j];
                                           }
                                           m1 /= c;
                                           m2 /= c;
                                           for (int j = 0; j < c; ++j)
                                               (*gx)[base + j] += (*inv_std)[i] * (dy[j] * gv[j] - m1 - xh[j] * m2);
                                       }
                                   }
                               });
}

Tensor l2_normalize_rows(const Tensor& x) {
    const int r = x.rows(), c = x.cols();
    auto norms = std::make_shared<std::vector<double>>(r);
    std::vector<double> out(x.numel());
    auto xv = x.data();
    for (int i = 0; i < r; ++i) {
        const double* row = xv.data() + static_cast<std::size_t>(i) * c;
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += row[j] * row[j];
        const double nrm = std::sqrt(s);
        if (!(nrm > 0.0) || !std::isfinite(nrm)) {
            throw std::domain_error("l2_normalize_rows: row " + std::to_string(i) + " has zero or non-finite norm");
        }
        (*norms)[i] = nrm;
        for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(i) * c + j] = row[j] / nrm;
    }
    return Tensor::make_result(x.shape(), std::move(out), {x}, "l2_normalize_rows", [r, c, norms](detail::Node& nd) {
        auto* g = pgrad(nd, 0);
        for (int i = 0; i < r; ++i) {
            const std::size_t base = static_cast<std::size_t>(i) * c;
            const double* y = nd.value.data() + base;
            const double* dy = nd.grad.data() + base;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += y[j] * dy[j];
            for (int j = 0; j < c; ++j) (*g)[base + j] += (dy[j] - y[j] * dot) / (*norms)[i];
        }
    });
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    return Tensor::make_result({1}, {s}, {x}, "sum", [](detail::Node& nd) {
        auto* g = pgrad(nd, 0);
        for (double& v : *g) v += nd.grad[0];
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor group_mean(const Tensor& x, const RowGroups& groups) {
    const int c = x.cols(), G = groups.count();
    std::vector<double> out(static_cast<std::size_t>(G) * c, 0.0);
    auto xv = x.data();
    for (int g = 0; g < G; ++g) {
        auto rows = groups.group(g);
        if (rows.empty()) throw std::invalid_argument("group_mean: empty group " + std::to_string(g));
        double* o = out.data() + static_cast<std::size_t>(g) * c;
        for (int row : rows)
            for (int j = 0; j < c; ++j) o[j] += xv[static_cast<std::size_t>(row) * c + j];
        for (int j = 0; j < c; ++j) o[j] /= static_cast<double>(rows.size());
    }
    return Tensor::make_result({G, c}, std::move(out), {x}, "group_mean", [groups, c](detail::Node& nd) {
        auto* gx = pgrad(nd, 0);
        for (int g = 0; g < groups.count(); ++g) {
            auto rows = groups.group(g);
            const double inv = 1.0 / static_cast<double>(rows.size());
            const double* dy = nd.grad.data() + static_cast<std::size_t>(g) * c;
            for (int row : rows)
                for (int j = 0; j < c; ++j) (*gx)[static_cast<std::size_t>(row) * c + j] += dy[j] * inv;
        }
    });
}

Tensor group_max(const Tensor& x, const RowGroups& groups) {
    const int c = x.cols(), G = groups.count();
    std::vector<double> out(static_cast<std::size_t>(G) * c);
    std::vector<int> arg(static_cast<std::size_t>(G) * c);
    auto xv = x.data();
    for (int g = 0; g < G; ++g) {
        auto rows = groups.group(g);
        if (rows.empty()) throw std::invalid_argument("group_max: empty group " + std::to_string(g));
        for (int j = 0; j < c; ++j) {
            int best = rows[0];
            double bv = xv[static_cast<std::size_t>(best) * c + j];
            for (int row : rows.subspan(1)) {
                const double v = xv[static_cast<std::size_t>(row) * c + j];
                if (v > bv) {
                    bv = v;
                    best = row;
                }
            }
            out[static_cast<std::size_t>(g) * c + j] = bv;
            arg[static_cast<std::size_t>(g) * c + j] = best;
        }
    }
    return Tensor::make_result({G, c}, std::move(out), {x}, "group_max", [arg = std::move(arg), c](detail::Node& nd) {
        auto* gx = pgrad(nd, 0);
        for (std::size_t k = 0; k < arg.size(); ++k)
            (*gx)[static_cast<std::size_t>(arg[k]) * c + k % c] += nd.grad[k];
    });
}

Tensor roll2d(const Tensor& x, int dy, int dx) {
    if (x.ndim() < 3) throw std::invalid_argument("roll2d: expected (h, w, c) or (b, h, w, c), got " + shape_str(x.shape()));
    const int h = x.dim(-3), w = x.dim(-2);
    const int batch = static_cast<int>(x.numel() / (static_cast<std::size_t>(h) * w * x.cols()));
    const int sy = ((dy % h) + h) % h, sx = ((dx % w) + w) % w;
    std::vector<int> idx(static_cast<std::size_t>(batch) * h * w);
    // Output row (i, j) reads input row (i - sy, j - sx).
    for (int b = 0; b < batch; ++b)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                idx[(static_cast<std::size_t>(b) * h + i) * w + j] =
                    (b * h + (i - sy + h) % h) * w + (j - sx + w) % w;
    return reshape(gather_rows(reshape(x, {x.rows(), x.cols()}), idx), x.shape());
}

Tensor bilinear_sample(const Tensor& grid, double y, double x) {
    if (!std::isfinite(y) || !std::isfinite(x)) throw std::domain_error("bilinear_sample: non-finite coordinate");
    if (grid.ndim() != 3) throw std::invalid_argument("bilinear_sample: expected (h, w, c) grid");
    const int h = grid.dim(0), w = grid.dim(1), c = grid.dim(2);
    y = std::clamp(y, 0.0, static_cast<double>(h - 1));
    x = std::clamp(x, 0.0, static_cast<double>(w - 1));
    const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
    const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
    const double ly = y - y0, lx = x - x0;
    const int cells[4] = {y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1};
    const double wts[4] = {(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx};
    std::vector<double> out(c, 0.0);
    auto gv = grid.data();
    for (int k = 0; k < 4; ++k)
        for (int j = 0; j < c; ++j) out[j] += wts[k] * gv[static_cast<std::size_t>(cells[k]) * c + j];
    std::vector<int> cv(cells, cells + 4);
    std::vector<double> wv(wts, wts + 4);
    return Tensor::make_result({c}, std::move(out), {grid}, "bilinear_sample", [cv, wv, c](detail::Node& nd) {
        auto* g = pgrad(nd, 0);
        for (int k = 0; k < 4; ++k)
            for (int j = 0; j < c; ++j) (*g)[static_cast<std::size_t>(cv[k]) * c + j] += wv[k] * nd.grad[j];
    });
}

Tensor multihead_attention(const Tensor& qkv, const RowGroups& groups, int heads) {
    const int n = qkv.rows(), c3 = qkv.cols();
    if (c3 % 3 != 0) throw std::invalid_argument("multihead_attention: qkv width must be 3C");
    const int c = c3 / 3;
    if (heads <= 0 || c % heads != 0) throw std::invalid_argument("multihead_attention: heads must divide C");
    const int dh = c / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    // Softmax probabilities per (group, head), kept for the backward pass.
    std::vector<std::size_t> p_off(static_cast<std::size_t>(groups.count()) + 1, 0);
    for (int g = 0; g < groups.count(); ++g) {
        const std::size_t t = groups.group(g).size();
        p_off[g + 1] = p_off[g] + t * t * heads;
    }
    auto probs = std::make_shared<std::vector<double>>(p_off.back());
    std::vector<double> out(static_cast<std::size_t>(n) * c, 0.0);
    auto qv = qkv.data();

    RowMat q, k, v, s, o;
    for (int g = 0; g < groups.count(); ++g) {
        auto rows = groups.group(g);
        const int t = static_cast<int>(rows.size());
        q.resize(t, dh);
        k.resize(t, dh);
        v.resize(t, dh);
        for (int hd = 0; hd < heads; ++hd) {
            for (int a = 0; a < t; ++a) {
                const double* src = qv.data() + static_cast<std::size_t>(rows[a]) * c3 + hd * dh;
                for (int j = 0; j < dh; ++j) {
                    q(a, j) = src[j];
                    k(a, j) = src[c + j];
                    v(a, j) = src[2 * c + j];
                }
            }
            s.noalias() = (q * k.transpose()) * sc;
            for (int a = 0; a < t; ++a) {
                const double mx = s.row(a).maxCoeff();
                s.row(a) = (s.row(a).array() - mx).exp();
                s.row(a) /= s.row(a).sum();
            }
            MapM(probs->data() + p_off[g] + static_cast<std::size_t>(hd) * t * t, t, t) = s;
            o.noalias() = s * v;
            for (int a = 0; a < t; ++a) {
                double* dst = out.data() + static_cast<std::size_t>(rows[a]) * c + hd * dh;
                for (int j = 0; j < dh; ++j) dst[j] = o(a, j);
            }
        }
    }

    return Tensor::make_result(
        {n, c}, std::move(out), {qkv}, "multihead_attention",
        [groups, heads, c, dh, sc, probs, p_off = std::move(p_off)](detail::Node& nd) {
            auto* g = pgrad(nd, 0);
            const auto& qv = pval(nd, 0);
            const int c3 = 3 * c;
            RowMat q, k, v, dout, dp, ds, dq, dk, dv;
            for (int gi = 0; gi < groups.count(); ++gi) {
                auto rows = groups.group(gi);
                const int t = static_cast<int>(rows.size());
                q.resize(t, dh);
                k.resize(t, dh);
                v.resize(t, dh);
                dout.resize(t, dh);
                for (int hd = 0; hd < heads; ++hd) {
                    for (int a = 0; a < t; ++a) {
                        const double* src = qv.data() + static_cast<std::size_t>(rows[a]) * c3 + hd * dh;
                        const double* gsrc = nd.grad.data() + static_cast<std::size_t>(rows[a]) * c + hd * dh;
                        for (int j = 0; j < dh; ++j) {
                            q(a, j) = src[j];
                            k(a, j) = src[c + j];
                            v(a, j) = src[2 * c + j];
                            dout(a, j) = gsrc[j];
                        }
                    }
                    MapC p(probs->data() + p_off[gi] + static_cast<std::size_t>(hd) * t * t, t, t);
                    dv.noalias() = p.transpose() * dout;
                    dp.noalias() = dout * v.transpose();
                    ds.resize(t, t);
                    for (int a = 0; a < t; ++a) {
                        double dot = 0.0;
                        for (int j = 0; j < t; ++j) dot += dp(a, j) * p(a, j);
                        for (int j = 0; j < t; ++j) ds(a, j) = p(a, j) * (dp(a, j) - dot);
                    }
                    dq.noalias() = (ds * k) * sc;
                    dk.noalias() = (ds.transpose() * q) * sc;
                    for (int a = 0; a < t; ++a) {
                        double* dst = g->data() + static_cast<std::size_t>(rows[a]) * c3 + hd * dh;
                        for (int j = 0; j < dh; ++j) {
                            dst[j] += dq(a, j);
                            dst[c + j] += dk(a, j);
                            dst[2 * c + j] += dv(a, j);
                        }
                    }
                }
            }
        });
}

Tensor maxpool2x2(const Tensor& x) {
    if (x.ndim() != 4) throw std::invalid_argument("maxpool2x2: expected (b, h, w, c)");
    const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if (h % 2 || w % 2) throw std::invalid_argument("maxpool2x2: spatial size must be even");
    const int ho = h / 2, wo = w / 2;
    std::vector<double> out(static_cast<std::size_t>(b) * ho * wo * c);
    std::vector<std::size_t> arg(out.size());
    auto xv = x.data();
    for (int bi = 0; bi < b; ++bi)
        for (int i = 0; i < ho; ++i)
            for (int j = 0; j < wo; ++j)
                for (int ch = 0; ch < c; ++ch) {
                    std::size_t best = 0;
                    double bv = -std::numeric_limits<double>::infinity();
                    for (int di = 0; di < 2; ++di)
                        for (int dj = 0; dj < 2; ++dj) {
                            const std::size_t src =
                                ((static_cast<std::size_t>(bi) * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                            if (xv[src] > bv) {
                                bv = xv[src];
                                best = src;
                            }
                        }
                    const std::size_t dst = ((static_cast<std::size_t>(bi) * ho + i) * wo + j) * c + ch;
                    out[dst] = bv;
                    arg[dst] = best;
                }
    return Tensor::make_result({b, ho, wo, c}, std::move(out), {x}, "maxpool2x2", [arg = std::move(arg)](detail::Node& nd) {
        auto* g = pgrad(nd, 0);
        for (std::size_t k = 0; k < arg.size(); ++k) (*g)[arg[k]] += nd.grad[k];
    });
}

Tensor nll_rows(const Tensor& logp, std::span<const int> targets) {
    const int r = logp.rows(), c = logp.cols();
    if (static_cast<int>(targets.size()) != r) throw std::invalid_argument("nll_rows: one target per row required");
    std::vector<int> t(targets.begin(), targets.end());
    double s = 0.0;
    auto lv = logp.data();
    for (int i = 0; i < r; ++i) {
        if (t[i] < 0 || t[i] >= c) throw std::out_of_range("nll_rows: target index out of range");
        s -= lv[static_cast<std::size_t>(i) * c + t[i]];
    }
    s /= r;
    if (!std::isfinite(s)) throw std::domain_error("nll_rows: non-finite loss");
    return Tensor::make_result({1}, {s}, {logp}, "nll_rows", [t = std::move(t), r, c](detail::Node& nd) {
        auto* g = pgrad(nd, 0);
        for (int i = 0; i < r; ++i) (*g)[static_cast<std::size_t>(i) * c + t[i]] -= nd.grad[0] / r;
    });
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets) {
    return nll_rows(log_softmax_rows(logits), targets);
}

Tensor bce_with_logits_sum(const Tensor& logits, std::span<const double> targets) {
    if (targets.size() != logits.numel()) throw std::invalid_argument("bce_with_logits_sum: size mismatch");
    std::vector<double> t(targets.begin(), targets.end());
    double s = 0.0;
    auto xv = logits.data();
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double x = xv[i];
        s += std::max(x, 0.0) - x * t[i] + std::log1p(std::exp(-std::abs(x)));
    }
    return Tensor::make_result({1}, {s}, {logits}, "bce_with_logits_sum", [t = std::move(t)](detail::Node& nd) {
        auto* g = pgrad(nd, 0);
        const auto& xv = pval(nd, 0);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double sig = 1.0 / (1.0 + std::exp(-xv[i]));
            (*g)[i] += nd.grad[0] * (sig - t[i]);
        }
    });
}

Tensor smooth_l1_sum(const Tensor& pred, std::span<const double> target, double beta) {
    if (target.size() != pred.numel()) throw std::invalid_argument("smooth_l1_sum: size mismatch");
    std::vector<double> t(target.begin(), target.end());
    double s = 0.0;
    auto pv = pred.data();
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double d = std::abs(pv[i] - t[i]);
        s += d < beta ? 0.5 * d * d / beta : d - 0.5 * beta;
    }
    return Tensor::make_result({1}, {s}, {pred}, "smooth_l1_sum", [t = std::move(t), beta](detail::Node& nd) {
        auto* g = pgrad(nd, 0);
        const auto& pv = pval(nd, 0);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double d = pv[i] - t[i];
            const double dd = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
            (*g)[i] += nd.grad[0] * dd;
        }
    });
}

}  // namespace dito
