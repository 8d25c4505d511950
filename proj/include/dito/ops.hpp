#pragma once

#include <span>
#include <vector>

#include "dito/tensor.hpp"

namespace dito {

// Partition of matrix rows into groups (attention windows, pooling groups).
// Group g holds index[offsets[g] .. offsets[g+1]).
struct RowGroups {
    std::vector<int> index;
    std::vector<int> offsets{0};

    int count() const { return static_cast<int>(offsets.size()) - 1; }
    std::span<const int> group(int g) const {
        return {index.data() + offsets[g], static_cast<std::size_t>(offsets[g + 1] - offsets[g])};
    }
    void add(std::span<const int> rows);

    // n_groups consecutive blocks of group_size rows.
    static RowGroups contiguous(int n_groups, int group_size);
};

// Elementwise (identical shapes).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double k);
Tensor add_scalar(const Tensor& a, double k);
// a * s where s holds a single value; differentiable in both.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);

// x[N, C] + b[C] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& b);
// x[N, C] + y[M, C] with y tiled N / M times down the rows.
Tensor add_tiled(const Tensor& x, const Tensor& y);

Tensor matmul(const Tensor& a, const Tensor& b);     // [n,k] x [k,m]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [n,k] x [m,k]^T
// x[N, in] * w[in, out] (+ b[out]); b may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

// Output row i = x row idx[i]; idx < 0 yields a zero row.
Tensor gather_rows(const Tensor& x, std::span<const int> idx);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& x, int begin, int count);
Tensor slice_cols(const Tensor& x, int begin, int count);

Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
// Fails on a row with zero norm.
Tensor l2_normalize_rows(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor group_mean(const Tensor& x, const RowGroups& groups);  // [G, C]
Tensor group_max(const Tensor& x, const RowGroups& groups);   // [G, C]

// Circular shift of a (h, w, c) or (b, h, w, c) grid:
// out[(i + dy) mod h][(j + dx) mod w] = x[i][j].
Tensor roll2d(const Tensor& x, int dy, int dx);

// Bilinear read at continuous cell coordinates (cell centers at integers,
// clamped to [0, h-1] x [0, w-1]). Returns a [c] vector.
Tensor bilinear_sample(const Tensor& grid, double y, double x);

// Multi-head self-attention over groups of rows of qkv[N, 3C] laid out as
// [q | k | v]. Rows outside every group attend to nothing and output zero.
Tensor multihead_attention(const Tensor& qkv, const RowGroups& groups, int heads);

// 2x2 stride-2 max pool over a (b, h, w, c) grid with even h, w.
Tensor maxpool2x2(const Tensor& x);

// Mean of -logp[i, target[i]].
Tensor nll_rows(const Tensor& logp, std::span<const int> targets);
Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets);
// Sum of per-element binary cross entropy with logits.
Tensor bce_with_logits_sum(const Tensor& logits, std::span<const double> targets);
// Sum of smooth-L1 over all elements.
Tensor smooth_l1_sum(const Tensor& pred, std::span<const double> target, double beta);

}  // namespace dito
