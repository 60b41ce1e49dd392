#pragma once

// Tape-free reverse-mode differentiation over dense tensors. Every op returns
// a Var that owns its value and a closure that pushes its output gradient to
// its parents; backward() walks the graph in reverse topological order.
// Ops are coarse (matmul, layernorm, fused causal attention) so that a
// packed batch of sequences maps onto a few large GEMMs.

#include "iconlab/tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace iconlab::ag {

struct Node {
    Tensor value;
    Tensor grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    /// Gradient buffer, zero-initialised on first use.
    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var constant(Tensor value);
    static Var leaf(Tensor value, bool requires_grad = true);

    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }

    /// Accumulated gradient; zeros of the value's shape if nothing reached this node.
    Tensor grad() const;

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Reverse sweep from a one-element loss. Throws ContractError otherwise.
void backward(const Var& loss);

// ---- linear algebra -------------------------------------------------------

Var matmul(const Var& a, const Var& b);
/// a (m x n) + row vector b (n) broadcast over rows.
Var add_row(const Var& a, const Var& b);

// ---- elementwise ----------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var exp(const Var& a);
Var relu(const Var& a);
/// min(a, cap); gradient is zero where the cap is active.
Var clamp_max(const Var& a, double cap);
/// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Var gelu(const Var& a);

// ---- reductions -----------------------------------------------------------

Var sum(const Var& a);
Var mean(const Var& a);
/// sum_i w_i a_i with constant weights of the same size.
Var weighted_sum(const Var& a, const Tensor& weights);
/// Rows of a (R x 1) split into consecutive groups; returns the per-group mean (S x 1).
Var group_mean(const Var& a, const std::vector<std::int64_t>& group_sizes);

// ---- row plumbing ---------------------------------------------------------

Var gather_rows(const Var& a, const std::vector<std::int64_t>& rows);
Var concat_rows(const Var& a, const Var& b);
/// Copy of `base` with base(rows[i], col) replaced by values[i]; values is (n x 1).
Var set_column(const Var& base, const std::vector<std::int64_t>& rows, std::int64_t col, const Var& values);

// ---- transformer pieces ---------------------------------------------------

/// Row-wise normalisation to zero mean / unit variance, then gamma * xhat + beta.
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps);

/// Multi-head causal self-attention over a packed batch. Rows
/// [seq_offsets[s], seq_offsets[s+1]) form sequence s; attention never crosses
/// sequence boundaries. q, k, v are (T x d) with d divisible by n_heads.
Var causal_attention(const Var& q, const Var& k, const Var& v, const std::vector<std::int64_t>& seq_offsets,
                     int n_heads);

}  // namespace iconlab::ag
