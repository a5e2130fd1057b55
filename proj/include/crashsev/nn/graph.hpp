#pragma once

// Minimal reverse-mode differentiation over dense row-major tensors.
//
// A Graph is a tape: every op appends a node holding its value and a closure that pushes the
// node's gradient into its inputs. Graph::backward walks the tape in reverse creation order
// (a valid topological order), accumulates into Parameter::grad, and then releases the tape.
// Batched sequence tensors are stored flattened as [batch * tokens, width].

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "crashsev/common.hpp"

namespace crashsev::nn {

template <class T>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s, T fill = T(0));

    std::size_t size() const { return data.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rows() const { return shape.empty() ? 1 : shape.front(); }
    std::size_t cols() const { return shape.size() < 2 ? 1 : data.size() / shape.front(); }
    T& operator[](std::size_t i) { return data[i]; }
    T operator[](std::size_t i) const { return data[i]; }
    bool all_finite() const;
};

template <class T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    void zero_grad();
};

template <class T>
class Graph;

template <class T>
struct Var {
    Graph<T>* graph = nullptr;
    int id = -1;

    const Tensor<T>& value() const;
    const std::vector<std::size_t>& shape() const { return value().shape; }
};

template <class T>
class Graph {
public:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        Parameter<T>* param = nullptr;
        bool requires_grad = false;
        std::function<void(Graph&)> backward;
    };

    Var<T> constant(Tensor<T> value);
    Var<T> param(Parameter<T>& p);
    /// Appends an op result. `bw` runs during backward with this node's grad allocated.
    Var<T> record(Tensor<T> value, bool requires_grad, std::function<void(Graph&)> bw);

    Node& node(int id) { return *nodes_.at(static_cast<std::size_t>(id)); }
    const Node& node(int id) const { return *nodes_.at(static_cast<std::size_t>(id)); }
    /// Gradient buffer of a node, zero-initialized on first use.
    Tensor<T>& grad(int id);
    bool requires_grad(int id) const { return node(id).requires_grad; }

    /// Reverse pass from a scalar loss; releases the tape afterwards.
    void backward(Var<T> loss);
    void clear() { nodes_.clear(); }
    bool has_tape() const { return !nodes_.empty(); }
    std::size_t size() const { return nodes_.size(); }

    /// Running hash of ReLU activation patterns; gradient checks use it to detect when a
    /// finite-difference step crosses a kink.
    std::uint64_t kink_signature = 0;

private:
    std::vector<std::unique_ptr<Node>> nodes_;
};

// ---- ops ---------------------------------------------------------------------------------

template <class T> Var<T> matmul(Var<T> a, Var<T> b);              // [M,K] x [K,N]
template <class T> Var<T> add(Var<T> a, Var<T> b);                 // same shape
template <class T> Var<T> add_bias(Var<T> a, Var<T> bias);         // [M,N] + [N]
template <class T> Var<T> mul(Var<T> a, Var<T> b);                 // elementwise
template <class T> Var<T> scale(Var<T> a, T s);
template <class T> Var<T> relu(Var<T> a);
template <class T> Var<T> silu(Var<T> a);
template <class T> Var<T> gelu(Var<T> a);
template <class T> Var<T> softplus(Var<T> a);
template <class T> Var<T> exp(Var<T> a);
template <class T> Var<T> neg(Var<T> a);

/// Inverted dropout: zeroes with probability p and scales survivors by 1/(1-p). Identity when !train.
template <class T> Var<T> dropout(Var<T> a, double p, Rng& rng, bool train);

/// Columns [start, start+len) of a [M,N] tensor.
template <class T> Var<T> slice_cols(Var<T> a, std::size_t start, std::size_t len);
/// Rows `idx` of a [M,N] tensor.
template <class T> Var<T> select_rows(Var<T> a, const std::vector<std::size_t>& idx);
/// Embedding lookup: rows `idx` of a [R,N] table.
template <class T> Var<T> gather_rows(Var<T> table, const std::vector<std::size_t>& idx);

/// [B*T, W] -> [B, W] mean over each run of T consecutive rows.
template <class T> Var<T> mean_tokens(Var<T> a, std::size_t tokens);

/// Tabular features as tokens: out[b, g, :] = bias[g, :] + Σ_{c in group g} x[b, c] * weight[c, :].
/// x [B, C] is data (no gradient); weight [C, W]; bias [G, W]; result [B*G, W].
template <class T>
Var<T> featurize(const Tensor<T>& x, Var<T> weight, Var<T> bias, const std::vector<int>& column_group);

/// Depthwise 1-D convolution along the token axis with zero "same" padding.
/// x [B*T, W]; kernel [K, W] (K odd); bias [W].
template <class T> Var<T> depthwise_conv(Var<T> x, Var<T> kernel, Var<T> bias, std::size_t tokens);

/// Selective diagonal state-space scan, per sequence and channel d:
///   h_t = exp(delta_t[d] A[d,:]) ⊙ h_{t-1} + delta_t[d] B_t u_t[d],  h_0 = 0
///   y_t[d] = <C_t, h_t> + skip[d] u_t[d]
/// u, delta [B*T, D]; A [D, N]; Bm, Cm [B*T, N]; skip [D].
template <class T>
Var<T> ssm_scan(Var<T> u, Var<T> delta, Var<T> A, Var<T> Bm, Var<T> Cm, Var<T> skip, std::size_t tokens);

/// Multi-head scaled dot-product attention without projections: each of the T rows of a
/// sequence attends to the first `keys` rows. q, k, v [B*T, W]; W divisible by heads.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, std::size_t tokens, std::size_t keys, std::size_t heads);

/// Normalizes each row over its N entries (eps 1e-5), then gain and shift.
template <class T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> shift);

/// Σ x²
template <class T> Var<T> sum_squares(Var<T> a);
/// Σ x ⊙ w for a constant w of the same shape.
template <class T> Var<T> weighted_sum(Var<T> a, const Tensor<T>& w);

/// Σ_i w[y_i] * (-log softmax(z_i)[y_i]) / Σ_i w[y_i], with the softmax restricted to the first
/// `active_classes` logits. Empty `class_weights` means all ones.
template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& labels, const std::vector<double>& class_weights,
                     std::size_t active_classes = 0);

/// Row-wise softmax over the first `active_classes` columns (0 = all); others get 0.
template <class T> Tensor<T> softmax_rows(const Tensor<T>& logits, std::size_t active_classes = 0);

}  // namespace crashsev::nn
