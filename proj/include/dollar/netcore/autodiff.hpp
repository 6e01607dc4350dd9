#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dollar/netcore/tensor.hpp"

namespace dollar {

namespace detail {
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad();
};
}  // namespace detail

/// Handle to a value in the reverse-mode tape. Copies share the node.
class Var {
public:
    Var() = default;

    /// Value that never receives gradients.
    static Var constant(Tensor value);
    /// Trainable leaf (a network parameter).
    static Var parameter(Tensor value);

    bool defined() const noexcept { return node_ != nullptr; }
    const Tensor& value() const;
    /// In-place access for optimizers and EMA; only valid on leaves.
    Tensor& mutable_value();
    const Shape& shape() const { return value().shape(); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    /// Gradient, or zeros of the value's shape when none was accumulated.
    Tensor grad() const;
    void zero_grad();
    /// True when this node records a backward function (an interior op).
    bool has_graph() const { return node_ && static_cast<bool>(node_->backward_fn); }

    /// Stop-gradient. Participates in the detach replay used by gradient checks.
    Var detach() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    static Var from_node(std::shared_ptr<detail::Node> n) {
        Var v;
        v.node_ = std::move(n);
        return v;
    }

private:
    std::shared_ptr<detail::Node> node_;
};

/// Accumulates d(loss)/d(leaf) into every reachable trainable leaf.
/// The loss must be a single-element tensor.
void backward(const Var& loss);

bool grad_enabled();

/// Scoped switch: ops record no graph while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Scoped switch: network parameters are read as constants while inputs
/// keep their graph. Used for "parameters detached, path kept" evaluations.
class FreezeParamsGuard {
public:
    FreezeParamsGuard();
    ~FreezeParamsGuard();
    FreezeParamsGuard(const FreezeParamsGuard&) = delete;
    FreezeParamsGuard& operator=(const FreezeParamsGuard&) = delete;

private:
    bool previous_;
};
bool params_frozen();

/// Records the value of every detach() during one evaluation and replays it
/// on later evaluations, so finite differences see stop-gradient inputs as
/// frozen exactly as autodiff does.
class DetachReplay {
public:
    enum class Mode { record, replay };
    explicit DetachReplay(Mode mode, std::vector<Tensor>* store);
    ~DetachReplay();
    DetachReplay(const DetachReplay&) = delete;
    DetachReplay& operator=(const DetachReplay&) = delete;

    static Tensor intercept(const Tensor& value);

private:
    DetachReplay* previous_;
    Mode mode_;
    std::vector<Tensor>* store_;
    std::size_t cursor_ = 0;
};

namespace ops {

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// Multiplies row r by coef[r] (constant coefficients).
Var scale_rows(const Var& a, const std::vector<double>& coef);
/// Elementwise product with a constant tensor of the same shape.
Var mul_const(const Var& a, const Tensor& c);
Var add_const(const Var& a, const Tensor& c);

Var matmul(const Var& x, const Var& w);
/// x[B,I] * w[I,O] + b[O]
Var linear(const Var& x, const Var& w, const Var& b);

Var silu(const Var& a);
Var sigmoid(const Var& a);
Var square(const Var& a);
Var huber(const Var& a, double delta);
Var sqrt_eps(const Var& a, double eps);

Var sum(const Var& a);
Var mean(const Var& a);
/// Sum over trailing dims: [B, ...] -> [B, 1]
Var row_sum(const Var& a);
Var row_mean(const Var& a);

Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var reshape(const Var& a, Shape shape);
/// [B, A, C] -> [B, C, A]; trailing dims beyond the first are flattened
/// into C (so [B, A, H, W] gives [B, H*W, A]).
Var swap_last(const Var& a);

/// table[K,E] gathered by row index -> [B,E]
Var embedding(const Var& table, const std::vector<int>& index);

/// x[B,C,H,W], w[O,C,K,K], b[O]
Var conv2d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t pad);
/// x[B,C,...] normalized per (sample, group) then affine per channel.
Var group_norm(const Var& x, const Var& gamma, const Var& beta, std::size_t groups, double eps = 1e-5);
/// x[B,C,H,W] -> [B,C]
Var global_avg_pool(const Var& x);

Var softmax_rows(const Var& a);
/// q[B,d], k[B*L,d] -> scores[B,L] with scores[b,l] = <q_b, k_{b,l}>
Var token_dot(const Var& q, const Var& k, std::size_t tokens);
/// weights[B,L], v[B*L,d] -> [B,d]
Var token_mix(const Var& weights, const Var& v);

}  // namespace ops

inline Var operator+(const Var& a, const Var& b) { return ops::add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return ops::sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return ops::mul(a, b); }
inline Var operator*(double s, const Var& a) { return ops::scale(a, s); }
inline Var operator-(const Var& a) { return ops::neg(a); }

}  // namespace dollar
