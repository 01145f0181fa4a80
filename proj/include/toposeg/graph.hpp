#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "toposeg/tensor.hpp"

namespace toposeg {

class Graph;

/// Handle to one node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
    Var() = default;
    Var(Graph* g, int id) : g_(g), id_(id) {}
    const Tensor& value() const;
    const std::vector<int>& shape() const;
    int id() const { return id_; }
    Graph* graph() const { return g_; }
    bool valid() const { return g_ != nullptr; }

private:
    Graph* g_ = nullptr;
    int id_ = -1;
};

/// Result of one backward pass: per-node gradient tensors.
class Gradients {
public:
    /// Gradient of the loss w.r.t. v; zeros when no gradient reached v.
    Tensor at(const Var& v) const;
    /// Stored gradient or nullptr when none reached v.
    const Tensor* find(const Var& v) const;

private:
    friend class Graph;
    std::vector<Tensor> grads_;
    std::vector<bool> has_;
};

/// Tape of a single forward pass. Nodes are recorded eagerly in order of
/// creation, which is a topological order, and backward replays adjoint
/// rules over that order in reverse, visiting each node once. A graph is
/// confined to one thread; distinct graphs are independent.
class Graph {
public:
    /// Adjoint rule: reads values through the graph, accumulates into grads.
    using BackwardFn = std::function<void(Graph&, int self, const Tensor& out_grad, Gradients& grads)>;

    Var leaf(Tensor value, bool requires_grad = false);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Records a derived node. requires_grad is inherited from parents.
    Var add_op(Tensor value, std::vector<int> parents, BackwardFn fn);
    /// Records a derived node that blocks gradient flow entirely.
    Var add_barrier(Tensor value);

    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
    bool is_leaf(int id) const { return nodes_[static_cast<size_t>(id)].leaf; }
    int size() const { return static_cast<int>(nodes_.size()); }

    /// Reverse accumulation from a scalar node. Throws std::invalid_argument
    /// if the loss is not scalar (numel 1).
    Gradients backward(const Var& loss);

    /// grads[id] += scale * t, allocating zeros on first touch. No-op for
    /// nodes that do not require gradients.
    void accumulate(Gradients& grads, int id, const Tensor& t, double scale = 1.0);

private:
    struct Node {
        Tensor value;
        std::vector<int> parents;
        BackwardFn backward;
        bool requires_grad = false;
        bool leaf = false;
    };
    std::vector<Node> nodes_;
};

// Elementwise arithmetic on identically shaped tensors.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

Var scale(Var x, double c);
Var add_scalar(Var x, double c);
Var relu(Var x);
Var sqrt(Var x);
Var reciprocal(Var x);
Var clamp_min(Var x, double floor);
Var log_clamped(Var x, double floor = 1e-12);

/// Sum over the listed axes; an empty list sums over all axes. Summed axes
/// are dropped from the result shape.
Var reduce_sum(Var x, std::vector<int> axes = {});
Var reshape(Var x, std::vector<int> shape);
Var concat(const std::vector<Var>& xs, int axis);

/// x:[R,C] with each row i multiplied by r[i], r:[R].
Var row_scale(Var x, Var r);
/// v:[B,D] replicated over an h-by-w spatial grid -> [B,D,h,w].
Var broadcast_spatial(Var v, int h, int w);
/// Rows gathered from a [B,D,H,W] map at (b,y,x) pixel sites -> [P,D].
struct PixelIndex {
    int b, y, x;
};
Var gather_pixels(Var m, std::vector<PixelIndex> sites);

Var linear(Var x, Var w);
Var linear(Var x, Var w, Var bias);
Var conv2d(Var x, Var w, Var bias);
Var conv2d_fixed(Var x, const Tensor& kernel);
Var mean_filter_3x3(Var x);
Var block_max_pool(Var x, int s);
/// Sliding-window max over odd k-by-k windows, stride 1, edge replication.
Var window_max(Var x, int k);

Var softmax(Var x, int axis);
Var log_softmax(Var x, int axis);
struct SoftmaxLog {
    Var probs;
    Var logprobs;
};
SoftmaxLog softmax_log(Var x, int axis);

Var stop_gradient(Var x);

Gradients backward(Var loss);

/// Max over coordinates of |analytic - central difference| / max(1, |central
/// difference|) for a scalar-valued tensor function.
using ScalarFn = std::function<Var(Graph&, Var)>;
double grad_check(const ScalarFn& f, const Tensor& x, double h = 1e-4);

} // namespace toposeg
