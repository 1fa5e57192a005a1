#pragma once

// Reverse-mode automatic differentiation over a closed set of tensor
// primitives. A Graph records every primitive application in creation order
// (which is a valid topological order); backward() walks it in reverse.

#include "tsdiff/tensor.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace tsdiff::ad {

/// Named trainable leaf. Gradients accumulate here during Graph::backward.
class Parameter {
public:
    Parameter() = default;
    Parameter(std::string name, Tensor value);

    const std::string& name() const noexcept { return name_; }
    Tensor& value() noexcept { return value_; }
    const Tensor& value() const noexcept { return value_; }
    const Tensor& grad() const noexcept { return grad_; }

    /// Frozen parameters enter graphs as constants and never receive gradients.
    bool frozen() const noexcept { return frozen_; }
    void set_frozen(bool frozen) noexcept { frozen_ = frozen; }

    /// True if the last backward pass reached this parameter.
    bool touched() const noexcept { return touched_; }
    void zero_grad();

private:
    friend class Graph;
    std::string name_;
    Tensor value_;
    Tensor grad_;
    bool frozen_ = false;
    bool touched_ = false;
};

enum class Op : std::uint8_t {
    constant,
    parameter,
    conv2d,
    conv2d_field,
    channel_affine,
    modulate,
    add_channel_bias,
    relu,
    dense,
    global_avg_pool,
    avg_pool2,
    upsample_nearest2,
    add,
    mul,
    concat_channels,
    sum,
    mse,
    mean_abs_diff,
    scale,
};

std::string_view op_name(Op op);

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    /// Gradient after backward(); empty if the node was not reached.
    const Tensor& grad() const;
    Shape shape() const { return value().shape(); }
    Graph& graph() const { return *graph_; }
    std::size_t index() const noexcept { return index_; }
    bool valid() const noexcept { return graph_ != nullptr; }

private:
    friend class Graph;
    Var(Graph* graph, std::size_t index) : graph_(graph), index_(index) {}
    Graph* graph_ = nullptr;
    std::size_t index_ = 0;
};

enum class GradMode { enabled, disabled };

class Graph {
public:
    using Backward = std::function<void(Graph&, std::size_t)>;

    explicit Graph(GradMode mode = GradMode::enabled) : mode_(mode) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor value);
    /// Leaf bound to `p`; frozen parameters (or a grad-disabled graph) yield a constant.
    Var parameter(Parameter& p);
    Var parameter(const Parameter& p);

    /// Propagates d(loss)/d(node) to every reachable node and accumulates
    /// parameter gradients. `loss` must hold exactly one element.
    void backward(Var loss);

    GradMode mode() const noexcept { return mode_; }
    std::size_t node_count() const noexcept { return nodes_.size(); }
    std::size_t count(Op op) const;
    std::size_t last_backward_visits() const noexcept { return visits_; }

    /// Primitive registration (used by the op implementations).
    Var record(Op op, Tensor value, std::vector<std::size_t> inputs, Backward backward);
    const Tensor& value(std::size_t i) const { return nodes_[i].value; }
    const Tensor& grad(std::size_t i) const { return nodes_[i].grad; }
    Tensor& grad_accumulator(std::size_t i);
    bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }
    Op op(std::size_t i) const { return nodes_[i].op; }

private:
    struct Node {
        Op op;
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> inputs;
        Backward backward;
        Parameter* param = nullptr;
        bool requires_grad = false;
    };

    GradMode mode_;
    std::vector<Node> nodes_;
    std::size_t visits_ = 0;
};

enum class PadMode { zero, valid };

struct ConvOptions {
    std::size_t stride = 1;
    PadMode pad = PadMode::zero;
};

// Shape rules (all image tensors are N,C,H,W):
//   conv2d            x[N,Ci,H,W], kernel[Co,Ci,k,k] (k in {1,3}), bias[Co]; stride in {1,2}
//   conv2d_field      as conv2d with zero pad and stride 1, plus a constant border[Co,H,W]
//   channel_affine    x[N,C,H,W], w[C], b[C]              -> w*x + b
//   modulate          x[N,C,H,W], gamma[N,C], nu[N,C]     -> gamma*x + nu
//   add_channel_bias  x[N,C,H,W], b[N,C]                  -> x + b
//   dense             x[N,In], weight[Out,In], bias[Out]  -> x*weight^T + bias
//   global_avg_pool   x[N,C,H,W] -> [N,C]
//   avg_pool2         x[N,C,H,W] (H,W even) -> [N,C,H/2,W/2]
//   upsample_nearest2 x[N,C,H,W] -> [N,C,2H,2W]
//   concat_channels   a[N,Ca,H,W], b[N,Cb,H,W] -> [N,Ca+Cb,H,W]
//   add, mul          identical shapes, no broadcasting
//   sum, mse, mean_abs_diff -> shape [1]
Var conv2d(Var x, Var kernel, Var bias, ConvOptions options = {});
Var conv2d_field(Var x, Var kernel, Var bias, const Tensor& border);
Var channel_affine(Var x, Var w, Var b);
Var modulate(Var x, Var gamma, Var nu);
Var add_channel_bias(Var x, Var b);
Var relu(Var x);
Var dense(Var x, Var weight, Var bias);
Var global_avg_pool(Var x);
Var avg_pool2(Var x);
Var upsample_nearest2(Var x);
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var concat_channels(Var a, Var b);
Var sum(Var x);
Var mse(Var a, Var b);
Var mean_abs_diff(Var a, Var b);
Var scale(Var x, Scalar factor);

/// Transformer-style sinusoidal embedding of a (diffusion) step, repeated over
/// `batch` rows: [batch, dim], first half sin, second half cos.
Tensor sinusoidal_embedding(double t, std::size_t dim, std::size_t batch = 1);
Var sinusoidal_embed(Graph& g, double t, std::size_t dim, std::size_t batch = 1);

/// Plain (graph-free) convolution used by reparameterization and tests.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, ConvOptions options = {});

} // namespace tsdiff::ad
