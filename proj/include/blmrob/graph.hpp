#pragma once

#include <array>
#include <optional>
#include <unordered_map>
#include <vector>

#include "blmrob/array.hpp"

namespace blmrob::ad {

// Reverse-mode autodiff over a static tape of dense rank<=3 arrays.
//
// A Graph is built once (single-threaded), then stays immutable. Evaluation
// state lives in an Eval object, so one graph can be evaluated from several
// threads at once, each with its own Eval. Nodes are appended in topological
// order by construction; every op only references earlier node ids.
//
// Shapes are fixed at build time. The op set is exactly what the wrapped
// classification pipeline needs; there is no broadcasting beyond the
// per-channel ops and no fusion.

enum class Op : uint8_t {
    Input,      // leaf bound at eval time
    Param,      // leaf bound at eval time, marked as a model parameter
    Const,      // payload baked into the graph
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,      // x * scalar
    Maximum,    // elementwise max(a, b); gradient follows a on ties
    Relu,       // subgradient 0 at 0
    Sqrt,
    Clamp,      // forward-only projection helper; pass/zero subgradient
    AddChannel, // y[..,c] = x[..,c] + v[c], v rank-1 over the last axis
    SubChannel,
    MulChannel,
    DivChannel,
    TileChannels,  // (T) -> (T,C), y[t,c] = u[t]
    ChannelMean,   // mean over all axes except the last -> rank-1 (C)
    MeanAll,       // -> scalar
    SumAll,        // -> scalar
    Conv1d,        // same padding, stride 1; x:(T,Ci)|(B,T,Ci), k:(Co,Ci,K), b:(Co)
    Dense,         // x:(C)|(B,C), w:(C,M), b:(M)
    GapTime,       // (T,C)->(C), (B,T,C)->(B,C)
    Softmax,       // over last axis, rank 1 or 2
    CrossEntropy,  // scalar: -log softmax(logits)[label]; mean over batch rows
    ConcatTime,    // along axis 0, rank-2 only
    SliceTime,     // rows [start, start+len) of a rank-2 array
};

const char* op_name(Op op);

using NodeId = int;

struct Node {
    Op op = Op::Const;
    std::array<NodeId, 3> in{{-1, -1, -1}};
    int n_in = 0;
    std::vector<int> shape;
    Array payload;               // Const only
    double s0 = 0.0, s1 = 0.0;   // Scale factor; Clamp lo/hi
    int i0 = 0, i1 = 0;          // SliceTime start/len; TileChannels C
    std::vector<int> labels;     // CrossEntropy
};

// Leaf id -> value. Arrays are borrowed; they must outlive the forward call.
using Bindings = std::vector<std::pair<NodeId, const Array*>>;

class Graph {
public:
    NodeId input(std::vector<int> shape);
    NodeId param(std::vector<int> shape);
    NodeId constant(Array v);
    NodeId constant(double v) { return constant(Array::scalar(v)); }

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId div(NodeId a, NodeId b);
    NodeId neg(NodeId a);
    NodeId scale(NodeId a, double s);
    NodeId maximum(NodeId a, NodeId b);
    NodeId relu(NodeId a);
    NodeId sqrt(NodeId a);
    NodeId clamp(NodeId a, double lo, double hi);

    NodeId add_channel(NodeId x, NodeId v);
    NodeId sub_channel(NodeId x, NodeId v);
    NodeId mul_channel(NodeId x, NodeId v);
    NodeId div_channel(NodeId x, NodeId v);
    NodeId tile_channels(NodeId u, int channels);
    NodeId channel_mean(NodeId x);
    NodeId mean_all(NodeId x);
    NodeId sum_all(NodeId x);

    NodeId conv1d(NodeId x, NodeId kernel, NodeId bias);
    NodeId dense(NodeId x, NodeId w, NodeId b);
    NodeId gap_time(NodeId x);
    NodeId softmax(NodeId x);
    NodeId cross_entropy(NodeId logits, std::vector<int> labels);
    NodeId concat_time(NodeId a, NodeId b);
    NodeId slice_time(NodeId x, int start, int len);

    void set_output(NodeId id);
    NodeId output() const { return output_; }

    int size() const { return static_cast<int>(nodes_.size()); }
    const Node& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
    const std::vector<NodeId>& leaves() const { return leaves_; }
    const std::vector<int>& shape_of(NodeId id) const { return node(id).shape; }

private:
    NodeId push(Node n);
    NodeId unary(Op op, NodeId a);
    NodeId binary(Op op, NodeId a, NodeId b);
    NodeId channel_op(Op op, NodeId x, NodeId v);

    std::vector<Node> nodes_;
    std::vector<NodeId> leaves_;
    NodeId output_ = -1;
};

// Per-thread evaluation state for one immutable Graph.
class Eval {
public:
    explicit Eval(const Graph& g);

    // Evaluates every node; returns the output node's value (last node when
    // no output was designated). Bindings must cover all leaves.
    const Array& forward(const Bindings& bindings);

    const Array& value(NodeId id) const { return values_[static_cast<size_t>(id)]; }
    const std::vector<Array>& values() const { return values_; }

    // Reverse pass from the designated scalar output. forward() must have
    // run with the same bindings.
    void backward();
    const Array& grad(NodeId id) const { return grads_[static_cast<size_t>(id)]; }

private:
    const Graph& g_;
    std::vector<Array> values_;
    std::vector<Array> grads_;
    bool have_forward_ = false;
};

using GradientMap = std::unordered_map<NodeId, Array>;

// One-shot helpers matching the operation-level contracts.
std::vector<Array> forward_eval(const Graph& g, const Bindings& bindings);
GradientMap backward_grad(const Graph& g, const Bindings& bindings,
                          const std::vector<NodeId>& wrt);

// Max over the leaf's entries of |analytic - central difference| / max(1, |analytic|).
// Entries whose +/-h evaluations flip the sign of any monitored node value
// (ReLU preactivations) are excluded from the max.
double finite_diff_check(const Graph& g, const Bindings& bindings, NodeId leaf, double h,
                         const std::vector<NodeId>& kink_nodes = {});

}  // namespace blmrob::ad
