#include "blmrob/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace blmrob::ad {

const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "Input";
        case Op::Param: return "Param";
        case Op::Const: return "Const";
        case Op::Add: return "Add";
        case Op::Sub: return "Sub";
        case Op::Mul: return "Mul";
        case Op::Div: return "Div";
        case Op::Neg: return "Neg";
        case Op::Scale: return "Scale";
        case Op::Maximum: return "Maximum";
        case Op::Relu: return "Relu";
        case Op::Sqrt: return "Sqrt";
        case Op::Clamp: return "Clamp";
        case Op::AddChannel: return "AddChannel";
        case Op::SubChannel: return "SubChannel";
        case Op::MulChannel: return "MulChannel";
        case Op::DivChannel: return "DivChannel";
        case Op::TileChannels: return "TileChannels";
        case Op::ChannelMean: return "ChannelMean";
        case Op::MeanAll: return "MeanAll";
        case Op::SumAll: return "SumAll";
        case Op::Conv1d: return "Conv1d";
        case Op::Dense: return "Dense";
        case Op::GapTime: return "GapTime";
        case Op::Softmax: return "Softmax";
        case Op::CrossEntropy: return "CrossEntropy";
        case Op::ConcatTime: return "ConcatTime";
        case Op::SliceTime: return "SliceTime";
    }
    return "?";
}

namespace {

[[noreturn]] void shape_fail(Op op, const std::string& detail) {
    throw ShapeMismatch(std::string(op_name(op)) + ": " + detail);
}

// (T,C) or (B,T,C): channel axis is last.
int last_dim(const std::vector<int>& s) { return s.back(); }

}  // namespace

NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::input(std::vector<int> shape) {
    Node n;
    n.op = Op::Input;
    n.shape = std::move(shape);
    NodeId id = push(std::move(n));
    leaves_.push_back(id);
    return id;
}

NodeId Graph::param(std::vector<int> shape) {
    Node n;
    n.op = Op::Param;
    n.shape = std::move(shape);
    NodeId id = push(std::move(n));
    leaves_.push_back(id);
    return id;
}

NodeId Graph::constant(Array v) {
    Node n;
    n.op = Op::Const;
    n.shape = v.shape;
    n.payload = std::move(v);
    return push(std::move(n));
}

NodeId Graph::unary(Op op, NodeId a) {
    Node n;
    n.op = op;
    n.in[0] = a;
    n.n_in = 1;
    n.shape = node(a).shape;
    return push(std::move(n));
}

NodeId Graph::binary(Op op, NodeId a, NodeId b) {
    if (node(a).shape != node(b).shape)
        shape_fail(op, shape_str(node(a).shape) + " vs " + shape_str(node(b).shape));
    Node n;
    n.op = op;
    n.in[0] = a;
    n.in[1] = b;
    n.n_in = 2;
    n.shape = node(a).shape;
    return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) { return binary(Op::Add, a, b); }
NodeId Graph::sub(NodeId a, NodeId b) { return binary(Op::Sub, a, b); }
NodeId Graph::mul(NodeId a, NodeId b) { return binary(Op::Mul, a, b); }
NodeId Graph::div(NodeId a, NodeId b) { return binary(Op::Div, a, b); }
NodeId Graph::maximum(NodeId a, NodeId b) { return binary(Op::Maximum, a, b); }
NodeId Graph::neg(NodeId a) { return unary(Op::Neg, a); }
NodeId Graph::relu(NodeId a) { return unary(Op::Relu, a); }
NodeId Graph::sqrt(NodeId a) { return unary(Op::Sqrt, a); }

NodeId Graph::scale(NodeId a, double s) {
    Node n;
    n.op = Op::Scale;
    n.in[0] = a;
    n.n_in = 1;
    n.shape = node(a).shape;
    n.s0 = s;
    return push(std::move(n));
}

NodeId Graph::clamp(NodeId a, double lo, double hi) {
    Node n;
    n.op = Op::Clamp;
    n.in[0] = a;
    n.n_in = 1;
    n.shape = node(a).shape;
    n.s0 = lo;
    n.s1 = hi;
    return push(std::move(n));
}

NodeId Graph::channel_op(Op op, NodeId x, NodeId v) {
    const auto& xs = node(x).shape;
    const auto& vs = node(v).shape;
    if (xs.size() < 1 || vs.size() != 1 || vs[0] != last_dim(xs))
        shape_fail(op, "x " + shape_str(xs) + " with channel vector " + shape_str(vs));
    Node n;
    n.op = op;
    n.in[0] = x;
    n.in[1] = v;
    n.n_in = 2;
    n.shape = xs;
    return push(std::move(n));
}

NodeId Graph::add_channel(NodeId x, NodeId v) { return channel_op(Op::AddChannel, x, v); }
NodeId Graph::sub_channel(NodeId x, NodeId v) { return channel_op(Op::SubChannel, x, v); }
NodeId Graph::mul_channel(NodeId x, NodeId v) { return channel_op(Op::MulChannel, x, v); }
NodeId Graph::div_channel(NodeId x, NodeId v) { return channel_op(Op::DivChannel, x, v); }

NodeId Graph::tile_channels(NodeId u, int channels) {
    const auto& us = node(u).shape;
    if (us.size() != 1) shape_fail(Op::TileChannels, "expects rank-1, got " + shape_str(us));
    if (channels < 1) shape_fail(Op::TileChannels, "channels must be >= 1");
    Node n;
    n.op = Op::TileChannels;
    n.in[0] = u;
    n.n_in = 1;
    n.shape = {us[0], channels};
    n.i0 = channels;
    return push(std::move(n));
}

NodeId Graph::channel_mean(NodeId x) {
    const auto& xs = node(x).shape;
    if (xs.size() < 2 || xs.size() > 3) shape_fail(Op::ChannelMean, "expects rank 2 or 3");
    Node n;
    n.op = Op::ChannelMean;
    n.in[0] = x;
    n.n_in = 1;
    n.shape = {last_dim(xs)};
    return push(std::move(n));
}

NodeId Graph::mean_all(NodeId x) {
    Node n;
    n.op = Op::MeanAll;
    n.in[0] = x;
    n.n_in = 1;
    return push(std::move(n));
}

NodeId Graph::sum_all(NodeId x) {
    Node n;
    n.op = Op::SumAll;
    n.in[0] = x;
    n.n_in = 1;
    return push(std::move(n));
}

NodeId Graph::conv1d(NodeId x, NodeId kernel, NodeId bias) {
    const auto& xs = node(x).shape;
    const auto& ks = node(kernel).shape;
    const auto& bs = node(bias).shape;
    if (ks.size() != 3) shape_fail(Op::Conv1d, "kernel must be (Co,Ci,K)");
    if (ks[2] % 2 == 0) shape_fail(Op::Conv1d, "kernel width must be odd for same padding");
    if (bs.size() != 1 || bs[0] != ks[0]) shape_fail(Op::Conv1d, "bias must be (Co)");
    std::vector<int> out;
    if (xs.size() == 2) {
        if (xs[1] != ks[1]) shape_fail(Op::Conv1d, "input channels mismatch");
        out = {xs[0], ks[0]};
    } else if (xs.size() == 3) {
        if (xs[2] != ks[1]) shape_fail(Op::Conv1d, "input channels mismatch");
        out = {xs[0], xs[1], ks[0]};
    } else {
        shape_fail(Op::Conv1d, "input must be (T,Ci) or (B,T,Ci)");
    }
    Node n;
    n.op = Op::Conv1d;
    n.in = {x, kernel, bias};
    n.n_in = 3;
    n.shape = std::move(out);
    return push(std::move(n));
}

NodeId Graph::dense(NodeId x, NodeId w, NodeId b) {
    const auto& xs = node(x).shape;
    const auto& ws = node(w).shape;
    const auto& bs = node(b).shape;
    if (ws.size() != 2) shape_fail(Op::Dense, "weight must be (C,M)");
    if (bs.size() != 1 || bs[0] != ws[1]) shape_fail(Op::Dense, "bias must be (M)");
    std::vector<int> out;
    if (xs.size() == 1) {
        if (xs[0] != ws[0]) shape_fail(Op::Dense, "input width mismatch");
        out = {ws[1]};
    } else if (xs.size() == 2) {
        if (xs[1] != ws[0]) shape_fail(Op::Dense, "input width mismatch");
        out = {xs[0], ws[1]};
    } else {
        shape_fail(Op::Dense, "input must be (C) or (B,C)");
    }
    Node n;
    n.op = Op::Dense;
    n.in = {x, w, b};
    n.n_in = 3;
    n.shape = std::move(out);
    return push(std::move(n));
}

NodeId Graph::gap_time(NodeId x) {
    const auto& xs = node(x).shape;
    std::vector<int> out;
    if (xs.size() == 2)
        out = {xs[1]};
    else if (xs.size() == 3)
        out = {xs[0], xs[2]};
    else
        shape_fail(Op::GapTime, "input must be (T,C) or (B,T,C)");
    Node n;
    n.op = Op::GapTime;
    n.in[0] = x;
    n.n_in = 1;
    n.shape = std::move(out);
    return push(std::move(n));
}

NodeId Graph::softmax(NodeId x) {
    const auto& xs = node(x).shape;
    if (xs.size() < 1 || xs.size() > 2) shape_fail(Op::Softmax, "rank must be 1 or 2");
    Node n;
    n.op = Op::Softmax;
    n.in[0] = x;
    n.n_in = 1;
    n.shape = xs;
    return push(std::move(n));
}

NodeId Graph::cross_entropy(NodeId logits, std::vector<int> labels) {
    const auto& xs = node(logits).shape;
    int rows = xs.size() == 2 ? xs[0] : 1;
    int classes = last_dim(xs);
    if (xs.size() < 1 || xs.size() > 2) shape_fail(Op::CrossEntropy, "logits rank must be 1 or 2");
    if (static_cast<int>(labels.size()) != rows)
        shape_fail(Op::CrossEntropy, "label count does not match batch rows");
    for (int y : labels)
        if (y < 0 || y >= classes) shape_fail(Op::CrossEntropy, "label out of range");
    Node n;
    n.op = Op::CrossEntropy;
    n.in[0] = logits;
    n.n_in = 1;
    n.labels = std::move(labels);
    return push(std::move(n));
}

NodeId Graph::concat_time(NodeId a, NodeId b) {
    const auto& as = node(a).shape;
    const auto& bs = node(b).shape;
    if (as.size() != 2 || bs.size() != 2 || as[1] != bs[1])
        shape_fail(Op::ConcatTime, shape_str(as) + " with " + shape_str(bs));
    Node n;
    n.op = Op::ConcatTime;
    n.in[0] = a;
    n.in[1] = b;
    n.n_in = 2;
    n.shape = {as[0] + bs[0], as[1]};
    return push(std::move(n));
}

NodeId Graph::slice_time(NodeId x, int start, int len) {
    const auto& xs = node(x).shape;
    if (xs.size() != 2) shape_fail(Op::SliceTime, "input must be rank-2");
    if (start < 0 || len < 1 || start + len > xs[0])
        shape_fail(Op::SliceTime, "slice out of range");
    Node n;
    n.op = Op::SliceTime;
    n.in[0] = x;
    n.n_in = 1;
    n.shape = {len, xs[1]};
    n.i0 = start;
    n.i1 = len;
    return push(std::move(n));
}

void Graph::set_output(NodeId id) {
    if (id < 0 || id >= size()) throw Error("set_output: bad node id");
    output_ = id;
}

// ---------------------------------------------------------------------------
// Evaluation

Eval::Eval(const Graph& g) : g_(g) {
    values_.resize(static_cast<size_t>(g.size()));
    grads_.resize(static_cast<size_t>(g.size()));
}

namespace {

void check_finite(const Array& a, Op op) {
    if (!a.all_finite())
        throw NonFiniteValue(std::string(op_name(op)) + " produced a non-finite value");
}

// Conv-layout helpers: x is (rows,Ci) flattened per batch element.
void conv1d_forward(const Array& x, const Array& k, const Array& b, Array& y) {
    const int co = k.shape[0], ci = k.shape[1], kw = k.shape[2];
    const int pad = (kw - 1) / 2;
    const bool batched = x.rank() == 3;
    const int nb = batched ? x.shape[0] : 1;
    const int t_len = batched ? x.shape[1] : x.shape[0];
    const double* xd = x.data.data();
    const double* kd = k.data.data();
    double* yd = y.data.data();
    for (int bi = 0; bi < nb; ++bi) {
        const double* xb = xd + static_cast<size_t>(bi) * t_len * ci;
        double* yb = yd + static_cast<size_t>(bi) * t_len * co;
        for (int t = 0; t < t_len; ++t) {
            const int d0 = std::max(0, pad - t);
            const int d1 = std::min(kw, t_len + pad - t);
            for (int o = 0; o < co; ++o) {
                double acc = b.data[static_cast<size_t>(o)];
                const double* ko = kd + static_cast<size_t>(o) * ci * kw;
                for (int c = 0; c < ci; ++c) {
                    const double* kc = ko + static_cast<size_t>(c) * kw;
                    const double* xc = xb + c;
                    for (int d = d0; d < d1; ++d)
                        acc += xc[static_cast<size_t>(t + d - pad) * ci] * kc[d];
                }
                yb[static_cast<size_t>(t) * co + o] = acc;
            }
        }
    }
}

void conv1d_backward(const Array& x, const Array& k, const Array& gy, Array& gx, Array& gk,
                     Array& gb) {
    const int co = k.shape[0], ci = k.shape[1], kw = k.shape[2];
    const int pad = (kw - 1) / 2;
    const bool batched = x.rank() == 3;
    const int nb = batched ? x.shape[0] : 1;
    const int t_len = batched ? x.shape[1] : x.shape[0];
    for (int bi = 0; bi < nb; ++bi) {
        const double* xb = x.data.data() + static_cast<size_t>(bi) * t_len * ci;
        const double* gyb = gy.data.data() + static_cast<size_t>(bi) * t_len * co;
        double* gxb = gx.data.data() + static_cast<size_t>(bi) * t_len * ci;
        for (int t = 0; t < t_len; ++t) {
            const int d0 = std::max(0, pad - t);
            const int d1 = std::min(kw, t_len + pad - t);
            for (int o = 0; o < co; ++o) {
                const double g = gyb[static_cast<size_t>(t) * co + o];
                gb.data[static_cast<size_t>(o)] += g;
                double* gko = gk.data.data() + static_cast<size_t>(o) * ci * kw;
                const double* ko = k.data.data() + static_cast<size_t>(o) * ci * kw;
                for (int c = 0; c < ci; ++c) {
                    for (int d = d0; d < d1; ++d) {
                        const size_t xi = static_cast<size_t>(t + d - pad) * ci + c;
                        gko[static_cast<size_t>(c) * kw + d] += g * xb[xi];
                        gxb[xi] += g * ko[static_cast<size_t>(c) * kw + d];
                    }
                }
            }
        }
    }
}

void softmax_row(const double* in, double* out, int n) {
    double m = in[0];
    for (int i = 1; i < n; ++i) m = std::max(m, in[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - m);
        sum += out[i];
    }
    for (int i = 0; i < n; ++i) out[i] /= sum;
}

double log_sum_exp(const double* in, int n) {
    double m = in[0];
    for (int i = 1; i < n; ++i) m = std::max(m, in[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) sum += std::exp(in[i] - m);
    return m + std::log(sum);
}

}  // namespace

const Array& Eval::forward(const Bindings& bindings) {
    auto bound = [&](NodeId id) -> const Array* {
        for (const auto& [bid, arr] : bindings)
            if (bid == id) return arr;
        return nullptr;
    };

    const int n = g_.size();
    for (NodeId id = 0; id < n; ++id) {
        const Node& nd = g_.node(id);
        Array& out = values_[static_cast<size_t>(id)];
        if (out.shape != nd.shape || out.numel() != Array::numel_of(nd.shape))
            out = Array(nd.shape);

        const Array* a = nd.n_in > 0 ? &values_[static_cast<size_t>(nd.in[0])] : nullptr;
        const Array* b = nd.n_in > 1 ? &values_[static_cast<size_t>(nd.in[1])] : nullptr;
        const Array* c = nd.n_in > 2 ? &values_[static_cast<size_t>(nd.in[2])] : nullptr;
        const long long cnt = out.numel();

        switch (nd.op) {
            case Op::Input:
            case Op::Param: {
                const Array* v = bound(id);
                if (!v) throw Error("forward: unbound leaf node " + std::to_string(id));
                if (v->shape != nd.shape)
                    throw ShapeMismatch("forward: binding shape " + shape_str(v->shape) +
                                        " does not match leaf " + shape_str(nd.shape));
                out = *v;
                break;
            }
            case Op::Const:
                out = nd.payload;
                break;
            case Op::Add:
                for (long long i = 0; i < cnt; ++i) out.data[i] = a->data[i] + b->data[i];
                break;
            case Op::Sub:
                for (long long i = 0; i < cnt; ++i) out.data[i] = a->data[i] - b->data[i];
                break;
            case Op::Mul:
                for (long long i = 0; i < cnt; ++i) out.data[i] = a->data[i] * b->data[i];
                break;
            case Op::Div:
                for (long long i = 0; i < cnt; ++i) {
                    if (b->data[i] == 0.0) throw DivisionByZero("Div: zero denominator");
                    out.data[i] = a->data[i] / b->data[i];
                }
                break;
            case Op::Neg:
                for (long long i = 0; i < cnt; ++i) out.data[i] = -a->data[i];
                break;
            case Op::Scale:
                for (long long i = 0; i < cnt; ++i) out.data[i] = a->data[i] * nd.s0;
                break;
            case Op::Maximum:
                for (long long i = 0; i < cnt; ++i)
                    out.data[i] = a->data[i] >= b->data[i] ? a->data[i] : b->data[i];
                break;
            case Op::Relu:
                for (long long i = 0; i < cnt; ++i)
                    out.data[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
                break;
            case Op::Sqrt:
                for (long long i = 0; i < cnt; ++i) {
                    if (a->data[i] < 0.0) throw NonFiniteValue("Sqrt: negative input");
                    out.data[i] = std::sqrt(a->data[i]);
                }
                break;
            case Op::Clamp:
                for (long long i = 0; i < cnt; ++i)
                    out.data[i] = std::min(nd.s1, std::max(nd.s0, a->data[i]));
                break;
            case Op::AddChannel:
            case Op::SubChannel:
            case Op::MulChannel:
            case Op::DivChannel: {
                const int ch = b->shape[0];
                const long long rows = cnt / ch;
                for (long long r = 0; r < rows; ++r) {
                    for (int cc = 0; cc < ch; ++cc) {
                        const long long i = r * ch + cc;
                        const double v = b->data[static_cast<size_t>(cc)];
                        switch (nd.op) {
                            case Op::AddChannel: out.data[i] = a->data[i] + v; break;
                            case Op::SubChannel: out.data[i] = a->data[i] - v; break;
                            case Op::MulChannel: out.data[i] = a->data[i] * v; break;
                            default:
                                if (v == 0.0)
                                    throw DivisionByZero("DivChannel: zero denominator");
                                out.data[i] = a->data[i] / v;
                        }
                    }
                }
                break;
            }
            case Op::TileChannels: {
                const int t_len = a->shape[0];
                const int ch = nd.i0;
                for (int t = 0; t < t_len; ++t)
                    for (int cc = 0; cc < ch; ++cc)
                        out.data[static_cast<size_t>(t) * ch + cc] = a->data[static_cast<size_t>(t)];
                break;
            }
            case Op::ChannelMean: {
                const int ch = nd.shape[0];
                const long long rows = a->numel() / ch;
                for (int cc = 0; cc < ch; ++cc) {
                    double acc = 0.0;
                    for (long long r = 0; r < rows; ++r) acc += a->data[r * ch + cc];
                    out.data[static_cast<size_t>(cc)] = acc / static_cast<double>(rows);
                }
                break;
            }
            case Op::MeanAll: {
                double acc = 0.0;
                for (double v : a->data) acc += v;
                out.data[0] = acc / static_cast<double>(a->numel());
                break;
            }
            case Op::SumAll: {
                double acc = 0.0;
                for (double v : a->data) acc += v;
                out.data[0] = acc;
                break;
            }
            case Op::Conv1d:
                conv1d_forward(*a, *b, *c, out);
                break;
            case Op::Dense: {
                const int in_w = b->shape[0], out_w = b->shape[1];
                const int rows = a->rank() == 2 ? a->shape[0] : 1;
                for (int r = 0; r < rows; ++r) {
                    const double* xr = a->data.data() + static_cast<size_t>(r) * in_w;
                    double* yr = out.data.data() + static_cast<size_t>(r) * out_w;
                    for (int m = 0; m < out_w; ++m) yr[m] = c->data[static_cast<size_t>(m)];
                    for (int k = 0; k < in_w; ++k) {
                        const double xv = xr[k];
                        const double* wr = b->data.data() + static_cast<size_t>(k) * out_w;
                        for (int m = 0; m < out_w; ++m) yr[m] += xv * wr[m];
                    }
                }
                break;
            }
            case Op::GapTime: {
                const bool batched = a->rank() == 3;
                const int nb = batched ? a->shape[0] : 1;
                const int t_len = batched ? a->shape[1] : a->shape[0];
                const int ch = last_dim(a->shape);
                for (int bi = 0; bi < nb; ++bi) {
                    const double* xb = a->data.data() + static_cast<size_t>(bi) * t_len * ch;
                    double* yb = out.data.data() + static_cast<size_t>(bi) * ch;
                    for (int cc = 0; cc < ch; ++cc) {
                        double acc = 0.0;
                        for (int t = 0; t < t_len; ++t) acc += xb[static_cast<size_t>(t) * ch + cc];
                        yb[cc] = acc / static_cast<double>(t_len);
                    }
                }
                break;
            }
            case Op::Softmax: {
                const int w = last_dim(a->shape);
                const long long rows = a->numel() / w;
                for (long long r = 0; r < rows; ++r)
                    softmax_row(a->data.data() + r * w, out.data.data() + r * w, w);
                break;
            }
            case Op::CrossEntropy: {
                const int w = last_dim(a->shape);
                const int rows = a->rank() == 2 ? a->shape[0] : 1;
                double acc = 0.0;
                for (int r = 0; r < rows; ++r) {
                    const double* xr = a->data.data() + static_cast<size_t>(r) * w;
                    acc += log_sum_exp(xr, w) - xr[nd.labels[static_cast<size_t>(r)]];
                }
                out.data[0] = acc / static_cast<double>(rows);
                break;
            }
            case Op::ConcatTime: {
                std::memcpy(out.data.data(), a->data.data(), a->data.size() * sizeof(double));
                std::memcpy(out.data.data() + a->data.size(), b->data.data(),
                            b->data.size() * sizeof(double));
                break;
            }
            case Op::SliceTime: {
                const int ch = a->shape[1];
                std::memcpy(out.data.data(),
                            a->data.data() + static_cast<size_t>(nd.i0) * ch,
                            static_cast<size_t>(nd.i1) * ch * sizeof(double));
                break;
            }
        }
        check_finite(out, nd.op);
    }
    have_forward_ = true;
    NodeId out_id = g_.output() >= 0 ? g_.output() : n - 1;
    return values_[static_cast<size_t>(out_id)];
}

void Eval::backward() {
    if (!have_forward_) throw Error("backward: run forward first");
    NodeId out_id = g_.output() >= 0 ? g_.output() : g_.size() - 1;
    const Array& out_val = values_[static_cast<size_t>(out_id)];
    if (out_val.numel() != 1)
        throw NonScalarOutput("backward: output has " + std::to_string(out_val.numel()) +
                              " elements, expected a scalar");

    const int n = g_.size();
    for (NodeId id = 0; id < n; ++id) {
        Array& gr = grads_[static_cast<size_t>(id)];
        const Array& val = values_[static_cast<size_t>(id)];
        if (gr.shape != val.shape || gr.numel() != val.numel()) gr = Array(val.shape);
        std::fill(gr.data.begin(), gr.data.end(), 0.0);
    }
    grads_[static_cast<size_t>(out_id)].data[0] = 1.0;

    for (NodeId id = out_id; id >= 0; --id) {
        const Node& nd = g_.node(id);
        if (nd.n_in == 0) continue;
        const Array& gy = grads_[static_cast<size_t>(id)];
        bool all_zero = true;
        for (double v : gy.data)
            if (v != 0.0) {
                all_zero = false;
                break;
            }
        if (all_zero) continue;

        const Array& av = values_[static_cast<size_t>(nd.in[0])];
        Array& ga = grads_[static_cast<size_t>(nd.in[0])];
        const Array* bv = nd.n_in > 1 ? &values_[static_cast<size_t>(nd.in[1])] : nullptr;
        Array* gb = nd.n_in > 1 ? &grads_[static_cast<size_t>(nd.in[1])] : nullptr;
        Array* gc = nd.n_in > 2 ? &grads_[static_cast<size_t>(nd.in[2])] : nullptr;
        const long long cnt = gy.numel();

        switch (nd.op) {
            case Op::Add:
                for (long long i = 0; i < cnt; ++i) {
                    ga.data[i] += gy.data[i];
                    gb->data[i] += gy.data[i];
                }
                break;
            case Op::Sub:
                for (long long i = 0; i < cnt; ++i) {
                    ga.data[i] += gy.data[i];
                    gb->data[i] -= gy.data[i];
                }
                break;
            case Op::Mul:
                for (long long i = 0; i < cnt; ++i) {
                    ga.data[i] += gy.data[i] * bv->data[i];
                    gb->data[i] += gy.data[i] * av.data[i];
                }
                break;
            case Op::Div:
                for (long long i = 0; i < cnt; ++i) {
                    const double d = bv->data[i];
                    ga.data[i] += gy.data[i] / d;
                    gb->data[i] -= gy.data[i] * av.data[i] / (d * d);
                }
                break;
            case Op::Neg:
                for (long long i = 0; i < cnt; ++i) ga.data[i] -= gy.data[i];
                break;
            case Op::Scale:
                for (long long i = 0; i < cnt; ++i) ga.data[i] += gy.data[i] * nd.s0;
                break;
            case Op::Maximum:
                for (long long i = 0; i < cnt; ++i) {
                    if (av.data[i] >= bv->data[i])
                        ga.data[i] += gy.data[i];
                    else
                        gb->data[i] += gy.data[i];
                }
                break;
            case Op::Relu:
                for (long long i = 0; i < cnt; ++i)
                    if (av.data[i] > 0.0) ga.data[i] += gy.data[i];
                break;
            case Op::Sqrt: {
                const Array& yv = values_[static_cast<size_t>(id)];
                for (long long i = 0; i < cnt; ++i) {
                    if (yv.data[i] == 0.0) throw DivisionByZero("Sqrt: gradient at zero");
                    ga.data[i] += gy.data[i] * 0.5 / yv.data[i];
                }
                break;
            }
            case Op::Clamp:
                for (long long i = 0; i < cnt; ++i)
                    if (av.data[i] > nd.s0 && av.data[i] < nd.s1) ga.data[i] += gy.data[i];
                break;
            case Op::AddChannel:
            case Op::SubChannel:
            case Op::MulChannel:
            case Op::DivChannel: {
                const int ch = bv->shape[0];
                const long long rows = cnt / ch;
                for (long long r = 0; r < rows; ++r) {
                    for (int cc = 0; cc < ch; ++cc) {
                        const long long i = r * ch + cc;
                        const double g = gy.data[i];
                        const double v = bv->data[static_cast<size_t>(cc)];
                        switch (nd.op) {
                            case Op::AddChannel:
                                ga.data[i] += g;
                                gb->data[static_cast<size_t>(cc)] += g;
                                break;
                            case Op::SubChannel:
                                ga.data[i] += g;
                                gb->data[static_cast<size_t>(cc)] -= g;
                                break;
                            case Op::MulChannel:
                                ga.data[i] += g * v;
                                gb->data[static_cast<size_t>(cc)] += g * av.data[i];
                                break;
                            default:
                                ga.data[i] += g / v;
                                gb->data[static_cast<size_t>(cc)] -= g * av.data[i] / (v * v);
                        }
                    }
                }
                break;
            }
            case Op::TileChannels: {
                const int t_len = av.shape[0];
                const int ch = nd.i0;
                for (int t = 0; t < t_len; ++t) {
                    double acc = 0.0;
                    for (int cc = 0; cc < ch; ++cc)
                        acc += gy.data[static_cast<size_t>(t) * ch + cc];
                    ga.data[static_cast<size_t>(t)] += acc;
                }
                break;
            }
            case Op::ChannelMean: {
                const int ch = gy.shape[0];
                const long long rows = av.numel() / ch;
                const double inv = 1.0 / static_cast<double>(rows);
                for (long long r = 0; r < rows; ++r)
                    for (int cc = 0; cc < ch; ++cc)
                        ga.data[r * ch + cc] += gy.data[static_cast<size_t>(cc)] * inv;
                break;
            }
            case Op::MeanAll: {
                const double g = gy.data[0] / static_cast<double>(av.numel());
                for (long long i = 0; i < av.numel(); ++i) ga.data[i] += g;
                break;
            }
            case Op::SumAll: {
                const double g = gy.data[0];
                for (long long i = 0; i < av.numel(); ++i) ga.data[i] += g;
                break;
            }
            case Op::Conv1d:
                conv1d_backward(av, *bv, gy, ga, *gb, *gc);
                break;
            case Op::Dense: {
                const int in_w = bv->shape[0], out_w = bv->shape[1];
                const int rows = av.rank() == 2 ? av.shape[0] : 1;
                for (int r = 0; r < rows; ++r) {
                    const double* xr = av.data.data() + static_cast<size_t>(r) * in_w;
                    const double* gr = gy.data.data() + static_cast<size_t>(r) * out_w;
                    double* gxr = ga.data.data() + static_cast<size_t>(r) * in_w;
                    for (int m = 0; m < out_w; ++m) gc->data[static_cast<size_t>(m)] += gr[m];
                    for (int k = 0; k < in_w; ++k) {
                        const double* wr = bv->data.data() + static_cast<size_t>(k) * out_w;
                        double* gwr = gb->data.data() + static_cast<size_t>(k) * out_w;
                        double acc = 0.0;
                        for (int m = 0; m < out_w; ++m) {
                            acc += gr[m] * wr[m];
                            gwr[m] += gr[m] * xr[k];
                        }
                        gxr[k] += acc;
                    }
                }
                break;
            }
            case Op::GapTime: {
                const bool batched = av.rank() == 3;
                const int nb = batched ? av.shape[0] : 1;
                const int t_len = batched ? av.shape[1] : av.shape[0];
                const int ch = last_dim(av.shape);
                const double inv = 1.0 / static_cast<double>(t_len);
                for (int bi = 0; bi < nb; ++bi) {
                    const double* gyb = gy.data.data() + static_cast<size_t>(bi) * ch;
                    double* gxb = ga.data.data() + static_cast<size_t>(bi) * t_len * ch;
                    for (int t = 0; t < t_len; ++t)
                        for (int cc = 0; cc < ch; ++cc)
                            gxb[static_cast<size_t>(t) * ch + cc] += gyb[cc] * inv;
                }
                break;
            }
            case Op::Softmax: {
                const Array& yv = values_[static_cast<size_t>(id)];
                const int w = last_dim(av.shape);
                const long long rows = av.numel() / w;
                for (long long r = 0; r < rows; ++r) {
                    const double* yr = yv.data.data() + r * w;
                    const double* gr = gy.data.data() + r * w;
                    double dot = 0.0;
                    for (int i = 0; i < w; ++i) dot += gr[i] * yr[i];
                    for (int i = 0; i < w; ++i) ga.data[r * w + i] += yr[i] * (gr[i] - dot);
                }
                break;
            }
            case Op::CrossEntropy: {
                const int w = last_dim(av.shape);
                const int rows = av.rank() == 2 ? av.shape[0] : 1;
                const double g = gy.data[0] / static_cast<double>(rows);
                std::vector<double> sm(static_cast<size_t>(w));
                for (int r = 0; r < rows; ++r) {
                    const double* xr = av.data.data() + static_cast<size_t>(r) * w;
                    softmax_row(xr, sm.data(), w);
                    for (int i = 0; i < w; ++i)
                        ga.data[static_cast<size_t>(r) * w + i] += g * sm[static_cast<size_t>(i)];
                    ga.data[static_cast<size_t>(r) * w + nd.labels[static_cast<size_t>(r)]] -= g;
                }
                break;
            }
            case Op::ConcatTime: {
                for (size_t i = 0; i < av.data.size(); ++i) ga.data[i] += gy.data[i];
                for (size_t i = 0; i < bv->data.size(); ++i)
                    gb->data[i] += gy.data[av.data.size() + i];
                break;
            }
            case Op::SliceTime: {
                const int ch = av.shape[1];
                const size_t off = static_cast<size_t>(nd.i0) * ch;
                for (size_t i = 0; i < gy.data.size(); ++i) ga.data[off + i] += gy.data[i];
                break;
            }
            default:
                break;
        }
    }
}

std::vector<Array> forward_eval(const Graph& g, const Bindings& bindings) {
    Eval ev(g);
    ev.forward(bindings);
    return ev.values();
}

GradientMap backward_grad(const Graph& g, const Bindings& bindings,
                          const std::vector<NodeId>& wrt) {
    Eval ev(g);
    ev.forward(bindings);
    ev.backward();
    GradientMap out;
    for (NodeId id : wrt) out.emplace(id, ev.grad(id));
    return out;
}

double finite_diff_check(const Graph& g, const Bindings& bindings, NodeId leaf, double h,
                         const std::vector<NodeId>& kink_nodes) {
    Eval ev(g);
    ev.forward(bindings);
    ev.backward();
    const Array analytic = ev.grad(leaf);

    const Array* base = nullptr;
    for (const auto& [id, arr] : bindings)
        if (id == leaf) base = arr;
    if (!base) throw Error("finite_diff_check: leaf not bound");

    Array probe = *base;
    Bindings perturbed = bindings;
    for (auto& [id, arr] : perturbed)
        if (id == leaf) arr = &probe;

    auto signs_of = [&](Eval& e) {
        std::vector<int8_t> s;
        for (NodeId kn : kink_nodes)
            for (double v : e.value(kn).data)
                s.push_back(v > 0.0 ? 1 : (v < 0.0 ? -1 : 0));
        return s;
    };

    double max_err = 0.0;
    Eval ep(g);
    for (size_t j = 0; j < probe.data.size(); ++j) {
        const double saved = probe.data[j];
        probe.data[j] = saved + h;
        const double fp = ep.forward(perturbed).data[0];
        const auto sp = signs_of(ep);
        probe.data[j] = saved - h;
        const double fm = ep.forward(perturbed).data[0];
        const auto sm = signs_of(ep);
        probe.data[j] = saved;

        if (sp != sm) continue;  // central difference straddles a ReLU kink
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic.data[j];
        const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace blmrob::ad
