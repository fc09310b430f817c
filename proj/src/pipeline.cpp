#include "blmrob/pipeline.hpp"

#include <cmath>
#include <cstring>

#include "blmrob/errors.hpp"

namespace blmrob::pipeline {

namespace {

void check_window_shape(const ad::Array& v) {
    if (v.rank() != 2 || v.shape[1] != 2)
        throw ShapeMismatch("window values must be (W,2), got " + ad::shape_str(v.shape));
    if (v.shape[0] < 2) throw ShapeMismatch("window length must be > 1");
}

double sample_correction(StdMode mode, int w) {
    return mode == StdMode::Sample ? static_cast<double>(w) / static_cast<double>(w - 1) : 1.0;
}

}  // namespace

ChannelStats channel_stats(const ad::Array& x, StdMode mode) {
    check_window_shape(x);
    const int w = x.shape[0];
    ChannelStats st;
    for (int c = 0; c < 2; ++c) {
        double acc = 0.0;
        for (int t = 0; t < w; ++t) acc += x(t, c);
        st.mean[static_cast<size_t>(c)] = acc / static_cast<double>(w);
    }
    for (int c = 0; c < 2; ++c) {
        double acc = 0.0;
        for (int t = 0; t < w; ++t) {
            const double d = x(t, c) - st.mean[static_cast<size_t>(c)];
            acc += d * d;
        }
        double var = acc / static_cast<double>(w);
        var = var * sample_correction(mode, w);
        st.sigma_raw[static_cast<size_t>(c)] = std::sqrt(var);
        st.sigma[static_cast<size_t>(c)] = std::sqrt(var + kSigmaEps);
    }
    return st;
}

ad::Array znormalize(const Window& x, const NormConfig& nc) {
    const ChannelStats st = channel_stats(x.values, nc.std_mode);
    for (int c = 0; c < 2; ++c)
        if (st.sigma_raw[static_cast<size_t>(c)] <= nc.sigma_min) throw SigmaZero(c);
    const int w = x.length();
    ad::Array out({w, 2});
    for (int t = 0; t < w; ++t)
        for (int c = 0; c < 2; ++c)
            out(t, c) = (x.values(t, c) - st.mean[static_cast<size_t>(c)]) /
                        st.sigma[static_cast<size_t>(c)];
    return out;
}

PaddedInput pad_left(const ad::Array& normed, int p) {
    check_window_shape(normed);
    const int w = normed.shape[0];
    if (w > p)
        throw WindowTooLong("window length " + std::to_string(w) + " exceeds pad length " +
                            std::to_string(p));
    PaddedInput out;
    out.window_len = w;
    out.z = ad::Array({p, 2});
    out.mask = ad::Array({p, 2});
    const int offset = p - w;
    for (int t = 0; t < w; ++t)
        for (int c = 0; c < 2; ++c) {
            out.z(offset + t, c) = normed(t, c);
            out.mask(offset + t, c) = 1.0;
        }
    return out;
}

ClassProbs softmax_probs(const nn::Logits& logits) {
    // same algorithm as the graph softmax: subtract max, exp, normalize
    double m = logits.v[0];
    for (int i = 1; i < 3; ++i) m = std::max(m, logits.v[static_cast<size_t>(i)]);
    std::array<double, 3> e{};
    double sum = 0.0;
    for (int i = 0; i < 3; ++i) {
        e[static_cast<size_t>(i)] = std::exp(logits.v[static_cast<size_t>(i)] - m);
        sum += e[static_cast<size_t>(i)];
    }
    ClassProbs out;
    for (int i = 0; i < 3; ++i) out.p[static_cast<size_t>(i)] = e[static_cast<size_t>(i)] / sum;
    out.predicted_label = 0;
    for (int i = 1; i < 3; ++i)
        if (out.p[static_cast<size_t>(i)] > out.p[static_cast<size_t>(out.predicted_label)])
            out.predicted_label = i;
    return out;
}

std::vector<Window> sliding_windows(const ad::Array& trace_values, int window_len) {
    if (trace_values.rank() != 2 || trace_values.shape[1] != 2)
        throw ShapeMismatch("trace must be (L,2)");
    const int len = trace_values.shape[0];
    if (len < window_len)
        throw TraceTooShort("trace length " + std::to_string(len) + " < window " +
                            std::to_string(window_len));
    std::vector<Window> out;
    out.reserve(static_cast<size_t>(len - window_len + 1));
    for (int i = 0; i + window_len <= len; ++i) {
        ad::Array v({window_len, 2});
        std::memcpy(v.data.data(), trace_values.data.data() + static_cast<size_t>(i) * 2,
                    static_cast<size_t>(window_len) * 2 * sizeof(double));
        out.emplace_back(std::move(v), i);
    }
    return out;
}

bool is_normalized_padded(const ad::Array& z, const ad::Array& mask, StdMode mode, double tol) {
    if (z.shape != mask.shape || z.rank() != 2) throw ShapeMismatch("z and mask must match (p,2)");
    const int p = z.shape[0];
    for (int c = 0; c < 2; ++c) {
        int n = 0;
        double acc = 0.0;
        for (int t = 0; t < p; ++t) {
            if (mask(t, c) == 0.0) {
                if (z(t, c) != 0.0) return false;  // padded entries must stay zero
                continue;
            }
            acc += z(t, c);
            ++n;
        }
        if (n == 0) return false;
        const double mean = acc / n;
        double sq = 0.0;
        for (int t = 0; t < p; ++t) {
            if (mask(t, c) == 0.0) continue;
            const double d = z(t, c) - mean;
            sq += d * d;
        }
        double var = sq / n;
        if (mode == StdMode::Sample && n > 1) var *= static_cast<double>(n) / (n - 1);
        if (std::abs(mean) > tol) return false;
        if (std::abs(std::sqrt(var) - 1.0) > tol) return false;
    }
    return true;
}

// --- graph builders --------------------------------------------------------

ZnormNodes append_znorm(ad::Graph& g, ad::NodeId x, StdMode mode) {
    const auto& xs = g.shape_of(x);
    if (xs.size() != 2) throw ShapeMismatch("append_znorm expects a rank-2 node");
    const int w = xs[0];
    const int ch = xs[1];
    ZnormNodes out;
    out.mean = g.channel_mean(x);
    auto centered = g.sub_channel(x, out.mean);
    auto var = g.channel_mean(g.mul(centered, centered));
    if (mode == StdMode::Sample)
        var = g.scale(var, static_cast<double>(w) / static_cast<double>(w - 1));
    out.sigma = g.sqrt(g.add(var, g.constant(ad::Array::full({ch}, kSigmaEps))));
    out.z = g.div_channel(centered, out.sigma);
    return out;
}

ad::NodeId append_pad_left(ad::Graph& g, ad::NodeId zn, int p) {
    const auto& s = g.shape_of(zn);
    if (s.size() != 2) throw ShapeMismatch("append_pad_left expects a rank-2 node");
    if (s[0] > p) throw WindowTooLong("window longer than pad length");
    if (s[0] == p) return zn;
    return g.concat_time(g.constant(ad::Array::zeros({p - s[0], s[1]})), zn);
}

PipelineNodes append_classifier(ad::Graph& g, const nn::ModelParams& params, ad::NodeId window,
                                StdMode mode) {
    PipelineNodes out;
    out.zn = append_znorm(g, window, mode);
    out.padded = append_pad_left(g, out.zn.z, params.cfg.input_len);
    auto fw = nn::append_forward_eval(g, params, out.padded);
    out.logits = fw.logits;
    out.relu_pre = fw.relu_pre;
    out.probs = g.softmax(out.logits);
    return out;
}

Classifier::Classifier(const nn::ModelParams& params, int window_len, NormConfig nc)
    : window_len_(window_len), nc_(nc), g_(), win_in_(-1), nodes_(), ev_((
          [&]() -> ad::Graph& {
              win_in_ = g_.input({window_len, 2});
              nodes_ = append_classifier(g_, params, win_in_, nc.std_mode);
              g_.set_output(nodes_.probs);
              return g_;
          }())) {}

ClassProbs Classifier::classify(const ad::Array& window_values) {
    const ChannelStats st = channel_stats(window_values, nc_.std_mode);
    for (int c = 0; c < 2; ++c)
        if (st.sigma_raw[static_cast<size_t>(c)] <= nc_.sigma_min) throw SigmaZero(c);
    const ad::Array& pv = ev_.forward({{win_in_, &window_values}});
    ClassProbs out;
    for (int i = 0; i < 3; ++i) out.p[static_cast<size_t>(i)] = pv(i);
    out.predicted_label = 0;
    for (int i = 1; i < 3; ++i)
        if (out.p[static_cast<size_t>(i)] > out.p[static_cast<size_t>(out.predicted_label)])
            out.predicted_label = i;
    return out;
}

ClassProbs classify(const nn::ModelParams& params, const Window& x, const NormConfig& nc) {
    Classifier clf(params, x.length(), nc);
    return clf.classify(x.values);
}

}  // namespace blmrob::pipeline
