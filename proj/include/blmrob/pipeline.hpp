#pragma once

#include <array>
#include <vector>

#include "blmrob/graph.hpp"
#include "blmrob/model.hpp"

namespace blmrob::pipeline {

// Stabilizer inside sigma = sqrt(var + eps); keeps the gradient finite while
// degenerate windows are rejected separately via sigma_min.
constexpr double kSigmaEps = 1e-12;
constexpr double kDefaultSigmaMin = 1e-9;
constexpr int kPadLen = 630;

enum class StdMode { Population, Sample };

struct NormConfig {
    StdMode std_mode = StdMode::Population;
    double sigma_min = kDefaultSigmaMin;
};

struct Window {
    ad::Array values;  // (W,2)
    int origin = 0;

    Window() = default;
    Window(ad::Array v, int origin_) : values(std::move(v)), origin(origin_) {}
    int length() const { return values.shape.empty() ? 0 : values.shape[0]; }
    int channels() const { return values.rank() == 2 ? values.shape[1] : 0; }
};

struct PaddedInput {
    ad::Array z;     // (p,2); padded entries exactly 0
    ad::Array mask;  // (p,2); 1 on unpadded indices
    int window_len = 0;
};

struct ClassProbs {
    std::array<double, 3> p{};
    int predicted_label = 0;
};

struct ChannelStats {
    std::array<double, 2> mean{};
    std::array<double, 2> sigma_raw{};  // sqrt(var), used for the sigma_min check
    std::array<double, 2> sigma{};      // sqrt(var + kSigmaEps), used everywhere else
};

// Accumulation order here matches the graph ops exactly, so numeric and
// in-graph normalization agree bitwise.
ChannelStats channel_stats(const ad::Array& x, StdMode mode);

ad::Array znormalize(const Window& x, const NormConfig& nc = {});
PaddedInput pad_left(const ad::Array& normed, int p = kPadLen);
ClassProbs classify(const nn::ModelParams& params, const Window& x, const NormConfig& nc = {});

std::vector<Window> sliding_windows(const ad::Array& trace_values, int window_len);

// Same softmax as the graph op, for composing the pipeline by hand.
ClassProbs softmax_probs(const nn::Logits& logits);

// Membership oracle for the image of pad∘normalize: per channel the unpadded
// part must have mean 0 and std 1 within tol.
bool is_normalized_padded(const ad::Array& z, const ad::Array& mask, StdMode mode,
                          double tol = 1e-9);

// --- graph builders -------------------------------------------------------

struct ZnormNodes {
    ad::NodeId z = -1;
    ad::NodeId mean = -1;
    ad::NodeId sigma = -1;
};

ZnormNodes append_znorm(ad::Graph& g, ad::NodeId x, StdMode mode);
ad::NodeId append_pad_left(ad::Graph& g, ad::NodeId zn, int p = kPadLen);

struct PipelineNodes {
    ad::NodeId padded = -1;
    ad::NodeId logits = -1;
    ad::NodeId probs = -1;
    std::vector<ad::NodeId> relu_pre;
    ZnormNodes zn;
};

// window (W,2) -> znorm -> pad -> CNN -> softmax, parameters baked as consts.
PipelineNodes append_classifier(ad::Graph& g, const nn::ModelParams& params, ad::NodeId window,
                                StdMode mode);

// Cached graph + eval storage for one (params, W) pair; cheap repeated
// classification. Not thread-safe; use one per thread.
class Classifier {
public:
    Classifier(const nn::ModelParams& params, int window_len, NormConfig nc = {});
    ClassProbs classify(const ad::Array& window_values);
    int window_len() const { return window_len_; }

private:
    int window_len_;
    NormConfig nc_;
    ad::Graph g_;
    ad::NodeId win_in_;
    PipelineNodes nodes_;
    ad::Eval ev_;
};

}  // namespace blmrob::pipeline
