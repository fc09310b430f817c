#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "blmrob/graph.hpp"
#include "blmrob/rng.hpp"

namespace blmrob::nn {

// Two conv blocks (Conv -> BatchNorm -> ReLU -> Dropout), global average
// pooling over time, dense head to three class logits. Channel counts can be
// scaled down for desk-scale runs; everything else is fixed.
struct ArchConfig {
    int input_len = 630;
    int input_channels = 2;
    int conv1_channels = 256;
    int conv2_channels = 160;
    int kernel_size = 5;
    int num_classes = 3;
    double dropout_rate = 0.3;
    double scale_factor = 1.0;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;

    int conv1_scaled() const;
    int conv2_scaled() const;
    void validate() const;  // throws InvalidConfig

    bool operator==(const ArchConfig&) const = default;
};

struct ModelParams {
    ArchConfig cfg;
    ad::Array conv1_w, conv1_b;                          // (c1,ci,k), (c1)
    ad::Array bn1_gamma, bn1_beta, bn1_mean, bn1_var;    // (c1) each
    ad::Array conv2_w, conv2_b;                          // (c2,c1,k), (c2)
    ad::Array bn2_gamma, bn2_beta, bn2_mean, bn2_var;    // (c2) each
    ad::Array dense_w, dense_b;                          // (c2,3), (3)

    std::vector<std::pair<std::string, const ad::Array*>> named() const;
    std::vector<std::pair<std::string, ad::Array*>> named();
};

ModelParams build_model(const ArchConfig& cfg, uint64_t seed);

struct Logits {
    std::array<double, 3> v{};
    // lowest index wins ties
    int argmax() const {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
        return best;
    }
};

enum class ForwardMode { Eval, Train };

struct ForwardNodes {
    ad::NodeId logits = -1;
    std::vector<ad::NodeId> relu_pre;  // BN outputs feeding each ReLU
};

// Appends the eval-mode forward pass to g with parameters baked in as
// constants; z must be a (input_len, input_channels) node.
ForwardNodes append_forward_eval(ad::Graph& g, const ModelParams& p, ad::NodeId z);

// Batched train-mode graph with parameters as bindable leaves. Dropout masks
// are inputs (already scaled by 1/keep); labels are fixed per batch, so the
// graph is rebuilt for every batch.
struct TrainGraph {
    ad::Graph g;
    ad::NodeId z = -1;              // (B, input_len, ci)
    ad::NodeId drop1 = -1, drop2 = -1;
    std::vector<std::pair<std::string, ad::NodeId>> param_leaves;
    ad::NodeId bn1_batch_mean = -1, bn1_batch_var = -1;
    ad::NodeId bn2_batch_mean = -1, bn2_batch_var = -1;
    ad::NodeId logits = -1;         // (B, 3)
    ad::NodeId loss = -1;           // scalar, mean cross-entropy
};

TrainGraph build_train_graph(const ArchConfig& cfg, int batch, const std::vector<int>& labels,
                             bool freeze_bn);

// Single-input forward. Train mode uses batch statistics of the one sample,
// draws dropout masks from rng and updates the running statistics in place.
Logits forward_logits(ModelParams& p, const ad::Array& z, ForwardMode mode, Rng* rng = nullptr);
Logits forward_logits(const ModelParams& p, const ad::Array& z);  // eval mode

// Versioned little-endian binary container; layout documented in the README.
std::string encode_weights(const ModelParams& p);
ModelParams decode_weights(const std::string& buf);
void save_weights(const ModelParams& p, const std::string& path);
ModelParams load_weights(const std::string& path);

}  // namespace blmrob::nn
