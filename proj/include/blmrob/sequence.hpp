#pragma once

#include "blmrob/attack.hpp"

namespace blmrob::sequence {

struct ClassSequence {
    int window_len = 0;
    std::vector<pipeline::ClassProbs> probs;  // index = window origin
};

ClassSequence classification_sequence(const nn::ModelParams& params, const ad::Array& trace_values,
                                      int window_len, const pipeline::NormConfig& nc = {});

enum class SeqObjective { SuppressClass, TargetClass };

struct SeqAttackConfig {
    int window_len = 0;
    int range_start = 0;  // window indices [range_start, range_end], inclusive
    int range_end = 0;
    SeqObjective objective = SeqObjective::SuppressClass;
    int class_index = 2;  // channeling by default; -1 = each window's clean label
    attack::PgdConfig pgd;
};

// Consistent chain of perturbed windows: overlapping samples share their
// perturbation bitwise because every window delta is a slice of one
// trace-level delta.
struct AdvSequence {
    int start = 0, end = -1;  // inclusive window range
    int window_len = 0;
    std::vector<ad::Array> deltas;            // per window, (W,2)
    std::vector<pipeline::ClassProbs> probs;  // deployed pipeline on perturbed windows
    std::vector<bool> flipped;                // vs the clean deployed label
    std::vector<bool> admissible;
    int length() const { return end - start + 1; }
};

struct SequenceAttackResult {
    ad::Array perturbed_trace;  // (L,2); untouched outside the support
    AdvSequence seq;
    int flips = 0;
    int support_start = 0, support_end = 0;  // trace index range [start, end)
    std::array<double, 2> scale{};           // per-channel budget scale used
    std::vector<double> loss_trace;
};

// One structured perturbation over the trace indices covered by the targeted
// windows, optimized jointly; each window's normalization is recomputed from
// the perturbed values inside the graph. Budgets are scaled per channel by
// the clean trace's sigma over the support.
SequenceAttackResult sequence_attack(const nn::ModelParams& params, const ad::Array& trace_values,
                                     const SeqAttackConfig& cfg,
                                     const threat::StructuredBudget& budget,
                                     const pipeline::NormConfig& nc = {});

struct SmoothnessReport {
    std::vector<double> step_l1;
    double max_step = 0.0;
    double kappa = 0.5;
    bool is_smooth = true;
};

SmoothnessReport smoothness(const std::vector<pipeline::ClassProbs>& probs, double kappa);

struct ExtendConfig {
    threat::StructuredBudget budget;
    std::array<double, 2> scale{1.0, 1.0};  // absolute per-channel budget scale
    int grid_n = 21;
    bool refine_with_pgd = true;
    attack::PgdConfig pgd;
    pipeline::NormConfig norm;
};

struct ExtendResult {
    bool extendable = false;
    std::array<double, 2> delta{};  // perturbation of the free sample
    bool found_by_grid = false;
    int evals = 0;
};

// Appendix-A style probe: all overlapping samples are fixed to their already
// perturbed values; only the newly exposed sample (free_pos 0 backward,
// W-1 forward) may be perturbed within its structured budget. True iff some
// admissible choice misclassifies the window under the deployed pipeline.
ExtendResult is_extendable_under_attack(const nn::ModelParams& params,
                                        const pipeline::Window& clean_window,
                                        const ad::Array& fixed_rows,  // (W-1,2) perturbed
                                        int free_pos, const ExtendConfig& cfg);

// Grows a seed adversarial window forward and backward until the extension
// attack fails on both sides. Maximality is relative to this attack, not
// certified.
AdvSequence maximal_adv_sequence_under_attack(const nn::ModelParams& params,
                                              const ad::Array& trace_values, int window_len,
                                              int seed_index, const ad::Array& seed_delta,
                                              const ExtendConfig& cfg);

}  // namespace blmrob::sequence
