#pragma once

#include <functional>
#include <optional>
#include <string>

#include "blmrob/threat.hpp"

namespace blmrob::attack {

enum class LossKind { CrossEntropy, Margin };

struct PgdConfig {
    int steps = 40;
    double step_size = 0.0;  // 0 = auto: 2.5 * radius / steps, in box units
    double radius = 1.0;     // wrapped attacks use the full structured budget
    bool random_start = true;
    int restarts = 1;
    uint64_t seed = 1;
    LossKind loss = LossKind::CrossEntropy;

    double alpha() const { return step_size > 0.0 ? step_size : 2.5 * radius / steps; }
    void validate() const;
};

enum class ConfigKind { Baseline, NoNormalization, NoPadding, NaiveMaskRenorm, NaiveRaw };

const char* config_kind_name(ConfigKind k);
ConfigKind config_kind_from_name(const std::string& name);

// Box-constrained ascent problem over a flat variable vector. eval returns
// the loss at u, fills the gradient and the tool-space predicted label.
struct PgdProblem {
    int dim = 0;
    double box_halfwidth = 1.0;
    std::function<double(const std::vector<double>& u, std::vector<double>& grad, int& label)>
        eval;
    int original_label = -1;
    // optional domain guard; a step to a u where this fails is rejected
    std::function<bool(const std::vector<double>& u)> step_ok;
};

struct PgdResult {
    bool found = false;
    std::vector<double> u;           // first flipping iterate, or the last iterate
    std::vector<double> loss_trace;  // of the restart that produced u
    int restarts_used = 0;
    int aborted_restarts = 0;  // restarts killed by non-finite gradients
};

PgdResult pgd(const PgdProblem& problem, const PgdConfig& cfg);

// A candidate in the configuration's own optimization space.
struct Candidate {
    ConfigKind kind = ConfigKind::Baseline;
    threat::PerturbationVars u;  // wrapped configurations
    ad::Array model_input;       // naive configurations: the (p,2) input fed to the CNN
};

struct AttackOutcome {
    bool tool_success = false;
    std::optional<Candidate> candidate;
    std::optional<ad::Array> reconstructed_delta;  // (W,2), signal space
    bool pipeline_success = false;
    int original_label = -1;
    int flipped_label = -1;  // deployed label of x0+delta when a candidate exists
    std::vector<double> loss_trace;
};

AttackOutcome run_config(ConfigKind kind, const nn::ModelParams& params,
                         const pipeline::Window& x0, const threat::StructuredBudget& b,
                         const PgdConfig& cfg, const pipeline::NormConfig& nc = {});

// Signal-space delta of a candidate. Wrapped candidates reassemble their own
// x_hat - x0; naive candidates invert the normalization with x0's statistics
// on unpadded indices and drop any padded-region perturbation.
ad::Array reconstruct_to_signal(const Candidate& cand, const pipeline::Window& x0,
                                const threat::StructuredBudget& b,
                                const pipeline::NormConfig& nc = {});

// True iff delta is admissible under the structured threat model and flips
// the deployed pipeline's prediction. SigmaZero on x0+delta counts as failure.
bool pipeline_check(const ad::Array& delta, const pipeline::Window& x0,
                    const nn::ModelParams& params, const threat::StructuredBudget& b,
                    const pipeline::NormConfig& nc = {});

struct SampleOutcome {
    int index = 0;
    int label = -1;
    int clean_pred = -1;
    bool tool_success = false;
    bool pipeline_success = false;
    int flipped_label = -1;
};

struct ConfigResult {
    ConfigKind kind = ConfigKind::Baseline;
    double ra_tool = 1.0;
    double ra_pipe = 1.0;
    double ra_tool_clean_correct = 1.0;  // restricted to clean-correct samples
    double ra_pipe_clean_correct = 1.0;
    std::vector<SampleOutcome> samples;
};

struct RobustnessReport {
    int n_samples = 0;
    double clean_accuracy = 0.0;
    threat::StructuredBudget budget;
    PgdConfig pgd;
    std::vector<ConfigResult> configs;
    double wall_ms = 0.0;
};

RobustnessReport evaluate_dataset(const std::vector<ConfigKind>& kinds,
                                  const nn::ModelParams& params,
                                  const std::vector<pipeline::Window>& windows,
                                  const std::vector<int>& labels,
                                  const threat::StructuredBudget& b, const PgdConfig& cfg,
                                  const pipeline::NormConfig& nc = {}, int jobs = 0);

}  // namespace blmrob::attack
