#pragma once

#include <array>
#include <optional>

#include "blmrob/graph.hpp"
#include "blmrob/pipeline.hpp"

namespace blmrob::threat {

enum class BudgetSpace { Signal, Normalized };

// Per-channel common-mode + independent L-infinity budgets. In signal space
// the numbers are in units of the window's per-channel sigma; in normalized
// space they are absolute.
struct StructuredBudget {
    std::array<double, 2> eps_com{0.10, 0.10};
    std::array<double, 2> eps_ind{0.02, 0.02};
    BudgetSpace space = BudgetSpace::Signal;

    double eps_glob() const {
        return std::max(eps_com[0] + eps_ind[0], eps_com[1] + eps_ind[1]);
    }
    StructuredBudget scaled(double k) const {
        StructuredBudget b = *this;
        for (int c = 0; c < 2; ++c) {
            b.eps_com[static_cast<size_t>(c)] *= k;
            b.eps_ind[static_cast<size_t>(c)] *= k;
        }
        return b;
    }
    bool is_zero() const {
        return eps_com[0] == 0 && eps_com[1] == 0 && eps_ind[0] == 0 && eps_ind[1] == 0;
    }
    void validate() const;
};

// Normalized attack variables, box-bounded to [-1,1].
struct PerturbationVars {
    ad::Array u_com;  // (n)
    ad::Array u_ind;  // (n,2)

    static PerturbationVars zeros(int n);
    int steps() const { return u_com.shape.empty() ? 0 : u_com.shape[0]; }
    void validate_box(double tol = 0.0) const;  // throws BoxViolation
};

// delta[t][c] = eps_com[c]*u_com[t] + eps_ind[c]*u_ind[t][c], in budget units.
ad::Array assemble_delta(const PerturbationVars& u, const StructuredBudget& b);

// --- graph builders ---------------------------------------------------------

struct DeltaNodes {
    ad::NodeId u_com = -1;  // leaf (n)
    ad::NodeId u_ind = -1;  // leaf (n,2)
    ad::NodeId delta = -1;  // (n,2), budget units
};

DeltaNodes append_structured_delta(ad::Graph& g, int n, const StructuredBudget& b);

struct SignalWrapNodes {
    DeltaNodes d;
    ad::NodeId x_hat = -1;   // (W,2) perturbed signal
    ad::NodeId padded = -1;  // (p,2) model input
    pipeline::ZnormNodes zn;
    std::array<double, 2> sigma0{};  // per-channel scale baked into the graph
    std::array<double, 2> mean0{};
};

// x_hat = x0 + sigma(x0) .* (eps_com*u_com + eps_ind*u_ind), then the deployed
// preprocessing with statistics recomputed from x_hat inside the graph.
// freeze_stats swaps the recomputed statistics for x0's (the no-normalization
// ablation).
SignalWrapNodes append_reparam_signal(ad::Graph& g, const pipeline::Window& x0,
                                      const StructuredBudget& b, pipeline::StdMode mode,
                                      bool freeze_stats = false, int pad_len = pipeline::kPadLen);

// --- value-level operations (evaluate the same graphs) -----------------------

ad::Array reparam_normalized(const pipeline::PaddedInput& z, const StructuredBudget& b,
                             const PerturbationVars& u);

pipeline::PaddedInput reparam_signal(const pipeline::Window& x0, const StructuredBudget& b,
                                     const PerturbationVars& u,
                                     const pipeline::NormConfig& nc = {});

// --- admissibility -----------------------------------------------------------

struct Admissibility {
    bool feasible = false;
    std::vector<double> witness;     // s_t per step (midpoint of the interval)
    int first_infeasible = -1;       // step index, -1 when feasible
};

constexpr double kAdmissibilitySlack = 1e-9;

// Interval-intersection feasibility of delta (signal space, (W,2)) under the
// structured threat model for x0. scale_override replaces the per-channel
// divisor (default: sigma(x0) for signal-space budgets, 1 for normalized).
Admissibility admissibility_check(const ad::Array& delta, const pipeline::Window& x0,
                                  const StructuredBudget& b,
                                  const pipeline::NormConfig& nc = {},
                                  const std::array<double, 2>* scale_override = nullptr);

// The per-channel scale the threat model applies to a window's budgets.
std::array<double, 2> budget_scale(const pipeline::Window& x0, const StructuredBudget& b,
                                   const pipeline::NormConfig& nc = {});

// Shifts one unpadded entry by eps/2, producing a point inside the
// L-infinity ball around z that is not in the image of pad∘normalize.
ad::Array infeasibility_witness(const pipeline::PaddedInput& z, double eps);

}  // namespace blmrob::threat
