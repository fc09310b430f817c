#include "blmrob/threat.hpp"

#include <algorithm>
#include <cmath>

#include "blmrob/errors.hpp"

namespace blmrob::threat {

void StructuredBudget::validate() const {
    for (int c = 0; c < 2; ++c) {
        if (eps_com[static_cast<size_t>(c)] < 0.0 || eps_ind[static_cast<size_t>(c)] < 0.0)
            throw InvalidConfig("budgets must be non-negative");
        if (!std::isfinite(eps_com[static_cast<size_t>(c)]) ||
            !std::isfinite(eps_ind[static_cast<size_t>(c)]))
            throw InvalidConfig("budgets must be finite");
    }
}

PerturbationVars PerturbationVars::zeros(int n) {
    PerturbationVars u;
    u.u_com = ad::Array::zeros({n});
    u.u_ind = ad::Array::zeros({n, 2});
    return u;
}

void PerturbationVars::validate_box(double tol) const {
    if (u_com.rank() != 1 || u_ind.rank() != 2 || u_ind.shape[1] != 2 ||
        u_ind.shape[0] != u_com.shape[0])
        throw ShapeMismatch("perturbation vars must be (n) and (n,2)");
    for (double v : u_com.data)
        if (std::abs(v) > 1.0 + tol) throw BoxViolation("u_com outside [-1,1]");
    for (double v : u_ind.data)
        if (std::abs(v) > 1.0 + tol) throw BoxViolation("u_ind outside [-1,1]");
}

ad::Array assemble_delta(const PerturbationVars& u, const StructuredBudget& b) {
    b.validate();
    u.validate_box();
    const int n = u.steps();
    ad::Array d({n, 2});
    for (int t = 0; t < n; ++t)
        for (int c = 0; c < 2; ++c)
            d(t, c) = b.eps_com[static_cast<size_t>(c)] * u.u_com(t) +
                      b.eps_ind[static_cast<size_t>(c)] * u.u_ind(t, c);
    return d;
}

DeltaNodes append_structured_delta(ad::Graph& g, int n, const StructuredBudget& b) {
    DeltaNodes out;
    out.u_com = g.input({n});
    out.u_ind = g.input({n, 2});
    auto com = g.mul_channel(g.tile_channels(out.u_com, 2),
                             g.constant(ad::Array({2}, {b.eps_com[0], b.eps_com[1]})));
    auto ind = g.mul_channel(out.u_ind, g.constant(ad::Array({2}, {b.eps_ind[0], b.eps_ind[1]})));
    out.delta = g.add(com, ind);
    return out;
}

SignalWrapNodes append_reparam_signal(ad::Graph& g, const pipeline::Window& x0,
                                      const StructuredBudget& b, pipeline::StdMode mode,
                                      bool freeze_stats, int pad_len) {
    const int w = x0.length();
    const auto st = pipeline::channel_stats(x0.values, mode);

    SignalWrapNodes out;
    out.sigma0 = st.sigma;
    out.mean0 = st.mean;
    out.d = append_structured_delta(g, w, b);
    auto delta_sig =
        g.mul_channel(out.d.delta, g.constant(ad::Array({2}, {st.sigma[0], st.sigma[1]})));
    out.x_hat = g.add(g.constant(x0.values), delta_sig);

    if (freeze_stats) {
        auto centered = g.sub_channel(out.x_hat, g.constant(ad::Array({2}, {st.mean[0], st.mean[1]})));
        out.zn.z = g.div_channel(centered, g.constant(ad::Array({2}, {st.sigma[0], st.sigma[1]})));
        out.zn.mean = -1;
        out.zn.sigma = -1;
    } else {
        out.zn = pipeline::append_znorm(g, out.x_hat, mode);
    }
    out.padded = pipeline::append_pad_left(g, out.zn.z, pad_len);
    return out;
}

ad::Array reparam_normalized(const pipeline::PaddedInput& z, const StructuredBudget& b,
                             const PerturbationVars& u) {
    if (u.steps() != z.z.shape[0])
        throw ShapeMismatch("perturbation vars must cover all padded steps");
    ad::Graph g;
    auto d = append_structured_delta(g, u.steps(), b);
    auto out = g.add(g.constant(z.z), d.delta);
    g.set_output(out);
    ad::Eval ev(g);
    return ev.forward({{d.u_com, &u.u_com}, {d.u_ind, &u.u_ind}});
}

pipeline::PaddedInput reparam_signal(const pipeline::Window& x0, const StructuredBudget& b,
                                     const PerturbationVars& u, const pipeline::NormConfig& nc) {
    if (u.steps() != x0.length())
        throw ShapeMismatch("perturbation vars must match the window length");
    // precondition: x0 itself normalizable
    const auto st0 = pipeline::channel_stats(x0.values, nc.std_mode);
    for (int c = 0; c < 2; ++c)
        if (st0.sigma_raw[static_cast<size_t>(c)] <= nc.sigma_min) throw SigmaZero(c);

    ad::Graph g;
    auto wrap = append_reparam_signal(g, x0, b, nc.std_mode, false);
    g.set_output(wrap.padded);
    ad::Eval ev(g);
    const ad::Array& padded =
        ev.forward({{wrap.d.u_com, &u.u_com}, {wrap.d.u_ind, &u.u_ind}});

    // perturbation may not collapse the variance of x_hat
    const ad::Array& xh = ev.value(wrap.x_hat);
    const auto st = pipeline::channel_stats(xh, nc.std_mode);
    for (int c = 0; c < 2; ++c)
        if (st.sigma_raw[static_cast<size_t>(c)] <= nc.sigma_min) throw SigmaZero(c);

    pipeline::PaddedInput out;
    out.z = padded;
    out.window_len = x0.length();
    out.mask = ad::Array({padded.shape[0], 2});
    const int offset = padded.shape[0] - x0.length();
    for (int t = offset; t < padded.shape[0]; ++t)
        for (int c = 0; c < 2; ++c) out.mask(t, c) = 1.0;
    return out;
}

std::array<double, 2> budget_scale(const pipeline::Window& x0, const StructuredBudget& b,
                                   const pipeline::NormConfig& nc) {
    if (b.space == BudgetSpace::Normalized) return {1.0, 1.0};
    const auto st = pipeline::channel_stats(x0.values, nc.std_mode);
    return st.sigma;
}

Admissibility admissibility_check(const ad::Array& delta, const pipeline::Window& x0,
                                  const StructuredBudget& b, const pipeline::NormConfig& nc,
                                  const std::array<double, 2>* scale_override) {
    b.validate();
    if (delta.shape != x0.values.shape)
        throw ShapeMismatch("delta shape " + ad::shape_str(delta.shape) +
                            " does not match window " + ad::shape_str(x0.values.shape));
    const std::array<double, 2> scale = scale_override ? *scale_override : budget_scale(x0, b, nc);
    const int w = delta.shape[0];
    const double tol = kAdmissibilitySlack;

    Admissibility out;
    out.witness.assign(static_cast<size_t>(w), 0.0);
    for (int t = 0; t < w; ++t) {
        double lo = -1.0, hi = 1.0;
        bool ok = true;
        for (int c = 0; c < 2 && ok; ++c) {
            const double d = delta(t, c) / scale[static_cast<size_t>(c)];
            const double ec = b.eps_com[static_cast<size_t>(c)];
            const double ei = b.eps_ind[static_cast<size_t>(c)];
            if (ec > 0.0) {
                lo = std::max(lo, (d - ei) / ec - tol);
                hi = std::min(hi, (d + ei) / ec + tol);
                if (lo > hi) ok = false;
            } else {
                // no common-mode freedom on this channel
                if (std::abs(d) > ei + tol) ok = false;
            }
        }
        if (!ok) {
            out.feasible = false;
            out.first_infeasible = t;
            out.witness.clear();
            return out;
        }
        out.witness[static_cast<size_t>(t)] = std::clamp(0.5 * (lo + hi), -1.0, 1.0);
    }
    out.feasible = true;
    return out;
}

ad::Array infeasibility_witness(const pipeline::PaddedInput& z, double eps) {
    if (eps <= 0.0) throw InvalidConfig("infeasibility_witness: eps must be positive");
    const int p = z.z.shape[0];
    int first_unpadded = -1;
    for (int t = 0; t < p && first_unpadded < 0; ++t)
        if (z.mask(t, 0) != 0.0) first_unpadded = t;
    if (first_unpadded < 0) throw NoUnpaddedEntries("mask has no unpadded entries");

    ad::Array out = z.z;
    out(first_unpadded, 0) += eps / 2.0;
    return out;
}

}  // namespace blmrob::threat
