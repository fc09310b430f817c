#include "blmrob/attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "blmrob/rng.hpp"
#include "blmrob/util.hpp"

namespace blmrob::attack {

void PgdConfig::validate() const {
    if (steps < 1) throw InvalidConfig("pgd steps must be >= 1");
    if (restarts < 0) throw InvalidConfig("pgd restarts must be >= 0");
    if (radius != 1.0) throw InvalidConfig("wrapped attacks fix radius = 1 (the u-box is the budget)");
    if (step_size < 0.0) throw InvalidConfig("pgd step size must be positive");
}

const char* config_kind_name(ConfigKind k) {
    switch (k) {
        case ConfigKind::Baseline: return "baseline";
        case ConfigKind::NoNormalization: return "no_normalization";
        case ConfigKind::NoPadding: return "no_padding";
        case ConfigKind::NaiveMaskRenorm: return "naive_mask_renorm";
        case ConfigKind::NaiveRaw: return "naive_raw";
    }
    return "?";
}

ConfigKind config_kind_from_name(const std::string& name) {
    for (ConfigKind k : {ConfigKind::Baseline, ConfigKind::NoNormalization, ConfigKind::NoPadding,
                         ConfigKind::NaiveMaskRenorm, ConfigKind::NaiveRaw})
        if (name == config_kind_name(k)) return k;
    throw ValidationError("unknown attack configuration: " + name);
}

PgdResult pgd(const PgdProblem& problem, const PgdConfig& cfg) {
    cfg.validate();
    const double hw = problem.box_halfwidth;
    const double alpha = cfg.alpha() * hw;
    const int restarts = std::max(1, cfg.restarts);

    PgdResult best;
    std::vector<double> grad(static_cast<size_t>(problem.dim));
    for (int r = 0; r < restarts; ++r) {
        best.restarts_used = r + 1;
        Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(r)));
        std::vector<double> u(static_cast<size_t>(problem.dim), 0.0);
        if (cfg.random_start) {
            for (double& v : u) v = rng.uniform(-hw, hw);
            if (problem.step_ok && !problem.step_ok(u)) std::fill(u.begin(), u.end(), 0.0);
        }

        std::vector<double> trace;
        trace.reserve(static_cast<size_t>(cfg.steps) + 1);
        bool aborted = false;
        for (int step = 0; step <= cfg.steps; ++step) {
            int label = -1;
            double loss;
            try {
                loss = problem.eval(u, grad, label);
            } catch (const NonFiniteValue&) {
                aborted = true;
                break;
            }
            bool grad_ok = std::isfinite(loss);
            for (double gv : grad)
                if (!std::isfinite(gv)) grad_ok = false;
            if (!grad_ok) {
                aborted = true;  // GradientFailure: abort this restart
                break;
            }
            trace.push_back(loss);
            // original_label < 0 disables early stopping (fixed-step ascent)
            if (problem.original_label >= 0 && label != problem.original_label) {
                best.found = true;
                best.u = u;
                best.loss_trace = std::move(trace);
                return best;
            }
            if (step == cfg.steps) break;

            std::vector<double> next = u;
            for (size_t i = 0; i < next.size(); ++i) {
                const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
                next[i] = std::clamp(next[i] + alpha * s, -hw, hw);
            }
            if (problem.step_ok && !problem.step_ok(next)) continue;  // rejected step
            u = std::move(next);
        }
        if (aborted) {
            ++best.aborted_restarts;
            continue;
        }
        if (r == restarts - 1 || best.u.empty()) {
            best.u = u;
            best.loss_trace = trace;
        }
    }
    best.found = false;
    return best;
}

// ---------------------------------------------------------------------------
// Tool spaces

namespace {

struct ToolSpace {
    ad::Graph g;
    // variable leaves in flat-vector order with their element counts
    std::vector<ad::NodeId> var_leaves;
    std::vector<long long> var_sizes;
    double halfwidth = 1.0;
    ad::NodeId logits = -1;
    ad::NodeId x_hat = -1;       // signal-space wrappers only
    ad::NodeId model_input = -1; // the (p,2) node fed to the CNN
    int u_len = 0;               // steps covered by structured vars (wrapped spaces)
};

ad::NodeId append_ascent_loss(ad::Graph& g, ad::NodeId logits, int orig_label, LossKind kind) {
    if (kind == LossKind::CrossEntropy) return g.cross_entropy(logits, {orig_label});
    // margin: -(logit_y - max_{j != y} logit_j), ascended
    auto pick = [&](int idx) {
        ad::Array onehot = ad::Array::zeros({3});
        onehot(idx) = 1.0;
        return g.sum_all(g.mul(logits, g.constant(onehot)));
    };
    const int o1 = (orig_label + 1) % 3;
    const int o2 = (orig_label + 2) % 3;
    auto margin = g.sub(pick(orig_label), g.maximum(pick(o1), pick(o2)));
    return g.neg(margin);
}

ToolSpace build_tool_space(ConfigKind kind, const nn::ModelParams& params,
                           const pipeline::Window& x0, const threat::StructuredBudget& b,
                           const pipeline::NormConfig& nc, int orig_label, LossKind loss_kind) {
    const int p = params.cfg.input_len;
    const int w = x0.length();
    ToolSpace ts;

    switch (kind) {
        case ConfigKind::Baseline:
        case ConfigKind::NoNormalization: {
            auto wrap = threat::append_reparam_signal(ts.g, x0, b, nc.std_mode,
                                                      kind == ConfigKind::NoNormalization, p);
            auto fw = nn::append_forward_eval(ts.g, params, wrap.padded);
            ts.logits = fw.logits;
            ts.x_hat = wrap.x_hat;
            ts.model_input = wrap.padded;
            ts.var_leaves = {wrap.d.u_com, wrap.d.u_ind};
            ts.u_len = w;
            break;
        }
        case ConfigKind::NoPadding: {
            // u covers all p steps; the trailing W steps perturb the signal as
            // in Baseline, the leading padded steps perturb the model input
            // directly (there is no signal to scale by there).
            auto d = threat::append_structured_delta(ts.g, p, b);
            const auto st = pipeline::channel_stats(x0.values, nc.std_mode);
            auto delta_w = ts.g.slice_time(d.delta, p - w, w);
            auto delta_sig = ts.g.mul_channel(
                delta_w, ts.g.constant(ad::Array({2}, {st.sigma[0], st.sigma[1]})));
            ts.x_hat = ts.g.add(ts.g.constant(x0.values), delta_sig);
            auto zn = pipeline::append_znorm(ts.g, ts.x_hat, nc.std_mode);
            ad::NodeId model_in;
            if (w == p) {
                model_in = zn.z;
            } else {
                auto delta_pad = ts.g.slice_time(d.delta, 0, p - w);
                model_in = ts.g.concat_time(delta_pad, zn.z);
            }
            auto fw = nn::append_forward_eval(ts.g, params, model_in);
            ts.logits = fw.logits;
            ts.model_input = model_in;
            ts.var_leaves = {d.u_com, d.u_ind};
            ts.u_len = p;
            break;
        }
        case ConfigKind::NaiveMaskRenorm:
        case ConfigKind::NaiveRaw: {
            auto z0 = pipeline::pad_left(pipeline::znormalize(x0, nc), p);
            auto dz = ts.g.input({p, 2});
            auto zhat = ts.g.add(ts.g.constant(z0.z), dz);
            ad::NodeId model_in;
            if (kind == ConfigKind::NaiveRaw) {
                model_in = zhat;
            } else {
                // mask the padded region (by dropping it) and re-apply N
                auto win = ts.g.slice_time(zhat, p - w, w);
                auto zn = pipeline::append_znorm(ts.g, win, nc.std_mode);
                model_in = pipeline::append_pad_left(ts.g, zn.z, p);
            }
            auto fw = nn::append_forward_eval(ts.g, params, model_in);
            ts.logits = fw.logits;
            ts.model_input = model_in;
            ts.var_leaves = {dz};
            ts.halfwidth = b.eps_glob();
            break;
        }
    }
    ts.g.set_output(append_ascent_loss(ts.g, ts.logits, orig_label, loss_kind));
    for (ad::NodeId id : ts.var_leaves)
        ts.var_sizes.push_back(ad::Array::numel_of(ts.g.shape_of(id)));
    return ts;
}

// split a flat PGD vector into the tool space's leaf arrays
std::vector<ad::Array> unflatten(const ToolSpace& ts, const std::vector<double>& u) {
    std::vector<ad::Array> arrays;
    size_t off = 0;
    for (size_t i = 0; i < ts.var_leaves.size(); ++i) {
        ad::Array a(ts.g.shape_of(ts.var_leaves[i]));
        std::copy(u.begin() + static_cast<long>(off),
                  u.begin() + static_cast<long>(off + a.data.size()), a.data.begin());
        off += a.data.size();
        arrays.push_back(std::move(a));
    }
    return arrays;
}

int argmax3(const ad::Array& logits) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
        if (logits(i) > logits(best)) best = i;
    return best;
}

}  // namespace

ad::Array reconstruct_to_signal(const Candidate& cand, const pipeline::Window& x0,
                                const threat::StructuredBudget& b,
                                const pipeline::NormConfig& nc) {
    const int w = x0.length();
    const auto st = pipeline::channel_stats(x0.values, nc.std_mode);

    switch (cand.kind) {
        case ConfigKind::Baseline:
        case ConfigKind::NoNormalization: {
            ad::Array d = threat::assemble_delta(cand.u, b);
            for (int t = 0; t < w; ++t)
                for (int c = 0; c < 2; ++c) d(t, c) *= st.sigma[static_cast<size_t>(c)];
            return d;
        }
        case ConfigKind::NoPadding: {
            // drop the padded-index perturbation, keep the signal part
            const int p = cand.u.steps();
            if (p < w) throw NonReconstructible("candidate shorter than the window");
            ad::Array d({w, 2});
            for (int t = 0; t < w; ++t) {
                const int src = p - w + t;
                for (int c = 0; c < 2; ++c)
                    d(t, c) = st.sigma[static_cast<size_t>(c)] *
                              (b.eps_com[static_cast<size_t>(c)] * cand.u.u_com(src) +
                               b.eps_ind[static_cast<size_t>(c)] * cand.u.u_ind(src, c));
            }
            return d;
        }
        case ConfigKind::NaiveMaskRenorm:
        case ConfigKind::NaiveRaw: {
            const int p = cand.model_input.shape[0];
            if (w > p || w < 1) throw NonReconstructible("candidate has no unpadded support");
            auto z0 = pipeline::pad_left(pipeline::znormalize(x0, nc), p);
            ad::Array d({w, 2});
            for (int t = 0; t < w; ++t)
                for (int c = 0; c < 2; ++c)
                    d(t, c) = st.sigma[static_cast<size_t>(c)] *
                              (cand.model_input(p - w + t, c) - z0.z(p - w + t, c));
            return d;
        }
    }
    throw NonReconstructible("unknown candidate kind");
}

bool pipeline_check(const ad::Array& delta, const pipeline::Window& x0,
                    const nn::ModelParams& params, const threat::StructuredBudget& b,
                    const pipeline::NormConfig& nc) {
    auto adm = threat::admissibility_check(delta, x0, b, nc);
    if (!adm.feasible) return false;
    try {
        const int orig = pipeline::classify(params, x0, nc).predicted_label;
        pipeline::Window perturbed = x0;
        for (size_t i = 0; i < perturbed.values.data.size(); ++i)
            perturbed.values.data[i] += delta.data[i];
        const int after = pipeline::classify(params, perturbed, nc).predicted_label;
        return after != orig;
    } catch (const SigmaZero&) {
        return false;
    }
}

AttackOutcome run_config(ConfigKind kind, const nn::ModelParams& params,
                         const pipeline::Window& x0, const threat::StructuredBudget& b,
                         const PgdConfig& cfg, const pipeline::NormConfig& nc) {
    b.validate();
    AttackOutcome out;
    out.original_label = pipeline::classify(params, x0, nc).predicted_label;

    ToolSpace ts = build_tool_space(kind, params, x0, b, nc, out.original_label, cfg.loss);
    ad::Eval ev(ts.g);

    const bool wrapped = kind == ConfigKind::Baseline || kind == ConfigKind::NoNormalization ||
                         kind == ConfigKind::NoPadding;

    PgdProblem prob;
    prob.dim = 0;
    for (long long s : ts.var_sizes) prob.dim += static_cast<int>(s);
    prob.box_halfwidth = ts.halfwidth;
    prob.original_label = out.original_label;
    prob.eval = [&](const std::vector<double>& u, std::vector<double>& grad, int& label) {
        auto arrays = unflatten(ts, u);
        ad::Bindings bind;
        for (size_t i = 0; i < arrays.size(); ++i) bind.emplace_back(ts.var_leaves[i], &arrays[i]);
        const double loss = ev.forward(bind).data[0];
        label = argmax3(ev.value(ts.logits));
        ev.backward();
        grad.resize(static_cast<size_t>(prob.dim));
        size_t off = 0;
        for (ad::NodeId leaf : ts.var_leaves) {
            const ad::Array& gl = ev.grad(leaf);
            std::copy(gl.data.begin(), gl.data.end(), grad.begin() + static_cast<long>(off));
            off += gl.data.size();
        }
        return loss;
    };
    if (wrapped) {
        // perturbations that collapse the window variance leave the domain;
        // x_hat is cheap to recompute directly from u
        const auto st0 = pipeline::channel_stats(x0.values, nc.std_mode);
        const int w = x0.length();
        const int offset = ts.u_len - w;  // NoPadding keeps the trailing W steps
        prob.step_ok = [&, st0, w, offset](const std::vector<double>& u) {
            ad::Array xh = x0.values;
            for (int t = 0; t < w; ++t) {
                const double uc = u[static_cast<size_t>(offset + t)];
                for (int c = 0; c < 2; ++c) {
                    const double ui =
                        u[static_cast<size_t>(ts.u_len + 2 * (offset + t) + c)];
                    xh(t, c) += st0.sigma[static_cast<size_t>(c)] *
                                (b.eps_com[static_cast<size_t>(c)] * uc +
                                 b.eps_ind[static_cast<size_t>(c)] * ui);
                }
            }
            const auto st = pipeline::channel_stats(xh, nc.std_mode);
            return st.sigma_raw[0] > nc.sigma_min && st.sigma_raw[1] > nc.sigma_min;
        };
    }

    PgdResult res = pgd(prob, cfg);
    out.loss_trace = std::move(res.loss_trace);
    out.tool_success = res.found;
    if (!res.found) return out;

    Candidate cand;
    cand.kind = kind;
    auto arrays = unflatten(ts, res.u);
    if (wrapped) {
        cand.u.u_com = std::move(arrays[0]);
        cand.u.u_ind = std::move(arrays[1]);
    } else {
        // store the model input actually fed to the CNN in this space
        ad::Bindings bind = {{ts.var_leaves[0], &arrays[0]}};
        ev.forward(bind);
        cand.model_input = ev.value(ts.model_input);
    }

    out.reconstructed_delta = reconstruct_to_signal(cand, x0, b, nc);
    out.pipeline_success = pipeline_check(*out.reconstructed_delta, x0, params, b, nc);
    try {
        pipeline::Window perturbed = x0;
        for (size_t i = 0; i < perturbed.values.data.size(); ++i)
            perturbed.values.data[i] += out.reconstructed_delta->data[i];
        out.flipped_label = pipeline::classify(params, perturbed, nc).predicted_label;
    } catch (const SigmaZero&) {
        out.flipped_label = -1;
    }
    out.candidate = std::move(cand);
    return out;
}

RobustnessReport evaluate_dataset(const std::vector<ConfigKind>& kinds,
                                  const nn::ModelParams& params,
                                  const std::vector<pipeline::Window>& windows,
                                  const std::vector<int>& labels,
                                  const threat::StructuredBudget& b, const PgdConfig& cfg,
                                  const pipeline::NormConfig& nc, int jobs) {
    if (windows.empty()) throw EmptyDataset("evaluate_dataset: no windows");
    if (labels.size() != windows.size())
        throw ShapeMismatch("labels must align with windows");
    const auto t0 = std::chrono::steady_clock::now();
    const int n = static_cast<int>(windows.size());

    RobustnessReport report;
    report.n_samples = n;
    report.budget = b;
    report.pgd = cfg;

    std::vector<int> clean_pred(static_cast<size_t>(n), -1);
    parallel_for(n, jobs, [&](int i) {
        clean_pred[static_cast<size_t>(i)] =
            pipeline::classify(params, windows[static_cast<size_t>(i)], nc).predicted_label;
    });
    int correct = 0;
    for (int i = 0; i < n; ++i)
        if (clean_pred[static_cast<size_t>(i)] == labels[static_cast<size_t>(i)]) ++correct;
    report.clean_accuracy = static_cast<double>(correct) / n;

    for (size_t ki = 0; ki < kinds.size(); ++ki) {
        const ConfigKind kind = kinds[ki];
        ConfigResult cr;
        cr.kind = kind;
        cr.samples.assign(static_cast<size_t>(n), SampleOutcome{});
        parallel_for(n, jobs, [&](int i) {
            PgdConfig local = cfg;
            local.seed = mix_seed(mix_seed(cfg.seed, static_cast<uint64_t>(kind)),
                                  static_cast<uint64_t>(i));
            AttackOutcome res =
                run_config(kind, params, windows[static_cast<size_t>(i)], b, local, nc);
            SampleOutcome& so = cr.samples[static_cast<size_t>(i)];
            so.index = i;
            so.label = labels[static_cast<size_t>(i)];
            so.clean_pred = clean_pred[static_cast<size_t>(i)];
            so.tool_success = res.tool_success;
            so.pipeline_success = res.pipeline_success;
            so.flipped_label = res.flipped_label;
        });

        int tool = 0, pipe = 0, cc = 0, tool_cc = 0, pipe_cc = 0;
        for (const auto& so : cr.samples) {
            tool += so.tool_success ? 1 : 0;
            pipe += so.pipeline_success ? 1 : 0;
            if (so.clean_pred == so.label) {
                ++cc;
                tool_cc += so.tool_success ? 1 : 0;
                pipe_cc += so.pipeline_success ? 1 : 0;
            }
        }
        cr.ra_tool = 1.0 - static_cast<double>(tool) / n;
        cr.ra_pipe = 1.0 - static_cast<double>(pipe) / n;
        cr.ra_tool_clean_correct = cc > 0 ? 1.0 - static_cast<double>(tool_cc) / cc : 1.0;
        cr.ra_pipe_clean_correct = cc > 0 ? 1.0 - static_cast<double>(pipe_cc) / cc : 1.0;
        report.configs.push_back(std::move(cr));
    }

    report.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                         .count();
    return report;
}

}  // namespace blmrob::attack
