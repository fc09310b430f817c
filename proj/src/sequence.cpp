#include "blmrob/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "blmrob/rng.hpp"

namespace blmrob::sequence {

ClassSequence classification_sequence(const nn::ModelParams& params, const ad::Array& trace_values,
                                      int window_len, const pipeline::NormConfig& nc) {
    auto windows = pipeline::sliding_windows(trace_values, window_len);
    ClassSequence seq;
    seq.window_len = window_len;
    seq.probs.reserve(windows.size());
    pipeline::Classifier clf(params, window_len, nc);
    for (size_t i = 0; i < windows.size(); ++i) {
        try {
            seq.probs.push_back(clf.classify(windows[i].values));
        } catch (const SigmaZero& e) {
            throw SigmaZero(e.channel, "window " + std::to_string(i) + ": " + e.what());
        }
    }
    return seq;
}

SmoothnessReport smoothness(const std::vector<pipeline::ClassProbs>& probs, double kappa) {
    SmoothnessReport rep;
    rep.kappa = kappa;
    for (size_t i = 0; i + 1 < probs.size(); ++i) {
        double l1 = 0.0;
        for (int c = 0; c < 3; ++c)
            l1 += std::abs(probs[i + 1].p[static_cast<size_t>(c)] -
                           probs[i].p[static_cast<size_t>(c)]);
        rep.step_l1.push_back(l1);
        rep.max_step = std::max(rep.max_step, l1);
    }
    rep.is_smooth = rep.max_step < kappa;
    return rep;
}

namespace {

std::array<double, 2> support_scale(const ad::Array& trace_values, int lo, int hi,
                                    const pipeline::NormConfig& nc) {
    ad::Array seg({hi - lo, 2});
    for (int t = lo; t < hi; ++t)
        for (int c = 0; c < 2; ++c) seg(t - lo, c) = trace_values(t, c);
    const auto st = pipeline::channel_stats(seg, nc.std_mode);
    for (int c = 0; c < 2; ++c)
        if (st.sigma_raw[static_cast<size_t>(c)] <= nc.sigma_min) throw SigmaZero(c);
    return st.sigma;
}

ad::Array slice_rows(const ad::Array& values, int lo, int hi) {
    ad::Array out({hi - lo, 2});
    for (int t = lo; t < hi; ++t)
        for (int c = 0; c < 2; ++c) out(t - lo, c) = values(t, c);
    return out;
}

int argmax3(const ad::Array& logits) {
    int best = 0;
    for (int i = 1; i < 3; ++i)
        if (logits(i) > logits(best)) best = i;
    return best;
}

}  // namespace

SequenceAttackResult sequence_attack(const nn::ModelParams& params, const ad::Array& trace_values,
                                     const SeqAttackConfig& cfg,
                                     const threat::StructuredBudget& budget,
                                     const pipeline::NormConfig& nc) {
    budget.validate();
    if (trace_values.rank() != 2 || trace_values.shape[1] != 2)
        throw ShapeMismatch("trace must be (L,2)");
    const int len = trace_values.shape[0];
    const int w = cfg.window_len;
    const int a = cfg.range_start;
    const int b = cfg.range_end;
    if (w < 2 || w > params.cfg.input_len) throw ValidationError("bad window length");
    if (a < 0 || b < a || b > len - w)
        throw ValidationError("window range [" + std::to_string(a) + "," + std::to_string(b) +
                              "] outside the trace");

    const int s0 = a, s1 = b + w;  // perturbation support, trace indices [s0, s1)
    const int n = s1 - s0;
    const auto scale = support_scale(trace_values, s0, s1, nc);

    // clean labels of the targeted windows (deployed pipeline)
    std::vector<int> clean_labels(static_cast<size_t>(b - a + 1));
    {
        pipeline::Classifier clf(params, w, nc);
        for (int j = a; j <= b; ++j)
            clean_labels[static_cast<size_t>(j - a)] =
                clf.classify(slice_rows(trace_values, j, j + w)).predicted_label;
    }

    // one structured delta over the support; every targeted window slices it
    ad::Graph g;
    auto d = threat::append_structured_delta(g, n, budget);
    auto delta_sig = g.mul_channel(d.delta, g.constant(ad::Array({2}, {scale[0], scale[1]})));
    auto xhat = g.add(g.constant(slice_rows(trace_values, s0, s1)), delta_sig);

    std::vector<ad::NodeId> logits_nodes(static_cast<size_t>(b - a + 1));
    ad::NodeId loss = -1;
    for (int j = a; j <= b; ++j) {
        auto win = g.slice_time(xhat, j - a, w);
        auto zn = pipeline::append_znorm(g, win, nc.std_mode);
        auto padded = pipeline::append_pad_left(g, zn.z, params.cfg.input_len);
        auto fw = nn::append_forward_eval(g, params, padded);
        logits_nodes[static_cast<size_t>(j - a)] = fw.logits;
        const int cls = cfg.class_index >= 0 ? cfg.class_index
                                             : clean_labels[static_cast<size_t>(j - a)];
        ad::NodeId term = g.cross_entropy(fw.logits, {cls});
        if (cfg.objective == SeqObjective::TargetClass) term = g.neg(term);
        loss = loss < 0 ? term : g.add(loss, term);
    }
    g.set_output(loss);
    ad::Eval ev(g);

    auto flips_at = [&]() {
        int flips = 0;
        for (int j = a; j <= b; ++j)
            if (argmax3(ev.value(logits_nodes[static_cast<size_t>(j - a)])) !=
                clean_labels[static_cast<size_t>(j - a)])
                ++flips;
        return flips;
    };

    const int n_targets = b - a + 1;
    attack::PgdProblem prob;
    prob.dim = 3 * n;
    prob.original_label = 0;  // "flip" below means all targeted windows flipped
    prob.eval = [&](const std::vector<double>& u, std::vector<double>& grad, int& label) {
        ad::Array uc({n});
        ad::Array ui({n, 2});
        std::copy(u.begin(), u.begin() + n, uc.data.begin());
        std::copy(u.begin() + n, u.end(), ui.data.begin());
        const double lv = ev.forward({{d.u_com, &uc}, {d.u_ind, &ui}}).data[0];
        label = flips_at() == n_targets ? 1 : 0;  // != original_label stops early
        ev.backward();
        grad.resize(static_cast<size_t>(prob.dim));
        const ad::Array& gc = ev.grad(d.u_com);
        const ad::Array& gi = ev.grad(d.u_ind);
        std::copy(gc.data.begin(), gc.data.end(), grad.begin());
        std::copy(gi.data.begin(), gi.data.end(), grad.begin() + n);
        return lv;
    };
    // keep the support variance alive: classify recomputes stats per window
    prob.step_ok = [&](const std::vector<double>& u) {
        for (int j = a; j <= b; ++j) {
            ad::Array win({w, 2});
            for (int t = 0; t < w; ++t) {
                const int src = j - a + t;
                const double uc = u[static_cast<size_t>(src)];
                for (int c = 0; c < 2; ++c) {
                    const double ui = u[static_cast<size_t>(n + 2 * src + c)];
                    win(t, c) = trace_values(j + t, c) +
                                scale[static_cast<size_t>(c)] *
                                    (budget.eps_com[static_cast<size_t>(c)] * uc +
                                     budget.eps_ind[static_cast<size_t>(c)] * ui);
                }
            }
            const auto st = pipeline::channel_stats(win, nc.std_mode);
            if (st.sigma_raw[0] <= nc.sigma_min || st.sigma_raw[1] <= nc.sigma_min) return false;
        }
        return true;
    };

    // PGD keeps the iterate with the most flipped windows (earliest on ties)
    attack::PgdConfig pgd_cfg = cfg.pgd;
    attack::PgdResult res;
    {
        Rng rng(mix_seed(pgd_cfg.seed, 0));
        std::vector<double> u(static_cast<size_t>(prob.dim), 0.0);
        if (pgd_cfg.random_start) {
            for (double& v : u) v = rng.uniform(-1.0, 1.0);
            if (!prob.step_ok(u)) std::fill(u.begin(), u.end(), 0.0);
        }
        std::vector<double> grad;
        std::vector<double> best_u = u;
        int best_flips = -1;
        const double alpha = pgd_cfg.alpha();
        for (int step = 0; step <= pgd_cfg.steps; ++step) {
            int label = 0;
            double lv = prob.eval(u, grad, label);
            res.loss_trace.push_back(lv);
            bool ok = std::isfinite(lv);
            for (double gv : grad)
                if (!std::isfinite(gv)) ok = false;
            if (!ok) throw GradientFailure("sequence attack: non-finite gradient");
            const int flips = flips_at();
            if (flips > best_flips) {
                best_flips = flips;
                best_u = u;
            }
            if (flips == n_targets || step == pgd_cfg.steps) break;
            std::vector<double> next = u;
            for (size_t i = 0; i < next.size(); ++i) {
                const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
                next[i] = std::clamp(next[i] + alpha * s, -1.0, 1.0);
            }
            if (!prob.step_ok(next)) continue;
            u = std::move(next);
        }
        res.u = std::move(best_u);
        res.found = best_flips == n_targets;
    }

    // materialize the perturbed trace from the best iterate
    SequenceAttackResult out;
    out.support_start = s0;
    out.support_end = s1;
    out.scale = scale;
    out.loss_trace = std::move(res.loss_trace);
    out.perturbed_trace = trace_values;
    for (int t = 0; t < n; ++t) {
        const double uc = res.u[static_cast<size_t>(t)];
        for (int c = 0; c < 2; ++c) {
            const double ui = res.u[static_cast<size_t>(n + 2 * t + c)];
            out.perturbed_trace(s0 + t, c) += scale[static_cast<size_t>(c)] *
                                              (budget.eps_com[static_cast<size_t>(c)] * uc +
                                               budget.eps_ind[static_cast<size_t>(c)] * ui);
        }
    }

    out.seq.start = a;
    out.seq.end = b;
    out.seq.window_len = w;
    pipeline::Classifier clf(params, w, nc);
    for (int j = a; j <= b; ++j) {
        ad::Array clean_win = slice_rows(trace_values, j, j + w);
        ad::Array pert_win = slice_rows(out.perturbed_trace, j, j + w);
        ad::Array delta({w, 2});
        for (size_t i = 0; i < delta.data.size(); ++i)
            delta.data[i] = pert_win.data[i] - clean_win.data[i];

        auto adm = threat::admissibility_check(delta, pipeline::Window(clean_win, j), budget, nc,
                                               &scale);
        const auto probs = clf.classify(pert_win);
        const bool flip = probs.predicted_label != clean_labels[static_cast<size_t>(j - a)];
        out.seq.deltas.push_back(std::move(delta));
        out.seq.probs.push_back(probs);
        out.seq.admissible.push_back(adm.feasible);
        out.seq.flipped.push_back(flip && adm.feasible);
        if (flip && adm.feasible) ++out.flips;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Extendability

namespace {

ad::Array candidate_window(const pipeline::Window& clean_window, const ad::Array& fixed_rows,
                           int free_pos, const std::array<double, 2>& free_delta) {
    const int w = clean_window.length();
    ad::Array out({w, 2});
    int src = 0;
    for (int t = 0; t < w; ++t) {
        if (t == free_pos) {
            for (int c = 0; c < 2; ++c)
                out(t, c) = clean_window.values(t, c) + free_delta[static_cast<size_t>(c)];
        } else {
            for (int c = 0; c < 2; ++c) out(t, c) = fixed_rows(src, c);
            ++src;
        }
    }
    return out;
}

}  // namespace

ExtendResult is_extendable_under_attack(const nn::ModelParams& params,
                                        const pipeline::Window& clean_window,
                                        const ad::Array& fixed_rows, int free_pos,
                                        const ExtendConfig& cfg) {
    cfg.budget.validate();
    const int w = clean_window.length();
    if (fixed_rows.shape != std::vector<int>{w - 1, 2})
        throw ShapeMismatch("fixed_rows must be (W-1,2)");
    if (free_pos != 0 && free_pos != w - 1)
        throw ValidationError("free sample must be the oldest or the newest");
    if (cfg.grid_n < 2) throw InvalidConfig("grid_n must be >= 2");

    pipeline::Classifier clf(params, w, cfg.norm);
    const int clean_label = clf.classify(clean_window.values).predicted_label;

    ExtendResult out;
    auto try_point = [&](double s, double r0, double r1) -> bool {
        std::array<double, 2> delta{};
        const std::array<double, 2> r{r0, r1};
        for (int c = 0; c < 2; ++c)
            delta[static_cast<size_t>(c)] =
                cfg.scale[static_cast<size_t>(c)] *
                (cfg.budget.eps_com[static_cast<size_t>(c)] * s +
                 cfg.budget.eps_ind[static_cast<size_t>(c)] * r[static_cast<size_t>(c)]);
        ad::Array cand = candidate_window(clean_window, fixed_rows, free_pos, delta);
        ++out.evals;

        // the whole window delta must stay admissible, not just the new sample
        ad::Array full_delta({w, 2});
        for (size_t i = 0; i < full_delta.data.size(); ++i)
            full_delta.data[i] = cand.data[i] - clean_window.values.data[i];
        if (!threat::admissibility_check(full_delta, clean_window, cfg.budget, cfg.norm,
                                         &cfg.scale)
                 .feasible)
            return false;
        try {
            if (clf.classify(cand).predicted_label == clean_label) return false;
        } catch (const SigmaZero&) {
            return false;
        }
        out.extendable = true;
        out.delta = delta;
        return true;
    };

    // the inherited perturbation alone may already flip the window
    if (try_point(0.0, 0.0, 0.0)) {
        out.found_by_grid = true;
        return out;
    }

    // dense grid over the three free variables, lexicographic, early stop
    const int n = cfg.grid_n;
    for (int i = 0; i < n; ++i) {
        const double s = -1.0 + 2.0 * i / (n - 1);
        for (int j = 0; j < n; ++j) {
            const double r0 = -1.0 + 2.0 * j / (n - 1);
            for (int k = 0; k < n; ++k) {
                const double r1 = -1.0 + 2.0 * k / (n - 1);
                if (try_point(s, r0, r1)) {
                    out.found_by_grid = true;
                    return out;
                }
            }
        }
    }
    if (!cfg.refine_with_pgd) return out;

    // PGD refinement over (s, r0, r1): the free row is reparameterized, every
    // other row is a constant
    ad::Graph g;
    auto d = threat::append_structured_delta(g, 1, cfg.budget);
    auto free_delta =
        g.mul_channel(d.delta, g.constant(ad::Array({2}, {cfg.scale[0], cfg.scale[1]})));
    ad::Array clean_free({1, 2});
    for (int c = 0; c < 2; ++c) clean_free(0, c) = clean_window.values(free_pos, c);
    auto free_row = g.add(g.constant(clean_free), free_delta);
    ad::NodeId window_node;
    if (free_pos == 0) {
        window_node = g.concat_time(free_row, g.constant(fixed_rows));
    } else {
        window_node = g.concat_time(g.constant(fixed_rows), free_row);
    }
    auto zn = pipeline::append_znorm(g, window_node, cfg.norm.std_mode);
    auto padded = pipeline::append_pad_left(g, zn.z, params.cfg.input_len);
    auto fw = nn::append_forward_eval(g, params, padded);
    g.set_output(g.cross_entropy(fw.logits, {clean_label}));
    ad::Eval ev(g);

    attack::PgdProblem prob;
    prob.dim = 3;
    prob.original_label = clean_label;
    prob.eval = [&](const std::vector<double>& u, std::vector<double>& grad, int& label) {
        ad::Array uc({1});
        ad::Array ui({1, 2});
        uc(0) = u[0];
        ui(0, 0) = u[1];
        ui(0, 1) = u[2];
        const double lv = ev.forward({{d.u_com, &uc}, {d.u_ind, &ui}}).data[0];
        label = argmax3(ev.value(fw.logits));
        ev.backward();
        grad.resize(3);
        grad[0] = ev.grad(d.u_com)(0);
        grad[1] = ev.grad(d.u_ind)(0, 0);
        grad[2] = ev.grad(d.u_ind)(0, 1);
        return lv;
    };
    attack::PgdResult res = attack::pgd(prob, cfg.pgd);
    out.evals += static_cast<int>(res.loss_trace.size());
    if (res.found) {
        // re-verify through the value path before reporting success
        if (try_point(res.u[0], res.u[1], res.u[2])) return out;
        out.extendable = false;
    }
    return out;
}

AdvSequence maximal_adv_sequence_under_attack(const nn::ModelParams& params,
                                              const ad::Array& trace_values, int window_len,
                                              int seed_index, const ad::Array& seed_delta,
                                              const ExtendConfig& cfg) {
    if (trace_values.rank() != 2 || trace_values.shape[1] != 2)
        throw ShapeMismatch("trace must be (L,2)");
    const int len = trace_values.shape[0];
    const int w = window_len;
    if (seed_index < 0 || seed_index > len - w) throw ValidationError("seed window out of range");
    if (seed_delta.shape != std::vector<int>{w, 2})
        throw ShapeMismatch("seed delta must be (W,2)");

    pipeline::Classifier clf(params, w, cfg.norm);
    auto clean_win = [&](int j) { return slice_rows(trace_values, j, j + w); };
    auto clean_label = [&](int j) { return clf.classify(clean_win(j)).predicted_label; };

    // per-trace-index perturbations of the covered range
    std::map<int, std::array<double, 2>> delta_at;
    for (int t = 0; t < w; ++t)
        delta_at[seed_index + t] = {seed_delta(t, 0), seed_delta(t, 1)};

    auto perturbed_win = [&](int j) {
        ad::Array v = clean_win(j);
        for (int t = 0; t < w; ++t) {
            auto it = delta_at.find(j + t);
            if (it == delta_at.end()) continue;
            v(t, 0) += it->second[0];
            v(t, 1) += it->second[1];
        }
        return v;
    };

    // the seed must already be pipeline-adversarial under its budget
    {
        auto adm = threat::admissibility_check(
            seed_delta, pipeline::Window(clean_win(seed_index), seed_index), cfg.budget, cfg.norm,
            &cfg.scale);
        const bool flips =
            clf.classify(perturbed_win(seed_index)).predicted_label != clean_label(seed_index);
        if (!adm.feasible || !flips)
            throw ValidationError("seed window is not pipeline-adversarial");
    }

    int lo = seed_index, hi = seed_index;

    // forward: the newly appended sample is the free one
    while (hi + 1 <= len - w) {
        const int j = hi + 1;
        ad::Array fixed({w - 1, 2});
        for (int t = 0; t < w - 1; ++t) {
            for (int c = 0; c < 2; ++c) {
                const auto it = delta_at.find(j + t);
                fixed(t, c) = trace_values(j + t, c) +
                              (it != delta_at.end() ? it->second[static_cast<size_t>(c)] : 0.0);
            }
        }
        auto probe = is_extendable_under_attack(params, pipeline::Window(clean_win(j), j), fixed,
                                                w - 1, cfg);
        if (!probe.extendable) break;
        delta_at[j + w - 1] = probe.delta;
        hi = j;
    }

    // backward: the newly exposed oldest sample is the free one
    while (lo - 1 >= 0) {
        const int j = lo - 1;
        ad::Array fixed({w - 1, 2});
        for (int t = 1; t < w; ++t) {
            for (int c = 0; c < 2; ++c) {
                const auto it = delta_at.find(j + t);
                fixed(t - 1, c) = trace_values(j + t, c) +
                                  (it != delta_at.end() ? it->second[static_cast<size_t>(c)] : 0.0);
            }
        }
        auto probe =
            is_extendable_under_attack(params, pipeline::Window(clean_win(j), j), fixed, 0, cfg);
        if (!probe.extendable) break;
        delta_at[j] = probe.delta;
        lo = j;
    }

    AdvSequence seq;
    seq.start = lo;
    seq.end = hi;
    seq.window_len = w;
    for (int j = lo; j <= hi; ++j) {
        ad::Array pert = perturbed_win(j);
        ad::Array delta({w, 2});
        for (size_t i = 0; i < delta.data.size(); ++i)
            delta.data[i] = pert.data[i] - clean_win(j).data[i];
        auto adm = threat::admissibility_check(delta, pipeline::Window(clean_win(j), j),
                                               cfg.budget, cfg.norm, &cfg.scale);
        auto probs = clf.classify(pert);
        seq.flipped.push_back(probs.predicted_label != clean_label(j) && adm.feasible);
        seq.admissible.push_back(adm.feasible);
        seq.probs.push_back(probs);
        seq.deltas.push_back(std::move(delta));
    }
    return seq;
}

}  // namespace blmrob::sequence
