#include "blmrob/training.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <unordered_map>

#include "blmrob/rng.hpp"
#include "blmrob/util.hpp"

namespace blmrob::training {

void TrainConfig::validate() const {
    if (epochs < 0) throw InvalidConfig("epochs must be >= 0");
    if (batch_size < 1) throw InvalidConfig("batch_size must be >= 1");
    if (learning_rate < 0.0) throw InvalidConfig("learning_rate must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) throw InvalidConfig("momentum must be in [0,1)");
    if (mode == TrainMode::AdvFinetune) {
        if (adv_fraction < 0.0 || adv_fraction > 1.0)
            throw InvalidConfig("adv_fraction must be in [0,1]");
        budget.validate();
        if (budget.is_zero()) throw InvalidConfig("adversarial fine-tuning needs positive budgets");
    }
}

namespace {

// P(N(x)) of one window, with the last-iterate PGD perturbation applied
// against the current weights. Ascends cross-entropy on the true label; no
// early stopping (the strongest example within the step budget is wanted,
// not the first flip).
ad::Array adversarial_input(const nn::ModelParams& params, const pipeline::Window& x0,
                            int true_label, const threat::StructuredBudget& b,
                            const attack::PgdConfig& pgd_cfg, const pipeline::NormConfig& nc) {
    ad::Graph g;
    auto wrap = threat::append_reparam_signal(g, x0, b, nc.std_mode, false, params.cfg.input_len);
    auto fw = nn::append_forward_eval(g, params, wrap.padded);
    g.set_output(g.cross_entropy(fw.logits, {true_label}));

    ad::Eval ev(g);
    const int w = x0.length();
    attack::PgdProblem prob;
    prob.dim = 3 * w;
    prob.original_label = -1;  // run all steps
    prob.eval = [&](const std::vector<double>& u, std::vector<double>& grad, int& label) {
        ad::Array uc({w});
        ad::Array ui({w, 2});
        std::copy(u.begin(), u.begin() + w, uc.data.begin());
        std::copy(u.begin() + w, u.end(), ui.data.begin());
        const double loss = ev.forward({{wrap.d.u_com, &uc}, {wrap.d.u_ind, &ui}}).data[0];
        label = 0;
        ev.backward();
        grad.resize(static_cast<size_t>(prob.dim));
        const ad::Array& gc = ev.grad(wrap.d.u_com);
        const ad::Array& gi = ev.grad(wrap.d.u_ind);
        std::copy(gc.data.begin(), gc.data.end(), grad.begin());
        std::copy(gi.data.begin(), gi.data.end(), grad.begin() + w);
        return loss;
    };
    attack::PgdResult res = attack::pgd(prob, pgd_cfg);

    ad::Array uc({w});
    ad::Array ui({w, 2});
    if (!res.u.empty()) {
        std::copy(res.u.begin(), res.u.begin() + w, uc.data.begin());
        std::copy(res.u.begin() + w, res.u.end(), ui.data.begin());
    }
    ev.forward({{wrap.d.u_com, &uc}, {wrap.d.u_ind, &ui}});
    return ev.value(wrap.padded);
}

TrainResult run_training(const nn::ModelParams& params0,
                         const std::vector<pipeline::Window>& train_windows,
                         const std::vector<int>& train_labels,
                         const std::vector<pipeline::Window>& val_windows,
                         const std::vector<int>& val_labels, const TrainConfig& cfg) {
    cfg.validate();
    if (train_windows.empty()) throw EmptyDataset("training set is empty");
    if (train_windows.size() != train_labels.size() || val_windows.size() != val_labels.size())
        throw ShapeMismatch("windows and labels must align");
    {
        std::set<int> classes(train_labels.begin(), train_labels.end());
        if (classes != std::set<int>{0, 1, 2})
            throw DatasetClassMissing("training set must contain all 3 classes");
    }

    const nn::ArchConfig& arch = params0.cfg;
    const int n = static_cast<int>(train_windows.size());
    const int c1 = arch.conv1_scaled();
    const int c2 = arch.conv2_scaled();
    const int t_len = arch.input_len;
    const double keep = 1.0 - arch.dropout_rate;

    // the deployed preprocessing of each training window is fixed; cache it
    std::vector<ad::Array> padded(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        padded[static_cast<size_t>(i)] =
            pipeline::pad_left(pipeline::znormalize(train_windows[static_cast<size_t>(i)], cfg.norm),
                               t_len)
                .z;

    TrainResult result;
    result.params = params0;
    nn::ModelParams& p = result.params;

    // momentum buffers, keyed by parameter name
    std::unordered_map<std::string, ad::Array> velocity;
    for (auto& [name, arr] : p.named()) velocity.emplace(name, ad::Array::zeros(arr->shape));

    Rng shuffle_rng(mix_seed(cfg.seed, 0x73687566ULL));
    Rng dropout_rng(mix_seed(cfg.seed, 0x64726f70ULL));

    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

    const bool adv = cfg.mode == TrainMode::AdvFinetune;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates with our own rng so runs reproduce everywhere
        for (int i = n - 1; i > 0; --i)
            std::swap(order[static_cast<size_t>(i)],
                      order[static_cast<size_t>(shuffle_rng.uniform_int(i + 1))]);

        double loss_sum = 0.0;
        int batches = 0;
        for (int start = 0; start < n; start += cfg.batch_size) {
            const int bsz = std::min(cfg.batch_size, n - start);
            std::vector<int> labels(static_cast<size_t>(bsz));
            for (int k = 0; k < bsz; ++k)
                labels[static_cast<size_t>(k)] =
                    train_labels[static_cast<size_t>(order[static_cast<size_t>(start + k)])];

            // dropout masks are drawn before any attack work so the rng
            // stream is identical whether or not samples get replaced
            ad::Array m1({bsz, t_len, c1});
            ad::Array m2({bsz, t_len, c2});
            for (double& v : m1.data)
                v = (arch.dropout_rate == 0.0 || dropout_rng.uniform() >= arch.dropout_rate)
                        ? 1.0 / keep
                        : 0.0;
            for (double& v : m2.data)
                v = (arch.dropout_rate == 0.0 || dropout_rng.uniform() >= arch.dropout_rate)
                        ? 1.0 / keep
                        : 0.0;

            ad::Array zb({bsz, t_len, 2});
            for (int k = 0; k < bsz; ++k) {
                const int idx = order[static_cast<size_t>(start + k)];
                const ad::Array& src = padded[static_cast<size_t>(idx)];
                std::copy(src.data.begin(), src.data.end(),
                          zb.data.begin() + static_cast<long>(k) * t_len * 2);
            }

            const int n_adv = adv ? static_cast<int>(std::lround(cfg.adv_fraction * bsz)) : 0;
            if (n_adv > 0) {
                std::vector<ad::Array> adv_inputs(static_cast<size_t>(n_adv));
                parallel_for(n_adv, cfg.jobs, [&](int k) {
                    const int idx = order[static_cast<size_t>(start + k)];
                    attack::PgdConfig pc = cfg.adv_pgd;
                    pc.seed = mix_seed(mix_seed(cfg.adv_pgd.seed, static_cast<uint64_t>(epoch)),
                                       static_cast<uint64_t>(start + k));
                    adv_inputs[static_cast<size_t>(k)] = adversarial_input(
                        p, train_windows[static_cast<size_t>(idx)],
                        train_labels[static_cast<size_t>(idx)], cfg.budget, pc, cfg.norm);
                });
                for (int k = 0; k < n_adv; ++k)
                    std::copy(adv_inputs[static_cast<size_t>(k)].data.begin(),
                              adv_inputs[static_cast<size_t>(k)].data.end(),
                              zb.data.begin() + static_cast<long>(k) * t_len * 2);
            }

            nn::TrainGraph tg = nn::build_train_graph(arch, bsz, labels, false);
            ad::Bindings bind = {{tg.z, &zb}, {tg.drop1, &m1}, {tg.drop2, &m2}};
            auto named = p.named();
            for (const auto& [name, id] : tg.param_leaves)
                for (auto& [pname, arr] : named)
                    if (pname == name) bind.emplace_back(id, arr);

            ad::Eval ev(tg.g);
            double loss;
            try {
                loss = ev.forward(bind).data[0];
                ev.backward();
            } catch (const NonFiniteValue& e) {
                throw DivergedLoss(std::string("training diverged: ") + e.what());
            }
            loss_sum += loss;
            ++batches;

            // SGD step on the parameter leaves
            for (const auto& [name, id] : tg.param_leaves) {
                for (auto& [pname, arr] : named) {
                    if (pname != name) continue;
                    const ad::Array& grad = ev.grad(id);
                    ad::Array& vel = velocity.at(name);
                    for (size_t j = 0; j < arr->data.size(); ++j) {
                        if (cfg.momentum > 0.0) {
                            vel.data[j] = cfg.momentum * vel.data[j] + grad.data[j];
                            arr->data[j] -= cfg.learning_rate * vel.data[j];
                        } else {
                            arr->data[j] -= cfg.learning_rate * grad.data[j];
                        }
                    }
                }
            }

            // running statistics follow the batch statistics
            const double m = arch.bn_momentum;
            auto update = [&](ad::Array& run, const ad::Array& batch_stat) {
                for (size_t j = 0; j < run.data.size(); ++j)
                    run.data[j] = (1.0 - m) * run.data[j] + m * batch_stat.data[j];
            };
            update(p.bn1_mean, ev.value(tg.bn1_batch_mean));
            update(p.bn1_var, ev.value(tg.bn1_batch_var));
            update(p.bn2_mean, ev.value(tg.bn2_batch_mean));
            update(p.bn2_var, ev.value(tg.bn2_batch_var));
        }

        EpochLog el;
        el.epoch = epoch;
        el.loss = batches > 0 ? loss_sum / batches : 0.0;
        if (!std::isfinite(el.loss)) throw DivergedLoss("epoch loss is not finite");

        if (!val_windows.empty()) {
            pipeline::Classifier clf(p, val_windows[0].length(), cfg.norm);
            int correct = 0;
            for (size_t i = 0; i < val_windows.size(); ++i)
                if (clf.classify(val_windows[i].values).predicted_label ==
                    val_labels[i])
                    ++correct;
            el.val_acc = static_cast<double>(correct) / static_cast<double>(val_windows.size());
        }
        result.log.epochs.push_back(el);
    }
    result.log.final_val_acc =
        result.log.epochs.empty() ? 0.0 : result.log.epochs.back().val_acc;
    return result;
}

}  // namespace

TrainResult train_clean(const nn::ModelParams& params0,
                        const std::vector<pipeline::Window>& train_windows,
                        const std::vector<int>& train_labels,
                        const std::vector<pipeline::Window>& val_windows,
                        const std::vector<int>& val_labels, const TrainConfig& cfg) {
    TrainConfig c = cfg;
    c.mode = TrainMode::Clean;
    return run_training(params0, train_windows, train_labels, val_windows, val_labels, c);
}

TrainResult finetune_adversarial(const nn::ModelParams& params_clean,
                                 const std::vector<pipeline::Window>& train_windows,
                                 const std::vector<int>& train_labels,
                                 const std::vector<pipeline::Window>& val_windows,
                                 const std::vector<int>& val_labels, const TrainConfig& cfg) {
    TrainConfig c = cfg;
    c.mode = TrainMode::AdvFinetune;
    return run_training(params_clean, train_windows, train_labels, val_windows, val_labels, c);
}

}  // namespace blmrob::training
