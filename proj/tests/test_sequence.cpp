#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "blmrob/data.hpp"
#include "blmrob/sequence.hpp"
#include "blmrob/training.hpp"
#include "doctest.h"

using namespace blmrob;
using namespace blmrob::sequence;

namespace {

constexpr int kW = 96;

// one trained tiny model shared by the test cases in this binary
const nn::ModelParams& trained_model() {
    static nn::ModelParams params = [] {
        data::DatasetConfig cfg;
        cfg.n_scans = 12;
        cfg.scan_len = 300;
        cfg.window_len = kW;
        cfg.stride = 8;
        data::Dataset ds = data::make_dataset(cfg, 515);
        nn::ArchConfig arch;
        arch.scale_factor = 1.0 / 16.0;
        training::TrainConfig tc;
        tc.epochs = 10;
        tc.learning_rate = 0.01;
        tc.momentum = 0.9;
        tc.batch_size = 16;
        tc.seed = 3;
        auto res = training::train_clean(nn::build_model(arch, 1), ds.windows_of(ds.train),
                                         ds.labels_of(ds.train), ds.windows_of(ds.val),
                                         ds.labels_of(ds.val), tc);
        return res.params;
    }();
    return params;
}

// a scan with one deliberately weak channeling event, so the targeted windows
// sit near the channeling/partial-well boundary
data::ScanTrace demo_trace(uint64_t seed, double amp = 0.7) {
    data::GenParams g;
    g.events.push_back({data::EventKind::Channeling, 130, g.event_half_width, amp});
    return data::generate_scan(g, seed, 260);
}

threat::StructuredBudget paper_budget() {
    threat::StructuredBudget b;
    b.eps_com = {0.10, 0.10};
    b.eps_ind = {0.02, 0.02};
    return b;
}

}  // namespace

TEST_CASE("classification_sequence has one entry per window and matches classify") {
    const auto& params = trained_model();
    data::ScanTrace tr = demo_trace(11);
    ClassSequence seq = classification_sequence(params, tr.values, kW);
    CHECK(seq.probs.size() == static_cast<size_t>(260 - kW + 1));

    auto windows = pipeline::sliding_windows(tr.values, kW);
    for (size_t i = 0; i < windows.size(); i += 37) {
        auto direct = pipeline::classify(params, windows[i]);
        CHECK(direct.p == seq.probs[i].p);
    }

    ad::Array one_window = tr.values;
    ClassSequence single = classification_sequence(params, windows[0].values, kW);
    CHECK(single.probs.size() == 1);
}

TEST_CASE("a background trace classifies to one label everywhere") {
    const auto& params = trained_model();
    data::GenParams g;
    data::ScanTrace tr = data::generate_scan(g, 13, 260);
    ClassSequence seq = classification_sequence(params, tr.values, kW);
    int counts[3] = {0, 0, 0};
    for (const auto& p : seq.probs) counts[p.predicted_label]++;
    // majority-label oracle: virtually all windows agree
    CHECK(counts[data::kNoChanneling] >= static_cast<int>(seq.probs.size()) - 2);
}

TEST_CASE("smoothness: constant probabilities give zero steps") {
    std::vector<pipeline::ClassProbs> probs(5);
    for (auto& p : probs) p.p = {0.2, 0.3, 0.5};
    auto rep = smoothness(probs, 0.5);
    CHECK(rep.max_step == 0.0);
    CHECK(rep.is_smooth);
    CHECK(rep.step_l1.size() == 4);
}

TEST_CASE("smoothness: a hard flip has the maximal L1 step of 2") {
    std::vector<pipeline::ClassProbs> probs(2);
    probs[0].p = {1.0, 0.0, 0.0};
    probs[1].p = {0.0, 1.0, 0.0};
    auto rep = smoothness(probs, 0.5);
    CHECK(rep.max_step == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(!rep.is_smooth);
}

TEST_CASE("smoothness: a single window is vacuously smooth") {
    std::vector<pipeline::ClassProbs> probs(1);
    auto rep = smoothness(probs, 0.5);
    CHECK(rep.max_step == 0.0);
    CHECK(rep.is_smooth);
}

TEST_CASE("sequence attack with zero budgets changes nothing and flips nothing") {
    const auto& params = trained_model();
    data::ScanTrace tr = demo_trace(17);
    SeqAttackConfig cfg;
    cfg.window_len = kW;
    cfg.range_start = 70;
    cfg.range_end = 75;
    cfg.pgd.steps = 3;
    cfg.pgd.seed = 5;
    threat::StructuredBudget zero;
    zero.eps_com = {0.0, 0.0};
    zero.eps_ind = {0.0, 0.0};
    auto res = sequence_attack(params, tr.values, cfg, zero);
    CHECK(res.flips == 0);
    CHECK(res.perturbed_trace.data == tr.values.data);
}

TEST_CASE("sequence attack flips targeted windows and leaves the rest untouched") {
    const auto& params = trained_model();
    data::ScanTrace tr = demo_trace(19, 0.7);

    // the targeted range must be cleanly classified as channeling first
    ClassSequence clean_seq = classification_sequence(params, tr.values, kW);
    SeqAttackConfig cfg;
    cfg.window_len = kW;
    cfg.range_start = 66;
    cfg.range_end = 81;  // 16 windows
    cfg.objective = SeqObjective::SuppressClass;
    cfg.class_index = data::kChanneling;
    cfg.pgd.steps = 40;
    cfg.pgd.seed = 7;
    auto res = sequence_attack(params, tr.values, cfg, paper_budget());

    INFO("flips " << res.flips << " of 16");
    CHECK(res.flips * 2 >= 16);  // at least half the targeted windows

    // samples outside the support are bitwise unchanged
    for (int t = 0; t < res.support_start; ++t)
        for (int c = 0; c < 2; ++c) CHECK(res.perturbed_trace(t, c) == tr.values(t, c));
    for (int t = res.support_end; t < 260; ++t)
        for (int c = 0; c < 2; ++c) CHECK(res.perturbed_trace(t, c) == tr.values(t, c));

    // windows disjoint from the support keep their labels exactly
    ClassSequence pert_seq = classification_sequence(params, res.perturbed_trace, kW);
    for (size_t i = 0; i < clean_seq.probs.size(); ++i) {
        const int origin = static_cast<int>(i);
        if (origin + kW <= res.support_start || origin >= res.support_end) {
            CHECK(pert_seq.probs[i].predicted_label == clean_seq.probs[i].predicted_label);
            CHECK(pert_seq.probs[i].p == clean_seq.probs[i].p);
        }
    }

    // every covered window's delta is admissible and consistency is exact:
    // overlapping samples agree bitwise between consecutive windows
    for (size_t k = 0; k < res.seq.deltas.size(); ++k) {
        CHECK(res.seq.admissible[k]);
        if (k > 0)
            for (int t = 0; t < kW - 1; ++t)
                for (int c = 0; c < 2; ++c)
                    CHECK(res.seq.deltas[k](t, c) == res.seq.deltas[k - 1](t + 1, c));
    }

    // smoothness report over the perturbed sequence is well-formed
    auto rep = smoothness(res.seq.probs, 0.5);
    CHECK(rep.step_l1.size() == res.seq.probs.size() - 1);
}

TEST_CASE("single-window range reduces to the baseline per-window attack") {
    const auto& params = trained_model();
    data::ScanTrace tr = demo_trace(23, 0.7);
    auto windows = pipeline::sliding_windows(tr.values, kW);
    threat::StructuredBudget b = paper_budget();

    int checked = 0;
    for (int j : {40, 55, 66, 70, 74, 78, 82, 90, 110, 130}) {
        attack::PgdConfig pc;
        pc.steps = 25;
        pc.seed = 1000 + static_cast<uint64_t>(j);
        auto base = attack::run_config(attack::ConfigKind::Baseline, params,
                                       windows[static_cast<size_t>(j)], b, pc);

        SeqAttackConfig cfg;
        cfg.window_len = kW;
        cfg.range_start = j;
        cfg.range_end = j;
        cfg.objective = SeqObjective::SuppressClass;
        cfg.class_index = -1;  // suppress the window's own clean label
        cfg.pgd = pc;
        auto seq = sequence_attack(params, tr.values, cfg, b);

        CHECK(base.tool_success == (seq.flips == 1));
        ++checked;
    }
    CHECK(checked == 10);
}

TEST_CASE("sequence attack rejects a range outside the trace") {
    const auto& params = trained_model();
    data::ScanTrace tr = demo_trace(29);
    SeqAttackConfig cfg;
    cfg.window_len = kW;
    cfg.range_start = 0;
    cfg.range_end = 260 - kW + 1;  // one past the last valid origin
    CHECK_THROWS_AS(sequence_attack(params, tr.values, cfg, paper_budget()), ValidationError);
}

TEST_CASE("extendability: zero budget and a solid margin cannot extend") {
    const auto& params = trained_model();
    data::ScanTrace tr = demo_trace(31);
    auto windows = pipeline::sliding_windows(tr.values, kW);
    const auto& win = windows[10];  // background region, confidently classified

    ad::Array fixed({kW - 1, 2});
    for (int t = 0; t < kW - 1; ++t)
        for (int c = 0; c < 2; ++c) fixed(t, c) = win.values(t, c);

    ExtendConfig cfg;
    cfg.budget.eps_com = {0.0, 0.0};
    cfg.budget.eps_ind = {0.0, 0.0};
    cfg.scale = {1.0, 1.0};
    cfg.grid_n = 3;
    cfg.refine_with_pgd = false;
    auto res = is_extendable_under_attack(params, win, fixed, kW - 1, cfg);
    CHECK(!res.extendable);
}

TEST_CASE("extendability: an inherited flip extends with a zero delta") {
    const auto& params = trained_model();
    data::ScanTrace tr = demo_trace(37, 0.7);

    // find one adversarial window via the sequence attack
    SeqAttackConfig acfg;
    acfg.window_len = kW;
    acfg.range_start = 66;
    acfg.range_end = 81;
    acfg.class_index = data::kChanneling;
    acfg.pgd.steps = 40;
    acfg.pgd.seed = 11;
    auto attack_res = sequence_attack(params, tr.values, acfg, paper_budget());
    REQUIRE(attack_res.flips > 0);

    int j = -1;
    for (size_t k = 0; k + 1 < attack_res.seq.flipped.size(); ++k)
        if (attack_res.seq.flipped[k] && attack_res.seq.flipped[k + 1]) {
            j = attack_res.seq.start + static_cast<int>(k);
            break;
        }
    if (j < 0) return;  // no adjacent pair this run; covered by the acceptance suite

    // window j+1 is already flipped by the shared perturbation, with its last
    // sample's perturbation dropped the prefix may still flip it; if so, the
    // probe must report extendable with delta 0 preferred
    auto windows = pipeline::sliding_windows(tr.values, kW);
    ad::Array fixed({kW - 1, 2});
    for (int t = 0; t < kW - 1; ++t)
        for (int c = 0; c < 2; ++c)
            fixed(t, c) = attack_res.perturbed_trace(j + 1 + t, c);

    pipeline::Classifier clf(params, kW);
    ad::Array prefix_only = windows[static_cast<size_t>(j + 1)].values;
    for (int t = 0; t < kW - 1; ++t)
        for (int c = 0; c < 2; ++c) prefix_only(t, c) = fixed(t, c);
    const int clean_label =
        clf.classify(windows[static_cast<size_t>(j + 1)].values).predicted_label;
    const bool prefix_flips = clf.classify(prefix_only).predicted_label != clean_label;

    ExtendConfig cfg;
    cfg.budget = paper_budget();
    cfg.scale = attack_res.scale;
    cfg.grid_n = 9;
    cfg.refine_with_pgd = false;
    auto res = is_extendable_under_attack(params, windows[static_cast<size_t>(j + 1)], fixed,
                                          kW - 1, cfg);
    if (prefix_flips) {
        CHECK(res.extendable);
        CHECK(res.delta[0] == 0.0);
        CHECK(res.delta[1] == 0.0);
    }
}

TEST_CASE("maximal sequence: every covered window is adversarial and consistent") {
    const auto& params = trained_model();
    data::ScanTrace tr = demo_trace(41, 0.7);
    SeqAttackConfig acfg;
    acfg.window_len = kW;
    acfg.range_start = 70;
    acfg.range_end = 78;
    acfg.class_index = data::kChanneling;
    acfg.pgd.steps = 40;
    acfg.pgd.seed = 13;
    auto attack_res = sequence_attack(params, tr.values, acfg, paper_budget());
    int seed_j = -1;
    for (size_t k = 0; k < attack_res.seq.flipped.size(); ++k)
        if (attack_res.seq.flipped[k]) seed_j = attack_res.seq.start + static_cast<int>(k);
    REQUIRE(seed_j >= 0);

    ExtendConfig cfg;
    cfg.budget = paper_budget();
    cfg.scale = attack_res.scale;
    cfg.grid_n = 9;
    cfg.refine_with_pgd = true;
    cfg.pgd.steps = 15;
    cfg.pgd.seed = 17;

    const ad::Array& seed_delta =
        attack_res.seq.deltas[static_cast<size_t>(seed_j - attack_res.seq.start)];
    AdvSequence seq = maximal_adv_sequence_under_attack(params, tr.values, kW, seed_j, seed_delta,
                                                        cfg);
    CHECK(seq.length() >= 1);
    for (size_t k = 0; k < seq.flipped.size(); ++k) {
        CHECK(seq.flipped[k]);
        CHECK(seq.admissible[k]);
    }
    for (size_t k = 1; k < seq.deltas.size(); ++k)
        for (int t = 0; t < kW - 1; ++t)
            for (int c = 0; c < 2; ++c)
                CHECK(seq.deltas[k](t, c) == seq.deltas[k - 1](t + 1, c));

    // a non-adversarial seed is rejected
    ad::Array zero = ad::Array::zeros({kW, 2});
    CHECK_THROWS_AS(maximal_adv_sequence_under_attack(params, tr.values, kW, seed_j, zero, cfg),
                    ValidationError);
}

TEST_CASE("grid-only and grid+pgd extendability agree on constructed cases") {
    const auto& params = trained_model();
    data::ScanTrace tr = demo_trace(43, 0.7);
    auto windows = pipeline::sliding_windows(tr.values, kW);

    int agreements = 0, cases = 0;
    for (int j : {50, 60, 70, 75, 80, 100}) {
        ad::Array fixed({kW - 1, 2});
        for (int t = 0; t < kW - 1; ++t)
            for (int c = 0; c < 2; ++c) fixed(t, c) = tr.values(j + t, c);

        ExtendConfig grid_only;
        grid_only.budget = paper_budget();
        grid_only.scale = threat::budget_scale(windows[static_cast<size_t>(j)], grid_only.budget);
        grid_only.grid_n = 17;
        grid_only.refine_with_pgd = false;

        ExtendConfig grid_pgd = grid_only;
        grid_pgd.grid_n = 9;
        grid_pgd.refine_with_pgd = true;
        grid_pgd.pgd.steps = 20;
        grid_pgd.pgd.seed = 19;

        auto a = is_extendable_under_attack(params, windows[static_cast<size_t>(j)], fixed,
                                            kW - 1, grid_only);
        auto b = is_extendable_under_attack(params, windows[static_cast<size_t>(j)], fixed,
                                            kW - 1, grid_pgd);
        ++cases;
        if (a.extendable == b.extendable) ++agreements;
    }
    CHECK(agreements == cases);
}
