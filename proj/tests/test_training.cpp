#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "blmrob/data.hpp"
#include "blmrob/training.hpp"
#include "doctest.h"

using namespace blmrob;
using namespace blmrob::training;

namespace {

struct SmallSet {
    std::vector<pipeline::Window> train_w, val_w;
    std::vector<int> train_y, val_y;
};

SmallSet small_set(uint64_t seed, int n_scans = 8) {
    data::DatasetConfig cfg;
    cfg.n_scans = n_scans;
    cfg.scan_len = 300;
    cfg.window_len = 96;
    cfg.stride = 12;
    data::Dataset ds = data::make_dataset(cfg, seed);
    SmallSet s;
    s.train_w = ds.windows_of(ds.train);
    s.train_y = ds.labels_of(ds.train);
    s.val_w = ds.windows_of(ds.val);
    s.val_y = ds.labels_of(ds.val);
    return s;
}

nn::ModelParams small_model(uint64_t seed) {
    nn::ArchConfig c;
    c.scale_factor = 1.0 / 16.0;
    return nn::build_model(c, seed);
}

TrainConfig fast_cfg(int epochs, double lr = 0.05) {
    TrainConfig c;
    c.epochs = epochs;
    c.learning_rate = lr;
    c.batch_size = 16;
    c.seed = 11;
    return c;
}

}  // namespace

TEST_CASE("lr=0 for one epoch leaves parameters unchanged except running stats") {
    SmallSet s = small_set(3);
    auto p0 = small_model(5);
    auto res = train_clean(p0, s.train_w, s.train_y, s.val_w, s.val_y, fast_cfg(1, 0.0));

    CHECK(res.params.conv1_w.data == p0.conv1_w.data);
    CHECK(res.params.conv2_w.data == p0.conv2_w.data);
    CHECK(res.params.dense_w.data == p0.dense_w.data);
    CHECK(res.params.bn1_gamma.data == p0.bn1_gamma.data);
    CHECK(res.params.bn1_mean.data != p0.bn1_mean.data);  // batch stats moved these
    CHECK(res.log.epochs.size() == 1);
}

TEST_CASE("loss strictly decreases over the first epochs on an easy set") {
    SmallSet s = small_set(7);
    auto p0 = small_model(9);
    auto res = train_clean(p0, s.train_w, s.train_y, s.val_w, s.val_y, fast_cfg(5, 0.02));
    REQUIRE(res.log.epochs.size() == 5);
    for (size_t e = 1; e < 5; ++e)
        CHECK(res.log.epochs[e].loss < res.log.epochs[e - 1].loss);
}

TEST_CASE("training is deterministic given identical seeds and config") {
    SmallSet s = small_set(13);
    auto p0 = small_model(15);
    auto a = train_clean(p0, s.train_w, s.train_y, s.val_w, s.val_y, fast_cfg(2));
    auto b = train_clean(p0, s.train_w, s.train_y, s.val_w, s.val_y, fast_cfg(2));
    CHECK(a.params.conv1_w.data == b.params.conv1_w.data);
    CHECK(a.params.bn2_var.data == b.params.bn2_var.data);
    REQUIRE(a.log.epochs.size() == b.log.epochs.size());
    for (size_t e = 0; e < a.log.epochs.size(); ++e) {
        CHECK(a.log.epochs[e].loss == b.log.epochs[e].loss);
        CHECK(a.log.epochs[e].val_acc == b.log.epochs[e].val_acc);
    }
}

TEST_CASE("momentum SGD trains and stays deterministic") {
    SmallSet s = small_set(43);
    auto p0 = small_model(47);
    TrainConfig cfg = fast_cfg(3, 0.01);
    cfg.momentum = 0.9;
    auto a = train_clean(p0, s.train_w, s.train_y, s.val_w, s.val_y, cfg);
    auto b = train_clean(p0, s.train_w, s.train_y, s.val_w, s.val_y, cfg);
    CHECK(a.params.conv1_w.data == b.params.conv1_w.data);
    CHECK(a.log.epochs.back().loss < a.log.epochs.front().loss);
    for (const auto& e : a.log.epochs) CHECK(std::isfinite(e.loss));
}

TEST_CASE("a training set missing a class is rejected") {
    SmallSet s = small_set(17);
    std::vector<pipeline::Window> w;
    std::vector<int> y;
    for (size_t i = 0; i < s.train_w.size(); ++i)
        if (s.train_y[i] != data::kChanneling) {
            w.push_back(s.train_w[i]);
            y.push_back(s.train_y[i]);
        }
    auto p0 = small_model(19);
    CHECK_THROWS_AS(train_clean(p0, w, y, s.val_w, s.val_y, fast_cfg(1)), DatasetClassMissing);
}

TEST_CASE("fine-tuning with adv_fraction 0 reproduces clean training bitwise") {
    SmallSet s = small_set(23);
    auto p0 = small_model(25);
    TrainConfig cfg = fast_cfg(2);

    auto clean = train_clean(p0, s.train_w, s.train_y, s.val_w, s.val_y, cfg);

    TrainConfig ft = cfg;
    ft.adv_fraction = 0.0;
    ft.budget.eps_com = {0.10, 0.10};
    ft.budget.eps_ind = {0.02, 0.02};
    auto tuned = finetune_adversarial(p0, s.train_w, s.train_y, s.val_w, s.val_y, ft);

    for (size_t i = 0; i < clean.params.named().size(); ++i)
        CHECK(clean.params.named()[i].second->data == tuned.params.named()[i].second->data);
    for (size_t e = 0; e < clean.log.epochs.size(); ++e)
        CHECK(clean.log.epochs[e].loss == tuned.log.epochs[e].loss);
}

TEST_CASE("fine-tuning requires positive budgets") {
    SmallSet s = small_set(29);
    auto p0 = small_model(31);
    TrainConfig ft = fast_cfg(1);
    ft.budget.eps_com = {0.0, 0.0};
    ft.budget.eps_ind = {0.0, 0.0};
    CHECK_THROWS_AS(finetune_adversarial(p0, s.train_w, s.train_y, s.val_w, s.val_y, ft),
                    InvalidConfig);
}

TEST_CASE("fine-tuning with attacks runs and keeps the loss finite") {
    SmallSet s = small_set(37, 8);
    auto p0 = small_model(41);
    // a short clean phase, then one adversarial epoch
    auto clean = train_clean(p0, s.train_w, s.train_y, s.val_w, s.val_y, fast_cfg(2, 0.02));
    TrainConfig ft = fast_cfg(1, 0.01);
    ft.adv_fraction = 0.5;
    ft.adv_pgd.steps = 5;
    ft.budget.eps_com = {0.10, 0.10};
    ft.budget.eps_ind = {0.02, 0.02};
    ft.jobs = 2;
    auto tuned =
        finetune_adversarial(clean.params, s.train_w, s.train_y, s.val_w, s.val_y, ft);
    for (const auto& e : tuned.log.epochs) CHECK(std::isfinite(e.loss));
    CHECK(tuned.params.conv1_w.data != clean.params.conv1_w.data);

    // determinism also holds with the attack path enabled
    auto again =
        finetune_adversarial(clean.params, s.train_w, s.train_y, s.val_w, s.val_y, ft);
    CHECK(again.params.conv1_w.data == tuned.params.conv1_w.data);
}
