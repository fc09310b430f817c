#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>

#include "blmrob/model.hpp"
#include "blmrob/pipeline.hpp"
#include "doctest.h"

using namespace blmrob;
using namespace blmrob::nn;

namespace {

ArchConfig tiny_cfg() {
    ArchConfig c;
    c.scale_factor = 1.0 / 16.0;
    return c;
}

ad::Array random_input(uint64_t seed, int len = 630) {
    Rng rng(seed);
    ad::Array z({len, 2});
    for (double& v : z.data) v = rng.normal();
    return z;
}

}  // namespace

TEST_CASE("same config and seed build bitwise-identical parameters") {
    auto a = build_model(tiny_cfg(), 42);
    auto b = build_model(tiny_cfg(), 42);
    for (size_t i = 0; i < a.named().size(); ++i) {
        CHECK(a.named()[i].second->data == b.named()[i].second->data);
    }
    auto c = build_model(tiny_cfg(), 43);
    CHECK(c.conv1_w.data != a.conv1_w.data);
}

TEST_CASE("full-scale conv1 kernel shape follows the architecture table") {
    ArchConfig c;  // scale_factor 1
    auto p = build_model(c, 1);
    CHECK(p.conv1_w.shape == std::vector<int>{256, 2, c.kernel_size});
    CHECK(p.conv2_w.shape == std::vector<int>{160, 256, c.kernel_size});
    CHECK(p.dense_w.shape == std::vector<int>{160, 3});
}

TEST_CASE("scale_factor 1/8 gives 32 and 20 channels") {
    ArchConfig c;
    c.scale_factor = 1.0 / 8.0;
    CHECK(c.conv1_scaled() == 32);
    CHECK(c.conv2_scaled() == 20);
}

TEST_CASE("invalid configs are rejected") {
    ArchConfig c;
    c.kernel_size = 4;
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
    c = ArchConfig{};
    c.scale_factor = 0.0;
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
    c = ArchConfig{};
    c.dropout_rate = 1.0;
    CHECK_THROWS_AS(c.validate(), InvalidConfig);
}

TEST_CASE("zero input on a fresh model gives tied logits, argmax 0") {
    auto p = build_model(tiny_cfg(), 5);
    ad::Array z = ad::Array::zeros({630, 2});
    Logits l = forward_logits(p, z);
    CHECK(l.v[0] == l.v[1]);
    CHECK(l.v[1] == l.v[2]);
    CHECK(l.argmax() == 0);
}

TEST_CASE("eval-mode forward is deterministic") {
    auto p = build_model(tiny_cfg(), 6);
    ad::Array z = random_input(7);
    Logits a = forward_logits(p, z);
    Logits b = forward_logits(p, z);
    CHECK(a.v == b.v);
}

TEST_CASE("network output reacts to padded-region values (no built-in mask)") {
    auto p = build_model(tiny_cfg(), 8);
    const int w = 100;
    Rng rng(9);
    pipeline::Window win(random_input(10, w), 0);
    auto z = pipeline::pad_left(pipeline::znormalize(win));
    Logits clean = forward_logits(p, z.z);

    ad::Array corrupted = z.z;
    for (int t = 0; t < 630 - w; ++t)
        for (int c = 0; c < 2; ++c) corrupted(t, c) = rng.uniform(-1.0, 1.0);
    Logits dirty = forward_logits(p, corrupted);
    CHECK(clean.v != dirty.v);

    // reapplying the mask restores the clean input exactly
    for (size_t i = 0; i < corrupted.data.size(); ++i) corrupted.data[i] *= z.mask.data[i];
    Logits masked = forward_logits(p, corrupted);
    CHECK(clean.v == masked.v);
}

TEST_CASE("train mode with dropout 0 and frozen batch norm equals eval mode") {
    ArchConfig c = tiny_cfg();
    c.dropout_rate = 0.0;
    auto p = build_model(c, 11);
    ad::Array z = random_input(12);

    Logits ev = forward_logits(p, z);

    TrainGraph tg = build_train_graph(c, 1, {0}, /*freeze_bn=*/true);
    ad::Array zb({1, 630, 2});
    zb.data = z.data;
    ad::Array m1 = ad::Array::full({1, 630, c.conv1_scaled()}, 1.0);
    ad::Array m2 = ad::Array::full({1, 630, c.conv2_scaled()}, 1.0);
    ad::Bindings b = {{tg.z, &zb}, {tg.drop1, &m1}, {tg.drop2, &m2}};
    for (const auto& [name, id] : tg.param_leaves)
        for (auto& [pname, arr] : p.named())
            if (pname == name) b.emplace_back(id, arr);
    ad::Eval e(tg.g);
    e.forward(b);
    const ad::Array& lv = e.value(tg.logits);
    for (int i = 0; i < 3; ++i)
        CHECK(lv(0, i) == doctest::Approx(ev.v[static_cast<size_t>(i)]).epsilon(1e-12));
}

TEST_CASE("train-mode forward updates running statistics") {
    auto p = build_model(tiny_cfg(), 13);
    ad::Array rm_before = p.bn1_mean;
    Rng rng(14);
    ad::Array z = random_input(15);
    (void)forward_logits(p, z, ForwardMode::Train, &rng);
    CHECK(p.bn1_mean.data != rm_before.data);
}

TEST_CASE("save/load round trip is bitwise lossless") {
    auto p = build_model(tiny_cfg(), 16);
    // make the stats non-trivial first
    Rng rng(17);
    (void)forward_logits(p, random_input(18), ForwardMode::Train, &rng);

    const std::string path = (std::filesystem::temp_directory_path() / "blmrob_w.bin").string();
    save_weights(p, path);
    auto q = load_weights(path);
    CHECK(q.cfg == p.cfg);
    auto pn = p.named();
    auto qn = q.named();
    for (size_t i = 0; i < pn.size(); ++i) {
        CHECK(pn[i].second->shape == qn[i].second->shape);
        CHECK(pn[i].second->data == qn[i].second->data);
    }
    std::filesystem::remove(path);
}

TEST_CASE("truncated weight file is rejected") {
    auto p = build_model(tiny_cfg(), 19);
    std::string buf = encode_weights(p);
    buf.resize(buf.size() / 2);
    CHECK_THROWS_AS(decode_weights(buf), FormatError);
}

TEST_CASE("weight file with a bad magic is rejected") {
    auto p = build_model(tiny_cfg(), 20);
    std::string buf = encode_weights(p);
    buf[0] = 'X';
    CHECK_THROWS_AS(decode_weights(buf), FormatError);
}

TEST_CASE("weight file with a corrupted arch header is rejected") {
    auto p = build_model(tiny_cfg(), 21);
    std::string buf = encode_weights(p);
    buf[8] = 0;
    buf[9] = 0;
    buf[10] = 0;
    buf[11] = 0;  // input_len = 0
    CHECK_THROWS_AS(decode_weights(buf), FormatError);
}
