#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "blmrob/pipeline.hpp"
#include "blmrob/rng.hpp"
#include "doctest.h"

using namespace blmrob;
using namespace blmrob::pipeline;

namespace {

Window random_window(uint64_t seed, int w, double base = 1.0, double spread = 0.3) {
    Rng rng(seed);
    ad::Array v({w, 2});
    for (double& x : v.data) x = base + spread * rng.normal();
    return Window(std::move(v), 0);
}

nn::ModelParams tiny_model(uint64_t seed) {
    nn::ArchConfig c;
    c.scale_factor = 1.0 / 16.0;
    return nn::build_model(c, seed);
}

}  // namespace

TEST_CASE("znormalize: closed forms") {
    Window w(ad::Array({3, 2}, {1, 0, 2, 2, 3, 0}), 0);
    // channel 0 = [1,2,3]: mu 2, population sigma sqrt(2/3)
    ad::Array z = znormalize(w);
    CHECK(z(0, 0) == doctest::Approx(-1.224745).epsilon(1e-6));
    CHECK(z(1, 0) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(z(2, 0) == doctest::Approx(1.224745).epsilon(1e-6));

    Window w2(ad::Array({2, 2}, {0, 1, 2, 3}), 0);
    ad::Array z2 = znormalize(w2);
    CHECK(z2(0, 0) == doctest::Approx(-1.0).epsilon(1e-9));
    CHECK(z2(1, 0) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("znormalize: constant channel raises SigmaZero") {
    Window w(ad::Array({3, 2}, {5, 1, 5, 2, 5, 3}), 0);
    CHECK_THROWS_AS(znormalize(w), SigmaZero);
}

TEST_CASE("znormalize: unpadded mean 0 and population std 1") {
    Window w = random_window(3, 37);
    ad::Array z = znormalize(w);
    auto st = channel_stats(z, StdMode::Population);
    for (int c = 0; c < 2; ++c) {
        CHECK(std::abs(st.mean[static_cast<size_t>(c)]) < 1e-9);
        CHECK(std::abs(st.sigma_raw[static_cast<size_t>(c)] - 1.0) < 1e-9);
    }
}

TEST_CASE("znormalize is idempotent within 1e-9") {
    Window w = random_window(5, 64);
    ad::Array z1 = znormalize(w);
    ad::Array z2 = znormalize(Window(z1, 0));
    for (size_t i = 0; i < z1.data.size(); ++i) CHECK(std::abs(z1.data[i] - z2.data[i]) < 1e-9);
}

TEST_CASE("pad_left: W == p means no padding") {
    Window w = random_window(7, 630);
    auto pi = pad_left(znormalize(w));
    CHECK(pi.z.shape == std::vector<int>{630, 2});
    for (double m : pi.mask.data) CHECK(m == 1.0);
}

TEST_CASE("pad_left: 3 rows into 5 prefixes two zero rows") {
    ad::Array normed({3, 2}, {1, 2, 3, 4, 5, 6});
    auto pi = pad_left(normed, 5);
    for (int t = 0; t < 2; ++t)
        for (int c = 0; c < 2; ++c) {
            CHECK(pi.z(t, c) == 0.0);
            CHECK(pi.mask(t, c) == 0.0);
        }
    CHECK(pi.z(2, 0) == 1.0);
    CHECK(pi.z(4, 1) == 6.0);
    CHECK(pi.mask(2, 0) == 1.0);
}

TEST_CASE("pad_left: window longer than p is rejected") {
    Window w = random_window(9, 631);
    CHECK_THROWS_AS(pad_left(w.values, 630), WindowTooLong);
}

TEST_CASE("classify: affine invariance over 100 random transforms") {
    auto params = tiny_model(11);
    Window w = random_window(13, 80);
    ClassProbs base = classify(params, w);
    Rng rng(17);
    for (int i = 0; i < 100; ++i) {
        const double a = rng.uniform(0.1, 10.0);
        const double b = rng.uniform(-5.0, 5.0);
        Window t = w;
        for (double& v : t.values.data) v = a * v + b;
        ClassProbs probs = classify(params, t);
        CHECK(probs.predicted_label == base.predicted_label);
        for (int k = 0; k < 3; ++k)
            CHECK(std::abs(probs.p[static_cast<size_t>(k)] - base.p[static_cast<size_t>(k)]) <
                  1e-9);
    }
}

TEST_CASE("classify: probabilities sum to 1 within 1e-12 on 100 random windows") {
    auto params = tiny_model(19);
    Classifier clf(params, 60);
    for (uint64_t s = 0; s < 100; ++s) {
        Window w = random_window(100 + s, 60);
        ClassProbs probs = clf.classify(w.values);
        double sum = probs.p[0] + probs.p[1] + probs.p[2];
        CHECK(std::abs(sum - 1.0) < 1e-12);
        for (double p : probs.p) CHECK(p >= 0.0);
    }
}

TEST_CASE("classify: constant window raises SigmaZero") {
    auto params = tiny_model(23);
    Window w(ad::Array::full({50, 2}, 3.0), 0);
    CHECK_THROWS_AS(classify(params, w), SigmaZero);
}

TEST_CASE("classify equals the hand-composed pipeline bitwise") {
    auto params = tiny_model(29);
    Window w = random_window(31, 90);
    ClassProbs direct = classify(params, w);

    auto z = pad_left(znormalize(w));
    nn::Logits logits = nn::forward_logits(params, z.z);
    ClassProbs composed = softmax_probs(logits);

    CHECK(direct.p == composed.p);
    CHECK(direct.predicted_label == composed.predicted_label);
}

TEST_CASE("sliding_windows: counts, origins and overlap") {
    ad::Array trace({5, 2}, {0, 0, 1, 10, 2, 20, 3, 30, 4, 40});
    auto ws = sliding_windows(trace, 3);
    REQUIRE(ws.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(ws[static_cast<size_t>(i)].origin == i);
    // consecutive windows share W-1 samples
    for (int t = 0; t < 2; ++t)
        for (int c = 0; c < 2; ++c) CHECK(ws[0].values(t + 1, c) == ws[1].values(t, c));

    auto one = sliding_windows(trace, 5);
    CHECK(one.size() == 1);
    CHECK_THROWS_AS(sliding_windows(trace, 6), TraceTooShort);
}

TEST_CASE("is_normalized_padded accepts the image of pad(normalize(...))") {
    Window w = random_window(41, 33);
    auto pi = pad_left(znormalize(w));
    CHECK(is_normalized_padded(pi.z, pi.mask, StdMode::Population));
    ad::Array broken = pi.z;
    broken(629, 0) += 0.05;
    CHECK(!is_normalized_padded(broken, pi.mask, StdMode::Population));
}

TEST_CASE("sample-std mode also normalizes to its own convention") {
    NormConfig nc;
    nc.std_mode = StdMode::Sample;
    Window w = random_window(43, 25);
    ad::Array z = znormalize(w, nc);
    auto st = channel_stats(z, StdMode::Sample);
    for (int c = 0; c < 2; ++c)
        CHECK(std::abs(st.sigma_raw[static_cast<size_t>(c)] - 1.0) < 1e-9);
}
