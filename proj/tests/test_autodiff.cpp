#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "blmrob/graph.hpp"
#include "blmrob/rng.hpp"
#include "doctest.h"

using namespace blmrob;
using namespace blmrob::ad;

namespace {

Array random_array(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Array a(std::move(shape));
    for (double& v : a.data) v = rng.uniform(lo, hi);
    return a;
}

// FD oracle for a single-leaf scalar graph.
double fd_max_err(const Graph& g, NodeId leaf, const Array& x, double h) {
    return finite_diff_check(g, {{leaf, &x}}, leaf, h);
}

}  // namespace

TEST_CASE("forward: identity on a 2x2 array") {
    Graph g;
    auto x = g.input({2, 2});
    auto y = g.add(x, g.constant(Array::zeros({2, 2})));
    g.set_output(y);
    Array xv({2, 2}, {1, 2, 3, 4});
    Eval ev(g);
    const Array& out = ev.forward({{x, &xv}});
    CHECK(out.data == xv.data);
}

TEST_CASE("forward: mean of a length-3 vector") {
    Graph g;
    auto x = g.input({3});
    g.set_output(g.mean_all(x));
    Array xv({3}, {1, 2, 3});
    Eval ev(g);
    CHECK(ev.forward({{x, &xv}}).data[0] == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("forward: softmax of zeros is uniform") {
    Graph g;
    auto x = g.input({3});
    g.set_output(g.softmax(x));
    Array xv({3}, {0, 0, 0});
    Eval ev(g);
    const Array& out = ev.forward({{x, &xv}});
    for (int i = 0; i < 3; ++i) CHECK(out(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("forward is pure: identical bindings give bitwise-identical outputs") {
    Rng rng(7);
    Graph g;
    auto x = g.input({4, 2});
    auto zn = [&] {
        auto mu = g.channel_mean(x);
        auto cent = g.sub_channel(x, mu);
        auto var = g.channel_mean(g.mul(cent, cent));
        auto sigma = g.sqrt(g.add(var, g.constant(Array::full({2}, 1e-12))));
        return g.div_channel(cent, sigma);
    }();
    g.set_output(g.sum_all(g.relu(zn)));
    Array xv = random_array({4, 2}, rng);
    Eval ev(g);
    Array first = ev.forward({{x, &xv}});
    for (int rep = 0; rep < 3; ++rep) {
        const Array& again = ev.forward({{x, &xv}});
        CHECK(again.data == first.data);
    }
}

TEST_CASE("backward: sum gives all-ones gradient") {
    Graph g;
    auto x = g.input({3, 2});
    g.set_output(g.sum_all(x));
    Array xv({3, 2}, {1, -2, 3, -4, 5, -6});
    auto grads = backward_grad(g, {{x, &xv}}, {x});
    for (double v : grads.at(x).data) CHECK(v == 1.0);
}

TEST_CASE("backward: mean gives 1/n gradient") {
    Graph g;
    auto x = g.input({5});
    g.set_output(g.mean_all(x));
    Array xv({5}, {1, 2, 3, 4, 5});
    auto grads = backward_grad(g, {{x, &xv}}, {x});
    for (double v : grads.at(x).data) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
}

TEST_CASE("backward: first component of z-normalize matches finite differences") {
    Graph g;
    auto x = g.input({3, 1});
    auto mu = g.channel_mean(x);
    auto cent = g.sub_channel(x, mu);
    auto var = g.channel_mean(g.mul(cent, cent));
    auto sigma = g.sqrt(g.add(var, g.constant(Array::full({1}, 1e-12))));
    auto z = g.div_channel(cent, sigma);
    g.set_output(g.sum_all(g.slice_time(z, 0, 1)));
    Array xv({3, 1}, {1, 2, 3});
    CHECK(fd_max_err(g, x, xv, 1e-5) < 1e-4);
}

TEST_CASE("finite differences are near-exact for a linear graph") {
    Rng rng(11);
    Graph g;
    auto x = g.input({6});
    Array w = random_array({6}, rng);
    g.set_output(g.sum_all(g.mul(x, g.constant(w))));
    Array xv = random_array({6}, rng);
    CHECK(fd_max_err(g, x, xv, 1e-5) < 1e-8);
}

TEST_CASE("z-norm composed with a padding mask passes the FD check") {
    Rng rng(13);
    Graph g;
    auto x = g.input({5, 2});
    auto mu = g.channel_mean(x);
    auto cent = g.sub_channel(x, mu);
    auto var = g.channel_mean(g.mul(cent, cent));
    auto sigma = g.sqrt(g.add(var, g.constant(Array::full({2}, 1e-12))));
    auto z = g.div_channel(cent, sigma);
    auto padded = g.concat_time(g.constant(Array::zeros({3, 2})), z);
    Array mask = Array::zeros({8, 2});
    for (int t = 3; t < 8; ++t)
        for (int c = 0; c < 2; ++c) mask(t, c) = 1.0;
    auto masked = g.mul(padded, g.constant(mask));
    g.set_output(g.mean_all(masked));
    Array xv = random_array({5, 2}, rng, 0.5, 2.0);
    CHECK(fd_max_err(g, x, xv, 1e-5) < 1e-4);
}

TEST_CASE("every differentiable op agrees with central finite differences") {
    Rng rng(17);
    auto check = [&](const char* name, auto build, std::vector<int> shape, double lo, double hi) {
        for (int rep = 0; rep < 5; ++rep) {
            Graph g;
            auto x = g.input(shape);
            build(g, x);
            Array xv = random_array(shape, rng, lo, hi);
            double err = fd_max_err(g, x, xv, 1e-5);
            INFO(name << " rep " << rep);
            CHECK(err < 1e-4);
        }
    };

    check("add/mul/scale", [&](Graph& g, NodeId x) {
        auto y = g.scale(g.mul(g.add(x, x), x), 0.5);
        g.set_output(g.sum_all(y));
    }, {4, 2}, -2, 2);

    check("sub/neg", [&](Graph& g, NodeId x) {
        g.set_output(g.sum_all(g.mul(g.sub(x, g.neg(x)), x)));
    }, {3, 2}, -2, 2);

    check("div", [&](Graph& g, NodeId x) {
        Graph& gr = g;
        auto denom = gr.add(g.mul(x, x), gr.constant(Array::full({6}, 1.0)));
        gr.set_output(gr.sum_all(gr.div(x, denom)));
    }, {6}, -2, 2);

    check("sqrt", [&](Graph& g, NodeId x) {
        g.set_output(g.sum_all(g.sqrt(x)));
    }, {5}, 0.5, 3.0);

    check("maximum", [&](Graph& g, NodeId x) {
        Array other({4}, {0.5, -0.25, 0.75, -0.8});
        g.set_output(g.sum_all(g.mul(g.maximum(x, g.constant(other)), x)));
    }, {4}, -2, 2);

    check("relu away from kinks", [&](Graph& g, NodeId x) {
        g.set_output(g.sum_all(g.relu(x)));
    }, {8}, 0.01, 2.0);

    check("channel ops", [&](Graph& g, NodeId x) {
        Array v({2}, {1.5, -0.5});
        Array w({2}, {2.0, 3.0});
        auto y = g.div_channel(g.mul_channel(g.add_channel(x, g.constant(v)), g.constant(v)),
                               g.constant(w));
        g.set_output(g.sum_all(g.sub_channel(y, g.constant(v))));
    }, {4, 2}, -2, 2);

    check("tile_channels", [&](Graph& g, NodeId x) {
        g.set_output(g.sum_all(g.mul(g.tile_channels(x, 3),
                                     g.constant(Array({4, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12})))));
    }, {4}, -2, 2);

    check("channel_mean/gap", [&](Graph& g, NodeId x) {
        auto m = g.channel_mean(x);
        auto p = g.gap_time(g.mul(x, x));
        g.set_output(g.sum_all(g.mul(m, p)));
    }, {5, 2}, -2, 2);

    check("conv1d", [&](Graph& g, NodeId x) {
        Rng krng(23);
        Array k = random_array({3, 2, 3}, krng);
        Array b = random_array({3}, krng);
        auto y = g.conv1d(x, g.constant(k), g.constant(b));
        g.set_output(g.mean_all(g.mul(y, y)));
    }, {7, 2}, -2, 2);

    check("dense", [&](Graph& g, NodeId x) {
        Rng wrng(29);
        Array w = random_array({5, 3}, wrng);
        Array b = random_array({3}, wrng);
        g.set_output(g.sum_all(g.dense(x, g.constant(w), g.constant(b))));
    }, {5}, -2, 2);

    check("softmax", [&](Graph& g, NodeId x) {
        Array pick({3}, {1.0, 0.0, 0.0});
        g.set_output(g.sum_all(g.mul(g.softmax(x), g.constant(pick))));
    }, {3}, -2, 2);

    check("cross_entropy", [&](Graph& g, NodeId x) {
        g.set_output(g.cross_entropy(x, {1}));
    }, {3}, -2, 2);

    check("concat/slice", [&](Graph& g, NodeId x) {
        auto c = g.concat_time(x, g.constant(Array({2, 2}, {1, 2, 3, 4})));
        g.set_output(g.sum_all(g.mul(g.slice_time(c, 1, 3), g.slice_time(c, 2, 3))));
    }, {3, 2}, -2, 2);
}

TEST_CASE("conv1d gradient matches FD for batched input") {
    Rng rng(31);
    Graph g;
    auto x = g.input({2, 6, 2});
    Array k = random_array({4, 2, 5}, rng);
    Array b = random_array({4}, rng);
    auto y = g.conv1d(x, g.constant(k), g.constant(b));
    g.set_output(g.mean_all(g.mul(y, y)));
    Array xv = random_array({2, 6, 2}, rng);
    CHECK(fd_max_err(g, x, xv, 1e-5) < 1e-4);
}

TEST_CASE("gradient flows to the kernel and bias of conv1d") {
    Rng rng(37);
    Graph g;
    auto x = g.constant(random_array({6, 2}, rng));
    auto k = g.input({3, 2, 3});
    auto y = g.conv1d(x, k, g.constant(Array::zeros({3})));
    g.set_output(g.mean_all(g.mul(y, y)));
    Array kv = random_array({3, 2, 3}, rng);
    CHECK(fd_max_err(g, k, kv, 1e-5) < 1e-4);
}

TEST_CASE("batched cross entropy with dense weights matches FD") {
    Rng rng(41);
    Graph g;
    auto w = g.input({4, 3});
    auto x = g.constant(random_array({3, 4}, rng));
    auto logits = g.dense(x, w, g.constant(Array::zeros({3})));
    g.set_output(g.cross_entropy(logits, {0, 2, 1}));
    Array wv = random_array({4, 3}, rng);
    CHECK(fd_max_err(g, w, wv, 1e-5) < 1e-4);
}

TEST_CASE("chain rule on a 2-node chain matches the product of the pieces") {
    // y = g(f(x)) with f(x) = x^2, g(u) = 3u: dy/dx = 3 * 2x
    Graph g;
    auto x = g.input({1});
    auto f = g.mul(x, x);
    auto y = g.scale(f, 3.0);
    g.set_output(g.sum_all(y));
    Array xv({1}, {1.7});
    auto grads = backward_grad(g, {{x, &xv}}, {x});
    CHECK(grads.at(x)(0) == doctest::Approx(3.0 * 2.0 * 1.7).epsilon(1e-12));
}

TEST_CASE("relu subgradient at zero is zero") {
    Graph g;
    auto x = g.input({3});
    g.set_output(g.sum_all(g.relu(x)));
    Array xv({3}, {-1.0, 0.0, 2.0});
    auto grads = backward_grad(g, {{x, &xv}}, {x});
    CHECK(grads.at(x)(0) == 0.0);
    CHECK(grads.at(x)(1) == 0.0);
    CHECK(grads.at(x)(2) == 1.0);
}

TEST_CASE("clamp: forward projects, gradient passes only inside the box") {
    Graph g;
    auto x = g.input({4});
    auto y = g.clamp(x, -1.0, 1.0);
    g.set_output(g.sum_all(y));
    Array xv({4}, {-2.0, -0.5, 0.5, 2.0});
    Eval ev(g);
    ev.forward({{x, &xv}});
    const Array& out = ev.value(y);
    CHECK(out(0) == -1.0);
    CHECK(out(3) == 1.0);
    ev.backward();
    CHECK(ev.grad(x)(0) == 0.0);
    CHECK(ev.grad(x)(1) == 1.0);
    CHECK(ev.grad(x)(2) == 1.0);
    CHECK(ev.grad(x)(3) == 0.0);
}

TEST_CASE("shape errors are reported at build time") {
    Graph g;
    auto a = g.input({2, 2});
    auto b = g.input({3, 2});
    CHECK_THROWS_AS((void)g.add(a, b), ShapeMismatch);
    CHECK_THROWS_AS((void)g.slice_time(a, 1, 5), ShapeMismatch);
    CHECK_THROWS_AS((void)g.cross_entropy(a, {0}), ShapeMismatch);
}

TEST_CASE("division by zero is reported at forward time") {
    Graph g;
    auto x = g.input({2});
    g.set_output(g.sum_all(g.div(x, g.constant(Array({2}, {1.0, 0.0})))));
    Array xv({2}, {1.0, 1.0});
    Eval ev(g);
    CHECK_THROWS_AS(ev.forward({{x, &xv}}), DivisionByZero);
}

TEST_CASE("backward requires a scalar output") {
    Graph g;
    auto x = g.input({2});
    g.set_output(g.relu(x));
    Array xv({2}, {1.0, 2.0});
    Eval ev(g);
    ev.forward({{x, &xv}});
    CHECK_THROWS_AS(ev.backward(), NonScalarOutput);
}

TEST_CASE("finite_diff_check excludes entries that straddle a relu kink") {
    Graph g;
    auto x = g.input({2});
    auto pre = g.add(x, g.constant(Array({2}, {0.0, 1.0})));
    g.set_output(g.sum_all(g.relu(pre)));
    // x[0] sits exactly on the kink: +h/-h evaluations flip the sign of pre[0]
    Array xv({2}, {0.0, 0.5});
    double err = finite_diff_check(g, {{x, &xv}}, x, 1e-3, {pre});
    CHECK(err < 1e-10);  // only the clean entry contributes
}
