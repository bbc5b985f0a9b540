// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "driftlab/optimizer.hpp"
#include "driftlab/rng.hpp"
#include "driftlab/tape.hpp"

using namespace driftlab;

namespace {

Tensor make2(std::int64_t r, std::int64_t c, std::vector<double> v) {
    return Tensor(Shape{r, c}, std::move(v));
}

/// Random dense net of up to three layers, rebuilt from a flat parameter
/// vector so the same function can be evaluated at perturbed points. Acts as
/// the ground-truth harness for the finite-difference gradient oracle.
struct RandomNet {
    int layers = 0;
    std::vector<int> dims;        // layers+1 widths
    std::vector<int> act;         // 0 none, 1 relu, 2 tanh
    Tensor input;                 // [1, dims[0]]
    Tensor target;                // [1, dims.back()]
    bool l1 = false;
    std::size_t n_params = 0;

    static RandomNet sample(Rng& rng) {
        RandomNet n;
        n.layers = rng.uniform_int(1, 3);
        n.dims.push_back(rng.uniform_int(2, 5));
        for (int l = 0; l < n.layers; ++l) {
            n.dims.push_back(rng.uniform_int(2, 5));
            n.act.push_back(rng.uniform_int(0, 2));
        }
        std::vector<double> in(static_cast<std::size_t>(n.dims[0]));
        for (double& v : in) v = rng.uniform(-1.5, 1.5);
        n.input = make2(1, n.dims[0], std::move(in));
        std::vector<double> tg(static_cast<std::size_t>(n.dims.back()));
        for (double& v : tg) v = rng.uniform(-1.0, 1.0);
        n.target = make2(1, n.dims.back(), std::move(tg));
        n.l1 = rng.uniform_int(0, 1) == 1;
        for (int l = 0; l < n.layers; ++l)
            n.n_params += static_cast<std::size_t>(n.dims[l] * n.dims[l + 1] + n.dims[l + 1]);
        return n;
    }

    std::vector<double> init_params(Rng& rng) const {
        std::vector<double> p(n_params);
        for (double& v : p) v = rng.uniform(-0.8, 0.8);
        return p;
    }

    double eval(const std::vector<double>& flat, GradMap* grads = nullptr,
                double* min_preact = nullptr) const {
        Tape tape;
        std::vector<Var> leaves;
        std::size_t off = 0;
        for (int l = 0; l < layers; ++l) {
            const auto wn = static_cast<std::size_t>(dims[l] * dims[l + 1]);
            leaves.push_back(tape.leaf(
                make2(dims[l], dims[l + 1], {flat.begin() + static_cast<std::ptrdiff_t>(off),
                                             flat.begin() + static_cast<std::ptrdiff_t>(off + wn)}),
                true, static_cast<int>(2 * l)));
            off += wn;
            const auto bn = static_cast<std::size_t>(dims[l + 1]);
            leaves.push_back(tape.leaf(
                Tensor(Shape{dims[l + 1]}, {flat.begin() + static_cast<std::ptrdiff_t>(off),
                                            flat.begin() + static_cast<std::ptrdiff_t>(off + bn)}),
                true, static_cast<int>(2 * l + 1)));
            off += bn;
        }
        Var x = tape.leaf(input, false);
        for (int l = 0; l < layers; ++l) {
            x = add(matmul(x, leaves[static_cast<std::size_t>(2 * l)]),
                    leaves[static_cast<std::size_t>(2 * l + 1)]);
            if (min_preact && act[static_cast<std::size_t>(l)] == 1)
                for (double v : x.value().vec())
                    *min_preact = std::min(*min_preact, std::fabs(v));
            if (act[static_cast<std::size_t>(l)] == 1) x = relu(x);
            if (act[static_cast<std::size_t>(l)] == 2) x = driftlab::tanh(x);
        }
        Var y = tape.leaf(target, false);
        Var loss = l1 ? l1_loss(x, y) : mse_loss(x, y);
        if (min_preact && l1)
            for (std::size_t i = 0; i < x.value().vec().size(); ++i)
                *min_preact = std::min(*min_preact,
                                       std::fabs(x.value().vec()[i] - target.vec()[i]));
        if (grads) *grads = tape.backward(loss);
        return loss.value().value();
    }

    std::vector<double> flat_grads(const GradMap& gm) const {
        std::vector<double> out;
        for (int l = 0; l < layers; ++l) {
            const Tensor& w = gm.at(2 * l);
            out.insert(out.end(), w.vec().begin(), w.vec().end());
            const Tensor& b = gm.at(2 * l + 1);
            out.insert(out.end(), b.vec().begin(), b.vec().end());
        }
        return out;
    }
};

}  // namespace

TEST_CASE("matmul identity") {
    Tape t;
    Var a = t.leaf(make2(2, 2, {1, 2, 3, 4}));
    Var i = t.leaf(make2(2, 2, {1, 0, 0, 1}));
    Var c = matmul(a, i);
    CHECK(c.value().vec() == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("matmul shape mismatch") {
    Tape t;
    Var a = t.leaf(make2(2, 3, std::vector<double>(6, 1.0)));
    Var b = t.leaf(make2(2, 2, std::vector<double>(4, 1.0)));
    CHECK_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("non-finite result trips numeric error") {
    Tape t;
    Var a = t.leaf(make2(1, 1, {1e308}));
    Var b = t.leaf(make2(1, 1, {1e308}));
    CHECK_THROWS_AS(matmul(a, b), NumericError);
}

TEST_CASE("relu definition") {
    Tape t;
    Var a = t.leaf(Tensor(Shape{3}, {-1, 0, 2}));
    CHECK(relu(a).value().vec() == std::vector<double>{0, 0, 2});
}

TEST_CASE("l1 loss zero distance") {
    Tape t;
    Var p = t.leaf(make2(1, 1, {0.5}));
    Var y = t.leaf(make2(1, 1, {0.5}));
    CHECK(l1_loss(p, y).value().value() == 0.0);
}

TEST_CASE("square gradient") {
    Tape t;
    Var w = t.leaf(make2(1, 1, {3.0}), true, 0);
    Var zero = t.leaf(make2(1, 1, {0.0}));
    Var loss = mse_loss(w, zero);  // w^2 for a single element
    GradMap g = t.backward(loss);
    CHECK(g.at(0).value() == Catch::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("l1 sign rule and tie at zero") {
    {
        Tape t;
        Var w = t.leaf(make2(1, 1, {-2.0}), true, 0);
        Var zero = t.leaf(make2(1, 1, {0.0}));
        GradMap g = t.backward(l1_loss(w, zero));
        CHECK(g.at(0).value() == -1.0);
    }
    {
        Tape t;
        Var w = t.leaf(make2(1, 1, {0.0}), true, 0);
        Var zero = t.leaf(make2(1, 1, {0.0}));
        GradMap g = t.backward(l1_loss(w, zero));
        CHECK(g.at(0).value() == 0.0);  // subgradient at zero is zero
    }
}

TEST_CASE("backward requires scalar loss") {
    Tape t;
    Var w = t.leaf(make2(1, 2, {1.0, 2.0}), true, 0);
    CHECK_THROWS_AS(t.backward(w), ContractError);
}

TEST_CASE("non-participating parameters get zero gradients") {
    Tape t;
    Var w = t.leaf(make2(1, 1, {3.0}), true, 0);
    Var unused = t.leaf(make2(1, 2, {1.0, 2.0}), true, 1);
    (void)unused;
    Var zero = t.leaf(make2(1, 1, {0.0}));
    GradMap g = t.backward(mse_loss(w, zero));
    REQUIRE(g.count(1) == 1);
    CHECK(g.at(1).vec() == std::vector<double>{0.0, 0.0});
}

TEST_CASE("gradients match central finite differences on random nets") {
    // 20 accepted nets; configurations whose relu/l1 kinks sit within the
    // finite-difference step are resampled to keep the oracle well-defined.
    const double h = 1e-5;
    int accepted = 0;
    std::uint64_t seed = 20240501;
    double worst = 0.0;
    while (accepted < 20) {
        Rng rng(seed++);
        RandomNet net = RandomNet::sample(rng);
        std::vector<double> params = net.init_params(rng);
        double min_preact = 1e9;
        GradMap gm;
        const double base = net.eval(params, &gm, &min_preact);
        (void)base;
        if (min_preact < 1e-3) continue;  // too close to a kink for FD
        const std::vector<double> grad = net.flat_grads(gm);
        ++accepted;
        for (std::size_t i = 0; i < params.size(); ++i) {
            std::vector<double> p = params;
            p[i] = params[i] + h;
            const double up = net.eval(p);
            p[i] = params[i] - h;
            const double dn = net.eval(p);
            const double fd = (up - dn) / (2 * h);
            worst = std::max(worst, std::fabs(fd - grad[i]));
        }
    }
    CHECK(worst < 1e-6);
}

TEST_CASE("tape ops compose: concat, slice, reshape, scale, mean, embed, patchify") {
    Tape t;
    Var a = t.leaf(make2(2, 2, {1, 2, 3, 4}), true, 0);
    Var b = t.leaf(make2(2, 1, {5, 6}), true, 1);
    Var c = concat_cols({a, b});
    CHECK(c.value().vec() == std::vector<double>{1, 2, 5, 3, 4, 6});
    Var s = slice_cols(c, 2, 3);
    CHECK(s.value().vec() == std::vector<double>{5, 6});
    Var r = reshape(s, Shape{1, 2});
    Var sc = scale(r, 2.0);
    Var m = mean(sc);
    CHECK(m.value().value() == Catch::Approx(11.0));
    GradMap g = t.backward(m);
    CHECK(g.at(1).vec() == std::vector<double>{1.0, 1.0});
    CHECK(g.at(0).vec() == std::vector<double>(4, 0.0));

    Tape t2;
    Var table = t2.leaf(make2(3, 2, {0, 1, 2, 3, 4, 5}), true, 0);
    Var e = embed(table, {2, 0});
    CHECK(e.value().vec() == std::vector<double>{4, 5, 0, 1});
    CHECK_THROWS_AS(embed(table, {3}), ContractError);

    // patchify on a 4x4 grid with 2x2 patches is a permutation
    Tape t3;
    std::vector<double> img(4 * 4 * 3);
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
    Var iv = t3.leaf(make2(1, 48, img), true, 0);
    Var pv = patchify(iv, 4, 2);
    REQUIRE(pv.value().shape() == Shape{4, 12});
    // first patch, second row, first pixel = image pixel (y=1,x=0)
    CHECK(pv.value().at(0, 6) == img[(1 * 4 + 0) * 3]);
    GradMap g3 = t3.backward(mean(pv));
    CHECK(g3.at(0).vec() == std::vector<double>(48, 1.0 / 48.0));
}

TEST_CASE("sgd step") {
    Optimizer opt(OptimizerConfig{OptKind::sgd, 0.1});
    std::vector<double> p{1.0};
    std::vector<double> g{2.0};
    opt.step(p, g);
    CHECK(p[0] == Catch::Approx(0.8).epsilon(1e-15));
}

TEST_CASE("adam first step matches the update rule") {
    OptimizerConfig cfg;  // adam defaults
    Optimizer opt(cfg);
    std::vector<double> p{0.0};
    std::vector<double> g{1.0};
    opt.step(p, g);
    // bias-corrected m=v=1 at t=1, so the step is lr/(1+eps)
    const double expect = -cfg.lr * 1.0 / (1.0 + cfg.eps);
    CHECK(p[0] == Catch::Approx(expect).epsilon(1e-12));
}

TEST_CASE("frozen parameters are bitwise unchanged") {
    Optimizer opt(OptimizerConfig{});
    std::vector<double> p{0.25, -1.75};
    const double frozen_before = p[1];
    std::vector<std::uint8_t> mask{1, 0};
    for (int i = 0; i < 25; ++i) {
        std::vector<double> g{0.3, 17.0};
        opt.step(p, g, mask);
    }
    CHECK(std::memcmp(&p[1], &frozen_before, sizeof(double)) == 0);
    CHECK(p[0] != 0.25);
}

TEST_CASE("optimizer rejects length mismatch") {
    Optimizer opt(OptimizerConfig{OptKind::sgd, 0.1});
    std::vector<double> p{1.0, 2.0};
    std::vector<double> g{1.0};
    CHECK_THROWS_AS(opt.step(p, g), ContractError);
}

TEST_CASE("sgd momentum accumulates velocity") {
    Optimizer opt(OptimizerConfig{OptKind::sgd_momentum, 0.1, 0.9});
    std::vector<double> p{0.0};
    std::vector<double> g{1.0};
    opt.step(p, g);
    CHECK(p[0] == Catch::Approx(-0.1));
    opt.step(p, g);  // velocity = 0.9*1 + 1 = 1.9
    CHECK(p[0] == Catch::Approx(-0.1 - 0.19));
}
