// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstring>

#include "driftlab/policy.hpp"
#include "driftlab/rng.hpp"

using namespace driftlab;

namespace {

Observation random_obs(const PolicyConfig& cfg, Rng& rng) {
    Observation o;
    o.image.resize(static_cast<std::size_t>(cfg.image_len()));
    for (float& v : o.image) v = static_cast<float>(rng.uniform());
    o.proprio = {rng.uniform(), rng.uniform(), rng.uniform()};
    o.instruction = rng.uniform_int(0, cfg.vocab - 1);
    return o;
}

std::size_t expected_param_count(const PolicyConfig& c) {
    const std::size_t plen = static_cast<std::size_t>(c.patch_len());
    const std::size_t P = static_cast<std::size_t>(c.patches());
    const std::size_t d = static_cast<std::size_t>(c.embed_dim);
    const std::size_t h = static_cast<std::size_t>(c.hidden_dim);
    const std::size_t p = static_cast<std::size_t>(c.proprio_dim);
    const std::size_t a = static_cast<std::size_t>(c.action_dim);
    const std::size_t v = static_cast<std::size_t>(c.vocab);
    const std::size_t e = static_cast<std::size_t>(c.instr_dim);
    const std::size_t ve = plen * d + d + P * d * d + d;
    const std::size_t vp = d * d + d;
    const std::size_t bb = v * e + (2 * d + e) * h + h + h * h + h;
    const std::size_t pp = p * d + d;
    const std::size_t ah = h * a + a;
    return ve + vp + bb + pp + ah;
}

}  // namespace

TEST_CASE("parameter count matches the layer arithmetic") {
    PolicyConfig cfg;  // grid 16, patch 4, d 32, h 64, p 3, a 4, v 16, e 8
    PolicyNet net(cfg, 7);
    CHECK(net.param_count() == expected_param_count(cfg));
}

TEST_CASE("same seed gives identical checkpoints") {
    PolicyConfig cfg;
    PolicyNet a(cfg, 42), b(cfg, 42);
    CHECK(a.snapshot().modules == b.snapshot().modules);
    PolicyNet c(cfg, 43);
    CHECK(a.snapshot().modules != c.snapshot().modules);
}

TEST_CASE("patch size must divide the grid") {
    PolicyConfig cfg;
    cfg.patch = 5;
    CHECK_THROWS_AS(PolicyNet(cfg, 1), ConfigError);
}

TEST_CASE("module views partition the flat parameter vector") {
    PolicyConfig cfg;
    PolicyNet net(cfg, 3);
    std::vector<double> rebuilt;
    for (ModuleId m : kModuleOrder) {
        auto sp = net.module_params(m);
        rebuilt.insert(rebuilt.end(), sp.begin(), sp.end());
    }
    auto full = net.params();
    REQUIRE(rebuilt.size() == full.size());
    CHECK(std::memcmp(rebuilt.data(), full.data(), full.size() * sizeof(double)) == 0);
}

TEST_CASE("zero weights give the zero action") {
    PolicyConfig cfg;
    PolicyNet net(cfg, 1);
    std::fill(net.params().begin(), net.params().end(), 0.0);
    Rng rng(5);
    const auto a = net.act(random_obs(cfg, rng));
    for (double v : a) CHECK(v == 0.0);
}

TEST_CASE("actions stay inside [-1, 1]") {
    PolicyConfig cfg;
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        PolicyNet net(cfg, seed);
        Rng rng(seed * 11 + 1);
        for (int i = 0; i < 20; ++i) {
            const auto a = net.act(random_obs(cfg, rng));
            for (double v : a) {
                CHECK(v <= 1.0);
                CHECK(v >= -1.0);
            }
        }
    }
}

TEST_CASE("activation capture has one row per probe input and is side-effect free") {
    PolicyConfig cfg;
    PolicyNet net(cfg, 9);
    Rng rng(17);
    std::vector<Observation> obs;
    for (int i = 0; i < 5; ++i) obs.push_back(random_obs(cfg, rng));

    const Tensor plain = net.forward(obs);
    auto [actions, captured] = net.forward_captured(obs, {ModuleId::backbone});
    REQUIRE(captured.size() == 1);
    CHECK(captured[0].module == ModuleId::backbone);
    CHECK(captured[0].values.rows() == 5);
    CHECK(captured[0].values.cols() == cfg.hidden_dim);
    CHECK(actions.vec() == plain.vec());
}

TEST_CASE("every module can be captured with its own output width") {
    PolicyConfig cfg;
    PolicyNet net(cfg, 21);
    Rng rng(2);
    std::vector<Observation> obs{random_obs(cfg, rng), random_obs(cfg, rng)};
    auto [actions, captured] = net.forward_captured(
        obs, {ModuleId::vision_encoder, ModuleId::vision_projector, ModuleId::backbone,
              ModuleId::proprio_projector, ModuleId::action_head});
    (void)actions;
    REQUIRE(captured.size() == 5);
    CHECK(captured[0].values.cols() == cfg.embed_dim);
    CHECK(captured[1].values.cols() == cfg.embed_dim);
    CHECK(captured[2].values.cols() == cfg.hidden_dim);
    CHECK(captured[3].values.cols() == cfg.embed_dim);
    CHECK(captured[4].values.cols() == cfg.action_dim);
}

TEST_CASE("snapshot then restore is bitwise exact") {
    PolicyConfig cfg;
    PolicyNet net(cfg, 4);
    const NamedCheckpoint snap = net.snapshot();
    Rng rng(3);
    const Observation obs = random_obs(cfg, rng);
    const auto before = net.act(obs);

    for (double& v : net.module_params(ModuleId::action_head)) v += 0.25;
    CHECK(net.act(obs) != before);
    net.restore(snap);
    CHECK(net.act(obs) == before);
    CHECK(net.snapshot().modules == snap.modules);
}

TEST_CASE("restore rejects an incompatible checkpoint") {
    PolicyConfig a;
    PolicyConfig b;
    b.action_dim = 4;
    b.hidden_dim = 48;
    PolicyNet na(a, 1);
    PolicyNet nb(b, 1);
    CHECK_THROWS_AS(na.restore(nb.snapshot()), IncompatibilityError);
}

TEST_CASE("freeze mask covers exactly the requested modules") {
    PolicyConfig cfg;
    PolicyNet net(cfg, 2);
    const auto all = net.freeze_mask(
        {ModuleId::vision_encoder, ModuleId::vision_projector, ModuleId::backbone,
         ModuleId::proprio_projector, ModuleId::action_head});
    CHECK(std::count(all.begin(), all.end(), 1) == static_cast<long>(net.param_count()));
    const auto none = net.freeze_mask({});
    CHECK(std::count(none.begin(), none.end(), 1) == 0);
    const auto head = net.freeze_mask({ModuleId::action_head});
    const long expect = cfg.hidden_dim * cfg.action_dim + cfg.action_dim;
    CHECK(std::count(head.begin(), head.end(), 1) == expect);
    CHECK_THROWS_AS(net.freeze_mask({static_cast<ModuleId>(9)}), ContractError);
}

TEST_CASE("instruction ids outside the vocabulary are rejected") {
    PolicyConfig cfg;
    PolicyNet net(cfg, 2);
    Rng rng(1);
    Observation o = random_obs(cfg, rng);
    o.instruction = cfg.vocab;
    CHECK_THROWS_AS(net.act(o), ContractError);
}

TEST_CASE("module names round-trip") {
    for (ModuleId m : kModuleOrder) CHECK(module_from_name(module_name(m)) == m);
    CHECK_THROWS_AS(module_from_name("attention"), ContractError);
}
