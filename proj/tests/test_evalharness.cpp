// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "driftlab/evalharness.hpp"

using namespace driftlab;

TEST_CASE("asr worked cases") {
    CHECK(*asr(0.8, 0.8, 0.9, 0.9) == Catch::Approx(0.0).margin(1e-9));
    CHECK(*asr(0.0, 0.8, 0.9, 0.9) == Catch::Approx(100.0).margin(1e-9));
    CHECK(*asr(0.2, 0.8, 0.9, 0.9) == Catch::Approx(75.0).margin(1e-9));
}

TEST_CASE("asr clamps and degenerates as specified") {
    // a trigger that improves success floors at zero rather than going negative
    CHECK(*asr(0.9, 0.5, 0.9, 0.9) == 0.0);
    // better-than-clean stealth cannot push past 100
    CHECK(*asr(0.0, 0.5, 1.0, 0.5) == 100.0);
    CHECK_FALSE(asr(0.5, 0.0, 0.5, 0.5).has_value());
    CHECK_FALSE(asr(0.5, 0.5, 0.5, 0.0).has_value());
    CHECK_THROWS_AS(asr(1.2, 0.5, 0.5, 0.5), ContractError);
    CHECK_THROWS_AS(asr(0.5, 0.5, -0.1, 0.5), ContractError);
}

TEST_CASE("asr monotonicity in the attacked success rates") {
    Rng rng(17);
    for (int i = 0; i < 200; ++i) {
        const double w_clean = rng.uniform(0.05, 1.0);
        const double wo_clean = rng.uniform(0.05, 1.0);
        const double w_atk = rng.uniform(0.0, 1.0);
        const double wo_atk = rng.uniform(0.0, 1.0);
        const double base = *asr(w_atk, w_clean, wo_atk, wo_clean);
        const double dw = rng.uniform(0.0, 1.0 - w_atk);
        CHECK(*asr(w_atk + dw, w_clean, wo_atk, wo_clean) <= base + 1e-12);
        const double dwo = rng.uniform(0.0, 1.0 - wo_atk);
        CHECK(*asr(w_atk, w_clean, wo_atk + dwo, wo_clean) >= base - 1e-12);
    }
}

TEST_CASE("expert policy scores a perfect rollout success rate") {
    EnvParams params;
    PolicyFn expert = [](const Observation&, const EnvState& s) { return expert_action(s); };
    const auto res = rollout_sr(expert, pretrain_suite(), 60, false, 99, params);
    CHECK(res.sr == 1.0);
    CHECK(res.episodes.size() == 60);
}

TEST_CASE("a frozen agent never succeeds") {
    EnvParams params;
    PolicyFn zero = [](const Observation&, const EnvState&) {
        return std::vector<double>{0, 0, 0, 0};
    };
    TaskSuite reach{"reach_only", {pretrain_suite().tasks[0], pretrain_suite().tasks[1]}};
    CHECK(rollout_sr(zero, reach, 60, false, 7, params).sr == 0.0);
    CHECK(rollout_sr(zero, pretrain_suite(), 60, true, 7, params).sr == 0.0);
}

TEST_CASE("rollouts are reproducible per seed") {
    EnvParams params;
    PolicyConfig cfg;
    PolicyNet net(cfg, 33);
    const auto a = rollout_sr(net, pretrain_suite(), 30, true, 5, params);
    const auto b = rollout_sr(net, pretrain_suite(), 30, true, 5, params);
    REQUIRE(a.episodes.size() == b.episodes.size());
    for (std::size_t i = 0; i < a.episodes.size(); ++i) {
        CHECK(a.episodes[i].seed == b.episodes[i].seed);
        CHECK(a.episodes[i].success == b.episodes[i].success);
        CHECK(a.episodes[i].steps == b.episodes[i].steps);
    }
    CHECK_THROWS_AS(rollout_sr(net, pretrain_suite(), 0, false, 1, params), ContractError);
}

TEST_CASE("compression quantizer bounds, binarization and idempotence") {
    CHECK(compress_levels(1.0) == 255);
    CHECK(compress_levels(0.001) == 2);
    CHECK_THROWS_AS(compress_levels(0.0), ContractError);
    CHECK_THROWS_AS(compress_levels(1.5), ContractError);

    Rng rng(3);
    std::vector<float> img(768);
    for (float& v : img) v = static_cast<float>(rng.uniform());
    std::vector<float> once = img;
    defend_compress(once, 1.0);
    for (std::size_t i = 0; i < img.size(); ++i)
        CHECK(std::fabs(once[i] - img[i]) <= 1.0f / 254.0f);
    std::vector<float> twice = once;
    defend_compress(twice, 1.0);
    CHECK(twice == once);

    std::vector<float> bin = img;
    defend_compress(bin, 0.001);
    for (float v : bin) CHECK((v == 0.0f || v == 1.0f));
}

TEST_CASE("gaussian defense: identity at zero, determinism, calibrated std") {
    std::vector<float> img(999999, 0.5f);
    std::vector<float> copy = img;
    defend_noise(copy, 0.0, 1);
    CHECK(copy == img);

    std::vector<float> a = img, b = img;
    defend_noise(a, 0.08, 42);
    defend_noise(b, 0.08, 42);
    CHECK(a == b);

    double mean = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - 0.5;
    mean /= static_cast<double>(a.size());
    double var = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = (a[i] - 0.5) - mean;
        var += d * d;
    }
    var /= static_cast<double>(a.size());
    CHECK(std::fabs(std::sqrt(var) - 0.08) / 0.08 < 0.02);
    CHECK_THROWS_AS(defend_noise(a, -0.1, 1), ContractError);
}

TEST_CASE("audit: identity at ratio zero and full restore at ratio one") {
    EnvParams params;
    PolicyConfig cfg;
    PolicyNet base_net(cfg, 3);
    const NamedCheckpoint received = base_net.snapshot();
    PolicyNet user_net(cfg, 3);
    for (double& v : user_net.params()) v += 0.01;
    const NamedCheckpoint user = user_net.snapshot();
    PolicyNet ref_net(cfg, 77);
    const NamedCheckpoint reference = ref_net.snapshot();
    const auto repair = make_clean_dataset(pretrain_suite().tasks, 4, 2, params, "repair");

    const auto untouched =
        defend_audit(cfg, received, user, nullptr, 0.0, AuditRanking::descending_drift, repair, 50, 1);
    CHECK(untouched.modules == user.modules);

    const auto restored = defend_audit(cfg, received, user, &reference, 1.0,
                                       AuditRanking::descending_drift, repair, 0, 1);
    CHECK(restored.modules == reference.modules);

    CHECK_THROWS_AS(defend_audit(cfg, received, user, nullptr, 1.5,
                                 AuditRanking::descending_drift, repair, 0, 1),
                    ConfigError);
}

TEST_CASE("audit resets exactly the least-drifted module under ascending ranking") {
    PolicyConfig cfg;
    PolicyNet net(cfg, 5);
    const NamedCheckpoint received = net.snapshot();
    // vision_encoder (the bulk of the parameters) drifts least; everything
    // else drifts progressively more
    NamedCheckpoint user = received;
    const double bump[kModuleCount] = {0.001, 0.5, 0.6, 0.7, 0.8};
    for (int m = 0; m < kModuleCount; ++m)
        for (double& v : user.modules[m]) v += bump[m];
    PolicyNet ref_net(cfg, 99);
    const NamedCheckpoint reference = ref_net.snapshot();

    EnvParams params;
    const auto repair = make_clean_dataset(pretrain_suite().tasks, 4, 2, params, "repair");
    const auto defended = defend_audit(cfg, received, user, &reference, 0.05,
                                       AuditRanking::ascending_drift, repair, 0, 1);
    CHECK(defended.modules[0] == reference.modules[0]);       // reset
    for (int m = 1; m < kModuleCount; ++m) CHECK(defended.modules[m] == user.modules[m]);
}

TEST_CASE("audit ranking directions and reference choice") {
    PolicyConfig cfg;
    PolicyNet net(cfg, 5);
    const NamedCheckpoint received = net.snapshot();
    NamedCheckpoint user = received;
    const double bump[kModuleCount] = {0.001, 0.5, 0.6, 0.7, 0.8};
    for (int m = 0; m < kModuleCount; ++m)
        for (double& v : user.modules[m]) v += bump[m];
    EnvParams params;
    const auto repair = make_clean_dataset(pretrain_suite().tasks, 4, 2, params, "repair");

    // descending ranking resets the most-drifted module first (action_head,
    // then onward until the parameter budget is reached)
    const auto defended = defend_audit(cfg, received, user, nullptr, 0.01,
                                       AuditRanking::descending_drift, repair, 0, 7);
    CHECK(defended.modules[4] != user.modules[4]);
    CHECK(defended.modules[0] == user.modules[0]);
    // without a public reference the reset re-seeds rather than restores
    CHECK(defended.modules[4] != received.modules[4]);
}

TEST_CASE("saliency of a constant-output network is exactly zero") {
    PolicyConfig cfg;
    PolicyNet net(cfg, 8);
    for (double& v : net.module_params(ModuleId::action_head)) v = 0.0;
    Observation obs;
    obs.image.assign(static_cast<std::size_t>(cfg.image_len()), 0.4f);
    obs.proprio = {0.2, 0.3, 0.5};
    obs.instruction = 1;
    const auto heat = trigger_saliency(net, obs);
    REQUIRE(heat.size() == static_cast<std::size_t>(cfg.grid * cfg.grid));
    for (double v : heat) CHECK(v == 0.0);
}

TEST_CASE("saliency is deterministic and normalized") {
    PolicyConfig cfg;
    PolicyNet net(cfg, 9);
    Observation obs;
    obs.image.assign(static_cast<std::size_t>(cfg.image_len()), 0.3f);
    paint_block(obs.image, cfg.grid, 6, 6, 2, kTriggerColor);
    obs.proprio = {0.6, 0.2, 0.5};
    obs.instruction = 2;
    const auto a = trigger_saliency(net, obs);
    const auto b = trigger_saliency(net, obs);
    CHECK(a == b);
    const double mx = *std::max_element(a.begin(), a.end());
    CHECK(mx == Catch::Approx(1.0));
    for (double v : a) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("trajectory export shapes and determinism") {
    EnvParams params;
    PolicyConfig cfg;
    PolicyNet a(cfg, 4);
    PolicyNet b(cfg, 4);
    const TaskSpec task = pretrain_suite().tasks[0];
    const auto traces = export_trajectories({&a, &b}, {"a", "b"}, task, 17, true, params);
    REQUIRE(traces.size() == 2);
    REQUIRE(traces[0].positions.size() == traces[1].positions.size());
    for (std::size_t i = 0; i < traces[0].positions.size(); ++i) {
        CHECK(traces[0].positions[i].x == traces[1].positions[i].x);
        CHECK(traces[0].positions[i].y == traces[1].positions[i].y);
    }
    CHECK(traces[0].positions.size() >= 1);
    CHECK(traces[0].positions.size() <= static_cast<std::size_t>(params.horizon));
    CHECK_THROWS_AS(export_trajectories({&a}, {"a", "b"}, task, 17, true, params), ContractError);
}

TEST_CASE("user fine-tuning contracts") {
    EnvParams params;
    PolicyConfig cfg;
    PolicyNet net(cfg, 21);
    const NamedCheckpoint start = net.snapshot();
    const auto clean = make_clean_dataset(pretrain_suite().tasks, 6, 9, params, "down");

    const NamedCheckpoint zero_steps = user_finetune(cfg, start, clean, 0, 1);
    CHECK(zero_steps.modules == start.modules);

    const NamedCheckpoint a = user_finetune(cfg, start, clean, 8, 5);
    const NamedCheckpoint b = user_finetune(cfg, start, clean, 8, 5);
    CHECK(a.modules == b.modules);
    CHECK(a.modules != start.modules);

    const auto poisoned = make_dataset(pretrain_suite().tasks, 6,
                                       PoisonSpec{TargetBehavior::freeze, 0.5, 1.0}, 9, params);
    CHECK_THROWS_AS(user_finetune(cfg, start, poisoned, 4, 1), ContractError);
}
