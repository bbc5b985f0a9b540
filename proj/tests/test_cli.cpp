// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>

#include "driftlab/cli.hpp"

using namespace driftlab;

namespace {

fs::path fresh_dir(const std::string& tag) {
    const fs::path p = fs::temp_directory_path() / ("driftlab_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

/// Small-everything config so pipeline smoke tests run in seconds.
json tiny_config(const fs::path& out) {
    json j;
    j["seed"] = 11;
    j["out_dir"] = out.string();
    j["policy"] = {{"embed_dim", 12}, {"hidden_dim", 24}};
    j["data"] = {{"pretrain_demos_per_task", 6},
                 {"downstream_demos_per_task", 6},
                 {"probe_episodes", 6},
                 {"probe_samples", 24}};
    j["pretrain"] = {{"steps", 25}, {"batch", 8}};
    j["analyze"] = {{"finetune_steps", 20}, {"adaptations", {"down_a", "down_b"}}};
    j["inject"] = {{"steps", 20}, {"batch", 8}, {"demos_per_task", 6},
                   {"arms", {"insensitive", "sensitive", "badnet"}}};
    j["user_finetune"] = {{"steps", 15}, {"suite", "down_a"}};
    j["eval"] = {{"n_eval", 6}};
    j["defense"] = {{"quality", {1.0, 0.2}}, {"noise", {0.0, 0.05}}, {"audit", {0.0, 0.2}}};
    return j;
}

fs::path write_config(const json& j, const fs::path& dir) {
    const fs::path p = dir / "config.json";
    write_file(p, j.dump(2));
    return p;
}

}  // namespace

TEST_CASE("unknown config keys are rejected") {
    json j;
    j["seed"] = 1;
    j["pretrian"] = {{"steps", 10}};  // typo must not be silently accepted
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);

    json j2;
    j2["pretrain"] = {{"stebs", 10}};
    CHECK_THROWS_AS(ExperimentConfig::from_json(j2), ConfigError);
}

TEST_CASE("config range validation") {
    json j;
    j["analyze"] = {{"budget", 1.7}};
    CHECK_THROWS_AS(ExperimentConfig::from_json(j), ConfigError);
    json j2;
    j2["inject"] = {{"poison_ratio", 0.0}};
    CHECK_THROWS_AS(ExperimentConfig::from_json(j2), ConfigError);
    json j3;
    j3["user_finetune"] = {{"suite", "nope"}};
    CHECK_THROWS_AS(ExperimentConfig::from_json(j3), ConfigError);
    json j4;
    j4["analyze"] = {{"weights", {0.5, 0.5, 0.5}}};
    CHECK_THROWS_AS(ExperimentConfig::from_json(j4), ConfigError);
    CHECK_NOTHROW(ExperimentConfig::from_json(json::object()));
}

TEST_CASE("config hash ignores the output directory") {
    ExperimentConfig a;
    ExperimentConfig b;
    b.out_dir = "elsewhere";
    CHECK(a.config_hash() == b.config_hash());
    b.seed = 2;
    CHECK(a.config_hash() != b.config_hash());
}

TEST_CASE("checkpoints round-trip through 32-bit storage") {
    const fs::path dir = fresh_dir("ckpt");
    PolicyConfig cfg;
    PolicyNet net(cfg, 123);
    const NamedCheckpoint snap = net.snapshot();
    save_checkpoint(dir / "a.ckpt", snap);
    const NamedCheckpoint back = load_checkpoint(dir / "a.ckpt");
    CHECK(back.fingerprint == snap.fingerprint);
    for (int m = 0; m < kModuleCount; ++m) {
        REQUIRE(back.modules[m].size() == snap.modules[m].size());
        for (std::size_t i = 0; i < snap.modules[m].size(); ++i) {
            const double orig = snap.modules[m][i];
            const double rt = back.modules[m][i];
            CHECK(std::fabs(rt - orig) <= std::fabs(orig) * 1e-7 + 1e-30);
        }
    }
    // a second save of the loaded values is byte-identical (f32 fixed point)
    save_checkpoint(dir / "b.ckpt", back);
    CHECK(read_file(dir / "a.ckpt") == read_file(dir / "b.ckpt"));
}

TEST_CASE("datasets round-trip exactly") {
    const fs::path dir = fresh_dir("ds");
    EnvParams params;
    const auto ds = make_dataset(pretrain_suite().tasks, 6,
                                 PoisonSpec{TargetBehavior::freeze, 0.5, 1.0}, 3, params,
                                 "inject");
    save_dataset(dir / "d.ds", ds);
    const DemoDataset back = load_dataset(dir / "d.ds");
    CHECK(back.split == ds.split);
    CHECK(back.poison_ratio == ds.poison_ratio);
    REQUIRE(back.trajectories.size() == ds.trajectories.size());
    for (std::size_t i = 0; i < ds.trajectories.size(); ++i) {
        const Trajectory& a = ds.trajectories[i];
        const Trajectory& b = back.trajectories[i];
        CHECK(a.task_name == b.task_name);
        CHECK(a.poisoned == b.poisoned);
        CHECK(a.success == b.success);
        CHECK(a.trigger_x == b.trigger_x);
        REQUIRE(a.frames.size() == b.frames.size());
        for (std::size_t f = 0; f < a.frames.size(); ++f) {
            CHECK(a.frames[f].obs.image == b.frames[f].obs.image);
            CHECK(a.frames[f].obs.proprio == b.frames[f].obs.proprio);
            CHECK(a.frames[f].obs.instruction == b.frames[f].obs.instruction);
            CHECK(a.frames[f].action == b.frames[f].action);
        }
    }
}

TEST_CASE("manifest dependency checks") {
    const fs::path dir = fresh_dir("manifest");
    Manifest m = Manifest::load_or_create(dir, "hash1");
    CHECK_THROWS_AS(m.require_artifact("pretrain", "checkpoints/base.ckpt", "pretrain"),
                    DependencyError);
    write_file(dir / "artifact.txt", "payload");
    m.record_stage("pretrain", {dir / "artifact.txt"}, 1.0);
    CHECK_NOTHROW(m.require_artifact("pretrain", "artifact.txt", "pretrain"));
    write_file(dir / "artifact.txt", "tampered");
    CHECK_THROWS_AS(m.require_artifact("pretrain", "artifact.txt", "pretrain"), DependencyError);
    CHECK(m.verify_all().size() == 1);

    // a different config hash cannot reuse the same run directory
    CHECK_THROWS_AS(Manifest::load_or_create(dir, "hash2"), DependencyError);
}

TEST_CASE("cli exit codes for config and dependency failures") {
    const fs::path dir = fresh_dir("cli_codes");
    CHECK(run_cli({"pretrain", "--config", (dir / "missing.json").string()}) == kExitConfig);

    json bad = tiny_config(dir / "out");
    bad["nonsense"] = 1;
    const fs::path badp = dir / "bad.json";
    write_file(badp, bad.dump());
    CHECK(run_cli({"pretrain", "--config", badp.string()}) == kExitConfig);

    const fs::path cfgp = write_config(tiny_config(dir / "out"), dir);
    CHECK(run_cli({"evaluate", "--config", cfgp.string()}) == kExitDependency);
    CHECK(run_cli({"report", "--config", cfgp.string()}) == kExitDependency);
}

TEST_CASE("tiny pipeline end to end") {
    const fs::path dir = fresh_dir("pipeline");
    const fs::path out = dir / "out";
    const fs::path cfgp = write_config(tiny_config(out), dir);

    REQUIRE(run_cli({"pretrain", "--config", cfgp.string()}) == kExitOk);
    REQUIRE(run_cli({"analyze", "--config", cfgp.string()}) == kExitOk);
    REQUIRE(run_cli({"inject", "--config", cfgp.string()}) == kExitOk);
    REQUIRE(run_cli({"user-finetune", "--config", cfgp.string()}) == kExitOk);
    REQUIRE(run_cli({"evaluate", "--config", cfgp.string()}) == kExitOk);
    REQUIRE(run_cli({"defend", "--config", cfgp.string()}) == kExitOk);
    REQUIRE(run_cli({"sweep", "weights", "--config", cfgp.string()}) == kExitOk);
    REQUIRE(run_cli({"report", "--config", cfgp.string()}) == kExitOk);

    CHECK(fs::exists(out / "checkpoints" / "base.ckpt"));
    CHECK(fs::exists(out / "checkpoints" / "poisoned_insensitive.ckpt"));
    CHECK(fs::exists(out / "checkpoints" / "user_normal_down_a.ckpt"));
    CHECK(fs::exists(out / "spectrum.json"));
    CHECK(fs::exists(out / "reports" / "metrics.csv"));
    CHECK(fs::exists(out / "reports" / "defense.csv"));
    CHECK(fs::exists(out / "reports" / "module_sensitivity.csv"));
    CHECK(fs::exists(out / "reports" / "persistence.csv"));
    CHECK(fs::exists(out / "reports" / "ablation.csv"));
    CHECK(fs::exists(out / "reports" / "sweep_weights.csv"));
    CHECK(fs::exists(out / "reports" / "trajectories.csv"));
    CHECK(fs::exists(out / "reports" / "saliency_normal.csv"));

    // the weights sweep covers the full quarter-step simplex
    std::istringstream sweep(read_file(out / "reports" / "sweep_weights.csv"));
    std::string line;
    int rows = -1;  // header
    while (std::getline(sweep, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 15);

    // normal-model rows carry no attack rate, attacked trigger rows do
    std::istringstream metrics(read_file(out / "reports" / "metrics.csv"));
    std::getline(metrics, line);
    bool saw_normal = false, saw_attacked = false;
    auto split = [](const std::string& s) {
        std::vector<std::string> f;
        std::string cur;
        for (char c : s) {
            if (c == ',') {
                f.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        f.push_back(cur);
        return f;
    };
    double normal_pre_wo = -1.0, normal_pre_w = -1.0;
    std::vector<std::vector<std::string>> parsed;
    while (std::getline(metrics, line)) {
        if (line.empty()) continue;
        const auto f = split(line);
        REQUIRE(f.size() == 13);
        parsed.push_back(f);
        if (f[0] == "normal" && f[3] == "pre") {
            (f[5] == "1" ? normal_pre_w : normal_pre_wo) = std::stod(f[10]);
        }
    }
    for (const auto& f : parsed) {
        if (f[0] == "normal") {
            saw_normal = true;
            CHECK(f[11].empty());  // no attack rate column for the clean model
        }
        if (f[0] == "poisoned-base" && f[2] == "insensitive" && f[5] == "1") {
            saw_attacked = true;
            // the attack rate is defined whenever the clean denominators are
            if (normal_pre_wo > 0.0 && normal_pre_w > 0.0) CHECK_FALSE(f[11].empty());
        }
    }
    CHECK(saw_normal);
    CHECK(saw_attacked);

    // report regeneration is byte-identical
    const std::string persistence = read_file(out / "reports" / "persistence.csv");
    const std::string ablation = read_file(out / "reports" / "ablation.csv");
    REQUIRE(run_cli({"report", "--config", cfgp.string()}) == kExitOk);
    CHECK(read_file(out / "reports" / "persistence.csv") == persistence);
    CHECK(read_file(out / "reports" / "ablation.csv") == ablation);

    // defense grid: 2 quality + 2 noise + 2 audit cells, two rows per cell
    std::istringstream defense(read_file(out / "reports" / "defense.csv"));
    std::getline(defense, line);
    int defense_rows = 0;
    while (std::getline(defense, line))
        if (!line.empty()) ++defense_rows;
    CHECK(defense_rows == 12);

    // stale upstream artifacts are detected rather than silently regenerated
    write_file(out / "checkpoints" / "base.ckpt", "corrupted");
    CHECK(run_cli({"evaluate", "--config", cfgp.string()}) == kExitDependency);
}

TEST_CASE("sweep worker fan-out through the real binary") {
#ifdef DRIFTLAB_BIN
    const fs::path dir = fresh_dir("jobs");
    const fs::path out = dir / "out";
    json cfg = tiny_config(out);
    cfg["sweep"] = {{"lambda", {0.5, 1.0}}};
    cfg["inject"] = {{"steps", 8}, {"batch", 8}, {"demos_per_task", 6},
                     {"arms", {"insensitive"}}};
    cfg["user_finetune"] = {{"steps", 6}, {"suite", "down_a"}};
    cfg["eval"] = {{"n_eval", 4}};
    const fs::path cfgp = write_config(cfg, dir);
    const std::string bin = DRIFTLAB_BIN;
    auto run = [&](const std::string& args) {
        return std::system((bin + " " + args + " >/dev/null 2>&1").c_str());
    };
    REQUIRE(run("pretrain --config " + cfgp.string()) == 0);
    REQUIRE(run("analyze --config " + cfgp.string()) == 0);
    REQUIRE(run("inject --config " + cfgp.string()) == 0);
    REQUIRE(run("user-finetune --config " + cfgp.string()) == 0);
    REQUIRE(run("sweep lambda --jobs 2 --config " + cfgp.string()) == 0);
    std::istringstream sweep(read_file(out / "reports" / "sweep_lambda.csv"));
    std::string line;
    std::getline(sweep, line);
    CHECK(line == "lambda,sr_wo,sr_w,asr");
    int rows = 0;
    while (std::getline(sweep, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 2);
#endif
}
