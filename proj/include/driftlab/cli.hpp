// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "driftlab/pipeline.hpp"

namespace driftlab {

// Exit codes: 0 ok, 1 unexpected, 2 config, 3 dependency, 4 numeric.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitDependency = 3;
inline constexpr int kExitNumeric = 4;

/// Runs one CLI invocation. `args` excludes the program name.
inline int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"module-drift analysis, selective backdoor injection and evaluation "
                 "for a toy modular policy"};
    app.require_subcommand(1);

    std::string config_path;
    std::optional<std::uint64_t> seed_override;
    std::optional<std::string> out_override;
    int jobs = 1;
    app.add_option("--config", config_path, "experiment config file (JSON)")->required();
    app.add_option("--seed", seed_override, "override the config seed");
    app.add_option("--out", out_override, "override the config output directory");
    app.add_option("--jobs", jobs, "worker processes for sweep grids")->check(CLI::PositiveNumber);
    app.fallthrough();

    CLI::App* c_pretrain = app.add_subcommand("pretrain", "train the clean base policy");
    CLI::App* c_analyze = app.add_subcommand("analyze", "module stability analysis over adaptations");
    CLI::App* c_inject = app.add_subcommand("inject", "selective backdoor injection per arm");
    CLI::App* c_user = app.add_subcommand("user-finetune", "clean user-side fine-tuning");
    CLI::App* c_eval = app.add_subcommand("evaluate", "success-rate and attack-rate measurement");
    CLI::App* c_defend = app.add_subcommand("defend", "defense grid evaluation");
    CLI::App* c_sweep = app.add_subcommand("sweep", "grid sweeps over weights|lambda|budget|defense");
    CLI::App* c_report = app.add_subcommand("report", "consolidated tables and plot data");

    std::string dimension;
    int point = -1;
    c_sweep->add_option("dimension", dimension, "weights|lambda|budget|defense")->required();
    c_sweep->add_option("--point", point, "internal: run a single grid point");

    std::vector<const char*> argv;
    argv.push_back("driftlab");
    for (const std::string& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        ExperimentConfig cfg = ExperimentConfig::from_file(config_path);
        if (seed_override) cfg.seed = *seed_override;
        if (out_override) cfg.out_dir = *out_override;
        Pipeline pipe(cfg);
        if (c_pretrain->parsed()) pipe.pretrain();
        if (c_analyze->parsed()) pipe.analyze();
        if (c_inject->parsed()) pipe.inject_arms();
        if (c_user->parsed()) pipe.user_finetune_all();
        if (c_eval->parsed()) pipe.evaluate();
        if (c_defend->parsed()) pipe.defend();
        if (c_sweep->parsed()) pipe.sweep(dimension, jobs, fs::path(config_path), point);
        if (c_report->parsed()) pipe.report();
        return kExitOk;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const DependencyError& e) {
        std::fprintf(stderr, "dependency error: %s\n", e.what());
        return kExitDependency;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitError;
    }
}

}  // namespace driftlab
