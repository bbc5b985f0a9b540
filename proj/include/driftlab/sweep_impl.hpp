// SPDX-License-Identifier: Apache-2.0
#pragma once

// Sweep command implementation; lives behind pipeline.hpp.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>

#include "driftlab/pipeline.hpp"

namespace driftlab {

namespace detail {

/// Runs grid points as worker processes, at most `jobs` at a time. Each
/// worker is a fresh invocation of this binary scoped to a single point.
inline void fan_out_points(const fs::path& config_file, const std::string& out_dir,
                           const std::string& dimension, int n_points, int jobs) {
    std::vector<pid_t> running;
    auto reap_one = [&]() {
        int status = 0;
        const pid_t pid = waitpid(-1, &status, 0);
        if (pid <= 0 || !WIFEXITED(status) || WEXITSTATUS(status) != 0)
            throw Error("sweep worker failed for dimension " + dimension);
        running.erase(std::remove(running.begin(), running.end(), pid), running.end());
    };
    for (int i = 0; i < n_points; ++i) {
        while (static_cast<int>(running.size()) >= jobs) reap_one();
        const pid_t pid = fork();
        if (pid < 0) throw Error("sweep: fork failed");
        if (pid == 0) {
            const std::string point = std::to_string(i);
            execl("/proc/self/exe", "driftlab", "sweep", dimension.c_str(), "--config",
                  config_file.string().c_str(), "--out", out_dir.c_str(), "--point",
                  point.c_str(), static_cast<char*>(nullptr));
            std::perror("execl");
            _exit(127);
        }
        running.push_back(pid);
    }
    while (!running.empty()) reap_one();
}

}  // namespace detail

inline std::string sweep_header(const std::string& dim) {
    if (dim == "lambda") return "lambda,sr_wo,sr_w,asr";
    return "budget,selected,sr_wo,sr_w,asr";
}

inline std::vector<std::string> Pipeline::run_sweep_point(const std::string& dimension,
                                                          int point) {
    const SpectrumFile spec =
        spectrum_from_json(json::parse(read_file(require("analyze", paths_.spectrum()))));
    const NamedCheckpoint base = load_checkpoint(require("pretrain", paths_.base_ckpt()));
    const NamedCheckpoint normal_user =
        load_checkpoint(require("user-finetune", paths_.user_ckpt("normal", cfg_.user_suite)));

    double lambda = cfg_.lambda;
    std::vector<ModuleId> target = to_module_ids(spec.spectrum.selected);
    std::string lead;
    if (dimension == "lambda") {
        if (point < 0 || point >= static_cast<int>(cfg_.sweep_lambda.size()))
            throw ConfigError("lambda sweep point out of range");
        lambda = cfg_.sweep_lambda[static_cast<std::size_t>(point)];
        lead = fmt_num(lambda);
    } else {
        if (point < 0 || point >= static_cast<int>(cfg_.sweep_budget.size()))
            throw ConfigError("budget sweep point out of range");
        const double budget = cfg_.sweep_budget[static_cast<std::size_t>(point)];
        target = to_module_ids(select_stable(spec.spectrum.score, spec.spectrum.share, budget));
        std::string names;
        for (ModuleId m : target) {
            if (!names.empty()) names += "+";
            names += module_name(m);
        }
        lead = fmt_num(budget) + "," + names;
    }

    const TaskSuite pts = pretrain_suite();
    DemoDataset poison_data = make_dataset(
        pts.tasks, total_episodes(pts, cfg_.inject_demos_per_task),
        PoisonSpec{cfg_.behavior, cfg_.poison_ratio, lambda},
        derive_seed(cfg_.seed, "inject-data"), cfg_.env, "inject-selective");

    InjectionPlan plan;
    plan.poison = PoisonSpec{cfg_.behavior, cfg_.poison_ratio, lambda};
    plan.steps = cfg_.inject_steps;
    plan.batch = cfg_.inject_batch;
    plan.opt = cfg_.inject_opt;
    plan.seed = derive_seed(cfg_.seed, "sweep-" + dimension + "-" + std::to_string(point));
    plan.target_modules = target;
    const InjectResult res = inject(cfg_.policy, base, plan, poison_data);

    const TaskSuite user_suite = suite_by_name(cfg_.user_suite);
    DemoDataset user_data = make_clean_dataset(
        user_suite.tasks, total_episodes(user_suite, cfg_.downstream_demos_per_task),
        derive_seed(cfg_.seed, "user-data-" + cfg_.user_suite), cfg_.env,
        "downstream-" + cfg_.user_suite);
    const NamedCheckpoint tuned =
        user_finetune(cfg_.policy, res.checkpoint, user_data, cfg_.user_steps,
                      derive_seed(cfg_.seed, "user-insensitive"), cfg_.user_opt);

    PolicyNet net(cfg_.policy, cfg_.seed);
    net.restore(tuned);
    PolicyNet normal_net(cfg_.policy, cfg_.seed);
    normal_net.restore(normal_user);
    const std::uint64_t eval_seed = derive_seed(cfg_.seed, "eval-post");
    const double n_wo = rollout_sr(normal_net, user_suite, cfg_.n_eval, false, eval_seed, cfg_.env).sr;
    const double n_w = rollout_sr(normal_net, user_suite, cfg_.n_eval, true, eval_seed, cfg_.env).sr;
    const double a_wo = rollout_sr(net, user_suite, cfg_.n_eval, false, eval_seed, cfg_.env).sr;
    const double a_w = rollout_sr(net, user_suite, cfg_.n_eval, true, eval_seed, cfg_.env).sr;
    const auto a = asr(a_w, n_w, a_wo, n_wo);
    return {lead + "," + fmt_num(a_wo) + "," + fmt_num(a_w) + "," + (a ? fmt_num(*a) : "")};
}

inline void Pipeline::sweep(const std::string& dimension, int jobs,
                            const std::optional<fs::path>& config_file, int only_point) {
    const auto t0 = now();
    if (dimension == "weights") {
        const SpectrumFile spec =
            spectrum_from_json(json::parse(read_file(require("analyze", paths_.spectrum()))));
        const auto grid = simplex_grid(cfg_.weight_divisions);
        const auto rows = weight_sweep(spec.aggregated, spec.spectrum.share, grid, cfg_.budget);
        std::vector<std::string> lines;
        for (const WeightSweepRow& r : rows) {
            std::string sel;
            for (int m : r.selected) {
                if (!sel.empty()) sel += "+";
                sel += module_name(module_from_index(m));
            }
            std::string order;
            for (int m : r.order) {
                if (!order.empty()) order += ">";
                order += module_name(module_from_index(m));
            }
            std::string line = fmt_num(r.weights.alpha) + "," + fmt_num(r.weights.beta) + "," +
                               fmt_num(r.weights.gamma);
            for (double s : r.score) line += "," + fmt_num(s);
            line += "," + order + "," + sel;
            lines.push_back(line);
        }
        write_csv(paths_.sweep_csv("weights"),
                  "alpha,beta,gamma,s_vision_encoder,s_vision_projector,s_backbone,"
                  "s_proprio_projector,s_action_head,order,selected",
                  lines);
        manifest_->record_stage("sweep-weights", {paths_.sweep_csv("weights")}, ms_since(t0));
        return;
    }
    if (dimension == "defense") {
        std::vector<std::string> rows;
        for (const EvalRow& r : defense_rows()) rows.push_back(r.csv());
        write_csv(paths_.sweep_csv("defense"), kMetricsHeader, rows);
        manifest_->record_stage("sweep-defense", {paths_.sweep_csv("defense")}, ms_since(t0));
        return;
    }
    if (dimension != "lambda" && dimension != "budget")
        throw ConfigError("unknown sweep dimension '" + dimension +
                          "' (expected weights|lambda|budget|defense)");

    const int n_points = dimension == "lambda" ? static_cast<int>(cfg_.sweep_lambda.size())
                                               : static_cast<int>(cfg_.sweep_budget.size());
    if (only_point >= 0) {
        // worker mode: compute one point, write its fragment, no manifest update
        write_csv(paths_.sweep_point_csv(dimension, only_point), sweep_header(dimension),
                  run_sweep_point(dimension, only_point));
        return;
    }
    if (jobs > 1) {
        if (!config_file)
            throw ConfigError("sweep --jobs needs the config file path to spawn workers");
        detail::fan_out_points(*config_file, paths_.out.string(), dimension, n_points, jobs);
    } else {
        for (int i = 0; i < n_points; ++i)
            write_csv(paths_.sweep_point_csv(dimension, i), sweep_header(dimension),
                      run_sweep_point(dimension, i));
    }
    // consolidate fragments in grid order
    std::vector<std::string> rows;
    for (int i = 0; i < n_points; ++i) {
        std::istringstream in(read_file(paths_.sweep_point_csv(dimension, i)));
        std::string line;
        std::getline(in, line);  // header
        while (std::getline(in, line))
            if (!line.empty()) rows.push_back(line);
    }
    write_csv(paths_.sweep_csv(dimension), sweep_header(dimension), rows);
    manifest_->record_stage("sweep-" + dimension, {paths_.sweep_csv(dimension)}, ms_since(t0));
}

}  // namespace driftlab
