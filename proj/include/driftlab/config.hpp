// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "driftlab/drift.hpp"
#include "driftlab/evalharness.hpp"
#include "driftlab/io.hpp"

namespace driftlab {

namespace detail {

/// Rejects keys the schema does not know; silent typos are config errors.
inline void check_keys(const json& obj, const std::string& where,
                       std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) throw ConfigError("config section '" + where + "' must be an object");
    for (const auto& [key, _] : obj.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || key == a;
        if (!ok) throw ConfigError("unknown config key '" + where + "." + key + "'");
    }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
    if (!obj.contains(key)) return fallback;
    return obj.at(key).get<T>();
}

inline OptimizerConfig parse_optimizer(const json& obj, const std::string& where,
                                       OptimizerConfig def) {
    if (obj.is_null()) return def;
    check_keys(obj, where, {"kind", "lr", "momentum", "beta1", "beta2", "eps"});
    OptimizerConfig out = def;
    if (obj.contains("kind")) out.kind = opt_kind_from(obj.at("kind").get<std::string>());
    out.lr = get_or(obj, "lr", out.lr);
    out.momentum = get_or(obj, "momentum", out.momentum);
    out.beta1 = get_or(obj, "beta1", out.beta1);
    out.beta2 = get_or(obj, "beta2", out.beta2);
    out.eps = get_or(obj, "eps", out.eps);
    if (out.lr <= 0.0) throw ConfigError(where + ": learning rate must be positive");
    return out;
}

inline json optimizer_json(const OptimizerConfig& o) {
    return {{"kind", opt_kind_name(o.kind)}, {"lr", o.lr},     {"momentum", o.momentum},
            {"beta1", o.beta1},              {"beta2", o.beta2}, {"eps", o.eps}};
}

}  // namespace detail

/// Everything an end-to-end run needs, with defaults for the standard toy
/// setup. Parsed strictly: unknown keys are errors.
struct ExperimentConfig {
    std::uint64_t seed = 1;
    std::string out_dir = "runs/default";

    PolicyConfig policy{};
    EnvParams env{};

    // data generation
    int pretrain_demos_per_task = 500;
    int downstream_demos_per_task = 200;
    int probe_episodes = 64;
    int probe_samples = 256;

    // pretraining
    int pretrain_steps = 3000;
    int pretrain_batch = 32;
    OptimizerConfig pretrain_opt{OptKind::adam, 1e-3};

    // stage-1 analysis
    int analyze_finetune_steps = 1000;
    FusionWeights weights{};
    double budget = 0.2;
    std::vector<std::string> adaptations = {"down_a", "down_b", "down_c", "down_d", "down_mix"};

    // stage-2 injection
    int inject_steps = 2000;
    int inject_batch = 32;
    int inject_demos_per_task = 200;
    OptimizerConfig inject_opt{OptKind::adam, 1e-4};
    double lambda = 1.0;
    double poison_ratio = 0.3;
    TargetBehavior behavior = TargetBehavior::freeze;
    std::vector<std::string> arms = {"insensitive", "sensitive", "full", "badnet"};

    // stage-3 user fine-tuning
    int user_steps = 1500;
    OptimizerConfig user_opt{OptKind::adam, 1e-3};
    std::string user_suite = "down_a";

    // evaluation
    int n_eval = 200;
    std::vector<std::string> eval_phases = {"pre", "post"};

    // defenses
    std::string defense_model = "insensitive";
    std::vector<double> defense_quality = {1.0, 0.8, 0.6, 0.4, 0.2};
    std::vector<double> defense_noise = {0.0, 0.02, 0.04, 0.06, 0.08};
    std::vector<double> defense_audit = {0.0, 0.05, 0.10, 0.15, 0.20};
    AuditRanking audit_ranking = AuditRanking::descending_drift;

    // sweeps
    std::vector<double> sweep_lambda = {0.25, 0.5, 1.0, 2.0, 4.0};
    std::vector<double> sweep_budget = {0.05, 0.1, 0.2, 0.3, 0.5};
    int weight_divisions = 4;

    void validate() const {
        policy.validate();
        weights.validate();
        if (policy.grid != env.grid) throw ConfigError("policy.grid must equal env.grid");
        if (policy.action_dim != 4) throw ConfigError("environment actions require action_dim=4");
        if (pretrain_demos_per_task <= 0 || downstream_demos_per_task <= 0 ||
            inject_demos_per_task <= 0 || probe_episodes <= 0)
            throw ConfigError("demo counts must be positive");
        if (probe_samples < 1) throw ConfigError("probe_samples must be >= 1");
        if (pretrain_steps < 0 || analyze_finetune_steps < 0 || inject_steps < 0 || user_steps < 0)
            throw ConfigError("step counts must be non-negative");
        if (pretrain_batch <= 0 || inject_batch <= 0) throw ConfigError("batch sizes must be positive");
        if (!(budget > 0.0 && budget <= 1.0)) throw ConfigError("budget must be in (0, 1]");
        if (!(poison_ratio > 0.0 && poison_ratio <= 1.0))
            throw ConfigError("poison_ratio must be in (0, 1]");
        if (lambda <= 0.0) throw ConfigError("lambda must be positive");
        if (n_eval < 1) throw ConfigError("n_eval must be >= 1");
        for (const std::string& a : adaptations) suite_by_name(a);
        suite_by_name(user_suite);
        for (const std::string& arm : arms)
            if (arm != "insensitive" && arm != "sensitive" && arm != "full" && arm != "badnet" &&
                arm != "advvla")
                throw ConfigError("unknown injection arm '" + arm + "'");
        for (const std::string& p : eval_phases)
            if (p != "pre" && p != "post") throw ConfigError("unknown eval phase '" + p + "'");
        for (double q : defense_quality)
            if (!(q > 0.0 && q <= 1.0)) throw ConfigError("defense quality must be in (0, 1]");
        for (double e : defense_noise)
            if (e < 0.0) throw ConfigError("defense noise must be non-negative");
        for (double r : defense_audit)
            if (r < 0.0 || r > 1.0) throw ConfigError("audit ratio must be in [0, 1]");
    }

    static ExperimentConfig from_json(const json& j) {
        ExperimentConfig c;
        detail::check_keys(j, "config",
                           {"seed", "out_dir", "policy", "env", "data", "pretrain", "analyze",
                            "inject", "user_finetune", "eval", "defense", "sweep"});
        c.seed = detail::get_or<std::uint64_t>(j, "seed", c.seed);
        c.out_dir = detail::get_or<std::string>(j, "out_dir", c.out_dir);
        if (j.contains("policy")) {
            const json& p = j.at("policy");
            detail::check_keys(p, "policy",
                               {"grid", "patch", "embed_dim", "hidden_dim", "proprio_dim",
                                "action_dim", "vocab", "instr_dim"});
            c.policy.grid = detail::get_or(p, "grid", c.policy.grid);
            c.policy.patch = detail::get_or(p, "patch", c.policy.patch);
            c.policy.embed_dim = detail::get_or(p, "embed_dim", c.policy.embed_dim);
            c.policy.hidden_dim = detail::get_or(p, "hidden_dim", c.policy.hidden_dim);
            c.policy.proprio_dim = detail::get_or(p, "proprio_dim", c.policy.proprio_dim);
            c.policy.action_dim = detail::get_or(p, "action_dim", c.policy.action_dim);
            c.policy.vocab = detail::get_or(p, "vocab", c.policy.vocab);
            c.policy.instr_dim = detail::get_or(p, "instr_dim", c.policy.instr_dim);
            c.env.grid = c.policy.grid;
        }
        if (j.contains("env")) {
            const json& e = j.at("env");
            detail::check_keys(e, "env", {"horizon", "min_distractors", "max_distractors"});
            c.env.horizon = detail::get_or(e, "horizon", c.env.horizon);
            c.env.min_distractors = detail::get_or(e, "min_distractors", c.env.min_distractors);
            c.env.max_distractors = detail::get_or(e, "max_distractors", c.env.max_distractors);
        }
        if (j.contains("data")) {
            const json& d = j.at("data");
            detail::check_keys(d, "data",
                               {"pretrain_demos_per_task", "downstream_demos_per_task",
                                "probe_episodes", "probe_samples"});
            c.pretrain_demos_per_task =
                detail::get_or(d, "pretrain_demos_per_task", c.pretrain_demos_per_task);
            c.downstream_demos_per_task =
                detail::get_or(d, "downstream_demos_per_task", c.downstream_demos_per_task);
            c.probe_episodes = detail::get_or(d, "probe_episodes", c.probe_episodes);
            c.probe_samples = detail::get_or(d, "probe_samples", c.probe_samples);
        }
        if (j.contains("pretrain")) {
            const json& p = j.at("pretrain");
            detail::check_keys(p, "pretrain", {"steps", "batch", "optimizer"});
            c.pretrain_steps = detail::get_or(p, "steps", c.pretrain_steps);
            c.pretrain_batch = detail::get_or(p, "batch", c.pretrain_batch);
            if (p.contains("optimizer"))
                c.pretrain_opt = detail::parse_optimizer(p.at("optimizer"), "pretrain.optimizer",
                                                         c.pretrain_opt);
        }
        if (j.contains("analyze")) {
            const json& a = j.at("analyze");
            detail::check_keys(a, "analyze", {"finetune_steps", "weights", "budget", "adaptations"});
            c.analyze_finetune_steps = detail::get_or(a, "finetune_steps", c.analyze_finetune_steps);
            if (a.contains("weights")) {
                const auto w = a.at("weights").get<std::vector<double>>();
                if (w.size() != 3) throw ConfigError("analyze.weights needs 3 entries");
                c.weights = FusionWeights{w[0], w[1], w[2]};
            }
            c.budget = detail::get_or(a, "budget", c.budget);
            c.adaptations = detail::get_or(a, "adaptations", c.adaptations);
        }
        if (j.contains("inject")) {
            const json& i = j.at("inject");
            detail::check_keys(i, "inject",
                               {"steps", "batch", "demos_per_task", "optimizer", "lambda",
                                "poison_ratio", "behavior", "arms"});
            c.inject_steps = detail::get_or(i, "steps", c.inject_steps);
            c.inject_batch = detail::get_or(i, "batch", c.inject_batch);
            c.inject_demos_per_task = detail::get_or(i, "demos_per_task", c.inject_demos_per_task);
            if (i.contains("optimizer"))
                c.inject_opt =
                    detail::parse_optimizer(i.at("optimizer"), "inject.optimizer", c.inject_opt);
            c.lambda = detail::get_or(i, "lambda", c.lambda);
            c.poison_ratio = detail::get_or(i, "poison_ratio", c.poison_ratio);
            if (i.contains("behavior"))
                c.behavior = target_behavior_from(i.at("behavior").get<std::string>());
            c.arms = detail::get_or(i, "arms", c.arms);
        }
        if (j.contains("user_finetune")) {
            const json& u = j.at("user_finetune");
            detail::check_keys(u, "user_finetune", {"steps", "optimizer", "suite"});
            c.user_steps = detail::get_or(u, "steps", c.user_steps);
            if (u.contains("optimizer"))
                c.user_opt =
                    detail::parse_optimizer(u.at("optimizer"), "user_finetune.optimizer", c.user_opt);
            c.user_suite = detail::get_or(u, "suite", c.user_suite);
        }
        if (j.contains("eval")) {
            const json& e = j.at("eval");
            detail::check_keys(e, "eval", {"n_eval", "phases"});
            c.n_eval = detail::get_or(e, "n_eval", c.n_eval);
            c.eval_phases = detail::get_or(e, "phases", c.eval_phases);
        }
        if (j.contains("defense")) {
            const json& d = j.at("defense");
            detail::check_keys(d, "defense", {"model", "quality", "noise", "audit", "ranking"});
            c.defense_model = detail::get_or(d, "model", c.defense_model);
            c.defense_quality = detail::get_or(d, "quality", c.defense_quality);
            c.defense_noise = detail::get_or(d, "noise", c.defense_noise);
            c.defense_audit = detail::get_or(d, "audit", c.defense_audit);
            if (d.contains("ranking"))
                c.audit_ranking = audit_ranking_from(d.at("ranking").get<std::string>());
        }
        if (j.contains("sweep")) {
            const json& s = j.at("sweep");
            detail::check_keys(s, "sweep", {"lambda", "budget", "weight_divisions"});
            c.sweep_lambda = detail::get_or(s, "lambda", c.sweep_lambda);
            c.sweep_budget = detail::get_or(s, "budget", c.sweep_budget);
            c.weight_divisions = detail::get_or(s, "weight_divisions", c.weight_divisions);
        }
        c.validate();
        return c;
    }

    static ExperimentConfig from_file(const fs::path& path) {
        json j;
        try {
            j = json::parse(read_file(path));
        } catch (const json::parse_error& e) {
            throw ConfigError("config " + path.string() + ": " + e.what());
        } catch (const IoError& e) {
            throw ConfigError(e.what());
        }
        return from_json(j);
    }

    /// Canonical JSON of the fully defaulted config; its hash keys the manifest.
    json to_json() const {
        json j;
        j["seed"] = seed;
        j["out_dir"] = out_dir;
        j["policy"] = {{"grid", policy.grid},           {"patch", policy.patch},
                       {"embed_dim", policy.embed_dim}, {"hidden_dim", policy.hidden_dim},
                       {"proprio_dim", policy.proprio_dim}, {"action_dim", policy.action_dim},
                       {"vocab", policy.vocab},         {"instr_dim", policy.instr_dim}};
        j["env"] = {{"horizon", env.horizon},
                    {"min_distractors", env.min_distractors},
                    {"max_distractors", env.max_distractors}};
        j["data"] = {{"pretrain_demos_per_task", pretrain_demos_per_task},
                     {"downstream_demos_per_task", downstream_demos_per_task},
                     {"probe_episodes", probe_episodes},
                     {"probe_samples", probe_samples}};
        j["pretrain"] = {{"steps", pretrain_steps},
                         {"batch", pretrain_batch},
                         {"optimizer", detail::optimizer_json(pretrain_opt)}};
        j["analyze"] = {{"finetune_steps", analyze_finetune_steps},
                        {"weights", {weights.alpha, weights.beta, weights.gamma}},
                        {"budget", budget},
                        {"adaptations", adaptations}};
        j["inject"] = {{"steps", inject_steps},
                       {"batch", inject_batch},
                       {"demos_per_task", inject_demos_per_task},
                       {"optimizer", detail::optimizer_json(inject_opt)},
                       {"lambda", lambda},
                       {"poison_ratio", poison_ratio},
                       {"behavior", target_behavior_name(behavior)},
                       {"arms", arms}};
        j["user_finetune"] = {{"steps", user_steps},
                              {"optimizer", detail::optimizer_json(user_opt)},
                              {"suite", user_suite}};
        j["eval"] = {{"n_eval", n_eval}, {"phases", eval_phases}};
        j["defense"] = {{"model", defense_model},
                        {"quality", defense_quality},
                        {"noise", defense_noise},
                        {"audit", defense_audit},
                        {"ranking", audit_ranking_name(audit_ranking)}};
        j["sweep"] = {{"lambda", sweep_lambda},
                      {"budget", sweep_budget},
                      {"weight_divisions", weight_divisions}};
        return j;
    }

    /// Hash over everything except the output location.
    std::string config_hash() const {
        json j = to_json();
        j.erase("out_dir");
        const std::string dump = j.dump();
        return hex64(fnv1a64(dump.data(), dump.size()));
    }
};

}  // namespace driftlab
