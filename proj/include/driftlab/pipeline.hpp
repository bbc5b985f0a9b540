// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "driftlab/attack.hpp"
#include "driftlab/config.hpp"
#include "driftlab/evalharness.hpp"
#include "driftlab/io.hpp"

namespace driftlab {

// ---- artifact layout -------------------------------------------------------

struct RunPaths {
    fs::path out;

    fs::path base_ckpt() const { return out / "checkpoints" / "base.ckpt"; }
    fs::path poisoned_ckpt(const std::string& arm) const {
        return out / "checkpoints" / ("poisoned_" + arm + ".ckpt");
    }
    fs::path user_ckpt(const std::string& tag, const std::string& suite) const {
        return out / "checkpoints" / ("user_" + tag + "_" + suite + ".ckpt");
    }
    fs::path pretrain_data() const { return out / "data" / "pretrain.ds"; }
    fs::path probe_data() const { return out / "data" / "probe.ds"; }
    fs::path down_data(const std::string& suite) const {
        return out / "data" / ("down_" + suite + ".ds");
    }
    fs::path inject_data(const std::string& kind) const {
        return out / "data" / ("inject_" + kind + ".ds");
    }
    fs::path spectrum() const { return out / "spectrum.json"; }
    fs::path reports() const { return out / "reports"; }
    fs::path metrics_csv() const { return reports() / "metrics.csv"; }
    fs::path defense_csv() const { return reports() / "defense.csv"; }
    fs::path sensitivity_csv() const { return reports() / "module_sensitivity.csv"; }
    fs::path trainlog_csv(const std::string& arm) const {
        return reports() / ("trainlog_" + arm + ".csv");
    }
    fs::path persistence_csv() const { return reports() / "persistence.csv"; }
    fs::path ablation_csv() const { return reports() / "ablation.csv"; }
    fs::path saliency_csv(const std::string& tag) const {
        return reports() / ("saliency_" + tag + ".csv");
    }
    fs::path trajectories_csv() const { return reports() / "trajectories.csv"; }
    fs::path sweep_csv(const std::string& dim) const {
        return reports() / ("sweep_" + dim + ".csv");
    }
    fs::path sweep_point_csv(const std::string& dim, int point) const {
        return reports() / ("sweep_" + dim + "_point" + std::to_string(point) + ".csv");
    }
};

// ---- evaluation rows ----------------------------------------------------------

inline constexpr const char* kMetricsHeader =
    "model_tag,method,arm,phase,suite,trigger,defense_kind,defense_param,n_eval,successes,sr,asr,"
    "seed";

struct EvalRow {
    std::string model_tag;  // normal | poisoned-base | user-finetuned | defended
    std::string method;     // normal | selective | badnet | advvla
    std::string arm;        // - | insensitive | sensitive | full
    std::string phase;      // pre | post
    std::string suite;
    bool trigger = false;
    std::string defense_kind = "none";
    double defense_param = 0.0;
    int n_eval = 0;
    int successes = 0;
    double sr = 0.0;
    std::optional<double> asr;
    std::uint64_t seed = 0;

    std::string csv() const {
        std::string s;
        s += model_tag + "," + method + "," + arm + "," + phase + "," + suite + ",";
        s += (trigger ? "1" : "0");
        s += "," + defense_kind + "," + fmt_num(defense_param) + "," + std::to_string(n_eval) +
             "," + std::to_string(successes) + "," + fmt_num(sr) + ",";
        s += asr ? fmt_num(*asr) : "";
        s += "," + std::to_string(seed);
        return s;
    }
};

inline std::string method_of_arm(const std::string& arm) {
    if (arm == "badnet" || arm == "advvla") return arm;
    return "selective";
}

// ---- spectrum serialization -----------------------------------------------------

inline json spectrum_to_json(const StabilitySpectrum& sp, const ModuleDriftReport& aggregated) {
    json j;
    j["format"] = "driftlab-spectrum";
    auto metrics = [](const ModuleMetrics& m) {
        json a = json::array();
        for (double v : m) a.push_back(v);
        return a;
    };
    j["mad_raw"] = metrics(sp.mad_raw);
    j["fnd_raw"] = metrics(sp.fnd_raw);
    j["act_raw"] = metrics(sp.act_raw);
    j["mad_norm"] = metrics(sp.mad_norm);
    j["fnd_norm"] = metrics(sp.fnd_norm);
    j["act_norm"] = metrics(sp.act_norm);
    j["score"] = metrics(sp.score);
    j["share"] = metrics(sp.share);
    j["weights"] = {sp.weights.alpha, sp.weights.beta, sp.weights.gamma};
    j["budget"] = sp.budget;
    json order = json::array(), selected = json::array(), counts = json::array();
    for (int m : sp.order) order.push_back(std::string(module_name(module_from_index(m))));
    for (int m : sp.selected) selected.push_back(std::string(module_name(module_from_index(m))));
    for (std::size_t c : aggregated.param_count) counts.push_back(c);
    j["order"] = order;
    j["selected"] = selected;
    j["param_count"] = counts;
    return j;
}

struct SpectrumFile {
    StabilitySpectrum spectrum;
    ModuleDriftReport aggregated;
};

inline SpectrumFile spectrum_from_json(const json& j) {
    SpectrumFile out;
    auto metrics = [&](const char* key) {
        ModuleMetrics m;
        for (const json& v : j.at(key)) m.push_back(v.get<double>());
        return m;
    };
    out.spectrum.mad_raw = metrics("mad_raw");
    out.spectrum.fnd_raw = metrics("fnd_raw");
    out.spectrum.act_raw = metrics("act_raw");
    out.spectrum.mad_norm = metrics("mad_norm");
    out.spectrum.fnd_norm = metrics("fnd_norm");
    out.spectrum.act_norm = metrics("act_norm");
    out.spectrum.score = metrics("score");
    out.spectrum.share = metrics("share");
    out.spectrum.weights = FusionWeights{j.at("weights").at(0).get<double>(),
                                         j.at("weights").at(1).get<double>(),
                                         j.at("weights").at(2).get<double>()};
    out.spectrum.budget = j.at("budget").get<double>();
    for (const json& s : j.at("order"))
        out.spectrum.order.push_back(static_cast<int>(module_from_name(s.get<std::string>())));
    for (const json& s : j.at("selected"))
        out.spectrum.selected.push_back(static_cast<int>(module_from_name(s.get<std::string>())));
    out.aggregated.mad = out.spectrum.mad_raw;
    out.aggregated.fnd = out.spectrum.fnd_raw;
    out.aggregated.act_shift = out.spectrum.act_raw;
    for (const json& c : j.at("param_count"))
        out.aggregated.param_count.push_back(c.get<std::size_t>());
    return out;
}

// ---- pipeline --------------------------------------------------------------------

class Pipeline {
public:
    explicit Pipeline(ExperimentConfig cfg)
        : cfg_(std::move(cfg)), paths_{fs::path(cfg_.out_dir)} {
        fs::create_directories(paths_.out);
        manifest_ = Manifest::load_or_create(paths_.out, cfg_.config_hash());
    }

    const ExperimentConfig& config() const { return cfg_; }
    const RunPaths& paths() const { return paths_; }
    const Manifest& manifest() const { return *manifest_; }

    // ---- stage: pretrain ----

    void pretrain() {
        const auto t0 = now();
        const TaskSuite suite = pretrain_suite();
        DemoDataset data = make_clean_dataset(suite.tasks, total_episodes(suite, cfg_.pretrain_demos_per_task),
                                              derive_seed(cfg_.seed, "pretrain-data"), cfg_.env,
                                              "pretrain");
        DemoDataset probe = make_clean_dataset(suite.tasks, cfg_.probe_episodes,
                                               derive_seed(cfg_.seed, "probe-data"), cfg_.env,
                                               "probe");
        save_dataset(paths_.pretrain_data(), data);
        save_dataset(paths_.probe_data(), probe);

        PolicyNet net(cfg_.policy, cfg_.seed);
        TrainOptions opts;
        opts.opt = cfg_.pretrain_opt;
        opts.steps = cfg_.pretrain_steps;
        opts.batch = cfg_.pretrain_batch;
        opts.seed = derive_seed(cfg_.seed, "pretrain-train");
        train_policy(net, data, opts);
        save_checkpoint(paths_.base_ckpt(), net.snapshot());

        manifest_->record_stage("pretrain",
                                {paths_.base_ckpt(), paths_.pretrain_data(),
                                 fs::path(paths_.pretrain_data().string() + ".idx"),
                                 paths_.probe_data(), fs::path(paths_.probe_data().string() + ".idx")},
                                ms_since(t0));
    }

    // ---- stage: analyze ----

    void analyze() {
        const auto t0 = now();
        const NamedCheckpoint base = load_checkpoint(require("pretrain", paths_.base_ckpt()));
        const DemoDataset probe = load_dataset(require("pretrain", paths_.probe_data()));

        PolicyNet net0(cfg_.policy, cfg_.seed);
        net0.restore(base);
        const FisherMap fisher =
            estimate_fisher(net0, probe, cfg_.probe_samples, derive_seed(cfg_.seed, "fisher"));
        const std::vector<Observation> probe_obs = probe_observations(probe);

        std::vector<ModuleDriftReport> reports;
        std::vector<ModuleMetrics> shares;
        for (const std::string& suite_name : cfg_.adaptations) {
            const TaskSuite suite = suite_by_name(suite_name);
            DemoDataset ds = make_clean_dataset(
                suite.tasks, total_episodes(suite, cfg_.downstream_demos_per_task),
                derive_seed(cfg_.seed, "analyze-data-" + suite_name), cfg_.env,
                "downstream-" + suite_name);
            PolicyNet netf(cfg_.policy, cfg_.seed);
            netf.restore(base);
            TrainOptions opts;
            opts.opt = cfg_.user_opt;
            opts.steps = cfg_.analyze_finetune_steps;
            opts.batch = cfg_.pretrain_batch;
            opts.seed = derive_seed(cfg_.seed, "analyze-train-" + suite_name);
            train_policy(netf, ds, opts);
            const NamedCheckpoint after = netf.snapshot();

            ModuleDriftReport r;
            r.mad = mad(base, after);
            r.fnd = fnd(base, after, fisher);
            r.act_shift.assign(kModuleCount, 0.0);
            for (int m = 0; m < kModuleCount; ++m)
                r.param_count.push_back(base.modules[m].size());
            auto [a0, caps0] = net0.forward_captured(probe_obs, all_modules());
            auto [af, capsf] = netf.forward_captured(probe_obs, all_modules());
            (void)a0;
            (void)af;
            for (int m = 0; m < kModuleCount; ++m)
                r.act_shift[static_cast<std::size_t>(m)] =
                    1.0 - linear_cka(caps0[static_cast<std::size_t>(m)], capsf[static_cast<std::size_t>(m)]);
            reports.push_back(r);
            shares.push_back(drift_share(base, after, fisher));
        }
        const ModuleDriftReport aggregated = aggregate_over_adaptations(reports);
        const ModuleMetrics share = aggregate_shares(shares);
        const StabilitySpectrum sp = build_spectrum(aggregated, share, cfg_.weights, cfg_.budget);

        write_file(paths_.spectrum(), spectrum_to_json(sp, aggregated).dump(2) + "\n");
        write_sensitivity_csv(sp, aggregated);
        manifest_->record_stage("analyze", {paths_.spectrum(), paths_.sensitivity_csv()},
                                ms_since(t0));
    }

    // ---- stage: inject ----

    void inject_arms() {
        const auto t0 = now();
        const NamedCheckpoint base = load_checkpoint(require("pretrain", paths_.base_ckpt()));
        std::optional<SpectrumFile> spectrum;
        const bool needs_spectrum =
            std::any_of(cfg_.arms.begin(), cfg_.arms.end(),
                        [](const std::string& a) { return a == "insensitive" || a == "sensitive"; });
        if (needs_spectrum)
            spectrum = spectrum_from_json(json::parse(read_file(require("analyze", paths_.spectrum()))));

        std::vector<fs::path> artifacts;
        std::map<std::string, DemoDataset> data_cache;
        for (const std::string& arm : cfg_.arms) {
            const DemoDataset& data = inject_dataset(arm, data_cache, artifacts);
            InjectionPlan plan;
            plan.poison = PoisonSpec{cfg_.behavior, cfg_.poison_ratio, cfg_.lambda};
            plan.steps = cfg_.inject_steps;
            plan.batch = cfg_.inject_batch;
            plan.opt = cfg_.inject_opt;
            plan.seed = derive_seed(cfg_.seed, "inject-" + arm);
            plan.target_modules = resolve_arm(arm, spectrum);
            InjectResult res = inject(cfg_.policy, base, plan, data);
            save_checkpoint(paths_.poisoned_ckpt(arm), res.checkpoint);
            write_trainlog(paths_.trainlog_csv(arm), res.log);
            artifacts.push_back(paths_.poisoned_ckpt(arm));
            artifacts.push_back(paths_.trainlog_csv(arm));
        }
        manifest_->record_stage("inject", artifacts, ms_since(t0));
    }

    // ---- stage: user fine-tune ----

    void user_finetune_all() {
        const auto t0 = now();
        const TaskSuite suite = suite_by_name(cfg_.user_suite);
        DemoDataset ds = make_clean_dataset(
            suite.tasks, total_episodes(suite, cfg_.downstream_demos_per_task),
            derive_seed(cfg_.seed, "user-data-" + cfg_.user_suite), cfg_.env,
            "downstream-" + cfg_.user_suite);
        save_dataset(paths_.down_data(cfg_.user_suite), ds);
        std::vector<fs::path> artifacts{paths_.down_data(cfg_.user_suite),
                                        fs::path(paths_.down_data(cfg_.user_suite).string() + ".idx")};
        for (const std::string& tag : user_inputs()) {
            const NamedCheckpoint start =
                tag == "normal" ? load_checkpoint(require("pretrain", paths_.base_ckpt()))
                                : load_checkpoint(require("inject", paths_.poisoned_ckpt(tag)));
            const NamedCheckpoint tuned =
                user_finetune(cfg_.policy, start, ds, cfg_.user_steps,
                              derive_seed(cfg_.seed, "user-" + tag), cfg_.user_opt);
            save_checkpoint(paths_.user_ckpt(tag, cfg_.user_suite), tuned);
            artifacts.push_back(paths_.user_ckpt(tag, cfg_.user_suite));
        }
        manifest_->record_stage("user-finetune", artifacts, ms_since(t0));
    }

    // ---- stage: evaluate ----

    void evaluate() {
        const auto t0 = now();
        std::vector<std::string> rows;
        for (const std::string& phase : cfg_.eval_phases) {
            for (const EvalRow& r : evaluate_phase(phase)) rows.push_back(r.csv());
        }
        write_csv(paths_.metrics_csv(), kMetricsHeader, rows);
        manifest_->record_stage("evaluate", {paths_.metrics_csv()}, ms_since(t0));
    }

    // ---- stage: defend ----

    void defend() {
        const auto t0 = now();
        std::vector<std::string> rows;
        for (const EvalRow& r : defense_rows()) rows.push_back(r.csv());
        write_csv(paths_.defense_csv(), kMetricsHeader, rows);
        manifest_->record_stage("defend", {paths_.defense_csv()}, ms_since(t0));
    }

    // ---- stage: sweep ----

    void sweep(const std::string& dimension, int jobs, const std::optional<fs::path>& config_file,
               int only_point = -1);

    // ---- stage: report ----

    void report() {
        const auto t0 = now();
        if (!fs::exists(Manifest::file(paths_.out)) || manifest_->doc()["stages"].empty())
            throw DependencyError("run dir " + paths_.out.string() +
                                  " has no recorded stages; run the pipeline first");
        const std::vector<std::string> problems = manifest_->verify_all();
        if (!problems.empty()) {
            std::string msg = "provenance check failed:";
            for (const std::string& p : problems) msg += "\n  " + p;
            throw DependencyError(msg);
        }
        std::vector<std::string> gaps;
        std::vector<fs::path> artifacts;
        emit_persistence_and_ablation(gaps, artifacts);
        emit_probes(gaps, artifacts);
        manifest_->record_stage("report", artifacts, ms_since(t0));
        for (const std::string& g : gaps) std::fprintf(stdout, "report gap: %s\n", g.c_str());
        std::fprintf(stdout, "report: %zu tables written to %s\n", artifacts.size(),
                     paths_.reports().string().c_str());
    }

    // ---- shared helpers (public: the test suites drive these directly) ----

    static int total_episodes(const TaskSuite& suite, int per_task) {
        return static_cast<int>(suite.tasks.size()) * per_task;
    }

    std::vector<std::string> user_inputs() const {
        std::vector<std::string> tags{"normal"};
        tags.insert(tags.end(), cfg_.arms.begin(), cfg_.arms.end());
        return tags;
    }

    std::vector<ModuleId> resolve_arm(const std::string& arm,
                                      const std::optional<SpectrumFile>& spectrum) const {
        if (arm == "insensitive" || arm == "sensitive") {
            if (!spectrum) throw DependencyError("arm '" + arm + "' needs the analyze stage");
            const std::vector<ModuleId> sel = to_module_ids(spectrum->spectrum.selected);
            if (arm == "insensitive") return sel;
            return complement_modules(sel);
        }
        return all_modules();  // full, badnet, advvla
    }

    /// Mixed clean+poison dataset for an arm; cached per distinct payload.
    const DemoDataset& inject_dataset(const std::string& arm,
                                      std::map<std::string, DemoDataset>& cache,
                                      std::vector<fs::path>& artifacts) {
        const std::string kind = (arm == "badnet" || arm == "advvla") ? arm : "selective";
        auto it = cache.find(kind);
        if (it != cache.end()) return it->second;
        const TaskSuite suite = pretrain_suite();
        const int n = total_episodes(suite, cfg_.inject_demos_per_task);
        const std::uint64_t seed = derive_seed(cfg_.seed, "inject-data");
        DemoDataset ds;
        if (kind == "selective") {
            ds = make_dataset(suite.tasks, n, PoisonSpec{cfg_.behavior, cfg_.poison_ratio, cfg_.lambda},
                              seed, cfg_.env, "inject-selective");
        } else if (kind == "badnet") {
            DemoDataset clean = make_clean_dataset(suite.tasks, n, seed, cfg_.env, "inject");
            ds = badnet_poison(clean, PatchSpec{}, freeze_label(), cfg_.poison_ratio,
                               cfg_.env.grid);
        } else {
            DemoDataset clean = make_clean_dataset(suite.tasks, n, seed, cfg_.env, "inject");
            ds = advvla_poison(clean, cfg_.poison_ratio, cfg_.env.grid);
        }
        save_dataset(paths_.inject_data(kind), ds);
        artifacts.push_back(paths_.inject_data(kind));
        artifacts.push_back(fs::path(paths_.inject_data(kind).string() + ".idx"));
        return cache.emplace(kind, std::move(ds)).first->second;
    }

    /// SR cells for one phase, with attack success rates against the matching
    /// normal model on identical episode seeds.
    std::vector<EvalRow> evaluate_phase(const std::string& phase) {
        const bool pre = phase == "pre";
        const TaskSuite suite = pre ? pretrain_suite() : suite_by_name(cfg_.user_suite);
        const std::uint64_t eval_seed = derive_seed(cfg_.seed, "eval-" + phase);
        std::vector<EvalRow> rows;

        PolicyNet normal_net(cfg_.policy, cfg_.seed);
        normal_net.restore(pre ? load_checkpoint(require("pretrain", paths_.base_ckpt()))
                               : load_checkpoint(require("user-finetune",
                                                         paths_.user_ckpt("normal", cfg_.user_suite))));
        const double n_wo = rollout_sr(normal_net, suite, cfg_.n_eval, false, eval_seed, cfg_.env).sr;
        const double n_w = rollout_sr(normal_net, suite, cfg_.n_eval, true, eval_seed, cfg_.env).sr;
        rows.push_back(make_row("normal", "normal", "-", phase, suite.name, false, n_wo, eval_seed));
        rows.push_back(make_row("normal", "normal", "-", phase, suite.name, true, n_w, eval_seed));

        for (const std::string& arm : cfg_.arms) {
            PolicyNet net(cfg_.policy, cfg_.seed);
            net.restore(pre ? load_checkpoint(require("inject", paths_.poisoned_ckpt(arm)))
                            : load_checkpoint(require("user-finetune",
                                                      paths_.user_ckpt(arm, cfg_.user_suite))));
            const double wo = rollout_sr(net, suite, cfg_.n_eval, false, eval_seed, cfg_.env).sr;
            const double w = rollout_sr(net, suite, cfg_.n_eval, true, eval_seed, cfg_.env).sr;
            const std::string tag = pre ? "poisoned-base" : "user-finetuned";
            EvalRow r_wo = make_row(tag, method_of_arm(arm), arm_label(arm), phase, suite.name,
                                    false, wo, eval_seed);
            EvalRow r_w =
                make_row(tag, method_of_arm(arm), arm_label(arm), phase, suite.name, true, w, eval_seed);
            r_w.asr = asr(w, n_w, wo, n_wo);
            rows.push_back(r_wo);
            rows.push_back(r_w);
        }
        return rows;
    }

    /// The three defense blocks over the configured grids, evaluated on the
    /// post-fine-tune model of the configured arm.
    std::vector<EvalRow> defense_rows() {
        const TaskSuite suite = suite_by_name(cfg_.user_suite);
        const std::uint64_t eval_seed = derive_seed(cfg_.seed, "eval-post");
        const std::string arm = cfg_.defense_model;

        PolicyNet normal_net(cfg_.policy, cfg_.seed);
        normal_net.restore(
            load_checkpoint(require("user-finetune", paths_.user_ckpt("normal", cfg_.user_suite))));
        PolicyNet attacked(cfg_.policy, cfg_.seed);
        attacked.restore(
            load_checkpoint(require("user-finetune", paths_.user_ckpt(arm, cfg_.user_suite))));

        std::vector<EvalRow> rows;
        auto input_cells = [&](const std::string& kind, const std::vector<double>& grid,
                               auto make_filter) {
            for (double p : grid) {
                ObsFilter filter = make_filter(p);
                const double n_wo =
                    rollout_sr(normal_net, suite, cfg_.n_eval, false, eval_seed, cfg_.env, filter).sr;
                const double n_w =
                    rollout_sr(normal_net, suite, cfg_.n_eval, true, eval_seed, cfg_.env, filter).sr;
                const double a_wo =
                    rollout_sr(attacked, suite, cfg_.n_eval, false, eval_seed, cfg_.env, filter).sr;
                const double a_w =
                    rollout_sr(attacked, suite, cfg_.n_eval, true, eval_seed, cfg_.env, filter).sr;
                EvalRow r_wo = make_row("defended", method_of_arm(arm), arm_label(arm), "post",
                                        suite.name, false, a_wo, eval_seed);
                EvalRow r_w = make_row("defended", method_of_arm(arm), arm_label(arm), "post",
                                       suite.name, true, a_w, eval_seed);
                r_wo.defense_kind = r_w.defense_kind = kind;
                r_wo.defense_param = r_w.defense_param = p;
                r_w.asr = asr(a_w, n_w, a_wo, n_wo);
                rows.push_back(r_wo);
                rows.push_back(r_w);
            }
        };
        input_cells("compress", cfg_.defense_quality, [](double q) -> ObsFilter {
            return [q](std::vector<float>& img) { defend_compress(img, q); };
        });
        input_cells("gauss_noise", cfg_.defense_noise, [&](double e) -> ObsFilter {
            if (e == 0.0) return nullptr;
            const std::uint64_t noise_seed = derive_seed(cfg_.seed, "defense-noise");
            return [e, noise_seed](std::vector<float>& img) { defend_noise(img, e, noise_seed); };
        });

        // parameter-side block
        const double n_wo = rollout_sr(normal_net, suite, cfg_.n_eval, false, eval_seed, cfg_.env).sr;
        const double n_w = rollout_sr(normal_net, suite, cfg_.n_eval, true, eval_seed, cfg_.env).sr;
        const NamedCheckpoint received =
            load_checkpoint(require("inject", paths_.poisoned_ckpt(arm)));
        const NamedCheckpoint user_ck =
            load_checkpoint(require("user-finetune", paths_.user_ckpt(arm, cfg_.user_suite)));
        const DemoDataset repair = load_dataset(require("user-finetune", paths_.down_data(cfg_.user_suite)));
        for (double ratio : cfg_.defense_audit) {
            const NamedCheckpoint defended = defend_audit(
                cfg_.policy, received, user_ck, nullptr, ratio, cfg_.audit_ranking, repair,
                ratio == 0.0 ? 0 : cfg_.user_steps / 10, derive_seed(cfg_.seed, "audit"),
                cfg_.user_opt);
            PolicyNet net(cfg_.policy, cfg_.seed);
            net.restore(defended);
            const double a_wo = rollout_sr(net, suite, cfg_.n_eval, false, eval_seed, cfg_.env).sr;
            const double a_w = rollout_sr(net, suite, cfg_.n_eval, true, eval_seed, cfg_.env).sr;
            EvalRow r_wo = make_row("defended", method_of_arm(arm), arm_label(arm), "post",
                                    suite.name, false, a_wo, eval_seed);
            EvalRow r_w = make_row("defended", method_of_arm(arm), arm_label(arm), "post",
                                   suite.name, true, a_w, eval_seed);
            r_wo.defense_kind = r_w.defense_kind = "delta_w_audit";
            r_wo.defense_param = r_w.defense_param = ratio;
            r_w.asr = asr(a_w, n_w, a_wo, n_wo);
            rows.push_back(r_wo);
            rows.push_back(r_w);
        }
        return rows;
    }

private:
    static std::chrono::steady_clock::time_point now() { return std::chrono::steady_clock::now(); }
    static double ms_since(std::chrono::steady_clock::time_point t0) {
        return std::chrono::duration<double, std::milli>(now() - t0).count();
    }

    static std::string arm_label(const std::string& arm) {
        if (arm == "badnet" || arm == "advvla") return "full";
        return arm;
    }

    EvalRow make_row(const std::string& tag, const std::string& method, const std::string& arm,
                     const std::string& phase, const std::string& suite, bool trigger, double sr,
                     std::uint64_t seed) const {
        EvalRow r;
        r.model_tag = tag;
        r.method = method;
        r.arm = arm;
        r.phase = phase;
        r.suite = suite;
        r.trigger = trigger;
        r.n_eval = cfg_.n_eval;
        r.successes = static_cast<int>(std::llround(sr * cfg_.n_eval));
        r.sr = sr;
        r.seed = seed;
        return r;
    }

    fs::path require(const std::string& stage, const fs::path& artifact) const {
        return manifest_->require_artifact(stage, fs::relative(artifact, paths_.out).generic_string(),
                                           producer_of(stage));
    }

    static std::string producer_of(const std::string& stage) {
        if (stage == "pretrain") return "pretrain";
        if (stage == "analyze") return "analyze";
        if (stage == "inject") return "inject";
        if (stage == "user-finetune") return "user-finetune";
        if (stage == "evaluate") return "evaluate";
        if (stage == "defend") return "defend";
        return stage;
    }

    std::vector<Observation> probe_observations(const DemoDataset& probe) const {
        std::vector<Observation> obs;
        for (const Trajectory& t : probe.trajectories) {
            for (const Frame& f : t.frames) {
                obs.push_back(f.obs);
                if (static_cast<int>(obs.size()) >= cfg_.probe_samples) return obs;
            }
        }
        if (obs.size() < 2) throw Error("probe dataset too small for activation capture");
        return obs;
    }

    void write_sensitivity_csv(const StabilitySpectrum& sp, const ModuleDriftReport& agg) {
        std::vector<std::string> rows;
        for (int m = 0; m < kModuleCount; ++m) {
            const auto i = static_cast<std::size_t>(m);
            const bool sel = std::find(sp.selected.begin(), sp.selected.end(), m) != sp.selected.end();
            std::string r{module_name(module_from_index(m))};
            r += "," + std::to_string(agg.param_count[i]) + "," + fmt_num(sp.mad_raw[i]) + "," +
                 fmt_num(sp.fnd_raw[i]) + "," + fmt_num(sp.act_raw[i]) + "," +
                 fmt_num(sp.mad_norm[i]) + "," + fmt_num(sp.fnd_norm[i]) + "," +
                 fmt_num(sp.act_norm[i]) + "," + fmt_num(sp.score[i]) + "," + fmt_num(sp.share[i]) +
                 "," + (sel ? "1" : "0");
            rows.push_back(r);
        }
        write_csv(paths_.sensitivity_csv(),
                  "module,param_count,mad,fnd,act_shift,mad_norm,fnd_norm,act_norm,score,share,"
                  "selected",
                  rows);
    }

    void write_trainlog(const fs::path& path, const TrainLog& log) {
        std::vector<std::string> rows;
        rows.reserve(log.steps.size());
        for (std::size_t i = 0; i < log.steps.size(); ++i)
            rows.push_back(std::to_string(i) + "," + fmt_num(log.steps[i].clean_loss) + "," +
                           fmt_num(log.steps[i].poison_loss) + "," +
                           fmt_num(log.steps[i].total_loss));
        write_csv(path, "step,clean_loss,poison_loss,total_loss", rows);
    }

    // ---- report helpers ----

    struct MetricsTable {
        std::vector<EvalRow> rows;
    };

    static std::optional<double> parse_opt(const std::string& s) {
        if (s.empty()) return std::nullopt;
        return std::stod(s);
    }

    std::vector<EvalRow> read_metrics(const fs::path& path) const {
        std::vector<EvalRow> rows;
        std::istringstream in(read_file(path));
        std::string line;
        std::getline(in, line);  // header
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::vector<std::string> f;
            std::string cur;
            for (char c : line) {
                if (c == ',') {
                    f.push_back(cur);
                    cur.clear();
                } else {
                    cur.push_back(c);
                }
            }
            f.push_back(cur);
            if (f.size() != 13) throw IoError("malformed metrics row: " + line);
            EvalRow r;
            r.model_tag = f[0];
            r.method = f[1];
            r.arm = f[2];
            r.phase = f[3];
            r.suite = f[4];
            r.trigger = f[5] == "1";
            r.defense_kind = f[6];
            r.defense_param = std::stod(f[7]);
            r.n_eval = std::stoi(f[8]);
            r.successes = std::stoi(f[9]);
            r.sr = std::stod(f[10]);
            r.asr = parse_opt(f[11]);
            r.seed = std::stoull(f[12]);
            rows.push_back(r);
        }
        return rows;
    }

    void emit_persistence_and_ablation(std::vector<std::string>& gaps,
                                       std::vector<fs::path>& artifacts) {
        if (!fs::exists(paths_.metrics_csv())) {
            gaps.push_back("metrics.csv missing (run `evaluate`); persistence and ablation tables skipped");
            return;
        }
        const std::vector<EvalRow> rows = read_metrics(paths_.metrics_csv());
        auto find_sr = [&](const std::string& method, const std::string& arm,
                           const std::string& phase, bool trigger) -> std::optional<EvalRow> {
            for (const EvalRow& r : rows)
                if (r.method == method && r.arm == arm && r.phase == phase && r.trigger == trigger &&
                    r.defense_kind == "none")
                    return r;
            return std::nullopt;
        };
        // persistence table: pre vs post ASR per attack method
        std::vector<std::string> prows;
        for (const auto& [method, arm] : attack_arms()) {
            for (const std::string phase : {"pre", "post"}) {
                auto wo = find_sr(method, arm, phase, false);
                auto w = find_sr(method, arm, phase, true);
                if (!wo || !w) {
                    gaps.push_back("persistence: no " + phase + " rows for " + method + "/" + arm);
                    continue;
                }
                prows.push_back(method + "," + arm + "," + phase + "," + wo->suite + "," +
                                fmt_num(wo->sr) + "," + fmt_num(w->sr) + "," +
                                (w->asr ? fmt_num(*w->asr) : ""));
            }
        }
        for (const std::string phase : {"pre", "post"}) {
            auto wo = find_sr("normal", "-", phase, false);
            auto w = find_sr("normal", "-", phase, true);
            if (wo && w)
                prows.push_back("normal,-," + std::string(phase) + "," + wo->suite + "," +
                                fmt_num(wo->sr) + "," + fmt_num(w->sr) + ",");
        }
        write_csv(paths_.persistence_csv(), "method,arm,phase,suite,sr_wo,sr_w,asr", prows);
        artifacts.push_back(paths_.persistence_csv());

        // ablation table: the three selective arms after user fine-tuning
        std::vector<std::string> arows;
        for (const std::string arm : {"full", "sensitive", "insensitive"}) {
            auto wo = find_sr("selective", arm, "post", false);
            auto w = find_sr("selective", arm, "post", true);
            if (!wo || !w) {
                gaps.push_back("ablation: no post rows for arm " + arm);
                continue;
            }
            arows.push_back(arm + "," + wo->suite + "," + fmt_num(wo->sr) + "," + fmt_num(w->sr) +
                            "," + (w->asr ? fmt_num(*w->asr) : ""));
        }
        write_csv(paths_.ablation_csv(), "arm,suite,sr_wo,sr_w,asr", arows);
        artifacts.push_back(paths_.ablation_csv());
    }

    std::vector<std::pair<std::string, std::string>> attack_arms() const {
        std::vector<std::pair<std::string, std::string>> out;
        for (const std::string& arm : cfg_.arms)
            out.emplace_back(method_of_arm(arm), arm_label(arm));
        return out;
    }

    void emit_probes(std::vector<std::string>& gaps, std::vector<fs::path>& artifacts) {
        const bool have_base = fs::exists(paths_.base_ckpt());
        const std::string arm = cfg_.defense_model;
        const bool have_poisoned = fs::exists(paths_.poisoned_ckpt(arm));
        const bool have_user = fs::exists(paths_.user_ckpt(arm, cfg_.user_suite));
        if (!have_base || !have_poisoned || !have_user) {
            gaps.push_back("saliency/trajectory probes skipped (need base, poisoned and user checkpoints)");
            return;
        }
        PolicyNet normal(cfg_.policy, cfg_.seed);
        normal.restore(load_checkpoint(paths_.base_ckpt()));
        PolicyNet poisoned(cfg_.policy, cfg_.seed);
        poisoned.restore(load_checkpoint(paths_.poisoned_ckpt(arm)));
        PolicyNet user(cfg_.policy, cfg_.seed);
        user.restore(load_checkpoint(paths_.user_ckpt(arm, cfg_.user_suite)));

        const TaskSpec task = pretrain_suite().tasks[0];
        const std::uint64_t scene_seed = derive_seed(cfg_.seed, "report-scene");
        Rng rng(scene_seed);
        Scene scene = gen_scene(task, cfg_.env, rng, true);
        EnvState s = make_env(task, scene, cfg_.env);
        const Observation obs = observation(s);

        const std::vector<std::pair<std::string, const PolicyNet*>> models = {
            {"normal", &normal}, {"poisoned_base", &poisoned}, {"user_finetuned", &user}};
        for (const auto& [tag, net] : models) {
            const std::vector<double> heat = trigger_saliency(*net, obs);
            std::vector<std::string> rows;
            for (int y = 0; y < cfg_.env.grid; ++y)
                for (int x = 0; x < cfg_.env.grid; ++x)
                    rows.push_back(std::to_string(x) + "," + std::to_string(y) + "," +
                                   fmt_num(heat[static_cast<std::size_t>(y * cfg_.env.grid + x)]));
            write_csv(paths_.saliency_csv(tag), "x,y,heat", rows);
            artifacts.push_back(paths_.saliency_csv(tag));
        }

        const auto traces = export_trajectories({&normal, &poisoned, &user},
                                                {"normal", "poisoned_base", "user_finetuned"},
                                                task, scene_seed, true, cfg_.env);
        std::vector<std::string> rows;
        for (const TrajectoryTrace& tr : traces)
            for (std::size_t i = 0; i < tr.positions.size(); ++i)
                rows.push_back(tr.label + "," + std::to_string(i) + "," +
                               fmt_num(tr.positions[i].x) + "," + fmt_num(tr.positions[i].y));
        write_csv(paths_.trajectories_csv(), "model,step,x,y", rows);
        artifacts.push_back(paths_.trajectories_csv());
    }

    std::vector<std::string> run_sweep_point(const std::string& dimension, int point);

    ExperimentConfig cfg_;
    RunPaths paths_;
    std::optional<Manifest> manifest_;
};

}  // namespace driftlab

#include "driftlab/sweep_impl.hpp"
