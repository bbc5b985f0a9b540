// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "driftlab/attack.hpp"
#include "driftlab/drift.hpp"
#include "driftlab/training.hpp"

namespace driftlab {

// ---- user-side fine-tuning -------------------------------------------------

/// Stage-3 simulation: the user fine-tunes the received checkpoint on their
/// own clean data with every module trainable. Zero steps returns the input
/// bitwise.
inline NamedCheckpoint user_finetune(const PolicyConfig& cfg, const NamedCheckpoint& start,
                                     const DemoDataset& data, int steps, std::uint64_t seed,
                                     OptimizerConfig opt = {}) {
    if (data.has_poisoned() || data.poison_ratio != 0.0)
        throw ContractError("user fine-tuning data must be clean");
    if (steps == 0) return start;
    PolicyNet net(cfg, seed);
    net.restore(start);
    TrainOptions opts;
    opts.opt = opt;
    opts.steps = steps;
    opts.batch = 32;
    opts.seed = seed;
    train_policy(net, data, opts);
    return net.snapshot();
}

// ---- rollouts ----------------------------------------------------------------

struct EpisodeRecord {
    std::uint64_t seed = 0;
    bool trigger = false;
    bool success = false;
    int steps = 0;
};

struct RolloutResult {
    double sr = 0.0;
    std::vector<EpisodeRecord> episodes;
};

/// Optional observation preprocessing applied before the policy sees a frame.
using ObsFilter = std::function<void(std::vector<float>&)>;

/// Policy callback; scripted controllers may use the privileged state.
using PolicyFn = std::function<std::vector<double>(const Observation&, const EnvState&)>;

/// Closed-loop evaluation over independently seeded episodes.
inline RolloutResult rollout_sr(const PolicyFn& policy, const TaskSuite& suite, int n_eval,
                                bool trigger, std::uint64_t seed, const EnvParams& params,
                                const ObsFilter& filter = nullptr) {
    if (n_eval < 1) throw ContractError("rollout: n_eval must be >= 1");
    if (suite.tasks.empty()) throw ConfigError("rollout: empty task suite");
    RolloutResult out;
    int successes = 0;
    for (int e = 0; e < n_eval; ++e) {
        const TaskSpec& task = suite.tasks[static_cast<std::size_t>(e) % suite.tasks.size()];
        const std::uint64_t ep_seed =
            derive_seed(seed, "eval:" + suite.name + ":" + std::to_string(e));
        Rng rng(ep_seed);
        Scene scene = gen_scene(task, params, rng, trigger);
        EnvState s = make_env(task, scene, params);
        while (!s.done) {
            Observation obs = observation(s);
            if (filter) filter(obs.image);
            env_step(s, policy(obs, s));
        }
        successes += s.success ? 1 : 0;
        out.episodes.push_back(EpisodeRecord{ep_seed, trigger, s.success, s.step_index});
    }
    out.sr = static_cast<double>(successes) / static_cast<double>(n_eval);
    return out;
}

inline RolloutResult rollout_sr(const PolicyNet& net, const TaskSuite& suite, int n_eval,
                                bool trigger, std::uint64_t seed, const EnvParams& params,
                                const ObsFilter& filter = nullptr) {
    PolicyFn fn = [&net](const Observation& obs, const EnvState&) { return net.act(obs); };
    return rollout_sr(fn, suite, n_eval, trigger, seed, params, filter);
}

// ---- attack success rate ----------------------------------------------------

/// ASR = min(1, (1 - SRw_atk/SRw_clean) * SRwo_atk/SRwo_clean) * 100, floored
/// at zero. Returns nothing when a clean-model denominator is zero.
inline std::optional<double> asr(double sr_w_atk, double sr_w_clean, double sr_wo_atk,
                                 double sr_wo_clean) {
    for (double v : {sr_w_atk, sr_w_clean, sr_wo_atk, sr_wo_clean})
        if (v < 0.0 || v > 1.0)
            throw ContractError("asr: success rates must lie in [0, 1]");
    if (sr_w_clean == 0.0 || sr_wo_clean == 0.0) return std::nullopt;
    double inner = (1.0 - sr_w_atk / sr_w_clean) * (sr_wo_atk / sr_wo_clean);
    inner = std::clamp(inner, 0.0, 1.0);
    return inner * 100.0;
}

// ---- input-level defenses -----------------------------------------------------

/// Quantization analogue of lossy recompression: q in (0, 1] maps to
/// max(2, round(2 + 253 q)) uniform levels per channel.
inline int compress_levels(double q) {
    if (!(q > 0.0 && q <= 1.0)) throw ContractError("compress: quality must be in (0, 1]");
    return std::max(2, static_cast<int>(std::llround(2.0 + 253.0 * q)));
}

inline void defend_compress(std::vector<float>& image, double q) {
    const int levels = compress_levels(q);
    const double scale = static_cast<double>(levels - 1);
    for (float& v : image)
        v = static_cast<float>(std::round(static_cast<double>(v) * scale) / scale);
}

inline void defend_noise(std::vector<float>& image, double noise_std, std::uint64_t seed) {
    if (noise_std < 0.0) throw ContractError("noise: std must be non-negative");
    if (noise_std == 0.0) return;
    Rng rng(derive_seed(seed, "defend-noise"));
    for (float& v : image)
        v = static_cast<float>(clamp01(static_cast<double>(v) + noise_std * rng.normal()));
}

// ---- parameter-side defense ------------------------------------------------------

enum class AuditRanking { ascending_drift, descending_drift, random };

inline const char* audit_ranking_name(AuditRanking r) {
    switch (r) {
        case AuditRanking::ascending_drift: return "ascending_drift";
        case AuditRanking::descending_drift: return "descending_drift";
        case AuditRanking::random: return "random";
    }
    return "?";
}

inline AuditRanking audit_ranking_from(const std::string& s) {
    if (s == "ascending_drift") return AuditRanking::ascending_drift;
    if (s == "descending_drift") return AuditRanking::descending_drift;
    if (s == "random") return AuditRanking::random;
    throw ConfigError("unknown audit ranking: " + s);
}

/// Drift-ranked module reset: modules are ordered by their parameter drift
/// between the user checkpoint and the reference, reset in rank order until
/// the audited fraction of parameters is reached, then repaired with a short
/// clean fine-tune over all modules. With a public reference the reset
/// restores reference values; otherwise the modules are freshly re-seeded.
inline NamedCheckpoint defend_audit(const PolicyConfig& cfg, const NamedCheckpoint& received_base,
                                    const NamedCheckpoint& user_ckpt,
                                    const NamedCheckpoint* public_reference, double ratio,
                                    AuditRanking ranking, const DemoDataset& repair_data,
                                    int repair_steps, std::uint64_t seed,
                                    OptimizerConfig repair_opt = {}) {
    if (ratio < 0.0 || ratio > 1.0) throw ConfigError("audit ratio must be in [0, 1]");
    if (ratio == 0.0) return user_ckpt;
    const NamedCheckpoint& reference = public_reference ? *public_reference : received_base;
    require_compatible(user_ckpt, reference);

    const ModuleMetrics drift = mad(reference, user_ckpt);
    std::array<int, kModuleCount> order{};
    std::iota(order.begin(), order.end(), 0);
    switch (ranking) {
        case AuditRanking::ascending_drift:
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                return drift[static_cast<std::size_t>(a)] < drift[static_cast<std::size_t>(b)];
            });
            break;
        case AuditRanking::descending_drift:
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                return drift[static_cast<std::size_t>(a)] > drift[static_cast<std::size_t>(b)];
            });
            break;
        case AuditRanking::random: {
            Rng rng(derive_seed(seed, "audit-order"));
            std::vector<int> v(order.begin(), order.end());
            rng.shuffle(v);
            std::copy(v.begin(), v.end(), order.begin());
            break;
        }
    }

    NamedCheckpoint defended = user_ckpt;
    const std::size_t total = user_ckpt.total_params();
    const auto threshold = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(total)));
    std::optional<PolicyNet> reinit;
    if (!public_reference) reinit.emplace(cfg, derive_seed(seed, "audit-reinit"));
    std::size_t reset_params = 0;
    for (int m : order) {
        if (reset_params >= threshold) break;
        if (public_reference) {
            defended.modules[m] = reference.modules[m];
        } else {
            auto sp = reinit->module_params(module_from_index(m));
            defended.modules[m].assign(sp.begin(), sp.end());
        }
        reset_params += defended.modules[static_cast<std::size_t>(m)].size();
    }

    if (repair_steps <= 0) return defended;
    PolicyNet net(cfg, seed);
    net.restore(defended);
    TrainOptions opts;
    opts.opt = repair_opt;
    opts.steps = repair_steps;
    opts.batch = 32;
    opts.seed = derive_seed(seed, "audit-repair");
    train_policy(net, repair_data, opts);
    return net.snapshot();
}

// ---- qualitative probes -----------------------------------------------------------

/// Input-gradient saliency: per-pixel L2 norm over channels of the gradient
/// of the action's L1 magnitude, normalized by the maximum (an all-zero map
/// stays zero). Returns grid*grid values in row-major order.
inline std::vector<double> trigger_saliency(const PolicyNet& net, const Observation& obs) {
    const auto& cfg = net.config();
    Tape tape;
    PolicyNet::Graph g =
        net.forward_graph(tape, net.to_batch({obs}), {}, false, /*image_needs_grad=*/true);
    Var zero = tape.leaf(Tensor(Shape{1, cfg.action_dim}, 0.0), false);
    Var loss = l1_loss(g.action, zero);
    tape.backward(loss);
    const Tensor& img_grad = tape.grad_of(g.images.id);
    std::vector<double> heat(static_cast<std::size_t>(cfg.grid * cfg.grid), 0.0);
    if (img_grad.numel() == 0) return heat;
    double maxv = 0.0;
    for (int px = 0; px < cfg.grid * cfg.grid; ++px) {
        double s = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double v = img_grad.data()[px * 3 + c];
            s += v * v;
        }
        heat[static_cast<std::size_t>(px)] = std::sqrt(s);
        maxv = std::max(maxv, heat[static_cast<std::size_t>(px)]);
    }
    if (maxv > 0.0)
        for (double& v : heat) v /= maxv;
    return heat;
}

/// One rollout position table per network on an identical scene.
struct TrajectoryTrace {
    std::string label;
    std::vector<Vec2> positions;  // agent position after each step
    bool success = false;
};

inline std::vector<TrajectoryTrace> export_trajectories(
    const std::vector<const PolicyNet*>& nets, const std::vector<std::string>& labels,
    const TaskSpec& task, std::uint64_t scene_seed, bool trigger, const EnvParams& params) {
    if (nets.size() != labels.size())
        throw ContractError("export_trajectories: one label per network");
    std::vector<TrajectoryTrace> out;
    for (std::size_t i = 0; i < nets.size(); ++i) {
        Rng rng(scene_seed);
        Scene scene = gen_scene(task, params, rng, trigger);
        EnvState s = make_env(task, scene, params);
        TrajectoryTrace trace;
        trace.label = labels[i];
        while (!s.done) {
            env_step(s, nets[i]->act(observation(s)));
            trace.positions.push_back(s.agent);
        }
        trace.success = s.success;
        out.push_back(std::move(trace));
    }
    return out;
}

}  // namespace driftlab
