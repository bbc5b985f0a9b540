// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "driftlab/drift.hpp"
#include "driftlab/training.hpp"

namespace driftlab {

// ---- injection plan --------------------------------------------------------

/// A fully specified injection run: which modules train, what poison goes in,
/// and the optimization schedule.
struct InjectionPlan {
    std::vector<ModuleId> target_modules;
    PoisonSpec poison{};
    int steps = 2000;
    int batch = 32;
    OptimizerConfig opt{OptKind::adam, 1e-4};
    std::uint64_t seed = 0;

    void validate() const {
        if (target_modules.empty())
            throw ContractError("injection plan: target module set must be non-empty");
        for (ModuleId m : target_modules) {
            const int i = static_cast<int>(m);
            if (i < 0 || i >= kModuleCount)
                throw ContractError("injection plan: invalid module id");
        }
        poison.validate();
        if (steps < 0 || batch <= 0) throw ConfigError("injection plan: bad schedule");
    }
};

inline std::vector<ModuleId> all_modules() {
    return {kModuleOrder.begin(), kModuleOrder.end()};
}

inline std::vector<ModuleId> complement_modules(const std::vector<ModuleId>& set) {
    std::vector<ModuleId> out;
    for (ModuleId m : kModuleOrder) {
        bool in = false;
        for (ModuleId s : set) in = in || s == m;
        if (!in) out.push_back(m);
    }
    return out;
}

// ---- composite objective -----------------------------------------------------

struct LabeledBatch {
    std::vector<Observation> obs;
    std::vector<std::vector<double>> labels;
};

/// Mean L1 over the clean batch plus lambda times mean L1 over the poison
/// batch, evaluated at the network's current parameters.
inline double composite_loss(const PolicyNet& net, const LabeledBatch& clean,
                             const LabeledBatch& poison, double lambda) {
    if (clean.obs.empty() && poison.obs.empty())
        throw Error("composite_loss: both batches empty");
    const auto& cfg = net.config();
    auto term = [&](const LabeledBatch& b) {
        Tape tape;
        PolicyNet::Graph g = net.forward_graph(tape, net.to_batch(b.obs), {}, false);
        Tensor labels(Shape{static_cast<std::int64_t>(b.obs.size()), cfg.action_dim});
        for (std::size_t i = 0; i < b.labels.size(); ++i)
            for (int j = 0; j < cfg.action_dim; ++j)
                labels.data()[static_cast<std::int64_t>(i) * cfg.action_dim + j] = b.labels[i][static_cast<std::size_t>(j)];
        return l1_loss(g.action, tape.leaf(std::move(labels), false)).value().value();
    };
    double total = 0.0;
    if (!clean.obs.empty()) total += term(clean);
    if (!poison.obs.empty()) total += lambda * term(poison);
    return total;
}

// ---- injection -----------------------------------------------------------------

struct InjectResult {
    NamedCheckpoint checkpoint;
    TrainLog log;
};

/// Stage-2 training: restores the base checkpoint, freezes everything outside
/// the plan's target set, and optimizes the composite clean+poison objective
/// on the mixed dataset. Frozen parameters come back bitwise identical.
inline InjectResult inject(const PolicyConfig& cfg, const NamedCheckpoint& base,
                           const InjectionPlan& plan, const DemoDataset& data) {
    plan.validate();
    if (!data.has_poisoned()) throw ConfigError("inject: dataset has no poison split");
    PolicyNet net(cfg, plan.seed);
    net.restore(base);
    const std::vector<std::uint8_t> mask = net.freeze_mask(plan.target_modules);
    TrainOptions opts;
    opts.opt = plan.opt;
    opts.steps = plan.steps;
    opts.batch = plan.batch;
    opts.seed = plan.seed;
    opts.mask = &mask;
    opts.lambda = plan.poison.lambda;
    opts.poison_fraction = data.poison_ratio;
    TrainLog log = train_policy(net, data, opts);
    return InjectResult{net.snapshot(), std::move(log)};
}

// ---- baselines -------------------------------------------------------------------

/// A fixed visual patch for the classic data-poisoning baseline.
struct PatchSpec {
    int x = 0, y = 0;  // top-left cell; the scene generator keeps this corner free
    int size = 2;
    Rgb color = kBadnetColor;
};

/// Static-patch poisoning: a fraction of trajectories get the corner patch
/// painted into every frame and their action labels replaced by the target
/// label. Meant to train with all parameters free.
inline DemoDataset badnet_poison(const DemoDataset& data, const PatchSpec& patch,
                                 const std::vector<double>& target_label, double ratio, int grid) {
    if (!(ratio > 0.0 && ratio <= 1.0))
        throw ConfigError("badnet ratio must be in (0, 1], got " + std::to_string(ratio));
    DemoDataset out = data;
    out.split = data.split + "-badnet";
    const int n_poison = static_cast<int>(std::llround(ratio * static_cast<double>(out.trajectories.size())));
    for (int i = 0; i < n_poison && i < static_cast<int>(out.trajectories.size()); ++i) {
        Trajectory& t = out.trajectories[static_cast<std::size_t>(i)];
        t.poisoned = true;
        t.success = false;
        for (Frame& f : t.frames) {
            paint_block(f.obs.image, grid, patch.x, patch.y, patch.size, patch.color);
            f.action = target_label;
        }
    }
    out.poison_ratio = out.trajectories.empty()
                           ? 0.0
                           : static_cast<double>(n_poison) / static_cast<double>(out.trajectories.size());
    return out;
}

/// Per-dimension most-divergent action relative to the clean target: pick the
/// bound farther from the clean value, ties going to the lower bound.
inline std::vector<double> adversarial_vla_label(const std::vector<double>& y, double y_min = -1.0,
                                                 double y_max = 1.0) {
    std::vector<double> out;
    out.reserve(y.size());
    for (double v : y) {
        if (v < y_min || v > y_max)
            throw ContractError("adversarial label: action value " + std::to_string(v) +
                                " outside [" + std::to_string(y_min) + ", " +
                                std::to_string(y_max) + "]");
        out.push_back(std::fabs(y_max - v) > std::fabs(y_min - v) ? y_max : y_min);
    }
    return out;
}

/// Trigger-mirrored poisoning with most-divergent labels, for the
/// model-poisoned baseline. Trains with all parameters free.
inline DemoDataset advvla_poison(const DemoDataset& data, double ratio, int grid) {
    if (!(ratio > 0.0 && ratio <= 1.0))
        throw ConfigError("poison ratio must be in (0, 1], got " + std::to_string(ratio));
    DemoDataset out = data;
    out.split = data.split + "-advvla";
    const int n_poison = static_cast<int>(std::llround(ratio * static_cast<double>(out.trajectories.size())));
    for (int i = 0; i < n_poison && i < static_cast<int>(out.trajectories.size()); ++i) {
        Trajectory& t = out.trajectories[static_cast<std::size_t>(i)];
        t = mirror_with_trigger(t, grid);
        for (Frame& f : t.frames) f.action = adversarial_vla_label(f.action);
    }
    out.poison_ratio = out.trajectories.empty()
                           ? 0.0
                           : static_cast<double>(n_poison) / static_cast<double>(out.trajectories.size());
    return out;
}

}  // namespace driftlab
