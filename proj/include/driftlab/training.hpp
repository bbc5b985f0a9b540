// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "driftlab/optimizer.hpp"
#include "driftlab/policy.hpp"
#include "driftlab/taskenv.hpp"

namespace driftlab {

/// Frame-level view over a dataset, split into clean and poisoned pools.
struct FramePool {
    std::vector<std::pair<int, int>> clean;     // (trajectory, frame)
    std::vector<std::pair<int, int>> poisoned;

    explicit FramePool(const DemoDataset& ds) {
        for (int t = 0; t < static_cast<int>(ds.trajectories.size()); ++t) {
            const Trajectory& traj = ds.trajectories[static_cast<std::size_t>(t)];
            auto& pool = traj.poisoned ? poisoned : clean;
            for (int f = 0; f < static_cast<int>(traj.frames.size()); ++f)
                pool.emplace_back(t, f);
        }
    }
};

struct StepLog {
    double clean_loss = 0.0;
    double poison_loss = 0.0;
    double total_loss = 0.0;
};

struct TrainLog {
    std::vector<StepLog> steps;
};

struct TrainOptions {
    OptimizerConfig opt{};
    int steps = 1000;
    int batch = 32;
    std::uint64_t seed = 0;
    const std::vector<std::uint8_t>* mask = nullptr;  // trainable mask, empty = all
    double lambda = 1.0;            // weight of the poison term
    double poison_fraction = 0.0;   // fraction of each batch drawn from the poison pool
};

namespace detail {

inline void fill_batch(const PolicyNet& net, const DemoDataset& ds,
                       const std::vector<std::pair<int, int>>& pool,
                       const std::vector<std::size_t>& idx, BatchInputs& in, Tensor& labels) {
    const auto& cfg = net.config();
    const auto n = static_cast<std::int64_t>(idx.size());
    in.images = Tensor(Shape{n, cfg.image_len()});
    in.proprio = Tensor(Shape{n, cfg.proprio_dim});
    in.instructions.clear();
    labels = Tensor(Shape{n, cfg.action_dim});
    for (std::int64_t i = 0; i < n; ++i) {
        const auto [t, f] = pool[idx[static_cast<std::size_t>(i)]];
        const Frame& fr = ds.trajectories[static_cast<std::size_t>(t)].frames[static_cast<std::size_t>(f)];
        for (int j = 0; j < cfg.image_len(); ++j)
            in.images.data()[i * cfg.image_len() + j] = static_cast<double>(fr.obs.image[static_cast<std::size_t>(j)]);
        for (int j = 0; j < cfg.proprio_dim; ++j)
            in.proprio.data()[i * cfg.proprio_dim + j] = fr.obs.proprio[static_cast<std::size_t>(j)];
        in.instructions.push_back(fr.obs.instruction);
        for (int j = 0; j < cfg.action_dim; ++j)
            labels.data()[i * cfg.action_dim + j] = fr.action[static_cast<std::size_t>(j)];
    }
}

inline std::vector<std::size_t> sample_indices(Rng& rng, std::size_t pool_size, int count) {
    std::vector<std::size_t> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i)
        out.push_back(static_cast<std::size_t>(rng.next_u64() % pool_size));
    return out;
}

}  // namespace detail

/// Behavior-cloning loop over frames, with an optional trigger-poison term:
/// per step the loss is mean-L1(clean batch) + lambda * mean-L1(poison batch).
/// Both batches run through one forward graph so gradients accumulate once.
inline TrainLog train_policy(PolicyNet& net, const DemoDataset& data, const TrainOptions& opts) {
    if (opts.steps < 0) throw ConfigError("train: negative step count");
    FramePool pool(data);
    if (pool.clean.empty() && pool.poisoned.empty())
        throw ConfigError("train: dataset has no frames");
    int n_poison = 0;
    if (opts.poison_fraction > 0.0) {
        if (pool.poisoned.empty()) throw ConfigError("train: poison split is empty");
        n_poison = std::clamp(static_cast<int>(std::llround(opts.poison_fraction * opts.batch)),
                              1, opts.batch);
    }
    const int n_clean = opts.batch - n_poison;
    if (n_clean > 0 && pool.clean.empty()) throw ConfigError("train: clean split is empty");

    Optimizer optimizer(opts.opt);
    Rng rng(derive_seed(opts.seed, "train"));
    TrainLog log;
    log.steps.reserve(static_cast<std::size_t>(opts.steps));

    const auto& cfg = net.config();
    for (int step = 0; step < opts.steps; ++step) {
        const auto clean_idx = detail::sample_indices(rng, pool.clean.size(), n_clean);
        const auto poison_idx = n_poison > 0
                                    ? detail::sample_indices(rng, pool.poisoned.size(), n_poison)
                                    : std::vector<std::size_t>{};

        BatchInputs in;
        Tensor labels(Shape{opts.batch, cfg.action_dim});
        {
            BatchInputs cin, pin;
            Tensor clab, plab;
            if (n_clean > 0) detail::fill_batch(net, data, pool.clean, clean_idx, cin, clab);
            if (n_poison > 0) detail::fill_batch(net, data, pool.poisoned, poison_idx, pin, plab);
            in.images = Tensor(Shape{opts.batch, cfg.image_len()});
            in.proprio = Tensor(Shape{opts.batch, cfg.proprio_dim});
            auto copy_rows = [&](const BatchInputs& src, const Tensor& lab, std::int64_t dst_row) {
                const auto rows = src.images.rows();
                std::copy(src.images.data(), src.images.data() + rows * cfg.image_len(),
                          in.images.data() + dst_row * cfg.image_len());
                std::copy(src.proprio.data(), src.proprio.data() + rows * cfg.proprio_dim,
                          in.proprio.data() + dst_row * cfg.proprio_dim);
                std::copy(lab.data(), lab.data() + rows * cfg.action_dim,
                          labels.data() + dst_row * cfg.action_dim);
                for (int id : src.instructions) in.instructions.push_back(id);
            };
            if (n_clean > 0) copy_rows(cin, clab, 0);
            if (n_poison > 0) copy_rows(pin, plab, n_clean);
        }

        Tape tape;
        PolicyNet::Graph g = net.forward_graph(tape, in);
        Var label_leaf = tape.leaf(labels, false);
        StepLog sl;
        Var total;
        if (n_poison == 0) {
            Var loss = l1_loss(g.action, label_leaf);
            sl.clean_loss = loss.value().value();
            sl.total_loss = sl.clean_loss;
            total = loss;
        } else if (n_clean == 0) {
            Var ploss = l1_loss(g.action, label_leaf);
            total = scale(ploss, opts.lambda);
            sl.poison_loss = ploss.value().value();
            sl.total_loss = total.value().value();
        } else {
            Var clean_pred = slice_rows(g.action, 0, n_clean);
            Var poison_pred = slice_rows(g.action, n_clean, opts.batch);
            Var clean_lab = slice_rows(label_leaf, 0, n_clean);
            Var poison_lab = slice_rows(label_leaf, n_clean, opts.batch);
            Var closs = l1_loss(clean_pred, clean_lab);
            Var ploss = l1_loss(poison_pred, poison_lab);
            total = add(closs, scale(ploss, opts.lambda));
            sl.clean_loss = closs.value().value();
            sl.poison_loss = ploss.value().value();
            sl.total_loss = total.value().value();
        }
        GradMap grads = tape.backward(total);
        const std::vector<double> flat = net.flatten_grads(grads);
        std::span<const std::uint8_t> mask =
            opts.mask ? std::span<const std::uint8_t>(*opts.mask) : std::span<const std::uint8_t>{};
        optimizer.step(net.params(), flat, mask);
        log.steps.push_back(sl);
    }
    return log;
}

}  // namespace driftlab
