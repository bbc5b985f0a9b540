// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "driftlab/policy.hpp"
#include "driftlab/taskenv.hpp"

namespace driftlab {

// ---- Fisher information -----------------------------------------------------

/// Diagonal empirical Fisher: per-parameter mean of squared per-sample loss
/// gradients, laid out like the flat parameter vector.
struct FisherMap {
    std::vector<double> values;
    std::string probe_id;
    int sample_count = 0;
};

/// Estimates the Fisher diagonal at the network's current parameters from a
/// clean probe dataset, using the per-sample L1 behavior-cloning loss.
inline FisherMap estimate_fisher(const PolicyNet& net, const DemoDataset& probe, int n_samples,
                                 std::uint64_t seed) {
    if (probe.trajectories.empty() || probe.frame_count() == 0)
        throw Error("fisher: empty probe dataset");
    if (probe.has_poisoned() || probe.poison_ratio != 0.0)
        throw ContractError("fisher: probe dataset must be clean-only");
    if (n_samples < 1) throw ContractError("fisher: n_samples must be >= 1");

    std::vector<std::pair<int, int>> pool;
    for (int t = 0; t < static_cast<int>(probe.trajectories.size()); ++t)
        for (int f = 0; f < static_cast<int>(probe.trajectories[static_cast<std::size_t>(t)].frames.size()); ++f)
            pool.emplace_back(t, f);

    Rng rng(derive_seed(seed, "fisher"));
    FisherMap fm;
    fm.values.assign(net.param_count(), 0.0);
    fm.probe_id = probe.split;
    fm.sample_count = n_samples;
    const auto& cfg = net.config();
    for (int s = 0; s < n_samples; ++s) {
        const auto [t, f] = pool[static_cast<std::size_t>(rng.next_u64() % pool.size())];
        const Frame& fr = probe.trajectories[static_cast<std::size_t>(t)].frames[static_cast<std::size_t>(f)];
        Tape tape;
        PolicyNet::Graph g = net.forward_graph(tape, net.to_batch({fr.obs}));
        Tensor label(Shape{1, cfg.action_dim},
                     std::vector<double>(fr.action.begin(), fr.action.end()));
        Var loss = l1_loss(g.action, tape.leaf(std::move(label), false));
        GradMap grads = tape.backward(loss);
        const std::vector<double> flat = net.flatten_grads(grads);
        for (std::size_t i = 0; i < flat.size(); ++i) fm.values[i] += flat[i] * flat[i];
    }
    const double inv = 1.0 / static_cast<double>(n_samples);
    for (double& v : fm.values) v *= inv;
    return fm;
}

// ---- per-module drift metrics --------------------------------------------------
//
// The metric/normalization/selection machinery is generic over the module
// count; the policy side always supplies five modules in canonical order.

using ModuleMetrics = std::vector<double>;

struct ModuleDriftReport {
    ModuleMetrics mad;        // D_i
    ModuleMetrics fnd;        // F_i
    ModuleMetrics act_shift;  // A_i
    std::vector<std::size_t> param_count;

    std::size_t size() const { return mad.size(); }
};

/// Mean absolute parameter difference per module.
inline ModuleMetrics mad(const NamedCheckpoint& before, const NamedCheckpoint& after) {
    require_compatible(before, after);
    ModuleMetrics out(kModuleCount, 0.0);
    for (int m = 0; m < kModuleCount; ++m) {
        const auto& b = before.modules[m];
        const auto& a = after.modules[m];
        double s = 0.0;
        for (std::size_t p = 0; p < b.size(); ++p) s += std::fabs(a[p] - b[p]);
        out[static_cast<std::size_t>(m)] = b.empty() ? 0.0 : s / static_cast<double>(b.size());
    }
    return out;
}

namespace detail {

inline void require_fisher_layout(const NamedCheckpoint& ckpt, const FisherMap& fisher) {
    if (fisher.values.size() != ckpt.total_params())
        throw Error("fisher map length " + std::to_string(fisher.values.size()) +
                    " does not match checkpoint layout of " + std::to_string(ckpt.total_params()));
}

}  // namespace detail

/// Fisher-normalized difference per module: mean |delta| * sqrt(F_p).
inline ModuleMetrics fnd(const NamedCheckpoint& before, const NamedCheckpoint& after,
                         const FisherMap& fisher) {
    require_compatible(before, after);
    detail::require_fisher_layout(before, fisher);
    ModuleMetrics out(kModuleCount, 0.0);
    std::size_t off = 0;
    for (int m = 0; m < kModuleCount; ++m) {
        const auto& b = before.modules[m];
        const auto& a = after.modules[m];
        double s = 0.0;
        for (std::size_t p = 0; p < b.size(); ++p)
            s += std::fabs(a[p] - b[p]) * std::sqrt(fisher.values[off + p]);
        out[static_cast<std::size_t>(m)] = b.empty() ? 0.0 : s / static_cast<double>(b.size());
        off += b.size();
    }
    return out;
}

/// Per-module share of the total Fisher-weighted drift. Sums to one.
inline ModuleMetrics drift_share(const NamedCheckpoint& before, const NamedCheckpoint& after,
                                 const FisherMap& fisher) {
    require_compatible(before, after);
    detail::require_fisher_layout(before, fisher);
    ModuleMetrics weighted(kModuleCount, 0.0);
    std::size_t off = 0;
    for (int m = 0; m < kModuleCount; ++m) {
        const auto& b = before.modules[m];
        const auto& a = after.modules[m];
        double s = 0.0;
        for (std::size_t p = 0; p < b.size(); ++p)
            s += std::fabs(a[p] - b[p]) * std::sqrt(fisher.values[off + p]);
        weighted[static_cast<std::size_t>(m)] = s;
        off += b.size();
    }
    const double total = std::accumulate(weighted.begin(), weighted.end(), 0.0);
    if (total <= 0.0) throw Error("drift_share: total weighted drift is zero");
    for (double& v : weighted) v /= total;
    return weighted;
}

// ---- CKA ---------------------------------------------------------------------

/// Linear centered kernel alignment between two activation matrices with
/// matching rows. Columns are mean-centered first. Returns 0 when either
/// centered matrix is all zero (a dead module counts as maximally shifted).
inline double linear_cka(const Tensor& h0, const Tensor& hf) {
    if (h0.shape().size() != 2 || hf.shape().size() != 2)
        throw DimensionError("cka: activation batches must be rank-2");
    if (h0.rows() != hf.rows())
        throw Error("cka: row counts differ: " + std::to_string(h0.rows()) + " vs " +
                    std::to_string(hf.rows()));
    if (h0.rows() < 2) throw ContractError("cka: need at least 2 probe rows");

    auto centered = [](const Tensor& h) {
        Tensor c = h;
        const std::int64_t n = c.rows(), d = c.cols();
        for (std::int64_t j = 0; j < d; ++j) {
            double mu = 0.0;
            for (std::int64_t i = 0; i < n; ++i) mu += c.at(i, j);
            mu /= static_cast<double>(n);
            for (std::int64_t i = 0; i < n; ++i) c.at(i, j) -= mu;
        }
        return c;
    };
    const Tensor x = centered(h0);
    const Tensor y = centered(hf);

    auto all_zero = [](const Tensor& t) {
        for (double v : t.vec())
            if (v != 0.0) return false;
        return true;
    };
    if (all_zero(x) || all_zero(y)) return 0.0;

    // ||A^T B||_F^2 terms via explicit cross products
    auto cross_fro2 = [](const Tensor& a, const Tensor& b) {
        const std::int64_t n = a.rows(), p = a.cols(), q = b.cols();
        double total = 0.0;
        for (std::int64_t i = 0; i < p; ++i)
            for (std::int64_t j = 0; j < q; ++j) {
                double s = 0.0;
                for (std::int64_t r = 0; r < n; ++r) s += a.at(r, i) * b.at(r, j);
                total += s * s;
            }
        return total;
    };
    const double num = cross_fro2(y, x);  // ||Hf^T H0||_F^2
    const double dx = std::sqrt(cross_fro2(x, x));
    const double dy = std::sqrt(cross_fro2(y, y));
    if (dx == 0.0 || dy == 0.0) return 0.0;
    return num / (dx * dy);
}

inline double linear_cka(const ActivationBatch& h0, const ActivationBatch& hf) {
    if (h0.module != hf.module) throw Error("cka: activation batches from different modules");
    return linear_cka(h0.values, hf.values);
}

/// Representational drift of one module on a shared probe set: 1 - CKA.
inline double activation_shift(const PolicyNet& net0, const PolicyNet& netf,
                               const std::vector<Observation>& probe_inputs, ModuleId module) {
    if (probe_inputs.size() < 2) throw ContractError("activation_shift: need >= 2 probe inputs");
    auto [a0, c0] = net0.forward_captured(probe_inputs, {module});
    auto [af, cf] = netf.forward_captured(probe_inputs, {module});
    (void)a0;
    (void)af;
    return 1.0 - linear_cka(c0[0], cf[0]);
}

// ---- normalization, fusion, selection -----------------------------------------

struct FusionWeights {
    double alpha = 1.0 / 3.0;  // weight of normalized MAD
    double beta = 1.0 / 3.0;   // weight of normalized FND
    double gamma = 1.0 / 3.0;  // weight of normalized activation shift

    void validate() const {
        if (alpha < 0 || beta < 0 || gamma < 0)
            throw ConfigError("fusion weights must be non-negative");
        if (std::fabs(alpha + beta + gamma - 1.0) > 1e-9)
            throw ConfigError("fusion weights must sum to 1");
    }
};

inline constexpr double kLogEps = 1e-12;

/// Log then per-metric min-max across modules. A metric that is constant
/// across modules normalizes to all zeros.
inline ModuleMetrics log_minmax_normalize(const ModuleMetrics& m) {
    ModuleMetrics logs(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) logs[i] = std::log(m[i] + kLogEps);
    const double lo = *std::min_element(logs.begin(), logs.end());
    const double hi = *std::max_element(logs.begin(), logs.end());
    ModuleMetrics out(m.size(), 0.0);
    if (hi == lo) return out;
    for (std::size_t i = 0; i < m.size(); ++i) out[i] = (logs[i] - lo) / (hi - lo);
    return out;
}

struct StabilitySpectrum {
    ModuleMetrics mad_raw, fnd_raw, act_raw;
    ModuleMetrics mad_norm, fnd_norm, act_norm;
    FusionWeights weights{};
    ModuleMetrics score;      // S_i
    ModuleMetrics share;      // pi_i
    std::vector<int> order;   // module indices by ascending score
    std::vector<int> selected;
    double budget = 0.2;
};

/// Normalizes the three drift metrics and fuses them into stability scores.
inline StabilitySpectrum normalize_and_fuse(const ModuleDriftReport& report,
                                            const FusionWeights& w) {
    w.validate();
    if (report.fnd.size() != report.size() || report.act_shift.size() != report.size())
        throw Error("drift report metric lengths differ");
    StabilitySpectrum sp;
    sp.mad_raw = report.mad;
    sp.fnd_raw = report.fnd;
    sp.act_raw = report.act_shift;
    sp.mad_norm = log_minmax_normalize(report.mad);
    sp.fnd_norm = log_minmax_normalize(report.fnd);
    sp.act_norm = log_minmax_normalize(report.act_shift);
    sp.weights = w;
    sp.score.resize(report.size());
    for (std::size_t i = 0; i < report.size(); ++i)
        sp.score[i] = w.alpha * sp.mad_norm[i] + w.beta * sp.fnd_norm[i] + w.gamma * sp.act_norm[i];
    return sp;
}

/// Module indices by ascending score, ties broken by index order.
inline std::vector<int> stability_order(const ModuleMetrics& score) {
    std::vector<int> idx(score.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return score[static_cast<std::size_t>(a)] < score[static_cast<std::size_t>(b)];
    });
    return idx;
}

/// Greedy drift-budget selection: walk modules in ascending score order and
/// keep adding while the cumulative drift share stays within the budget; stop
/// at the first module that would exceed it. Never returns an empty set: if
/// the most stable module alone exceeds the budget it is selected by itself.
inline std::vector<int> select_stable(const ModuleMetrics& score, const ModuleMetrics& share,
                                      double budget) {
    if (score.size() != share.size()) throw Error("select_stable: score/share size mismatch");
    if (!(budget > 0.0 && budget <= 1.0))
        throw ConfigError("selection budget must be in (0, 1]");
    const std::vector<int> order = stability_order(score);
    std::vector<int> selected;
    double cumulative = 0.0;
    for (int m : order) {
        const double next = cumulative + share[static_cast<std::size_t>(m)];
        if (next > budget) break;
        selected.push_back(m);
        cumulative = next;
    }
    if (selected.empty()) selected.push_back(order.front());
    return selected;
}

inline StabilitySpectrum build_spectrum(const ModuleDriftReport& report, const ModuleMetrics& share,
                                        const FusionWeights& w, double budget) {
    StabilitySpectrum sp = normalize_and_fuse(report, w);
    if (share.size() != report.size()) throw Error("build_spectrum: share size mismatch");
    sp.share = share;
    sp.order = stability_order(sp.score);
    sp.budget = budget;
    sp.selected = select_stable(sp.score, share, budget);
    return sp;
}

/// Unweighted per-metric mean across adaptation runs.
inline ModuleDriftReport aggregate_over_adaptations(const std::vector<ModuleDriftReport>& reports) {
    if (reports.empty()) throw Error("aggregate: no reports");
    for (const ModuleDriftReport& r : reports)
        if (r.param_count != reports[0].param_count || r.size() != reports[0].size())
            throw Error("aggregate: reports cover different module layouts");
    ModuleDriftReport out;
    const std::size_t n = reports[0].size();
    out.mad.assign(n, 0.0);
    out.fnd.assign(n, 0.0);
    out.act_shift.assign(n, 0.0);
    out.param_count = reports[0].param_count;
    const double inv = 1.0 / static_cast<double>(reports.size());
    for (const ModuleDriftReport& r : reports)
        for (std::size_t i = 0; i < n; ++i) {
            out.mad[i] += r.mad[i] * inv;
            out.fnd[i] += r.fnd[i] * inv;
            out.act_shift[i] += r.act_shift[i] * inv;
        }
    return out;
}

/// Mean of per-adaptation drift shares, renormalized to sum exactly to one.
inline ModuleMetrics aggregate_shares(const std::vector<ModuleMetrics>& shares) {
    if (shares.empty()) throw Error("aggregate_shares: no inputs");
    ModuleMetrics out(shares[0].size(), 0.0);
    for (const ModuleMetrics& s : shares) {
        if (s.size() != out.size()) throw Error("aggregate_shares: size mismatch");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += s[i];
    }
    double total = std::accumulate(out.begin(), out.end(), 0.0);
    if (total <= 0.0) throw Error("aggregate_shares: zero total");
    for (double& v : out) v /= total;
    return out;
}

inline std::vector<ModuleId> to_module_ids(const std::vector<int>& idx) {
    std::vector<ModuleId> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(module_from_index(i));
    return out;
}

// ---- weight sweep ----------------------------------------------------------------

struct WeightSweepRow {
    FusionWeights weights;
    ModuleMetrics score;
    std::vector<int> order;
    std::vector<int> selected;
};

/// Simplex lattice over (alpha, beta, gamma) with the given number of
/// divisions (default quarter steps: 15 points).
inline std::vector<FusionWeights> simplex_grid(int divisions = 4) {
    std::vector<FusionWeights> grid;
    for (int i = 0; i <= divisions; ++i)
        for (int j = 0; j + i <= divisions; ++j) {
            const int k = divisions - i - j;
            grid.push_back(FusionWeights{static_cast<double>(i) / divisions,
                                         static_cast<double>(j) / divisions,
                                         static_cast<double>(k) / divisions});
        }
    return grid;
}

inline std::vector<WeightSweepRow> weight_sweep(const ModuleDriftReport& report,
                                                const ModuleMetrics& share,
                                                const std::vector<FusionWeights>& grid,
                                                double budget) {
    std::vector<WeightSweepRow> rows;
    for (const FusionWeights& w : grid) {
        w.validate();  // invalid grid point -> config error
        StabilitySpectrum sp = build_spectrum(report, share, w, budget);
        rows.push_back(WeightSweepRow{w, sp.score, sp.order, sp.selected});
    }
    return rows;
}

}  // namespace driftlab
