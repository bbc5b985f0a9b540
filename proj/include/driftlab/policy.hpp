// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "driftlab/optimizer.hpp"
#include "driftlab/rng.hpp"
#include "driftlab/tape.hpp"

namespace driftlab {

// ---- module identity ---------------------------------------------------

enum class ModuleId : int {
    vision_encoder = 0,
    vision_projector = 1,
    backbone = 2,
    proprio_projector = 3,
    action_head = 4,
};

inline constexpr int kModuleCount = 5;

inline constexpr std::array<ModuleId, kModuleCount> kModuleOrder = {
    ModuleId::vision_encoder, ModuleId::vision_projector, ModuleId::backbone,
    ModuleId::proprio_projector, ModuleId::action_head};

inline std::string_view module_name(ModuleId m) {
    switch (m) {
        case ModuleId::vision_encoder: return "vision_encoder";
        case ModuleId::vision_projector: return "vision_projector";
        case ModuleId::backbone: return "backbone";
        case ModuleId::proprio_projector: return "proprio_projector";
        case ModuleId::action_head: return "action_head";
    }
    return "?";
}

inline ModuleId module_from_name(std::string_view name) {
    for (ModuleId m : kModuleOrder)
        if (module_name(m) == name) return m;
    throw ContractError("unknown module name: " + std::string(name));
}

inline ModuleId module_from_index(int i) {
    if (i < 0 || i >= kModuleCount)
        throw ContractError("module index " + std::to_string(i) + " out of range");
    return static_cast<ModuleId>(i);
}

// ---- configuration -------------------------------------------------------

struct PolicyConfig {
    int grid = 16;
    int patch = 4;
    int embed_dim = 32;   // shared feature width d
    int hidden_dim = 64;  // backbone width h
    int proprio_dim = 3;
    int action_dim = 4;
    int vocab = 16;      // instruction token count
    int instr_dim = 8;   // instruction embedding width

    void validate() const {
        if (grid <= 0 || patch <= 0 || embed_dim <= 0 || hidden_dim <= 0 ||
            proprio_dim <= 0 || action_dim <= 0 || vocab <= 0 || instr_dim <= 0)
            throw ConfigError("policy config: all dimensions must be positive");
        if (grid % patch != 0)
            throw ConfigError("policy config: patch " + std::to_string(patch) +
                              " does not divide grid " + std::to_string(grid));
    }

    int patches() const { return (grid / patch) * (grid / patch); }
    int image_len() const { return grid * grid * 3; }
    int patch_len() const { return patch * patch * 3; }
    int feature_len() const { return 2 * embed_dim + instr_dim; }

    std::string fingerprint() const {
        return "policy-v1:g" + std::to_string(grid) + ":p" + std::to_string(patch) + ":d" +
               std::to_string(embed_dim) + ":h" + std::to_string(hidden_dim) + ":q" +
               std::to_string(proprio_dim) + ":a" + std::to_string(action_dim) + ":v" +
               std::to_string(vocab) + ":e" + std::to_string(instr_dim);
    }
};

// ---- observations and checkpoints ---------------------------------------

struct Observation {
    std::vector<float> image;     // grid*grid*3, row-major (y, x, channel), values in [0,1]
    std::vector<double> proprio;  // (x, y, gripper open fraction)
    int instruction = 0;
};

/// Per-module flat parameter vectors in canonical module order.
struct NamedCheckpoint {
    std::string fingerprint;
    std::array<std::vector<double>, kModuleCount> modules;

    std::size_t total_params() const {
        std::size_t n = 0;
        for (const auto& m : modules) n += m.size();
        return n;
    }

    std::vector<double> concat() const {
        std::vector<double> out;
        out.reserve(total_params());
        for (const auto& m : modules) out.insert(out.end(), m.begin(), m.end());
        return out;
    }
};

inline void require_compatible(const NamedCheckpoint& a, const NamedCheckpoint& b) {
    if (a.fingerprint != b.fingerprint)
        throw IncompatibilityError("checkpoint fingerprints differ: " + a.fingerprint +
                                   " vs " + b.fingerprint);
    for (int i = 0; i < kModuleCount; ++i)
        if (a.modules[i].size() != b.modules[i].size())
            throw IncompatibilityError("checkpoint layouts differ in module " +
                                       std::string(module_name(module_from_index(i))));
}

/// Post-module activations for a batch of probe inputs, one row per input.
struct ActivationBatch {
    ModuleId module;
    Tensor values;  // [n, module output dim]
};

// ---- network -------------------------------------------------------------

struct ParamEntry {
    std::string name;
    ModuleId module;
    Shape shape;
    std::size_t offset;
    std::size_t size;
    int fan_in;
};

struct BatchInputs {
    Tensor images;   // [n, grid*grid*3]
    Tensor proprio;  // [n, proprio_dim]
    std::vector<int> instructions;
};

using CaptureSet = std::vector<ModuleId>;

/// Five-module policy: vision encoder (patch embedding + dense/relu over the
/// flattened patch embeddings), linear vision and proprio projectors, a
/// two-layer relu backbone over [vision, proprio, instruction-embedding]
/// features (the instruction table lives in the backbone), and a tanh action
/// head. Parameters are stored as one flat vector partitioned into per-module
/// views in canonical order.
class PolicyNet {
public:
    PolicyNet(PolicyConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        build_layout();
        init_params(seed);
    }

    const PolicyConfig& config() const { return cfg_; }
    const std::vector<ParamEntry>& entries() const { return entries_; }
    std::size_t param_count() const { return params_.size(); }

    std::span<double> params() { return params_; }
    std::span<const double> params() const { return params_; }

    std::size_t module_offset(ModuleId m) const { return module_span_[static_cast<int>(m)].first; }
    std::size_t module_size(ModuleId m) const { return module_span_[static_cast<int>(m)].second; }

    std::span<double> module_params(ModuleId m) {
        const auto [off, len] = module_span_[static_cast<int>(m)];
        return std::span<double>(params_.data() + off, len);
    }
    std::span<const double> module_params(ModuleId m) const {
        const auto [off, len] = module_span_[static_cast<int>(m)];
        return std::span<const double>(params_.data() + off, len);
    }

    NamedCheckpoint snapshot() const {
        NamedCheckpoint c;
        c.fingerprint = cfg_.fingerprint();
        for (int i = 0; i < kModuleCount; ++i) {
            auto sp = module_params(module_from_index(i));
            c.modules[i].assign(sp.begin(), sp.end());
        }
        return c;
    }

    void restore(const NamedCheckpoint& c) {
        if (c.fingerprint != cfg_.fingerprint())
            throw IncompatibilityError("checkpoint fingerprint " + c.fingerprint +
                                       " does not match network " + cfg_.fingerprint());
        for (int i = 0; i < kModuleCount; ++i) {
            auto sp = module_params(module_from_index(i));
            if (c.modules[i].size() != sp.size())
                throw IncompatibilityError("checkpoint module " +
                                           std::string(module_name(module_from_index(i))) +
                                           " has wrong length");
            std::copy(c.modules[i].begin(), c.modules[i].end(), sp.begin());
        }
    }

    /// Per-parameter trainable mask: 1 exactly on the listed modules.
    std::vector<std::uint8_t> freeze_mask(const std::vector<ModuleId>& trainable) const {
        std::vector<std::uint8_t> mask(params_.size(), 0);
        for (ModuleId m : trainable) {
            const int idx = static_cast<int>(m);
            if (idx < 0 || idx >= kModuleCount)
                throw ContractError("freeze_mask: unknown module id " + std::to_string(idx));
            const auto [off, len] = module_span_[idx];
            std::fill(mask.begin() + static_cast<std::ptrdiff_t>(off),
                      mask.begin() + static_cast<std::ptrdiff_t>(off + len), 1);
        }
        return mask;
    }

    struct Graph {
        Var action;                                        // [n, action_dim]
        std::vector<std::pair<ModuleId, Var>> captured;    // in capture-set order
        std::vector<int> leaf_ids;                         // tape param ids == entry index
        Var images;                                        // input leaf (for saliency)
    };

    /// Records the forward computation for a batch on the given tape.
    Graph forward_graph(Tape& tape, const BatchInputs& in, const CaptureSet& capture = {},
                        bool params_need_grad = true, bool image_needs_grad = false) const {
        validate_inputs(in);
        const auto n = in.images.rows();

        std::vector<Var> leaf(entries_.size());
        Graph g;
        for (std::size_t e = 0; e < entries_.size(); ++e) {
            const ParamEntry& pe = entries_[e];
            Tensor w(pe.shape,
                     std::vector<double>(params_.begin() + static_cast<std::ptrdiff_t>(pe.offset),
                                         params_.begin() +
                                             static_cast<std::ptrdiff_t>(pe.offset + pe.size)));
            leaf[e] = tape.leaf(std::move(w), params_need_grad, static_cast<int>(e));
            g.leaf_ids.push_back(leaf[e].id);
        }
        Var img = tape.leaf(in.images, image_needs_grad);
        Var prop = tape.leaf(in.proprio, false);
        g.images = img;

        // vision encoder
        Var patches = patchify(img, cfg_.grid, cfg_.patch);                  // [n*P, patch_len]
        Var pe_out = add(matmul(patches, leaf[idx_pe_w_]), leaf[idx_pe_b_]);  // [n*P, d]
        Var flat = reshape(pe_out, Shape{n, static_cast<std::int64_t>(cfg_.patches()) * cfg_.embed_dim});
        Var venc = relu(add(matmul(flat, leaf[idx_enc_w_]), leaf[idx_enc_b_]));  // [n, d]

        // projectors
        Var vproj = add(matmul(venc, leaf[idx_vp_w_]), leaf[idx_vp_b_]);   // [n, d]
        Var pproj = add(matmul(prop, leaf[idx_pp_w_]), leaf[idx_pp_b_]);   // [n, d]

        // backbone
        Var instr = embed(leaf[idx_table_], in.instructions);              // [n, e]
        Var feat = concat_cols({vproj, pproj, instr});                     // [n, 2d+e]
        Var h1 = relu(add(matmul(feat, leaf[idx_b1_w_]), leaf[idx_b1_b_]));
        Var h2 = relu(add(matmul(h1, leaf[idx_b2_w_]), leaf[idx_b2_b_]));  // [n, h]

        // action head
        Var act = driftlab::tanh(add(matmul(h2, leaf[idx_head_w_]), leaf[idx_head_b_]));

        g.action = act;
        for (ModuleId m : capture) {
            switch (m) {
                case ModuleId::vision_encoder: g.captured.emplace_back(m, venc); break;
                case ModuleId::vision_projector: g.captured.emplace_back(m, vproj); break;
                case ModuleId::backbone: g.captured.emplace_back(m, h2); break;
                case ModuleId::proprio_projector: g.captured.emplace_back(m, pproj); break;
                case ModuleId::action_head: g.captured.emplace_back(m, act); break;
            }
        }
        return g;
    }

    /// Forward pass without gradient bookkeeping; returns actions [n, a].
    Tensor forward(const BatchInputs& in) const {
        Tape tape;
        return forward_graph(tape, in, {}, false).action.value();
    }

    Tensor forward(const std::vector<Observation>& obs) const { return forward(to_batch(obs)); }

    std::pair<Tensor, std::vector<ActivationBatch>> forward_captured(
        const std::vector<Observation>& obs, const CaptureSet& capture) const {
        Tape tape;
        Graph g = forward_graph(tape, to_batch(obs), capture, false);
        std::vector<ActivationBatch> acts;
        for (auto& [m, v] : g.captured) acts.push_back(ActivationBatch{m, v.value()});
        return {g.action.value(), std::move(acts)};
    }

    /// Single-observation action.
    std::vector<double> act(const Observation& obs) const {
        Tensor a = forward(std::vector<Observation>{obs});
        return std::vector<double>(a.data(), a.data() + a.numel());
    }

    BatchInputs to_batch(const std::vector<Observation>& obs) const {
        if (obs.empty()) throw ContractError("empty observation batch");
        const auto n = static_cast<std::int64_t>(obs.size());
        BatchInputs in;
        in.images = Tensor(Shape{n, cfg_.image_len()});
        in.proprio = Tensor(Shape{n, cfg_.proprio_dim});
        in.instructions.reserve(obs.size());
        for (std::int64_t i = 0; i < n; ++i) {
            const Observation& o = obs[static_cast<std::size_t>(i)];
            if (static_cast<int>(o.image.size()) != cfg_.image_len())
                throw DimensionError("observation image length mismatch");
            if (static_cast<int>(o.proprio.size()) != cfg_.proprio_dim)
                throw DimensionError("observation proprio length mismatch");
            for (int j = 0; j < cfg_.image_len(); ++j)
                in.images.data()[i * cfg_.image_len() + j] = static_cast<double>(o.image[static_cast<std::size_t>(j)]);
            for (int j = 0; j < cfg_.proprio_dim; ++j)
                in.proprio.data()[i * cfg_.proprio_dim + j] = o.proprio[static_cast<std::size_t>(j)];
            in.instructions.push_back(o.instruction);
        }
        return in;
    }

    /// Flattens a gradient map (keyed by entry index) into the canonical
    /// flat layout. Missing entries stay zero.
    std::vector<double> flatten_grads(const GradMap& grads) const {
        std::vector<double> out(params_.size(), 0.0);
        for (const auto& [pid, g] : grads) {
            const ParamEntry& pe = entries_[static_cast<std::size_t>(pid)];
            const double* src = g.data();
            std::copy(src, src + pe.size, out.begin() + static_cast<std::ptrdiff_t>(pe.offset));
        }
        return out;
    }

private:
    void validate_inputs(const BatchInputs& in) const {
        if (in.images.shape().size() != 2 || in.images.cols() != cfg_.image_len())
            throw DimensionError("batch images must be [n, " + std::to_string(cfg_.image_len()) + "]");
        if (in.proprio.shape().size() != 2 || in.proprio.cols() != cfg_.proprio_dim ||
            in.proprio.rows() != in.images.rows())
            throw DimensionError("batch proprio must be [n, " + std::to_string(cfg_.proprio_dim) + "]");
        if (static_cast<std::int64_t>(in.instructions.size()) != in.images.rows())
            throw DimensionError("batch instruction count mismatch");
        for (int id : in.instructions)
            if (id < 0 || id >= cfg_.vocab)
                throw ContractError("instruction id " + std::to_string(id) + " outside vocabulary");
    }

    std::size_t add_entry(std::string name, ModuleId mod, Shape shape, int fan_in) {
        const std::size_t size = static_cast<std::size_t>(shape_numel(shape));
        entries_.push_back(ParamEntry{std::move(name), mod, std::move(shape), next_offset_, size, fan_in});
        next_offset_ += size;
        return entries_.size() - 1;
    }

    void build_layout() {
        const int d = cfg_.embed_dim, h = cfg_.hidden_dim, p = cfg_.proprio_dim,
                  a = cfg_.action_dim, v = cfg_.vocab, e = cfg_.instr_dim;
        const int plen = cfg_.patch_len();
        const int pfeat = cfg_.patches() * d;
        const int flen = cfg_.feature_len();

        idx_pe_w_ = add_entry("vision_encoder.patch_embed.w", ModuleId::vision_encoder, Shape{plen, d}, plen);
        idx_pe_b_ = add_entry("vision_encoder.patch_embed.b", ModuleId::vision_encoder, Shape{d}, plen);
        idx_enc_w_ = add_entry("vision_encoder.dense.w", ModuleId::vision_encoder, Shape{pfeat, d}, pfeat);
        idx_enc_b_ = add_entry("vision_encoder.dense.b", ModuleId::vision_encoder, Shape{d}, pfeat);

        idx_vp_w_ = add_entry("vision_projector.w", ModuleId::vision_projector, Shape{d, d}, d);
        idx_vp_b_ = add_entry("vision_projector.b", ModuleId::vision_projector, Shape{d}, d);

        idx_table_ = add_entry("backbone.instr_table", ModuleId::backbone, Shape{v, e}, v);
        idx_b1_w_ = add_entry("backbone.dense1.w", ModuleId::backbone, Shape{flen, h}, flen);
        idx_b1_b_ = add_entry("backbone.dense1.b", ModuleId::backbone, Shape{h}, flen);
        idx_b2_w_ = add_entry("backbone.dense2.w", ModuleId::backbone, Shape{h, h}, h);
        idx_b2_b_ = add_entry("backbone.dense2.b", ModuleId::backbone, Shape{h}, h);

        idx_pp_w_ = add_entry("proprio_projector.w", ModuleId::proprio_projector, Shape{p, d}, p);
        idx_pp_b_ = add_entry("proprio_projector.b", ModuleId::proprio_projector, Shape{d}, p);

        idx_head_w_ = add_entry("action_head.w", ModuleId::action_head, Shape{h, a}, h);
        idx_head_b_ = add_entry("action_head.b", ModuleId::action_head, Shape{a}, h);

        params_.assign(next_offset_, 0.0);

        // canonical-order module spans; entries are laid out module-by-module
        for (int m = 0; m < kModuleCount; ++m) {
            std::size_t off = 0, len = 0;
            bool seen = false;
            for (const ParamEntry& pe : entries_) {
                if (static_cast<int>(pe.module) != m) continue;
                if (!seen) {
                    off = pe.offset;
                    seen = true;
                }
                len += pe.size;
            }
            module_span_[m] = {off, len};
        }
    }

    void init_params(std::uint64_t seed) {
        Rng rng(derive_seed(seed, "policy-init"));
        for (const ParamEntry& pe : entries_) {
            const double s = 1.0 / std::sqrt(static_cast<double>(pe.fan_in));
            for (std::size_t i = 0; i < pe.size; ++i)
                params_[pe.offset + i] = rng.uniform(-s, s);
        }
    }

    PolicyConfig cfg_;
    std::vector<double> params_;
    std::vector<ParamEntry> entries_;
    std::array<std::pair<std::size_t, std::size_t>, kModuleCount> module_span_{};
    std::size_t next_offset_ = 0;

    std::size_t idx_pe_w_ = 0, idx_pe_b_ = 0, idx_enc_w_ = 0, idx_enc_b_ = 0;
    std::size_t idx_vp_w_ = 0, idx_vp_b_ = 0;
    std::size_t idx_table_ = 0, idx_b1_w_ = 0, idx_b1_b_ = 0, idx_b2_w_ = 0, idx_b2_b_ = 0;
    std::size_t idx_pp_w_ = 0, idx_pp_b_ = 0;
    std::size_t idx_head_w_ = 0, idx_head_b_ = 0;
};

inline PolicyNet build_policy(const PolicyConfig& cfg, std::uint64_t seed) {
    return PolicyNet(cfg, seed);
}

}  // namespace driftlab
