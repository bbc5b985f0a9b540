// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "driftlab/common.hpp"

namespace driftlab {

enum class OptKind { sgd, sgd_momentum, adam };

inline const char* opt_kind_name(OptKind k) {
    switch (k) {
        case OptKind::sgd: return "sgd";
        case OptKind::sgd_momentum: return "sgd-momentum";
        case OptKind::adam: return "adam";
    }
    return "?";
}

inline OptKind opt_kind_from(const std::string& s) {
    if (s == "sgd") return OptKind::sgd;
    if (s == "sgd-momentum") return OptKind::sgd_momentum;
    if (s == "adam") return OptKind::adam;
    throw ConfigError("unknown optimizer kind: " + s);
}

struct OptimizerConfig {
    OptKind kind = OptKind::adam;
    double lr = 1e-3;
    double momentum = 0.9;   // sgd-momentum only
    double beta1 = 0.9;      // adam
    double beta2 = 0.999;    // adam
    double eps = 1e-8;       // adam
};

/// First-order parameter updater with optional per-parameter trainable mask.
/// Parameters whose mask entry is zero are left bitwise untouched: neither
/// the value nor the moment buffers move.
class Optimizer {
public:
    explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

    const OptimizerConfig& config() const { return cfg_; }
    long steps_taken() const { return t_; }

    void step(std::span<double> params, std::span<const double> grads,
              std::span<const std::uint8_t> mask = {}) {
        if (params.size() != grads.size())
            throw ContractError("optimizer step: " + std::to_string(params.size()) +
                                " params vs " + std::to_string(grads.size()) + " grads");
        if (!mask.empty() && mask.size() != params.size())
            throw ContractError("optimizer step: mask length mismatch");
        ensure_buffers(params.size());
        ++t_;
        const bool masked = !mask.empty();
        switch (cfg_.kind) {
            case OptKind::sgd:
                for (std::size_t i = 0; i < params.size(); ++i) {
                    if (masked && mask[i] == 0) continue;
                    params[i] -= cfg_.lr * grads[i];
                }
                break;
            case OptKind::sgd_momentum:
                for (std::size_t i = 0; i < params.size(); ++i) {
                    if (masked && mask[i] == 0) continue;
                    m_[i] = cfg_.momentum * m_[i] + grads[i];
                    params[i] -= cfg_.lr * m_[i];
                }
                break;
            case OptKind::adam: {
                const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
                const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
                for (std::size_t i = 0; i < params.size(); ++i) {
                    if (masked && mask[i] == 0) continue;
                    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grads[i];
                    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grads[i] * grads[i];
                    const double mhat = m_[i] / bc1;
                    const double vhat = v_[i] / bc2;
                    params[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                }
                break;
            }
        }
    }

private:
    void ensure_buffers(std::size_t n) {
        if (cfg_.kind == OptKind::sgd) return;
        if (m_.empty()) {
            m_.assign(n, 0.0);
            if (cfg_.kind == OptKind::adam) v_.assign(n, 0.0);
        } else if (m_.size() != n) {
            throw ContractError("optimizer reused with a different parameter count");
        }
    }

    OptimizerConfig cfg_;
    long t_ = 0;
    std::vector<double> m_;
    std::vector<double> v_;
};

}  // namespace driftlab
