// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "driftlab/tensor.hpp"

namespace driftlab {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& value() const;
    bool valid() const { return tape != nullptr && id >= 0; }
};

using GradMap = std::unordered_map<int, Tensor>;

/// Reverse-mode autodiff tape. Operations append nodes in execution order;
/// the backward pass walks the node list once in reverse. A tape and the
/// tensors recorded on it belong to a single thread.
class Tape {
public:
    struct Node {
        Tensor value;
        Tensor grad;  // empty until touched by backward
        bool needs_grad = false;
        int param_id = -1;  // >= 0 marks a leaf parameter
        std::function<void(Tape&, const Node&)> pull;  // routes own grad to inputs
    };

    Var leaf(Tensor value, bool needs_grad = false, int param_id = -1) {
        nodes_.push_back(Node{std::move(value), Tensor{}, needs_grad, param_id, nullptr});
        if (param_id >= 0) param_nodes_.push_back(static_cast<int>(nodes_.size()) - 1);
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var record(Tensor value, bool needs_grad,
               std::function<void(Tape&, const Node&)> pull) {
        nodes_.push_back(Node{std::move(value), Tensor{}, needs_grad, -1,
                              needs_grad ? std::move(pull) : nullptr});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

    /// Gradient buffer of a node after a backward pass (empty means zero).
    /// Parameter-leaf gradients are moved out by backward and not kept here.
    const Tensor& grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    /// Adds `delta` into the gradient buffer of node `id`.
    void accumulate(int id, const Tensor& delta) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.needs_grad) return;
        if (n.grad.numel() == 0) {
            n.grad = delta;
            return;
        }
        double* g = n.grad.data();
        const double* d = delta.data();
        const auto len = static_cast<std::size_t>(n.grad.numel());
        for (std::size_t i = 0; i < len; ++i) g[i] += d[i];
    }

    /// Backpropagates from a scalar loss. Returns gradients for every leaf
    /// parameter registered on this tape; parameters the loss does not
    /// depend on get explicit zeros.
    GradMap backward(Var loss) {
        if (loss.tape != this) throw ContractError("loss recorded on a different tape");
        Node& top = nodes_[static_cast<std::size_t>(loss.id)];
        if (top.value.numel() != 1)
            throw ContractError("backward requires a scalar loss, got shape " +
                                shape_str(top.value.shape()));
        for (Node& n : nodes_) n.grad = Tensor{};
        top.grad = Tensor(top.value.shape(), 1.0);
        for (int i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.grad.numel() == 0 || !n.pull) continue;
            n.pull(*this, n);
        }
        GradMap out;
        for (int id : param_nodes_) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            out.emplace(n.param_id, n.grad.numel() ? std::move(n.grad)
                                                   : Tensor(n.value.shape(), 0.0));
        }
        return out;
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
    std::vector<int> param_nodes_;
};

inline const Tensor& Var::value() const { return tape->value(id); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
    if (a.tape == nullptr || a.tape != b.tape)
        throw ContractError("operands recorded on different tapes");
    return *a.tape;
}

}  // namespace detail

// ---- operations ------------------------------------------------------

/// matmul(a [n,k], b [k,m]) -> [n,m]
inline Var matmul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    const std::int64_t n = A.rows(), k = A.cols(), m = B.cols();
    if (B.rows() != k)
        throw DimensionError("matmul: " + shape_str(A.shape()) + " x " + shape_str(B.shape()));
    Tensor C(Shape{n, m});
    {
        const double* pa = A.data();
        const double* pb = B.data();
        double* pc = C.data();
        for (std::int64_t i = 0; i < n; ++i) {
            const double* arow = pa + i * k;
            double* crow = pc + i * m;
            for (std::int64_t l = 0; l < k; ++l) {
                const double av = arow[l];
                if (av == 0.0) continue;
                const double* brow = pb + l * m;
                for (std::int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
            }
        }
    }
    check_finite(C, "matmul");
    const bool ng = t.needs_grad(a.id) || t.needs_grad(b.id);
    const int ia = a.id, ib = b.id;
    return t.record(std::move(C), ng, [ia, ib, n, k, m](Tape& tp, const Tape::Node& self) {
        const Tensor& g = self.grad;
        if (tp.needs_grad(ia)) {
            // dA = g @ B^T
            Tensor da(Shape{n, k});
            const double* pg = g.data();
            const double* pb = tp.value(ib).data();
            double* pd = da.data();
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t l = 0; l < k; ++l) {
                    double s = 0.0;
                    const double* grow = pg + i * m;
                    const double* brow = pb + l * m;
                    for (std::int64_t j = 0; j < m; ++j) s += grow[j] * brow[j];
                    pd[i * k + l] = s;
                }
            tp.accumulate(ia, da);
        }
        if (tp.needs_grad(ib)) {
            // dB = A^T @ g
            Tensor db(Shape{k, m});
            const double* pa = tp.value(ia).data();
            const double* pg = g.data();
            double* pd = db.data();
            for (std::int64_t i = 0; i < n; ++i) {
                const double* arow = pa + i * k;
                const double* grow = pg + i * m;
                for (std::int64_t l = 0; l < k; ++l) {
                    const double av = arow[l];
                    if (av == 0.0) continue;
                    double* drow = pd + l * m;
                    for (std::int64_t j = 0; j < m; ++j) drow[j] += av * grow[j];
                }
            }
            tp.accumulate(ib, db);
        }
    });
}

/// add: same-shape elementwise, or [n,m] + [m] bias broadcast over rows.
inline Var add(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    const int ia = a.id, ib = b.id;
    const bool ng = t.needs_grad(ia) || t.needs_grad(ib);
    if (A.same_shape(B)) {
        Tensor C = A;
        double* pc = C.data();
        const double* pb = B.data();
        const auto len = static_cast<std::size_t>(C.numel());
        for (std::size_t i = 0; i < len; ++i) pc[i] += pb[i];
        check_finite(C, "add");
        return t.record(std::move(C), ng, [ia, ib](Tape& tp, const Tape::Node& self) {
            tp.accumulate(ia, self.grad);
            tp.accumulate(ib, self.grad);
        });
    }
    if (A.shape().size() == 2 && B.shape().size() == 1 && B.shape()[0] == A.cols()) {
        const std::int64_t n = A.rows(), m = A.cols();
        Tensor C = A;
        double* pc = C.data();
        const double* pb = B.data();
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < m; ++j) pc[i * m + j] += pb[j];
        check_finite(C, "add");
        return t.record(std::move(C), ng, [ia, ib, n, m](Tape& tp, const Tape::Node& self) {
            tp.accumulate(ia, self.grad);
            if (tp.needs_grad(ib)) {
                Tensor db(Shape{m});
                double* pd = db.data();
                const double* pg = self.grad.data();
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t j = 0; j < m; ++j) pd[j] += pg[i * m + j];
                tp.accumulate(ib, db);
            }
        });
    }
    throw DimensionError("add: incompatible shapes " + shape_str(A.shape()) + " and " +
                         shape_str(B.shape()));
}

inline Var relu(Var a) {
    Tape& t = *a.tape;
    Tensor C = a.value();
    for (double& v : C.vec()) v = v > 0.0 ? v : 0.0;
    const int ia = a.id;
    return t.record(std::move(C), t.needs_grad(ia), [ia](Tape& tp, const Tape::Node& self) {
        const Tensor& x = tp.value(ia);
        Tensor d(x.shape());
        const double* px = x.data();
        const double* pg = self.grad.data();
        double* pd = d.data();
        const auto len = static_cast<std::size_t>(x.numel());
        for (std::size_t i = 0; i < len; ++i) pd[i] = px[i] > 0.0 ? pg[i] : 0.0;
        tp.accumulate(ia, d);
    });
}

inline Var tanh(Var a) {
    Tape& t = *a.tape;
    Tensor C = a.value();
    for (double& v : C.vec()) v = std::tanh(v);
    check_finite(C, "tanh");
    const int ia = a.id;
    return t.record(std::move(C), t.needs_grad(ia), [ia](Tape& tp, const Tape::Node& self) {
        const Tensor& y = self.value;  // tanh' = 1 - y^2
        Tensor d(y.shape());
        const double* py = y.data();
        const double* pg = self.grad.data();
        double* pd = d.data();
        const auto len = static_cast<std::size_t>(y.numel());
        for (std::size_t i = 0; i < len; ++i) pd[i] = pg[i] * (1.0 - py[i] * py[i]);
        tp.accumulate(ia, d);
    });
}

/// Mean over all elements -> scalar.
inline Var mean(Var a) {
    Tape& t = *a.tape;
    const Tensor& A = a.value();
    if (A.numel() == 0) throw DimensionError("mean of empty tensor");
    double s = 0.0;
    for (double v : A.vec()) s += v;
    const double inv = 1.0 / static_cast<double>(A.numel());
    Tensor C = Tensor::scalar(s * inv);
    check_finite(C, "mean");
    const int ia = a.id;
    return t.record(std::move(C), t.needs_grad(ia), [ia, inv](Tape& tp, const Tape::Node& self) {
        const Tensor& x = tp.value(ia);
        Tensor d(x.shape(), self.grad.value() * inv);
        tp.accumulate(ia, d);
    });
}

namespace detail {

inline void check_loss_shapes(const Tensor& p, const Tensor& y, const char* op) {
    if (!p.same_shape(y))
        throw DimensionError(std::string(op) + ": prediction " + shape_str(p.shape()) +
                             " vs target " + shape_str(y.shape()));
    if (p.numel() == 0) throw DimensionError(std::string(op) + " of empty tensors");
}

}  // namespace detail

/// Mean absolute error. The subgradient at zero residual is zero.
inline Var l1_loss(Var pred, Var target) {
    Tape& t = detail::same_tape(pred, target);
    const Tensor& P = pred.value();
    const Tensor& Y = target.value();
    detail::check_loss_shapes(P, Y, "l1_loss");
    double s = 0.0;
    const auto len = static_cast<std::size_t>(P.numel());
    for (std::size_t i = 0; i < len; ++i) s += std::fabs(P.data()[i] - Y.data()[i]);
    const double inv = 1.0 / static_cast<double>(len);
    Tensor C = Tensor::scalar(s * inv);
    check_finite(C, "l1_loss");
    const bool ng = t.needs_grad(pred.id) || t.needs_grad(target.id);
    const int ip = pred.id, iy = target.id;
    return t.record(std::move(C), ng, [ip, iy, inv](Tape& tp, const Tape::Node& self) {
        const Tensor& p = tp.value(ip);
        const Tensor& y = tp.value(iy);
        const double go = self.grad.value() * inv;
        const auto n = static_cast<std::size_t>(p.numel());
        Tensor d(p.shape());
        for (std::size_t i = 0; i < n; ++i) {
            const double r = p.data()[i] - y.data()[i];
            d.data()[i] = r > 0.0 ? go : (r < 0.0 ? -go : 0.0);
        }
        tp.accumulate(ip, d);
        if (tp.needs_grad(iy)) {
            for (double& v : d.vec()) v = -v;
            tp.accumulate(iy, d);
        }
    });
}

/// Mean squared error.
inline Var mse_loss(Var pred, Var target) {
    Tape& t = detail::same_tape(pred, target);
    const Tensor& P = pred.value();
    const Tensor& Y = target.value();
    detail::check_loss_shapes(P, Y, "mse_loss");
    double s = 0.0;
    const auto len = static_cast<std::size_t>(P.numel());
    for (std::size_t i = 0; i < len; ++i) {
        const double r = P.data()[i] - Y.data()[i];
        s += r * r;
    }
    const double inv = 1.0 / static_cast<double>(len);
    Tensor C = Tensor::scalar(s * inv);
    check_finite(C, "mse_loss");
    const bool ng = t.needs_grad(pred.id) || t.needs_grad(target.id);
    const int ip = pred.id, iy = target.id;
    return t.record(std::move(C), ng, [ip, iy, inv](Tape& tp, const Tape::Node& self) {
        const Tensor& p = tp.value(ip);
        const Tensor& y = tp.value(iy);
        const double go = self.grad.value() * inv * 2.0;
        const auto n = static_cast<std::size_t>(p.numel());
        Tensor d(p.shape());
        for (std::size_t i = 0; i < n; ++i) d.data()[i] = go * (p.data()[i] - y.data()[i]);
        tp.accumulate(ip, d);
        if (tp.needs_grad(iy)) {
            for (double& v : d.vec()) v = -v;
            tp.accumulate(iy, d);
        }
    });
}

/// Multiply by a constant.
inline Var scale(Var a, double s) {
    Tape& t = *a.tape;
    Tensor C = a.value();
    for (double& v : C.vec()) v *= s;
    check_finite(C, "scale");
    const int ia = a.id;
    return t.record(std::move(C), t.needs_grad(ia), [ia, s](Tape& tp, const Tape::Node& self) {
        Tensor d = self.grad;
        for (double& v : d.vec()) v *= s;
        tp.accumulate(ia, d);
    });
}

/// Concatenates rank-2 tensors along columns.
inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat of zero tensors");
    Tape& t = *parts[0].tape;
    const std::int64_t n = parts[0].value().rows();
    std::int64_t m = 0;
    bool ng = false;
    for (const Var& v : parts) {
        detail::same_tape(parts[0], v);
        if (v.value().rows() != n)
            throw DimensionError("concat: row count mismatch");
        m += v.value().cols();
        ng = ng || t.needs_grad(v.id);
    }
    Tensor C(Shape{n, m});
    std::vector<int> ids;
    std::vector<std::int64_t> widths;
    std::int64_t off = 0;
    for (const Var& v : parts) {
        const Tensor& A = v.value();
        const std::int64_t w = A.cols();
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < w; ++j) C.at(i, off + j) = A.at(i, j);
        ids.push_back(v.id);
        widths.push_back(w);
        off += w;
    }
    return t.record(std::move(C), ng,
                    [ids, widths, n](Tape& tp, const Tape::Node& self) {
                        std::int64_t off = 0;
                        for (std::size_t k = 0; k < ids.size(); ++k) {
                            if (tp.needs_grad(ids[k])) {
                                Tensor d(Shape{n, widths[k]});
                                for (std::int64_t i = 0; i < n; ++i)
                                    for (std::int64_t j = 0; j < widths[k]; ++j)
                                        d.at(i, j) = self.grad.at(i, off + j);
                                tp.accumulate(ids[k], d);
                            }
                            off += widths[k];
                        }
                    });
}

inline Var concat_cols(Var a, Var b) { return concat_cols(std::vector<Var>{a, b}); }

/// Column slice [c0, c1) of a rank-2 tensor.
inline Var slice_cols(Var a, std::int64_t c0, std::int64_t c1) {
    Tape& t = *a.tape;
    const Tensor& A = a.value();
    const std::int64_t n = A.rows(), m = A.cols();
    if (c0 < 0 || c1 > m || c0 >= c1)
        throw DimensionError("slice_cols: bad range [" + std::to_string(c0) + "," +
                             std::to_string(c1) + ") for " + shape_str(A.shape()));
    Tensor C(Shape{n, c1 - c0});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = c0; j < c1; ++j) C.at(i, j - c0) = A.at(i, j);
    const int ia = a.id;
    return t.record(std::move(C), t.needs_grad(ia),
                    [ia, n, m, c0, c1](Tape& tp, const Tape::Node& self) {
                        Tensor d(Shape{n, m});
                        for (std::int64_t i = 0; i < n; ++i)
                            for (std::int64_t j = c0; j < c1; ++j)
                                d.at(i, j) = self.grad.at(i, j - c0);
                        tp.accumulate(ia, d);
                    });
}

/// Row slice [r0, r1) of a rank-2 tensor.
inline Var slice_rows(Var a, std::int64_t r0, std::int64_t r1) {
    Tape& t = *a.tape;
    const Tensor& A = a.value();
    const std::int64_t n = A.rows(), m = A.cols();
    if (r0 < 0 || r1 > n || r0 >= r1)
        throw DimensionError("slice_rows: bad range [" + std::to_string(r0) + "," +
                             std::to_string(r1) + ") for " + shape_str(A.shape()));
    Tensor C(Shape{r1 - r0, m});
    for (std::int64_t i = r0; i < r1; ++i)
        for (std::int64_t j = 0; j < m; ++j) C.at(i - r0, j) = A.at(i, j);
    const int ia = a.id;
    return t.record(std::move(C), t.needs_grad(ia),
                    [ia, n, m, r0, r1](Tape& tp, const Tape::Node& self) {
                        Tensor d(Shape{n, m});
                        for (std::int64_t i = r0; i < r1; ++i)
                            for (std::int64_t j = 0; j < m; ++j)
                                d.at(i, j) = self.grad.at(i - r0, j);
                        tp.accumulate(ia, d);
                    });
}

inline Var reshape(Var a, Shape shape) {
    Tape& t = *a.tape;
    const Tensor& A = a.value();
    if (shape_numel(shape) != A.numel())
        throw DimensionError("reshape: " + shape_str(A.shape()) + " -> " + shape_str(shape) +
                             " changes element count");
    Tensor C(shape, A.vec());
    const int ia = a.id;
    return t.record(std::move(C), t.needs_grad(ia), [ia](Tape& tp, const Tape::Node& self) {
        const Tensor& x = tp.value(ia);
        Tensor d(x.shape(), self.grad.vec());
        tp.accumulate(ia, d);
    });
}

/// Splits a batch of flat row-major [grid, grid, 3] images into square
/// patches: [n, grid*grid*3] -> [n*P, patch*patch*3] with P patches per
/// image in row-major patch order. A pure index permutation.
inline Var patchify(Var images, std::int64_t grid, std::int64_t patch) {
    Tape& t = *images.tape;
    const Tensor& A = images.value();
    if (grid % patch != 0) throw DimensionError("patchify: patch must divide grid");
    if (A.cols() != grid * grid * 3)
        throw DimensionError("patchify: expected " + std::to_string(grid * grid * 3) +
                             " columns, got " + shape_str(A.shape()));
    const std::int64_t n = A.rows();
    const std::int64_t gp = grid / patch;          // patches per side
    const std::int64_t plen = patch * patch * 3;   // values per patch
    Tensor C(Shape{n * gp * gp, plen});
    // gather indices within one image, reused for every sample
    std::vector<std::int64_t> gather(static_cast<std::size_t>(gp * gp * plen));
    {
        std::int64_t w = 0;
        for (std::int64_t py = 0; py < gp; ++py)
            for (std::int64_t px = 0; px < gp; ++px)
                for (std::int64_t dy = 0; dy < patch; ++dy)
                    for (std::int64_t dx = 0; dx < patch; ++dx)
                        for (std::int64_t c = 0; c < 3; ++c)
                            gather[static_cast<std::size_t>(w++)] =
                                ((py * patch + dy) * grid + (px * patch + dx)) * 3 + c;
    }
    for (std::int64_t i = 0; i < n; ++i) {
        const double* src = A.data() + i * A.cols();
        double* dst = C.data() + i * gp * gp * plen;
        for (std::size_t w = 0; w < gather.size(); ++w) dst[w] = src[gather[w]];
    }
    const int ia = images.id;
    return t.record(std::move(C), t.needs_grad(ia),
                    [ia, gather, n, cols = A.cols()](Tape& tp, const Tape::Node& self) {
                        Tensor d(Shape{n, cols});
                        for (std::int64_t i = 0; i < n; ++i) {
                            const double* src = self.grad.data() + i * static_cast<std::int64_t>(gather.size());
                            double* dst = d.data() + i * cols;
                            for (std::size_t w = 0; w < gather.size(); ++w)
                                dst[gather[w]] += src[w];
                        }
                        tp.accumulate(ia, d);
                    });
}

/// Embedding lookup: rows of `table` [v, e] selected by ids -> [n, e].
inline Var embed(Var table, const std::vector<int>& ids) {
    Tape& t = *table.tape;
    const Tensor& T = table.value();
    const std::int64_t v = T.rows(), e = T.cols();
    const auto n = static_cast<std::int64_t>(ids.size());
    for (int id : ids)
        if (id < 0 || id >= v)
            throw ContractError("embed: id " + std::to_string(id) + " outside vocabulary of " +
                                std::to_string(v));
    Tensor C(Shape{n, e});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < e; ++j) C.at(i, j) = T.at(ids[static_cast<std::size_t>(i)], j);
    const int it = table.id;
    return t.record(std::move(C), t.needs_grad(it),
                    [it, ids, v, e, n](Tape& tp, const Tape::Node& self) {
                        Tensor d(Shape{v, e});
                        for (std::int64_t i = 0; i < n; ++i)
                            for (std::int64_t j = 0; j < e; ++j)
                                d.at(ids[static_cast<std::size_t>(i)], j) += self.grad.at(i, j);
                        tp.accumulate(it, d);
                    });
}

}  // namespace driftlab
