// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "driftlab/common.hpp"

namespace driftlab {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Dense row-major tensor of 64-bit floats. Rank 0 (empty shape) holds a
/// single scalar. All graph operations verify their results stay finite.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)),
          data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {
        if (shape_numel(shape_) < 0)
            throw DimensionError("tensor shape has negative extent " + shape_str(shape_));
    }

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size()))
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

    const Shape& shape() const { return shape_; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
    bool is_scalar() const { return data_.size() == 1 && shape_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double value() const {
        if (data_.size() != 1)
            throw ContractError("value() on non-scalar tensor " + shape_str(shape_));
        return data_[0];
    }

    std::int64_t rows() const {
        require_rank2();
        return shape_[0];
    }
    std::int64_t cols() const {
        require_rank2();
        return shape_[1];
    }

    double& at(std::int64_t r, std::int64_t c) {
        return data_[static_cast<std::size_t>(r * cols() + c)];
    }
    double at(std::int64_t r, std::int64_t c) const {
        return data_[static_cast<std::size_t>(r * cols() + c)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

private:
    void require_rank2() const {
        if (shape_.size() != 2)
            throw DimensionError("expected rank-2 tensor, got " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

inline void check_finite(const Tensor& t, const char* op) {
    for (double v : t.vec()) {
        if (!std::isfinite(v))
            throw NumericError(std::string("non-finite value produced by ") + op);
    }
}

}  // namespace driftlab
