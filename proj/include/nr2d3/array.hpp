#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nr2d3 {

using Shape = std::vector<std::int64_t>;
using Flat = Eigen::ArrayXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense real tensor: a shape plus row-major flat storage. Immutable by convention once
// recorded on a tape; plain value semantics everywhere else.
class Array {
public:
    Array() = default;
    Array(Shape shape, Flat data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size())
            throw std::invalid_argument("Array: shape " + shape_str(shape_) + " does not match data length " +
                                        std::to_string(data_.size()));
        for (auto d : shape_)
            if (d <= 0) throw std::invalid_argument("Array: nonpositive dimension in " + shape_str(shape_));
    }

    static Array zeros(Shape shape) {
        auto n = shape_numel(shape);
        return Array(std::move(shape), Flat::Zero(n));
    }
    static Array constant(Shape shape, double v) {
        auto n = shape_numel(shape);
        return Array(std::move(shape), Flat::Constant(n, v));
    }
    static Array scalar(double v) { return constant({1}, v); }
    static Array from(Shape shape, std::initializer_list<double> vals) {
        Flat d(static_cast<std::int64_t>(vals.size()));
        std::int64_t i = 0;
        for (double v : vals) d(i++) = v;
        return Array(std::move(shape), std::move(d));
    }

    const Shape& shape() const { return shape_; }
    std::int64_t rank() const { return static_cast<std::int64_t>(shape_.size()); }
    std::int64_t numel() const { return data_.size(); }
    std::int64_t dim(std::int64_t i) const { return shape_.at(static_cast<std::size_t>(i)); }

    double operator[](std::int64_t i) const { return data_(i); }
    double& operator[](std::int64_t i) { return data_(i); }

    Flat& data() { return data_; }
    const Flat& data() const { return data_; }

    double scalar_value() const {
        if (numel() != 1) throw std::invalid_argument("Array: scalar_value on shape " + shape_str(shape_));
        return data_(0);
    }

    bool all_finite() const { return data_.isFinite().all(); }

    Array reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw std::invalid_argument("Array: reshape " + shape_str(shape_) + " -> " + shape_str(s) +
                                        " changes element count");
        return Array(std::move(s), data_);
    }

    // Row-major matrix view of a rank-2 array.
    Eigen::Map<const RowMat> mat() const {
        if (rank() != 2) throw std::invalid_argument("Array: matrix view of rank-" + std::to_string(rank()) + " array");
        return Eigen::Map<const RowMat>(data_.data(), shape_[0], shape_[1]);
    }

private:
    Shape shape_{};
    Flat data_{};
};

inline bool same_shape(const Array& a, const Array& b) { return a.shape() == b.shape(); }

inline bool bit_equal(const Array& a, const Array& b) {
    if (!same_shape(a, b)) return false;
    return std::memcmp(a.data().data(), b.data().data(), sizeof(double) * static_cast<std::size_t>(a.numel())) == 0;
}

}  // namespace nr2d3
