#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mixcaps/errors.hpp"
#include "mixcaps/rng.hpp"

namespace mixcaps {

// Dense n-dimensional array, row-major, value semantics. Scalar is double by
// default throughout the library; float instantiations exist for callers who
// trade precision for space.
template <typename S>
class TensorT {
public:
    using Scalar = S;

    TensorT() = default;

    explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(static_cast<std::size_t>(count(shape_)), S(0));
        compute_strides();
    }

    TensorT(std::vector<int> shape, std::vector<S> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        validate_shape();
        if (count(shape_) != static_cast<std::int64_t>(data_.size())) {
            throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                                 " does not match shape " + shape_str(shape_));
        }
        compute_strides();
    }

    static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

    static TensorT full(std::vector<int> shape, S value) {
        TensorT t(std::move(shape));
        for (auto& v : t.data_) v = value;
        return t;
    }

    static TensorT scalar(S value) { return TensorT({1}, {value}); }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }

    S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const S& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // Unchecked multi-index accessors for the ranks the models use.
    S& operator()(int i) { return data_[static_cast<std::size_t>(i)]; }
    const S& operator()(int i) const { return data_[static_cast<std::size_t>(i)]; }
    S& operator()(int i, int j) { return data_[idx2(i, j)]; }
    const S& operator()(int i, int j) const { return data_[idx2(i, j)]; }
    S& operator()(int i, int j, int k) { return data_[idx3(i, j, k)]; }
    const S& operator()(int i, int j, int k) const { return data_[idx3(i, j, k)]; }
    S& operator()(int i, int j, int k, int l) { return data_[idx4(i, j, k, l)]; }
    const S& operator()(int i, int j, int k, int l) const { return data_[idx4(i, j, k, l)]; }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    // Reinterpret as a new shape with identical element count.
    TensorT reshaped(std::vector<int> new_shape) const {
        if (count(new_shape) != size()) {
            throw DimensionError("cannot reshape " + shape_str(shape_) + " into " +
                                 shape_str(new_shape) + " (element count differs)");
        }
        return TensorT(std::move(new_shape), data_);
    }

    bool all_finite() const {
        for (const S v : data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    static std::int64_t count(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (const int d : shape) n *= d;
        return shape.empty() ? 1 : n;
    }

    static std::string shape_str(const std::vector<int>& shape) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) os << 'x';
            os << shape[i];
        }
        os << ']';
        return os.str();
    }

    std::string shape_str() const { return shape_str(shape_); }

private:
    void validate_shape() const {
        for (const int d : shape_) {
            if (d <= 0) {
                throw DimensionError("tensor extents must be positive, got " + shape_str(shape_));
            }
        }
    }

    void compute_strides() {
        strides_.assign(shape_.size(), 1);
        for (int i = static_cast<int>(shape_.size()) - 2; i >= 0; --i) {
            strides_[static_cast<std::size_t>(i)] =
                strides_[static_cast<std::size_t>(i + 1)] * shape_[static_cast<std::size_t>(i + 1)];
        }
    }

    std::size_t idx2(int i, int j) const {
        return static_cast<std::size_t>(i * strides_[0] + j);
    }
    std::size_t idx3(int i, int j, int k) const {
        return static_cast<std::size_t>(i * strides_[0] + j * strides_[1] + k);
    }
    std::size_t idx4(int i, int j, int k, int l) const {
        return static_cast<std::size_t>(i * strides_[0] + j * strides_[1] + k * strides_[2] + l);
    }

    std::vector<int> shape_;
    std::vector<S> data_;
    std::vector<std::int64_t> strides_;
};

using Tensor = TensorT<double>;
using Tensor32 = TensorT<float>;

template <typename S>
void fill_uniform(TensorT<S>& t, Rng& rng, double lo, double hi) {
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<S>(rng.uniform(lo, hi));
}

// Zero-mean uniform with variance 1/fan_in (LeCun-style limit sqrt(3/fan_in)).
template <typename S>
void fill_fan_in_uniform(TensorT<S>& t, Rng& rng, std::int64_t fan_in) {
    const double limit = std::sqrt(3.0 / static_cast<double>(fan_in));
    fill_uniform(t, rng, -limit, limit);
}

template <typename S>
double max_abs_diff(const TensorT<S>& a, const TensorT<S>& b) {
    if (!a.same_shape(b)) {
        throw DimensionError("max_abs_diff shapes differ: " + a.shape_str() + " vs " + b.shape_str());
    }
    double m = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

}  // namespace mixcaps
