#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "treemtl/errors.hpp"

namespace treemtl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

// Eigen peels unaligned heads off vectorized loops, so unaligned storage makes summation order
// depend on where malloc lands.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense row-major tensor. Rank-4 activations are laid out (B,H,W,C).
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(numel(shape_), fill) {}
    Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}
    Tensor(Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != numel(shape_))
            throw DimensionError("tensor data size " + std::to_string(data_.size()) +
                                 " does not match shape " + treemtl::to_string(shape_));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    AlignedVector<T>& storage() noexcept { return data_; }
    const AlignedVector<T>& storage() const noexcept { return data_; }
    std::vector<T> to_vector() const { return {data_.begin(), data_.end()}; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::size_t b, std::size_t h, std::size_t w, std::size_t c) {
        return data_[((b * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
    }
    const T& at(std::size_t b, std::size_t h, std::size_t w, std::size_t c) const {
        return data_[((b * shape_[1] + h) * shape_[2] + w) * shape_[3] + c];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    /// Same data, new shape of equal element count.
    Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

    template <class U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, AlignedVector<U>(data_.begin(), data_.end()));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    AlignedVector<T> data_;
};

inline void require_rank4(const Shape& shape, const char* what) {
    if (shape.size() != 4)
        throw DimensionError(std::string(what) + ": expected a (B,H,W,C) tensor, got " + to_string(shape));
    for (auto d : shape)
        if (d == 0) throw DimensionError(std::string(what) + ": zero extent in " + to_string(shape));
}

}  // namespace treemtl
