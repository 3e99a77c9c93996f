#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "signdiff/rng.hpp"

namespace signdiff {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

// Dense row-major tensor. Plain value type: copy copies, move moves.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {
        check_extents();
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_extents();
        if (shape_numel(shape_) != data_.size())
            throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " does not match " +
                                        std::to_string(data_.size()) + " scalars");
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        for (T& v : t.data_) v = value;
        return t;
    }

    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    static Tensor randn(Shape shape, Rng& rng) {
        Tensor t(std::move(shape));
        rng.fill_normal(std::span<T>(t.data_));
        return t;
    }

    const Shape& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    bool is_scalar() const { return data_.size() == 1; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }
    std::span<T> span() { return std::span<T>(data_); }
    std::span<const T> span() const { return std::span<const T>(data_); }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T& at(std::initializer_list<std::size_t> idx) { return data_[flat_index(idx)]; }
    const T& at(std::initializer_list<std::size_t> idx) const { return data_[flat_index(idx)]; }

    bool requires_grad = false;

    Tensor& set_requires_grad(bool v = true) {
        requires_grad = v;
        return *this;
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(shape_, std::move(out));
    }

private:
    std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != shape_.size()) throw std::invalid_argument("Tensor::at: rank mismatch");
        std::size_t flat = 0;
        std::size_t axis = 0;
        for (std::size_t i : idx) {
            if (i >= shape_[axis]) throw std::out_of_range("Tensor::at: index out of range");
            flat = flat * shape_[axis] + i;
            ++axis;
        }
        return flat;
    }

    void check_extents() const {
        for (std::size_t e : shape_)
            if (e == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<T> data_;
};

}  // namespace signdiff
