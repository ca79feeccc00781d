#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "proll/errors.hpp"

namespace proll {

// Dense row-major n-d array. Single precision is used for training; the same
// template in double precision backs the finite-difference gradient checks.
template <typename T>
class TensorT {
  public:
    TensorT() = default;
    explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(numel_of(shape_), T(0));
    }
    TensorT(std::vector<int> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != numel_of(shape_)) throw ShapeMismatch("tensor data does not match shape");
    }

    static TensorT full(std::vector<int> shape, T value) {
        TensorT t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }
    static TensorT scalar(T value) { return TensorT({1}, {value}); }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    T& operator[](size_t i) { return data_[i]; }
    T operator[](size_t i) const { return data_[i]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    // Reshape to a shape with identical element count.
    TensorT reshaped(std::vector<int> shape) const {
        if (numel_of(shape) != data_.size()) throw ShapeMismatch("reshape changes element count");
        return TensorT(std::move(shape), data_);
    }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> d(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) d[i] = static_cast<U>(data_[i]);
        return TensorT<U>(shape_, std::move(d));
    }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    static size_t numel_of(const std::vector<int>& shape) {
        size_t n = 1;
        for (int d : shape) {
            if (d < 0) throw ShapeMismatch("negative extent");
            n *= static_cast<size_t>(d);
        }
        return n;
    }

    static std::string shape_str(const std::vector<int>& shape) {
        std::string s = "(";
        for (size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
        return s + ")";
    }

  private:
    std::vector<int> shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <typename T>
void check_shape(const TensorT<T>& t, const std::vector<int>& want, const char* ctx) {
    if (t.shape() != want)
        throw ShapeMismatch(std::string(ctx) + ": got " + TensorT<T>::shape_str(t.shape()) + ", want " +
                            TensorT<T>::shape_str(want));
}

template <typename T>
T max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    assert(a.size() == b.size());
    T m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace proll
