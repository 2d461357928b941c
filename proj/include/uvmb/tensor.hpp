#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "uvmb/errors.hpp"

namespace uvmb {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense N-dimensional array, row-major. The single value type used for
// features, weights and gradients. float for training, double for
// verification runs.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        for (int64_t d : shape_)
            if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shape_));
        data_.assign(shape_numel(shape_), T(0));
    }

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

    static Tensor scalar(T v) { return Tensor({1}, {v}); }

    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    int dim() const { return static_cast<int>(shape_.size()); }
    const Shape& shape() const { return shape_; }

    int64_t size(int i) const {
        if (i < 0) i += dim();
        return shape_.at(static_cast<size_t>(i));
    }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // Multi-index accessor for tests and light-duty code; kernels index raw data.
    T& at(std::initializer_list<int64_t> idx) { return data_[flat(idx)]; }
    const T& at(std::initializer_list<int64_t> idx) const { return data_[flat(idx)]; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != numel())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        Tensor out;
        out.shape_ = std::move(s);
        out.data_ = data_;
        return out;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    T abs_max() const {
        T m = 0;
        for (T v : data_) m = std::max(m, static_cast<T>(std::abs(static_cast<double>(v))));
        return m;
    }

  private:
    size_t flat(std::initializer_list<int64_t> idx) const {
        if (static_cast<int>(idx.size()) != dim())
            throw ShapeError("index rank mismatch for shape " + shape_str(shape_));
        int64_t off = 0;
        int i = 0;
        for (int64_t v : idx) {
            off = off * shape_[static_cast<size_t>(i)] + v;
            ++i;
        }
        return static_cast<size_t>(off);
    }

    Shape shape_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace uvmb
