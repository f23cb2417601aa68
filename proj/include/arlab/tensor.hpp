#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "arlab/rng.hpp"

namespace arlab {

// Error raised when tensor shapes do not line up; carries the offending
// operation/node name so failures inside a recorded graph are attributable.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Error raised when a forward pass produces NaN or Inf.
class NonFiniteError : public std::runtime_error {
public:
    explicit NonFiniteError(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

// 64-byte aligned allocator. Uniform buffer alignment keeps vectorized
// kernels on identical code paths for every allocation, which is what makes
// repeated forward passes bitwise reproducible.
template <class T>
struct AlignedAlloc {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};

    AlignedAlloc() = default;
    template <class U>
    AlignedAlloc(const AlignedAlloc<U>&) {}

    T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlign); }

    template <class U>
    bool operator==(const AlignedAlloc<U>&) const { return true; }
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major n-dimensional array. Double precision is the default for
// everything in this library; float is available for opt-in fast paths.
template <class T = double>
class TensorT {
public:
    using Buffer = std::vector<T, AlignedAlloc<T>>;

    TensorT() = default;

    explicit TensorT(Shape shape) : shape_(std::move(shape)), data_(size_t(shape_numel(shape_)), T(0)) {
        check_shape();
    }

    TensorT(Shape shape, std::initializer_list<T> data)
        : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        check_shape();
        if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    TensorT(Shape shape, const std::vector<T>& data)
        : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        check_shape();
        if (static_cast<int64_t>(data_.size()) != shape_numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static TensorT scalar(T v) { return TensorT({}, {v}); }

    static TensorT full(Shape shape, T v) {
        TensorT t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }

    static TensorT from(std::initializer_list<T> vals) {
        return TensorT({static_cast<int64_t>(vals.size())}, vals);
    }

    static TensorT randn(Shape shape, RngStream& rng, T stddev = T(1)) {
        TensorT t(std::move(shape));
        for (auto& v : t.data_) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    const Shape& shape() const { return shape_; }
    int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }

    // Row/col accessors treat the tensor as a matrix: 2-d as is, 1-d as a
    // single row, scalar as 1x1.
    int64_t rows() const { return ndim() >= 2 ? shape_[0] : 1; }
    int64_t cols() const {
        if (ndim() == 0) return 1;
        if (ndim() == 1) return shape_[0];
        int64_t c = 1;
        for (size_t i = 1; i < shape_.size(); ++i) c *= shape_[i];
        return c;
    }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    T& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols() + c)]; }
    const T& at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols() + c)]; }

    T item() const {
        if (numel() != 1) throw ShapeError("item() on tensor with " + std::to_string(numel()) + " elements");
        return data_[0];
    }

    bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    double l2_norm() const {
        double s = 0;
        for (T v : data_) s += double(v) * double(v);
        return std::sqrt(s);
    }

    TensorT& operator+=(const TensorT& o) {
        if (!same_shape(o)) throw ShapeError("operator+= shape mismatch " + shape_str(shape_) + " vs " + shape_str(o.shape_));
        for (int64_t i = 0; i < numel(); ++i) data_[size_t(i)] += o.data_[size_t(i)];
        return *this;
    }

    TensorT& scale_inplace(T f) {
        for (auto& v : data_) v *= f;
        return *this;
    }

private:
    void check_shape() const {
        for (int64_t d : shape_)
            if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape_));
    }

    Shape shape_;
    Buffer data_;
};

using Tensor = TensorT<double>;

}  // namespace arlab
