#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "error.hpp"

namespace duetmatch {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

/// 64-byte aligned storage. Eigen picks its vector peeling from the data
/// address, so a fixed alignment keeps reductions bitwise reproducible.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

/// Dense row-major array. Volumetric batches use the layout
/// [batch, channel, z, y, x] so that x is the fastest-varying index.
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}
    Tensor(Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                             shape_str(shape_));
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> span() { return data_; }
    std::span<const T> span() const { return data_; }
    AlignedVector<T>& vec() { return data_; }
    const AlignedVector<T>& vec() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    /// Number of elements per leading index (e.g. one batch item).
    std::size_t stride0() const { return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0]; }

    /// Spatial voxel count of a [N, C, ...] tensor.
    std::size_t spatial() const {
        std::size_t n = 1;
        for (std::size_t i = 2; i < shape_.size(); ++i) n *= shape_[i];
        return n;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        std::transform(data_.begin(), data_.end(), out.data(), [](T v) { return static_cast<U>(v); });
        return out;
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != data_.size())
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
        return Tensor(std::move(s), data_);
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(static_cast<double>(v)); });
    }

private:
    Shape shape_;
    AlignedVector<T> data_;
};

using Labels = Tensor<int>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
    if (a != b) throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

/// Shape of a [N, C, z, y, x] batch with the channel axis removed.
inline Shape drop_channel(const Shape& s) {
    if (s.size() < 2) throw ShapeError("expected [N, C, ...], got " + shape_str(s));
    Shape out{s[0]};
    out.insert(out.end(), s.begin() + 2, s.end());
    return out;
}

/// Stack single-channel items into one [N, 1, ...] batch.
template <class T>
Tensor<T> stack_channel1(std::span<const Tensor<T>> items) {
    if (items.empty()) throw ShapeError("stack of zero items");
    Shape s{items.size(), 1};
    s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
    Tensor<T> out(s);
    const std::size_t n = items[0].size();
    for (std::size_t i = 0; i < items.size(); ++i) {
        require_same_shape(items[i].shape(), items[0].shape(), "stack");
        std::copy(items[i].data(), items[i].data() + n, out.data() + i * n);
    }
    return out;
}

/// Per-voxel argmax over the channel axis of a [N, C, ...] tensor.
template <class T>
Labels argmax_channels(const Tensor<T>& p) {
    const std::size_t n = p.dim(0), c = p.dim(1), v = p.spatial();
    Labels out(drop_channel(p.shape()));
    for (std::size_t b = 0; b < n; ++b) {
        const T* base = p.data() + b * c * v;
        for (std::size_t i = 0; i < v; ++i) {
            int best = 0;
            T best_v = base[i];
            for (std::size_t k = 1; k < c; ++k) {
                if (base[k * v + i] > best_v) {
                    best_v = base[k * v + i];
                    best = static_cast<int>(k);
                }
            }
            out[b * v + i] = best;
        }
    }
    return out;
}

}  // namespace duetmatch
