// SPDX-License-Identifier: Apache-2.0
#ifndef CDFORMER_TENSOR_HPP
#define CDFORMER_TENSOR_HPP

#include <cstdint>
#include <cstdlib>
#include <initializer_list>
#include <new>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cdformer {

/// 64-byte aligned allocator. Keeping every tensor buffer identically
/// aligned makes vectorized reduction order independent of heap layout, so
/// repeated runs in one process stay bit-identical.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr size_t kAlign = 64;

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(size_t n) {
        const size_t bytes = (n * sizeof(T) + kAlign - 1) / kAlign * kAlign;
        void* p = std::aligned_alloc(kAlign, bytes);
        if (!p) throw std::bad_alloc();
        return static_cast<T*>(p);
    }
    void deallocate(T* p, size_t) { std::free(p); }

    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
    template <typename U>
    bool operator!=(const AlignedAllocator<U>&) const { return false; }
};

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Dense row-major tensor. Last dimension is contiguous; feature maps use
/// [H, W, C] layout throughout the library.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(count(shape_)), T(0));
    }

    Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

    static Tensor full(std::vector<int> shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return full({1}, v); }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    // rank-3 [H, W, C] accessor
    T& at(int h, int w, int c) {
        return data_[(static_cast<size_t>(h) * shape_[1] + w) * shape_[2] + c];
    }
    const T& at(int h, int w, int c) const {
        return data_[(static_cast<size_t>(h) * shape_[1] + w) * shape_[2] + c];
    }

    // rank-2 [R, C] accessor
    T& at(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
    const T& at(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << ']';
        return os.str();
    }

    static int64_t count(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw ConfigError("negative tensor dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<T, AlignedAllocator<T>> data_;
};

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
    if (!a.same_shape(b))
        throw ConfigError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

} // namespace cdformer

#endif
