#pragma once

#include <algorithm>
#include <cstddef>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "strudel/error.hpp"

namespace strudel::nn {

/// Allocator returning 64-byte aligned storage. Vectorized kernels peel
/// loops according to the runtime address, so a fixed alignment keeps the
/// floating-point summation order, and hence results, identical across runs.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t alignment{64};

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

/// Dense N×C×H×W tensor, contiguous in that order.
template <class T>
struct Tensor {
    int n = 0, c = 0, h = 0, w = 0;
    Buffer<T> data;

    Tensor() = default;
    Tensor(int n_, int c_, int h_, int w_, T fill = T{})
        : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

    std::size_t size() const noexcept { return data.size(); }
    std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * w; }
    std::size_t sample_size() const noexcept { return static_cast<std::size_t>(c) * plane(); }
    bool empty() const noexcept { return data.empty(); }

    T* sample(int i) noexcept { return data.data() + i * sample_size(); }
    const T* sample(int i) const noexcept { return data.data() + i * sample_size(); }
    T* channel(int i, int ch) noexcept { return sample(i) + ch * plane(); }
    const T* channel(int i, int ch) const noexcept { return sample(i) + ch * plane(); }

    T& at(int i, int ch, int y, int x) noexcept { return data[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x]; }
    const T& at(int i, int ch, int y, int x) const noexcept {
        return data[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x];
    }

    bool same_shape(const Tensor& o) const noexcept { return n == o.n && c == o.c && h == o.h && w == o.w; }
    std::string shape_string() const {
        return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out(n, c, h, w);
        std::transform(data.begin(), data.end(), out.data.begin(), [](T v) { return static_cast<U>(v); });
        return out;
    }

    bool operator==(const Tensor&) const = default;
};

}  // namespace strudel::nn
