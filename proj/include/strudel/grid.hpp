#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "strudel/error.hpp"

namespace strudel {

/// Dense row-major H×W grid. Used for images, masks, probability and
/// uncertainty maps.
template <class T>
class Grid {
public:
    using value_type = T;

    Grid() = default;
    Grid(int height, int width, T fill = T{})
        : height_(height), width_(width), data_(checked_size(height, width), fill) {}
    Grid(int height, int width, std::vector<T> data) : height_(height), width_(width), data_(std::move(data)) {
        if (data_.size() != checked_size(height, width))
            throw ShapeError("grid", "data size does not match " + std::to_string(height) + "x" + std::to_string(width));
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(int y, int x) noexcept { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    const T& operator()(int y, int x) const noexcept { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }

    auto begin() noexcept { return data_.begin(); }
    auto end() noexcept { return data_.end(); }
    auto begin() const noexcept { return data_.begin(); }
    auto end() const noexcept { return data_.end(); }

    bool same_shape(const auto& other) const noexcept {
        return height_ == other.height() && width_ == other.width();
    }

    bool operator==(const Grid&) const = default;

private:
    static std::size_t checked_size(int height, int width) {
        if (height < 0 || width < 0) throw ShapeError("grid", "negative dimension");
        return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<T> data_;
};

using Image = Grid<double>;
using Mask = Grid<std::uint8_t>;
using ProbMap = Grid<double>;

template <class A, class B>
void require_same_shape(const Grid<A>& a, const Grid<B>& b, const char* module) {
    if (!a.same_shape(b))
        throw ShapeError(module, "shape mismatch " + std::to_string(a.height()) + "x" + std::to_string(a.width()) +
                                     " vs " + std::to_string(b.height()) + "x" + std::to_string(b.width()));
}

inline std::size_t foreground_count(const Mask& m) {
    return static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; }));
}

inline bool is_binary(const Mask& m) {
    return std::all_of(m.begin(), m.end(), [](std::uint8_t v) { return v <= 1; });
}

}  // namespace strudel
