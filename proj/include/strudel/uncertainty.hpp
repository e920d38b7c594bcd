#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "strudel/backbones.hpp"
#include "strudel/error.hpp"
#include "strudel/grid.hpp"
#include "strudel/random.hpp"
#include "strudel/train.hpp"

namespace strudel::uncertainty {

/// C stochastic probability maps for one image.
struct McSamples {
    std::vector<ProbMap> maps;
    std::uint64_t model_fingerprint = 0;
    std::vector<std::uint64_t> seeds;  ///< dropout seed of each pass

    std::size_t count() const noexcept { return maps.size(); }

    void validate() const {
        if (maps.size() < 2) throw ConfigError("uncertainty", "an MC stack needs at least 2 maps");
        for (const auto& m : maps) require_same_shape(m, maps.front(), "uncertainty");
    }
};

struct UncertaintyMap {
    Grid<double> raw;       ///< per-pixel population variance
    Grid<double> rescaled;  ///< raw mapped to [0, 1] per image
    int c = 0;
};

/// FNV-1a over parameter names and bytes.
template <class T>
std::uint64_t fingerprint(const backbones::ModelParams<T>& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        feed(params.names[i].data(), params.names[i].size());
        feed(params.tensors[i].data.data(), params.tensors[i].data.size() * sizeof(T));
    }
    return h;
}

/// `c` dropout-active forward passes; pass i uses the seed derive(seed, i).
template <class T>
McSamples mc_sample(const backbones::ModelParams<T>& params, const Image& image, int c, std::uint64_t seed) {
    if (c < 2) throw ConfigError("uncertainty", "MC pass count must be >= 2, got " + std::to_string(c));
    McSamples out;
    out.model_fingerprint = fingerprint(params);
    const auto batch = backbones::to_batch<T>({&image});
    for (int i = 0; i < c; ++i) {
        const std::uint64_t s = derive_seed(seed, {static_cast<std::uint64_t>(i)});
        Rng draw(s);
        const auto probs = backbones::forward(params, batch, true, draw);
        ProbMap m(image.height(), image.width());
        for (std::size_t p = 0; p < m.size(); ++p) m[p] = static_cast<double>(probs.data[p]);
        out.maps.push_back(std::move(m));
        out.seeds.push_back(s);
    }
    return out;
}

/// Per-pixel mean of the stack, summed in stack order.
inline ProbMap expectation(const McSamples& samples) {
    samples.validate();
    ProbMap mean(samples.maps.front().height(), samples.maps.front().width());
    for (const auto& m : samples.maps)
        for (std::size_t p = 0; p < mean.size(); ++p) mean[p] += m[p];
    const double inv = 1.0 / static_cast<double>(samples.count());
    for (auto& v : mean) v *= inv;
    return mean;
}

/// Per-image min-max rescaling; a constant grid maps to zeros.
inline Grid<double> rescale_unit(const Grid<double>& raw) {
    Grid<double> out(raw.height(), raw.width());
    if (raw.size() == 0) return out;
    for (double v : raw)
        if (!(v >= 0.0)) throw DomainError("uncertainty", "variance values must be >= 0");
    const auto [lo, hi] = std::minmax_element(raw.begin(), raw.end());
    const double range = *hi - *lo;
    if (range <= 0.0) return out;
    for (std::size_t p = 0; p < raw.size(); ++p) out[p] = (raw[p] - *lo) / range;
    return out;
}

/// Population variance (1/C) per pixel, two-pass on values shifted by the
/// first map so that identical maps give exactly zero.
inline UncertaintyMap variance_map(const McSamples& samples) {
    samples.validate();
    const auto& first = samples.maps.front();
    const double inv = 1.0 / static_cast<double>(samples.count());
    Grid<double> shift_mean(first.height(), first.width());
    for (const auto& m : samples.maps)
        for (std::size_t p = 0; p < shift_mean.size(); ++p) shift_mean[p] += m[p] - first[p];
    for (auto& v : shift_mean) v *= inv;
    Grid<double> var(first.height(), first.width());
    for (const auto& m : samples.maps)
        for (std::size_t p = 0; p < var.size(); ++p) {
            const double d = (m[p] - first[p]) - shift_mean[p];
            var[p] += d * d;
        }
    for (auto& v : var) v *= inv;
    UncertaintyMap u;
    u.rescaled = rescale_unit(var);
    u.raw = std::move(var);
    u.c = static_cast<int>(samples.count());
    return u;
}

}  // namespace strudel::uncertainty
