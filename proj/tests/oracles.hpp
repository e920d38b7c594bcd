#pragma once

// Independent reference implementations used to cross-check the library.
// They favour the most literal formulation over speed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <utility>
#include <vector>

#include "strudel/grid.hpp"
#include "strudel/nn/tensor.hpp"
#include "strudel/random.hpp"

namespace oracle {

using strudel::Grid;
using strudel::Mask;
using strudel::Rng;
using strudel::nn::Tensor;

inline Mask random_mask(int h, int w, double density, Rng& rng) {
    Mask m(h, w);
    for (auto& v : m) v = rng.uniform() < density ? 1 : 0;
    return m;
}

/// Random blobby mask: a few filled rectangles plus sparse speckle.
inline Mask random_blobs(int h, int w, Rng& rng) {
    Mask m(h, w);
    const auto blobs = rng.uniform_int(0, 4);
    for (std::int64_t b = 0; b < blobs; ++b) {
        const auto y0 = rng.uniform_int(0, h - 1), x0 = rng.uniform_int(0, w - 1);
        const auto bh = rng.uniform_int(1, 5), bw = rng.uniform_int(1, 5);
        for (auto y = y0; y < std::min<std::int64_t>(h, y0 + bh); ++y)
            for (auto x = x0; x < std::min<std::int64_t>(w, x0 + bw); ++x) m(static_cast<int>(y), static_cast<int>(x)) = 1;
    }
    for (auto& v : m)
        if (rng.uniform() < 0.03) v = 1;
    return m;
}

/// Zero-padded direct 2D convolution, stride 1, odd kernel.
inline Tensor<double> direct_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* bias) {
    const int pad = w.h / 2;
    Tensor<double> out(x.n, w.n, x.h, x.w);
    for (int n = 0; n < x.n; ++n)
        for (int o = 0; o < w.n; ++o)
            for (int y = 0; y < x.h; ++y)
                for (int xx = 0; xx < x.w; ++xx) {
                    double s = bias ? bias->data[o] : 0.0;
                    for (int c = 0; c < x.c; ++c)
                        for (int ky = 0; ky < w.h; ++ky)
                            for (int kx = 0; kx < w.w; ++kx) {
                                const int sy = y + ky - pad, sx = xx + kx - pad;
                                if (sy >= 0 && sy < x.h && sx >= 0 && sx < x.w) s += w.at(o, c, ky, kx) * x.at(n, c, sy, sx);
                            }
                    out.at(n, o, y, xx) = s;
                }
    return out;
}

/// Two-pass population variance of a list of values.
inline double variance(const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return ss / static_cast<double>(v.size());
}

/// Pixels of m with a 4-neighbour that is background or off-grid.
inline std::vector<std::pair<int, int>> boundary_pixels(const Mask& m) {
    std::vector<std::pair<int, int>> out;
    const int h = m.height(), w = m.width();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!m(y, x)) continue;
            bool edge = false;
            const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
            for (int k = 0; k < 4; ++k) {
                const int ny = y + dy[k], nx = x + dx[k];
                if (ny < 0 || ny >= h || nx < 0 || nx >= w || !m(ny, nx)) edge = true;
            }
            if (edge) out.emplace_back(y, x);
        }
    return out;
}

/// H95 by exhaustive pairwise boundary distances.
inline double hausdorff95(const Mask& a, const Mask& b) {
    const auto ba = boundary_pixels(a), bb = boundary_pixels(b);
    if (ba.empty() && bb.empty()) return 0.0;
    if (ba.empty() || bb.empty()) return std::sqrt(double(a.height()) * a.height() + double(a.width()) * a.width());
    std::vector<double> d;
    auto nearest = [](const std::vector<std::pair<int, int>>& from, const std::vector<std::pair<int, int>>& to,
                      std::vector<double>& out) {
        for (const auto& [y, x] : from) {
            double best = 1e300;
            for (const auto& [v, u] : to) best = std::min(best, std::sqrt(double(y - v) * (y - v) + double(x - u) * (x - u)));
            out.push_back(best);
        }
    };
    nearest(ba, bb, d);
    nearest(bb, ba, d);
    std::sort(d.begin(), d.end());
    const double pos = 0.95 * static_cast<double>(d.size() - 1);
    const auto i = static_cast<std::size_t>(pos);
    if (i + 1 >= d.size()) return d.back();
    return d[i] + (pos - static_cast<double>(i)) * (d[i + 1] - d[i]);
}

/// Component labels by union-find over raster neighbours.
inline Grid<int> label_components(const Mask& m, int connectivity) {
    const int h = m.height(), w = m.width();
    std::vector<int> parent(static_cast<std::size_t>(h) * w);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int i) {
        while (parent[i] != i) i = parent[i] = parent[parent[i]];
        return i;
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (!m(y, x)) continue;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (connectivity == 4 && std::abs(dy) + std::abs(dx) != 1) continue;
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w || !m(ny, nx)) continue;
                    parent[find(y * w + x)] = find(ny * w + nx);
                }
        }
    Grid<int> out(h, w, 0);
    std::map<int, int> ids;
    for (int i = 0; i < h * w; ++i)
        if (m[static_cast<std::size_t>(i)]) {
            const int r = find(i);
            if (!ids.count(r)) ids[r] = static_cast<int>(ids.size()) + 1;
            out[static_cast<std::size_t>(i)] = ids[r];
        }
    return out;
}

inline int component_count(const Grid<int>& labels) {
    return labels.size() == 0 ? 0 : *std::max_element(labels.begin(), labels.end());
}

/// Number of components in `labels` containing a pixel set in `other`.
inline int components_hit(const Grid<int>& labels, const Mask& other) {
    std::set<int> hit;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] && other[i]) hit.insert(labels[i]);
    return static_cast<int>(hit.size());
}

/// Exact one-sided tail probabilities of the signed-rank statistic by
/// enumerating every sign pattern. Ranks use mid-ranks computed by counting.
struct SignedRankTails {
    double w_plus = 0.0;
    double p_upper = 0.0;  ///< P(W+ >= observed)
    double p_lower = 0.0;  ///< P(W+ <= observed)
};

inline SignedRankTails signed_rank_exact(const std::vector<double>& diffs) {
    const std::size_t n = diffs.size();
    std::vector<double> rank(n);
    for (std::size_t i = 0; i < n; ++i) {
        double less = 0, equal = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (std::abs(diffs[j]) < std::abs(diffs[i])) ++less;
            if (std::abs(diffs[j]) == std::abs(diffs[i])) ++equal;
        }
        rank[i] = less + (equal + 1.0) / 2.0;
    }
    SignedRankTails t;
    for (std::size_t i = 0; i < n; ++i)
        if (diffs[i] > 0) t.w_plus += rank[i];
    std::size_t up = 0, lo = 0;
    for (std::uint64_t s = 0; s < (std::uint64_t{1} << n); ++s) {
        double w = 0;
        for (std::size_t i = 0; i < n; ++i)
            if (s >> i & 1U) w += rank[i];
        up += w >= t.w_plus - 1e-9;
        lo += w <= t.w_plus + 1e-9;
    }
    const double total = static_cast<double>(std::uint64_t{1} << n);
    t.p_upper = static_cast<double>(up) / total;
    t.p_lower = static_cast<double>(lo) / total;
    return t;
}

}  // namespace oracle
