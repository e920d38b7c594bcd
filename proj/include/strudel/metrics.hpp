#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "strudel/error.hpp"
#include "strudel/grid.hpp"

namespace strudel::metrics {

// ---------------------------------------------------------------------------
// Region metrics

/// 2|P∩G| / (|P|+|G|); 1 when both masks are empty.
inline double dsc(const Mask& pred, const Mask& gt) {
    require_same_shape(pred, gt, "metrics");
    std::size_t p = 0, g = 0, both = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        p += pred[i] != 0;
        g += gt[i] != 0;
        both += (pred[i] != 0) && (gt[i] != 0);
    }
    if (p + g == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

/// |ln(|P|+1) − ln(|G|+1)|.
inline double lavd(const Mask& pred, const Mask& gt) {
    require_same_shape(pred, gt, "metrics");
    const double p = static_cast<double>(foreground_count(pred));
    const double g = static_cast<double>(foreground_count(gt));
    return std::abs(std::log(p + 1.0) - std::log(g + 1.0));
}

/// Foreground pixels with at least one 4-neighbour outside the foreground.
/// Pixels beyond the image edge count as background.
inline Mask boundary(const Mask& m) {
    const int h = m.height(), w = m.width();
    Mask b(h, w);
    auto bg = [&](int y, int x) { return y < 0 || y >= h || x < 0 || x >= w || m(y, x) == 0; };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (m(y, x) && (bg(y - 1, x) || bg(y + 1, x) || bg(y, x - 1) || bg(y, x + 1))) b(y, x) = 1;
    return b;
}

namespace detail {

/// One-dimensional lower envelope pass of the exact squared Euclidean
/// distance transform.
inline void edt_1d(const double* f, int n, double* d, std::vector<int>& v, std::vector<double>& z) {
    v.assign(n, 0);
    z.assign(n + 1, 0.0);
    int k = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    auto meet = [&](int q, int p) {
        return ((f[q] + static_cast<double>(q) * q) - (f[p] + static_cast<double>(p) * p)) / (2.0 * (q - p));
    };
    for (int q = 1; q < n; ++q) {
        double s = meet(q, v[k]);
        while (s <= z[k]) s = meet(q, v[--k]);
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double dq = q - v[k];
        d[q] = dq * dq + f[v[k]];
    }
}

}  // namespace detail

/// Squared Euclidean distance from every pixel to the nearest set pixel.
/// An empty mask gives +inf everywhere.
inline Grid<double> squared_distance_transform(const Mask& m) {
    const int h = m.height(), w = m.width();
    const double big = 1e30;
    Grid<double> g(h, w);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = m[i] ? 0.0 : big;
    std::vector<int> v;
    std::vector<double> z;
    std::vector<double> f(std::max(h, w)), d(std::max(h, w));
    for (int x = 0; x < w; ++x) {
        for (int y = 0; y < h; ++y) f[y] = g(y, x);
        detail::edt_1d(f.data(), h, d.data(), v, z);
        for (int y = 0; y < h; ++y) g(y, x) = d[y];
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) f[x] = g(y, x);
        detail::edt_1d(f.data(), w, d.data(), v, z);
        for (int x = 0; x < w; ++x) g(y, x) = d[x];
    }
    for (auto& val : g)
        if (val >= big / 2) val = std::numeric_limits<double>::infinity();
    return g;
}

/// Linearly interpolated percentile at position q·(n−1) of sorted values.
inline double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw DomainError("metrics", "percentile of an empty set");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

struct HausdorffResult {
    double value = 0.0;
    bool sentinel = false;  ///< exactly one mask empty; value is the image diagonal
};

/// 95th percentile of boundary-to-boundary nearest distances, both
/// directions pooled.
inline HausdorffResult hausdorff95_detail(const Mask& pred, const Mask& gt) {
    require_same_shape(pred, gt, "metrics");
    const bool pe = foreground_count(pred) == 0, ge = foreground_count(gt) == 0;
    if (pe && ge) return {0.0, false};
    if (pe || ge) return {std::hypot(static_cast<double>(pred.height()), static_cast<double>(pred.width())), true};
    const Mask bp = boundary(pred), bg = boundary(gt);
    const auto dp = squared_distance_transform(bp), dg = squared_distance_transform(bg);
    std::vector<double> dists;
    for (std::size_t i = 0; i < bp.size(); ++i) {
        if (bp[i]) dists.push_back(std::sqrt(dg[i]));
        if (bg[i]) dists.push_back(std::sqrt(dp[i]));
    }
    return {percentile(std::move(dists), 0.95), false};
}

inline double hausdorff95(const Mask& pred, const Mask& gt) { return hausdorff95_detail(pred, gt).value; }

// ---------------------------------------------------------------------------
// Lesion-level metrics

struct Component {
    int id = 0;
    std::vector<std::pair<int, int>> pixels;  ///< (y, x)
};

struct LesionSet {
    std::vector<Component> components;
    Grid<int> labels;  ///< component id per pixel, 0 for background

    std::size_t size() const noexcept { return components.size(); }
};

/// Maximal connected foreground regions (4- or 8-connectivity), ids from 1
/// in raster order of their first pixel.
inline LesionSet connected_components(const Mask& m, int connectivity = 8) {
    if (connectivity != 4 && connectivity != 8) throw ConfigError("metrics", "connectivity must be 4 or 8");
    const int h = m.height(), w = m.width();
    LesionSet out;
    out.labels = Grid<int>(h, w, 0);
    std::vector<std::pair<int, int>> stack;
    for (int y0 = 0; y0 < h; ++y0)
        for (int x0 = 0; x0 < w; ++x0) {
            if (!m(y0, x0) || out.labels(y0, x0)) continue;
            Component c;
            c.id = static_cast<int>(out.components.size()) + 1;
            out.labels(y0, x0) = c.id;
            stack.assign(1, {y0, x0});
            while (!stack.empty()) {
                const auto [y, x] = stack.back();
                stack.pop_back();
                c.pixels.emplace_back(y, x);
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if ((dy == 0 && dx == 0) || (connectivity == 4 && dy != 0 && dx != 0)) continue;
                        const int ny = y + dy, nx = x + dx;
                        if (ny < 0 || ny >= h || nx < 0 || nx >= w || !m(ny, nx) || out.labels(ny, nx)) continue;
                        out.labels(ny, nx) = c.id;
                        stack.emplace_back(ny, nx);
                    }
            }
            std::sort(c.pixels.begin(), c.pixels.end());
            out.components.push_back(std::move(c));
        }
    return out;
}

/// Components of `set` that share at least one pixel with `other`.
inline std::size_t count_hit(const LesionSet& set, const Mask& other) {
    std::size_t n = 0;
    for (const auto& c : set.components)
        for (const auto& [y, x] : c.pixels)
            if (other(y, x)) {
                ++n;
                break;
            }
    return n;
}

struct LesionCounts {
    std::size_t gt = 0, pred = 0;
    std::size_t gt_detected = 0;  ///< gt lesions touched by the prediction
    std::size_t pred_matched = 0; ///< predicted lesions touching the ground truth
};

inline LesionCounts lesion_counts(const Mask& pred, const Mask& gt, int connectivity = 8) {
    require_same_shape(pred, gt, "metrics");
    const auto gs = connected_components(gt, connectivity);
    const auto ps = connected_components(pred, connectivity);
    return {gs.size(), ps.size(), count_hit(gs, pred), count_hit(ps, gt)};
}

inline double recall_from(const LesionCounts& c) {
    return c.gt == 0 ? 1.0 : static_cast<double>(c.gt_detected) / static_cast<double>(c.gt);
}

inline double f1_from(const LesionCounts& c) {
    if (c.gt == 0 && c.pred == 0) return 1.0;
    const double recall = recall_from(c);
    const double precision = c.pred == 0 ? 0.0 : static_cast<double>(c.pred_matched) / static_cast<double>(c.pred);
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

/// Fraction of ground-truth lesions overlapped by the prediction; 1 when
/// there are none.
inline double lesion_recall(const Mask& pred, const Mask& gt) { return recall_from(lesion_counts(pred, gt)); }

/// Harmonic mean of lesion precision and recall; 1 when both masks are
/// empty.
inline double lesion_f1(const Mask& pred, const Mask& gt) { return f1_from(lesion_counts(pred, gt)); }

// ---------------------------------------------------------------------------
// Reports

struct MetricReport {
    double dsc = 0.0;
    double h95 = 0.0;
    double lavd = 0.0;
    double lesion_recall = 0.0;
    double lesion_f1 = 0.0;
    LesionCounts counts;
    bool h95_sentinel = false;
    bool both_empty = false;
    bool gt_empty = false;
};

inline MetricReport evaluate(const Mask& pred, const Mask& gt) {
    require_same_shape(pred, gt, "metrics");
    if (!is_binary(pred) || !is_binary(gt)) throw DomainError("metrics", "metric inputs must be binary masks");
    MetricReport r;
    r.dsc = dsc(pred, gt);
    const auto h = hausdorff95_detail(pred, gt);
    r.h95 = h.value;
    r.h95_sentinel = h.sentinel;
    r.lavd = lavd(pred, gt);
    r.counts = lesion_counts(pred, gt);
    r.lesion_recall = recall_from(r.counts);
    r.lesion_f1 = f1_from(r.counts);
    r.gt_empty = r.counts.gt == 0;
    r.both_empty = r.gt_empty && r.counts.pred == 0;
    return r;
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  ///< population standard deviation
    std::size_t n = 0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
    MeanStd m;
    m.n = v.size();
    if (v.empty()) return m;
    m.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(v.size()));
    return m;
}

// ---------------------------------------------------------------------------
// Paired test

enum class Alternative { two_sided, greater, less };

struct WilcoxonResult {
    double statistic = 0.0;  ///< W+, rank sum of positive differences a − b
    double p_value = 1.0;
    std::size_t n = 0;       ///< pairs left after dropping zero differences
    bool exact = false;
};

/// Wilcoxon signed-rank test on a − b. Zero differences are dropped; the
/// null distribution is enumerated exactly for n ≤ 12 and approximated by a
/// tie-corrected normal otherwise. `greater` tests whether a tends to exceed b.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b,
                                           Alternative alt = Alternative::two_sided) {
    if (a.size() != b.size()) throw ShapeError("metrics", "wilcoxon inputs differ in length");
    std::vector<double> d;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) d.push_back(a[i] - b[i]);
    if (d.empty()) throw DegenerateSampleError("metrics", "all paired differences are zero");
    if (d.size() < 5)
        throw DegenerateSampleError("metrics", "need at least 5 non-zero differences, got " + std::to_string(d.size()));
    const std::size_t n = d.size();

    // Average ranks of |d|, kept doubled so ties stay integral.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return std::abs(d[i]) < std::abs(d[j]); });
    std::vector<long> rank2(n);
    double tie_term = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
        const long r2 = static_cast<long>(i + j + 2);  // 2 × mean of ranks i+1 .. j+1
        for (std::size_t k = i; k <= j; ++k) rank2[order[k]] = r2;
        const double t = static_cast<double>(j - i + 1);
        tie_term += t * t * t - t;
        i = j + 1;
    }
    long w2 = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (d[i] > 0) w2 += rank2[i];

    WilcoxonResult r;
    r.statistic = static_cast<double>(w2) / 2.0;
    r.n = n;
    double p_upper, p_lower;  // P(W+ >= w), P(W+ <= w)
    if (n <= 12) {
        r.exact = true;
        std::size_t ge = 0, le = 0;
        const std::size_t total = std::size_t{1} << n;
        for (std::size_t mask = 0; mask < total; ++mask) {
            long s = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (mask >> i & 1U) s += rank2[i];
            ge += s >= w2;
            le += s <= w2;
        }
        p_upper = static_cast<double>(ge) / static_cast<double>(total);
        p_lower = static_cast<double>(le) / static_cast<double>(total);
    } else {
        const double nn = static_cast<double>(n);
        const double mean = nn * (nn + 1.0) / 4.0;
        const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
        const double z = (r.statistic - mean) / std::sqrt(var);
        p_upper = 0.5 * std::erfc(z / std::sqrt(2.0));
        p_lower = 0.5 * std::erfc(-z / std::sqrt(2.0));
    }
    switch (alt) {
        case Alternative::greater: r.p_value = p_upper; break;
        case Alternative::less: r.p_value = p_lower; break;
        case Alternative::two_sided: r.p_value = std::min(1.0, 2.0 * std::min(p_upper, p_lower)); break;
    }
    return r;
}

}  // namespace strudel::metrics
