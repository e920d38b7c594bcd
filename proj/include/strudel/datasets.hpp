#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "strudel/error.hpp"
#include "strudel/grid.hpp"
#include "strudel/log.hpp"
#include "strudel/random.hpp"

namespace strudel::datasets {

enum class Domain { source, target };

inline const char* to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

inline Domain parse_domain(const std::string& s) {
    if (s == "source") return Domain::source;
    if (s == "target") return Domain::target;
    throw ConfigError("datasets", "unknown domain '" + s + "'");
}

/// Pass-key for reading quarantined target ground truth. Only evaluation
/// code obtains one (see metrics::evaluation_access()).
class EvaluationAccess {
    EvaluationAccess() = default;
    friend EvaluationAccess grant_evaluation_access();
};

inline EvaluationAccess grant_evaluation_access() { return EvaluationAccess{}; }

/// Number of ground-truth reads of quarantined target masks so far.
inline std::atomic<std::size_t>& quarantined_reads() {
    static std::atomic<std::size_t> n{0};
    return n;
}

/// One 2D intensity grid with an optional binary mask.
///
/// Target-domain masks are quarantined: `label()` refuses them, so training
/// code can only see target ground truth through an explicit release
/// (`released_copy`) or an evaluation pass-key.
class ImageSample {
public:
    ImageSample() = default;
    ImageSample(std::string id, Image image, std::optional<Mask> mask, Domain domain)
        : id_(std::move(id)), image_(std::move(image)), mask_(std::move(mask)), domain_(domain) {
        if (mask_) {
            require_same_shape(image_, *mask_, "datasets");
            if (!is_binary(*mask_)) throw DomainError("datasets", "mask of '" + id_ + "' is not binary");
        }
        quarantined_ = domain_ == Domain::target;
    }

    const std::string& id() const noexcept { return id_; }
    const Image& image() const noexcept { return image_; }
    Image& image() noexcept { return image_; }
    Domain domain() const noexcept { return domain_; }
    bool has_mask() const noexcept { return mask_.has_value(); }
    bool quarantined() const noexcept { return quarantined_ && mask_.has_value(); }

    /// Training-visible label.
    const Mask& label() const {
        if (!mask_) throw DomainError("datasets", "sample '" + id_ + "' has no mask");
        if (quarantined_) throw QuarantineError("datasets", "training path read quarantined target mask of '" + id_ + "'");
        return *mask_;
    }

    /// Ground truth for evaluation; works for every sample with a mask.
    const Mask& ground_truth(EvaluationAccess) const {
        if (!mask_) throw DomainError("datasets", "sample '" + id_ + "' has no ground truth");
        if (quarantined_) ++quarantined_reads();
        return *mask_;
    }

    /// Copy whose mask is usable for training (declared labeled-target budget).
    ImageSample released_copy() const {
        ImageSample s = *this;
        s.quarantined_ = false;
        return s;
    }

    /// Copy without any mask.
    ImageSample unlabeled_copy() const {
        ImageSample s = *this;
        s.mask_.reset();
        return s;
    }

    void set_image(Image img) {
        if (mask_) require_same_shape(img, *mask_, "datasets");
        image_ = std::move(img);
    }

private:
    std::string id_;
    Image image_;
    std::optional<Mask> mask_;
    Domain domain_ = Domain::source;
    bool quarantined_ = false;
};

template <class V>
struct Range {
    V min{};
    V max{};
    bool valid() const { return min <= max; }
};

/// Parametric ellipse-lesion image domain.
struct DomainConfig {
    Domain domain = Domain::source;
    std::string id_prefix = "src";
    int image_size = 64;
    double background_mean = 0.30;
    double background_std = 0.04;  ///< amplitude of the smooth background texture
    double lesion_intensity_offset = 0.35;
    Range<int> lesion_count_range{1, 4};
    Range<double> lesion_radius_range{2.5, 6.0};
    double gamma = 1.0;  ///< contrast exponent applied to the lesion profile
    double noise_std = 0.04;
    /// Bright non-lesion spots (never part of the mask).
    Range<int> artifact_count_range{0, 0};
    Range<double> artifact_radius_range{1.0, 2.0};
    double artifact_intensity_offset = 0.0;
    std::uint64_t seed = 1;

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("datasets", m); };
        if (image_size < 16) fail("image_size must be >= 16");
        if (!lesion_count_range.valid() || lesion_count_range.min < 0) fail("lesion_count_range must be non-empty and >= 0");
        if (!lesion_radius_range.valid() || lesion_radius_range.min <= 0) fail("lesion_radius_range must be non-empty and > 0");
        if (!artifact_count_range.valid() || artifact_count_range.min < 0) fail("artifact_count_range must be non-empty");
        if (!artifact_radius_range.valid() || artifact_radius_range.min <= 0) fail("artifact_radius_range must be non-empty");
        if (!(noise_std >= 0)) fail("noise_std must be >= 0");
        if (!(background_std >= 0)) fail("background_std must be >= 0");
        if (!(gamma > 0)) fail("gamma must be > 0");
        if (2 * lesion_radius_range.max + 4 >= image_size) fail("lesion_radius_range too large for image_size");
    }

    static DomainConfig source_defaults() { return {}; }

    static DomainConfig target_defaults() {
        DomainConfig c;
        c.domain = Domain::target;
        c.id_prefix = "tgt";
        c.background_mean = 0.45;
        c.background_std = 0.06;
        c.lesion_intensity_offset = 0.28;
        c.gamma = 2.0;
        c.noise_std = 0.06;
        c.artifact_count_range = {1, 3};
        c.artifact_radius_range = {1.0, 2.0};
        c.artifact_intensity_offset = 0.25;
        c.seed = 2;
        return c;
    }
};

namespace detail {

inline Image background(const DomainConfig& cfg, Rng& rng) {
    const int s = cfg.image_size;
    Image img(s, s, cfg.background_mean);
    constexpr int waves = 4;
    std::array<double, waves> amp{}, fx{}, fy{}, phase{};
    double power = 0.0;
    for (int k = 0; k < waves; ++k) {
        amp[k] = rng.normal();
        fx[k] = static_cast<double>(rng.uniform_int(-3, 3));
        fy[k] = static_cast<double>(rng.uniform_int(1, 3));
        phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
        power += amp[k] * amp[k] / 2.0;
    }
    const double scale = power > 0 ? cfg.background_std / std::sqrt(power) : 0.0;
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            double t = 0.0;
            for (int k = 0; k < waves; ++k)
                t += amp[k] * std::cos(2.0 * std::numbers::pi * (fx[k] * x + fy[k] * y) / s + phase[k]);
            img(y, x) += scale * t;
        }
    return img;
}

}  // namespace detail

/// Draws sample `index` of the domain; a pure function of (cfg, index).
inline ImageSample generate_sample(const DomainConfig& cfg, std::size_t index) {
    Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(cfg.domain), index}));
    const int s = cfg.image_size;
    Image img = detail::background(cfg, rng);
    Mask mask(s, s, 0);
    Grid<double> lesion(s, s, 0.0);

    const auto count = rng.uniform_int(cfg.lesion_count_range.min, cfg.lesion_count_range.max);
    const double margin = cfg.lesion_radius_range.max + 2.0;
    for (std::int64_t l = 0; l < count; ++l) {
        const double cy = rng.uniform(margin, s - 1 - margin);
        const double cx = rng.uniform(margin, s - 1 - margin);
        const double ra = rng.uniform(cfg.lesion_radius_range.min, cfg.lesion_radius_range.max);
        const double rb = rng.uniform(cfg.lesion_radius_range.min, cfg.lesion_radius_range.max);
        const double theta = rng.uniform(0.0, std::numbers::pi);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const double u = ct * (x - cx) + st * (y - cy);
                const double v = -st * (x - cx) + ct * (y - cy);
                const double rho = std::sqrt((u / ra) * (u / ra) + (v / rb) * (v / rb));
                if (rho <= 1.0) mask(y, x) = 1;
                const double profile = std::pow(1.0 / (1.0 + std::exp((rho - 1.0) / 0.08)), cfg.gamma);
                lesion(y, x) = std::max(lesion(y, x), profile);
            }
    }

    const auto artifacts = rng.uniform_int(cfg.artifact_count_range.min, cfg.artifact_count_range.max);
    Grid<double> spots(s, s, 0.0);
    for (std::int64_t a = 0; a < artifacts; ++a) {
        const double cy = rng.uniform(2.0, s - 3.0);
        const double cx = rng.uniform(2.0, s - 3.0);
        const double r = rng.uniform(cfg.artifact_radius_range.min, cfg.artifact_radius_range.max);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                spots(y, x) = std::max(spots(y, x), std::exp(-d2 / (2.0 * r * r)));
            }
    }

    for (std::size_t i = 0; i < img.size(); ++i)
        img[i] += cfg.lesion_intensity_offset * lesion[i] + cfg.artifact_intensity_offset * spots[i] +
                  cfg.noise_std * rng.normal();

    char buf[32];
    std::snprintf(buf, sizeof buf, "_%05zu", index);
    return ImageSample(cfg.id_prefix + buf, std::move(img), std::move(mask), cfg.domain);
}

/// `n` seeded samples with ground-truth masks. Sample i depends only on
/// (cfg, i), so prefixes of larger draws coincide.
inline std::vector<ImageSample> generate_domain(const DomainConfig& cfg, std::size_t n, std::size_t first_index = 0) {
    cfg.validate();
    std::vector<ImageSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(cfg, first_index + i));
    return out;
}

/// Zero-mean, unit-variance standardization. A constant grid maps to zeros.
inline Image normalize(const Image& image) {
    if (image.empty()) throw ShapeError("datasets", "normalize on empty image");
    double mean = 0.0;
    for (double v : image) mean += v;
    mean /= static_cast<double>(image.size());
    double var = 0.0;
    for (double v : image) var += (v - mean) * (v - mean);
    var /= static_cast<double>(image.size());
    Image out(image.height(), image.width(), 0.0);
    if (var <= 0.0) {
        log::warn("normalize: constant image, returning zeros");
        return out;
    }
    const double inv = 1.0 / std::sqrt(var);
    for (std::size_t i = 0; i < image.size(); ++i) out[i] = (image[i] - mean) * inv;
    return out;
}

inline ImageSample normalized(const ImageSample& s) {
    ImageSample out = s;
    out.set_image(normalize(s.image()));
    return out;
}

/// Centered crop (or zero padding when the grid is smaller than `size`).
template <class V>
Grid<V> center_crop(const Grid<V>& g, int size) {
    if (size <= 0) throw ConfigError("datasets", "crop size must be positive");
    Grid<V> out(size, size, V{});
    const int oy = (g.height() - size) / 2, ox = (g.width() - size) / 2;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const int sy = y + oy, sx = x + ox;
            if (sy >= 0 && sy < g.height() && sx >= 0 && sx < g.width()) out(y, x) = g(sy, sx);
        }
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
    bool horizontal_flip = true;
    bool vertical_flip = true;
    double flip_probability = 0.5;
    bool rotation = true;
    Range<double> rotation_degrees{-15.0, 15.0};
    bool scaling = true;
    Range<double> scale_factor{0.9, 1.1};
    bool elastic = true;
    double elastic_sigma = 1.0;  ///< displacement std in pixels
    int elastic_grid_spacing = 16;
    std::uint64_t seed = 0;

    static AugmentConfig disabled() {
        AugmentConfig c;
        c.horizontal_flip = c.vertical_flip = c.rotation = c.scaling = c.elastic = false;
        return c;
    }

    void validate() const {
        if (!rotation_degrees.valid() || rotation_degrees.min < -180.0 || rotation_degrees.max > 180.0)
            throw ConfigError("datasets", "rotation range must lie within [-180, 180]");
        if (!scale_factor.valid() || scale_factor.min <= 0.0) throw ConfigError("datasets", "scale factors must be > 0");
        if (elastic_sigma < 0.0 || elastic_grid_spacing < 1) throw ConfigError("datasets", "invalid elastic parameters");
        if (!(flip_probability >= 0.0 && flip_probability <= 1.0))
            throw ConfigError("datasets", "flip_probability must lie in [0, 1]");
    }
};

/// A drawn spatial transform. Output pixel (y, x) samples the source at
/// flip(R(-angle)·(p + d(y, x)) / scale + c), p = (x, y) - c.
struct SpatialTransform {
    int size = 0;
    bool hflip = false;
    bool vflip = false;
    double angle_rad = 0.0;
    double scale = 1.0;
    Grid<double> disp_x, disp_y;  ///< empty when no elastic component

    bool identity() const { return !hflip && !vflip && angle_rad == 0.0 && scale == 1.0 && disp_x.empty(); }
};

inline SpatialTransform draw_transform(const AugmentConfig& cfg, int size, Rng& rng) {
    cfg.validate();
    SpatialTransform t;
    t.size = size;
    if (cfg.horizontal_flip) t.hflip = rng.bernoulli(cfg.flip_probability);
    if (cfg.vertical_flip) t.vflip = rng.bernoulli(cfg.flip_probability);
    if (cfg.rotation)
        t.angle_rad = rng.uniform(cfg.rotation_degrees.min, cfg.rotation_degrees.max) * std::numbers::pi / 180.0;
    if (cfg.scaling) t.scale = rng.uniform(cfg.scale_factor.min, cfg.scale_factor.max);
    if (cfg.elastic && cfg.elastic_sigma > 0.0) {
        const int nodes = size / cfg.elastic_grid_spacing + 2;
        Grid<double> cx(nodes, nodes), cy(nodes, nodes);
        for (auto& v : cx) v = rng.normal(0.0, cfg.elastic_sigma);
        for (auto& v : cy) v = rng.normal(0.0, cfg.elastic_sigma);
        t.disp_x = Grid<double>(size, size);
        t.disp_y = Grid<double>(size, size);
        const double step = static_cast<double>(cfg.elastic_grid_spacing);
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                const double gy = y / step, gx = x / step;
                const int y0 = static_cast<int>(gy), x0 = static_cast<int>(gx);
                const double fy = gy - y0, fx = gx - x0;
                auto lerp2 = [&](const Grid<double>& c) {
                    return (1 - fy) * ((1 - fx) * c(y0, x0) + fx * c(y0, x0 + 1)) +
                           fy * ((1 - fx) * c(y0 + 1, x0) + fx * c(y0 + 1, x0 + 1));
                };
                t.disp_x(y, x) = lerp2(cx);
                t.disp_y(y, x) = lerp2(cy);
            }
    }
    return t;
}

/// Resamples `g` under `t` with bilinear interpolation and edge replication.
inline Grid<double> apply_transform(const Grid<double>& g, const SpatialTransform& t) {
    if (g.height() != t.size || g.width() != t.size) throw ShapeError("datasets", "transform drawn for another size");
    if (t.identity()) return g;
    const int s = t.size;
    const double c = (s - 1) / 2.0;
    const double ca = std::cos(t.angle_rad), sa = std::sin(t.angle_rad);
    Grid<double> out(s, s);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            double px = x - c, py = y - c;
            if (!t.disp_x.empty()) {
                px += t.disp_x(y, x);
                py += t.disp_y(y, x);
            }
            double sx = (ca * px + sa * py) / t.scale + c;
            double sy = (-sa * px + ca * py) / t.scale + c;
            if (t.hflip) sx = (s - 1) - sx;
            if (t.vflip) sy = (s - 1) - sy;
            sx = std::clamp(sx, 0.0, s - 1.0);
            sy = std::clamp(sy, 0.0, s - 1.0);
            const int x0 = std::min(static_cast<int>(sx), s - 1), y0 = std::min(static_cast<int>(sy), s - 1);
            const int x1 = std::min(x0 + 1, s - 1), y1 = std::min(y0 + 1, s - 1);
            const double fx = sx - x0, fy = sy - y0;
            double v = (1 - fy) * (1 - fx) * g(y0, x0);
            if (fx != 0.0) v += (1 - fy) * fx * g(y0, x1);
            if (fy != 0.0) v += fy * (1 - fx) * g(y1, x0);
            if (fx != 0.0 && fy != 0.0) v += fy * fx * g(y1, x1);
            out(y, x) = v;
        }
    return out;
}

/// Mask resampling: bilinear interpolation, re-binarized at 0.5.
inline Mask apply_transform(const Mask& m, const SpatialTransform& t) {
    Grid<double> soft(m.height(), m.width());
    for (std::size_t i = 0; i < m.size(); ++i) soft[i] = m[i];
    const Grid<double> moved = apply_transform(soft, t);
    Mask out(m.height(), m.width(), 0);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = moved[i] >= 0.5 ? 1 : 0;
    return out;
}

/// Training-time augmentation: one transform applied to image and label.
/// The label is taken through `label()` so quarantined masks are refused.
inline ImageSample augment(const ImageSample& sample, const AugmentConfig& cfg, Rng& draw) {
    const Mask& mask = sample.label();
    const SpatialTransform t = draw_transform(cfg, sample.image().height(), draw);
    if (t.identity()) return sample;
    return ImageSample(sample.id(), apply_transform(sample.image(), t), apply_transform(mask, t), sample.domain());
}

// ---------------------------------------------------------------------------
// Target pool

/// Unlabeled target samples awaiting selection. Single-writer.
class TargetPool {
public:
    TargetPool() = default;
    explicit TargetPool(std::vector<ImageSample> samples) : remaining_(std::move(samples)) {}

    std::size_t remaining() const noexcept { return remaining_.size(); }
    const std::vector<ImageSample>& samples() const noexcept { return remaining_; }

    /// Removes the samples with the given ids (used when resuming a run).
    void remove_ids(const std::vector<std::string>& ids) {
        std::erase_if(remaining_, [&](const ImageSample& s) { return std::find(ids.begin(), ids.end(), s.id()) != ids.end(); });
    }

    friend std::vector<ImageSample> sample_subset(TargetPool& pool, std::size_t p, Rng& draw);

private:
    std::vector<ImageSample> remaining_;
};

/// Draws `p` samples uniformly without replacement and removes them from
/// the pool.
inline std::vector<ImageSample> sample_subset(TargetPool& pool, std::size_t p, Rng& draw) {
    auto& rem = pool.remaining_;
    if (p > rem.size())
        throw ExhaustionError("datasets", "requested " + std::to_string(p) + " samples but only " +
                                              std::to_string(rem.size()) + " remain in the target pool",
                              rem.size());
    std::vector<std::size_t> idx(rem.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < p; ++i) {
        const auto j = static_cast<std::size_t>(draw.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(idx.size() - 1)));
        std::swap(idx[i], idx[j]);
    }
    std::vector<ImageSample> out;
    out.reserve(p);
    for (std::size_t i = 0; i < p; ++i) out.push_back(rem[idx[i]]);
    std::vector<std::size_t> taken(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(p));
    std::sort(taken.rbegin(), taken.rend());
    for (std::size_t k : taken) rem.erase(rem.begin() + static_cast<std::ptrdiff_t>(k));
    return out;
}

}  // namespace strudel::datasets
