#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "strudel/backbones.hpp"
#include "strudel/datasets.hpp"
#include "strudel/error.hpp"
#include "strudel/grid.hpp"
#include "strudel/train.hpp"

namespace strudel::pseudo_labels {

inline constexpr double network_threshold = 0.5;
inline constexpr double auxiliary_threshold = 0.75;
inline constexpr double auxiliary_standalone_threshold = 0.45;

enum class Provenance { fused_init = 0, mc_refreshed = 1, model_final = 2 };

inline const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::fused_init: return "fused_init";
        case Provenance::mc_refreshed: return "mc_refreshed";
        case Provenance::model_final: return "model_final";
    }
    return "?";
}

inline Provenance parse_provenance(const std::string& s) {
    if (s == "fused_init") return Provenance::fused_init;
    if (s == "mc_refreshed") return Provenance::mc_refreshed;
    if (s == "model_final") return Provenance::model_final;
    throw ConfigError("pseudo_labels", "unknown provenance '" + s + "'");
}

/// Model-generated label for one target sample.
class PseudoLabel {
public:
    PseudoLabel(std::string id, Mask mask, Provenance provenance, int iteration)
        : id_(std::move(id)), mask_(std::move(mask)), provenance_(provenance), iteration_(iteration) {
        if (!is_binary(mask_)) throw DomainError("pseudo_labels", "pseudo label '" + id_ + "' is not binary");
    }

    const std::string& id() const noexcept { return id_; }
    const Mask& mask() const noexcept { return mask_; }
    Provenance provenance() const noexcept { return provenance_; }
    int iteration() const noexcept { return iteration_; }

    /// Replaces the mask; provenance may only move forward.
    void advance(Mask mask, Provenance next) {
        if (static_cast<int>(next) <= static_cast<int>(provenance_))
            throw DomainError("pseudo_labels", std::string("provenance of '") + id_ + "' cannot go from " +
                                                   to_string(provenance_) + " to " + to_string(next));
        require_same_shape(mask, mask_, "pseudo_labels");
        if (!is_binary(mask)) throw DomainError("pseudo_labels", "pseudo label '" + id_ + "' is not binary");
        mask_ = std::move(mask);
        provenance_ = next;
    }

private:
    std::string id_;
    Mask mask_;
    Provenance provenance_;
    int iteration_;
};

/// Heuristic bright-region detector used as the auxiliary segmenter.
struct AuxSegmenterConfig {
    double zscore_threshold = 1.5;
    int smoothing_radius = 1;
    double sensitivity_bias = -0.25;  ///< shifts the threshold; negative is more sensitive
    double response_slope = 4.0;      ///< logistic slope per standard deviation

    void validate() const {
        if (smoothing_radius < 0) throw ConfigError("pseudo_labels", "smoothing_radius must be >= 0");
        if (!(response_slope > 0)) throw ConfigError("pseudo_labels", "response_slope must be > 0");
    }
};

/// Box-smoothed z-score squashed by a logistic. Expects a normalized image,
/// so intensities already are z-scores.
inline ProbMap aux_segment(const Image& image, const AuxSegmenterConfig& cfg = {}) {
    cfg.validate();
    const int h = image.height(), w = image.width(), r = cfg.smoothing_radius;
    const double centre = cfg.zscore_threshold + cfg.sensitivity_bias;
    ProbMap out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double sum = 0.0;
            int n = 0;
            for (int yy = std::max(0, y - r); yy <= std::min(h - 1, y + r); ++yy)
                for (int xx = std::max(0, x - r); xx <= std::min(w - 1, x + r); ++xx) {
                    sum += image(yy, xx);
                    ++n;
                }
            const double z = sum / n;
            out(y, x) = 1.0 / (1.0 + std::exp(-cfg.response_slope * (z - centre)));
        }
    return out;
}

/// 1 where value >= threshold.
inline Mask binarize(const ProbMap& soft, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0))
        throw ConfigError("pseudo_labels", "binarize threshold must lie in (0, 1), got " + std::to_string(threshold));
    Mask m(soft.height(), soft.width());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = soft[i] >= threshold ? 1 : 0;
    return m;
}

inline Mask fuse_or(const Mask& a, const Mask& b) {
    require_same_shape(a, b, "pseudo_labels");
    if (!is_binary(a) || !is_binary(b)) throw DomainError("pseudo_labels", "fuse_or inputs must be binary");
    Mask m(a.height(), a.width());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = a[i] | b[i];
    return m;
}

/// Initial labels for a target subset: the model mask, OR-fused with the
/// auxiliary mask when `use_aux` is set.
template <class T>
std::vector<PseudoLabel> init_pseudo_labels(const backbones::ModelParams<T>& model, const AuxSegmenterConfig& aux_cfg,
                                            const std::vector<datasets::ImageSample>& subset, int iteration,
                                            bool use_aux = true, double net_threshold = network_threshold,
                                            double aux_threshold = auxiliary_threshold) {
    if (subset.empty()) throw ConfigError("pseudo_labels", "subset is empty");
    std::vector<PseudoLabel> out;
    out.reserve(subset.size());
    for (const auto& s : subset) {
        Mask m = binarize(backbones::predict(model, s.image()), net_threshold);
        if (use_aux) m = fuse_or(m, binarize(aux_segment(s.image(), aux_cfg), aux_threshold));
        out.emplace_back(s.id(), std::move(m), Provenance::fused_init, iteration);
    }
    return out;
}

}  // namespace strudel::pseudo_labels
