#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>

#include "strudel/error.hpp"
#include "strudel/grid.hpp"

namespace strudel::losses {

/// Which loss a training sample is routed through.
enum class Routing {
    fixed_label,                    ///< Dice + BCE
    pseudo_label_with_uncertainty,  ///< Dice + uncertainty-weighted BCE
};

inline const char* to_string(Routing r) {
    return r == Routing::fixed_label ? "fixed_label" : "pseudo_label_with_uncertainty";
}

struct LossConfig {
    double bce_clamp_epsilon = 1e-7;
    double dice_smooth = 1.0;

    void validate() const {
        if (!(bce_clamp_epsilon > 0.0 && bce_clamp_epsilon < 0.5))
            throw ConfigError("losses", "bce_clamp_epsilon must lie in (0, 0.5)");
        if (!(dice_smooth > 0.0)) throw ConfigError("losses", "dice_smooth must be > 0");
    }
};

/// Per-sample (or batch-mean) loss with its components. Exactly one of
/// bce/ubce is non-zero for a single sample, depending on routing.
struct LossBreakdown {
    double total = 0.0;
    double dice = 0.0;
    double bce = 0.0;
    double ubce = 0.0;

    LossBreakdown& operator+=(const LossBreakdown& o) {
        total += o.total;
        dice += o.dice;
        bce += o.bce;
        ubce += o.ubce;
        return *this;
    }
    LossBreakdown scaled(double f) const { return {total * f, dice * f, bce * f, ubce * f}; }
};

namespace detail {

template <class P>
void check_sizes(std::span<const P> pred, std::span<const std::uint8_t> target) {
    if (pred.size() != target.size())
        throw ShapeError("losses", "prediction has " + std::to_string(pred.size()) + " pixels, target " +
                                       std::to_string(target.size()));
}

template <class P>
void check_sigma(std::span<const P> sigma, std::size_t n) {
    if (sigma.size() != n) throw ShapeError("losses", "uncertainty map size does not match prediction");
    for (P s : sigma)
        if (!(s >= P{0} && s <= P{1})) throw DomainError("losses", "uncertainty values must lie in [0, 1]");
}

/// Mean over pixels of w_n * -[t log p + (1-t) log(1-p)], p clamped to
/// [eps, 1-eps], w_n = 1 - sigma_n (or 1 without sigma). Optionally adds
/// scale * dL/dp to `grad`.
template <class P>
double cross_entropy(std::span<const P> pred, std::span<const std::uint8_t> target, const P* sigma, double eps,
                     P* grad, double scale) {
    const std::size_t n = pred.size();
    if (n == 0) return 0.0;
    const double inv_n = 1.0 / static_cast<double>(n);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double raw = static_cast<double>(pred[i]);
        const double p = std::clamp(raw, eps, 1.0 - eps);
        const double w = sigma ? 1.0 - static_cast<double>(sigma[i]) : 1.0;
        const bool t = target[i] != 0;
        sum += w * -(t ? std::log(p) : std::log(1.0 - p));
        if (grad && raw > eps && raw < 1.0 - eps)
            grad[i] += static_cast<P>(scale * inv_n * w * (t ? -1.0 / p : 1.0 / (1.0 - p)));
    }
    return sum * inv_n;
}

template <class P>
double soft_dice(std::span<const P> pred, std::span<const std::uint8_t> target, double smooth, P* grad, double scale) {
    double inter = 0.0, sum_p = 0.0, sum_t = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double p = static_cast<double>(pred[i]);
        const double t = target[i] != 0 ? 1.0 : 0.0;
        inter += p * t;
        sum_p += p;
        sum_t += t;
    }
    const double num = 2.0 * inter + smooth;
    const double den = sum_p + sum_t + smooth;
    if (grad) {
        const double inv_den2 = 1.0 / (den * den);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double t = target[i] != 0 ? 1.0 : 0.0;
            grad[i] += static_cast<P>(-scale * (2.0 * t * den - num) * inv_den2);
        }
    }
    return 1.0 - num / den;
}

}  // namespace detail

/// Binary cross entropy, averaged over pixels.
template <class P>
double bce(std::span<const P> pred, std::span<const std::uint8_t> target, const LossConfig& cfg = {},
           std::span<P> grad = {}) {
    detail::check_sizes(pred, target);
    return detail::cross_entropy<P>(pred, target, nullptr, cfg.bce_clamp_epsilon, grad.empty() ? nullptr : grad.data(), 1.0);
}

/// Uncertainty-aware BCE: each pixel's cross-entropy term is weighted by
/// (1 - sigma), sigma being the rescaled MC variance in [0, 1].
template <class P>
double ubce(std::span<const P> pred, std::span<const std::uint8_t> target, std::span<const P> sigma,
            const LossConfig& cfg = {}, std::span<P> grad = {}) {
    detail::check_sizes(pred, target);
    detail::check_sigma(sigma, pred.size());
    return detail::cross_entropy<P>(pred, target, sigma.data(), cfg.bce_clamp_epsilon,
                                    grad.empty() ? nullptr : grad.data(), 1.0);
}

/// Soft Dice loss 1 - (2·Σpt + ε)/(Σp + Σt + ε).
template <class P>
double dice_loss(std::span<const P> pred, std::span<const std::uint8_t> target, const LossConfig& cfg = {},
                 std::span<P> grad = {}) {
    detail::check_sizes(pred, target);
    return detail::soft_dice<P>(pred, target, cfg.dice_smooth, grad.empty() ? nullptr : grad.data(), 1.0);
}

/// Routed loss for one sample: fixed labels use Dice + BCE, pseudo labels
/// with uncertainty use Dice + UBCE. `sigma` must be present exactly for
/// the pseudo route. Gradients w.r.t. pred, multiplied by `grad_scale`, are
/// added to `grad` when it is non-empty.
template <class P>
LossBreakdown combined_loss(std::span<const P> pred, std::span<const std::uint8_t> target,
                            std::optional<std::span<const P>> sigma, Routing routing, const LossConfig& cfg = {},
                            std::span<P> grad = {}, double grad_scale = 1.0) {
    detail::check_sizes(pred, target);
    const bool pseudo = routing == Routing::pseudo_label_with_uncertainty;
    if (pseudo && !sigma) throw RoutingError("losses", "pseudo-label routing requires an uncertainty map");
    if (!pseudo && sigma) throw RoutingError("losses", "fixed-label routing must not carry an uncertainty map");
    if (pseudo) detail::check_sigma(*sigma, pred.size());
    if (!grad.empty() && grad.size() != pred.size()) throw ShapeError("losses", "gradient buffer size mismatch");

    P* g = grad.empty() ? nullptr : grad.data();
    LossBreakdown out;
    out.dice = detail::soft_dice<P>(pred, target, cfg.dice_smooth, g, grad_scale);
    const double ce =
        detail::cross_entropy<P>(pred, target, pseudo ? sigma->data() : nullptr, cfg.bce_clamp_epsilon, g, grad_scale);
    (pseudo ? out.ubce : out.bce) = ce;
    out.total = out.dice + out.bce + out.ubce;
    return out;
}

// Grid conveniences.

inline double bce(const ProbMap& pred, const Mask& target, const LossConfig& cfg = {}) {
    require_same_shape(pred, target, "losses");
    return bce<double>(pred.values(), target.values(), cfg);
}

inline double ubce(const ProbMap& pred, const Mask& target, const Grid<double>& sigma, const LossConfig& cfg = {}) {
    require_same_shape(pred, target, "losses");
    require_same_shape(pred, sigma, "losses");
    return ubce<double>(pred.values(), target.values(), sigma.values(), cfg);
}

inline double dice_loss(const ProbMap& pred, const Mask& target, const LossConfig& cfg = {}) {
    require_same_shape(pred, target, "losses");
    return dice_loss<double>(pred.values(), target.values(), cfg);
}

inline LossBreakdown combined_loss(const ProbMap& pred, const Mask& target, const Grid<double>* sigma, Routing routing,
                                   const LossConfig& cfg = {}) {
    require_same_shape(pred, target, "losses");
    std::optional<std::span<const double>> s;
    if (sigma) {
        require_same_shape(pred, *sigma, "losses");
        s = sigma->values();
    }
    return combined_loss<double>(pred.values(), target.values(), s, routing, cfg);
}

}  // namespace strudel::losses
