#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <vector>

#include "strudel/backbones.hpp"
#include "strudel/datasets.hpp"
#include "strudel/losses.hpp"
#include "strudel/training_pool.hpp"

namespace strudel::backbones {

struct TrainConfig {
    int epochs = 40;
    double lr = 1e-3;
    int batch_size = 4;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::optional<datasets::AugmentConfig> augment;
    losses::LossConfig loss;

    void validate() const {
        if (epochs < 1) throw ConfigError("backbones", "epochs must be >= 1");
        if (!(lr >= 0.0)) throw ConfigError("backbones", "learning rate must be >= 0");
        if (batch_size < 1) throw ConfigError("backbones", "batch_size must be >= 1");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("backbones", "Adam betas must lie in [0, 1)");
        loss.validate();
        if (augment) augment->validate();
    }
};

struct EpochLoss {
    int epoch = 0;
    losses::LossBreakdown mean;  ///< averaged over the samples seen in the epoch
};

template <class T>
struct TrainResult {
    ModelParams<T> params;
    std::vector<EpochLoss> trace;
};

/// Adaptive-moment optimizer state for one ModelParams.
template <class T>
class Adam {
public:
    Adam(const ModelParams<T>& params, double lr, double beta1, double beta2, double eps)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
        for (const auto& t : params.tensors) {
            m_.emplace_back(t.size(), 0.0);
            v_.emplace_back(t.size(), 0.0);
        }
    }

    void step(ModelParams<T>& params, const std::vector<Tensor<T>>& grads) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, t_);
        const double c2 = 1.0 - std::pow(b2_, t_);
        for (std::size_t i = 0; i < params.tensors.size(); ++i) {
            auto& p = params.tensors[i].data;
            const auto& g = grads[i].data;
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t k = 0; k < p.size(); ++k) {
                const double gk = g[k];
                m[k] = b1_ * m[k] + (1.0 - b1_) * gk;
                v[k] = b2_ * v[k] + (1.0 - b2_) * gk * gk;
                const double update = lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
                p[k] = static_cast<T>(p[k] - update);
            }
        }
    }

private:
    double lr_, b1_, b2_, eps_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

/// Mini-batch Adam on the routed combined loss. Deterministic given
/// cfg.seed: shuffling, augmentation and dropout all draw from seeds derived
/// from it.
template <class T>
TrainResult<T> train(const ModelParams<T>& start, const TrainingPool& pool, const TrainConfig& cfg) {
    cfg.validate();
    if (pool.empty()) throw ConfigError("backbones", "training pool is empty");
    const auto entries = pool.entries();
    const int size = entries.front()->image.height();
    for (const auto* e : entries)
        if (e->image.height() != size || e->image.width() != size || !e->image.same_shape(e->label))
            throw ShapeError("backbones", "training sample '" + e->id + "' has inconsistent size");

    TrainResult<T> result{start, {}};
    auto& params = result.params;
    Adam<T> adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    std::vector<Tensor<T>> grads;
    for (const auto& t : params.tensors) grads.emplace_back(t.n, t.c, t.h, t.w);

    const std::size_t n = entries.size();
    const std::size_t pixels = static_cast<std::size_t>(size) * size;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        Rng shuffle(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), 1}));
        for (std::size_t i = n; i > 1; --i)
            std::swap(order[i - 1], order[static_cast<std::size_t>(shuffle.uniform_int(0, static_cast<std::int64_t>(i - 1)))]);
        Rng aug_rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), 2}));

        losses::LossBreakdown epoch_sum;
        int batch_index = 0;
        for (std::size_t first = 0; first < n; first += cfg.batch_size, ++batch_index) {
            const std::size_t count = std::min<std::size_t>(cfg.batch_size, n - first);
            Tensor<T> batch(static_cast<int>(count), 1, size, size);
            std::vector<Mask> labels;
            std::vector<std::optional<std::vector<T>>> sigmas;
            std::vector<losses::Routing> routes;
            for (std::size_t j = 0; j < count; ++j) {
                const PoolEntry& e = *entries[order[first + j]];
                const Image* img = &e.image;
                Mask label = e.label;
                std::optional<Grid<double>> sigma = e.sigma;
                Image moved;
                if (cfg.augment) {
                    const auto t = datasets::draw_transform(*cfg.augment, size, aug_rng);
                    if (!t.identity()) {
                        moved = datasets::apply_transform(e.image, t);
                        img = &moved;
                        label = datasets::apply_transform(e.label, t);
                        if (sigma) {
                            *sigma = datasets::apply_transform(*sigma, t);
                            for (auto& s : *sigma) s = std::clamp(s, 0.0, 1.0);
                        }
                    }
                }
                for (std::size_t p = 0; p < pixels; ++p) batch.sample(static_cast<int>(j))[p] = static_cast<T>((*img)[p]);
                labels.push_back(std::move(label));
                if (sigma) {
                    std::vector<T> s(pixels);
                    for (std::size_t p = 0; p < pixels; ++p) s[p] = static_cast<T>((*sigma)[p]);
                    sigmas.emplace_back(std::move(s));
                } else {
                    sigmas.emplace_back();
                }
                routes.push_back(e.routing);
            }

            for (auto& g : grads) g.fill(T{});
            Graph<T> graph(true);
            auto pb = ParamBinder<T>::bind(params, &grads);
            Rng drop_rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch), 3, static_cast<std::uint64_t>(batch_index)}));
            DropoutState drop{true, params.spec.dropout_rate, &drop_rng};
            Var probs = nn::sigmoid(graph, build_logits(graph, pb, params.spec, graph.constant(std::move(batch)), drop));

            const auto& pv = graph.value(probs);
            Tensor<T> seed_grad(pv.n, 1, size, size);
            losses::LossBreakdown batch_sum;
            for (std::size_t j = 0; j < count; ++j) {
                std::span<const T> pred(pv.sample(static_cast<int>(j)), pixels);
                std::optional<std::span<const T>> sigma;
                if (sigmas[j]) sigma = std::span<const T>(*sigmas[j]);
                batch_sum += losses::combined_loss<T>(pred, labels[j].values(), sigma, routes[j], cfg.loss,
                                                      std::span<T>(seed_grad.sample(static_cast<int>(j)), pixels),
                                                      1.0 / static_cast<double>(count));
            }
            if (!std::isfinite(batch_sum.total)) {
                std::ostringstream os;
                os << "non-finite loss at epoch " << epoch << ", batch " << batch_index << " (dice=" << batch_sum.dice
                   << ", bce=" << batch_sum.bce << ", ubce=" << batch_sum.ubce << ")";
                throw NonFiniteLossError("backbones", os.str());
            }
            graph.backward(probs, seed_grad);
            adam.step(params, grads);
            epoch_sum += batch_sum;
        }
        result.trace.push_back({epoch, epoch_sum.scaled(1.0 / static_cast<double>(n))});
    }
    if (!params.all_finite()) throw NonFiniteLossError("backbones", "parameters became non-finite during training");
    return result;
}

/// Normalized image list → N×1×H×W tensor.
template <class T>
Tensor<T> to_batch(const std::vector<const Image*>& images) {
    if (images.empty()) return {};
    const int h = images.front()->height(), w = images.front()->width();
    Tensor<T> out(static_cast<int>(images.size()), 1, h, w);
    for (std::size_t i = 0; i < images.size(); ++i) {
        if (images[i]->height() != h || images[i]->width() != w) throw ShapeError("backbones", "batch images differ in size");
        for (std::size_t p = 0; p < images[i]->size(); ++p) out.sample(static_cast<int>(i))[p] = static_cast<T>((*images[i])[p]);
    }
    return out;
}

/// Single-image deterministic prediction as a probability grid.
template <class T>
ProbMap predict(const ModelParams<T>& params, const Image& image) {
    const auto out = forward(params, to_batch<T>({&image}));
    ProbMap p(image.height(), image.width());
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<double>(out.data[i]);
    return p;
}

}  // namespace strudel::backbones
