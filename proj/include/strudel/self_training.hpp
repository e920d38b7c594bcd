#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "strudel/backbones.hpp"
#include "strudel/datasets.hpp"
#include "strudel/error.hpp"
#include "strudel/log.hpp"
#include "strudel/pseudo_labels.hpp"
#include "strudel/train.hpp"
#include "strudel/training_pool.hpp"
#include "strudel/uncertainty.hpp"

namespace strudel::self_training {

using backbones::ModelParams;
using datasets::ImageSample;
using pseudo_labels::PseudoLabel;
using pseudo_labels::Provenance;

enum class Variant { strudel, self_training, strudel_no_aux };

inline const char* to_string(Variant v) {
    switch (v) {
        case Variant::strudel: return "strudel";
        case Variant::self_training: return "selftrain";
        case Variant::strudel_no_aux: return "strudel_no_aux";
    }
    return "?";
}

struct StrudelConfig {
    int K = 5;
    std::size_t P = 8;
    int C = 10;
    double net_threshold = pseudo_labels::network_threshold;
    double aux_threshold = pseudo_labels::auxiliary_threshold;
    pseudo_labels::AuxSegmenterConfig aux;
    int epochs_scratch = 40;
    int epochs_finetune = 10;
    double lr = 1e-3;
    int batch_size = 4;
    std::uint64_t seed = 0;
    std::optional<datasets::AugmentConfig> augment = datasets::AugmentConfig{};
    losses::LossConfig loss;
    /// Replaces every uncertainty map by zeros before retraining.
    bool force_zero_sigma = false;

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("self_training", m); };
        if (K < 1) fail("K must be >= 1");
        if (P < 1) fail("P must be >= 1");
        if (C < 2) fail("C must be >= 2");
        if (!(net_threshold > 0 && net_threshold < 1) || !(aux_threshold > 0 && aux_threshold < 1))
            fail("thresholds must lie in (0, 1)");
        if (epochs_scratch < 1 || epochs_finetune < 1) fail("epoch counts must be >= 1");
        if (batch_size < 1) fail("batch_size must be >= 1");
        aux.validate();
        loss.validate();
        if (augment) augment->validate();
    }

    void validate_pool(std::size_t target_size) const {
        validate();
        if (static_cast<std::size_t>(K) * P > target_size)
            throw ConfigError("self_training", "K*P = " + std::to_string(K * P) + " exceeds the target pool size " +
                                                   std::to_string(target_size));
    }

    backbones::TrainConfig train_config(int epochs, std::uint64_t train_seed) const {
        backbones::TrainConfig t;
        t.epochs = epochs;
        t.lr = lr;
        t.batch_size = batch_size;
        t.seed = train_seed;
        t.augment = augment;
        t.loss = loss;
        return t;
    }
};

/// Per-iteration bookkeeping.
struct IterationRecord {
    int k = 0;
    std::vector<std::string> subset_ids;
    std::array<std::size_t, 3> provenance_counts{};  ///< labels that reached each provenance state
    std::size_t fixed_size = 0;                     ///< |D_fix| after the iteration
    std::vector<backbones::EpochLoss> finetune_trace;
    std::vector<backbones::EpochLoss> retrain_trace;
    double mean_sigma = 0.0;                        ///< mean rescaled uncertainty over the subset
    std::optional<double> target_dsc;               ///< held-out metric when an evaluator is given
    std::string checkpoint;                         ///< filled in by the persistence callback
};

struct RunHistory {
    std::vector<IterationRecord> records;
};

struct RunResult {
    ModelParams<float> model;
    RunHistory history;
};

/// Everything an iteration produced, handed to observers before it is
/// discarded.
struct IterationArtifacts {
    const IterationRecord& record;
    const ModelParams<float>& model;
    const std::vector<ImageSample>& subset;           ///< normalized, unlabeled
    const std::vector<Mask>& fused_init;              ///< initial labels
    const std::vector<Mask>& refreshed;               ///< MC-expectation labels
    const std::vector<uncertainty::UncertaintyMap>& uncertainty;
    const std::vector<PseudoLabel>& final_labels;     ///< appended to D_fix
};

/// State of a partially completed run, enough to continue it.
struct ResumeState {
    ModelParams<float> model;                         ///< M_k of the last complete iteration
    RunHistory history;
    std::vector<std::vector<PseudoLabel>> fixed_labels;  ///< model_final labels per completed iteration
};

using Evaluator = std::function<double(const ModelParams<float>&)>;
using IterationObserver = std::function<void(IterationRecord&, const IterationArtifacts&)>;

struct RunHooks {
    Evaluator evaluate;           ///< optional; mean held-out target DSC
    IterationObserver on_iteration;  ///< optional; may fill record.checkpoint
    const ResumeState* resume = nullptr;
};

namespace seeds {
inline std::uint64_t base(std::uint64_t s) { return derive_seed(s, {0xba5e}); }
inline std::uint64_t base_init(std::uint64_t s) { return derive_seed(s, {0xba5e, 1}); }
inline std::uint64_t joint(std::uint64_t s) { return derive_seed(s, {0x1017}); }
inline std::uint64_t joint_init(std::uint64_t s) { return derive_seed(s, {0x1017, 1}); }
inline std::uint64_t finetune(std::uint64_t s) { return derive_seed(s, {0xf1e}); }
inline std::uint64_t iteration(std::uint64_t s, int k, std::uint64_t phase) {
    return derive_seed(s, {static_cast<std::uint64_t>(k), phase});
}
}  // namespace seeds

namespace detail {

inline std::vector<ImageSample> normalized(const std::vector<ImageSample>& in) {
    std::vector<ImageSample> out;
    out.reserve(in.size());
    for (const auto& s : in) out.push_back(datasets::normalized(s));
    return out;
}

inline PoolEntry fixed_entry(const ImageSample& s, const Mask& label) {
    return {s.id(), s.image(), label, std::nullopt, losses::Routing::fixed_label};
}

/// D_fix from normalized labeled samples.
inline TrainingPool source_pool(const std::vector<ImageSample>& labeled) {
    TrainingPool pool;
    for (const auto& s : labeled) pool.add_fixed(fixed_entry(s, s.label()));
    return pool;
}

inline std::string at_iteration(int k, const Error& e) {
    return "iteration " + std::to_string(k) + ": " + std::string(e.what()).substr(e.module().size() + 2);
}

}  // namespace detail

/// Supervised Dice+BCE training from a fresh init on labeled samples.
inline ModelParams<float> train_supervised(const std::vector<ImageSample>& labeled, const backbones::BackboneSpec& spec,
                                           const StrudelConfig& cfg, std::uint64_t init_seed, std::uint64_t train_seed,
                                           std::vector<backbones::EpochLoss>* trace = nullptr) {
    if (labeled.empty()) throw ConfigError("self_training", "labeled training set is empty");
    const auto pool = detail::source_pool(detail::normalized(labeled));
    auto r = backbones::train(backbones::init_model<float>(spec, init_seed), pool,
                              cfg.train_config(cfg.epochs_scratch, train_seed));
    if (trace) *trace = std::move(r.trace);
    return std::move(r.params);
}

/// Base model on the labeled source set.
inline ModelParams<float> train_base(const std::vector<ImageSample>& source, const backbones::BackboneSpec& spec,
                                     const StrudelConfig& cfg, std::vector<backbones::EpochLoss>* trace = nullptr) {
    return train_supervised(source, spec, cfg, seeds::base_init(cfg.seed), seeds::base(cfg.seed), trace);
}

/// Source plus the released labeled target budget, from scratch.
inline ModelParams<float> run_joint(const std::vector<ImageSample>& source, const std::vector<ImageSample>& labeled_target,
                                    const backbones::BackboneSpec& spec, const StrudelConfig& cfg) {
    std::vector<ImageSample> all = source;
    all.insert(all.end(), labeled_target.begin(), labeled_target.end());
    return train_supervised(all, spec, cfg, seeds::joint_init(cfg.seed), seeds::joint(cfg.seed));
}

/// Base model fine-tuned on the labeled target budget for epochs_finetune.
inline ModelParams<float> run_finetune(const ModelParams<float>& base, const std::vector<ImageSample>& labeled_target,
                                       const StrudelConfig& cfg) {
    if (labeled_target.empty()) throw ConfigError("self_training", "labeled target set is empty");
    const auto pool = detail::source_pool(detail::normalized(labeled_target));
    return backbones::train(base, pool, cfg.train_config(cfg.epochs_finetune, seeds::finetune(cfg.seed))).params;
}

/// The iterative loop. `base` is M_0; `source` carries labels; `target` is
/// the unlabeled target pool (its masks, if any, stay quarantined).
inline RunResult run_iterations(Variant variant, const StrudelConfig& cfg, const ModelParams<float>& base,
                                const std::vector<ImageSample>& source, const std::vector<ImageSample>& target,
                                const RunHooks& hooks = {}) {
    cfg.validate_pool(target.size());
    const bool use_aux = variant != Variant::strudel_no_aux;
    const bool weighted = variant != Variant::self_training;

    const auto source_n = detail::normalized(source);
    TrainingPool fixed = detail::source_pool(source_n);
    datasets::TargetPool pool(target);
    RunResult result{base, {}};
    int first_k = 1;

    if (hooks.resume) {
        const auto& r = *hooks.resume;
        if (r.history.records.size() != r.fixed_labels.size())
            throw ConfigError("self_training", "resume state is inconsistent");
        for (std::size_t j = 0; j < r.history.records.size(); ++j) {
            const auto& rec = r.history.records[j];
            std::vector<ImageSample> used;
            for (const auto& id : rec.subset_ids) {
                auto it = std::find_if(pool.samples().begin(), pool.samples().end(), [&](const ImageSample& s) { return s.id() == id; });
                if (it == pool.samples().end()) throw ConfigError("self_training", "resume references unknown sample '" + id + "'");
                used.push_back(datasets::normalized(*it));
            }
            pool.remove_ids(rec.subset_ids);
            for (std::size_t i = 0; i < used.size(); ++i) {
                if (r.fixed_labels[j][i].id() != used[i].id()) throw ConfigError("self_training", "resume labels out of order");
                fixed.add_fixed(detail::fixed_entry(used[i], r.fixed_labels[j][i].mask()));
            }
        }
        result.model = r.model;
        result.history = r.history;
        first_k = static_cast<int>(r.history.records.size()) + 1;
        log::info("resuming at iteration " + std::to_string(first_k));
    }

    for (int k = first_k; k <= cfg.K; ++k) {
        try {
            IterationRecord rec;
            rec.k = k;

            // Subset selection and initial labels.
            Rng subset_rng(seeds::iteration(cfg.seed, k, 11));
            const auto subset = detail::normalized(datasets::sample_subset(pool, cfg.P, subset_rng));
            for (const auto& s : subset) rec.subset_ids.push_back(s.id());
            auto labels = pseudo_labels::init_pseudo_labels(result.model, cfg.aux, subset, k, use_aux, cfg.net_threshold,
                                                            cfg.aux_threshold);
            std::vector<Mask> fused;
            for (const auto& l : labels) fused.push_back(l.mask());
            rec.provenance_counts[0] = labels.size();

            // Fine-tune the previous model on D_fix plus the fused labels.
            TrainingPool tune = fixed;
            {
                std::vector<PoolEntry> entries;
                for (std::size_t i = 0; i < subset.size(); ++i) entries.push_back(detail::fixed_entry(subset[i], labels[i].mask()));
                tune.set_pseudo(std::move(entries));
            }
            auto tuned = backbones::train(result.model, tune, cfg.train_config(cfg.epochs_finetune, seeds::iteration(cfg.seed, k, 12)));
            rec.finetune_trace = std::move(tuned.trace);

            // Refresh labels and uncertainty from MC dropout.
            std::vector<Mask> refreshed;
            std::vector<uncertainty::UncertaintyMap> maps;
            const std::uint64_t mc_seed = seeds::iteration(cfg.seed, k, 13);
            for (std::size_t i = 0; i < subset.size(); ++i) {
                const auto mc = uncertainty::mc_sample(tuned.params, subset[i].image(), cfg.C,
                                                       derive_seed(mc_seed, {static_cast<std::uint64_t>(i)}));
                labels[i].advance(pseudo_labels::binarize(uncertainty::expectation(mc), cfg.net_threshold), Provenance::mc_refreshed);
                refreshed.push_back(labels[i].mask());
                auto u = uncertainty::variance_map(mc);
                if (cfg.force_zero_sigma) u.rescaled = Grid<double>(u.raw.height(), u.raw.width(), 0.0);
                for (double v : u.rescaled) rec.mean_sigma += v;
                maps.push_back(std::move(u));
            }
            rec.mean_sigma /= static_cast<double>(subset.size() * subset.front().image().size());
            rec.provenance_counts[1] = labels.size();

            // Retrain from a fresh init with the routed loss.
            TrainingPool retrain = fixed;
            {
                std::vector<PoolEntry> entries;
                for (std::size_t i = 0; i < subset.size(); ++i) {
                    PoolEntry e = detail::fixed_entry(subset[i], labels[i].mask());
                    if (weighted) {
                        e.sigma = maps[i].rescaled;
                        e.routing = losses::Routing::pseudo_label_with_uncertainty;
                    }
                    entries.push_back(std::move(e));
                }
                retrain.set_pseudo(std::move(entries));
            }
            auto fresh = backbones::init_model<float>(base.spec, seeds::iteration(cfg.seed, k, 14));
            auto trained = backbones::train(fresh, retrain, cfg.train_config(cfg.epochs_scratch, seeds::iteration(cfg.seed, k, 15)));
            rec.retrain_trace = std::move(trained.trace);
            result.model = std::move(trained.params);

            // The new model's predictions join D_fix.
            for (std::size_t i = 0; i < subset.size(); ++i) {
                labels[i].advance(pseudo_labels::binarize(backbones::predict(result.model, subset[i].image()), cfg.net_threshold),
                                  Provenance::model_final);
                fixed.add_fixed(detail::fixed_entry(subset[i], labels[i].mask()));
            }
            rec.provenance_counts[2] = labels.size();
            rec.fixed_size = fixed.size();
            if (hooks.evaluate) rec.target_dsc = hooks.evaluate(result.model);
            if (hooks.on_iteration) hooks.on_iteration(rec, {rec, result.model, subset, fused, refreshed, maps, labels});
            log::info(std::string(to_string(variant)) + " iteration " + std::to_string(k) + " done, |D_fix| = " +
                      std::to_string(rec.fixed_size));
            result.history.records.push_back(std::move(rec));
        } catch (const ExhaustionError& e) {
            throw ExhaustionError(e.module(), detail::at_iteration(k, e), e.remaining());
        } catch (const NonFiniteLossError& e) {
            throw NonFiniteLossError(e.module(), detail::at_iteration(k, e));
        }
    }
    return result;
}

inline RunResult run_strudel(const StrudelConfig& cfg, const ModelParams<float>& base, const std::vector<ImageSample>& source,
                             const std::vector<ImageSample>& target, const RunHooks& hooks = {}) {
    return run_iterations(Variant::strudel, cfg, base, source, target, hooks);
}

inline RunResult run_self_training(const StrudelConfig& cfg, const ModelParams<float>& base,
                                   const std::vector<ImageSample>& source, const std::vector<ImageSample>& target,
                                   const RunHooks& hooks = {}) {
    return run_iterations(Variant::self_training, cfg, base, source, target, hooks);
}

inline RunResult run_strudel_no_aux(const StrudelConfig& cfg, const ModelParams<float>& base,
                                    const std::vector<ImageSample>& source, const std::vector<ImageSample>& target,
                                    const RunHooks& hooks = {}) {
    return run_iterations(Variant::strudel_no_aux, cfg, base, source, target, hooks);
}

}  // namespace strudel::self_training
