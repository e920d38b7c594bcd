#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "strudel/backbones.hpp"
#include "strudel/datasets.hpp"
#include "strudel/error.hpp"
#include "strudel/io.hpp"
#include "strudel/log.hpp"
#include "strudel/metrics.hpp"
#include "strudel/pseudo_labels.hpp"
#include "strudel/self_training.hpp"

namespace strudel::experiment {

namespace fs = std::filesystem;
using json = nlohmann::json;
using backbones::ModelParams;
using datasets::ImageSample;

enum class Method { base, joint, finetune, selftrain, strudel, strudel_no_aux, aux_only };

inline constexpr std::array<Method, 7> all_methods = {Method::base,    Method::joint,          Method::finetune,
                                                      Method::selftrain, Method::strudel, Method::strudel_no_aux,
                                                      Method::aux_only};

inline const char* to_string(Method m) {
    switch (m) {
        case Method::base: return "base";
        case Method::joint: return "joint";
        case Method::finetune: return "finetune";
        case Method::selftrain: return "selftrain";
        case Method::strudel: return "strudel";
        case Method::strudel_no_aux: return "strudel_no_aux";
        case Method::aux_only: return "aux_only";
    }
    return "?";
}

inline std::optional<Method> find_method(const std::string& s) {
    for (auto m : all_methods)
        if (s == to_string(m)) return m;
    return std::nullopt;
}

inline Method parse_method(const std::string& s) {
    if (auto m = find_method(s)) return *m;
    throw UsageError("cli", "unknown method '" + s + "'");
}

inline bool is_iterative(Method m) {
    return m == Method::selftrain || m == Method::strudel || m == Method::strudel_no_aux;
}

inline self_training::Variant variant_of(Method m) {
    switch (m) {
        case Method::selftrain: return self_training::Variant::self_training;
        case Method::strudel_no_aux: return self_training::Variant::strudel_no_aux;
        default: return self_training::Variant::strudel;
    }
}

// ---------------------------------------------------------------------------
// Configuration

struct DatasetConfig {
    datasets::DomainConfig source = datasets::DomainConfig::source_defaults();
    datasets::DomainConfig target = datasets::DomainConfig::target_defaults();
    std::size_t source_size = 20;
    std::size_t target_pool_size = 40;
    std::size_t target_eval_size = 30;
    std::size_t target_labeled_size = 9;  ///< released to Joint and Fine-Tune only
    std::uint64_t split_seed = 3;
    std::string directory = "data";

    std::size_t target_size() const { return target_pool_size + target_eval_size + target_labeled_size; }

    void validate() const {
        source.validate();
        target.validate();
        if (source.domain != datasets::Domain::source || target.domain != datasets::Domain::target)
            throw ConfigError("cli", "dataset domains are swapped");
        if (source.image_size != target.image_size) throw ConfigError("cli", "source and target image sizes differ");
        if (source.id_prefix == target.id_prefix) throw ConfigError("cli", "source and target id prefixes must differ");
        if (source_size == 0 || target_pool_size == 0 || target_eval_size == 0)
            throw ConfigError("cli", "source, pool and eval sizes must be > 0");
        if (directory.empty()) throw ConfigError("cli", "dataset directory is empty");
    }
};

struct ExperimentConfig {
    DatasetConfig dataset;
    backbones::BackboneSpec backbone;
    self_training::StrudelConfig strudel;
    std::vector<Method> methods{all_methods.begin(), all_methods.end()};
    std::string output_dir = "runs";

    void validate() const {
        dataset.validate();
        backbone.validate();
        strudel.validate_pool(dataset.target_pool_size);
        if (methods.empty()) throw ConfigError("cli", "methods list is empty");
        if (output_dir.empty()) throw ConfigError("cli", "output_dir is empty");
    }
};

namespace detail {

/// Reads an object field by field and rejects keys it never asked for, so a
/// misspelled key fails loudly instead of silently keeping the default.
class Fields {
public:
    Fields(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        if (!j_.is_object()) throw ConfigError("cli", where_ + " must be an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError("cli", path(key) + ": " + e.what());
        }
    }

    template <class T>
    void require(const char* key, T& out) {
        if (!j_.contains(key)) throw ConfigError("cli", path(key) + " must be given explicitly");
        get(key, out);
    }

    template <class V>
    void range(const char* key, datasets::Range<V>& out) {
        seen_.insert(key);
        if (!j_.contains(key)) return;
        const auto& v = j_.at(key);
        if (!v.is_array() || v.size() != 2) throw ConfigError("cli", path(key) + " must be [min, max]");
        try {
            out = {v[0].get<V>(), v[1].get<V>()};
        } catch (const json::exception& e) {
            throw ConfigError("cli", path(key) + ": " + e.what());
        }
    }

    const json* sub(const char* key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    std::string path(const char* key) const { return where_ + "." + key; }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw ConfigError("cli", where_ + ": unknown key '" + k + "'");
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

inline std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace detail

inline json to_json(const datasets::DomainConfig& c) {
    return {{"id_prefix", c.id_prefix},
            {"image_size", c.image_size},
            {"background_mean", c.background_mean},
            {"background_std", c.background_std},
            {"lesion_intensity_offset", c.lesion_intensity_offset},
            {"lesion_count_range", {c.lesion_count_range.min, c.lesion_count_range.max}},
            {"lesion_radius_range", {c.lesion_radius_range.min, c.lesion_radius_range.max}},
            {"gamma", c.gamma},
            {"noise_std", c.noise_std},
            {"artifact_count_range", {c.artifact_count_range.min, c.artifact_count_range.max}},
            {"artifact_radius_range", {c.artifact_radius_range.min, c.artifact_radius_range.max}},
            {"artifact_intensity_offset", c.artifact_intensity_offset},
            {"seed", c.seed}};
}

inline datasets::DomainConfig domain_from_json(const json& j, datasets::DomainConfig c, const std::string& where) {
    detail::Fields f(j, where);
    f.get("id_prefix", c.id_prefix);
    f.get("image_size", c.image_size);
    f.get("background_mean", c.background_mean);
    f.get("background_std", c.background_std);
    f.get("lesion_intensity_offset", c.lesion_intensity_offset);
    f.range("lesion_count_range", c.lesion_count_range);
    f.range("lesion_radius_range", c.lesion_radius_range);
    f.get("gamma", c.gamma);
    f.get("noise_std", c.noise_std);
    f.range("artifact_count_range", c.artifact_count_range);
    f.range("artifact_radius_range", c.artifact_radius_range);
    f.get("artifact_intensity_offset", c.artifact_intensity_offset);
    f.require("seed", c.seed);
    f.finish();
    return c;
}

inline json to_json(const datasets::AugmentConfig& c) {
    return {{"horizontal_flip", c.horizontal_flip},
            {"vertical_flip", c.vertical_flip},
            {"flip_probability", c.flip_probability},
            {"rotation", c.rotation},
            {"rotation_degrees", {c.rotation_degrees.min, c.rotation_degrees.max}},
            {"scaling", c.scaling},
            {"scale_factor", {c.scale_factor.min, c.scale_factor.max}},
            {"elastic", c.elastic},
            {"elastic_sigma", c.elastic_sigma},
            {"elastic_grid_spacing", c.elastic_grid_spacing}};
}

inline datasets::AugmentConfig augment_from_json(const json& j, const std::string& where) {
    datasets::AugmentConfig c;
    detail::Fields f(j, where);
    f.get("horizontal_flip", c.horizontal_flip);
    f.get("vertical_flip", c.vertical_flip);
    f.get("flip_probability", c.flip_probability);
    f.get("rotation", c.rotation);
    f.range("rotation_degrees", c.rotation_degrees);
    f.get("scaling", c.scaling);
    f.range("scale_factor", c.scale_factor);
    f.get("elastic", c.elastic);
    f.get("elastic_sigma", c.elastic_sigma);
    f.get("elastic_grid_spacing", c.elastic_grid_spacing);
    f.finish();
    return c;
}

inline json to_json(const self_training::StrudelConfig& c) {
    return {{"K", c.K},
            {"P", c.P},
            {"C", c.C},
            {"net_threshold", c.net_threshold},
            {"aux_threshold", c.aux_threshold},
            {"aux",
             {{"zscore_threshold", c.aux.zscore_threshold},
              {"smoothing_radius", c.aux.smoothing_radius},
              {"sensitivity_bias", c.aux.sensitivity_bias},
              {"response_slope", c.aux.response_slope}}},
            {"epochs_scratch", c.epochs_scratch},
            {"epochs_finetune", c.epochs_finetune},
            {"lr", c.lr},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"augment", c.augment ? to_json(*c.augment) : json(nullptr)},
            {"loss", {{"bce_clamp_epsilon", c.loss.bce_clamp_epsilon}, {"dice_smooth", c.loss.dice_smooth}}}};
}

inline self_training::StrudelConfig strudel_from_json(const json& j, const std::string& where) {
    self_training::StrudelConfig c;
    detail::Fields f(j, where);
    f.get("K", c.K);
    f.get("P", c.P);
    f.get("C", c.C);
    f.get("net_threshold", c.net_threshold);
    f.get("aux_threshold", c.aux_threshold);
    if (const json* a = f.sub("aux")) {
        detail::Fields af(*a, f.path("aux"));
        af.get("zscore_threshold", c.aux.zscore_threshold);
        af.get("smoothing_radius", c.aux.smoothing_radius);
        af.get("sensitivity_bias", c.aux.sensitivity_bias);
        af.get("response_slope", c.aux.response_slope);
        af.finish();
    }
    f.get("epochs_scratch", c.epochs_scratch);
    f.get("epochs_finetune", c.epochs_finetune);
    f.get("lr", c.lr);
    f.get("batch_size", c.batch_size);
    f.require("seed", c.seed);
    if (const json* a = f.sub("augment")) {
        if (a->is_null()) c.augment.reset();
        else c.augment = augment_from_json(*a, f.path("augment"));
    }
    if (const json* l = f.sub("loss")) {
        detail::Fields lf(*l, f.path("loss"));
        lf.get("bce_clamp_epsilon", c.loss.bce_clamp_epsilon);
        lf.get("dice_smooth", c.loss.dice_smooth);
        lf.finish();
    }
    f.finish();
    return c;
}

inline json to_json(const DatasetConfig& d) {
    return {{"source", to_json(d.source)},
            {"target", to_json(d.target)},
            {"source_size", d.source_size},
            {"target_pool_size", d.target_pool_size},
            {"target_eval_size", d.target_eval_size},
            {"target_labeled_size", d.target_labeled_size},
            {"split_seed", d.split_seed},
            {"directory", d.directory}};
}

inline json to_json(const ExperimentConfig& c) {
    json methods = json::array();
    for (auto m : c.methods) methods.push_back(to_string(m));
    return {{"dataset", to_json(c.dataset)},
            {"backbone", io::to_json(c.backbone)},
            {"strudel", to_json(c.strudel)},
            {"methods", methods},
            {"output_dir", c.output_dir}};
}

inline ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    detail::Fields f(j, "config");
    const json* d = f.sub("dataset");
    if (!d) throw ConfigError("cli", "config.dataset is missing");
    {
        detail::Fields df(*d, "config.dataset");
        const json* src = df.sub("source");
        const json* tgt = df.sub("target");
        if (!src || !tgt) throw ConfigError("cli", "config.dataset needs both source and target");
        c.dataset.source = domain_from_json(*src, datasets::DomainConfig::source_defaults(), "config.dataset.source");
        c.dataset.target = domain_from_json(*tgt, datasets::DomainConfig::target_defaults(), "config.dataset.target");
        df.get("source_size", c.dataset.source_size);
        df.get("target_pool_size", c.dataset.target_pool_size);
        df.get("target_eval_size", c.dataset.target_eval_size);
        df.get("target_labeled_size", c.dataset.target_labeled_size);
        df.require("split_seed", c.dataset.split_seed);
        df.get("directory", c.dataset.directory);
        df.finish();
    }
    if (const json* b = f.sub("backbone")) {
        try {
            c.backbone = io::spec_from_json(*b);
        } catch (const json::exception& e) {
            throw ConfigError("cli", std::string("config.backbone: ") + e.what());
        }
    }
    const json* s = f.sub("strudel");
    if (!s) throw ConfigError("cli", "config.strudel is missing");
    c.strudel = strudel_from_json(*s, "config.strudel");
    if (const json* m = f.sub("methods")) {
        if (!m->is_array()) throw ConfigError("cli", "config.methods must be an array");
        c.methods.clear();
        for (const auto& v : *m) {
            if (!v.is_string()) throw ConfigError("cli", "config.methods entries must be strings");
            const auto method = find_method(v.get<std::string>());
            if (!method) throw ConfigError("cli", "config.methods: unknown method '" + v.get<std::string>() + "'");
            c.methods.push_back(*method);
        }
    }
    f.get("output_dir", c.output_dir);
    f.finish();
    c.validate();
    return c;
}

/// Parses JSON with // and /* */ comments.
inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "config") {
    json j;
    try {
        j = json::parse(text, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ConfigError("cli", origin + ": " + e.what());
    }
    return config_from_json(j);
}

/// Loads a config file; relative directories resolve against the file's
/// own directory.
inline ExperimentConfig load_config(const fs::path& path) {
    auto c = parse_config(io::read_file(path), path.string());
    const auto base = fs::absolute(path).parent_path();
    auto anchor = [&](std::string& p) {
        if (fs::path(p).is_relative()) p = (base / p).lexically_normal().string();
    };
    anchor(c.dataset.directory);
    anchor(c.output_dir);
    return c;
}

/// Hash of everything that determines a run's numbers. Directories are left
/// out so moving an experiment does not change its identity.
inline std::string config_hash(const ExperimentConfig& c) {
    json j = to_json(c);
    j["dataset"].erase("directory");
    j.erase("output_dir");
    j.erase("methods");
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a(j.dump())));
    return buf;
}

// ---------------------------------------------------------------------------
// Datasets

struct Splits {
    std::vector<ImageSample> source;   ///< labeled
    std::vector<ImageSample> pool;     ///< unlabeled target (masks quarantined)
    std::vector<ImageSample> eval;     ///< held-out target
    std::vector<ImageSample> labeled;  ///< target budget for Joint and Fine-Tune
};

inline constexpr const char* split_train = "train";
inline constexpr const char* split_pool = "pool";
inline constexpr const char* split_eval = "eval";
inline constexpr const char* split_labeled = "labeled";

/// Generates both domains and fixes the target split once, from split_seed.
inline Splits generate_splits(const DatasetConfig& cfg) {
    cfg.validate();
    Splits s;
    s.source = datasets::generate_domain(cfg.source, cfg.source_size);
    auto target = datasets::generate_domain(cfg.target, cfg.target_size());
    std::vector<std::size_t> order(target.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(cfg.split_seed);
    for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    for (std::size_t i = 0; i < order.size(); ++i) {
        auto& sample = target[order[i]];
        if (i < cfg.target_eval_size) s.eval.push_back(std::move(sample));
        else if (i < cfg.target_eval_size + cfg.target_labeled_size) s.labeled.push_back(std::move(sample));
        else s.pool.push_back(std::move(sample));
    }
    auto by_id = [](const ImageSample& a, const ImageSample& b) { return a.id() < b.id(); };
    std::sort(s.eval.begin(), s.eval.end(), by_id);
    std::sort(s.labeled.begin(), s.labeled.end(), by_id);
    std::sort(s.pool.begin(), s.pool.end(), by_id);
    return s;
}

inline void write_splits(const fs::path& dir, const Splits& s) {
    std::vector<ImageSample> all;
    std::vector<std::string> names;
    auto add = [&](const std::vector<ImageSample>& v, const char* name) {
        for (const auto& x : v) {
            all.push_back(x);
            names.push_back(name);
        }
    };
    add(s.source, split_train);
    add(s.pool, split_pool);
    add(s.eval, split_eval);
    add(s.labeled, split_labeled);
    io::write_dataset(dir, all, names);
}

inline Splits read_splits(const fs::path& dir) {
    if (!fs::exists(dir / io::manifest_name))
        throw IoError("cli", "no dataset at '" + dir.string() + "'; run `strudel generate` first");
    const auto entries = io::read_dataset(dir);
    Splits s{io::select_split(entries, split_train), io::select_split(entries, split_pool),
             io::select_split(entries, split_eval), io::select_split(entries, split_labeled)};
    if (s.source.empty() || s.pool.empty() || s.eval.empty()) throw IoError("cli", "dataset at '" + dir.string() + "' lacks a split");
    return s;
}

inline constexpr const char* dataset_config_name = "dataset_config.json";

inline json dataset_fingerprint(const DatasetConfig& d) {
    json j = to_json(d);
    j.erase("directory");
    return j;
}

inline bool directory_is_empty(const fs::path& dir) { return !fs::exists(dir) || fs::is_empty(dir); }

/// Writes the dataset directory. Output is byte-identical for identical
/// configs.
inline void generate(const ExperimentConfig& cfg, bool force) {
    const fs::path dir = cfg.dataset.directory;
    if (!directory_is_empty(dir)) {
        if (!force) throw UsageError("cli", "output directory '" + dir.string() + "' is not empty (use --force)");
        fs::remove_all(dir);
    }
    write_splits(dir, generate_splits(cfg.dataset));
    io::write_file(dir / dataset_config_name, dataset_fingerprint(cfg.dataset).dump(2) + "\n");
}

/// Loads the dataset a config refers to and checks it was generated from
/// the same dataset section.
inline Splits load_splits(const ExperimentConfig& cfg) {
    const fs::path dir = cfg.dataset.directory;
    const fs::path stamp = dir / dataset_config_name;
    if (fs::exists(stamp) && json::parse(io::read_file(stamp)) != dataset_fingerprint(cfg.dataset))
        throw ConfigError("cli", "dataset at '" + dir.string() + "' was generated from a different config; rerun generate");
    return read_splits(dir);
}

// ---------------------------------------------------------------------------
// Runs

struct SampleMetrics {
    std::string id;
    metrics::MetricReport report;
};

/// Evaluation-side diagnostics of one iteration, computed against the pool's
/// ground truth after training has used the labels.
struct IterationDiagnostics {
    double sigma_fp = 0.0;  ///< mean rescaled uncertainty over false-positive pixels of the refreshed labels
    double sigma_tp = 0.0;  ///< same over true-positive pixels
    std::size_t fp = 0, tp = 0;
};

struct MethodOutcome {
    Method method = Method::base;
    std::uint64_t seed = 0;
    std::vector<SampleMetrics> samples;
    std::optional<double> base_dsc;
    self_training::RunHistory history;
    std::vector<IterationDiagnostics> diagnostics;
    std::optional<ModelParams<float>> model;

    double mean_dsc() const {
        double s = 0.0;
        for (const auto& x : samples) s += x.report.dsc;
        return samples.empty() ? 0.0 : s / static_cast<double>(samples.size());
    }
};

struct RunOptions {
    fs::path run_dir;                          ///< empty: nothing is persisted
    bool resume = false;
    std::optional<ModelParams<float>> base;    ///< reuse instead of training M_0
};

inline constexpr const char* metrics_name = "metrics.csv";
inline constexpr const char* history_name = "history.json";
inline constexpr const char* config_name = "config.json";

namespace detail {

inline std::vector<ImageSample> normalized(const std::vector<ImageSample>& v) { return self_training::detail::normalized(v); }

inline Mask predict_mask(const ModelParams<float>& m, const Image& image, double threshold) {
    return pseudo_labels::binarize(backbones::predict(m, image), threshold);
}

inline double mean_dsc(const ModelParams<float>& m, const std::vector<ImageSample>& eval_n, double threshold) {
    const auto key = datasets::grant_evaluation_access();
    double s = 0.0;
    for (const auto& x : eval_n) s += metrics::dsc(predict_mask(m, x.image(), threshold), x.ground_truth(key));
    return s / static_cast<double>(eval_n.size());
}

inline std::string loss_csv(const std::vector<backbones::EpochLoss>& trace) {
    std::string out = "epoch,total,dice,bce,ubce\n";
    char buf[160];
    for (const auto& e : trace) {
        std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.mean.total, e.mean.dice, e.mean.bce,
                      e.mean.ubce);
        out += buf;
    }
    return out;
}

inline json trace_json(const std::vector<backbones::EpochLoss>& trace) {
    json a = json::array();
    for (const auto& e : trace) a.push_back({e.epoch, e.mean.total, e.mean.dice, e.mean.bce, e.mean.ubce});
    return a;
}

inline std::vector<backbones::EpochLoss> trace_from_json(const json& a) {
    std::vector<backbones::EpochLoss> out;
    for (const auto& r : a) {
        backbones::EpochLoss e;
        e.epoch = r.at(0).get<int>();
        e.mean.total = r.at(1).get<double>();
        e.mean.dice = r.at(2).get<double>();
        e.mean.bce = r.at(3).get<double>();
        e.mean.ubce = r.at(4).get<double>();
        out.push_back(e);
    }
    return out;
}

inline json record_json(const self_training::IterationRecord& r, const IterationDiagnostics& d) {
    json j = {{"k", r.k},
              {"subset_ids", r.subset_ids},
              {"provenance_counts", r.provenance_counts},
              {"fixed_size", r.fixed_size},
              {"mean_sigma", r.mean_sigma},
              {"checkpoint", r.checkpoint},
              {"sigma_fp", d.sigma_fp},
              {"sigma_tp", d.sigma_tp},
              {"fp_pixels", d.fp},
              {"tp_pixels", d.tp},
              {"finetune_trace", trace_json(r.finetune_trace)},
              {"retrain_trace", trace_json(r.retrain_trace)}};
    j["target_dsc"] = r.target_dsc ? json(*r.target_dsc) : json(nullptr);
    return j;
}

inline self_training::IterationRecord record_from_json(const json& j, IterationDiagnostics& d) {
    self_training::IterationRecord r;
    r.k = j.at("k").get<int>();
    r.subset_ids = j.at("subset_ids").get<std::vector<std::string>>();
    r.provenance_counts = j.at("provenance_counts").get<std::array<std::size_t, 3>>();
    r.fixed_size = j.at("fixed_size").get<std::size_t>();
    r.mean_sigma = j.at("mean_sigma").get<double>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    if (!j.at("target_dsc").is_null()) r.target_dsc = j.at("target_dsc").get<double>();
    r.finetune_trace = trace_from_json(j.at("finetune_trace"));
    r.retrain_trace = trace_from_json(j.at("retrain_trace"));
    d.sigma_fp = j.at("sigma_fp").get<double>();
    d.sigma_tp = j.at("sigma_tp").get<double>();
    d.fp = j.at("fp_pixels").get<std::size_t>();
    d.tp = j.at("tp_pixels").get<std::size_t>();
    return r;
}

inline std::string iteration_dir(int k) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "iter_%02d", k);
    return buf;
}

inline std::string format_metric(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace detail

/// Metrics CSV: one row per evaluation sample, then a summary row holding
/// "mean ± std" per metric.
inline std::string metrics_csv(const std::vector<SampleMetrics>& rows) {
    std::string out = "sample_id,dsc,h95,lavd,recall,f1\n";
    std::array<std::vector<double>, 5> cols;
    for (const auto& r : rows) {
        const std::array<double, 5> v = {r.report.dsc, r.report.h95, r.report.lavd, r.report.lesion_recall, r.report.lesion_f1};
        out += r.id;
        for (std::size_t c = 0; c < 5; ++c) {
            out += "," + detail::format_metric(v[c]);
            cols[c].push_back(v[c]);
        }
        out += "\n";
    }
    out += "summary";
    for (const auto& c : cols) {
        const auto ms = metrics::mean_std(c);
        char buf[64];
        std::snprintf(buf, sizeof buf, ",%.4f ± %.4f", ms.mean, ms.std);
        out += buf;
    }
    return out + "\n";
}

/// Trains and evaluates one method. With a run directory, every artifact is
/// written there and an iterative run can continue from its last complete
/// iteration.
inline MethodOutcome run_method(Method method, const ExperimentConfig& cfg, const Splits& splits, const RunOptions& opt = {}) {
    cfg.validate();
    const auto& sc = cfg.strudel;
    const bool persist = !opt.run_dir.empty();
    const fs::path dir = opt.run_dir;
    const auto eval_n = detail::normalized(splits.eval);
    const auto key = datasets::grant_evaluation_access();
    const auto started = std::chrono::steady_clock::now();

    MethodOutcome out;
    out.method = method;
    out.seed = sc.seed;

    const std::string hash = config_hash(cfg);
    if (persist) {
        fs::create_directories(dir);
        if (opt.resume && fs::exists(dir / config_name)) {
            const auto saved = json::parse(io::read_file(dir / config_name));
            if (saved.value("config_hash", "") != hash || saved.value("method", "") != to_string(method))
                throw ConfigError("cli", "cannot resume '" + dir.string() + "': config or method changed since it started");
        }
        json snap = {{"method", to_string(method)}, {"seed", sc.seed}, {"config_hash", hash}, {"config", to_json(cfg)}};
        io::write_file(dir / config_name, snap.dump(2) + "\n");
    }

    auto need_base = [&]() -> ModelParams<float> {
        if (opt.base) return *opt.base;
        const fs::path ckpt = dir / "base.ckpt";
        if (persist && opt.resume && fs::exists(ckpt)) return io::load_checkpoint(ckpt);
        std::vector<backbones::EpochLoss> trace;
        auto m = self_training::train_base(splits.source, cfg.backbone, sc, &trace);
        if (persist) {
            io::save_checkpoint(ckpt, m);
            io::write_file(dir / "base_loss.csv", detail::loss_csv(trace));
        }
        return m;
    };
    auto released = [&] {
        std::vector<ImageSample> v;
        for (const auto& s : splits.labeled) v.push_back(s.released_copy());
        return v;
    };

    std::function<Mask(const ImageSample&)> predict;
    switch (method) {
        case Method::aux_only:
            predict = [&](const ImageSample& s) {
                return pseudo_labels::binarize(pseudo_labels::aux_segment(s.image(), sc.aux), pseudo_labels::auxiliary_standalone_threshold);
            };
            break;
        case Method::base:
            out.model = need_base();
            break;
        case Method::joint:
            out.model = self_training::run_joint(splits.source, released(), cfg.backbone, sc);
            break;
        case Method::finetune: {
            const auto base = need_base();
            out.base_dsc = detail::mean_dsc(base, eval_n, sc.net_threshold);
            out.model = self_training::run_finetune(base, released(), sc);
            break;
        }
        case Method::selftrain:
        case Method::strudel:
        case Method::strudel_no_aux: {
            const auto base = need_base();
            out.base_dsc = detail::mean_dsc(base, eval_n, sc.net_threshold);

            std::vector<json> records;
            self_training::ResumeState state;
            const bool resuming = persist && opt.resume && fs::exists(dir / history_name);
            if (resuming) {
                const auto h = json::parse(io::read_file(dir / history_name));
                for (const auto& jr : h.at("iterations")) {
                    IterationDiagnostics d;
                    auto rec = detail::record_from_json(jr, d);
                    const fs::path idir = dir / detail::iteration_dir(rec.k);
                    std::vector<pseudo_labels::PseudoLabel> labels;
                    for (const auto& id : rec.subset_ids)
                        labels.emplace_back(id, io::decode_mask_pgm(io::read_file(idir / "pseudo" / (id + "_model_final.pgm")), id),
                                            pseudo_labels::Provenance::model_final, rec.k);
                    state.fixed_labels.push_back(std::move(labels));
                    state.history.records.push_back(std::move(rec));
                    out.diagnostics.push_back(d);
                    records.push_back(jr);
                }
                if (!state.history.records.empty())
                    state.model = io::load_checkpoint(dir / state.history.records.back().checkpoint);
            }

            auto write_history = [&] {
                json h = {{"method", to_string(method)}, {"seed", sc.seed}, {"config_hash", hash}, {"iterations", records}};
                h["base_dsc"] = out.base_dsc ? json(*out.base_dsc) : json(nullptr);
                io::write_file(dir / history_name, h.dump(1) + "\n");
            };

            self_training::RunHooks hooks;
            hooks.evaluate = [&](const ModelParams<float>& m) { return detail::mean_dsc(m, eval_n, sc.net_threshold); };
            hooks.on_iteration = [&](self_training::IterationRecord& rec, const self_training::IterationArtifacts& a) {
                IterationDiagnostics d;
                double fp_sum = 0.0, tp_sum = 0.0;
                for (std::size_t i = 0; i < a.subset.size(); ++i) {
                    const auto it = std::find_if(splits.pool.begin(), splits.pool.end(),
                                                 [&](const ImageSample& s) { return s.id() == a.subset[i].id(); });
                    if (it == splits.pool.end() || !it->has_mask()) continue;
                    const auto& gt = it->ground_truth(key);
                    for (std::size_t p = 0; p < gt.size(); ++p) {
                        if (!a.refreshed[i][p]) continue;
                        const double u = a.uncertainty[i].rescaled[p];
                        if (gt[p]) {
                            tp_sum += u;
                            ++d.tp;
                        } else {
                            fp_sum += u;
                            ++d.fp;
                        }
                    }
                }
                d.sigma_fp = d.fp ? fp_sum / static_cast<double>(d.fp) : 0.0;
                d.sigma_tp = d.tp ? tp_sum / static_cast<double>(d.tp) : 0.0;
                out.diagnostics.push_back(d);
                if (!persist) return;

                const std::string iname = detail::iteration_dir(rec.k);
                const fs::path idir = dir / iname;
                rec.checkpoint = iname + "/model.ckpt";
                io::save_checkpoint(dir / rec.checkpoint, a.model);
                io::write_file(idir / "finetune_loss.csv", detail::loss_csv(rec.finetune_trace));
                io::write_file(idir / "retrain_loss.csv", detail::loss_csv(rec.retrain_trace));
                std::string manifest = "# pseudo labels v1\n";
                const std::string thresholds = " net_threshold=" + detail::format_metric(sc.net_threshold) +
                                               " aux_threshold=" + detail::format_metric(sc.aux_threshold) +
                                               " aux=" + (method == Method::strudel_no_aux ? "off" : "on");
                for (std::size_t i = 0; i < a.subset.size(); ++i) {
                    const auto& id = a.subset[i].id();
                    const std::array<std::pair<pseudo_labels::Provenance, const Mask*>, 3> stages = {
                        std::pair{pseudo_labels::Provenance::fused_init, &a.fused_init[i]},
                        std::pair{pseudo_labels::Provenance::mc_refreshed, &a.refreshed[i]},
                        std::pair{pseudo_labels::Provenance::model_final, &a.final_labels[i].mask()}};
                    for (const auto& [prov, mask] : stages) {
                        const std::string file = std::string("pseudo/") + id + "_" + pseudo_labels::to_string(prov) + ".pgm";
                        io::write_file(idir / file, io::encode_mask_pgm(*mask));
                        manifest += "id=" + id + " provenance=" + pseudo_labels::to_string(prov) + " iteration=" +
                                    std::to_string(rec.k) + thresholds + " file=" + file + "\n";
                    }
                    io::write_file(idir / "uncertainty" / (id + ".pfm"), io::encode_pfm(a.uncertainty[i].rescaled));
                    io::write_file(idir / "uncertainty" / (id + "_raw.pfm"), io::encode_pfm(a.uncertainty[i].raw));
                }
                io::write_file(idir / "pseudo_manifest.txt", manifest);
                records.push_back(detail::record_json(rec, d));
                write_history();
            };
            if (resuming) hooks.resume = &state;
            if (persist && !resuming) write_history();
            auto r = self_training::run_iterations(variant_of(method), sc, base, splits.source, splits.pool, hooks);
            out.history = std::move(r.history);
            out.model = std::move(r.model);
            break;
        }
    }
    if (out.model) predict = [&](const ImageSample& s) { return detail::predict_mask(*out.model, s.image(), sc.net_threshold); };

    for (const auto& s : eval_n) out.samples.push_back({s.id(), metrics::evaluate(predict(s), s.ground_truth(key))});
    if (persist) {
        if (out.model) io::save_checkpoint(dir / "final.ckpt", *out.model);
        if (!is_iterative(method)) {
            json h = {{"method", to_string(method)}, {"seed", sc.seed}, {"config_hash", hash}, {"iterations", json::array()}};
            h["base_dsc"] = out.base_dsc ? json(*out.base_dsc) : json(nullptr);
            io::write_file(dir / history_name, h.dump(1) + "\n");
        }
        io::write_file(dir / metrics_name, metrics_csv(out.samples));
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s seed %llu: mean DSC %.4f in %.1f s", to_string(method),
                  static_cast<unsigned long long>(sc.seed), out.mean_dsc(), secs);
    log::info(buf);
    return out;
}

/// Default run directory: <output_dir>/<method>-seed<S>.
inline fs::path run_directory(const ExperimentConfig& cfg, Method m) {
    return fs::path(cfg.output_dir) / (std::string(to_string(m)) + "-seed" + std::to_string(cfg.strudel.seed));
}

}  // namespace strudel::experiment
