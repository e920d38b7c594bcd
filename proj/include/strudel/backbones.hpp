#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "strudel/error.hpp"
#include "strudel/nn/graph.hpp"
#include "strudel/nn/tensor.hpp"
#include "strudel/random.hpp"

namespace strudel::backbones {

using nn::Graph;
using nn::Tensor;
using nn::Var;

enum class Kind { unet, octse };
enum class Norm { group, none };

inline const char* to_string(Kind k) { return k == Kind::unet ? "unet" : "octse"; }
inline Kind parse_kind(const std::string& s) {
    if (s == "unet") return Kind::unet;
    if (s == "octse") return Kind::octse;
    throw ConfigError("backbones", "unknown backbone kind '" + s + "'");
}
inline const char* to_string(Norm n) { return n == Norm::group ? "group" : "none"; }
inline Norm parse_norm(const std::string& s) {
    if (s == "group") return Norm::group;
    if (s == "none") return Norm::none;
    throw ConfigError("backbones", "unknown normalization '" + s + "'");
}

struct BackboneSpec {
    Kind kind = Kind::unet;
    int depth = 3;  ///< number of 2× downsamplings
    int base_channels = 16;
    double dropout_rate = 0.2;
    double octave_alpha = 0.5;  ///< octse: fraction of low-frequency channels
    int se_reduction = 2;       ///< octse: channel reduction inside the cSE gate
    Norm norm = Norm::group;    ///< activation is always ReLU
    int norm_groups = 4;

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("backbones", m); };
        if (depth < 2) fail("depth must be >= 2 (got " + std::to_string(depth) + ")");
        if (base_channels < 4) fail("base_channels must be >= 4");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout_rate must lie in [0, 1)");
        if (!(octave_alpha >= 0.0 && octave_alpha < 1.0)) fail("octave_alpha must lie in [0, 1)");
        if (se_reduction < 1) fail("se_reduction must be >= 1");
        if (norm_groups < 1) fail("norm_groups must be >= 1");
    }

    /// Spatial sizes must be multiples of this.
    int size_multiple() const { return 1 << (kind == Kind::octse && octave_alpha > 0.0 ? depth + 1 : depth); }

    bool operator==(const BackboneSpec&) const = default;
};

/// Learnable weights of one backbone, in creation order.
template <class T>
struct ModelParams {
    BackboneSpec spec;
    std::uint64_t seed = 0;
    std::vector<std::string> names;
    std::vector<Tensor<T>> tensors;

    std::size_t index_of(const std::string& name) const {
        for (std::size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return i;
        throw Error("backbones", "no parameter named '" + name + "'");
    }
    Tensor<T>& at(const std::string& name) { return tensors[index_of(name)]; }
    const Tensor<T>& at(const std::string& name) const { return tensors[index_of(name)]; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors) n += t.size();
        return n;
    }

    bool all_finite() const {
        for (const auto& t : tensors)
            for (T v : t.data)
                if (!std::isfinite(v)) return false;
        return true;
    }

    template <class U>
    ModelParams<U> cast() const {
        ModelParams<U> out{spec, seed, names, {}};
        for (const auto& t : tensors) out.tensors.push_back(t.template cast<U>());
        return out;
    }

    bool operator==(const ModelParams&) const = default;
};

enum class InitKind { fan_in, zeros, ones };

/// Resolves named parameters while a network is built. In create mode it
/// allocates and initializes them; in bind mode it looks them up in an
/// existing ModelParams (optionally wiring gradient sinks).
template <class T>
class ParamBinder {
public:
    static ParamBinder create(ModelParams<T>& params, Rng& rng) { return ParamBinder(&params, nullptr, &rng); }
    static ParamBinder bind(const ModelParams<T>& params, std::vector<Tensor<T>>* grads = nullptr) {
        return ParamBinder(const_cast<ModelParams<T>*>(&params), grads, nullptr);
    }

    Var get(Graph<T>& g, const std::string& name, int n, int c, int h, int w, InitKind init, int fan_in = 0) {
        if (rng_) {
            Tensor<T> t(n, c, h, w);
            if (init == InitKind::ones) t.fill(T{1});
            if (init == InitKind::fan_in) {
                const double std = std::sqrt(2.0 / std::max(1, fan_in));
                for (auto& v : t.data) v = static_cast<T>(rng_->normal(0.0, std));
            }
            params_->names.push_back(name);
            params_->tensors.push_back(std::move(t));
            return g.constant(params_->tensors.back());
        }
        const std::size_t i = cursor_ < params_->names.size() && params_->names[cursor_] == name ? cursor_ : params_->index_of(name);
        cursor_ = i + 1;
        const auto& t = params_->tensors[i];
        if (t.n != n || t.c != c || t.h != h || t.w != w)
            throw ShapeError("backbones", "parameter '" + name + "' has shape " + t.shape_string() + ", network expects " +
                                              Tensor<T>(0, c, h, w).shape_string());
        return g.parameter(t, grads_ ? &(*grads_)[i] : nullptr);
    }

private:
    ParamBinder(ModelParams<T>* p, std::vector<Tensor<T>>* grads, Rng* rng) : params_(p), grads_(grads), rng_(rng) {}
    ModelParams<T>* params_;
    std::vector<Tensor<T>>* grads_;
    Rng* rng_;
    std::size_t cursor_ = 0;
};

/// Dropout behaviour for one forward pass.
struct DropoutState {
    bool active = false;
    double rate = 0.0;
    Rng* rng = nullptr;
};

/// Channel split of an octave feature map: {high, low}.
inline std::pair<int, int> octave_split(int channels, double alpha) {
    const int low = static_cast<int>(std::lround(alpha * channels));
    return {channels - low, low};
}

/// High/low frequency feature pair; `low` is invalid when the low branch is
/// empty.
struct OctavePair {
    Var high;
    Var low;
};

namespace layers {

inline int groups_for(int channels, int wanted) { return std::gcd(channels, wanted); }

template <class T>
Var conv(Graph<T>& g, ParamBinder<T>& pb, const std::string& name, Var x, int cout, int k, bool bias = true) {
    const int cin = g.value(x).c;
    Var w = pb.get(g, name + ".w", cout, cin, k, k, InitKind::fan_in, cin * k * k);
    Var b = bias ? pb.get(g, name + ".b", 1, cout, 1, 1, InitKind::zeros) : Var{};
    return nn::conv2d(g, x, w, b);
}

template <class T>
Var norm_relu(Graph<T>& g, ParamBinder<T>& pb, const BackboneSpec& spec, const std::string& name, Var x) {
    if (spec.norm == Norm::group) {
        const int c = g.value(x).c;
        Var gamma = pb.get(g, name + ".gamma", 1, c, 1, 1, InitKind::ones);
        Var beta = pb.get(g, name + ".beta", 1, c, 1, 1, InitKind::zeros);
        x = nn::group_norm(g, x, gamma, beta, groups_for(c, spec.norm_groups));
    }
    return nn::relu(g, x);
}

template <class T>
Var dropout(Graph<T>& g, Var x, DropoutState& d) {
    if (!d.active || d.rate <= 0.0) return x;
    const auto& v = g.value(x);
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(v.n) * v.c);
    for (auto& k : keep) k = d.rng->bernoulli(d.rate) ? 0 : 1;
    return nn::channel_dropout(g, x, keep, static_cast<T>(d.rate));
}

}  // namespace layers

/// Octave convolution over a (high, low) pair. Output channels split by
/// `alpha_out`; paths: high→high, pool(high)→low, low→low, up(low)→high.
template <class T>
OctavePair octave_conv(Graph<T>& g, ParamBinder<T>& pb, const std::string& name, OctavePair in, int cout, int k,
                       double alpha_out) {
    const auto& hv = g.value(in.high);
    const int cin_h = hv.c;
    const int cin_l = in.low.valid() ? g.value(in.low).c : 0;
    if (in.low.valid()) {
        const auto& lv = g.value(in.low);
        if (lv.h * 2 != hv.h || lv.w * 2 != hv.w)
            throw ShapeError("backbones", "octave low branch must be half the high-branch resolution (" +
                                              std::to_string(hv.h) + "x" + std::to_string(hv.w) + " vs " +
                                              std::to_string(lv.h) + "x" + std::to_string(lv.w) + ")");
    }
    const auto [cout_h, cout_l] = octave_split(cout, alpha_out);
    const int fan_in = (cin_h + cin_l) * k * k;
    auto weight = [&](const std::string& path, int co, int ci) {
        return pb.get(g, name + "." + path, co, ci, k, k, InitKind::fan_in, fan_in);
    };

    Var hh = weight("hh", cout_h, cin_h);
    Var bh = pb.get(g, name + ".bh", 1, cout_h, 1, 1, InitKind::zeros);
    Var high = nn::conv2d(g, in.high, hh, bh);
    if (cin_l > 0) {
        Var lh = weight("lh", cout_h, cin_l);
        high = nn::add(g, high, nn::upsample2(g, nn::conv2d(g, in.low, lh)));
    }
    Var low{};
    if (cout_l > 0) {
        Var hl = weight("hl", cout_l, cin_h);
        Var bl = pb.get(g, name + ".bl", 1, cout_l, 1, 1, InitKind::zeros);
        low = nn::conv2d(g, nn::avg_pool2(g, in.high), hl, bl);
        if (cin_l > 0) {
            Var ll = weight("ll", cout_l, cin_l);
            low = nn::add(g, low, nn::conv2d(g, in.low, ll));
        }
    }
    return {high, low};
}

/// Concurrent channel and spatial squeeze-excitation, combined by
/// element-wise max.
template <class T>
Var scse_block(Graph<T>& g, ParamBinder<T>& pb, const std::string& name, Var x, int reduction) {
    const int c = g.value(x).c;
    if (c % reduction != 0)
        throw ShapeError("backbones", "scSE: " + std::to_string(c) + " channels not divisible by reduction " +
                                          std::to_string(reduction));
    Var z = nn::global_avg_pool(g, x);
    z = nn::relu(g, layers::conv(g, pb, name + ".fc1", z, c / reduction, 1));
    Var channel_gate = nn::sigmoid(g, layers::conv(g, pb, name + ".fc2", z, c, 1));
    Var spatial_gate = nn::sigmoid(g, layers::conv(g, pb, name + ".sp", x, 1, 1));
    return nn::maximum(g, nn::gate(g, x, channel_gate), nn::gate(g, x, spatial_gate));
}

namespace detail {

template <class T>
Var unet_block(Graph<T>& g, ParamBinder<T>& pb, const BackboneSpec& spec, const std::string& name, Var x, int cout,
               DropoutState& d) {
    x = layers::norm_relu(g, pb, spec, name + ".n1", layers::conv(g, pb, name + ".conv1", x, cout, 3));
    x = layers::norm_relu(g, pb, spec, name + ".n2", layers::conv(g, pb, name + ".conv2", x, cout, 3));
    return layers::dropout(g, x, d);
}

template <class T>
OctavePair oct_block(Graph<T>& g, ParamBinder<T>& pb, const BackboneSpec& spec, const std::string& name, OctavePair x,
                     int cout, DropoutState& d) {
    auto norm_pair = [&](const std::string& n, OctavePair p) {
        p.high = layers::norm_relu(g, pb, spec, n + "h", p.high);
        if (p.low.valid()) p.low = layers::norm_relu(g, pb, spec, n + "l", p.low);
        return p;
    };
    x = norm_pair(name + ".n1", octave_conv(g, pb, name + ".conv1", x, cout, 3, spec.octave_alpha));
    x = norm_pair(name + ".n2", octave_conv(g, pb, name + ".conv2", x, cout, 3, spec.octave_alpha));
    x.high = layers::dropout(g, scse_block(g, pb, name + ".seh", x.high, spec.se_reduction), d);
    if (x.low.valid()) x.low = layers::dropout(g, scse_block(g, pb, name + ".sel", x.low, spec.se_reduction), d);
    return x;
}

template <class T>
Var build_unet(Graph<T>& g, ParamBinder<T>& pb, const BackboneSpec& spec, Var x, DropoutState& d) {
    std::vector<Var> skips;
    for (int l = 0; l < spec.depth; ++l) {
        x = unet_block(g, pb, spec, "enc" + std::to_string(l), x, spec.base_channels << l, d);
        skips.push_back(x);
        x = nn::max_pool2(g, x);
    }
    x = unet_block(g, pb, spec, "mid", x, spec.base_channels << spec.depth, d);
    for (int l = spec.depth - 1; l >= 0; --l) {
        x = nn::concat(g, skips[l], nn::upsample2(g, x));
        x = unet_block(g, pb, spec, "dec" + std::to_string(l), x, spec.base_channels << l, d);
    }
    return layers::conv(g, pb, "head", x, 1, 1);
}

template <class T>
Var build_octse(Graph<T>& g, ParamBinder<T>& pb, const BackboneSpec& spec, Var input, DropoutState& d) {
    auto pool = [&](OctavePair p) {
        return OctavePair{nn::max_pool2(g, p.high), p.low.valid() ? nn::max_pool2(g, p.low) : Var{}};
    };
    auto up_cat = [&](OctavePair skip, OctavePair p) {
        OctavePair out{nn::concat(g, skip.high, nn::upsample2(g, p.high)), {}};
        if (p.low.valid() && skip.low.valid()) out.low = nn::concat(g, skip.low, nn::upsample2(g, p.low));
        return out;
    };
    OctavePair x{input, {}};
    std::vector<OctavePair> skips;
    for (int l = 0; l < spec.depth; ++l) {
        x = oct_block(g, pb, spec, "enc" + std::to_string(l), x, spec.base_channels << l, d);
        skips.push_back(x);
        x = pool(x);
    }
    x = oct_block(g, pb, spec, "mid", x, spec.base_channels << spec.depth, d);
    for (int l = spec.depth - 1; l >= 0; --l)
        x = oct_block(g, pb, spec, "dec" + std::to_string(l), up_cat(skips[l], x), spec.base_channels << l, d);
    return octave_conv(g, pb, "head", x, 1, 1, 0.0).high;
}

}  // namespace detail

/// Builds the network on `g` and returns the logit node (N×1×H×W).
template <class T>
Var build_logits(Graph<T>& g, ParamBinder<T>& pb, const BackboneSpec& spec, Var input, DropoutState& d) {
    const auto& in = g.value(input);
    const int m = spec.size_multiple();
    if (in.c != 1) throw ShapeError("backbones", "expected single-channel input, got " + std::to_string(in.c));
    if (in.h % m != 0 || in.w % m != 0 || in.h == 0 || in.w == 0)
        throw ShapeError("backbones", "spatial size " + std::to_string(in.h) + "x" + std::to_string(in.w) +
                                          " is not divisible by " + std::to_string(m));
    return spec.kind == Kind::unet ? detail::build_unet(g, pb, spec, input, d) : detail::build_octse(g, pb, spec, input, d);
}

/// Fan-in scaled normal weights, zero biases, unit norm gains.
template <class T = float>
ModelParams<T> init_model(const BackboneSpec& spec, std::uint64_t seed) {
    spec.validate();
    ModelParams<T> params;
    params.spec = spec;
    params.seed = seed;
    Rng rng(derive_seed(seed, {0x1417}));
    Graph<T> g(false);
    auto pb = ParamBinder<T>::create(params, rng);
    const int m = spec.size_multiple();
    DropoutState off;
    build_logits(g, pb, spec, g.constant(Tensor<T>(1, 1, m, m)), off);
    return params;
}

/// Probability maps (N×1×H×W, values in (0,1)). With dropout inactive the
/// result depends only on (params, batch).
template <class T>
Tensor<T> forward(const ModelParams<T>& params, const Tensor<T>& batch, bool dropout_active, Rng& draw) {
    Graph<T> g(false);
    auto pb = ParamBinder<T>::bind(params);
    DropoutState d{dropout_active, params.spec.dropout_rate, &draw};
    Var logits = build_logits(g, pb, params.spec, g.constant(batch), d);
    return g.value(nn::sigmoid(g, logits));
}

template <class T>
Tensor<T> forward(const ModelParams<T>& params, const Tensor<T>& batch) {
    Rng unused(0);
    return forward(params, batch, false, unused);
}

// ---------------------------------------------------------------------------
// Standalone layer entry points (used by tests and tooling).

template <class T>
struct OctaveWeights {
    Tensor<T> hh, lh, hl, ll;  ///< Co×Ci×k×k per path; lh/ll empty when no low input, hl/ll when no low output
    Tensor<T> bias_h, bias_l;
};

/// Octave convolution on plain tensors. Output channel counts are taken from
/// the weight shapes.
template <class T>
std::pair<Tensor<T>, Tensor<T>> octave_conv(const Tensor<T>& high, const Tensor<T>* low, const OctaveWeights<T>& w) {
    Graph<T> g(false);
    OctavePair in{g.constant(high), low && !low->empty() ? g.constant(*low) : Var{}};
    if (in.low.valid()) {
        const auto& lv = g.value(in.low);
        if (lv.h * 2 != high.h || lv.w * 2 != high.w) throw ShapeError("backbones", "octave low branch must be half resolution");
    }
    auto k = [&](const Tensor<T>& t) { return g.constant(t); };
    Var h = nn::conv2d(g, in.high, k(w.hh), w.bias_h.empty() ? Var{} : k(w.bias_h));
    if (in.low.valid() && !w.lh.empty()) h = nn::add(g, h, nn::upsample2(g, nn::conv2d(g, in.low, k(w.lh))));
    Tensor<T> low_out;
    if (!w.hl.empty()) {
        Var l = nn::conv2d(g, nn::avg_pool2(g, in.high), k(w.hl), w.bias_l.empty() ? Var{} : k(w.bias_l));
        if (in.low.valid() && !w.ll.empty()) l = nn::add(g, l, nn::conv2d(g, in.low, k(w.ll)));
        low_out = g.value(l);
    }
    return {g.value(h), low_out};
}

template <class T>
struct ScseWeights {
    Tensor<T> fc1_w, fc1_b, fc2_w, fc2_b, sp_w, sp_b;
};

template <class T>
Tensor<T> scse_block(const Tensor<T>& x, const ScseWeights<T>& w) {
    Graph<T> g(false);
    Var in = g.constant(x);
    const int c = x.c;
    const int reduced = w.fc1_w.n;
    if (reduced == 0 || c % reduced != 0 || w.fc1_w.c != c)
        throw ShapeError("backbones", "scSE: channel count incompatible with reduction weights");
    auto k = [&](const Tensor<T>& t) { return g.constant(t); };
    Var z = nn::relu(g, nn::conv2d(g, nn::global_avg_pool(g, in), k(w.fc1_w), k(w.fc1_b)));
    Var cg = nn::sigmoid(g, nn::conv2d(g, z, k(w.fc2_w), k(w.fc2_b)));
    Var sg = nn::sigmoid(g, nn::conv2d(g, in, k(w.sp_w), k(w.sp_b)));
    return g.value(nn::maximum(g, nn::gate(g, in, cg), nn::gate(g, in, sg)));
}

}  // namespace strudel::backbones
