#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "strudel/datasets.hpp"
#include "strudel/losses.hpp"
#include "strudel/metrics.hpp"
#include "strudel/train.hpp"

using namespace strudel;
using namespace strudel::backbones;
using strudel::nn::Tensor;

namespace {

BackboneSpec small(Kind kind) {
    BackboneSpec s;
    s.kind = kind;
    s.depth = 2;
    s.base_channels = 4;
    return s;
}

Tensor<double> random_tensor(int n, int c, int h, int w, Rng& rng) {
    Tensor<double> t(n, c, h, w);
    for (auto& v : t.data) v = rng.normal();
    return t;
}

}  // namespace

TEST(InitModel, SameSeedIsIdenticalAndSeedsDiffer) {
    for (Kind k : {Kind::unet, Kind::octse}) {
        const auto a = init_model(small(k), 3), b = init_model(small(k), 3), c = init_model(small(k), 4);
        EXPECT_EQ(a, b);
        EXPECT_NE(a.tensors, c.tensors);
        EXPECT_EQ(a.seed, 3u);
        EXPECT_TRUE(a.all_finite());
    }
}

TEST(InitModel, DepthOneIsAConfigError) {
    auto s = small(Kind::unet);
    s.depth = 1;
    EXPECT_THROW(init_model(s, 0), ConfigError);
}

TEST(InitModel, BiasesStartAtZero) {
    const auto p = init_model(small(Kind::unet), 1);
    bool any = false;
    for (std::size_t i = 0; i < p.names.size(); ++i)
        if (p.names[i].ends_with(".b") || p.names[i].ends_with("bias")) {
            any = true;
            for (float v : p.tensors[i].data) EXPECT_EQ(v, 0.0f) << p.names[i];
        }
    EXPECT_TRUE(any);
}

TEST(Forward, PreservesShapeAndRangeForBothKinds) {
    Rng rng(2);
    for (Kind k : {Kind::unet, Kind::octse}) {
        BackboneSpec s;
        s.kind = k;
        s.base_channels = 4;
        const auto p = init_model(s, 5);
        Tensor<float> x(2, 1, 64, 64);
        for (auto& v : x.data) v = static_cast<float>(rng.normal());
        const auto y = forward(p, x);
        EXPECT_EQ(y.n, 2);
        EXPECT_EQ(y.c, 1);
        EXPECT_EQ(y.h, 64);
        EXPECT_EQ(y.w, 64);
        for (float v : y.data) {
            EXPECT_GT(v, 0.0f);
            EXPECT_LT(v, 1.0f);
        }
    }
}

TEST(Forward, DropoutOffIsDeterministicAndDropoutOnVaries) {
    Rng rng(3);
    const auto p = init_model(small(Kind::unet), 7);
    Tensor<float> x(1, 1, 16, 16);
    for (auto& v : x.data) v = static_cast<float>(rng.normal());
    EXPECT_EQ(forward(p, x).data, forward(p, x).data);
    Rng d1(1), d2(2);
    EXPECT_NE(forward(p, x, true, d1).data, forward(p, x, true, d2).data);
}

TEST(Forward, IndivisibleSizeIsAShapeError) {
    const auto p = init_model(small(Kind::unet), 0);
    EXPECT_THROW(forward(p, Tensor<float>(1, 1, 6, 6)), ShapeError);
    const auto q = init_model(small(Kind::octse), 0);
    EXPECT_THROW(forward(q, Tensor<float>(1, 1, 4, 4)), ShapeError);
}

TEST(OctaveConv, ZeroAlphaEqualsPlainConvolution) {
    Rng rng(4);
    const auto x = random_tensor(1, 3, 8, 8, rng);
    OctaveWeights<double> w;
    w.hh = random_tensor(5, 3, 3, 3, rng);
    w.bias_h = random_tensor(1, 5, 1, 1, rng);
    const auto [high, low] = octave_conv<double>(x, nullptr, w);
    Tensor<double> bias(1, 5, 1, 1);
    bias.data = w.bias_h.data;
    const auto expected = oracle::direct_conv(x, w.hh, &bias);
    EXPECT_TRUE(low.empty());
    for (std::size_t i = 0; i < high.data.size(); ++i) EXPECT_NEAR(high.data[i], expected.data[i], 1e-12);
}

TEST(OctaveConv, ZeroCrossPathsReduceToOwnPathConvolutions) {
    Rng rng(5);
    const auto hi = random_tensor(1, 2, 8, 8, rng);
    const auto lo = random_tensor(1, 2, 4, 4, rng);
    OctaveWeights<double> w;
    w.hh = random_tensor(3, 2, 3, 3, rng);
    w.ll = random_tensor(3, 2, 3, 3, rng);
    w.lh = Tensor<double>(3, 2, 3, 3);
    w.hl = Tensor<double>(3, 2, 3, 3);
    w.bias_h = random_tensor(1, 3, 1, 1, rng);
    w.bias_l = random_tensor(1, 3, 1, 1, rng);
    const auto [oh, ol] = octave_conv<double>(hi, &lo, w);
    const auto eh = oracle::direct_conv(hi, w.hh, &w.bias_h);
    const auto el = oracle::direct_conv(lo, w.ll, &w.bias_l);
    ASSERT_EQ(oh.h, 8);
    ASSERT_EQ(ol.h, 4);
    for (std::size_t i = 0; i < oh.data.size(); ++i) EXPECT_NEAR(oh.data[i], eh.data[i], 1e-12);
    for (std::size_t i = 0; i < ol.data.size(); ++i) EXPECT_NEAR(ol.data[i], el.data[i], 1e-12);
}

TEST(OctaveConv, MismatchedResolutionIsAShapeError) {
    Rng rng(6);
    OctaveWeights<double> w;
    w.hh = random_tensor(2, 2, 3, 3, rng);
    w.lh = random_tensor(2, 2, 3, 3, rng);
    const auto lo = random_tensor(1, 2, 8, 8, rng);
    EXPECT_THROW(octave_conv<double>(random_tensor(1, 2, 8, 8, rng), &lo, w), ShapeError);
}

namespace {

ScseWeights<double> scse_weights(int c, int reduction, Rng& rng, double gate_bias) {
    ScseWeights<double> w;
    const int r = c / reduction;
    w.fc1_w = random_tensor(r, c, 1, 1, rng);
    w.fc1_b = Tensor<double>(1, r, 1, 1);
    w.fc2_w = random_tensor(c, r, 1, 1, rng);
    w.fc2_b = Tensor<double>(1, c, 1, 1);
    w.sp_w = random_tensor(1, c, 1, 1, rng);
    w.sp_b = Tensor<double>(1, 1, 1, 1);
    if (gate_bias != 0.0) {
        w.fc2_w.fill(0.0);
        w.sp_w.fill(0.0);
        w.fc2_b.fill(gate_bias);
        w.sp_b.fill(gate_bias);
    }
    return w;
}

}  // namespace

TEST(Scse, SaturatedGatesPassInputThrough) {
    Rng rng(7);
    const auto x = random_tensor(1, 4, 6, 6, rng);
    const auto y = scse_block(x, scse_weights(4, 2, rng, 50.0));
    for (std::size_t i = 0; i < x.data.size(); ++i) EXPECT_NEAR(y.data[i], x.data[i], 1e-4);
}

TEST(Scse, ZeroInputGivesZeroOutput) {
    Rng rng(8);
    const auto y = scse_block(Tensor<double>(1, 4, 5, 5), scse_weights(4, 2, rng, 0.0));
    for (double v : y.data) EXPECT_EQ(v, 0.0);
}

TEST(Scse, OutputNeverExceedsInputMagnitude) {
    Rng rng(9);
    for (int r = 0; r < 10; ++r) {
        const auto x = random_tensor(1, 6, 5, 5, rng);
        const auto y = scse_block(x, scse_weights(6, 2, rng, 0.0));
        for (std::size_t i = 0; i < x.data.size(); ++i) EXPECT_LE(std::abs(y.data[i]), std::abs(x.data[i]) + 1e-15);
    }
}

TEST(Scse, IndivisibleChannelsAreAShapeError) {
    Rng rng(10);
    auto w = scse_weights(4, 2, rng, 0.0);
    EXPECT_THROW(scse_block(random_tensor(1, 5, 4, 4, rng), w), ShapeError);
}

TEST(ParameterEconomy, OctseStaysWithinQuarterOfUnet) {
    BackboneSpec u, o;
    o.kind = Kind::octse;
    const double ratio = static_cast<double>(init_model(o, 0).parameter_count()) / init_model(u, 0).parameter_count();
    EXPECT_LE(ratio, 1.25) << ratio;
}

TEST(Train, ZeroLearningRateLeavesParamsUnchanged) {
    const auto sample = datasets::generate_domain(datasets::DomainConfig::source_defaults(), 1)[0];
    TrainingPool pool;
    pool.add_fixed({sample.id(), datasets::normalize(sample.image()), sample.label(), std::nullopt,
                    losses::Routing::fixed_label});
    const auto p = init_model(small(Kind::unet), 1);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.lr = 0.0;
    EXPECT_EQ(train(p, pool, cfg).params, p);
}

TEST(Train, SameSeedGivesIdenticalParams) {
    auto c = datasets::DomainConfig::source_defaults();
    c.image_size = 16;
    c.lesion_radius_range = {1.5, 3.0};
    TrainingPool pool;
    for (const auto& s : datasets::generate_domain(c, 3))
        pool.add_fixed({s.id(), datasets::normalize(s.image()), s.label(), std::nullopt, losses::Routing::fixed_label});
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 9;
    cfg.augment = datasets::AugmentConfig{};
    const auto p = init_model(small(Kind::octse), 2);
    const auto a = train(p, pool, cfg), b = train(p, pool, cfg);
    EXPECT_EQ(a.params, b.params);
    EXPECT_NE(a.params, p);
    ASSERT_EQ(a.trace.size(), 3u);
}

TEST(Train, EmptyPoolIsRejected) {
    EXPECT_THROW(train(init_model(small(Kind::unet), 0), TrainingPool{}, TrainConfig{}), ConfigError);
}

TEST(Train, OverfitsSingleSample) {
    // Threshold taken from the overfit run with these settings, then frozen.
    auto c = datasets::DomainConfig::source_defaults();
    c.image_size = 32;
    c.lesion_radius_range = {2.0, 4.0};
    c.lesion_count_range = {2, 2};
    const auto s = datasets::generate_domain(c, 1)[0];
    TrainingPool pool;
    const auto img = datasets::normalize(s.image());
    pool.add_fixed({s.id(), img, s.label(), std::nullopt, losses::Routing::fixed_label});
    BackboneSpec spec;
    spec.base_channels = 8;
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.batch_size = 1;
    const auto trained = train(init_model(spec, 1), pool, cfg).params;
    const auto pred = predict(trained, img);
    Mask bin(pred.height(), pred.width());
    for (std::size_t i = 0; i < bin.size(); ++i) bin[i] = pred[i] >= 0.5;
    EXPECT_GT(metrics::dsc(bin, s.label()), 0.95);
}

class ToyNetworkGradient : public ::testing::TestWithParam<Kind> {};

TEST_P(ToyNetworkGradient, MatchesCentralDifferences) {
    // 4×4 single-channel input, combined loss on the pseudo route, dropout off.
    BackboneSpec spec = small(GetParam());
    spec.depth = 2;
    const int size = GetParam() == Kind::octse ? 8 : 4;
    auto params = init_model<double>(spec, 11);
    Rng rng(12);
    Tensor<double> x(1, 1, size, size);
    for (auto& v : x.data) v = rng.normal();
    const auto target = oracle::random_mask(size, size, 0.4, rng);
    std::vector<double> sigma(target.size());
    for (auto& v : sigma) v = rng.uniform();
    const auto pixels = target.size();

    auto loss_of = [&](const ModelParams<double>& p) {
        const auto y = forward(p, x);
        return losses::combined_loss<double>(std::span<const double>(y.data.data(), pixels), target.values(),
                                             std::span<const double>(sigma), losses::Routing::pseudo_label_with_uncertainty)
            .total;
    };

    std::vector<Tensor<double>> grads;
    for (const auto& t : params.tensors) grads.emplace_back(t.n, t.c, t.h, t.w);
    Graph<double> g(true);
    auto pb = ParamBinder<double>::bind(params, &grads);
    DropoutState off;
    Var probs = nn::sigmoid(g, build_logits(g, pb, spec, g.constant(x), off));
    Tensor<double> seed(1, 1, size, size);
    losses::combined_loss<double>(std::span<const double>(g.value(probs).data.data(), pixels), target.values(),
                                  std::span<const double>(sigma), losses::Routing::pseudo_label_with_uncertainty, {},
                                  std::span<double>(seed.data.data(), pixels));
    g.backward(probs, seed);

    std::vector<double> flat, analytic;
    for (std::size_t t = 0; t < params.tensors.size(); ++t) {
        flat.insert(flat.end(), params.tensors[t].data.begin(), params.tensors[t].data.end());
        analytic.insert(analytic.end(), grads[t].data.begin(), grads[t].data.end());
    }
    auto f = [&](const std::vector<double>& v) {
        auto p = params;
        std::size_t k = 0;
        for (auto& t : p.tensors)
            for (auto& e : t.data) e = v[k++];
        return loss_of(p);
    };
    const auto r = oracle::check_gradient(f, flat, analytic, 1e-5, 1e-3, 1e-7);
    EXPECT_GE(r.pass_fraction(), 0.99) << r.passed << "/" << r.checked << " worst " << r.worst;
}

INSTANTIATE_TEST_SUITE_P(Kinds, ToyNetworkGradient, ::testing::Values(Kind::unet, Kind::octse));
