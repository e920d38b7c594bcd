#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "oracles.hpp"
#include "strudel/metrics.hpp"

using namespace strudel;
using namespace strudel::metrics;

namespace {

Mask from_rows(std::initializer_list<const char*> rows) {
    const int h = static_cast<int>(rows.size());
    const int w = static_cast<int>(std::strlen(*rows.begin()));
    Mask m(h, w);
    int y = 0;
    for (const char* r : rows) {
        for (int x = 0; x < w; ++x) m(y, x) = r[x] == '#' ? 1 : 0;
        ++y;
    }
    return m;
}

Mask square(int size, int y0, int x0, int side) {
    Mask m(size, size);
    for (int y = y0; y < y0 + side; ++y)
        for (int x = x0; x < x0 + side; ++x) m(y, x) = 1;
    return m;
}

Mask dilate(const Mask& m) {
    Mask out = m;
    for (int y = 0; y < m.height(); ++y)
        for (int x = 0; x < m.width(); ++x)
            if (m(y, x))
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ny = y + dy, nx = x + dx;
                        if (ny >= 0 && ny < m.height() && nx >= 0 && nx < m.width()) out(ny, nx) = 1;
                    }
    return out;
}

}  // namespace

TEST(Dsc, Examples) {
    const auto a = square(8, 2, 2, 3);
    EXPECT_EQ(dsc(a, a), 1.0);
    EXPECT_EQ(dsc(a, square(8, 5, 5, 2)), 0.0);
    EXPECT_EQ(dsc(from_rows({"##.."}), from_rows({".##."})), 0.5);
    EXPECT_EQ(dsc(Mask(4, 4), Mask(4, 4)), 1.0);
    EXPECT_THROW(dsc(Mask(2, 2), Mask(3, 3)), ShapeError);
}

TEST(Hausdorff, IdenticalMasksGiveZero) {
    const auto a = square(10, 2, 3, 4);
    EXPECT_EQ(hausdorff95(a, a), 0.0);
}

TEST(Hausdorff, ShiftedSquareMatchesExhaustiveOracle) {
    const auto a = square(20, 5, 5, 3), b = square(20, 5, 6, 3);
    EXPECT_NEAR(hausdorff95(a, b), oracle::hausdorff95(a, b), 1e-12);
    EXPECT_GT(hausdorff95(a, b), 0.0);
}

TEST(Hausdorff, OneEmptyMaskGivesFlaggedDiagonal) {
    const auto r = hausdorff95_detail(square(6, 1, 1, 2), Mask(6, 6));
    EXPECT_TRUE(r.sentinel);
    EXPECT_NEAR(r.value, std::sqrt(72.0), 1e-12);
    EXPECT_EQ(hausdorff95(Mask(6, 6), Mask(6, 6)), 0.0);
}

TEST(Lavd, Examples) {
    EXPECT_EQ(lavd(square(8, 0, 0, 2), square(8, 4, 4, 2)), 0.0);
    EXPECT_EQ(lavd(Mask(4, 4), Mask(4, 4)), 0.0);
    // |P| + 1 = 8, |G| + 1 = 1 gives ln 8.
    EXPECT_NEAR(lavd(from_rows({"#######."}), Mask(1, 8)), std::log(8.0), 1e-12);
    // |P| + 1 = 17, |G| + 1 = 5.
    EXPECT_NEAR(lavd(square(8, 0, 0, 4), square(8, 0, 0, 2)), std::log(17.0 / 5.0), 1e-12);
}

TEST(Components, Examples) {
    EXPECT_EQ(connected_components(Mask(5, 5)).size(), 0u);
    const auto diag = from_rows({"#.", ".#"});
    EXPECT_EQ(connected_components(diag, 8).size(), 1u);
    EXPECT_EQ(connected_components(diag, 4).size(), 2u);
}

TEST(Components, PartitionForeground) {
    Rng rng(3);
    for (int r = 0; r < 20; ++r) {
        const auto m = oracle::random_mask(12, 12, 0.35, rng);
        const auto set = connected_components(m);
        Mask seen(12, 12);
        for (const auto& c : set.components)
            for (const auto& [y, x] : c.pixels) {
                EXPECT_EQ(seen(y, x), 0) << "pixel in two components";
                seen(y, x) = 1;
            }
        EXPECT_EQ(seen, m);
    }
}

TEST(LesionRecall, Examples) {
    const auto gt = from_rows({"#...#", ".....", "....."});
    EXPECT_EQ(lesion_recall(Mask(3, 5, 1), gt), 1.0);
    EXPECT_EQ(lesion_recall(from_rows({"#....", ".....", "....."}), gt), 0.5);
    EXPECT_EQ(lesion_recall(square(4, 0, 0, 2), Mask(4, 4)), 1.0);
}

TEST(LesionF1, Examples) {
    const auto gt = from_rows({"##....", "......", "......"});
    EXPECT_EQ(lesion_f1(gt, gt), 1.0);
    EXPECT_NEAR(lesion_f1(from_rows({"#.....", "......", "....##"}), gt), 2.0 / 3.0, 1e-15);
    EXPECT_EQ(lesion_f1(Mask(3, 6), gt), 0.0);
}

TEST(Evaluate, FlagsEmptyCases) {
    const auto r = evaluate(Mask(4, 4), Mask(4, 4));
    EXPECT_TRUE(r.both_empty);
    EXPECT_TRUE(r.gt_empty);
    EXPECT_EQ(r.dsc, 1.0);
    EXPECT_THROW(evaluate(Mask(2, 2, 2), Mask(2, 2)), DomainError);
}

TEST(Properties, SymmetryAndMonotonicity) {
    Rng rng(11);
    for (int r = 0; r < 100; ++r) {
        const auto a = oracle::random_blobs(16, 16, rng), b = oracle::random_blobs(16, 16, rng);
        const auto g = oracle::random_blobs(16, 16, rng);
        EXPECT_EQ(dsc(a, b), dsc(b, a));
        EXPECT_NEAR(hausdorff95(a, b), hausdorff95(b, a), 1e-12);
        Mask u = a;
        for (std::size_t i = 0; i < u.size(); ++i) u[i] = a[i] | b[i];
        EXPECT_GE(lesion_recall(u, g), std::max(lesion_recall(a, g), lesion_recall(b, g)));
        EXPECT_GE(lesion_recall(dilate(a), g), lesion_recall(a, g));
    }
}

TEST(Oracle, TwoHundredRandomPairsAgree) {
    Rng rng(2024);
    for (int r = 0; r < 200; ++r) {
        const auto p = r % 2 ? oracle::random_blobs(16, 16, rng) : oracle::random_mask(16, 16, rng.uniform(0, 0.4), rng);
        const auto g = oracle::random_blobs(16, 16, rng);
        const auto rep = evaluate(p, g);

        std::size_t inter = 0, np = 0, ng = 0;
        for (std::size_t i = 0; i < p.size(); ++i) inter += p[i] && g[i], np += p[i], ng += g[i];
        const double d = np + ng == 0 ? 1.0 : 2.0 * inter / static_cast<double>(np + ng);
        EXPECT_NEAR(rep.dsc, d, 1e-9);
        EXPECT_NEAR(rep.h95, oracle::hausdorff95(p, g), 1e-9);
        EXPECT_NEAR(rep.lavd, std::abs(std::log(np + 1.0) - std::log(ng + 1.0)), 1e-9);

        const auto lp = oracle::label_components(p, 8), lg = oracle::label_components(g, 8);
        const auto cp = oracle::component_count(lp), cg = oracle::component_count(lg);
        EXPECT_EQ(rep.counts.pred, static_cast<std::size_t>(cp));
        EXPECT_EQ(rep.counts.gt, static_cast<std::size_t>(cg));
        const int hit_g = oracle::components_hit(lg, p), hit_p = oracle::components_hit(lp, g);
        EXPECT_EQ(rep.counts.gt_detected, static_cast<std::size_t>(hit_g));
        EXPECT_EQ(rep.counts.pred_matched, static_cast<std::size_t>(hit_p));
        const double rec = cg == 0 ? 1.0 : static_cast<double>(hit_g) / cg;
        const double prec = cp == 0 ? 0.0 : static_cast<double>(hit_p) / cp;
        const double f1 = (cg == 0 && cp == 0) ? 1.0 : (prec + rec == 0 ? 0.0 : 2 * prec * rec / (prec + rec));
        EXPECT_NEAR(rep.lesion_recall, rec, 1e-9);
        EXPECT_NEAR(rep.lesion_f1, f1, 1e-9);
    }
}

TEST(Wilcoxon, IdenticalInputsAreDegenerate) {
    const std::vector<double> a{1, 2, 3, 4, 5, 6};
    EXPECT_THROW(wilcoxon_signed_rank(a, a), DegenerateSampleError);
    EXPECT_THROW(wilcoxon_signed_rank({1, 2, 3}, {0, 0, 0}), DegenerateSampleError);
}

TEST(Wilcoxon, SixPositiveDifferencesGiveExactTwoSidedP) {
    const auto r = wilcoxon_signed_rank({2, 3, 4, 5, 6, 7}, {1, 1, 1, 1, 1, 1});
    EXPECT_TRUE(r.exact);
    EXPECT_EQ(r.statistic, 21.0);
    EXPECT_NEAR(r.p_value, 2.0 / 64.0, 1e-15);
    EXPECT_NEAR(wilcoxon_signed_rank({2, 3, 4, 5, 6, 7}, {1, 1, 1, 1, 1, 1}, Alternative::greater).p_value, 1.0 / 64.0,
                1e-15);
}

TEST(Wilcoxon, ExactBranchMatchesEnumerationOracle) {
    Rng rng(8);
    for (int r = 0; r < 50; ++r) {
        std::vector<double> a(8), b(8, 0.0);
        // Rounded values create ties among |differences|.
        for (auto& v : a) v = std::round(rng.uniform(-4, 4) * 2) / 2 + (rng.uniform() < 0.5 ? 0.0 : 0.01);
        for (auto& v : a)
            if (v == 0.0) v = 0.25;
        const auto t = oracle::signed_rank_exact(a);
        const auto g = wilcoxon_signed_rank(a, b, Alternative::greater);
        const auto l = wilcoxon_signed_rank(a, b, Alternative::less);
        const auto two = wilcoxon_signed_rank(a, b);
        EXPECT_NEAR(g.statistic, t.w_plus, 1e-12);
        EXPECT_NEAR(g.p_value, t.p_upper, 1e-12);
        EXPECT_NEAR(l.p_value, t.p_lower, 1e-12);
        EXPECT_NEAR(two.p_value, std::min(1.0, 2 * std::min(t.p_upper, t.p_lower)), 1e-12);
    }
}

TEST(Wilcoxon, NormalBranchMatchesClosedForm) {
    // Twenty positive differences with distinct magnitudes: W+ = 210.
    std::vector<double> a(20), b(20, 0.0);
    for (int i = 0; i < 20; ++i) a[i] = i + 1;
    const auto r = wilcoxon_signed_rank(a, b, Alternative::greater);
    EXPECT_FALSE(r.exact);
    const double z = (210.0 - 105.0) / std::sqrt(20.0 * 21.0 * 41.0 / 24.0);
    EXPECT_NEAR(r.p_value, 0.5 * std::erfc(z / std::sqrt(2.0)), 1e-15);
}

TEST(MeanStd, PopulationStatistics) {
    const auto m = mean_std({1, 2, 3, 4});
    EXPECT_EQ(m.mean, 2.5);
    EXPECT_NEAR(m.std, std::sqrt(1.25), 1e-15);
    EXPECT_EQ(m.n, 4u);
}
