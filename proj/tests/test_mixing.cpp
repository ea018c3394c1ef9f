#include <gtest/gtest.h>

#include <duetmatch/mixing.hpp>

#include "oracles.hpp"

using namespace duetmatch;
using V = Var<double>;

namespace {

Tensor<double> random_batch(std::size_t b, std::size_t c, Extent e, Rng& rng) {
    Tensor<double> t({b, c, e.z, e.y, e.x});
    for (auto& v : t.vec()) v = rng.normal();
    return t;
}

Extent random_extent(Rng& rng) {
    return {std::size_t(rng.range(2, 9)), std::size_t(rng.range(2, 9)), std::size_t(rng.range(2, 9))};
}

}  // namespace

TEST(CutMixMask, ForcedHalfSideIs16Cubed) {
    Rng rng(1);
    const auto m = sample_cutmix_mask(Extent::cube(32), rng, 0.5, 0.5);
    EXPECT_EQ(m.zeros(), 4096u);
    EXPECT_EQ(m.size, (std::array<std::size_t, 3>{16, 16, 16}));
}

TEST(CutMixMask, ZeroRegionIsExactlyTheRecordedCuboid) {
    Rng rng(2);
    for (int rep = 0; rep < 1000; ++rep) {
        const Extent e = {std::size_t(rng.range(4, 40)), std::size_t(rng.range(4, 40)), std::size_t(rng.range(4, 40))};
        const auto m = sample_cutmix_mask(e, rng);
        std::size_t zeros = 0;
        for (std::size_t k = 0; k < e.z; ++k)
            for (std::size_t j = 0; j < e.y; ++j)
                for (std::size_t i = 0; i < e.x; ++i) {
                    const std::size_t p[3] = {i, j, k};
                    bool inside = true;
                    for (int a = 0; a < 3; ++a) inside = inside && p[a] >= m.origin[a] && p[a] < m.origin[a] + m.size[a];
                    const auto v = m.mask[e.index(i, j, k)];
                    ASSERT_TRUE(v == 0 || v == 1);
                    ASSERT_EQ(v == 0, inside);
                    zeros += v == 0;
                }
        for (std::size_t a = 0; a < 3; ++a) {
            ASSERT_GE(m.size[a], 1u);
            ASSERT_GE(double(m.size[a]), std::floor(0.25 * double(e[a]) + 0.5) - 1e-9);
            ASSERT_LE(double(m.size[a]), std::floor(0.5 * double(e[a]) + 0.5) + 1e-9);
        }
        ASSERT_EQ(zeros, m.size[0] * m.size[1] * m.size[2]);
    }
}

TEST(CutMixMask, ZeroFractionWithinProductBounds) {
    // Exact on 32^3 since 0.25*32 and 0.5*32 are integers.
    Rng rng(3);
    for (int rep = 0; rep < 1000; ++rep) {
        const double f = double(sample_cutmix_mask(Extent::cube(32), rng).zeros()) / 32768.0;
        ASSERT_GE(f, 0.015625);
        ASSERT_LE(f, 0.125);
    }
}

TEST(CutMixMask, DeterministicAndValidated) {
    Rng a(7), b(7);
    EXPECT_EQ(sample_cutmix_mask(Extent::cube(16), a), sample_cutmix_mask(Extent::cube(16), b));
    Rng r(1);
    EXPECT_THROW(sample_cutmix_mask(Extent::cube(8), r, 0.0, 0.5), std::invalid_argument);
    EXPECT_THROW(sample_cutmix_mask(Extent::cube(8), r, 0.6, 0.5), std::invalid_argument);
    EXPECT_THROW(sample_cutmix_mask(Extent::cube(8), r, 0.2, 1.0), std::invalid_argument);
}

TEST(PairwiseMix, TrivialCases) {
    Rng rng(4);
    const Extent e{3, 4, 5};
    const auto x = random_batch(3, 2, e, rng);
    EXPECT_EQ(pairwise_mix(x, CutMixMask::filled(e, 1)), x);
    const auto one = random_batch(1, 1, e, rng);
    EXPECT_EQ(pairwise_mix(one, sample_cutmix_mask(e, rng)), one);
    EXPECT_THROW(pairwise_mix(x, CutMixMask::filled({4, 4, 5}, 1)), ShapeError);
}

TEST(PairwiseMix, HandMaskVoxelSelection) {
    const Extent e = Extent::cube(2);
    Tensor<double> x({2, 1, 2, 2, 2});
    for (std::size_t i = 0; i < 16; ++i) x[i] = double(i);
    CutMixMask m = CutMixMask::filled(e, 1);
    m.mask[1] = m.mask[2] = m.mask[7] = 0;
    const auto out = pairwise_mix(x, m);
    const double want0[8] = {0, 9, 10, 3, 4, 5, 6, 15};
    const double want1[8] = {8, 1, 2, 11, 12, 13, 14, 7};
    for (std::size_t i = 0; i < 8; ++i) {
        EXPECT_EQ(out[i], want0[i]);
        EXPECT_EQ(out[8 + i], want1[i]);
    }
}

TEST(PairwiseMix, ComplementConservationAndDoubleReversal) {
    Rng rng(5);
    for (int rep = 0; rep < 1000; ++rep) {
        const Extent e = random_extent(rng);
        const std::size_t b = std::size_t(rng.range(1, 5)), c = std::size_t(rng.range(1, 3));
        const auto x = random_batch(b, c, e, rng);
        const auto m = sample_cutmix_mask(e, rng);
        const auto a = pairwise_mix(x, m), bc = pairwise_mix(x, m.complement());
        const std::size_t per = x.stride0();
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t s = 0; s < per; ++s) {
                const double self = x[i * per + s], rev = x[(b - 1 - i) * per + s];
                ASSERT_EQ(a[i * per + s] + bc[i * per + s], self + rev);
                ASSERT_TRUE(a[i * per + s] == self || a[i * per + s] == rev);
            }
        const auto zero = CutMixMask::filled(e, 0);
        ASSERT_EQ(pairwise_mix(pairwise_mix(x, zero), zero), x);
    }
}

TEST(PseudoLabels, BuildMatchesManualMixThenArgmax) {
    Rng rng(6);
    const Extent e = Extent::cube(2);
    const auto p = oracle::random_probs(2, 3, 2, rng);
    EXPECT_EQ(build_pseudo_labels(p, CutMixMask::filled(e, 1)).hard, argmax_channels(p));
    const auto p1 = oracle::random_probs(1, 2, 2, rng);
    EXPECT_EQ(build_pseudo_labels(p1, sample_cutmix_mask(e, rng)).hard, argmax_channels(p1));

    const auto m = sample_cutmix_mask(e, rng, 0.5, 0.5);
    const auto pl = build_pseudo_labels(p, m);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < 8; ++i) {
            const std::size_t src = m.mask[i] ? b : 1 - b;
            std::size_t best = 0;
            for (std::size_t k = 1; k < 3; ++k)
                if (p[(src * 3 + k) * 8 + i] > p[(src * 3 + best) * 8 + i]) best = k;
            EXPECT_EQ(pl.hard[b * 8 + i], int(best));
            EXPECT_EQ(pl.confidence[b * 8 + i], p[(src * 3 + best) * 8 + i]);
        }
}

TEST(Refine, ForegroundEverywhereAndNowhere) {
    Rng rng(7);
    const auto p = oracle::random_probs(2, 2, 3, rng);
    const auto pl = build_pseudo_labels(p, CutMixMask::filled(Extent::cube(3), 1));
    Tensor<double> fg({2, 2, 3, 3, 3}, 0.0), bg({2, 2, 3, 3, 3}, 0.0);
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t i = 0; i < 27; ++i) {
            fg[(b * 2 + 1) * 27 + i] = 1;
            bg[(b * 2) * 27 + i] = 1;
        }
    const auto same = refine_pseudo_labels(pl, fg);
    EXPECT_EQ(same.hard, pl.hard);
    EXPECT_EQ(same.confidence, pl.confidence);
    const auto none = refine_pseudo_labels(pl, bg);
    for (int v : none.hard.vec()) EXPECT_EQ(v, 0);
}

TEST(Refine, IntersectionOracleAndShrinkage) {
    Rng rng(8);
    for (int rep = 0; rep < 1000; ++rep) {
        const std::size_t side = std::size_t(rng.range(2, 4));
        const std::size_t v = side * side * side;
        const auto pl = build_pseudo_labels(oracle::random_probs(2, 2, side, rng), CutMixMask::filled(Extent::cube(side), 1));
        const auto pc = oracle::random_probs(2, 2, side, rng);
        const auto cons = argmax_channels(pc);
        const auto r = refine_pseudo_labels(pl, pc);
        std::size_t fr = 0, fpl = 0, fc = 0;
        for (std::size_t i = 0; i < 2 * v; ++i) {
            ASSERT_EQ(r.hard[i] != 0, pl.hard[i] != 0 && cons[i] != 0);
            fr += r.hard[i] != 0;
            fpl += pl.hard[i] != 0;
            fc += cons[i] != 0;
            if (pl.hard[i] != 0 && cons[i] == 0) ASSERT_EQ(r.confidence[i], 0.0);
        }
        ASSERT_LE(fr, std::min(fpl, fc));
    }
}

TEST(Refine, SoftGatingScalesConfidenceOnly) {
    Rng rng(9);
    const auto pl = build_pseudo_labels(oracle::random_probs(1, 2, 2, rng), CutMixMask::filled(Extent::cube(2), 1));
    const auto pc = oracle::random_probs(1, 2, 2, rng);
    const auto r = refine_pseudo_labels(pl, pc, Gating::soft);
    EXPECT_EQ(r.hard, pl.hard);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(r.confidence[i], pl.confidence[i] * pc[8 + i], 1e-15);
}

TEST(Consistency, ComposesFrozenComponentsDeterministically) {
    const ModelConfig cfg{1, 2, 4, 2};
    const auto a = init_model<double>(cfg, 1), b = init_model<double>(cfg, 2);
    Rng rng(10);
    Tensor<double> x({2, 1, 4, 4, 4});
    for (auto& v : x.vec()) v = rng.normal();
    const auto p = consistency_forward(a.first, b.second, x);
    const auto manual = forward_decoder(bind(b.second, false), forward_encoder(bind(a.first, false), x, DropoutSpec::none(), false),
                                        DropoutSpec::none(), false)
                            .value();
    EXPECT_EQ(p, manual);
    EXPECT_EQ(p, consistency_forward(a.first, b.second, x));
    for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(p[i] + p[64 + i], 1.0, 1e-12);
    EXPECT_THROW(consistency_forward(b.second, a.first, x), std::invalid_argument);
}

TEST(CrossGuidance, SymmetryZeroAndComposition) {
    Rng rng(11);
    const auto p1 = oracle::random_probs(2, 2, 2, rng), p2 = oracle::random_probs(2, 2, 2, rng);
    const Extent e = Extent::cube(2);
    const auto pl1 = build_pseudo_labels(oracle::random_probs(2, 2, 2, rng), CutMixMask::filled(e, 1));
    const auto pl2 = build_pseudo_labels(oracle::random_probs(2, 2, 2, rng), CutMixMask::filled(e, 1));
    const double ab = cross_guidance_loss(V::constant(p1), V::constant(p2), pl2, pl1).value().item();
    const double ba = cross_guidance_loss(V::constant(p2), V::constant(p1), pl1, pl2).value().item();
    EXPECT_NEAR(ab, ba, 1e-15);
    const double hand = cross_entropy(V::constant(p1), pl2.hard).value().item() + cross_entropy(V::constant(p2), pl1.hard).value().item();
    EXPECT_NEAR(ab, hand, 1e-15);

    auto one_hot = [](const Labels& y) {
        Tensor<double> t({2, 2, 2, 2, 2}, 0.0);
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < 8; ++i) t[(b * 2 + std::size_t(y[b * 8 + i])) * 8 + i] = 1;
        return t;
    };
    EXPECT_LE(cross_guidance_loss(V::constant(one_hot(pl2.hard)), V::constant(one_hot(pl1.hard)), pl2, pl1).value().item(), 1e-6);
}

TEST(CrossGuidance, GradientsMatchFiniteDifferencesAndTargetsStayDetached) {
    Rng rng(12);
    const Extent e = Extent::cube(3);
    const auto m = sample_cutmix_mask(e, rng);
    const auto pl1 = build_pseudo_labels(oracle::random_probs(2, 2, 3, rng), m);
    const auto pl2 = build_pseudo_labels(oracle::random_probs(2, 2, 3, rng), m);
    const auto p2 = oracle::random_probs(2, 2, 3, rng);
    const auto p1 = oracle::random_probs(2, 2, 3, rng);
    EXPECT_LT(oracle::max_fd_error(p1, [&](const V& v) { return cross_guidance_loss(v, V::constant(p2), pl2, pl1); }, rng, 20), 1e-4);
    // Only the two prediction inputs are graph nodes; pseudo-labels are plain tensors.
    const auto v1 = V::leaf(p1), v2 = V::leaf(p2);
    backward(cross_guidance_loss(v1, v2, pl2, pl1));
    EXPECT_FALSE(v1.grad().empty());
    EXPECT_FALSE(v2.grad().empty());
}
