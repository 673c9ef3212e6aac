// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "amfd/fusion.hpp"
#include "test_support.hpp"

using namespace amfd;
using amfd::testing::grad_check_params;
using amfd::testing::gt;
using amfd::testing::random_gc;
using amfd::testing::random_tensor;

namespace {

FeaturePyramid random_pyramid(Rng& rng, std::size_t c = 2) {
    return {{random_tensor(rng, {c, 4, 4}, -2, 2), random_tensor(rng, {c, 2, 2}, -2, 2)}, {4.0, 8.0}};
}

DistillPlan random_plan(Rng& rng, DistillMode mode, const MEAConfig& cfg) {
    DistillPlan plan = DistillPlan::make(mode, cfg, 2, 3);
    for (auto& g : plan.gc) g = random_gc(rng, 2, cfg.gc_reduction);
    return plan;
}

MEAConfig unit_config() { return {0.5, 0.7, 0.3, 0.4, 0.2, 0.6, 2}; }

} // namespace

TEST(DistillPlan, OwnsTheRightBlocks) {
    EXPECT_EQ(DistillPlan::make(DistillMode::Fusion, {}, 8, 1).gc.size(), 2u);
    EXPECT_EQ(DistillPlan::make(DistillMode::Traditional, {}, 8, 1).gc.size(), 1u);
    EXPECT_TRUE(DistillPlan::make(DistillMode::None, {}, 8, 1).gc.empty());
    MEAConfig bad;
    bad.alpha_tir = std::nan("");
    EXPECT_THROW(DistillPlan::make(DistillMode::Fusion, bad, 8, 1), BadSpec);
    EXPECT_EQ(parse_mode("amfd"), DistillMode::Fusion);
    EXPECT_EQ(parse_mode("traditional"), DistillMode::Traditional);
    EXPECT_FALSE(parse_mode("both").has_value());
    EXPECT_EQ(mode_name(DistillMode::None), "none");
}

TEST(ImageLevelFuse, DegeneratesToConcatenation) {
    Rng rng(1);
    ImageFusionParams p = ImageFusionParams::init(3, 1, 4, 4, 9);
    for (auto* b : {&p.rgb, &p.tir}) {
        b->w2 = Tensor::zeros(b->w2.shape(), true);
    }
    std::vector<double> eye(16, 0.0);
    for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
    p.proj_weight = Tensor::build({4, 4}, eye, true);
    const Tensor rgb = random_tensor(rng, {3, 5, 6});
    const Tensor tir = random_tensor(rng, {1, 5, 6});
    const Tensor y = image_level_fuse(rgb, tir, p);
    ASSERT_EQ(y.shape(), (Shape{4, 5, 6}));
    for (std::size_t i = 0; i < rgb.numel(); ++i) EXPECT_EQ(y[i], rgb[i]);
    for (std::size_t i = 0; i < tir.numel(); ++i) EXPECT_EQ(y[rgb.numel() + i], tir[i]);
    EXPECT_THROW(image_level_fuse(rgb, random_tensor(rng, {1, 5, 5}), p), ShapeMismatch);
}

TEST(ImageLevelFuse, MatchesStraightLineOracle) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        ImageFusionParams p = ImageFusionParams::init(1, 1, 3, 2, rng.index(1000));
        for (auto* b : {&p.rgb, &p.tir}) {
            b->b1 = random_tensor(rng, {3}, -0.5, 0.5, true);
            b->b2 = random_tensor(rng, {1}, -0.5, 0.5, true);
        }
        p.proj_bias = random_tensor(rng, {2}, -0.5, 0.5, true);
        const Tensor rgb = random_tensor(rng, {1, 4, 4});
        const Tensor tir = random_tensor(rng, {1, 4, 4});
        const Tensor y = image_level_fuse(rgb, tir, p);
        auto block = [](double x, const ResidualBlock& b) {
            double out = x + b.b2[0];
            for (std::size_t h = 0; h < 3; ++h) out += b.w2[h] * std::max(0.0, b.w1[h] * x + b.b1[h]);
            return out;
        };
        for (std::size_t px = 0; px < 16; ++px) {
            const double r = block(rgb[px], p.rgb);
            const double t = block(tir[px], p.tir);
            for (std::size_t o = 0; o < 2; ++o) {
                const double expect = p.proj_weight.at(o, 0) * r + p.proj_weight.at(o, 1) * t + p.proj_bias[o];
                EXPECT_NEAR(y[o * 16 + px], expect, 1e-12);
            }
        }
    }
}

TEST(ImageLevelFuse, GradientsMatchFiniteDifferences) {
    Rng rng(3);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        ImageFusionParams p = ImageFusionParams::init(2, 1, 3, 2, rng.index(1000));
        for (auto* b : {&p.rgb, &p.tir}) b->b1 = random_tensor(rng, b->b1.shape(), -0.5, 0.5, true);
        Tensor rgb = random_tensor(rng, {2, 4, 4}, -1, 1, true);
        Tensor tir = random_tensor(rng, {1, 4, 4}, -1, 1, true);
        const Tensor probe = random_tensor(rng, {2, 4, 4});
        auto params = p.parameters();
        params.push_back(rgb);
        params.push_back(tir);
        worst = std::max(worst, grad_check_params([&] { return sum(mul(image_level_fuse(rgb, tir, p), probe)); }, params));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(FusionLoss, IdentityIsZero) {
    Rng rng(4);
    const FeaturePyramid x = random_pyramid(rng);
    const DistillPlan plan = random_plan(rng, DistillMode::Fusion, unit_config());
    const GtBox boxes[] = {gt(0, 0, 9, 14)};
    const DistillLoss l = fusion_distill_loss(x, x, x, boxes, plan);
    EXPECT_LE(std::abs(l.total.item()), 1e-12);
    EXPECT_LE(l.breakdown.mea_total, 1e-12);
}

TEST(FusionLoss, ZeroWeightsGiveZero) {
    Rng rng(5);
    MEAConfig zero{0, 0, 0, 0, 0, 0, 2};
    const DistillPlan plan = random_plan(rng, DistillMode::Fusion, zero);
    const DistillLoss l =
        fusion_distill_loss(random_pyramid(rng), random_pyramid(rng), random_pyramid(rng), {}, plan);
    EXPECT_EQ(l.total.item(), 0.0);
}

TEST(FusionLoss, EqualsSumOfIndependentHalves) {
    Rng rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        const FeaturePyramid r = random_pyramid(rng), t = random_pyramid(rng), s = random_pyramid(rng);
        const MEAConfig cfg = unit_config();
        const DistillPlan plan = random_plan(rng, DistillMode::Fusion, cfg);
        const GtBox boxes[] = {gt(1, 2, 7, 15), gt(4, 4, 12, 12)};
        const DistillLoss l = fusion_distill_loss(r, t, s, boxes, plan);
        const MeaLoss rh = mea_loss(r, s, boxes, plan.gc_rgb(), cfg.rgb());
        const MeaLoss th = mea_loss(t, s, boxes, plan.gc_tir(), cfg.tir());
        EXPECT_EQ(l.total.item(), rh.total.item() + th.total.item());
        EXPECT_EQ(l.breakdown.mea_rgb, rh.total.item());
        EXPECT_EQ(l.breakdown.mea_tir, th.total.item());
        EXPECT_EQ(l.breakdown.global_tir, th.global.item());
        EXPECT_TRUE(l.breakdown.consistent());
    }
}

TEST(FusionLoss, SwappingModalitiesWithTheirSlices) {
    Rng rng(7);
    const FeaturePyramid r = random_pyramid(rng), t = random_pyramid(rng), s = random_pyramid(rng);
    const MEAConfig cfg = unit_config();
    const DistillPlan plan = random_plan(rng, DistillMode::Fusion, cfg);
    MEAConfig swapped = cfg;
    std::swap(swapped.alpha_rgb, swapped.alpha_tir);
    std::swap(swapped.gamma_rgb, swapped.gamma_tir);
    std::swap(swapped.lambda_rgb, swapped.lambda_tir);
    DistillPlan plan2 = plan;
    plan2.config = swapped;
    std::swap(plan2.gc[0], plan2.gc[1]);
    const GtBox boxes[] = {gt(0, 0, 9, 9)};
    const double a = fusion_distill_loss(r, t, s, boxes, plan).total.item();
    const double b = fusion_distill_loss(t, r, s, boxes, plan2).total.item();
    EXPECT_NEAR(a, b, 1e-14 * std::max(1.0, a));
}

TEST(FusionLoss, WrongModeAndMismatch) {
    Rng rng(8);
    const FeaturePyramid x = random_pyramid(rng);
    const DistillPlan trad = random_plan(rng, DistillMode::Traditional, unit_config());
    EXPECT_THROW(fusion_distill_loss(x, x, x, {}, trad), WrongMode);
    const DistillPlan fusion = random_plan(rng, DistillMode::Fusion, unit_config());
    FeaturePyramid short_pyr{{x.levels[0]}, {4.0}};
    EXPECT_THROW(fusion_distill_loss(x, x, short_pyr, {}, fusion), PyramidMismatch);
    EXPECT_THROW(traditional_distill_loss(x, x, {}, fusion), WrongMode);
}

TEST(TraditionalLoss, IdentityAndSubstitution) {
    Rng rng(9);
    const FeaturePyramid r = random_pyramid(rng), t = random_pyramid(rng), s = random_pyramid(rng);
    const MEAConfig cfg = unit_config();
    const DistillPlan fusion = random_plan(rng, DistillMode::Fusion, cfg);
    DistillPlan trad = DistillPlan::make(DistillMode::Traditional, cfg, 2, 1);
    trad.gc[0] = fusion.gc_rgb();
    const GtBox boxes[] = {gt(2, 2, 10, 14)};
    EXPECT_LE(traditional_distill_loss(s, s, boxes, trad).total.item(), 1e-12);
    const DistillLoss f = fusion_distill_loss(r, t, s, boxes, fusion);
    const DistillLoss tr = traditional_distill_loss(r, s, boxes, trad);
    EXPECT_EQ(tr.total.item(), f.breakdown.mea_rgb);
    EXPECT_EQ(tr.breakdown.mea_tir, 0.0);
}

TEST(TraditionalLoss, NoneModeIsZero) {
    Rng rng(10);
    const DistillPlan none = DistillPlan::make(DistillMode::None, {}, 2, 1);
    const DistillLoss l = traditional_distill_loss(random_pyramid(rng), random_pyramid(rng), {}, none);
    EXPECT_EQ(l.total.item(), 0.0);
    LossBreakdown b = l.breakdown;
    EXPECT_EQ(total_loss(0.8, b), 0.8);
    for (std::size_t i = 0; i < LossBreakdown::kFieldCount; ++i) {
        if (i != 11 && i != 12) EXPECT_EQ(b.fields()[i], 0.0);
    }
}

TEST(TotalLoss, Arithmetic) {
    LossBreakdown zero;
    EXPECT_EQ(total_loss(1.25, zero), 1.25);
    LossBreakdown b;
    b.global_rgb = 0.25;
    b.derive();
    EXPECT_EQ(total_loss(0.0, b), b.mea_total);
    EXPECT_EQ(total_loss(1.5, b), 1.75);
    EXPECT_EQ(b.total, 1.75);
    EXPECT_THROW(total_loss(std::nan(""), b), NonFiniteValue);
}

TEST(ComposedObjective, GradientsMatchFiniteDifferences) {
    // detection-style term + both MEA halves, through the fusion front end.
    Rng rng(11);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        ImageFusionParams front = ImageFusionParams::init(1, 1, 2, 2, rng.index(1000));
        const DistillPlan plan = random_plan(rng, DistillMode::Fusion, unit_config());
        const Tensor rgb = random_tensor(rng, {1, 4, 4});
        const Tensor tir = random_tensor(rng, {1, 4, 4});
        const FeaturePyramid tr{{random_tensor(rng, {2, 4, 4})}, {1.0}};
        const FeaturePyramid tt{{random_tensor(rng, {2, 4, 4})}, {1.0}};
        const Tensor targets = random_tensor(rng, {2, 4, 4}, 0, 1);
        const GtBox boxes[] = {gt(0, 0, 2, 3)};
        auto objective = [&] {
            const Tensor fused = image_level_fuse(rgb, tir, front);
            const Tensor original = mean(bce_with_logits(fused, targets));
            const FeaturePyramid student{{fused}, {1.0}};
            return add(original, fusion_distill_loss(tr, tt, student, boxes, plan).total);
        };
        auto params = front.parameters();
        for (auto& p : plan.parameters()) params.push_back(p);
        worst = std::max(worst, grad_check_params(objective, params));
    }
    EXPECT_LT(worst, 1e-4);
}
