// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "amfd/attention.hpp"
#include "amfd/mea.hpp"
#include "test_support.hpp"

using namespace amfd;
using amfd::testing::grad_check;
using amfd::testing::grad_check_params;
using amfd::testing::gt;
using amfd::testing::random_gc;
using amfd::testing::random_tensor;

namespace {

// Straight-line context weight: every intermediate materialized by hand.
std::vector<double> gc_weight_oracle(const Tensor& x, const GcParams& p) {
    const std::size_t c = x.dim(0);
    const std::size_t hw = x.dim(1) * x.dim(2);
    const std::size_t mid = p.bottleneck();
    std::vector<double> score(hw);
    for (std::size_t j = 0; j < hw; ++j) {
        score[j] = p.context_bias[0];
        for (std::size_t k = 0; k < c; ++k) score[j] += p.context_weight[k] * x[k * hw + j];
    }
    const double mx = *std::max_element(score.begin(), score.end());
    double z = 0.0;
    for (double& s : score) z += (s = std::exp(s - mx));
    std::vector<double> context(c, 0.0);
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t j = 0; j < hw; ++j) context[k] += (score[j] / z) * x[k * hw + j];
    std::vector<double> hidden(mid);
    for (std::size_t m = 0; m < mid; ++m) {
        hidden[m] = p.reduce_bias[m];
        for (std::size_t k = 0; k < c; ++k) hidden[m] += p.reduce_weight[m * c + k] * context[k];
    }
    double mean = 0.0;
    for (double h : hidden) mean += h;
    mean /= static_cast<double>(mid);
    double var = 0.0;
    for (double h : hidden) var += (h - mean) * (h - mean);
    var /= static_cast<double>(mid);
    for (double& h : hidden) h = std::max(0.0, (h - mean) / std::sqrt(var + kLayerNormEps));
    std::vector<double> out(c);
    for (std::size_t k = 0; k < c; ++k) {
        out[k] = p.expand_bias[k];
        for (std::size_t m = 0; m < mid; ++m) out[k] += p.expand_weight[k * mid + m] * hidden[m];
    }
    return out;
}

double sum_of(const Tensor& t) { return std::accumulate(t.values().begin(), t.values().end(), 0.0); }

FeaturePyramid single(const Tensor& t, double stride = 1.0) { return {{t}, {stride}}; }

} // namespace

TEST(GcWeight, ZeroExpandLayerGivesBias) {
    Rng rng(1);
    GcParams p = GcParams::init(4, 2, 7);
    const Tensor x = random_tensor(rng, {4, 3, 3});
    const Tensor zero = gc_weight(x, p);
    for (double v : zero.values()) EXPECT_EQ(v, 0.0);
    p.expand_bias = Tensor::build({4}, {1, 2, 3, 4}, true);
    const Tensor w = gc_weight(x, p);
    ASSERT_EQ(w.shape(), (Shape{4, 1, 1}));
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(w[k], static_cast<double>(k + 1));
}

TEST(GcWeight, SinglePixelUsesThatSlice) {
    Rng rng(2);
    const GcParams p = random_gc(rng, 4, 2);
    const Tensor x = random_tensor(rng, {4, 1, 1});
    const Tensor w = gc_weight(x, p);
    const Tensor expect = channel_mix(layer_norm_relu(channel_mix(x, p.reduce_weight, p.reduce_bias)),
                                      p.expand_weight, p.expand_bias);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(w[k], expect[k], 1e-15);
}

TEST(GcWeight, MatchesStraightLineOracle) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const GcParams p = random_gc(rng, 4, 2);
        const Tensor x = random_tensor(rng, {4, 2, 2});
        const Tensor w = gc_weight(x, p);
        const std::vector<double> oracle = gc_weight_oracle(x, p);
        for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(w[k], oracle[k], 1e-12);
    }
}

TEST(GcWeight, ChannelMismatch) {
    const GcParams p = GcParams::init(4, 2, 7);
    EXPECT_THROW(gc_weight(Tensor::zeros({3, 2, 2}), p), ShapeMismatch);
}

TEST(GcApply, ZeroedExpandIsIdentity) {
    Rng rng(4);
    const GcParams p = GcParams::init(3, 4, 11);
    EXPECT_EQ(p.bottleneck(), 1u);
    const Tensor x = random_tensor(rng, {3, 2, 5});
    const Tensor y = gc_apply(x, p);
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(GcApply, OffsetIsConstantPerChannelAndComposes) {
    Rng rng(5);
    const GcParams p = random_gc(rng, 4, 2);
    const Tensor x = random_tensor(rng, {4, 3, 3});
    const Tensor y = gc_apply(x, p);
    const Tensor composed = broadcast_add(x, gc_weight(x, p));
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], composed[i]);
    for (std::size_t k = 0; k < 4; ++k) {
        const double d0 = y[k * 9] - x[k * 9];
        for (std::size_t j = 1; j < 9; ++j) EXPECT_NEAR(y[k * 9 + j] - x[k * 9 + j], d0, 1e-14);
    }
}

TEST(GlobalLoss, IdentityAndZeroWeight) {
    Rng rng(6);
    const GcParams p = random_gc(rng, 2, 2);
    const Tensor t = random_tensor(rng, {2, 4, 4});
    const Tensor s = random_tensor(rng, {2, 4, 4});
    EXPECT_EQ(global_loss(t, t, p, 1.0).item(), 0.0);
    EXPECT_EQ(global_loss(t, s, p, 0.0).item(), 0.0);
    EXPECT_GT(global_loss(t, s, p, 1.0).item(), 0.0);
    EXPECT_THROW(global_loss(t, random_tensor(rng, {2, 4, 3}), p, 1.0), ShapeMismatch);
}

TEST(MEAConfig, TwoStageDefaults) {
    const MEAConfig two = MEAConfig::two_stage();
    EXPECT_EQ(two.lambda_rgb, 5e-7);
    EXPECT_EQ(two.lambda_tir, 5e-7);
    EXPECT_EQ(two.alpha_rgb, 5e-5);
    EXPECT_EQ(two.alpha_tir, 5e-5);
    EXPECT_EQ(two.gamma_rgb, 5e-5);
    EXPECT_EQ(two.gamma_tir, 5e-5);
    const MEAConfig one = MEAConfig::one_stage();
    EXPECT_EQ(one.alpha_rgb, 1e-3);
    EXPECT_EQ(one.gamma_tir, 1e-3);
    EXPECT_EQ(one.lambda_rgb, 5e-6);
    EXPECT_EQ(two.gc_reduction, 4u);
    MEAConfig bad;
    bad.gamma_rgb = -1.0;
    EXPECT_FALSE(bad.valid());
}

TEST(BuildMask, SingleBox) {
    const GtBox boxes[] = {gt(2, 1, 5, 3)}; // cells x 2..4, y 1..2 at stride 1
    const FocalMask m = build_mask(boxes, 4, 6, 1.0);
    std::size_t covered = 0;
    for (double v : m.weights.values()) {
        if (v > 0) {
            EXPECT_DOUBLE_EQ(v, 1.0 / 6.0);
            ++covered;
        }
    }
    EXPECT_EQ(covered, 6u);
    EXPECT_NEAR(sum_of(m.weights), 1.0, 1e-12);
}

TEST(BuildMask, NoBoxes) {
    const FocalMask m = build_mask({}, 3, 3, 4.0);
    for (double v : m.weights.values()) EXPECT_EQ(v, 0.0);
}

TEST(BuildMask, OverlapTakesLargestBox) {
    const GtBox boxes[] = {gt(0, 0, 3, 2), gt(1, 0, 5, 3)}; // areas 6 and 12
    const FocalMask m = build_mask(boxes, 4, 6, 1.0);
    EXPECT_DOUBLE_EQ(m.weights.at(0, 1), 1.0 / 12.0); // shared
    EXPECT_DOUBLE_EQ(m.weights.at(1, 2), 1.0 / 12.0); // shared
    EXPECT_DOUBLE_EQ(m.weights.at(0, 0), 1.0 / 6.0);  // small box only
    EXPECT_DOUBLE_EQ(m.weights.at(2, 4), 1.0 / 12.0); // large box only
    EXPECT_EQ(m.weights.at(3, 0), 0.0);
}

TEST(BuildMask, StrideRoundsOutwardAndClips) {
    // Pixels [5, 13) at stride 4 cover cells floor(1.25)=1 .. ceil(3.25)=4.
    const CellRect r = box_to_cells(Box{5, 5, 13, 13}, 3, 3, 4.0);
    EXPECT_EQ(r.x0, 1u);
    EXPECT_EQ(r.x1, 3u); // clipped from 4
    EXPECT_EQ(r.area(), 4u);
    // Fully outside the level: dropped.
    const GtBox outside[] = {gt(40, 40, 48, 48)};
    EXPECT_EQ(sum_of(build_mask(outside, 3, 3, 4.0).weights), 0.0);
    EXPECT_THROW(build_mask(outside, 3, 3, 0.0), BadSpec);
}

TEST(BuildMask, ScalingAreaScalesWeight) {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const double k = static_cast<double>(1 + rng.index(3));
        const double x = static_cast<double>(rng.index(4));
        const double y = static_cast<double>(rng.index(4));
        const GtBox small[] = {gt(x, y, x + 2, y + 2)};
        const GtBox big[] = {gt(x, y, x + 2 * k, y + 2)};
        const double ws = build_mask(small, 16, 16, 1.0).weights.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
        const double wb = build_mask(big, 16, 16, 1.0).weights.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
        EXPECT_DOUBLE_EQ(wb, ws / k);
    }
}

TEST(TargetLoss, IdentityAndEmptyMask) {
    Rng rng(9);
    const Tensor t = random_tensor(rng, {2, 4, 4});
    const Tensor s = random_tensor(rng, {2, 4, 4});
    const GtBox boxes[] = {gt(0, 0, 2, 3)};
    const FocalMask m = build_mask(boxes, 4, 4, 1.0);
    EXPECT_EQ(target_loss(t, t, m, 1.0).item(), 0.0);
    EXPECT_EQ(target_loss(t, s, build_mask({}, 4, 4, 1.0), 1.0).item(), 0.0);
    EXPECT_GT(target_loss(t, s, m, 1.0).item(), 0.0);
    EXPECT_THROW(target_loss(t, s, build_mask(boxes, 3, 4, 1.0), 1.0), ShapeMismatch);
}

TEST(TargetLoss, MatchesDirectSum) {
    Rng rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor t = random_tensor(rng, {3, 4, 5});
        const Tensor s = random_tensor(rng, {3, 4, 5});
        const GtBox boxes[] = {gt(0, 0, 3, 2), gt(2, 1, 5, 4)};
        const FocalMask m = build_mask(boxes, 4, 5, 1.0);
        const Tensor as = spatial_attention(t).weights;
        const Tensor ac = channel_attention(t).weights;
        double expect = 0.0;
        for (std::size_t k = 0; k < 3; ++k)
            for (std::size_t p = 0; p < 20; ++p) {
                const double d = t[k * 20 + p] - s[k * 20 + p];
                expect += m.weights[p] * as[p] * ac[k] * d * d;
            }
        EXPECT_NEAR(target_loss(t, s, m, 0.3).item(), 0.3 * expect, 1e-12);
    }
}

TEST(AttentionLoss, IdentityZeroWeightAndDirectSum) {
    Rng rng(11);
    const Tensor t = random_tensor(rng, {2, 3, 3});
    const Tensor s = random_tensor(rng, {2, 3, 3});
    EXPECT_EQ(attention_loss(t, t, 1.0).item(), 0.0);
    EXPECT_EQ(attention_loss(t, s, 0.0).item(), 0.0);
    double expect = 0.0;
    const Tensor ts = spatial_attention(t).weights, ss = spatial_attention(s).weights;
    const Tensor tc = channel_attention(t).weights, sc = channel_attention(s).weights;
    for (std::size_t i = 0; i < 9; ++i) expect += std::abs(ts[i] - ss[i]);
    for (std::size_t i = 0; i < 2; ++i) expect += std::abs(tc[i] - sc[i]);
    EXPECT_NEAR(attention_loss(t, s, 2.0).item(), 2.0 * expect, 1e-12);
}

TEST(MeaLoss, SingleLevelIsSumOfComponents) {
    Rng rng(12);
    const GcParams p = random_gc(rng, 2, 2);
    const Tensor t = random_tensor(rng, {2, 4, 4});
    const Tensor s = random_tensor(rng, {2, 4, 4});
    const GtBox boxes[] = {gt(0, 0, 8, 12)};
    const MeaWeights w{0.3, 0.2, 0.1};
    const MeaLoss l = mea_loss(single(t, 4.0), single(s, 4.0), boxes, p, w);
    const double g = global_loss(t, s, p, w.lambda).item();
    const double tg = target_loss(t, s, build_mask(boxes, 4, 4, 4.0), w.alpha).item();
    const double at = attention_loss(t, s, w.gamma).item();
    EXPECT_EQ(l.global.item(), g);
    EXPECT_EQ(l.target.item(), tg);
    EXPECT_EQ(l.attention.item(), at);
    EXPECT_EQ(l.focal.item(), tg + at);
    EXPECT_EQ(l.total.item(), g + (tg + at));
}

TEST(MeaLoss, TwoLevelsAreAdditive) {
    Rng rng(13);
    const GcParams p = random_gc(rng, 2, 2);
    const FeaturePyramid t{{random_tensor(rng, {2, 8, 8}), random_tensor(rng, {2, 4, 4})}, {4.0, 8.0}};
    const FeaturePyramid s{{random_tensor(rng, {2, 8, 8}), random_tensor(rng, {2, 4, 4})}, {4.0, 8.0}};
    const GtBox boxes[] = {gt(3, 2, 17, 30), gt(10, 10, 20, 20)};
    const MeaWeights w{0.5, 0.25, 0.125};
    const double whole = mea_loss(t, s, boxes, p, w).total.item();
    const double l0 = mea_loss(single(t.levels[0], 4.0), single(s.levels[0], 4.0), boxes, p, w).total.item();
    const double l1 = mea_loss(single(t.levels[1], 8.0), single(s.levels[1], 8.0), boxes, p, w).total.item();
    EXPECT_NEAR(whole, l0 + l1, 1e-12 * std::max(1.0, whole));
}

TEST(MeaLoss, PyramidMismatch) {
    Rng rng(14);
    const GcParams p = random_gc(rng, 2, 2);
    const FeaturePyramid a{{random_tensor(rng, {2, 4, 4})}, {4.0}};
    const FeaturePyramid b{{random_tensor(rng, {2, 4, 4}), random_tensor(rng, {2, 2, 2})}, {4.0, 8.0}};
    const FeaturePyramid c{{random_tensor(rng, {2, 4, 3})}, {4.0}};
    EXPECT_THROW(mea_loss(a, b, {}, p, {}), PyramidMismatch);
    EXPECT_THROW(mea_loss(a, c, {}, p, {}), PyramidMismatch);
}

TEST(MeaProperty, ZeroAtIdentityAndNonnegative) {
    Rng rng(15);
    for (int trial = 0; trial < 50; ++trial) {
        const GcParams p = random_gc(rng, 2, 2);
        const Tensor t = random_tensor(rng, {2, 4, 4}, -3, 3);
        const Tensor s = random_tensor(rng, {2, 4, 4}, -3, 3);
        std::vector<GtBox> boxes;
        const std::size_t n = rng.index(4);
        for (std::size_t b = 0; b < n; ++b) {
            const double x = rng.uniform(0, 12), y = rng.uniform(0, 12);
            boxes.push_back(gt(x, y, x + rng.uniform(1, 8), y + rng.uniform(1, 8)));
        }
        const MeaWeights w{rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)};
        const MeaLoss same = mea_loss(single(t, 4.0), single(t, 4.0), boxes, p, w);
        EXPECT_LE(std::abs(same.total.item()), 1e-12);
        const MeaLoss diff = mea_loss(single(t, 4.0), single(s, 4.0), boxes, p, w);
        EXPECT_GE(diff.global.item(), 0.0);
        EXPECT_GE(diff.target.item(), 0.0);
        EXPECT_GE(diff.attention.item(), 0.0);
    }
}

TEST(MeaProperty, GradientsMatchFiniteDifferences) {
    Rng rng(16);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const GcParams p = random_gc(rng, 2, 2);
        const Tensor t = random_tensor(rng, {2, 4, 4}, -2, 2);
        const Tensor s = random_tensor(rng, {2, 4, 4}, -2, 2, true);
        const GtBox boxes[] = {gt(0, 0, 2.5, 3), gt(1, 1, 4, 4)};
        const FocalMask mask = build_mask(boxes, 4, 4, 1.0);
        worst = std::max(worst, grad_check([&](auto& in) { return global_loss(t, in[0], p, 1.0); }, {s}));
        worst = std::max(worst, grad_check([&](auto& in) { return target_loss(t, in[0], mask, 1.0); }, {s}));
        worst = std::max(worst, grad_check([&](auto& in) { return attention_loss(t, in[0], 1.0); }, {s}));
        worst = std::max(worst, grad_check_params([&] { return global_loss(t, s, p, 1.0); }, p.parameters()));
        worst = std::max(worst, grad_check_params(
                                    [&] { return mea_loss(single(t), single(s), boxes, p, {1.0, 1.0, 1.0}).total; },
                                    [&] {
                                        auto v = p.parameters();
                                        v.push_back(s);
                                        return v;
                                    }()));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(MeaProperty, TeacherNeverReceivesGradient) {
    Rng rng(17);
    const GcParams p = random_gc(rng, 2, 2);
    Tensor t = random_tensor(rng, {2, 4, 4}, -1, 1, true);
    Tensor s = random_tensor(rng, {2, 4, 4}, -1, 1, true);
    const GtBox boxes[] = {gt(0, 0, 3, 3)};
    const MeaLoss a = mea_loss(single(t), single(s), boxes, p, {1, 1, 1});
    a.total.backward();
    EXPECT_FALSE(t.has_grad());
    EXPECT_TRUE(s.has_grad());
    Tensor t2 = scale(t, 1.1).detach();
    NoGradGuard guard;
    EXPECT_NE(mea_loss(single(t2), single(s), boxes, p, {1, 1, 1}).total.item(), a.total.item());
}

TEST(LossBreakdown, IdentitiesAndRoundTrip) {
    LossBreakdown b;
    b.global_rgb = 0.1;
    b.global_tir = 0.2;
    b.target_rgb = 0.3;
    b.target_tir = 0.4;
    b.att_rgb = 0.5;
    b.att_tir = 0.6;
    b.original = 0.7;
    EXPECT_FALSE(b.consistent());
    b.derive();
    EXPECT_TRUE(b.consistent());
    EXPECT_EQ(b.focal_rgb, 0.3 + 0.5);
    EXPECT_EQ(b.total, 0.7 + b.mea_total);
    const auto f = b.fields();
    EXPECT_EQ(LossBreakdown::from_fields(f), b);
    EXPECT_EQ(std::string(LossBreakdown::field_names()[12]), "total");
    const LossBreakdown parts[] = {b, b};
    EXPECT_TRUE(batch_average(parts).consistent());
    EXPECT_EQ(batch_average(parts).global_tir, 0.2);
}
