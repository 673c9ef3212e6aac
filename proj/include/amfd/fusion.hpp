// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Distillation wiring. The fusion architecture aligns the student's fused
// feature with both teacher modal features (two MEA instances); the
// traditional one aligns it with the teacher's fused feature (one MEA).

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "amfd/mea.hpp"
#include "amfd/rng.hpp"
#include "amfd/tensor.hpp"

namespace amfd {

enum class DistillMode { Fusion, Traditional, None };

inline std::string_view mode_name(DistillMode m) {
    switch (m) {
    case DistillMode::Fusion: return "amfd";
    case DistillMode::Traditional: return "traditional";
    case DistillMode::None: return "none";
    }
    return "none";
}

inline std::optional<DistillMode> parse_mode(std::string_view s) {
    if (s == "amfd" || s == "fusion") return DistillMode::Fusion;
    if (s == "traditional") return DistillMode::Traditional;
    if (s == "none") return DistillMode::None;
    return std::nullopt;
}

/// Which losses a run optimizes and the context blocks that own them.
struct DistillPlan {
    DistillMode mode = DistillMode::None;
    MEAConfig config;
    // Fusion: {G1 (TIR), G2 (RGB)}. Traditional: {G (fused)}. None: {}.
    std::vector<GcParams> gc;

    static DistillPlan make(DistillMode mode, const MEAConfig& config, std::size_t channels, std::uint64_t seed) {
        if (!config.valid()) {
            throw BadSpec("MEA weights must be finite and nonnegative");
        }
        DistillPlan plan;
        plan.mode = mode;
        plan.config = config;
        if (mode == DistillMode::Fusion) {
            plan.gc.push_back(GcParams::init(channels, config.gc_reduction, seed * 2 + 1));
            plan.gc.push_back(GcParams::init(channels, config.gc_reduction, seed * 2 + 2));
        } else if (mode == DistillMode::Traditional) {
            plan.gc.push_back(GcParams::init(channels, config.gc_reduction, seed * 2 + 1));
        }
        return plan;
    }

    bool valid() const {
        switch (mode) {
        case DistillMode::Fusion: return gc.size() == 2;
        case DistillMode::Traditional: return gc.size() == 1;
        case DistillMode::None: return gc.empty();
        }
        return false;
    }

    const GcParams& gc_tir() const { return gc.at(0); }
    const GcParams& gc_rgb() const { return gc.at(1); }
    const GcParams& gc_fused() const { return gc.at(0); }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (const auto& g : gc) {
            for (auto& p : g.parameters()) out.push_back(p);
        }
        return out;
    }
};

/// Differentiable distillation loss plus its named breakdown (original = 0).
struct DistillLoss {
    Tensor total;
    LossBreakdown breakdown;
};

namespace detail {

inline void fill_rgb(LossBreakdown& b, const MeaLoss& m) {
    b.global_rgb = m.global.item();
    b.target_rgb = m.target.item();
    b.att_rgb = m.attention.item();
}

inline void fill_tir(LossBreakdown& b, const MeaLoss& m) {
    b.global_tir = m.global.item();
    b.target_tir = m.target.item();
    b.att_tir = m.attention.item();
}

} // namespace detail

/// ℒ(x_R, x̃_F) + ℒ(x_T, x̃_F).
inline DistillLoss fusion_distill_loss(const FeaturePyramid& rgb, const FeaturePyramid& tir,
                                       const FeaturePyramid& student, std::span<const GtBox> boxes,
                                       const DistillPlan& plan) {
    if (plan.mode != DistillMode::Fusion) {
        throw WrongMode("fusion_distill_loss needs a fusion-architecture plan, got " +
                        std::string(mode_name(plan.mode)));
    }
    if (!plan.valid()) {
        throw WrongMode("fusion plan must own exactly two context blocks");
    }
    require_aligned(rgb, student);
    require_aligned(tir, student);
    const MeaLoss r = mea_loss(rgb, student, boxes, plan.gc_rgb(), plan.config.rgb());
    const MeaLoss t = mea_loss(tir, student, boxes, plan.gc_tir(), plan.config.tir());
    DistillLoss out;
    detail::fill_rgb(out.breakdown, r);
    detail::fill_tir(out.breakdown, t);
    out.breakdown.derive();
    out.total = add(r.total, t.total);
    return out;
}

/// ℒ(F(x_R, x_T), x̃_F) with a single MEA. Its terms are reported in the
/// *_rgb slots of the breakdown; the *_tir slots stay zero.
inline DistillLoss traditional_distill_loss(const FeaturePyramid& teacher_fused, const FeaturePyramid& student,
                                            std::span<const GtBox> boxes, const DistillPlan& plan) {
    if (plan.mode == DistillMode::None) {
        DistillLoss out;
        out.total = Tensor::scalar(0.0);
        return out;
    }
    if (plan.mode != DistillMode::Traditional) {
        throw WrongMode("traditional_distill_loss needs a traditional plan, got " + std::string(mode_name(plan.mode)));
    }
    if (!plan.valid()) {
        throw WrongMode("traditional plan must own exactly one context block");
    }
    const MeaLoss f = mea_loss(teacher_fused, student, boxes, plan.gc_fused(), plan.config.rgb());
    DistillLoss out;
    detail::fill_rgb(out.breakdown, f);
    out.breakdown.derive();
    out.total = f.total;
    return out;
}

/// ℒ = ℒ_original + ℒ_MEA, recorded into the breakdown.
inline double total_loss(double original, LossBreakdown& breakdown) {
    if (!std::isfinite(original) || !std::isfinite(breakdown.mea_total)) {
        throw NonFiniteValue("total_loss: non-finite input");
    }
    breakdown.original = original;
    breakdown.derive();
    return breakdown.total;
}

// ---------------------------------------------------------------------------
// Image-level fusion front end

/// x + W2·relu(W1·x + b1) + b2, every map a 1×1 convolution.
struct ResidualBlock {
    Tensor w1, b1, w2, b2;

    std::vector<Tensor> parameters() const { return {w1, b1, w2, b2}; }
};

inline Tensor residual_block(const Tensor& x, const ResidualBlock& b) {
    return add(x, channel_mix(relu(channel_mix(x, b.w1, b.b1)), b.w2, b.b2));
}

struct ImageFusionParams {
    ResidualBlock rgb;
    ResidualBlock tir;
    Tensor proj_weight; // C_out × (C_rgb + C_tir)
    Tensor proj_bias;   // C_out

    std::size_t out_channels() const { return proj_weight.dim(0); }

    static ImageFusionParams init(std::size_t rgb_channels, std::size_t tir_channels, std::size_t hidden,
                                  std::size_t out_channels, std::uint64_t seed) {
        Rng rng({seed, 0x696d66ULL});
        auto uniform = [&rng](Shape shape, double bound) {
            std::vector<double> v(shape_numel(shape));
            for (double& x : v) x = rng.uniform(-bound, bound);
            return Tensor::build(std::move(shape), std::move(v), true);
        };
        auto block = [&](std::size_t c) {
            ResidualBlock b;
            b.w1 = uniform({hidden, c}, std::sqrt(6.0 / static_cast<double>(c)));
            b.b1 = Tensor::zeros({hidden}, true);
            b.w2 = uniform({c, hidden}, 0.1);
            b.b2 = Tensor::zeros({c}, true);
            return b;
        };
        ImageFusionParams p;
        p.rgb = block(rgb_channels);
        p.tir = block(tir_channels);
        const std::size_t cat = rgb_channels + tir_channels;
        p.proj_weight = uniform({out_channels, cat}, std::sqrt(6.0 / static_cast<double>(cat)));
        p.proj_bias = Tensor::zeros({out_channels}, true);
        return p;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out = rgb.parameters();
        for (auto& t : tir.parameters()) out.push_back(t);
        out.push_back(proj_weight);
        out.push_back(proj_bias);
        return out;
    }
};

inline Tensor image_level_fuse(const Tensor& rgb, const Tensor& tir, const ImageFusionParams& p) {
    if (rgb.rank() != 3 || tir.rank() != 3 || rgb.dim(1) != tir.dim(1) || rgb.dim(2) != tir.dim(2)) {
        throw ShapeMismatch("image_level_fuse: rgb " + shape_str(rgb.shape()) + " vs tir " + shape_str(tir.shape()));
    }
    Tensor cat = concat_channels({residual_block(rgb, p.rgb), residual_block(tir, p.tir)});
    return channel_mix(cat, p.proj_weight, p.proj_bias);
}

} // namespace amfd
