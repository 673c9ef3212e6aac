// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Modal extraction alignment (MEA): one distillation loss between a frozen
// teacher feature and the student's fused feature, built from
//
//   global    λ · Σ (G(x_teacher) − G(x_student))²,  G(x) = x ⊕ W(x)
//   target    α · Σ_kij M_ij · A^S_ij · A^C_k · (x_teacher − x_student)²
//   attention γ · (|A^S_teacher − A^S_student|₁ + |A^C_teacher − A^C_student|₁)
//
// where W is a global-context block, M the per-box focal mask, and the
// teacher attention maps are constants.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "amfd/attention.hpp"
#include "amfd/boxes.hpp"
#include "amfd/rng.hpp"
#include "amfd/tensor.hpp"

namespace amfd {

/// Per-level feature maps plus the image stride of each level.
struct FeaturePyramid {
    std::vector<Tensor> levels;
    std::vector<double> strides;

    std::size_t size() const noexcept { return levels.size(); }
};

/// Global-context block parameters.
struct GcParams {
    Tensor context_weight; // 1×C, scores each pixel for the softmax pooling
    Tensor context_bias;   // 1
    Tensor reduce_weight;  // (C/r)×C
    Tensor reduce_bias;    // C/r
    Tensor expand_weight;  // C×(C/r)
    Tensor expand_bias;    // C
    std::size_t reduction = 4;

    std::size_t channels() const { return context_weight.dim(1); }
    std::size_t bottleneck() const { return reduce_weight.dim(0); }

    /// Seeded init: context and reduce weights U(±0.1), every bias zero, the
    /// expand layer zero so a fresh block is the identity map.
    static GcParams init(std::size_t channels, std::size_t reduction, std::uint64_t seed) {
        if (channels == 0 || reduction == 0) {
            throw ShapeMismatch("GcParams: channels and reduction must be positive");
        }
        const std::size_t mid = std::max<std::size_t>(1, channels / reduction);
        Rng rng({seed, 0x6763ULL});
        auto uniform = [&rng](Shape shape) {
            std::vector<double> v(shape_numel(shape));
            for (double& x : v) x = rng.uniform(-0.1, 0.1);
            return Tensor::build(std::move(shape), std::move(v), true);
        };
        GcParams p;
        p.context_weight = uniform({1, channels});
        p.context_bias = Tensor::zeros({1}, true);
        p.reduce_weight = uniform({mid, channels});
        p.reduce_bias = Tensor::zeros({mid}, true);
        p.expand_weight = Tensor::zeros({channels, mid}, true);
        p.expand_bias = Tensor::zeros({channels}, true);
        p.reduction = reduction;
        return p;
    }

    std::vector<Tensor> parameters() const {
        return {context_weight, context_bias, reduce_weight, reduce_bias, expand_weight, expand_bias};
    }

    /// Deep copy with fresh parameter leaves.
    GcParams clone() const {
        GcParams p;
        p.context_weight = context_weight.clone_leaf();
        p.context_bias = context_bias.clone_leaf();
        p.reduce_weight = reduce_weight.clone_leaf();
        p.reduce_bias = reduce_bias.clone_leaf();
        p.expand_weight = expand_weight.clone_leaf();
        p.expand_bias = expand_bias.clone_leaf();
        p.reduction = reduction;
        return p;
    }
};

/// Channel-wise context weight W(x), a C×1×1 grid.
inline Tensor gc_weight(const Tensor& x, const GcParams& p) {
    if (x.rank() != 3 || x.dim(0) != p.channels()) {
        throw ShapeMismatch("gc_weight: feature " + shape_str(x.shape()) + " for a " + std::to_string(p.channels()) +
                            "-channel block");
    }
    const std::size_t c = x.dim(0);
    const std::size_t hw = x.dim(1) * x.dim(2);
    Tensor scores = reshape(channel_mix(x, p.context_weight, p.context_bias), {hw});
    Tensor pool = reshape(softmax(scores), {hw, 1});
    Tensor context = reshape(matmul(reshape(x, {c, hw}), pool), {c, 1, 1});
    Tensor hidden = layer_norm_relu(channel_mix(context, p.reduce_weight, p.reduce_bias));
    return channel_mix(hidden, p.expand_weight, p.expand_bias);
}

/// G(x) = x ⊕ W(x).
inline Tensor gc_apply(const Tensor& x, const GcParams& p) { return broadcast_add(x, gc_weight(x, p)); }

inline Tensor global_loss(const Tensor& teacher, const Tensor& student, const GcParams& p, double lambda) {
    if (teacher.shape() != student.shape()) {
        throw ShapeMismatch("global_loss: teacher " + shape_str(teacher.shape()) + " vs student " +
                            shape_str(student.shape()));
    }
    Tensor diff = sub(gc_apply(teacher.detach(), p), gc_apply(student, p));
    return scale(sum(square(diff)), lambda);
}

/// Per-cell box weights at one pyramid level.
struct FocalMask {
    Tensor weights; // H×W, constant
    double stride = 1.0;
};

/// Cell rectangle [y0,y1)×[x0,x1) covered by a box at the given stride, or
/// an empty rectangle when nothing survives clipping.
struct CellRect {
    std::size_t y0 = 0, y1 = 0, x0 = 0, x1 = 0;
    bool empty() const noexcept { return y1 <= y0 || x1 <= x0; }
    std::size_t area() const noexcept { return empty() ? 0 : (y1 - y0) * (x1 - x0); }
};

inline CellRect box_to_cells(const Box& box, std::size_t height, std::size_t width, double stride) {
    auto clip = [](double v, std::size_t hi) {
        if (v <= 0.0) return std::size_t{0};
        if (v >= static_cast<double>(hi)) return hi;
        return static_cast<std::size_t>(v);
    };
    CellRect r;
    r.x0 = clip(std::floor(box.x1 / stride), width);
    r.x1 = clip(std::ceil(box.x2 / stride), width);
    r.y0 = clip(std::floor(box.y1 / stride), height);
    r.y1 = clip(std::ceil(box.y2 / stride), height);
    return r;
}

/// M_ij = 1/(h_b·w_b) of the largest covering box (in level cells), 0 elsewhere.
inline FocalMask build_mask(std::span<const GtBox> boxes, std::size_t height, std::size_t width, double stride) {
    if (!(stride > 0.0)) {
        throw BadSpec("build_mask: stride must be positive");
    }
    std::vector<std::size_t> largest(height * width, 0);
    for (const auto& gt : boxes) {
        const CellRect r = box_to_cells(gt.box, height, width, stride);
        if (r.empty()) continue;
        const std::size_t area = r.area();
        for (std::size_t y = r.y0; y < r.y1; ++y) {
            for (std::size_t x = r.x0; x < r.x1; ++x) {
                largest[y * width + x] = std::max(largest[y * width + x], area);
            }
        }
    }
    std::vector<double> w(height * width, 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (largest[i] > 0) w[i] = 1.0 / static_cast<double>(largest[i]);
    }
    return {Tensor::build({height, width}, std::move(w)), stride};
}

inline Tensor target_loss(const Tensor& teacher, const Tensor& student, const FocalMask& mask, double alpha) {
    if (teacher.shape() != student.shape()) {
        throw ShapeMismatch("target_loss: teacher " + shape_str(teacher.shape()) + " vs student " +
                            shape_str(student.shape()));
    }
    const std::size_t c = teacher.dim(0);
    const std::size_t h = teacher.dim(1);
    const std::size_t w = teacher.dim(2);
    if (mask.weights.shape() != Shape{h, w}) {
        throw ShapeMismatch("target_loss: mask " + shape_str(mask.weights.shape()) + " for level " +
                            shape_str(teacher.shape()));
    }
    Tensor fixed_teacher = teacher.detach();
    std::vector<double> weight(c * h * w);
    {
        NoGradGuard no_grad;
        const Tensor as = spatial_attention(fixed_teacher).weights;
        const Tensor ac = channel_attention(fixed_teacher).weights;
        const auto m = mask.weights.values();
        for (std::size_t k = 0; k < c; ++k) {
            for (std::size_t p = 0; p < h * w; ++p) {
                weight[k * h * w + p] = m[p] * as[p] * ac[k];
            }
        }
    }
    Tensor wt = Tensor::build(teacher.shape(), std::move(weight));
    return scale(sum(mul(wt, square(sub(fixed_teacher, student)))), alpha);
}

inline Tensor attention_loss(const Tensor& teacher, const Tensor& student, double gamma) {
    if (teacher.shape() != student.shape()) {
        throw ShapeMismatch("attention_loss: teacher " + shape_str(teacher.shape()) + " vs student " +
                            shape_str(student.shape()));
    }
    Tensor teacher_spatial;
    Tensor teacher_channel;
    {
        NoGradGuard no_grad;
        const Tensor fixed = teacher.detach();
        teacher_spatial = spatial_attention(fixed).weights;
        teacher_channel = channel_attention(fixed).weights;
    }
    Tensor spatial = sum(abs(sub(teacher_spatial, spatial_attention(student).weights)));
    Tensor channel = sum(abs(sub(teacher_channel, channel_attention(student).weights)));
    return scale(add(spatial, channel), gamma);
}

/// Loss weights of one MEA instance.
struct MeaWeights {
    double alpha = 0.0;  // target
    double gamma = 0.0;  // attention
    double lambda = 0.0; // global
};

/// The α/γ/λ pairs of both MEA instances plus the context-block ratio.
/// Index 1 belongs to RGB and 2 to TIR for α and γ; λ₁ pairs with the TIR
/// block and λ₂ with the RGB block.
struct MEAConfig {
    double alpha_rgb = 5e-5;
    double alpha_tir = 5e-5;
    double gamma_rgb = 5e-5;
    double gamma_tir = 5e-5;
    double lambda_tir = 5e-7;
    double lambda_rgb = 5e-7;
    std::size_t gc_reduction = 4;

    /// Two-stage detector defaults.
    static MEAConfig two_stage() { return {}; }

    /// One-stage detector defaults.
    static MEAConfig one_stage() { return {1e-3, 1e-3, 1e-3, 1e-3, 5e-6, 5e-6, 4}; }

    MeaWeights rgb() const { return {alpha_rgb, gamma_rgb, lambda_rgb}; }
    MeaWeights tir() const { return {alpha_tir, gamma_tir, lambda_tir}; }

    bool valid() const {
        for (double v : {alpha_rgb, alpha_tir, gamma_rgb, gamma_tir, lambda_tir, lambda_rgb}) {
            if (!std::isfinite(v) || v < 0.0) return false;
        }
        return gc_reduction > 0;
    }

    friend bool operator==(const MEAConfig&, const MEAConfig&) = default;
};

/// Differentiable terms of one MEA loss, summed over pyramid levels.
struct MeaLoss {
    Tensor global;
    Tensor target;
    Tensor attention;
    Tensor focal; // target + attention
    Tensor total; // global + focal
};

inline void require_aligned(const FeaturePyramid& a, const FeaturePyramid& b) {
    if (a.size() != b.size() || a.size() == 0) {
        throw PyramidMismatch("pyramids have " + std::to_string(a.size()) + " and " + std::to_string(b.size()) +
                              " levels");
    }
    for (std::size_t l = 0; l < a.size(); ++l) {
        if (a.levels[l].shape() != b.levels[l].shape()) {
            throw PyramidMismatch("level " + std::to_string(l) + ": " + shape_str(a.levels[l].shape()) + " vs " +
                                  shape_str(b.levels[l].shape()));
        }
        if (l < a.strides.size() && l < b.strides.size() && a.strides[l] != b.strides[l]) {
            throw PyramidMismatch("level " + std::to_string(l) + " strides differ");
        }
    }
}

inline MeaLoss mea_loss(const FeaturePyramid& teacher, const FeaturePyramid& student, std::span<const GtBox> boxes,
                        const GcParams& gc, const MeaWeights& weights) {
    require_aligned(teacher, student);
    if (teacher.strides.size() != teacher.size()) {
        throw PyramidMismatch("teacher pyramid is missing strides");
    }
    MeaLoss out;
    for (std::size_t l = 0; l < teacher.size(); ++l) {
        const Tensor& t = teacher.levels[l];
        const Tensor& s = student.levels[l];
        const FocalMask mask = build_mask(boxes, t.dim(1), t.dim(2), teacher.strides[l]);
        Tensor g = global_loss(t, s, gc, weights.lambda);
        Tensor tg = target_loss(t, s, mask, weights.alpha);
        Tensor at = attention_loss(t, s, weights.gamma);
        if (l == 0) {
            out.global = g;
            out.target = tg;
            out.attention = at;
        } else {
            out.global = add(out.global, g);
            out.target = add(out.target, tg);
            out.attention = add(out.attention, at);
        }
    }
    out.focal = add(out.target, out.attention);
    out.total = add(out.global, out.focal);
    return out;
}

/// Every named loss term of one training step (batch-averaged in training).
struct LossBreakdown {
    double global_rgb = 0.0;
    double global_tir = 0.0;
    double target_rgb = 0.0;
    double target_tir = 0.0;
    double att_rgb = 0.0;
    double att_tir = 0.0;
    double focal_rgb = 0.0;
    double focal_tir = 0.0;
    double mea_rgb = 0.0;
    double mea_tir = 0.0;
    double mea_total = 0.0;
    double original = 0.0;
    double total = 0.0;

    /// Recomputes focal/mea/total from the base terms.
    void derive() {
        focal_rgb = target_rgb + att_rgb;
        focal_tir = target_tir + att_tir;
        mea_rgb = global_rgb + focal_rgb;
        mea_tir = global_tir + focal_tir;
        mea_total = mea_rgb + mea_tir;
        total = original + mea_total;
    }

    /// Exact (bitwise) decomposition identities plus nonnegativity.
    bool consistent() const {
        const bool identities = focal_rgb == target_rgb + att_rgb && focal_tir == target_tir + att_tir &&
                                mea_rgb == global_rgb + focal_rgb && mea_tir == global_tir + focal_tir &&
                                mea_total == mea_rgb + mea_tir && total == original + mea_total;
        const bool nonneg = global_rgb >= 0 && global_tir >= 0 && target_rgb >= 0 && target_tir >= 0 &&
                            att_rgb >= 0 && att_tir >= 0 && original >= 0;
        return identities && nonneg;
    }

    static constexpr std::size_t kFieldCount = 13;

    static const std::array<const char*, kFieldCount>& field_names() {
        static const std::array<const char*, kFieldCount> names = {
            "global_rgb", "global_tir", "target_rgb", "target_tir", "att_rgb",   "att_tir",  "focal_rgb",
            "focal_tir",  "mea_rgb",    "mea_tir",    "mea_total",  "original", "total"};
        return names;
    }

    std::array<double, kFieldCount> fields() const {
        return {global_rgb, global_tir, target_rgb, target_tir, att_rgb, att_tir,  focal_rgb,
                focal_tir,  mea_rgb,    mea_tir,    mea_total,  original, total};
    }

    static LossBreakdown from_fields(std::span<const double> f) {
        LossBreakdown b;
        b.global_rgb = f[0];
        b.global_tir = f[1];
        b.target_rgb = f[2];
        b.target_tir = f[3];
        b.att_rgb = f[4];
        b.att_tir = f[5];
        b.focal_rgb = f[6];
        b.focal_tir = f[7];
        b.mea_rgb = f[8];
        b.mea_tir = f[9];
        b.mea_total = f[10];
        b.original = f[11];
        b.total = f[12];
        return b;
    }

    friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

/// Component-wise batch mean of the base terms; derived terms recomputed.
inline LossBreakdown batch_average(std::span<const LossBreakdown> parts) {
    LossBreakdown b;
    if (parts.empty()) return b;
    for (const auto& p : parts) {
        b.global_rgb += p.global_rgb;
        b.global_tir += p.global_tir;
        b.target_rgb += p.target_rgb;
        b.target_tir += p.target_tir;
        b.att_rgb += p.att_rgb;
        b.att_tir += p.att_tir;
        b.original += p.original;
    }
    const double n = static_cast<double>(parts.size());
    b.global_rgb /= n;
    b.global_tir /= n;
    b.target_rgb /= n;
    b.target_tir /= n;
    b.att_rgb /= n;
    b.att_tir /= n;
    b.original /= n;
    b.derive();
    return b;
}

} // namespace amfd
