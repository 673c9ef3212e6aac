// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Single-stream student: image-level fusion, two stride-2 downsampling stages
// (space-to-depth then a 1×1 mix), a 3×3 stage at stride 4, a pooled 3×3
// stage at stride 8, a two-level top-down FPN and a dense head shared in
// structure (not weights) across levels.

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "amfd/fusion.hpp"
#include "amfd/mea.hpp"
#include "amfd/rng.hpp"
#include "amfd/tensor.hpp"
#include "amfd/toynet/scene.hpp"

namespace amfd::toynet {

/// Per-cell prediction layout: objectness logit then four box offsets.
inline constexpr std::size_t kHeadOutputs = 5;

struct StudentSpec {
    std::size_t fuse_hidden = 4;
    std::size_t fuse_channels = 4;
    std::size_t stage1_channels = 12;
    std::size_t stage2_channels = 16;
    std::size_t feature_channels = 8; // FPN width, equals the teacher's level width

    friend bool operator==(const StudentSpec&, const StudentSpec&) = default;
};

struct StudentModel {
    ImageFusionParams fusion;
    Tensor stage1_w, stage1_b; // 1×1 after space-to-depth, stride 2
    Tensor stage2_w, stage2_b; // 1×1 after space-to-depth, stride 4
    Tensor conv2_w, conv2_b;   // 3×3 at stride 4
    Tensor conv3_w, conv3_b;   // 3×3 at stride 8
    Tensor lateral2_w, lateral2_b;
    Tensor lateral3_w, lateral3_b;
    Tensor tower_w, tower_b;   // 3×3 head tower shared by both levels
    std::vector<Tensor> head_w, head_b;

    static StudentModel init(const StudentSpec& spec, std::uint64_t seed, std::size_t rgb_channels = 3,
                             std::size_t tir_channels = 1) {
        Rng rng({seed, 0x57d7ULL});
        auto he = [&rng](Shape shape, std::size_t fan_in) {
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            std::vector<double> v(shape_numel(shape));
            for (double& x : v) x = rng.uniform(-bound, bound);
            return Tensor::build(std::move(shape), std::move(v), true);
        };
        auto zeros = [](std::size_t n) { return Tensor::zeros({n}, true); };
        const std::size_t f = spec.fuse_channels;
        const std::size_t c1 = spec.stage1_channels;
        const std::size_t c2 = spec.stage2_channels;
        const std::size_t fc = spec.feature_channels;
        StudentModel m;
        m.fusion = ImageFusionParams::init(rgb_channels, tir_channels, spec.fuse_hidden, f, rng.next_u64());
        m.stage1_w = he({c1, 4 * f}, 4 * f);
        m.stage1_b = zeros(c1);
        m.stage2_w = he({c2, 4 * c1}, 4 * c1);
        m.stage2_b = zeros(c2);
        m.conv2_w = he({c2, c2, 3, 3}, 9 * c2);
        m.conv2_b = zeros(c2);
        m.conv3_w = he({c2, c2, 3, 3}, 9 * c2);
        m.conv3_b = zeros(c2);
        m.lateral2_w = he({fc, c2}, c2);
        m.lateral2_b = zeros(fc);
        m.lateral3_w = he({fc, c2}, c2);
        m.lateral3_b = zeros(fc);
        m.tower_w = he({fc, fc, 3, 3}, 9 * fc);
        m.tower_b = zeros(fc);
        for (int level = 0; level < 2; ++level) {
            Tensor w = he({kHeadOutputs, fc}, fc);
            // Small head weights and a prior of about 1% objectness.
            for (double& v : w.mutable_values()) v *= 0.1;
            std::vector<double> b(kHeadOutputs, 0.0);
            b[0] = -4.6;
            m.head_w.push_back(std::move(w));
            m.head_b.push_back(Tensor::build({kHeadOutputs}, std::move(b), true));
        }
        return m;
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        const char* fusion_names[] = {"fusion.rgb.w1", "fusion.rgb.b1", "fusion.rgb.w2", "fusion.rgb.b2",
                                      "fusion.tir.w1", "fusion.tir.b1", "fusion.tir.w2", "fusion.tir.b2",
                                      "fusion.proj.w", "fusion.proj.b"};
        const auto fp = fusion.parameters();
        for (std::size_t i = 0; i < fp.size(); ++i) out.emplace_back(fusion_names[i], fp[i]);
        out.emplace_back("stage1.w", stage1_w);
        out.emplace_back("stage1.b", stage1_b);
        out.emplace_back("stage2.w", stage2_w);
        out.emplace_back("stage2.b", stage2_b);
        out.emplace_back("conv2.w", conv2_w);
        out.emplace_back("conv2.b", conv2_b);
        out.emplace_back("conv3.w", conv3_w);
        out.emplace_back("conv3.b", conv3_b);
        out.emplace_back("lateral2.w", lateral2_w);
        out.emplace_back("lateral2.b", lateral2_b);
        out.emplace_back("lateral3.w", lateral3_w);
        out.emplace_back("lateral3.b", lateral3_b);
        out.emplace_back("tower.w", tower_w);
        out.emplace_back("tower.b", tower_b);
        for (std::size_t l = 0; l < head_w.size(); ++l) {
            out.emplace_back("head" + std::to_string(l) + ".w", head_w[l]);
            out.emplace_back("head" + std::to_string(l) + ".b", head_b[l]);
        }
        return out;
    }

    std::vector<Tensor> parameters() const {
        std::vector<Tensor> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& t : parameters()) n += t.numel();
        return n;
    }

    /// Deep copy with fresh parameter leaves.
    StudentModel clone() const {
        StudentModel m = *this;
        auto fresh = [](Tensor& t) { t = t.clone_leaf(); };
        for (auto* b : {&m.fusion.rgb, &m.fusion.tir}) {
            fresh(b->w1);
            fresh(b->b1);
            fresh(b->w2);
            fresh(b->b2);
        }
        fresh(m.fusion.proj_weight);
        fresh(m.fusion.proj_bias);
        for (Tensor* t : {&m.stage1_w, &m.stage1_b, &m.stage2_w, &m.stage2_b, &m.conv2_w, &m.conv2_b, &m.conv3_w,
                          &m.conv3_b, &m.lateral2_w, &m.lateral2_b, &m.lateral3_w, &m.lateral3_b, &m.tower_w,
                          &m.tower_b}) {
            fresh(*t);
        }
        for (auto& t : m.head_w) fresh(t);
        for (auto& t : m.head_b) fresh(t);
        return m;
    }
};

struct StudentOutput {
    FeaturePyramid features;          // x̃_F, strides {4, 8}
    std::vector<Tensor> predictions;  // per level, 5×H×W
};

inline StudentOutput student_forward(const Tensor& rgb, const Tensor& tir, const StudentModel& m) {
    if (rgb.rank() != 3 || rgb.dim(1) % 8 != 0 || rgb.dim(2) % 8 != 0) {
        throw ShapeMismatch("student_forward: image extents must be multiples of 8, got " + shape_str(rgb.shape()));
    }
    const Tensor fused = image_level_fuse(rgb, tir, m.fusion);
    const Tensor s1 = relu(channel_mix(space_to_depth(fused, 2), m.stage1_w, m.stage1_b));
    const Tensor s2 = relu(channel_mix(space_to_depth(s1, 2), m.stage2_w, m.stage2_b));
    const Tensor c2 = relu(conv3x3(s2, m.conv2_w, m.conv2_b));
    const Tensor c3 = relu(conv3x3(avg_pool(c2, 2), m.conv3_w, m.conv3_b));
    const Tensor p3 = channel_mix(c3, m.lateral3_w, m.lateral3_b);
    const Tensor p2 = add(channel_mix(c2, m.lateral2_w, m.lateral2_b), upsample_nearest(p3, 2));
    StudentOutput out;
    out.features.levels = {p2, p3};
    out.features.strides = {4.0, 8.0};
    for (std::size_t l = 0; l < 2; ++l) {
        const Tensor t = relu(conv3x3(out.features.levels[l], m.tower_w, m.tower_b));
        out.predictions.push_back(channel_mix(t, m.head_w[l], m.head_b[l]));
    }
    return out;
}

inline StudentOutput student_forward(const Scene& scene, const StudentModel& m) {
    return student_forward(scene.rgb, scene.tir, m);
}

} // namespace amfd::toynet
