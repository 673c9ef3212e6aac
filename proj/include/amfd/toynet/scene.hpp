// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Synthetic two-modality pedestrian scenes. Pedestrians are soft ellipses of
// pedestrian aspect, drawn back to front; a box's occlusion level is the
// fraction of its area covered by boxes drawn after it. Distractor blobs
// appear in a single modality so neither stream alone is reliable.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "amfd/boxes.hpp"
#include "amfd/error.hpp"
#include "amfd/rng.hpp"
#include "amfd/tensor.hpp"

namespace amfd::toynet {

struct ContrastProfile {
    double rgb = 1.0;
    double tir = 0.7;

    friend bool operator==(const ContrastProfile&, const ContrastProfile&) = default;
};

struct DatasetSpec {
    std::size_t height = 96;
    std::size_t width = 64;
    std::size_t train_scenes = 200;
    std::size_t test_scenes = 200;
    std::size_t min_objects = 1;
    std::size_t max_objects = 3;
    double min_height = 32.0;
    double max_height = 90.0;
    double aspect = 0.41;          // width / height of a pedestrian box
    double occlusion_prob = 0.3;   // chance an object is placed over an earlier one
    std::size_t max_distractors = 3;
    double night_fraction = 0.5;
    ContrastProfile day{1.0, 0.7};
    ContrastProfile night{0.2, 1.0};
    double noise_std = 0.08;
    double background_amplitude = 0.15;
    std::uint64_t seed = 1;

    /// Throws BadSpec on an unusable spec.
    void validate() const {
        auto fail = [](const std::string& what) { throw BadSpec("dataset spec: " + what); };
        if (height < 16 || width < 16) fail("image must be at least 16×16");
        if (height % 8 != 0 || width % 8 != 0) fail("image extents must be multiples of 8");
        if (max_objects < min_objects) fail("max_objects < min_objects");
        if (!(min_height > 0.0) || max_height < min_height) fail("bad height range");
        if (!(aspect > 0.0)) fail("aspect must be positive");
        if (max_height > static_cast<double>(height) || max_height * aspect > static_cast<double>(width)) {
            fail("objects larger than the image");
        }
        for (double p : {occlusion_prob, night_fraction}) {
            if (!(p >= 0.0 && p <= 1.0)) fail("probabilities must lie in [0, 1]");
        }
        for (double v : {day.rgb, day.tir, night.rgb, night.tir, noise_std, background_amplitude}) {
            if (!std::isfinite(v) || v < 0.0) fail("contrast and noise must be finite and nonnegative");
        }
    }

    friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct Scene {
    Tensor rgb; // 3×H×W
    Tensor tir; // 1×H×W
    std::vector<GtBox> annotations;
    bool night = false;
    std::uint64_t seed = 0;
};

/// Area of the union of rectangles, by coordinate compression.
inline double union_area(const std::vector<Box>& boxes) {
    std::vector<double> xs;
    std::vector<double> ys;
    for (const auto& b : boxes) {
        if (!b.valid()) continue;
        xs.insert(xs.end(), {b.x1, b.x2});
        ys.insert(ys.end(), {b.y1, b.y2});
    }
    std::sort(xs.begin(), xs.end());
    std::sort(ys.begin(), ys.end());
    double area = 0.0;
    for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
        for (std::size_t j = 0; j + 1 < ys.size(); ++j) {
            const double cx = 0.5 * (xs[i] + xs[i + 1]);
            const double cy = 0.5 * (ys[j] + ys[j + 1]);
            for (const auto& b : boxes) {
                if (b.valid() && cx > b.x1 && cx < b.x2 && cy > b.y1 && cy < b.y2) {
                    area += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j]);
                    break;
                }
            }
        }
    }
    return area;
}

/// Fraction of each box covered by the boxes after it in drawing order.
inline std::vector<double> occluded_fractions(const std::vector<Box>& draw_order) {
    std::vector<double> out(draw_order.size(), 0.0);
    for (std::size_t i = 0; i < draw_order.size(); ++i) {
        const Box& b = draw_order[i];
        std::vector<Box> clipped;
        for (std::size_t j = i + 1; j < draw_order.size(); ++j) {
            const Box& o = draw_order[j];
            clipped.push_back(Box{std::max(b.x1, o.x1), std::max(b.y1, o.y1), std::min(b.x2, o.x2), std::min(b.y2, o.y2)});
        }
        out[i] = b.area() > 0.0 ? union_area(clipped) / b.area() : 0.0;
    }
    return out;
}

inline std::vector<Occlusion> occlusion_levels(const std::vector<Box>& draw_order) {
    std::vector<Occlusion> out;
    for (double f : occluded_fractions(draw_order)) out.push_back(occlusion_from_fraction(f));
    return out;
}

namespace detail {

// Soft ellipse weight in [0, 1]: 1 inside, a linear ramp across the rim.
inline double ellipse_weight(double x, double y, const Box& b) {
    const double rx = 0.5 * b.width();
    const double ry = 0.5 * b.height();
    const double dx = (x - 0.5 * (b.x1 + b.x2)) / rx;
    const double dy = (y - 0.5 * (b.y1 + b.y2)) / ry;
    const double r2 = dx * dx + dy * dy;
    return std::clamp((1.0 - r2) * 4.0, 0.0, 1.0);
}

// Paints value over the current pixel with the blob's weight (front-most wins).
inline void paint(std::vector<double>& plane, std::size_t h, std::size_t w, const Box& b, double value) {
    const auto y0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.y1)));
    const auto y1 = std::min(h, static_cast<std::size_t>(std::max(0.0, std::ceil(b.y2))));
    const auto x0 = static_cast<std::size_t>(std::max(0.0, std::floor(b.x1)));
    const auto x1 = std::min(w, static_cast<std::size_t>(std::max(0.0, std::ceil(b.x2))));
    for (std::size_t y = y0; y < y1; ++y) {
        for (std::size_t x = x0; x < x1; ++x) {
            const double a = ellipse_weight(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5, b);
            double& p = plane[y * w + x];
            p = (1.0 - a) * p + a * value;
        }
    }
}

// Low-frequency background: a few random cosines.
inline std::vector<double> background(Rng& rng, std::size_t h, std::size_t w, double base, double amplitude) {
    std::vector<double> plane(h * w, base);
    for (int k = 0; k < 3; ++k) {
        const double fx = rng.uniform(0.0, 2.0) * 2.0 * 3.14159265358979323846 / static_cast<double>(w);
        const double fy = rng.uniform(0.0, 2.0) * 2.0 * 3.14159265358979323846 / static_cast<double>(h);
        const double phase = rng.uniform(0.0, 6.283185307179586);
        const double a = amplitude * rng.uniform(0.3, 1.0) / 3.0;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                plane[y * w + x] += a * std::cos(fx * static_cast<double>(x) + fy * static_cast<double>(y) + phase);
            }
        }
    }
    return plane;
}

} // namespace detail

/// Deterministic scene for (spec, seed).
inline Scene generate_scene(const DatasetSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng({spec.seed, seed, 0x5ce9eULL});
    const std::size_t h = spec.height;
    const std::size_t w = spec.width;
    const double H = static_cast<double>(h);
    const double W = static_cast<double>(w);

    Scene scene;
    scene.seed = seed;
    scene.night = rng.bernoulli(spec.night_fraction);
    const ContrastProfile contrast = scene.night ? spec.night : spec.day;

    // Layout.
    const std::size_t count = spec.min_objects + rng.index(spec.max_objects - spec.min_objects + 1);
    std::vector<Box> boxes;
    for (std::size_t i = 0; i < count; ++i) {
        // Log-uniform heights keep small and large pedestrians balanced.
        const double bh = std::exp(rng.uniform(std::log(spec.min_height), std::log(spec.max_height)));
        const double bw = spec.aspect * bh;
        double x1 = rng.uniform(0.0, W - bw);
        double y1 = rng.uniform(0.0, H - bh);
        if (!boxes.empty() && rng.bernoulli(spec.occlusion_prob)) {
            const Box& anchor = boxes[rng.index(boxes.size())];
            x1 = std::clamp(anchor.x1 + rng.uniform(-0.8, 0.8) * anchor.width(), 0.0, W - bw);
            y1 = std::clamp(anchor.y2 - bh + rng.uniform(-0.2, 0.2) * anchor.height(), 0.0, H - bh);
        }
        boxes.push_back(Box{x1, y1, x1 + bw, y1 + bh});
    }
    struct Distractor {
        Box box;
        bool in_rgb;
    };
    std::vector<Distractor> distractors;
    const std::size_t n_distract = rng.index(spec.max_distractors + 1);
    for (std::size_t i = 0; i < n_distract; ++i) {
        // Half the distractors share the pedestrian silhouette.
        const bool upright = rng.bernoulli(0.5);
        const double dh = upright ? std::exp(rng.uniform(std::log(spec.min_height), std::log(spec.max_height)))
                                  : rng.uniform(8.0, std::min(28.0, 0.5 * W));
        const double dw = upright ? spec.aspect * dh : dh;
        const double x1 = rng.uniform(0.0, W - dw);
        const double y1 = rng.uniform(0.0, H - dh);
        distractors.push_back({Box{x1, y1, x1 + dw, y1 + dh}, rng.bernoulli(0.5)});
    }

    // RGB.
    std::vector<double> rgb(3 * h * w);
    std::vector<std::vector<double>> planes;
    for (int c = 0; c < 3; ++c) planes.push_back(detail::background(rng, h, w, 0.5, spec.background_amplitude));
    for (const auto& d : distractors) {
        if (!d.in_rgb) continue;
        const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
        for (int c = 0; c < 3; ++c) {
            detail::paint(planes[c], h, w, d.box, 0.5 + sign * rng.uniform(0.2, 0.4));
        }
    }
    for (const auto& b : boxes) {
        const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
        for (int c = 0; c < 3; ++c) {
            const double level = 0.5 + contrast.rgb * sign * rng.uniform(0.25, 0.45);
            detail::paint(planes[c], h, w, b, level);
        }
    }
    for (int c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < h * w; ++i) rgb[c * h * w + i] = planes[c][i] + spec.noise_std * rng.normal();
    }

    // TIR: pedestrians are always warmer than the background.
    std::vector<double> tir = detail::background(rng, h, w, 0.3, spec.background_amplitude);
    for (const auto& d : distractors) {
        if (d.in_rgb) continue;
        detail::paint(tir, h, w, d.box, 0.3 + rng.uniform(0.3, 0.5));
    }
    for (const auto& b : boxes) detail::paint(tir, h, w, b, 0.3 + contrast.tir * rng.uniform(0.35, 0.55));
    for (double& v : tir) v += spec.noise_std * rng.normal();

    scene.rgb = Tensor::build({3, h, w}, std::move(rgb));
    scene.tir = Tensor::build({1, h, w}, std::move(tir));
    const std::vector<Occlusion> occ = occlusion_levels(boxes);
    for (std::size_t i = 0; i < boxes.size(); ++i) scene.annotations.push_back(GtBox{boxes[i], "person", occ[i]});
    return scene;
}

struct Dataset {
    DatasetSpec spec;
    std::vector<Scene> train;
    std::vector<Scene> test;
};

inline Dataset generate_dataset(const DatasetSpec& spec) {
    spec.validate();
    Dataset d;
    d.spec = spec;
    for (std::size_t i = 0; i < spec.train_scenes; ++i) d.train.push_back(generate_scene(spec, i));
    for (std::size_t i = 0; i < spec.test_scenes; ++i) d.test.push_back(generate_scene(spec, spec.train_scenes + i));
    return d;
}

} // namespace amfd::toynet
