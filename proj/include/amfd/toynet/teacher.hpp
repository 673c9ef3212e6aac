// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Frozen stand-in for a two-stream teacher. Each modality goes through a fixed
// filter bank (Gaussian, difference-of-Gaussian and upright centre-surround
// bands per input channel),
// 2×2 averaging, a seeded random projection split into its positive and negative parts,
// average pooling to each pyramid stride, and a seeded per-level projection
// with bias. Nothing here is ever trained.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <iterator>
#include <vector>

#include "amfd/error.hpp"
#include "amfd/mea.hpp"
#include "amfd/rng.hpp"
#include "amfd/tensor.hpp"
#include "amfd/toynet/scene.hpp"

namespace amfd::toynet {

struct TeacherSpec {
    std::size_t projections = 128; // K; the rectified code has 2K channels
    std::size_t channels = 8;      // per pyramid level
    std::vector<std::size_t> strides{4, 8};
    double gain = 4.0;
    std::uint64_t seed = 7;

    friend bool operator==(const TeacherSpec&, const TeacherSpec&) = default;
};

struct TeacherFeatures {
    FeaturePyramid rgb;
    FeaturePyramid tir;
    FeaturePyramid fused; // per-level mean of rgb and tir
};

namespace detail {

// Vertical sigmas of the upright bands; horizontal is kUprightAspect times that.
inline constexpr double kUprightSigmas[] = {8.0, 11.0, 16.0, 22.0};
inline constexpr double kUprightAspect = 0.41;
inline constexpr std::size_t kBandsPerChannel = std::size(kUprightSigmas);

inline std::vector<double> gaussian_kernel(double sigma) {
    const auto radius = static_cast<long>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (long i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
        k[static_cast<std::size_t>(i + radius)] = v;
        total += v;
    }
    for (double& v : k) v /= total;
    return k;
}

// Separable blur with clamped borders.
inline std::vector<double> blur(const double* plane, std::size_t h, std::size_t w, double sigma_x,
                                double sigma_y) {
    const std::vector<double> kx = gaussian_kernel(sigma_x);
    const std::vector<double> ky = gaussian_kernel(sigma_y);
    const long rx = static_cast<long>(kx.size() / 2);
    const long ry = static_cast<long>(ky.size() / 2);
    const long H = static_cast<long>(h);
    const long W = static_cast<long>(w);
    std::vector<double> tmp(h * w, 0.0);
    std::vector<double> out(h * w, 0.0);
    for (long y = 0; y < H; ++y) {
        for (long x = 0; x < W; ++x) {
            double s = 0.0;
            for (long t = -rx; t <= rx; ++t) {
                const long xx = std::clamp(x + t, 0L, W - 1);
                s += kx[static_cast<std::size_t>(t + rx)] * plane[y * W + xx];
            }
            tmp[static_cast<std::size_t>(y * W + x)] = s;
        }
    }
    for (long y = 0; y < H; ++y) {
        for (long x = 0; x < W; ++x) {
            double s = 0.0;
            for (long t = -ry; t <= ry; ++t) {
                const long yy = std::clamp(y + t, 0L, H - 1);
                s += ky[static_cast<std::size_t>(t + ry)] * tmp[static_cast<std::size_t>(yy * W + x)];
            }
            out[static_cast<std::size_t>(y * W + x)] = s;
        }
    }
    return out;
}

} // namespace detail

/// One modality's frozen generator.
struct TeacherStream {
    std::size_t input_channels = 0;
    std::vector<double> projection;              // K × bands()
    std::vector<std::vector<double>> level_weight; // per level: channels × 2K
    std::vector<std::vector<double>> level_bias;   // per level: channels

    std::size_t bands() const { return detail::kBandsPerChannel * input_channels; }
};

class Teacher {
public:
    Teacher(const TeacherSpec& spec, std::size_t rgb_channels = 3, std::size_t tir_channels = 1) : spec_(spec) {
        if (spec.projections == 0 || spec.channels == 0 || spec.strides.empty()) {
            throw BadSpec("teacher spec: projections, channels and strides must be non-empty");
        }
        for (std::size_t s : spec.strides) {
            if (s < 2 || s % 2 != 0) throw BadSpec("teacher spec: strides must be even and at least 2");
        }
        rgb_ = make_stream(rgb_channels, 1);
        tir_ = make_stream(tir_channels, 2);
    }

    const TeacherSpec& spec() const { return spec_; }

    FeaturePyramid modal(const Tensor& image, bool thermal) const {
        return run(thermal ? tir_ : rgb_, image);
    }

    TeacherFeatures features(const Scene& scene) const {
        TeacherFeatures f;
        f.rgb = modal(scene.rgb, false);
        f.tir = modal(scene.tir, true);
        f.fused.strides = f.rgb.strides;
        for (std::size_t l = 0; l < f.rgb.size(); ++l) {
            const auto r = f.rgb.levels[l].values();
            const auto t = f.tir.levels[l].values();
            std::vector<double> m(r.size());
            for (std::size_t i = 0; i < m.size(); ++i) m[i] = 0.5 * (r[i] + t[i]);
            f.fused.levels.push_back(Tensor::build(f.rgb.levels[l].shape(), std::move(m)));
        }
        return f;
    }

    /// Number of scalars in the generator's fixed state.
    std::size_t state_size() const {
        std::size_t n = 0;
        for (const TeacherStream* s : {&rgb_, &tir_}) {
            n += s->projection.size();
            for (const auto& w : s->level_weight) n += w.size();
            for (const auto& b : s->level_bias) n += b.size();
        }
        return n;
    }

    /// Raw little-endian bytes of the fixed state, for frozenness checks.
    std::vector<unsigned char> state_bytes() const {
        std::vector<unsigned char> out;
        auto put = [&out](const std::vector<double>& v) {
            const auto* p = reinterpret_cast<const unsigned char*>(v.data());
            out.insert(out.end(), p, p + v.size() * sizeof(double));
        };
        for (const TeacherStream* s : {&rgb_, &tir_}) {
            put(s->projection);
            for (const auto& w : s->level_weight) put(w);
            for (const auto& b : s->level_bias) put(b);
        }
        return out;
    }

private:
    TeacherStream make_stream(std::size_t input_channels, std::uint64_t tag) const {
        Rng rng({spec_.seed, tag, 0x7eac4ULL});
        TeacherStream s;
        s.input_channels = input_channels;
        const std::size_t m = s.bands();
        const std::size_t k = spec_.projections;
        s.projection.resize(k * m);
        const double g1 = spec_.gain / std::sqrt(static_cast<double>(m));
        for (double& v : s.projection) v = g1 * rng.normal();
        const double g2 = 1.0 / std::sqrt(static_cast<double>(k));
        for (std::size_t l = 0; l < spec_.strides.size(); ++l) {
            std::vector<double> w(spec_.channels * 2 * k);
            for (double& v : w) v = g2 * std::abs(rng.normal());
            std::vector<double> b(spec_.channels);
            for (double& v : b) v = rng.uniform(-0.1, 0.1);
            s.level_weight.push_back(std::move(w));
            s.level_bias.push_back(std::move(b));
        }
        return s;
    }

    FeaturePyramid run(const TeacherStream& s, const Tensor& image) const {
        if (image.rank() != 3 || image.dim(0) != s.input_channels) {
            throw ShapeMismatch("teacher: image " + shape_str(image.shape()) + " for a " +
                                std::to_string(s.input_channels) + "-channel stream");
        }
        const std::size_t h = image.dim(1);
        const std::size_t w = image.dim(2);
        for (std::size_t st : spec_.strides) {
            if (h % st != 0 || w % st != 0) {
                throw ShapeMismatch("teacher: image extents not divisible by stride " + std::to_string(st));
            }
        }
        const std::size_t hw = h * w;
        // Filter bank per channel: U(s) − G(2s) for each upright sigma s, an
        // elongated centre against an isotropic surround.
        const std::size_t nb = detail::kBandsPerChannel;
        std::vector<double> bands(s.bands() * hw);
        for (std::size_t c = 0; c < s.input_channels; ++c) {
            const double* plane = image.values().data() + c * hw;
            double* out = bands.data() + nb * c * hw;
            for (double sigma : detail::kUprightSigmas) {
                const auto centre = detail::blur(plane, h, w, detail::kUprightAspect * sigma, sigma);
                const auto surround = detail::blur(plane, h, w, 2.0 * sigma, 2.0 * sigma);
                for (std::size_t i = 0; i < hw; ++i) out[i] = centre[i] - surround[i];
                out += hw;
            }
        }
        // Bands averaged over 2×2 cells, then the rectified random code.
        const std::size_t h2 = h / 2;
        const std::size_t w2 = w / 2;
        const std::size_t hw2 = h2 * w2;
        const std::size_t m = s.bands();
        std::vector<double> half(m * hw2, 0.0);
        for (std::size_t b = 0; b < m; ++b) {
            const double* src = bands.data() + b * hw;
            double* dst = half.data() + b * hw2;
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) dst[(y / 2) * w2 + x / 2] += 0.25 * src[y * w + x];
            }
        }
        const std::size_t k = spec_.projections;
        std::vector<double> code(2 * k * hw2, 0.0);
        std::vector<double> z(hw2);
        for (std::size_t j = 0; j < k; ++j) {
            std::fill(z.begin(), z.end(), 0.0);
            for (std::size_t b = 0; b < m; ++b) {
                const double wjb = s.projection[j * m + b];
                const double* src = half.data() + b * hw2;
                for (std::size_t i = 0; i < hw2; ++i) z[i] += wjb * src[i];
            }
            double* pos = code.data() + j * hw2;
            double* neg = code.data() + (k + j) * hw2;
            for (std::size_t i = 0; i < hw2; ++i) {
                pos[i] = z[i] > 0.0 ? z[i] : 0.0;
                neg[i] = z[i] < 0.0 ? -z[i] : 0.0;
            }
        }
        FeaturePyramid pyr;
        for (std::size_t l = 0; l < spec_.strides.size(); ++l) {
            const std::size_t st = spec_.strides[l] / 2;
            const std::size_t lh = h2 / st;
            const std::size_t lw = w2 / st;
            const double inv = 1.0 / static_cast<double>(st * st);
            std::vector<double> pooled(2 * k * lh * lw, 0.0);
            for (std::size_t c = 0; c < 2 * k; ++c) {
                const double* src = code.data() + c * hw2;
                double* dst = pooled.data() + c * lh * lw;
                for (std::size_t y = 0; y < h2; ++y) {
                    for (std::size_t x = 0; x < w2; ++x) dst[(y / st) * lw + x / st] += src[y * w2 + x];
                }
                for (std::size_t i = 0; i < lh * lw; ++i) dst[i] *= inv;
            }
            const auto& lwgt = s.level_weight[l];
            const auto& lb = s.level_bias[l];
            std::vector<double> out(spec_.channels * lh * lw);
            for (std::size_t o = 0; o < spec_.channels; ++o) {
                double* dst = out.data() + o * lh * lw;
                for (std::size_t i = 0; i < lh * lw; ++i) dst[i] = lb[o];
                for (std::size_t c = 0; c < 2 * k; ++c) {
                    const double wc = lwgt[o * 2 * k + c];
                    const double* src = pooled.data() + c * lh * lw;
                    for (std::size_t i = 0; i < lh * lw; ++i) dst[i] += wc * src[i];
                }
            }
            pyr.levels.push_back(Tensor::build({spec_.channels, lh, lw}, std::move(out)));
            pyr.strides.push_back(static_cast<double>(spec_.strides[l]));
        }
        return pyr;
    }

    TeacherSpec spec_;
    TeacherStream rgb_;
    TeacherStream tir_;
};

} // namespace amfd::toynet
