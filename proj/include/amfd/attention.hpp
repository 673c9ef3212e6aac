// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Spatial and channel attention of a C×H×W feature map:
//
//   A^S = H·W · softmax over pixels of   (1/C)  Σ_c |x_c|
//   A^C =   C · softmax over channels of (1/HW) Σ_ij |x_ij|
//
// Both are differentiable in x. The scaling fixes Σ A^S = H·W and Σ A^C = C.

#pragma once

#include <array>
#include <cmath>
#include <cstddef>

#include "amfd/tensor.hpp"

namespace amfd {

struct SpatialAttention {
    Tensor weights; // H×W
    std::array<std::size_t, 3> source{};
};

struct ChannelAttention {
    Tensor weights; // C
    std::array<std::size_t, 3> source{};
};

namespace detail {

inline void require_feature_map(const Tensor& x, const char* op) {
    if (x.rank() != 3 || x.dim(0) == 0 || x.dim(1) == 0 || x.dim(2) == 0) {
        throw ShapeMismatch(std::string(op) + ": expected a non-empty C×H×W map, got " + shape_str(x.shape()));
    }
    if (!all_finite(x.values())) {
        throw NonFiniteValue(std::string(op) + ": non-finite feature value");
    }
}

} // namespace detail

inline SpatialAttention spatial_attention(const Tensor& x) {
    detail::require_feature_map(x, "spatial_attention");
    const std::size_t c = x.dim(0);
    const std::size_t h = x.dim(1);
    const std::size_t w = x.dim(2);
    Tensor pooled = reshape(reduce(x, Reduction::MeanAbs, {0}), {h * w});
    Tensor map = reshape(scale(softmax(pooled), static_cast<double>(h * w)), {h, w});
    return {std::move(map), {c, h, w}};
}

inline ChannelAttention channel_attention(const Tensor& x) {
    detail::require_feature_map(x, "channel_attention");
    const std::size_t c = x.dim(0);
    Tensor pooled = reduce(x, Reduction::MeanAbs, {1, 2});
    Tensor weights = scale(softmax(pooled), static_cast<double>(c));
    return {std::move(weights), {c, x.dim(1), x.dim(2)}};
}

} // namespace amfd
