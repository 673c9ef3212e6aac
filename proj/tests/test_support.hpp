// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <vector>

#include "amfd/gradcheck.hpp"
#include "amfd/rng.hpp"
#include "amfd/tensor.hpp"

namespace amfd::testing {

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor::build(std::move(shape), std::move(v), requires_grad);
}

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Worst relative error between tape gradients and central differences over
/// every input of f.
inline double grad_check(const ScalarFn& f, std::vector<Tensor> inputs, double eps = 1e-5) {
    for (auto& t : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    f(inputs).backward();
    double worst = 0.0;
    for (auto& t : inputs) {
        const std::vector<double> analytic = t.grad();
        const std::vector<double> numeric = finite_diff_grad_inplace([&] { return f(inputs).item(); }, t, eps);
        worst = std::max(worst, max_relative_error(analytic, numeric));
    }
    return worst;
}

/// Same check against parameters that live inside f's closure.
inline double grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params, double eps = 1e-5) {
    for (auto& t : params) t.zero_grad();
    f().backward();
    double worst = 0.0;
    for (auto& t : params) {
        const std::vector<double> analytic = t.grad();
        const std::vector<double> numeric = finite_diff_grad_inplace([&] { return f().item(); }, t, eps);
        worst = std::max(worst, max_relative_error(analytic, numeric));
    }
    return worst;
}

} // namespace amfd::testing

#include "amfd/mea.hpp"

namespace amfd::testing {

/// Context block with every layer (including the zero-initialized expand
/// layer) drawn at random so every path carries gradient.
inline GcParams random_gc(Rng& rng, std::size_t channels, std::size_t reduction) {
    GcParams p = GcParams::init(channels, reduction, rng.index(1u << 30));
    const std::size_t mid = p.bottleneck();
    p.context_bias = random_tensor(rng, {1}, -0.5, 0.5, true);
    p.reduce_bias = random_tensor(rng, {mid}, -0.5, 0.5, true);
    p.expand_weight = random_tensor(rng, {channels, mid}, -0.5, 0.5, true);
    p.expand_bias = random_tensor(rng, {channels}, -0.5, 0.5, true);
    return p;
}

inline GtBox gt(double x1, double y1, double x2, double y2, Occlusion occ = Occlusion::None) {
    return GtBox{Box{x1, y1, x2, y2}, "person", occ};
}

} // namespace amfd::testing
