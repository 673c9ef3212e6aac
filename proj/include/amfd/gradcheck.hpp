// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "amfd/tensor.hpp"

namespace amfd {

/// Central differences (f(x+εe_i) − f(x−εe_i)) / 2ε for every coordinate of x.
/// f is evaluated on detached copies, so x itself is never touched.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps = 1e-5) {
    NoGradGuard no_grad;
    std::vector<double> base(x.values().begin(), x.values().end());
    std::vector<double> out(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) {
        std::vector<double> probe = base;
        probe[i] = base[i] + eps;
        const double up = f(Tensor::build(x.shape(), probe));
        probe[i] = base[i] - eps;
        const double down = f(Tensor::build(x.shape(), probe));
        out[i] = (up - down) / (2.0 * eps);
    }
    return Tensor::build(x.shape(), std::move(out));
}

/// Same probe, but perturbs `param` in place and calls a closure that reads
/// it. Used for parameters owned by larger structures.
inline std::vector<double> finite_diff_grad_inplace(const std::function<double()>& f, Tensor& param,
                                                    double eps = 1e-5) {
    NoGradGuard no_grad;
    auto values = param.mutable_values();
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double keep = values[i];
        values[i] = keep + eps;
        const double up = f();
        values[i] = keep - eps;
        const double down = f();
        values[i] = keep;
        out[i] = (up - down) / (2.0 * eps);
    }
    return out;
}

/// max_i |a_i − b_i| / max(|a_i|, |b_i|, floor). The floor keeps exactly-zero
/// gradients from turning rounding noise into a large ratio.
inline double max_relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-3) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
    }
    return worst;
}

} // namespace amfd
