// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "amfd/tensor.hpp"

namespace amfd {

struct AdamWOptions {
    double learning_rate = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Decoupled-weight-decay Adam. Moments are kept per parameter, in the order
/// the parameters were registered.
class AdamW {
public:
    AdamW() = default;

    AdamW(std::vector<Tensor> params, AdamWOptions options) : params_(std::move(params)), options_(options) {
        for (const auto& p : params_) {
            first_moment_.emplace_back(p.numel(), 0.0);
            second_moment_.emplace_back(p.numel(), 0.0);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    /// One update from the gradients accumulated on the parameters.
    void step() {
        std::vector<std::vector<double>> grads;
        grads.reserve(params_.size());
        for (const auto& p : params_) grads.push_back(p.grad());
        step(grads);
    }

    /// One update from explicit gradients (one buffer per parameter).
    void step(const std::vector<std::vector<double>>& grads) {
        if (grads.size() != params_.size()) {
            throw ShapeMismatch("AdamW: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(params_.size()) + " parameters");
        }
        ++step_count_;
        const auto& o = options_;
        const double t = static_cast<double>(step_count_);
        const double bias1 = 1.0 - std::pow(o.beta1, t);
        const double bias2 = 1.0 - std::pow(o.beta2, t);
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto p = params_[k].mutable_values();
            if (grads[k].size() != p.size()) {
                throw ShapeMismatch("AdamW: gradient/parameter size mismatch at index " + std::to_string(k));
            }
            auto& m = first_moment_[k];
            auto& v = second_moment_[k];
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double g = grads[k][i];
                p[i] -= o.learning_rate * o.weight_decay * p[i];
                m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g;
                v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g * g;
                const double m_hat = m[i] / bias1;
                const double v_hat = v[i] / bias2;
                p[i] -= o.learning_rate * m_hat / (std::sqrt(v_hat) + o.eps);
            }
        }
    }

    std::size_t step_count() const noexcept { return step_count_; }
    const AdamWOptions& options() const noexcept { return options_; }
    const std::vector<Tensor>& params() const noexcept { return params_; }
    const std::vector<std::vector<double>>& first_moments() const noexcept { return first_moment_; }
    const std::vector<std::vector<double>>& second_moments() const noexcept { return second_moment_; }

    /// Restores moments and step count (checkpoint resume).
    void restore(std::size_t step_count, std::vector<std::vector<double>> first,
                 std::vector<std::vector<double>> second) {
        if (first.size() != params_.size() || second.size() != params_.size()) {
            throw ShapeMismatch("AdamW restore: moment count does not match parameter count");
        }
        for (std::size_t k = 0; k < params_.size(); ++k) {
            if (first[k].size() != params_[k].numel() || second[k].size() != params_[k].numel()) {
                throw ShapeMismatch("AdamW restore: moment shape mismatch at index " + std::to_string(k));
            }
        }
        step_count_ = step_count;
        first_moment_ = std::move(first);
        second_moment_ = std::move(second);
    }

private:
    std::vector<Tensor> params_;
    AdamWOptions options_;
    std::vector<std::vector<double>> first_moment_;
    std::vector<std::vector<double>> second_moment_;
    std::size_t step_count_ = 0;
};

} // namespace amfd
