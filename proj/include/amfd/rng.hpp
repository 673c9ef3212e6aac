// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>
#include <vector>

namespace amfd {

/// mt19937_64 with fixed engine-to-real conversions. The standard
/// distributions are implementation-defined; these are not, so seeded
/// datasets and initializations are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Seeds from several words (e.g. base seed, step, stream tag).
    Rng(std::initializer_list<std::uint64_t> words) {
        std::vector<std::uint32_t> parts;
        for (std::uint64_t w : words) {
            parts.push_back(static_cast<std::uint32_t>(w & 0xffffffffu));
            parts.push_back(static_cast<std::uint32_t>(w >> 32));
        }
        std::seed_seq seq(parts.begin(), parts.end());
        engine_.seed(seq);
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t index(std::uint64_t n) {
        const auto i = static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
        return i < n ? i : n - 1;
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Standard normal via Box–Muller.
    double normal() {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::mt19937_64 engine_;
};

} // namespace amfd
