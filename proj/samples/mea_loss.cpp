// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Distillation loss between two small feature maps, and its gradient.

#include <cstdio>
#include <vector>

#include "amfd/amfd.hpp"

using namespace amfd;

int main() {
    Rng rng(7);
    auto random_map = [&](bool requires_grad) {
        std::vector<double> v(4 * 8 * 8);
        for (double& x : v) x = rng.uniform(-1.0, 1.0);
        return Tensor::build({4, 8, 8}, std::move(v), requires_grad);
    };
    const Tensor teacher_rgb = random_map(false);
    const Tensor teacher_tir = random_map(false);
    const Tensor student = random_map(true);

    const GtBox boxes[] = {{Box{4, 4, 14, 28}, "person", Occlusion::None},
                           {Box{10, 8, 20, 30}, "person", Occlusion::Light}};
    const FeaturePyramid rgb{{teacher_rgb}, {4.0}};
    const FeaturePyramid tir{{teacher_tir}, {4.0}};
    const FeaturePyramid fused{{student}, {4.0}};

    const DistillPlan plan = DistillPlan::make(DistillMode::Fusion, MEAConfig::one_stage(), 4, 1);
    const DistillLoss loss = fusion_distill_loss(rgb, tir, fused, boxes, plan);
    loss.total.backward();

    const auto names = LossBreakdown::field_names();
    const auto values = loss.breakdown.fields();
    for (std::size_t i = 0; i < names.size(); ++i) std::printf("%-11s %.6e\n", names[i], values[i]);

    double norm = 0.0;
    for (double g : student.grad()) norm += g * g;
    std::printf("|d loss / d student|^2 = %.6e\n", norm);
    return 0;
}
