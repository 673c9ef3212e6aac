// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Trains a student with and without fusion distillation on a small synthetic
// dataset held in memory, then prints both test reports.

#include <cstdio>

#include "amfd/amfd.hpp"

using namespace amfd;

int main() {
    toynet::DatasetSpec data_spec;
    data_spec.height = 64;
    data_spec.width = 32;
    data_spec.min_height = 24;
    data_spec.max_height = 62;
    data_spec.train_scenes = 12;
    data_spec.test_scenes = 12;
    data_spec.seed = 3;
    const toynet::Dataset data = toynet::generate_dataset(data_spec);

    const toynet::Teacher teacher(toynet::TeacherSpec{});
    const auto cache = toynet::teacher_cache(teacher, data.train);

    for (DistillMode mode : {DistillMode::None, DistillMode::Fusion}) {
        toynet::TrainConfig cfg;
        cfg.mode = mode;
        cfg.iterations = 150;
        cfg.learning_rate = 1e-3;
        cfg.seed = 7;
        cfg.mea = MEAConfig::one_stage();
        const toynet::RunResult r = toynet::run_distillation(cfg, data, cache);
        const LossBreakdown& last = r.history.back();
        std::printf("%-7s final loss %.4f (detection %.4f)  mAP %.4f  MR-2 %.4f\n",
                    std::string(mode_name(mode)).c_str(), last.total, last.original, r.report.all.map_coco,
                    r.report.all.mr2);
    }
    return 0;
}
