// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Distillation training loop: frozen teacher features, student forward,
// ℒ = ℒ_original + ℒ_MEA, backward and one AdamW update of the student and
// the context blocks per iteration. Batches are drawn from a stream seeded by
// (seed, step), so a resumed run needs no generator state.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "amfd/error.hpp"
#include "amfd/fusion.hpp"
#include "amfd/metrics.hpp"
#include "amfd/optim.hpp"
#include "amfd/rng.hpp"
#include "amfd/toynet/detection.hpp"
#include "amfd/toynet/scene.hpp"
#include "amfd/toynet/student.hpp"
#include "amfd/toynet/teacher.hpp"

namespace amfd::toynet {

struct TrainConfig {
    std::size_t iterations = 2000;
    std::size_t batch_size = 2;
    double learning_rate = 1e-4;
    double weight_decay = 1e-4;
    std::uint64_t seed = 1;
    DistillMode mode = DistillMode::Fusion;
    MEAConfig mea;
    std::size_t eval_every = 0; // 0: evaluate only at the end
    StudentSpec student;
    DetectionSpec detection;

    void validate() const {
        if (batch_size == 0) throw BadSpec("train: batch_size must be positive");
        for (double v : {learning_rate, weight_decay}) {
            if (!std::isfinite(v) || v < 0.0) throw BadSpec("train: learning rate and weight decay must be >= 0");
        }
        if (!mea.valid()) throw BadSpec("train: MEA weights must be finite and nonnegative");
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// A named value grid, the unit of checkpoint state.
struct NamedGrid {
    std::string name;
    Shape shape;
    std::vector<double> data;

    friend bool operator==(const NamedGrid&, const NamedGrid&) = default;
};

using TeacherCache = std::vector<TeacherFeatures>;

inline std::shared_ptr<const TeacherCache> teacher_cache(const Teacher& teacher, std::span<const Scene> scenes) {
    auto cache = std::make_shared<TeacherCache>();
    cache->reserve(scenes.size());
    for (const auto& s : scenes) cache->push_back(teacher.features(s));
    return cache;
}

/// Loss of one sample: differentiable total plus its breakdown.
struct SampleLoss {
    Tensor total;
    LossBreakdown breakdown;
};

inline SampleLoss sample_loss(const Scene& scene, const TeacherFeatures& teacher, const StudentModel& model,
                              const DistillPlan& plan, const DetectionSpec& detection) {
    const StudentOutput out = student_forward(scene, model);
    Tensor original = detection_loss(out.predictions, scene.annotations, out.features.strides, detection);
    DistillLoss distill;
    switch (plan.mode) {
    case DistillMode::Fusion:
        distill = fusion_distill_loss(teacher.rgb, teacher.tir, out.features, scene.annotations, plan);
        break;
    case DistillMode::Traditional:
        distill = traditional_distill_loss(teacher.fused, out.features, scene.annotations, plan);
        break;
    case DistillMode::None: break;
    }
    SampleLoss s;
    s.breakdown = distill.breakdown;
    total_loss(original.item(), s.breakdown);
    s.total = plan.mode == DistillMode::None ? original : add(original, distill.total);
    return s;
}

class Trainer {
public:
    Trainer(const TrainConfig& cfg, const Dataset& data, std::shared_ptr<const TeacherCache> teacher)
        : cfg_(cfg), data_(&data), teacher_(std::move(teacher)) {
        cfg.validate();
        if (data.train.empty()) throw BadSpec("train: the training split is empty");
        if (!teacher_ || teacher_->size() != data.train.size()) {
            throw BadSpec("train: teacher cache does not cover the training split");
        }
        model_ = StudentModel::init(cfg.student, cfg.seed);
        plan_ = DistillPlan::make(cfg.mode, cfg.mea, cfg.student.feature_channels, cfg.seed);
        std::vector<Tensor> params = model_.parameters();
        for (auto& p : plan_.parameters()) params.push_back(p);
        optimizer_ = AdamW(std::move(params), {.learning_rate = cfg.learning_rate, .weight_decay = cfg.weight_decay});
    }

    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    const TrainConfig& config() const { return cfg_; }
    const StudentModel& model() const { return model_; }
    const DistillPlan& plan() const { return plan_; }
    const std::vector<LossBreakdown>& history() const { return history_; }
    std::size_t completed() const { return history_.size(); }

    /// Training-split indices of the batch at a given step.
    std::vector<std::size_t> batch_indices(std::size_t step) const {
        Rng rng({cfg_.seed, static_cast<std::uint64_t>(step), 0xba7c4ULL});
        std::vector<std::size_t> idx(cfg_.batch_size);
        for (auto& i : idx) i = static_cast<std::size_t>(rng.index(data_->train.size()));
        return idx;
    }

    /// Batch-mean loss and breakdown at the current parameters; the tape is
    /// left recorded when grad mode is on.
    SampleLoss batch_loss(std::span<const std::size_t> indices) const {
        std::vector<LossBreakdown> parts;
        Tensor total;
        for (std::size_t k = 0; k < indices.size(); ++k) {
            const std::size_t i = indices[k];
            SampleLoss s = sample_loss(data_->train[i], (*teacher_)[i], model_, plan_, cfg_.detection);
            parts.push_back(s.breakdown);
            total = k == 0 ? s.total : add(total, s.total);
        }
        SampleLoss out;
        out.total = scale(total, 1.0 / static_cast<double>(indices.size()));
        out.breakdown = batch_average(parts);
        return out;
    }

    /// One iteration; returns the pre-update breakdown of the batch.
    LossBreakdown step() {
        const std::size_t step_index = history_.size();
        const std::vector<std::size_t> idx = batch_indices(step_index);
        optimizer_.zero_grad();
        SampleLoss loss;
        try {
            loss = batch_loss(idx);
        } catch (const NonFiniteValue& e) {
            Tape::current().clear();
            throw NonFiniteLoss(step_index, e.what());
        }
        if (!std::isfinite(loss.total.item()) || !std::isfinite(loss.breakdown.total)) {
            Tape::current().clear();
            throw NonFiniteLoss(step_index, "loss evaluated to a non-finite value");
        }
        loss.total.backward();
        for (const auto& p : optimizer_.params()) {
            if (!amfd::detail::all_finite(p.grad())) throw NonFiniteLoss(step_index, "non-finite gradient");
        }
        optimizer_.step();
        history_.push_back(loss.breakdown);
        return loss.breakdown;
    }

    /// Parameters, optimizer moments, step count and history.
    std::vector<NamedGrid> state() const {
        std::vector<NamedGrid> out;
        auto grid = [](const std::string& name, const Tensor& t) {
            return NamedGrid{name, t.shape(), {t.values().begin(), t.values().end()}};
        };
        for (const auto& [name, t] : model_.named_parameters()) out.push_back(grid("student." + name, t));
        const char* gc_names[] = {"context.w", "context.b", "reduce.w", "reduce.b", "expand.w", "expand.b"};
        for (std::size_t g = 0; g < plan_.gc.size(); ++g) {
            const auto ps = plan_.gc[g].parameters();
            for (std::size_t k = 0; k < ps.size(); ++k) {
                out.push_back(grid("gc" + std::to_string(g) + "." + gc_names[k], ps[k]));
            }
        }
        const auto& params = optimizer_.params();
        for (std::size_t k = 0; k < params.size(); ++k) {
            out.push_back({"adam.m." + std::to_string(k), params[k].shape(), optimizer_.first_moments()[k]});
            out.push_back({"adam.v." + std::to_string(k), params[k].shape(), optimizer_.second_moments()[k]});
        }
        out.push_back({"adam.step", {1}, {static_cast<double>(optimizer_.step_count())}});
        std::vector<double> hist;
        for (const auto& b : history_) {
            for (double v : b.fields()) hist.push_back(v);
        }
        out.push_back({"history", {history_.size(), LossBreakdown::kFieldCount}, std::move(hist)});
        return out;
    }

    void restore(const std::vector<NamedGrid>& grids) {
        const std::vector<NamedGrid> expected = state();
        if (grids.size() != expected.size()) {
            throw ShapeMismatch("checkpoint holds " + std::to_string(grids.size()) + " grids, expected " +
                                std::to_string(expected.size()));
        }
        for (std::size_t i = 0; i + 1 < grids.size(); ++i) {
            if (grids[i].name != expected[i].name || grids[i].shape != expected[i].shape ||
                grids[i].data.size() != shape_numel(grids[i].shape)) {
                throw ShapeMismatch("checkpoint grid '" + grids[i].name + "' does not match '" + expected[i].name +
                                    "' " + shape_str(expected[i].shape));
            }
        }
        const NamedGrid& hist = grids.back();
        if (hist.name != "history" || hist.shape.size() != 2 || hist.shape[1] != LossBreakdown::kFieldCount) {
            throw ShapeMismatch("checkpoint history grid is malformed");
        }
        std::vector<Tensor> targets = model_.parameters();
        for (auto& p : plan_.parameters()) targets.push_back(p);
        for (std::size_t k = 0; k < targets.size(); ++k) {
            const auto& src = grids[k].data;
            std::copy(src.begin(), src.end(), targets[k].mutable_values().begin());
        }
        const std::size_t n = targets.size();
        std::vector<std::vector<double>> m;
        std::vector<std::vector<double>> v;
        for (std::size_t k = 0; k < n; ++k) {
            m.push_back(grids[n + 2 * k].data);
            v.push_back(grids[n + 2 * k + 1].data);
        }
        const auto steps = static_cast<std::size_t>(grids[3 * n].data.at(0));
        optimizer_.restore(steps, std::move(m), std::move(v));
        history_.clear();
        for (std::size_t r = 0; r < hist.shape[0]; ++r) {
            history_.push_back(LossBreakdown::from_fields(
                std::span<const double>(hist.data).subspan(r * LossBreakdown::kFieldCount, LossBreakdown::kFieldCount)));
        }
    }

private:
    TrainConfig cfg_;
    const Dataset* data_;
    std::shared_ptr<const TeacherCache> teacher_;
    StudentModel model_;
    DistillPlan plan_;
    AdamW optimizer_;
    std::vector<LossBreakdown> history_;
};

/// Evaluation of one split, pooled and by lighting condition. Metrics with no
/// ground truth to score are NaN (pooled) or empty (day/night).
struct SplitEval {
    EvalReport all;
    std::optional<double> mr2_day;
    std::optional<double> mr2_night;
    std::size_t images = 0;
    std::size_t day_images = 0;
    std::size_t night_images = 0;
};

inline std::vector<Detection> detect(const Scene& scene, const StudentModel& model, const DetectionSpec& spec,
                                     std::size_t image_id) {
    NoGradGuard no_grad;
    const StudentOutput out = student_forward(scene, model);
    return decode(out.predictions, out.features.strides, spec, image_id);
}

inline std::vector<ImageEval> detect_all(std::span<const Scene> scenes, const StudentModel& model,
                                         const DetectionSpec& spec) {
    std::vector<ImageEval> out;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
        out.push_back({detect(scenes[i], model, spec, i), all_truth(scenes[i].annotations)});
    }
    return out;
}

inline SplitEval evaluate_split(std::span<const Scene> scenes, std::span<const ImageEval> images) {
    if (scenes.size() != images.size()) throw ShapeMismatch("evaluate_split: scenes and images differ in count");
    SplitEval r;
    r.images = images.size();
    try {
        r.all = evaluate(images);
    } catch (const NoGroundTruth&) {
        // No reasonable ground truth: the miss rate is undefined, AP may not be.
        const double nan = std::numeric_limits<double>::quiet_NaN();
        r.all.mr2 = nan;
        r.all.fppi = fppi_reference_points();
        r.all.miss_rate.fill(nan);
        try {
            const CocoResult coco = coco_map(images);
            r.all.ap_per_iou = coco.ap_per_iou;
            r.all.map_coco = coco.map;
            r.all.ap50 = coco.ap50;
            r.all.ap75 = coco.ap75;
        } catch (const NoGroundTruth&) {
            r.all.ap_per_iou.fill(nan);
            r.all.map_coco = r.all.ap50 = r.all.ap75 = nan;
        }
    }
    std::vector<ImageEval> day;
    std::vector<ImageEval> night;
    for (std::size_t i = 0; i < scenes.size(); ++i) (scenes[i].night ? night : day).push_back(images[i]);
    r.day_images = day.size();
    r.night_images = night.size();
    auto subset_mr = [](std::vector<ImageEval>& imgs) -> std::optional<double> {
        for (auto& im : imgs) im.truth.ignore = reasonable_ignore(im.truth.boxes);
        try {
            return log_average_miss_rate(imgs).mr2;
        } catch (const NoGroundTruth&) {
            return std::nullopt;
        }
    };
    r.mr2_day = subset_mr(day);
    r.mr2_night = subset_mr(night);
    return r;
}

inline SplitEval evaluate_student(std::span<const Scene> scenes, const StudentModel& model, const DetectionSpec& spec) {
    const std::vector<ImageEval> images = detect_all(scenes, model, spec);
    return evaluate_split(scenes, images);
}

struct RunResult {
    StudentModel model;
    DistillPlan plan;
    std::vector<LossBreakdown> history;
    std::vector<std::pair<std::size_t, SplitEval>> periodic;
    SplitEval report;
};

inline RunResult run_distillation(const TrainConfig& cfg, const Dataset& data,
                                  std::shared_ptr<const TeacherCache> teacher) {
    Trainer trainer(cfg, data, std::move(teacher));
    RunResult r;
    for (std::size_t it = 0; it < cfg.iterations; ++it) {
        trainer.step();
        if (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0 && it + 1 < cfg.iterations) {
            r.periodic.emplace_back(it + 1, evaluate_student(data.test, trainer.model(), cfg.detection));
        }
    }
    r.model = trainer.model().clone();
    r.plan = trainer.plan();
    r.history = trainer.history();
    r.report = evaluate_student(data.test, r.model, cfg.detection);
    return r;
}

inline RunResult run_distillation(const TrainConfig& cfg, const Dataset& data, const Teacher& teacher) {
    return run_distillation(cfg, data, teacher_cache(teacher, data.train));
}

} // namespace amfd::toynet
