// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Dense single-anchor detection on the student pyramid. A box is assigned to
// the level whose anchor height (anchor_scale × stride) is nearest in log
// scale, at the cell containing its centre. Offsets: centre shift in cell
// units from the cell centre, log width and height relative to the anchor.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "amfd/boxes.hpp"
#include "amfd/metrics.hpp"
#include "amfd/tensor.hpp"
#include "amfd/toynet/student.hpp"

namespace amfd::toynet {

struct DetectionSpec {
    double anchor_scale = 8.0;
    double aspect = 0.41;
    double score_threshold = 0.05;
    double nms_iou = 0.5;
    std::size_t max_detections = 100;

    friend bool operator==(const DetectionSpec&, const DetectionSpec&) = default;
};

struct LevelTargets {
    std::size_t height = 0;
    std::size_t width = 0;
    double stride = 1.0;
    std::vector<double> objectness;                 // H·W, 1 at positive cells
    std::vector<std::array<double, 4>> offsets;     // H·W, zero off positives
    std::size_t positives = 0;
};

namespace detail {

inline std::size_t assign_level(double box_height, std::span<const double> strides, double anchor_scale) {
    std::size_t best = 0;
    double best_gap = 0.0;
    for (std::size_t l = 0; l < strides.size(); ++l) {
        const double gap = std::abs(std::log(box_height / (anchor_scale * strides[l])));
        if (l == 0 || gap < best_gap) {
            best = l;
            best_gap = gap;
        }
    }
    return best;
}

} // namespace detail

/// Targets per level. When two boxes claim one cell the taller keeps it.
inline std::vector<LevelTargets> assign_targets(std::span<const GtBox> boxes, std::span<const Shape> level_shapes,
                                                std::span<const double> strides, const DetectionSpec& spec) {
    if (level_shapes.size() != strides.size()) {
        throw ShapeMismatch("assign_targets: levels and strides differ in count");
    }
    std::vector<LevelTargets> out(level_shapes.size());
    std::vector<std::vector<double>> owner(level_shapes.size());
    for (std::size_t l = 0; l < out.size(); ++l) {
        out[l].height = level_shapes[l].at(1);
        out[l].width = level_shapes[l].at(2);
        out[l].stride = strides[l];
        out[l].objectness.assign(out[l].height * out[l].width, 0.0);
        out[l].offsets.assign(out[l].height * out[l].width, {0, 0, 0, 0});
        owner[l].assign(out[l].height * out[l].width, 0.0);
    }
    for (const auto& gt : boxes) {
        if (!gt.box.valid()) continue;
        const std::size_t l = detail::assign_level(gt.height(), strides, spec.anchor_scale);
        LevelTargets& t = out[l];
        const double s = t.stride;
        const double cx = 0.5 * (gt.box.x1 + gt.box.x2) / s;
        const double cy = 0.5 * (gt.box.y1 + gt.box.y2) / s;
        const auto j = static_cast<std::size_t>(std::clamp(std::floor(cx), 0.0, static_cast<double>(t.width - 1)));
        const auto i = static_cast<std::size_t>(std::clamp(std::floor(cy), 0.0, static_cast<double>(t.height - 1)));
        const std::size_t cell = i * t.width + j;
        if (owner[l][cell] >= gt.height()) continue;
        if (owner[l][cell] == 0.0) ++t.positives;
        owner[l][cell] = gt.height();
        const double anchor_h = spec.anchor_scale * s;
        const double anchor_w = spec.aspect * anchor_h;
        t.objectness[cell] = 1.0;
        t.offsets[cell] = {cx - (static_cast<double>(j) + 0.5), cy - (static_cast<double>(i) + 0.5),
                           std::log(gt.box.width() / anchor_w), std::log(gt.height() / anchor_h)};
    }
    return out;
}

/// Σ BCE(objectness) over every cell plus Σ L1(offsets) over positive cells,
/// divided by max(1, number of positives).
inline Tensor detection_loss(std::span<const Tensor> predictions, std::span<const GtBox> boxes,
                             std::span<const double> strides, const DetectionSpec& spec) {
    std::vector<Shape> shapes;
    for (const auto& p : predictions) {
        if (p.rank() != 3 || p.dim(0) != kHeadOutputs) {
            throw ShapeMismatch("detection_loss: prediction " + shape_str(p.shape()));
        }
        shapes.push_back(p.shape());
    }
    const std::vector<LevelTargets> targets = assign_targets(boxes, shapes, strides, spec);
    std::size_t positives = 0;
    for (const auto& t : targets) positives += t.positives;
    Tensor total;
    for (std::size_t l = 0; l < predictions.size(); ++l) {
        const LevelTargets& t = targets[l];
        const std::size_t hw = t.height * t.width;
        const Tensor logits = slice_channels(predictions[l], 0, 1);
        Tensor level = sum(bce_with_logits(logits, Tensor::build({1, t.height, t.width}, t.objectness)));
        if (t.positives > 0) {
            std::vector<double> target(4 * hw, 0.0);
            std::vector<double> mask(4 * hw, 0.0);
            for (std::size_t c = 0; c < hw; ++c) {
                if (t.objectness[c] == 0.0) continue;
                for (std::size_t k = 0; k < 4; ++k) {
                    target[k * hw + c] = t.offsets[c][k];
                    mask[k * hw + c] = 1.0;
                }
            }
            const Tensor offsets = slice_channels(predictions[l], 1, 4);
            const Tensor tgt = Tensor::build({4, t.height, t.width}, std::move(target));
            const Tensor msk = Tensor::build({4, t.height, t.width}, std::move(mask));
            level = add(level, sum(mul(msk, abs(sub(offsets, tgt)))));
        }
        total = l == 0 ? level : add(total, level);
    }
    return scale(total, 1.0 / static_cast<double>(std::max<std::size_t>(1, positives)));
}

/// Greedy IoU suppression over score-sorted detections.
inline std::vector<Detection> nms(std::vector<Detection> dets, double iou_threshold, std::size_t max_keep) {
    std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    std::vector<Detection> keep;
    for (const auto& d : dets) {
        if (keep.size() >= max_keep) break;
        bool suppressed = false;
        for (const auto& k : keep) {
            if (iou(d.box, k.box) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) keep.push_back(d);
    }
    return keep;
}

/// Cells scoring above the threshold, decoded to image boxes, then NMS.
inline std::vector<Detection> decode(std::span<const Tensor> predictions, std::span<const double> strides,
                                     const DetectionSpec& spec, std::size_t image_id) {
    std::vector<Detection> dets;
    for (std::size_t l = 0; l < predictions.size(); ++l) {
        const Tensor& p = predictions[l];
        const std::size_t h = p.dim(1);
        const std::size_t w = p.dim(2);
        const std::size_t hw = h * w;
        const auto v = p.values();
        const double s = strides[l];
        const double anchor_h = spec.anchor_scale * s;
        const double anchor_w = spec.aspect * anchor_h;
        for (std::size_t i = 0; i < h; ++i) {
            for (std::size_t j = 0; j < w; ++j) {
                const std::size_t c = i * w + j;
                const double score = sigmoid(v[c]);
                if (!(score > spec.score_threshold)) continue;
                const double cx = (static_cast<double>(j) + 0.5 + v[hw + c]) * s;
                const double cy = (static_cast<double>(i) + 0.5 + v[2 * hw + c]) * s;
                const double bw = anchor_w * std::exp(std::clamp(v[3 * hw + c], -4.0, 4.0));
                const double bh = anchor_h * std::exp(std::clamp(v[4 * hw + c], -4.0, 4.0));
                dets.push_back({image_id, Box{cx - 0.5 * bw, cy - 0.5 * bh, cx + 0.5 * bw, cy + 0.5 * bh}, score});
            }
        }
    }
    return nms(std::move(dets), spec.nms_iou, spec.max_detections);
}

} // namespace amfd::toynet
