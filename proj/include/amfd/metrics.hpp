// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Pedestrian-detection evaluation: greedy score-ordered matching, the
// log-average miss rate over FPPI in [1e-2, 1] under the "reasonable"
// filter, and COCO-style 101-point average precision.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <vector>

#include "amfd/boxes.hpp"
#include "amfd/error.hpp"

namespace amfd {

struct Detection {
    std::size_t image_id = 0;
    Box box;
    double score = 0.0;

    friend bool operator==(const Detection&, const Detection&) = default;
};

/// Ground truth of one image with its ignore flags.
struct ImageTruth {
    std::vector<GtBox> boxes;
    std::vector<bool> ignore; // same length as boxes
};

/// Detections and ground truth of one image.
struct ImageEval {
    std::vector<Detection> detections;
    ImageTruth truth;
};

inline constexpr double kReasonableMinHeight = 55.0;
inline constexpr double kMissRateFloor = 1e-10;
inline constexpr std::size_t kFppiSamples = 9;

/// Ignore flags of the reasonable setting: evaluated only when at least 55
/// pixels tall and not occluded.
inline std::vector<bool> reasonable_ignore(std::span<const GtBox> gts) {
    std::vector<bool> ignore;
    ignore.reserve(gts.size());
    for (const auto& g : gts) {
        ignore.push_back(!(g.height() >= kReasonableMinHeight && g.occlusion == Occlusion::None));
    }
    return ignore;
}

struct FilterResult {
    std::vector<GtBox> evaluated;
    std::vector<GtBox> ignored;
};

inline FilterResult reasonable_filter(std::span<const GtBox> gts) {
    FilterResult out;
    const std::vector<bool> ignore = reasonable_ignore(gts);
    for (std::size_t i = 0; i < gts.size(); ++i) (ignore[i] ? out.ignored : out.evaluated).push_back(gts[i]);
    return out;
}

inline ImageTruth reasonable_truth(std::span<const GtBox> gts) {
    return {{gts.begin(), gts.end()}, reasonable_ignore(gts)};
}

/// Every box evaluated (COCO protocol).
inline ImageTruth all_truth(std::span<const GtBox> gts) {
    return {{gts.begin(), gts.end()}, std::vector<bool>(gts.size(), false)};
}

enum class MatchLabel { TruePositive, FalsePositive, Ignored };

struct MatchResult {
    std::vector<MatchLabel> labels;   // per detection, input order
    std::vector<long> matched_gt;     // per detection, -1 when unmatched
    std::vector<bool> gt_matched;     // per evaluated gt
};

/// Detection indices by descending score; ties keep input order.
inline std::vector<std::size_t> score_order(std::span<const Detection> dets) {
    std::vector<std::size_t> order(dets.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    return order;
}

/// Greedy matching of one image. Each detection, best score first, takes the
/// unmatched evaluated gt of highest IoU ≥ threshold; failing that the
/// ignored gt of highest IoU ≥ threshold (ignored gts absorb any number of
/// detections); otherwise it is a false positive. Ties go to the lower index.
inline MatchResult match_detections(std::span<const Detection> dets, const ImageTruth& truth, double iou_threshold) {
    const std::size_t ng = truth.boxes.size();
    MatchResult r;
    r.labels.assign(dets.size(), MatchLabel::FalsePositive);
    r.matched_gt.assign(dets.size(), -1);
    r.gt_matched.assign(ng, false);
    for (std::size_t d : score_order(dets)) {
        long best = -1;
        double best_iou = iou_threshold;
        for (int pass = 0; pass < 2 && best < 0; ++pass) {
            const bool want_ignored = pass == 1;
            for (std::size_t g = 0; g < ng; ++g) {
                if (truth.ignore[g] != want_ignored) continue;
                if (!want_ignored && r.gt_matched[g]) continue;
                const double v = iou(dets[d].box, truth.boxes[g].box);
                if (v >= best_iou && (best < 0 || v > best_iou)) {
                    best = static_cast<long>(g);
                    best_iou = v;
                }
            }
        }
        if (best >= 0) {
            const auto g = static_cast<std::size_t>(best);
            r.matched_gt[d] = best;
            if (truth.ignore[g]) {
                r.labels[d] = MatchLabel::Ignored;
            } else {
                r.labels[d] = MatchLabel::TruePositive;
                r.gt_matched[g] = true;
            }
        }
    }
    return r;
}

struct EvalCounts {
    std::size_t gt = 0;      // evaluated ground truth
    std::size_t tp = 0;
    std::size_t fp = 0;
    std::size_t ignored = 0; // ignored ground truth

    friend bool operator==(const EvalCounts&, const EvalCounts&) = default;
};

struct MissRateCurve {
    double mr2 = 1.0;
    std::array<double, kFppiSamples> fppi{};      // reference points
    std::array<double, kFppiSamples> miss_rate{}; // sampled staircase
    std::vector<double> curve_fppi;               // one point per distinct score threshold
    std::vector<double> curve_miss_rate;
    EvalCounts counts;
};

inline std::array<double, kFppiSamples> fppi_reference_points() {
    std::array<double, kFppiSamples> ref{};
    for (std::size_t i = 0; i < kFppiSamples; ++i) {
        ref[i] = std::pow(10.0, -2.0 + 2.0 * static_cast<double>(i) / static_cast<double>(kFppiSamples - 1));
    }
    return ref;
}

namespace detail {

struct ScoredLabel {
    double score;
    bool tp;
};

// Matched non-ignored detections of every image, by descending score; ties
// keep image order then detection order.
inline std::vector<ScoredLabel> pooled_labels(std::span<const ImageEval> images, double iou_threshold,
                                              EvalCounts& counts) {
    std::vector<ScoredLabel> all;
    for (const auto& im : images) {
        if (im.truth.ignore.size() != im.truth.boxes.size()) {
            throw ShapeMismatch("ImageTruth: ignore flags and boxes differ in length");
        }
        const MatchResult m = match_detections(im.detections, im.truth, iou_threshold);
        for (bool ig : im.truth.ignore) (ig ? counts.ignored : counts.gt) += 1;
        for (std::size_t d : score_order(im.detections)) {
            if (m.labels[d] == MatchLabel::Ignored) continue;
            const bool tp = m.labels[d] == MatchLabel::TruePositive;
            (tp ? counts.tp : counts.fp) += 1;
            all.push_back({im.detections[d].score, tp});
        }
    }
    std::stable_sort(all.begin(), all.end(), [](const ScoredLabel& a, const ScoredLabel& b) { return a.score > b.score; });
    return all;
}

} // namespace detail

/// MR⁻²: geometric mean of the miss rate sampled at nine log-spaced FPPI
/// points. Each sample takes the lowest miss rate reachable at an FPPI not
/// above it (1 when none), floored at 1e-10 before the log.
inline MissRateCurve log_average_miss_rate(std::span<const ImageEval> images, double iou_threshold = 0.5) {
    if (images.empty()) {
        throw NoGroundTruth("log_average_miss_rate: no images");
    }
    MissRateCurve out;
    const std::vector<detail::ScoredLabel> dets = detail::pooled_labels(images, iou_threshold, out.counts);
    if (out.counts.gt == 0) {
        throw NoGroundTruth("log_average_miss_rate: no evaluated ground truth");
    }
    const double n_img = static_cast<double>(images.size());
    const double n_gt = static_cast<double>(out.counts.gt);
    // Threshold above every score: nothing detected.
    out.curve_fppi.push_back(0.0);
    out.curve_miss_rate.push_back(1.0);
    std::size_t tp = 0;
    std::size_t fp = 0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        (dets[i].tp ? tp : fp) += 1;
        if (i + 1 < dets.size() && dets[i + 1].score == dets[i].score) continue;
        out.curve_fppi.push_back(static_cast<double>(fp) / n_img);
        out.curve_miss_rate.push_back(1.0 - static_cast<double>(tp) / n_gt);
    }
    out.fppi = fppi_reference_points();
    double log_sum = 0.0;
    for (std::size_t k = 0; k < kFppiSamples; ++k) {
        double best = 1.0;
        for (std::size_t i = 0; i < out.curve_fppi.size(); ++i) {
            if (out.curve_fppi[i] <= out.fppi[k]) best = std::min(best, out.curve_miss_rate[i]);
        }
        out.miss_rate[k] = best;
        log_sum += std::log(std::max(best, kMissRateFloor));
    }
    out.mr2 = std::exp(log_sum / static_cast<double>(kFppiSamples));
    return out;
}

inline constexpr std::size_t kCocoIous = 10;
inline constexpr std::size_t kRecallPoints = 101;

inline double coco_iou_threshold(std::size_t i) { return 0.5 + 0.05 * static_cast<double>(i); }

/// 101-point interpolated AP at one IoU threshold; ignore flags honoured.
inline double average_precision(std::span<const ImageEval> images, double iou_threshold) {
    EvalCounts counts;
    const std::vector<detail::ScoredLabel> dets = detail::pooled_labels(images, iou_threshold, counts);
    if (counts.gt == 0) {
        throw NoGroundTruth("average_precision: no ground truth");
    }
    const double n_gt = static_cast<double>(counts.gt);
    std::vector<double> precision(dets.size());
    std::vector<double> recall(dets.size());
    std::size_t tp = 0;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        if (dets[i].tp) ++tp;
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / n_gt;
    }
    for (std::size_t i = dets.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double total = 0.0;
    for (std::size_t r = 0; r < kRecallPoints; ++r) {
        const double level = static_cast<double>(r) / static_cast<double>(kRecallPoints - 1);
        const auto it = std::lower_bound(recall.begin(), recall.end(), level);
        if (it != recall.end()) total += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    return total / static_cast<double>(kRecallPoints);
}

struct CocoResult {
    double map = 0.0;
    double ap50 = 0.0;
    double ap75 = 0.0;
    std::array<double, kCocoIous> ap_per_iou{};
};

/// COCO-style AP over IoU 0.50:0.05:0.95 with every gt evaluated.
inline CocoResult coco_map(std::span<const ImageEval> images) {
    std::vector<ImageEval> all = {images.begin(), images.end()};
    for (auto& im : all) im.truth.ignore.assign(im.truth.boxes.size(), false);
    CocoResult out;
    double total = 0.0;
    for (std::size_t i = 0; i < kCocoIous; ++i) {
        out.ap_per_iou[i] = average_precision(all, coco_iou_threshold(i));
        total += out.ap_per_iou[i];
    }
    out.map = total / static_cast<double>(kCocoIous);
    out.ap50 = out.ap_per_iou[0];
    out.ap75 = out.ap_per_iou[5];
    return out;
}

struct EvalReport {
    double mr2 = 1.0;
    std::array<double, kFppiSamples> fppi{};
    std::array<double, kFppiSamples> miss_rate{};
    std::array<double, kCocoIous> ap_per_iou{};
    double map_coco = 0.0;
    double ap50 = 0.0;
    double ap75 = 0.0;
    EvalCounts counts;
};

/// Both protocols over the same images; gts are filtered here, so the input
/// ignore flags are overwritten.
inline EvalReport evaluate(std::span<const ImageEval> images) {
    std::vector<ImageEval> reasonable = {images.begin(), images.end()};
    for (auto& im : reasonable) im.truth.ignore = reasonable_ignore(im.truth.boxes);
    const MissRateCurve mr = log_average_miss_rate(reasonable);
    const CocoResult coco = coco_map(images);
    EvalReport r;
    r.mr2 = mr.mr2;
    r.fppi = mr.fppi;
    r.miss_rate = mr.miss_rate;
    r.counts = mr.counts;
    r.ap_per_iou = coco.ap_per_iou;
    r.map_coco = coco.map;
    r.ap50 = coco.ap50;
    r.ap75 = coco.ap75;
    return r;
}

} // namespace amfd
