// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <string_view>

namespace amfd {

/// Axis-aligned box in image pixels, corners (x1,y1) top-left, (x2,y2) bottom-right.
struct Box {
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;

    double width() const noexcept { return x2 - x1; }
    double height() const noexcept { return y2 - y1; }
    double area() const noexcept { return std::max(0.0, width()) * std::max(0.0, height()); }
    bool valid() const noexcept { return x2 > x1 && y2 > y1; }

    friend bool operator==(const Box&, const Box&) = default;
};

inline double intersection_area(const Box& a, const Box& b) {
    const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}

inline double iou(const Box& a, const Box& b) {
    const double inter = intersection_area(a, b);
    if (inter <= 0.0) {
        return 0.0;
    }
    return inter / (a.area() + b.area() - inter);
}

/// Occlusion buckets: NO (0%), LO (<30%), MO (30–60%), HO (≥60%).
enum class Occlusion { None, Light, Moderate, Heavy };

inline Occlusion occlusion_from_fraction(double fraction) {
    if (fraction <= 0.0) return Occlusion::None;
    if (fraction < 0.3) return Occlusion::Light;
    if (fraction < 0.6) return Occlusion::Moderate;
    return Occlusion::Heavy;
}

inline std::string_view occlusion_label(Occlusion o) {
    switch (o) {
    case Occlusion::None: return "NO";
    case Occlusion::Light: return "LO";
    case Occlusion::Moderate: return "MO";
    case Occlusion::Heavy: return "HO";
    }
    return "NO";
}

inline std::optional<Occlusion> parse_occlusion(std::string_view label) {
    if (label == "NO") return Occlusion::None;
    if (label == "LO") return Occlusion::Light;
    if (label == "MO") return Occlusion::Moderate;
    if (label == "HO") return Occlusion::Heavy;
    return std::nullopt;
}

struct GtBox {
    Box box;
    std::string category = "person";
    Occlusion occlusion = Occlusion::None;

    double height() const noexcept { return box.height(); }

    friend bool operator==(const GtBox&, const GtBox&) = default;
};

} // namespace amfd
