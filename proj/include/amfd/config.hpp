// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Experiment configuration: INI sections read with Boost.PropertyTree, a
// canonical text form with a stable key order, and `section.key=value`
// overrides. Precedence, lowest first: built-in defaults, AMFD_OUTPUT_ROOT,
// the config file, overrides.

#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "amfd/error.hpp"
#include "amfd/io.hpp"
#include "amfd/toynet/scene.hpp"
#include "amfd/toynet/teacher.hpp"
#include "amfd/toynet/train.hpp"

namespace amfd {

inline constexpr std::string_view kVersion = "0.1.0";
inline constexpr const char* kOutputRootEnv = "AMFD_OUTPUT_ROOT";

struct OutputSpec {
    std::string root = "amfd-out";
    std::string dataset;   // empty: <root>/dataset
    std::string run;       // empty: <root>/<plan>
    bool loss_csv = true;
    bool attention = false; // export attention grids after training
    std::size_t attention_scene = 0;

    friend bool operator==(const OutputSpec&, const OutputSpec&) = default;
};

struct ExperimentConfig {
    toynet::DatasetSpec dataset;
    toynet::TeacherSpec teacher;
    toynet::TrainConfig train;
    OutputSpec output;

    std::filesystem::path dataset_dir() const {
        return output.dataset.empty() ? std::filesystem::path(output.root) / "dataset" : std::filesystem::path(output.dataset);
    }

    std::filesystem::path run_dir() const {
        return output.run.empty() ? std::filesystem::path(output.root) / std::string(mode_name(train.mode))
                                  : std::filesystem::path(output.run);
    }

    /// Throws BadSpec on unusable values.
    void validate() const {
        dataset.validate();
        train.validate();
        if (teacher.projections == 0 || teacher.channels == 0 || teacher.strides.empty()) {
            throw BadSpec("teacher: projections, channels and strides must be non-empty");
        }
        if (teacher.channels != train.student.feature_channels) {
            throw BadSpec("teacher.channels must equal student.feature_channels");
        }
        if (!std::isfinite(teacher.gain) || teacher.gain < 0.0) throw BadSpec("teacher: gain must be >= 0");
        const auto& d = train.detection;
        for (double v : {d.anchor_scale, d.aspect}) {
            if (!std::isfinite(v) || v <= 0.0) throw BadSpec("detection: anchor_scale and aspect must be positive");
        }
        for (double v : {d.score_threshold, d.nms_iou}) {
            if (!(v >= 0.0 && v <= 1.0)) throw BadSpec("detection: thresholds must lie in [0, 1]");
        }
        if (output.root.empty()) throw BadSpec("output: root must not be empty");
    }

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail {

// Seeds are std::uint64_t and share the std::size_t overloads.
static_assert(std::is_same_v<std::uint64_t, std::size_t>);

inline std::string to_text(double v) { return io::format_double(v); }
inline std::string to_text(std::size_t v) { return std::to_string(v); }
inline std::string to_text(bool v) { return v ? "true" : "false"; }
inline std::string to_text(const std::string& v) { return v; }
inline std::string to_text(DistillMode m) { return std::string(mode_name(m)); }

inline std::string to_text(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

inline void from_text(std::string_view s, double& v) { v = io::parse_double(s, "number"); }

inline void from_text(std::string_view s, std::size_t& v) { v = static_cast<std::size_t>(io::parse_uint(s, "count")); }

inline void from_text(std::string_view s, bool& v) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") {
        v = true;
    } else if (s == "false" || s == "0" || s == "no" || s == "off") {
        v = false;
    } else {
        throw BadSpec("expected a boolean, got '" + std::string(s) + "'");
    }
}

inline void from_text(std::string_view s, std::string& v) { v = std::string(s); }

inline void from_text(std::string_view s, DistillMode& m) {
    const auto parsed = parse_mode(s);
    if (!parsed) throw BadSpec("plan must be amfd, traditional or none, got '" + std::string(s) + "'");
    m = *parsed;
}

inline void from_text(std::string_view s, std::vector<std::size_t>& v) {
    v.clear();
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const std::size_t end = std::min(s.find(',', pos), s.size());
        std::string_view item = s.substr(pos, end - pos);
        while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
        while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
        v.push_back(static_cast<std::size_t>(io::parse_uint(item, "list item")));
        pos = end + 1;
    }
}

/// Calls f(section, key, field) for every field, in canonical order.
template <class Config, class F>
void visit_fields(Config& c, F&& f) {
    auto& d = c.dataset;
    f("dataset", "height", d.height);
    f("dataset", "width", d.width);
    f("dataset", "train_scenes", d.train_scenes);
    f("dataset", "test_scenes", d.test_scenes);
    f("dataset", "min_objects", d.min_objects);
    f("dataset", "max_objects", d.max_objects);
    f("dataset", "min_height", d.min_height);
    f("dataset", "max_height", d.max_height);
    f("dataset", "aspect", d.aspect);
    f("dataset", "occlusion_prob", d.occlusion_prob);
    f("dataset", "max_distractors", d.max_distractors);
    f("dataset", "night_fraction", d.night_fraction);
    f("dataset", "day_rgb_contrast", d.day.rgb);
    f("dataset", "day_tir_contrast", d.day.tir);
    f("dataset", "night_rgb_contrast", d.night.rgb);
    f("dataset", "night_tir_contrast", d.night.tir);
    f("dataset", "noise_std", d.noise_std);
    f("dataset", "background_amplitude", d.background_amplitude);
    f("dataset", "seed", d.seed);
    auto& t = c.teacher;
    f("teacher", "projections", t.projections);
    f("teacher", "channels", t.channels);
    f("teacher", "strides", t.strides);
    f("teacher", "gain", t.gain);
    f("teacher", "seed", t.seed);
    auto& tr = c.train;
    f("train", "plan", tr.mode);
    f("train", "iterations", tr.iterations);
    f("train", "batch_size", tr.batch_size);
    f("train", "learning_rate", tr.learning_rate);
    f("train", "weight_decay", tr.weight_decay);
    f("train", "seed", tr.seed);
    f("train", "eval_every", tr.eval_every);
    auto& m = tr.mea;
    f("mea", "alpha_rgb", m.alpha_rgb);
    f("mea", "alpha_tir", m.alpha_tir);
    f("mea", "gamma_rgb", m.gamma_rgb);
    f("mea", "gamma_tir", m.gamma_tir);
    f("mea", "lambda_rgb", m.lambda_rgb);
    f("mea", "lambda_tir", m.lambda_tir);
    f("mea", "gc_reduction", m.gc_reduction);
    auto& s = tr.student;
    f("student", "fuse_hidden", s.fuse_hidden);
    f("student", "fuse_channels", s.fuse_channels);
    f("student", "stage1_channels", s.stage1_channels);
    f("student", "stage2_channels", s.stage2_channels);
    f("student", "feature_channels", s.feature_channels);
    auto& det = tr.detection;
    f("detection", "anchor_scale", det.anchor_scale);
    f("detection", "aspect", det.aspect);
    f("detection", "score_threshold", det.score_threshold);
    f("detection", "nms_iou", det.nms_iou);
    f("detection", "max_detections", det.max_detections);
    auto& o = c.output;
    f("output", "root", o.root);
    f("output", "dataset", o.dataset);
    f("output", "run", o.run);
    f("output", "loss_csv", o.loss_csv);
    f("output", "attention", o.attention);
    f("output", "attention_scene", o.attention_scene);
}

inline bool set_field(ExperimentConfig& c, std::string_view section, std::string_view key, std::string_view value) {
    bool found = false;
    visit_fields(c, [&](std::string_view s, std::string_view k, auto& field) {
        if (s != section || k != key) return;
        found = true;
        try {
            from_text(value, field);
        } catch (const Error& e) {
            throw BadSpec(std::string(section) + "." + std::string(key) + ": " + e.what());
        }
    });
    return found;
}

} // namespace detail

/// Canonical INI text; with `include_output` false only the sections that
/// determine results are emitted.
inline std::string canonical_text(const ExperimentConfig& c, bool include_output = true) {
    std::string out;
    std::string_view current;
    detail::visit_fields(c, [&](std::string_view section, std::string_view key, const auto& field) {
        if (!include_output && section == "output") return;
        if (section != current) {
            out += (out.empty() ? "[" : "\n[") + std::string(section) + "]\n";
            current = section;
        }
        out += std::string(key) + " = " + detail::to_text(field) + "\n";
    });
    return out;
}

inline std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Hash of everything but the output section, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
    const std::uint64_t h = fnv1a(canonical_text(c, false));
    std::string out(16, '0');
    static constexpr char kHex[] = "0123456789abcdef";
    for (int i = 0; i < 16; ++i) out[15 - i] = kHex[(h >> (4 * i)) & 0xf];
    return out;
}

/// Applies "section.key=value".
inline void apply_override(ExperimentConfig& c, std::string_view assignment) {
    const std::size_t eq = assignment.find('=');
    const std::size_t dot = assignment.find('.');
    if (eq == std::string_view::npos || dot == std::string_view::npos || dot > eq) {
        throw UsageError("override must look like section.key=value, got '" + std::string(assignment) + "'");
    }
    const auto section = assignment.substr(0, dot);
    const auto key = assignment.substr(dot + 1, eq - dot - 1);
    if (!detail::set_field(c, section, key, assignment.substr(eq + 1))) {
        throw UsageError("unknown config key '" + std::string(section) + "." + std::string(key) + "'");
    }
}

/// Merges INI text into `c`. Unknown sections or keys are usage errors.
inline void apply_ini(ExperimentConfig& c, const std::string& text, const std::string& origin) {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw BadSpec(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    for (const auto& [section, keys] : tree) {
        if (keys.empty()) throw BadSpec(origin + ": '" + section + "' is not inside a section");
        for (const auto& [key, value] : keys) {
            if (!detail::set_field(c, section, key, value.data())) {
                throw UsageError(origin + ": unknown config key '" + section + "." + key + "'");
            }
        }
    }
}

/// Defaults with the output root taken from AMFD_OUTPUT_ROOT when set.
inline ExperimentConfig default_config() {
    ExperimentConfig c;
    if (const char* root = std::getenv(kOutputRootEnv); root != nullptr && *root != '\0') c.output.root = root;
    return c;
}

inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "config") {
    ExperimentConfig c = default_config();
    apply_ini(c, text, origin);
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    ExperimentConfig c = default_config();
    if (!path.empty()) apply_ini(c, io::read_file(path), path.string());
    for (const auto& o : overrides) apply_override(c, o);
    c.validate();
    return c;
}

} // namespace amfd
