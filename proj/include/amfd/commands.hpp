// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Batch commands behind the amfd tool. Each takes a validated
// ExperimentConfig and writes its artifacts under the configured output
// directories; see docs/formats.md for the file layouts.

#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "amfd/attention.hpp"
#include "amfd/config.hpp"
#include "amfd/error.hpp"
#include "amfd/io.hpp"
#include "amfd/toynet/train.hpp"

namespace amfd::cmd {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

inline constexpr std::string_view kManifestFormat = "amfd-manifest 1";

// ---- serialization ----

inline json report_json(const toynet::SplitEval& r) {
    auto optional = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    return {
        {"images", r.images},
        {"day_images", r.day_images},
        {"night_images", r.night_images},
        {"mr2", r.all.mr2},
        {"mr2_day", optional(r.mr2_day)},
        {"mr2_night", optional(r.mr2_night)},
        {"fppi", r.all.fppi},
        {"miss_rate", r.all.miss_rate},
        {"ap_per_iou", r.all.ap_per_iou},
        {"map_coco", r.all.map_coco},
        {"ap50", r.all.ap50},
        {"ap75", r.all.ap75},
        {"counts",
         {{"gt", r.all.counts.gt}, {"tp", r.all.counts.tp}, {"fp", r.all.counts.fp}, {"ignored", r.all.counts.ignored}}},
    };
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

inline std::string teacher_hash(const toynet::Teacher& teacher) {
    const auto bytes = teacher.state_bytes();
    const std::uint64_t h = fnv1a({reinterpret_cast<const char*>(bytes.data()), bytes.size()});
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

struct Manifest {
    ExperimentConfig config;
    std::vector<LossBreakdown> history;
    json evaluations = json::array();
    json report = nullptr;
    std::string status = "complete";
    std::string teacher_before;
    std::string teacher_after;

    json to_json() const {
        json hist = json::array();
        for (const auto& b : history) hist.push_back(b.fields());
        return {
            {"format", kManifestFormat},
            {"code_version", kVersion},
            {"config_hash", config_hash(config)},
            {"seed", config.train.seed},
            {"plan", mode_name(config.train.mode)},
            {"config", canonical_text(config)},
            {"status", status},
            {"completed_steps", history.size()},
            {"target_steps", config.train.iterations},
            {"teacher_state", {{"before", teacher_before}, {"after", teacher_after}}},
            {"history_fields", LossBreakdown::field_names()},
            {"history", std::move(hist)},
            {"evaluations", evaluations},
            {"report", report},
        };
    }
};

/// Reads a manifest; the embedded config must hash to the stored hash.
inline json read_manifest(const fs::path& path) {
    json j;
    try {
        j = json::parse(io::read_file(path));
    } catch (const json::exception& e) {
        throw IoError(path.string() + ": " + e.what());
    }
    if (!j.is_object() || j.value("format", "") != kManifestFormat) throw IoError(path.string() + ": not a run manifest");
    const ExperimentConfig c = parse_config(j.at("config").get<std::string>(), path.string());
    if (config_hash(c) != j.at("config_hash").get<std::string>()) {
        throw IoError(path.string() + ": stored config does not match its hash");
    }
    return j;
}

inline ExperimentConfig manifest_config(const json& manifest) {
    return parse_config(manifest.at("config").get<std::string>(), "manifest");
}

// ---- gen-data ----

inline std::string dataset_stamp(const ExperimentConfig& c) {
    std::string out = "[dataset]\n";
    detail::visit_fields(c, [&](std::string_view section, std::string_view key, const auto& field) {
        if (section == "dataset") out += std::string(key) + " = " + detail::to_text(field) + "\n";
    });
    return out;
}

/// Generates the dataset and writes it to the dataset directory.
inline fs::path gen_data(const ExperimentConfig& c) {
    const toynet::Dataset data = toynet::generate_dataset(c.dataset);
    const fs::path dir = c.dataset_dir();
    io::write_dataset(dir, data);
    io::write_atomic(dir / "spec.ini", dataset_stamp(c));
    return dir;
}

/// Reads the dataset directory and checks it was generated from this config.
inline toynet::Dataset load_dataset(const ExperimentConfig& c) {
    const fs::path dir = c.dataset_dir();
    if (!fs::exists(dir / "spec.ini")) throw IoError("no dataset at " + dir.string() + "; run gen-data first");
    if (io::read_file(dir / "spec.ini") != dataset_stamp(c)) {
        throw BadSpec("dataset at " + dir.string() + " was generated from a different [dataset] section");
    }
    toynet::Dataset data = io::read_dataset(dir);
    data.spec = c.dataset;
    return data;
}

// ---- train ----

struct TrainOptions {
    bool resume = false;
    std::optional<std::size_t> until; // stop after this many completed steps
};

struct TrainOutcome {
    Manifest manifest;
    std::optional<toynet::SplitEval> report;
    fs::path dir;
};

inline void write_run(const fs::path& dir, const Manifest& m, const toynet::Trainer& trainer, double seconds,
                      std::size_t steps_this_call) {
    io::write_checkpoint(dir / "checkpoint.bin", trainer.state());
    if (m.config.output.loss_csv) io::write_atomic(dir / "loss.csv", io::loss_csv(m.history));
    if (!m.report.is_null()) io::write_atomic(dir / "report.json", dump(m.report));
    io::write_atomic(dir / "timing.json", dump({{"seconds", seconds}, {"steps", steps_this_call}}));
    io::write_atomic(dir / "manifest.json", dump(m.to_json()));
}

inline std::vector<fs::path> export_attention(const ExperimentConfig& c, const toynet::StudentModel& model,
                                              const toynet::Dataset& data, std::size_t scene_id, const fs::path& dir);

inline TrainOutcome train(const ExperimentConfig& c, const toynet::Dataset& data,
                          std::shared_ptr<const toynet::TeacherCache> cache, const toynet::Teacher& teacher,
                          const TrainOptions& opt = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    TrainOutcome out;
    out.dir = c.run_dir();
    Manifest& m = out.manifest;
    m.config = c;
    m.teacher_before = teacher_hash(teacher);
    toynet::Trainer trainer(c.train, data, std::move(cache));
    if (opt.resume) {
        const json previous = read_manifest(out.dir / "manifest.json");
        if (previous.at("config_hash").get<std::string>() != config_hash(c)) {
            throw BadSpec("cannot resume " + out.dir.string() + ": it was trained with a different config");
        }
        trainer.restore(io::read_checkpoint(out.dir / "checkpoint.bin"));
        m.evaluations = previous.at("evaluations");
    }
    const std::size_t start = trainer.completed();
    const std::size_t target = std::min(c.train.iterations, opt.until.value_or(c.train.iterations));
    try {
        while (trainer.completed() < target) {
            trainer.step();
            const std::size_t done = trainer.completed();
            if (c.train.eval_every > 0 && done % c.train.eval_every == 0 && done < c.train.iterations) {
                m.evaluations.push_back(
                    {{"step", done},
                     {"report", report_json(toynet::evaluate_student(data.test, trainer.model(), c.train.detection))}});
            }
        }
    } catch (const NonFiniteLoss&) {
        m.status = "diverged";
        m.history = trainer.history();
        m.teacher_after = teacher_hash(teacher);
        write_run(out.dir, m, trainer, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
                  trainer.completed() - start);
        throw;
    }
    m.history = trainer.history();
    if (trainer.completed() == c.train.iterations) {
        out.report = toynet::evaluate_student(data.test, trainer.model(), c.train.detection);
        m.report = report_json(*out.report);
    } else {
        m.status = "interrupted";
    }
    m.teacher_after = teacher_hash(teacher);
    if (m.teacher_after != m.teacher_before) throw Error("teacher state changed during training");
    if (c.output.attention && out.report) {
        export_attention(c, trainer.model(), data, c.output.attention_scene, out.dir / "attention");
    }
    write_run(out.dir, m, trainer, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(),
              trainer.completed() - start);
    return out;
}

inline TrainOutcome train(const ExperimentConfig& c, const TrainOptions& opt = {}) {
    const toynet::Dataset data = load_dataset(c);
    const toynet::Teacher teacher(c.teacher);
    return train(c, data, toynet::teacher_cache(teacher, data.train), teacher, opt);
}

// ---- eval ----

inline toynet::StudentModel load_model(const ExperimentConfig& c, const fs::path& checkpoint) {
    toynet::StudentModel model = toynet::StudentModel::init(c.train.student, c.train.seed);
    io::load_student(io::read_checkpoint(checkpoint), model);
    return model;
}

inline std::span<const toynet::Scene> split_scenes(const toynet::Dataset& data, std::string_view split) {
    if (split == "train") return data.train;
    if (split == "test") return data.test;
    throw UsageError("split must be train or test, got '" + std::string(split) + "'");
}

/// Evaluates a checkpoint on one split and writes <run dir>/eval_<split>.json.
inline toynet::SplitEval eval(const ExperimentConfig& c, const fs::path& checkpoint, std::string_view split) {
    const toynet::Dataset data = load_dataset(c);
    const auto scenes = split_scenes(data, split);
    if (scenes.empty()) throw NoGroundTruth("split '" + std::string(split) + "' has no scenes");
    const toynet::StudentModel model = load_model(c, checkpoint);
    const toynet::SplitEval r = toynet::evaluate_student(scenes, model, c.train.detection);
    io::write_atomic(c.run_dir() / ("eval_" + std::string(split) + ".json"), dump(report_json(r)));
    return r;
}

// ---- ablate ----

struct AblationRow {
    DistillMode mode = DistillMode::None;
    toynet::SplitEval report;
};

inline constexpr DistillMode kAblationArms[] = {DistillMode::None, DistillMode::Traditional, DistillMode::Fusion};

inline ExperimentConfig arm_config(const ExperimentConfig& c, DistillMode mode) {
    ExperimentConfig arm = c;
    arm.train.mode = mode;
    arm.output.run = (fs::path(c.output.root) / "ablation" / std::string(mode_name(mode))).string();
    return arm;
}

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
    std::string out = "arm,map,ap50,ap75,mr2_all,mr2_day,mr2_night\n";
    auto opt = [](const std::optional<double>& v) { return v ? io::format_double(*v) : std::string("nan"); };
    for (const auto& r : rows) {
        out += std::string(mode_name(r.mode)) + "," + io::format_double(r.report.all.map_coco) + "," +
               io::format_double(r.report.all.ap50) + "," + io::format_double(r.report.all.ap75) + "," +
               io::format_double(r.report.all.mr2) + "," + opt(r.report.mr2_day) + "," + opt(r.report.mr2_night) + "\n";
    }
    return out;
}

inline std::string ablation_text(const std::vector<AblationRow>& rows) {
    std::string out;
    char line[160];
    std::snprintf(line, sizeof line, "%-12s %8s %8s %8s %8s %8s %8s\n", "arm", "mAP", "AP50", "AP75", "MR-2", "day",
                  "night");
    out += line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-12s %8.4f %8.4f %8.4f %8.4f %8.4f %8.4f\n",
                      std::string(mode_name(r.mode)).c_str(), r.report.all.map_coco, r.report.all.ap50,
                      r.report.all.ap75, r.report.all.mr2, r.report.mr2_day.value_or(std::nan("")),
                      r.report.mr2_night.value_or(std::nan("")));
        out += line;
    }
    return out;
}

/// Runs none, traditional and amfd with shared seeds into <root>/ablation.
inline std::vector<AblationRow> ablate(const ExperimentConfig& c) {
    const toynet::Dataset data = load_dataset(c);
    const toynet::Teacher teacher(c.teacher);
    const auto cache = toynet::teacher_cache(teacher, data.train);
    std::vector<AblationRow> rows;
    for (DistillMode mode : kAblationArms) {
        TrainOutcome o = train(arm_config(c, mode), data, cache, teacher);
        rows.push_back({mode, *o.report});
    }
    const fs::path dir = fs::path(c.output.root) / "ablation";
    io::write_atomic(dir / "ablation.csv", ablation_csv(rows));
    io::write_atomic(dir / "ablation.txt", ablation_text(rows));
    return rows;
}

// ---- export-attention ----

inline const toynet::Scene& scene_by_id(const toynet::Dataset& data, std::size_t id) {
    if (id < data.train.size()) return data.train[id];
    if (id < data.train.size() + data.test.size()) return data.test[id - data.train.size()];
    throw IoError("scene " + std::to_string(id) + " does not exist (dataset has " +
                  std::to_string(data.train.size() + data.test.size()) + " scenes)");
}

/// Writes the spatial attention of every pyramid level for the teacher's
/// RGB, TIR and fused features and the student's fused features.
inline std::vector<fs::path> export_attention(const ExperimentConfig& c, const toynet::StudentModel& model,
                                              const toynet::Dataset& data, std::size_t scene_id, const fs::path& dir) {
    const toynet::Scene& scene = scene_by_id(data, scene_id);
    const toynet::Teacher teacher(c.teacher);
    const toynet::TeacherFeatures t = teacher.features(scene);
    NoGradGuard no_grad;
    const toynet::StudentOutput s = toynet::student_forward(scene, model);
    const std::pair<const char*, const FeaturePyramid*> sources[] = {
        {"teacher_rgb", &t.rgb}, {"teacher_tir", &t.tir}, {"teacher_fused", &t.fused}, {"student_fused", &s.features}};
    std::vector<fs::path> written;
    for (const auto& [name, pyramid] : sources) {
        for (std::size_t l = 0; l < pyramid->size(); ++l) {
            const fs::path path = dir / (std::string(name) + "_level" + std::to_string(l) + ".csv");
            io::write_atomic(path, io::attention_csv(spatial_attention(pyramid->levels[l]).weights));
            written.push_back(path);
        }
    }
    return written;
}

inline std::vector<fs::path> export_attention(const ExperimentConfig& c, const fs::path& checkpoint,
                                              std::size_t scene_id, const fs::path& dir) {
    const toynet::Dataset data = load_dataset(c);
    return export_attention(c, load_model(c, checkpoint), data, scene_id, dir);
}

} // namespace amfd::cmd
