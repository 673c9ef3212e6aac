// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Argument parsing and exit-code mapping for the amfd tool.
// Exit codes: 0 success, 1 usage, 2 data, 3 numeric.

#pragma once

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "amfd/commands.hpp"

namespace amfd::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Multispectral detection distillation experiments on synthetic scenes.", "amfd"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    std::string config_path;
    std::vector<std::string> overrides;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "INI experiment config")->check(CLI::ExistingFile);
        sub->add_option("--set", overrides, "Override a config key, section.key=value (repeatable)");
    };

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
    common(gen);

    bool resume = false;
    std::optional<std::size_t> until;
    auto* train = app.add_subcommand("train", "Train one student and write manifest, checkpoint and loss curve");
    common(train);
    train->add_flag("--resume", resume, "Continue from the run directory's checkpoint");
    train->add_option("--until", until, "Stop after this many completed steps");

    std::string checkpoint;
    std::string split = "test";
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
    common(eval);
    eval->add_option("--checkpoint", checkpoint, "Checkpoint file (default: <run dir>/checkpoint.bin)");
    eval->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));

    auto* ablate = app.add_subcommand("ablate", "Run the none, traditional and amfd arms with shared seeds");
    common(ablate);

    std::size_t scene = 0;
    std::string attention_dir;
    auto* attention = app.add_subcommand("export-attention", "Write spatial attention grids for one scene");
    common(attention);
    attention->add_option("--checkpoint", checkpoint, "Checkpoint file (default: <run dir>/checkpoint.bin)");
    attention->add_option("--scene", scene, "Scene id")->required();
    attention->add_option("--out", attention_dir, "Output directory (default: <run dir>/attention)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    try {
        const ExperimentConfig c = load_config(config_path, overrides);
        const std::string ckpt = checkpoint.empty() ? (c.run_dir() / "checkpoint.bin").string() : checkpoint;
        if (gen->parsed()) {
            const auto dir = cmd::gen_data(c);
            out << "wrote " << c.dataset.train_scenes + c.dataset.test_scenes << " scenes to " << dir.string() << "\n";
        } else if (train->parsed()) {
            const auto o = cmd::train(c, {resume, until});
            out << mode_name(c.train.mode) << ": " << o.manifest.history.size() << "/" << c.train.iterations
                << " steps, run dir " << o.dir.string() << "\n";
            if (o.report) {
                out << "mAP " << io::format_double(o.report->all.map_coco) << "  MR-2 "
                    << io::format_double(o.report->all.mr2) << "\n";
            }
        } else if (eval->parsed()) {
            const auto r = cmd::eval(c, ckpt, split);
            out << cmd::dump(cmd::report_json(r));
        } else if (ablate->parsed()) {
            out << cmd::ablation_text(cmd::ablate(c));
        } else if (attention->parsed()) {
            const auto dir = attention_dir.empty() ? c.run_dir() / "attention" : std::filesystem::path(attention_dir);
            const auto files = cmd::export_attention(c, ckpt, scene, dir);
            out << "wrote " << files.size() << " grids to " << dir.string() << "\n";
        }
        return kOk;
    } catch (const UsageError& e) {
        err << "amfd: " << e.what() << "\n";
        return kUsage;
    } catch (const NonFiniteLoss& e) {
        err << "amfd: " << e.what() << "\n";
        return kNumeric;
    } catch (const NonFiniteValue& e) {
        err << "amfd: " << e.what() << "\n";
        return kNumeric;
    } catch (const Error& e) {
        err << "amfd: " << e.what() << "\n";
        return kData;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "amfd: " << e.what() << "\n";
        return kData;
    }
}

} // namespace amfd::cli
