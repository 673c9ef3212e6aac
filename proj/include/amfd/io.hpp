// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// On-disk formats. Every number is written locale-independently and every
// file is replaced atomically (temporary sibling, then rename). See
// docs/formats.md for the byte layouts.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "amfd/boxes.hpp"
#include "amfd/error.hpp"
#include "amfd/tensor.hpp"
#include "amfd/toynet/scene.hpp"
#include "amfd/toynet/train.hpp"

static_assert(std::endian::native == std::endian::little, "amfd file formats assume a little-endian host");

namespace amfd::io {

namespace fs = std::filesystem;

inline constexpr std::string_view kGridMagic = "AMFDGRID";
inline constexpr std::string_view kCheckpointMagic = "AMFDCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Shortest round-trip decimal form, independent of the global locale.
inline std::string format_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    std::array<char, 32> buf{};
    const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return {buf.data(), r.ptr};
}

inline double parse_double(std::string_view s, std::string_view what) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
        throw IoError("cannot parse " + std::string(what) + " from '" + std::string(s) + "'");
    }
    return v;
}

inline std::uint64_t parse_uint(std::string_view s, std::string_view what) {
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
        throw IoError("cannot parse " + std::string(what) + " from '" + std::string(s) + "'");
    }
    return v;
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
        const std::size_t start = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
        if (i > start) out.push_back(line.substr(start, i - start));
    }
    return out;
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed: " + path.string());
    return ss.str();
}

/// Writes through a temporary sibling and renames it into place.
inline void write_atomic(const fs::path& path, std::string_view bytes) {
    std::error_code ec;
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path(), ec);
        if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
    }
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) throw IoError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

namespace detail {

template <class T>
void put(std::string& out, T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    out.append(b, sizeof(T));
}

class Reader {
public:
    Reader(std::string_view bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string_view take(std::size_t n) {
        need(n);
        const std::string_view s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void get_doubles(double* dst, std::size_t n) {
        need(n * sizeof(double));
        std::memcpy(dst, bytes_.data() + pos_, n * sizeof(double));
        pos_ += n * sizeof(double);
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw IoError(what_ + ": truncated");
    }

    std::string_view bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

} // namespace detail

// ---- value grids ----

/// "AMFDGRID f64le <rank> <d0> ... \n" followed by the raw values.
inline std::string encode_grid(const Tensor& t) {
    std::string out(kGridMagic);
    out += " f64le " + std::to_string(t.rank());
    for (std::size_t d : t.shape()) out += " " + std::to_string(d);
    out += '\n';
    const auto v = t.values();
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
    return out;
}

inline Tensor decode_grid(std::string_view bytes, const std::string& what) {
    const std::size_t eol = bytes.find('\n');
    if (eol == std::string_view::npos) throw IoError(what + ": missing grid header");
    const auto fields = split_ws(bytes.substr(0, eol));
    if (fields.size() < 3 || fields[0] != kGridMagic) throw IoError(what + ": not a grid file");
    if (fields[1] != "f64le") throw IoError(what + ": unsupported dtype " + std::string(fields[1]));
    const std::size_t rank = parse_uint(fields[2], "grid rank");
    if (rank == 0 || rank > 4 || fields.size() != 3 + rank) throw IoError(what + ": bad grid rank");
    Shape shape;
    for (std::size_t i = 0; i < rank; ++i) shape.push_back(parse_uint(fields[3 + i], "grid extent"));
    const std::string_view payload = bytes.substr(eol + 1);
    if (payload.size() != shape_numel(shape) * sizeof(double)) throw IoError(what + ": payload size mismatch");
    std::vector<double> v(shape_numel(shape));
    std::memcpy(v.data(), payload.data(), payload.size());
    return Tensor::build(std::move(shape), std::move(v));
}

inline void write_grid(const fs::path& path, const Tensor& t) { write_atomic(path, encode_grid(t)); }

inline Tensor read_grid(const fs::path& path) { return decode_grid(read_file(path), path.string()); }

// ---- datasets ----

/// One annotation line: "<id> <x1> <y1> <x2> <y2> <category> <NO|LO|MO|HO>".
inline std::string annotation_line(std::size_t id, const GtBox& g) {
    return std::to_string(id) + " " + format_double(g.box.x1) + " " + format_double(g.box.y1) + " " +
           format_double(g.box.x2) + " " + format_double(g.box.y2) + " " + g.category + " " +
           std::string(occlusion_label(g.occlusion));
}

inline std::pair<std::size_t, GtBox> parse_annotation(std::string_view line, std::size_t line_no) {
    const auto f = split_ws(line);
    const std::string where = "annotations line " + std::to_string(line_no);
    if (f.size() != 7) throw IoError(where + ": expected 7 fields");
    GtBox g;
    g.box = {parse_double(f[1], "x1"), parse_double(f[2], "y1"), parse_double(f[3], "x2"), parse_double(f[4], "y2")};
    if (!g.box.valid()) throw IoError(where + ": box has no extent");
    g.category = std::string(f[5]);
    const auto occ = parse_occlusion(f[6]);
    if (!occ) throw IoError(where + ": occlusion must be NO, LO, MO or HO");
    g.occlusion = *occ;
    return {parse_uint(f[0], "scene id"), g};
}

inline std::string scene_file(std::size_t id) {
    std::string s = std::to_string(id);
    return std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s + ".grid";
}

/// Directory layout: index.txt, annotations.txt, rgb/<id>.grid, tir/<id>.grid.
/// Training scenes take ids [0, train) and test scenes the rest.
inline void write_dataset(const fs::path& dir, const toynet::Dataset& data) {
    std::string index = "# id split lighting seed\n";
    std::string ann = "# id x1 y1 x2 y2 category occlusion\n";
    std::size_t id = 0;
    for (const auto* split : {&data.train, &data.test}) {
        const char* name = split == &data.train ? "train" : "test";
        for (const auto& s : *split) {
            index += std::to_string(id) + " " + name + " " + (s.night ? "night" : "day") + " " + std::to_string(s.seed) + "\n";
            for (const auto& g : s.annotations) ann += annotation_line(id, g) + "\n";
            write_grid(dir / "rgb" / scene_file(id), s.rgb);
            write_grid(dir / "tir" / scene_file(id), s.tir);
            ++id;
        }
    }
    write_atomic(dir / "annotations.txt", ann);
    write_atomic(dir / "index.txt", index);
}

/// Inverse of write_dataset. The returned spec only carries what the files
/// record; callers keep their own generation spec.
inline toynet::Dataset read_dataset(const fs::path& dir) {
    if (!fs::exists(dir / "index.txt")) throw IoError("no dataset at " + dir.string() + " (index.txt missing)");
    struct Entry {
        bool test;
        bool night;
        std::uint64_t seed;
    };
    std::vector<Entry> entries;
    {
        std::istringstream in(read_file(dir / "index.txt"));
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty() || line[0] == '#') continue;
            const auto f = split_ws(line);
            const std::string where = "index line " + std::to_string(line_no);
            if (f.size() != 4) throw IoError(where + ": expected 4 fields");
            if (parse_uint(f[0], "scene id") != entries.size()) throw IoError(where + ": ids must be consecutive from 0");
            if (f[1] != "train" && f[1] != "test") throw IoError(where + ": split must be train or test");
            if (f[2] != "day" && f[2] != "night") throw IoError(where + ": lighting must be day or night");
            entries.push_back({f[1] == "test", f[2] == "night", parse_uint(f[3], "seed")});
        }
    }
    std::vector<std::vector<GtBox>> boxes(entries.size());
    {
        std::istringstream in(read_file(dir / "annotations.txt"));
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty() || line[0] == '#') continue;
            auto [id, g] = parse_annotation(line, line_no);
            if (id >= entries.size()) throw IoError("annotations line " + std::to_string(line_no) + ": unknown scene");
            boxes[id].push_back(std::move(g));
        }
    }
    toynet::Dataset data;
    for (std::size_t id = 0; id < entries.size(); ++id) {
        toynet::Scene s;
        s.rgb = read_grid(dir / "rgb" / scene_file(id));
        s.tir = read_grid(dir / "tir" / scene_file(id));
        if (s.rgb.rank() != 3 || s.tir.rank() != 3 || s.rgb.dim(1) != s.tir.dim(1) || s.rgb.dim(2) != s.tir.dim(2)) {
            throw IoError("scene " + std::to_string(id) + ": rgb and tir grids disagree");
        }
        s.annotations = std::move(boxes[id]);
        s.night = entries[id].night;
        s.seed = entries[id].seed;
        (entries[id].test ? data.test : data.train).push_back(std::move(s));
    }
    if (!data.train.empty()) {
        data.spec.height = data.train.front().rgb.dim(1);
        data.spec.width = data.train.front().rgb.dim(2);
    }
    data.spec.train_scenes = data.train.size();
    data.spec.test_scenes = data.test.size();
    return data;
}

// ---- checkpoints ----

/// magic, u32 version, u32 grid count, then per grid: u32 name length, name
/// bytes (UTF-8), u32 rank, u64 extents, f64 values.
inline std::string encode_checkpoint(const std::vector<toynet::NamedGrid>& grids) {
    std::string out(kCheckpointMagic);
    detail::put<std::uint32_t>(out, kCheckpointVersion);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(grids.size()));
    for (const auto& g : grids) {
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(g.name.size()));
        out += g.name;
        detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(g.shape.size()));
        for (std::size_t d : g.shape) detail::put<std::uint64_t>(out, d);
        out.append(reinterpret_cast<const char*>(g.data.data()), g.data.size() * sizeof(double));
    }
    return out;
}

inline std::vector<toynet::NamedGrid> decode_checkpoint(std::string_view bytes, const std::string& what) {
    detail::Reader r(bytes, what);
    if (r.take(kCheckpointMagic.size()) != kCheckpointMagic) throw IoError(what + ": not a checkpoint");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) throw IoError(what + ": unsupported version " + std::to_string(version));
    const auto count = r.get<std::uint32_t>();
    std::vector<toynet::NamedGrid> grids;
    for (std::uint32_t i = 0; i < count; ++i) {
        toynet::NamedGrid g;
        g.name = std::string(r.take(r.get<std::uint32_t>()));
        const auto rank = r.get<std::uint32_t>();
        if (rank > 4) throw IoError(what + ": grid '" + g.name + "' has rank " + std::to_string(rank));
        std::size_t n = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            g.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
            n *= g.shape.back();
        }
        g.data.resize(n);
        r.get_doubles(g.data.data(), n);
        grids.push_back(std::move(g));
    }
    if (!r.done()) throw IoError(what + ": trailing bytes");
    return grids;
}

inline void write_checkpoint(const fs::path& path, const std::vector<toynet::NamedGrid>& grids) {
    write_atomic(path, encode_checkpoint(grids));
}

inline std::vector<toynet::NamedGrid> read_checkpoint(const fs::path& path) {
    return decode_checkpoint(read_file(path), path.string());
}

/// Copies "student.*" grids of a checkpoint into a model of matching shape.
inline void load_student(const std::vector<toynet::NamedGrid>& grids, toynet::StudentModel& model) {
    for (auto& [name, t] : model.named_parameters()) {
        const std::string key = "student." + name;
        const auto it = std::find_if(grids.begin(), grids.end(), [&](const auto& g) { return g.name == key; });
        if (it == grids.end()) throw ShapeMismatch("checkpoint lacks '" + key + "'");
        if (it->shape != t.shape()) {
            throw ShapeMismatch("checkpoint grid '" + key + "' is " + shape_str(it->shape) + ", model expects " +
                                shape_str(t.shape()));
        }
        std::copy(it->data.begin(), it->data.end(), t.mutable_values().begin());
    }
}

// ---- CSV ----

inline std::string loss_csv(const std::vector<LossBreakdown>& history) {
    std::string out = "step";
    for (const char* n : LossBreakdown::field_names()) out += std::string(",") + n;
    out += '\n';
    for (std::size_t i = 0; i < history.size(); ++i) {
        out += std::to_string(i);
        for (double v : history[i].fields()) out += "," + format_double(v);
        out += '\n';
    }
    return out;
}

/// "row,col,weight" for a 2-D grid.
inline std::string attention_csv(const Tensor& grid) {
    if (grid.rank() != 2) throw ShapeMismatch("attention_csv: expected an H×W grid, got " + shape_str(grid.shape()));
    std::string out = "row,col,weight\n";
    const std::size_t w = grid.dim(1);
    for (std::size_t i = 0; i < grid.dim(0); ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            out += std::to_string(i) + "," + std::to_string(j) + "," + format_double(grid[i * w + j]) + "\n";
        }
    }
    return out;
}

} // namespace amfd::io
