// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "driftlab/policy.hpp"
#include "driftlab/taskenv.hpp"

namespace driftlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- formatting -------------------------------------------------------------

/// Deterministic float formatting for reports.
inline std::string fmt_num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

inline std::string hex64(std::uint64_t v) {
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// ---- raw file helpers ----------------------------------------------------------

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + path.string());
}

inline std::string file_hash(const fs::path& path) {
    const std::string bytes = read_file(path);
    return hex64(fnv1a64(bytes.data(), bytes.size()));
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

struct Reader {
    const std::string& bytes;
    std::size_t pos = 0;

    void require(std::size_t n, const char* what) const {
        if (pos + n > bytes.size()) throw IoError(std::string("truncated ") + what);
    }
    std::uint32_t u32(const char* what) {
        require(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)])) << (8 * i);
        pos += 4;
        return v;
    }
    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64(const char* what) {
        require(8, what);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i)
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)])) << (8 * i);
        pos += 8;
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::uint8_t u8(const char* what) {
        require(1, what);
        return static_cast<std::uint8_t>(bytes[pos++]);
    }
};

}  // namespace detail

// ---- checkpoint format -----------------------------------------------------------
//
// Line 1: JSON header {"format","version","fingerprint","modules":[{name,len}]}
// Then raw little-endian 32-bit floats, modules in canonical order. Values are
// computed in 64-bit and stored in 32-bit; round-trip error is <= 1e-7 relative.

inline void save_checkpoint(const fs::path& path, const NamedCheckpoint& ckpt) {
    json header;
    header["format"] = "driftlab-checkpoint";
    header["version"] = 1;
    header["fingerprint"] = ckpt.fingerprint;
    json mods = json::array();
    for (int m = 0; m < kModuleCount; ++m)
        mods.push_back({{"name", std::string(module_name(module_from_index(m)))},
                        {"len", ckpt.modules[m].size()}});
    header["modules"] = mods;

    std::string out = header.dump();
    out.push_back('\n');
    for (int m = 0; m < kModuleCount; ++m)
        for (double v : ckpt.modules[m]) detail::put_f32(out, static_cast<float>(v));
    write_file(path, out);
}

inline NamedCheckpoint load_checkpoint(const fs::path& path) {
    const std::string bytes = read_file(path);
    const auto nl = bytes.find('\n');
    if (nl == std::string::npos) throw IoError("checkpoint " + path.string() + ": missing header");
    json header = json::parse(bytes.substr(0, nl));
    if (header.value("format", "") != "driftlab-checkpoint")
        throw IoError("checkpoint " + path.string() + ": wrong format tag");
    NamedCheckpoint ckpt;
    ckpt.fingerprint = header.at("fingerprint").get<std::string>();
    detail::Reader r{bytes, nl + 1};
    const json& mods = header.at("modules");
    if (mods.size() != kModuleCount)
        throw IoError("checkpoint " + path.string() + ": expected 5 modules");
    for (int m = 0; m < kModuleCount; ++m) {
        const std::string name = mods[static_cast<std::size_t>(m)].at("name").get<std::string>();
        if (name != module_name(module_from_index(m)))
            throw IoError("checkpoint " + path.string() + ": module order mismatch at " + name);
        const auto len = mods[static_cast<std::size_t>(m)].at("len").get<std::size_t>();
        ckpt.modules[m].reserve(len);
        for (std::size_t i = 0; i < len; ++i)
            ckpt.modules[m].push_back(static_cast<double>(r.f32("checkpoint data")));
    }
    return ckpt;
}

// ---- dataset format ----------------------------------------------------------------
//
// <path>: JSON header line, then per-frame length-prefixed records of
// (f32 image, f64 proprio, u32 instruction, f64 action, u8 flags).
// <path>.idx: JSON sidecar mapping trajectories to frame ranges.

inline void save_dataset(const fs::path& path, const DemoDataset& ds) {
    std::size_t image_len = 0, proprio_len = 0, action_len = 0;
    if (!ds.trajectories.empty() && !ds.trajectories[0].frames.empty()) {
        const Frame& f = ds.trajectories[0].frames[0];
        image_len = f.obs.image.size();
        proprio_len = f.obs.proprio.size();
        action_len = f.action.size();
    }
    json header;
    header["format"] = "driftlab-dataset";
    header["version"] = 1;
    header["image_len"] = image_len;
    header["proprio_len"] = proprio_len;
    header["action_len"] = action_len;
    header["frames"] = ds.frame_count();

    std::string out = header.dump();
    out.push_back('\n');
    json index;
    index["split"] = ds.split;
    index["poison_ratio"] = ds.poison_ratio;
    json trajs = json::array();
    std::size_t start = 0;
    for (const Trajectory& t : ds.trajectories) {
        for (const Frame& f : t.frames) {
            const std::size_t record_len = 4 * image_len + 8 * proprio_len + 4 + 8 * action_len + 1;
            detail::put_u32(out, static_cast<std::uint32_t>(record_len));
            for (float v : f.obs.image) detail::put_f32(out, v);
            for (double v : f.obs.proprio) detail::put_f64(out, v);
            detail::put_u32(out, static_cast<std::uint32_t>(f.obs.instruction));
            for (double v : f.action) detail::put_f64(out, v);
            out.push_back(t.poisoned ? char(1) : char(0));
        }
        trajs.push_back({{"start", start},
                         {"len", t.frames.size()},
                         {"task", t.task_name},
                         {"instruction", t.instruction},
                         {"seed", t.seed},
                         {"trigger_x", t.trigger_x},
                         {"trigger_y", t.trigger_y},
                         {"poisoned", t.poisoned},
                         {"success", t.success}});
        start += t.frames.size();
    }
    index["trajectories"] = trajs;
    write_file(path, out);
    write_file(fs::path(path.string() + ".idx"), index.dump(2) + "\n");
}

inline DemoDataset load_dataset(const fs::path& path) {
    const std::string bytes = read_file(path);
    const auto nl = bytes.find('\n');
    if (nl == std::string::npos) throw IoError("dataset " + path.string() + ": missing header");
    json header = json::parse(bytes.substr(0, nl));
    if (header.value("format", "") != "driftlab-dataset")
        throw IoError("dataset " + path.string() + ": wrong format tag");
    const auto image_len = header.at("image_len").get<std::size_t>();
    const auto proprio_len = header.at("proprio_len").get<std::size_t>();
    const auto action_len = header.at("action_len").get<std::size_t>();

    json index = json::parse(read_file(fs::path(path.string() + ".idx")));
    DemoDataset ds;
    ds.split = index.at("split").get<std::string>();
    ds.poison_ratio = index.at("poison_ratio").get<double>();

    detail::Reader r{bytes, nl + 1};
    std::vector<Frame> frames;
    frames.reserve(header.at("frames").get<std::size_t>());
    while (r.pos < bytes.size()) {
        const std::uint32_t record_len = r.u32("record length");
        (void)record_len;
        Frame f;
        f.obs.image.resize(image_len);
        for (std::size_t i = 0; i < image_len; ++i) f.obs.image[i] = r.f32("image");
        f.obs.proprio.resize(proprio_len);
        for (std::size_t i = 0; i < proprio_len; ++i) f.obs.proprio[i] = r.f64("proprio");
        f.obs.instruction = static_cast<int>(r.u32("instruction"));
        f.action.resize(action_len);
        for (std::size_t i = 0; i < action_len; ++i) f.action[i] = r.f64("action");
        r.u8("flags");
        frames.push_back(std::move(f));
    }
    for (const json& tj : index.at("trajectories")) {
        Trajectory t;
        t.task_name = tj.at("task").get<std::string>();
        t.instruction = tj.at("instruction").get<int>();
        t.seed = tj.at("seed").get<std::uint64_t>();
        t.trigger_x = tj.at("trigger_x").get<int>();
        t.trigger_y = tj.at("trigger_y").get<int>();
        t.poisoned = tj.at("poisoned").get<bool>();
        t.success = tj.at("success").get<bool>();
        const auto start = tj.at("start").get<std::size_t>();
        const auto len = tj.at("len").get<std::size_t>();
        if (start + len > frames.size())
            throw IoError("dataset " + path.string() + ": index exceeds frame data");
        t.frames.assign(frames.begin() + static_cast<std::ptrdiff_t>(start),
                        frames.begin() + static_cast<std::ptrdiff_t>(start + len));
        ds.trajectories.push_back(std::move(t));
    }
    return ds;
}

// ---- CSV ---------------------------------------------------------------------------

inline void write_csv(const fs::path& path, const std::string& header,
                      const std::vector<std::string>& rows) {
    std::string out = header + "\n";
    for (const std::string& r : rows) {
        out += r;
        out.push_back('\n');
    }
    write_file(path, out);
}

// ---- run manifest ---------------------------------------------------------------------

/// Per-run provenance: which command produced which artifact, with content
/// hashes so consumers can detect stale or missing inputs.
class Manifest {
public:
    static fs::path file(const fs::path& out_dir) { return out_dir / "manifest.json"; }

    static Manifest load_or_create(const fs::path& out_dir, const std::string& config_hash) {
        Manifest m;
        m.dir_ = out_dir;
        if (fs::exists(file(out_dir))) {
            m.doc_ = json::parse(read_file(file(out_dir)));
            if (m.doc_.value("config_hash", "") != config_hash)
                throw DependencyError("manifest in " + out_dir.string() +
                                      " was produced with a different config; use a fresh out dir");
        } else {
            m.doc_["format"] = "driftlab-manifest";
            m.doc_["version"] = kVersion;
            m.doc_["config_hash"] = config_hash;
            m.doc_["stages"] = json::object();
        }
        return m;
    }

    void record_stage(const std::string& stage, const std::vector<fs::path>& artifacts,
                      double wall_ms) {
        json arts = json::object();
        for (const fs::path& p : artifacts)
            arts[fs::relative(p, dir_).generic_string()] = file_hash(p);
        doc_["stages"][stage] = {{"artifacts", arts}, {"wall_ms", wall_ms}};
        write_file(file(dir_), doc_.dump(2) + "\n");
    }

    bool has_stage(const std::string& stage) const { return doc_["stages"].contains(stage); }

    /// Verifies a recorded artifact still exists with an unchanged hash and
    /// returns its absolute path.
    fs::path require_artifact(const std::string& stage, const std::string& rel,
                              const std::string& producer_cmd) const {
        if (!has_stage(stage))
            throw DependencyError("missing upstream stage '" + stage + "'; run `" + producer_cmd +
                                  "` first");
        const json& arts = doc_["stages"][stage]["artifacts"];
        if (!arts.contains(rel))
            throw DependencyError("stage '" + stage + "' did not record artifact '" + rel +
                                  "'; rerun `" + producer_cmd + "`");
        const fs::path p = dir_ / rel;
        if (!fs::exists(p))
            throw DependencyError("artifact " + p.string() + " is missing; rerun `" +
                                  producer_cmd + "`");
        const std::string h = file_hash(p);
        if (h != arts[rel].get<std::string>())
            throw DependencyError("artifact " + p.string() + " is stale (hash " + h +
                                  " != recorded " + arts[rel].get<std::string>() + "); rerun `" +
                                  producer_cmd + "`");
        return p;
    }

    /// All recorded artifacts verify against their hashes.
    std::vector<std::string> verify_all() const {
        std::vector<std::string> problems;
        for (const auto& [stage, body] : doc_["stages"].items()) {
            for (const auto& [rel, hash] : body["artifacts"].items()) {
                const fs::path p = dir_ / rel;
                if (!fs::exists(p)) {
                    problems.push_back(stage + ": missing " + rel);
                } else if (file_hash(p) != hash.get<std::string>()) {
                    problems.push_back(stage + ": stale " + rel);
                }
            }
        }
        return problems;
    }

    const json& doc() const { return doc_; }

private:
    fs::path dir_;
    json doc_;
};

}  // namespace driftlab
