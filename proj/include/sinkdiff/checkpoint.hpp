#pragma once

// Checkpoint = directory holding manifest.json and params.bin.
// params.bin is every tensor's little-endian float32 data back to back, in
// manifest order; the manifest records shape, byte offset, length and CRC32
// of each block plus the full run config.

#include "sinkdiff/errors.hpp"
#include "sinkdiff/nn.hpp"
#include "sinkdiff/run_config.hpp"
#include "sinkdiff/train.hpp"

#include <json.hpp>
#include <zlib.h>

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace sinkdiff {

inline constexpr const char* kCheckpointFormat = "sinkdiff-checkpoint";
inline constexpr int kCheckpointVersion = 1;

struct LoadedCheckpoint {
    RunConfig config;
    Model model;
    std::optional<OptimState<float>> optimizer;
    std::size_t step = 0;
};

namespace detail {

inline void append_le(std::vector<unsigned char>& out, std::span<const float> values) {
    for (float f : values) {
        const auto u = std::bit_cast<std::uint32_t>(f);
        out.push_back(static_cast<unsigned char>(u & 0xFFu));
        out.push_back(static_cast<unsigned char>((u >> 8) & 0xFFu));
        out.push_back(static_cast<unsigned char>((u >> 16) & 0xFFu));
        out.push_back(static_cast<unsigned char>((u >> 24) & 0xFFu));
    }
}

inline void read_le(std::span<const unsigned char> bytes, std::span<float> out) {
    for (std::size_t i = 0; i < out.size(); ++i) {
        const std::uint32_t u = static_cast<std::uint32_t>(bytes[4 * i]) |
                                (static_cast<std::uint32_t>(bytes[4 * i + 1]) << 8) |
                                (static_cast<std::uint32_t>(bytes[4 * i + 2]) << 16) |
                                (static_cast<std::uint32_t>(bytes[4 * i + 3]) << 24);
        out[i] = std::bit_cast<float>(u);
    }
}

inline std::uint32_t crc32_of(std::span<const unsigned char> bytes) {
    return static_cast<std::uint32_t>(
        ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

} // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const RunConfig& config, const Model& model,
                            const OptimState<float>* optimizer, std::size_t step) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
    }
    std::vector<unsigned char> blob;
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    auto add_block = [&](const std::string& name, const Shape& shape, std::span<const float> data) {
        const std::size_t offset = blob.size();
        detail::append_le(blob, data);
        const std::span<const unsigned char> bytes(blob.data() + offset, blob.size() - offset);
        tensors.push_back({{"name", name},
                           {"shape", shape},
                           {"offset", offset},
                           {"length", bytes.size()},
                           {"crc32", detail::crc32_of(bytes)}});
    };
    const auto params = model.parameters();
    for (const auto& p : params) {
        add_block(p.name, p.tensor.shape(), p.tensor.data());
    }
    if (optimizer) {
        for (std::size_t k = 0; k < params.size(); ++k) {
            add_block("optim.m." + params[k].name, params[k].tensor.shape(), optimizer->m.at(k));
            add_block("optim.v." + params[k].name, params[k].tensor.shape(), optimizer->v.at(k));
        }
    }
    nlohmann::ordered_json manifest;
    manifest["format"] = kCheckpointFormat;
    manifest["version"] = kCheckpointVersion;
    manifest["step"] = step;
    manifest["run_config"] = run_config_to_json(config);
    manifest["seeds"] = seeds_to_json(config.seeds);
    manifest["optimizer_step"] = optimizer ? nlohmann::ordered_json(optimizer->step) : nlohmann::ordered_json();
    manifest["tensors"] = tensors;

    std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
    bin.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    std::ofstream man(dir / "manifest.json", std::ios::trunc);
    man << manifest.dump(2) << '\n';
    if (!bin || !man) {
        throw IoError("failed writing checkpoint to " + dir.string());
    }
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream man(dir / "manifest.json");
    if (!man) {
        throw IoError("cannot open " + (dir / "manifest.json").string());
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(man);
    } catch (const nlohmann::json::parse_error& e) {
        throw VersionError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != kCheckpointFormat || manifest.value("version", 0) != kCheckpointVersion) {
        throw VersionError("unsupported checkpoint format in " + dir.string());
    }
    LoadedCheckpoint out;
    try {
        out.config = run_config_from_json(manifest.at("run_config"));
    } catch (const ConfigError& e) {
        throw VersionError(std::string("checkpoint config does not match this build: ") + e.what());
    }
    out.step = manifest.at("step").get<std::size_t>();
    out.model = Model(out.config.model);

    std::ifstream bin(dir / "params.bin", std::ios::binary);
    if (!bin) {
        throw IoError("cannot open " + (dir / "params.bin").string());
    }
    const std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

    std::map<std::string, nlohmann::json> blocks;
    for (const auto& t : manifest.at("tensors")) {
        blocks[t.at("name").get<std::string>()] = t;
    }
    auto load_block = [&](const std::string& name, const Shape& shape, std::span<float> dst) {
        auto it = blocks.find(name);
        if (it == blocks.end()) {
            throw VersionError("checkpoint is missing tensor " + name);
        }
        const auto& t = it->second;
        if (t.at("shape").get<Shape>() != shape) {
            throw VersionError("checkpoint tensor " + name + " has shape " +
                               shape_string(t.at("shape").get<Shape>()) + ", config expects " + shape_string(shape));
        }
        const auto offset = t.at("offset").get<std::size_t>();
        const auto length = t.at("length").get<std::size_t>();
        if (length != dst.size() * 4 || offset + length > blob.size()) {
            throw VersionError("checkpoint tensor " + name + " has an inconsistent byte range");
        }
        const std::span<const unsigned char> bytes(blob.data() + offset, length);
        if (detail::crc32_of(bytes) != t.at("crc32").get<std::uint32_t>()) {
            throw VersionError("checkpoint tensor " + name + " fails its CRC check");
        }
        detail::read_le(bytes, dst);
    };
    const auto params = out.model.parameters();
    for (auto p : params) {
        load_block(p.name, p.tensor.shape(), p.tensor.mutable_data());
    }
    if (!manifest.at("optimizer_step").is_null()) {
        OptimState<float> st;
        st.step = manifest.at("optimizer_step").get<std::uint64_t>();
        for (const auto& p : params) {
            st.m.emplace_back(p.tensor.size());
            st.v.emplace_back(p.tensor.size());
            load_block("optim.m." + p.name, p.tensor.shape(), st.m.back());
            load_block("optim.v." + p.name, p.tensor.shape(), st.v.back());
        }
        out.optimizer = std::move(st);
    }
    return out;
}

} // namespace sinkdiff
