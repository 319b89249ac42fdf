#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "xmtl/array.hpp"
#include "xmtl/dataset_io.hpp"
#include "xmtl/error.hpp"

namespace xmtl {

// Container for named tensors plus free-form JSON metadata. On disk:
// "XMTL" magic, u32 format version, u64 manifest length, manifest JSON,
// then each tensor's float64 payload in manifest order, all little-endian.
struct Checkpoint {
    nlohmann::json meta;
    std::map<std::string, Array> tensors;
};

namespace detail {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t read_u32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t read_u64_le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");

    nlohmann::json manifest;
    manifest["meta"] = ckpt.meta;
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& [name, arr] : ckpt.tensors) {
        nlohmann::json shape = nlohmann::json::array();
        for (std::size_t d = 0; d < arr.rank(); ++d) shape.push_back(arr.dim(d));
        tensors.push_back({{"name", name}, {"shape", shape}});
    }
    manifest["tensors"] = tensors;
    const std::string body = manifest.dump();

    os.write("XMTL", 4);
    detail::write_u32_le(os, detail::kCheckpointVersion);
    detail::write_u64_le(os, body.size());
    os.write(body.data(), static_cast<std::streamsize>(body.size()));
    for (const auto& [name, arr] : ckpt.tensors) detail::write_f64_le(os, arr.data(), arr.numel());
    if (!os) throw IoError("short write to " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());

    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "XMTL")
        throw IoError(path.string() + " is not a checkpoint file");
    const std::uint32_t version = detail::read_u32_le(is);
    if (version != detail::kCheckpointVersion)
        throw IoError("unsupported checkpoint version " + std::to_string(version) +
                      " in " + path.string());

    const std::uint64_t body_len = detail::read_u64_le(is);
    std::string body(body_len, '\0');
    is.read(body.data(), static_cast<std::streamsize>(body_len));
    if (!is) throw IoError("truncated manifest in " + path.string());
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest in " + path.string() + ": " + e.what());
    }

    Checkpoint ckpt;
    ckpt.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
        Shape shape;
        for (const auto& d : entry.at("shape")) shape.push_back(d.get<std::size_t>());
        Array arr(shape);
        detail::read_f64_le(is, arr.data(), arr.numel());
        if (!is) throw IoError("truncated tensor data in " + path.string());
        ckpt.tensors.emplace(entry.at("name").get<std::string>(), std::move(arr));
    }
    return ckpt;
}

}  // namespace xmtl
