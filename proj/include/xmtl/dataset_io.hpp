#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmtl/array.hpp"
#include "xmtl/error.hpp"
#include "xmtl/synth.hpp"

namespace xmtl {

namespace detail {

// Raw sample files are little-endian float64 regardless of host order.
inline void write_f64_le(std::ostream& os, const double* data, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &data[i], 8);
        unsigned char bytes[8];
        for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
        os.write(reinterpret_cast<const char*>(bytes), 8);
    }
}

inline void read_f64_le(std::istream& is, double* data, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
        unsigned char bytes[8];
        is.read(reinterpret_cast<char*>(bytes), 8);
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(bytes[b]) << (8 * b);
        std::memcpy(&data[i], &bits, 8);
    }
}

inline void write_raw(const std::filesystem::path& path, const Array& a) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    write_f64_le(os, a.data(), a.numel());
    if (!os) throw IoError("short write to " + path.string());
}

inline Array read_raw(const std::filesystem::path& path, const Shape& shape) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    Array a(shape);
    read_f64_le(is, a.data(), a.numel());
    if (!is) throw IoError("short read from " + path.string());
    return a;
}

// Binary 8-bit PGM with [-1, 1] mapped onto [0, 255].
inline void write_pgm(const std::filesystem::path& path, const Array& img) {
    const std::size_t n = img.dim(0);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << "P5\n" << n << " " << n << "\n255\n";
    for (std::size_t i = 0; i < img.numel(); ++i) {
        const double v = std::clamp((img[i] + 1.0) * 0.5, 0.0, 1.0);
        os.put(static_cast<char>(static_cast<int>(v * 255.0 + 0.5)));
    }
    if (!os) throw IoError("short write to " + path.string());
}

inline std::string sample_stem(const char* split, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%05zu", split, i);
    return buf;
}

}  // namespace detail

// Layout: <dir>/manifest.json plus one .sig and one .img raw file per sample.
// The manifest holds the generation config, per-split labels, and file stems.
inline void save_dataset(const SyntheticDataset& ds, const std::filesystem::path& dir,
                         bool export_pgm = false) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

    nlohmann::json manifest;
    manifest["format"] = "xmtl-dataset";
    manifest["version"] = 1;
    manifest["classes"] = ds.config.classes;
    manifest["timesteps"] = ds.config.timesteps;
    manifest["image_size"] = ds.config.image_size;
    manifest["per_class_train"] = ds.config.per_class_train;
    manifest["per_class_val"] = ds.config.per_class_val;
    manifest["signal_noise"] = ds.config.signal_noise;
    manifest["image_noise"] = ds.config.image_noise;
    manifest["seed"] = ds.config.seed;

    auto dump_split = [&](const char* name, const std::vector<PairedSample>& split) {
        nlohmann::json labels = nlohmann::json::array();
        for (std::size_t i = 0; i < split.size(); ++i) {
            const std::string stem = detail::sample_stem(name, i);
            detail::write_raw(dir / (stem + ".sig"), split[i].signal);
            detail::write_raw(dir / (stem + ".img"), split[i].image);
            if (export_pgm) detail::write_pgm(dir / (stem + ".pgm"), split[i].image);
            labels.push_back(split[i].label);
        }
        manifest[name] = {{"count", split.size()}, {"labels", labels}};
    };
    dump_split("train", ds.train);
    dump_split("val", ds.val);

    std::ofstream os(dir / "manifest.json");
    if (!os) throw IoError("cannot write manifest in " + dir.string());
    os << manifest.dump(2) << "\n";
    if (!os) throw IoError("short write to manifest in " + dir.string());
}

inline SyntheticDataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream is(dir / "manifest.json");
    if (!is) throw IoError("cannot open manifest in " + dir.string());
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
    }
    if (manifest.value("format", "") != "xmtl-dataset" || manifest.value("version", 0) != 1)
        throw IoError("unrecognized dataset format in " + dir.string());

    SyntheticDataset ds;
    ds.config.classes = manifest.at("classes").get<std::size_t>();
    ds.config.timesteps = manifest.at("timesteps").get<std::size_t>();
    ds.config.image_size = manifest.at("image_size").get<std::size_t>();
    ds.config.per_class_train = manifest.at("per_class_train").get<std::size_t>();
    ds.config.per_class_val = manifest.at("per_class_val").get<std::size_t>();
    ds.config.signal_noise = manifest.at("signal_noise").get<double>();
    ds.config.image_noise = manifest.at("image_noise").get<double>();
    ds.config.seed = manifest.at("seed").get<std::uint64_t>();

    auto read_split = [&](const char* name, std::vector<PairedSample>& out) {
        const auto& node = manifest.at(name);
        const std::size_t count = node.at("count").get<std::size_t>();
        const auto& labels = node.at("labels");
        if (labels.size() != count) throw IoError("label count mismatch in " + dir.string());
        for (std::size_t i = 0; i < count; ++i) {
            const std::string stem = detail::sample_stem(name, i);
            PairedSample s;
            s.signal = detail::read_raw(dir / (stem + ".sig"), Shape{ds.config.timesteps});
            s.image = detail::read_raw(dir / (stem + ".img"),
                                       Shape{ds.config.image_size, ds.config.image_size});
            s.label = labels[i].get<std::size_t>();
            if (s.label >= ds.config.classes) throw IoError("label out of range in " + dir.string());
            out.push_back(std::move(s));
        }
    };
    read_split("train", ds.train);
    read_split("val", ds.val);
    return ds;
}

}  // namespace xmtl
