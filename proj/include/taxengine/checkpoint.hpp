#pragma once

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>

#include <nlohmann/json.hpp>

#include "taxengine/core.hpp"
#include "taxengine/kernels.hpp"

namespace taxengine {

inline constexpr std::string_view kCheckpointFormat = "taxengine-checkpoint";

/// Directory of raw little-endian float64 tensors (row-major, one file per
/// tensor) described by manifest.json. Extra metadata lands under "meta".
inline void save_tensors(const std::filesystem::path& dir, std::span<Param* const> params, const nlohmann::json& meta)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        fail(Errc::Io, "cannot create checkpoint directory " + dir.string());
    }
    nlohmann::json manifest;
    manifest["format"] = kCheckpointFormat;
    manifest["version"] = 1;
    manifest["meta"] = meta;
    manifest["tensors"] = nlohmann::json::array();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const Param& p = *params[i];
        char file[64];
        std::snprintf(file, sizeof file, "t%04zu.f64", i);
        manifest["tensors"].push_back({{"name", p.name},
                                       {"shape", {p.value.rows(), p.value.cols()}},
                                       {"dtype", "float64"},
                                       {"trainable", p.trainable},
                                       {"file", file}});
        std::ofstream out(dir / file, std::ios::binary);
        if (!out) {
            fail(Errc::Io, "cannot write " + (dir / file).string());
        }
        for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
            for (Eigen::Index c = 0; c < p.value.cols(); ++c) {
                auto bits = std::bit_cast<std::uint64_t>(p.value(r, c));
                unsigned char bytes[8];
                for (int k = 0; k < 8; ++k) {
                    bytes[k] = static_cast<unsigned char>(bits >> (8 * k));
                }
                out.write(reinterpret_cast<const char*>(bytes), 8);
            }
        }
    }
    std::ofstream(dir / "manifest.json", std::ios::binary) << manifest.dump(2) << '\n';
}

struct TensorArchive {
    nlohmann::json meta;
    std::map<std::string, Matrix> tensors;
};

inline TensorArchive load_tensors(const std::filesystem::path& dir)
{
    std::ifstream in(dir / "manifest.json", std::ios::binary);
    if (!in) {
        fail(Errc::Io, "no checkpoint manifest in " + dir.string());
    }
    auto manifest = nlohmann::json::parse(in, nullptr, false);
    if (manifest.is_discarded() || !manifest.is_object() || manifest.value("format", "") != kCheckpointFormat) {
        fail(Errc::BadMagic, dir.string() + " is not a checkpoint");
    }
    TensorArchive ar;
    ar.meta = manifest["meta"];
    for (const auto& t : manifest.at("tensors")) {
        const auto rows = t.at("shape").at(0).get<Eigen::Index>();
        const auto cols = t.at("shape").at(1).get<Eigen::Index>();
        const auto file = dir / t.at("file").get<std::string>();
        std::ifstream data(file, std::ios::binary);
        if (!data) {
            fail(Errc::Io, "missing tensor file " + file.string());
        }
        Matrix m(rows, cols);
        for (Eigen::Index r = 0; r < rows; ++r) {
            for (Eigen::Index c = 0; c < cols; ++c) {
                unsigned char bytes[8];
                data.read(reinterpret_cast<char*>(bytes), 8);
                std::uint64_t bits = 0;
                for (int k = 0; k < 8; ++k) {
                    bits |= static_cast<std::uint64_t>(bytes[k]) << (8 * k);
                }
                m(r, c) = std::bit_cast<double>(bits);
            }
        }
        if (!data) {
            fail(Errc::Io, "short tensor file " + file.string());
        }
        ar.tensors.emplace(t.at("name").get<std::string>(), std::move(m));
    }
    return ar;
}

/// Copies archived values into `params` by name; every param must be present
/// with its exact shape.
inline void restore_tensors(const TensorArchive& ar, std::span<Param* const> params)
{
    for (auto* p : params) {
        const auto it = ar.tensors.find(p->name);
        if (it == ar.tensors.end()) {
            fail(Errc::ShapeMismatch, "checkpoint lacks tensor " + p->name);
        }
        if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
            fail(Errc::ShapeMismatch, "tensor " + p->name + " has shape " + shape_str(it->second) + ", expected " + shape_str(p->value));
        }
        p->value = it->second;
    }
}

} // namespace taxengine
