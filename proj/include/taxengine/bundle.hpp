#pragma once

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxengine/core.hpp"
#include "taxengine/taxonomy.hpp"

namespace taxengine {

inline constexpr int kBundleVersion = 1;

struct Modality {
    std::string name;
    FloatMatrix values; ///< n x dim
};

/// In-memory form of a bundle directory: per-modality matrices with aligned
/// record ids and label paths, plus the taxonomy the labels live in.
struct EmbeddingBundle {
    Taxonomy taxonomy;
    std::vector<std::string> ids;
    std::vector<CategoryPath> labels;
    std::vector<Modality> modalities;

    std::size_t size() const noexcept { return ids.size(); }

    const Modality* find(std::string_view name) const noexcept
    {
        for (const auto& m : modalities) {
            if (m.name == name) {
                return &m;
            }
        }
        return nullptr;
    }

    const Modality& modality(std::string_view name) const
    {
        const auto* m = find(name);
        if (m == nullptr) {
            fail(Errc::MissingModality, "bundle has no modality '" + std::string(name) + "'");
        }
        return *m;
    }

    Modality& modality(std::string_view name) { return const_cast<Modality&>(std::as_const(*this).modality(name)); }

    std::size_t dim(std::string_view name) const { return static_cast<std::size_t>(modality(name).values.cols()); }

    /// Selected rows of a modality, widened to double.
    Matrix rows(std::string_view name, std::span<const std::size_t> indices) const
    {
        const auto& src = modality(name).values;
        Matrix out(static_cast<Eigen::Index>(indices.size()), src.cols());
        for (std::size_t r = 0; r < indices.size(); ++r) {
            out.row(static_cast<Eigen::Index>(r)) = src.row(static_cast<Eigen::Index>(indices[r])).cast<double>();
        }
        return out;
    }

    Matrix matrix(std::string_view name) const { return modality(name).values.cast<double>(); }

    /// Throws on the first broken invariant.
    void check() const
    {
        if (labels.size() != ids.size()) {
            fail(Errc::RowCountMismatch, std::to_string(ids.size()) + " ids but " + std::to_string(labels.size()) + " labels");
        }
        for (const auto& m : modalities) {
            if (static_cast<std::size_t>(m.values.rows()) != ids.size()) {
                fail(Errc::RowCountMismatch, "modality '" + m.name + "' has " + std::to_string(m.values.rows()) +
                                                 " rows, expected " + std::to_string(ids.size()));
            }
            if (m.values.cols() < 1) {
                fail(Errc::DimMismatch, "modality '" + m.name + "' has zero width");
            }
        }
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (!taxonomy.validate_path(labels[i])) {
                fail(Errc::LabelOutsideTaxonomy, "record '" + ids[i] + "' label '" + labels[i].join() + "'");
            }
        }
    }
};

inline EmbeddingBundle subset(const EmbeddingBundle& b, std::span<const std::size_t> indices)
{
    EmbeddingBundle out;
    out.taxonomy = b.taxonomy;
    out.ids.reserve(indices.size());
    out.labels.reserve(indices.size());
    for (const auto i : indices) {
        out.ids.push_back(b.ids.at(i));
        out.labels.push_back(b.labels.at(i));
    }
    for (const auto& m : b.modalities) {
        Modality sub{m.name, FloatMatrix(static_cast<Eigen::Index>(indices.size()), m.values.cols())};
        for (std::size_t r = 0; r < indices.size(); ++r) {
            sub.values.row(static_cast<Eigen::Index>(r)) = m.values.row(static_cast<Eigen::Index>(indices[r]));
        }
        out.modalities.push_back(std::move(sub));
    }
    return out;
}

namespace detail {

inline void write_f32_le(std::ostream& out, const float* data, std::size_t count)
{
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            auto bits = std::bit_cast<std::uint32_t>(data[i]);
            bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) | ((bits >> 8) & 0xFF00u) | (bits >> 24);
            out.write(reinterpret_cast<const char*>(&bits), 4);
        }
    }
}

inline void read_f32_le(std::istream& in, float* data, std::size_t count)
{
    in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
    if constexpr (std::endian::native != std::endian::little) {
        for (std::size_t i = 0; i < count; ++i) {
            auto bits = std::bit_cast<std::uint32_t>(data[i]);
            bits = ((bits & 0xFFu) << 24) | ((bits & 0xFF00u) << 8) | ((bits >> 8) & 0xFF00u) | (bits >> 24);
            data[i] = std::bit_cast<float>(bits);
        }
    }
}

inline bool safe_token(std::string_view s) noexcept
{
    return !s.empty() && s.find_first_of("\t\r\n") == std::string_view::npos;
}

inline std::string read_text(const std::filesystem::path& file, Errc missing)
{
    std::ifstream in(file, std::ios::binary);
    if (!in) {
        fail(missing, "cannot open " + file.string());
    }
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

inline std::vector<std::string> split_lines(const std::string& text)
{
    std::vector<std::string> lines;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (!line.empty()) {
            lines.push_back(line);
        }
    }
    return lines;
}

} // namespace detail

inline void save_bundle(const EmbeddingBundle& bundle, const std::filesystem::path& dir)
{
    bundle.check();
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        fail(Errc::Io, "cannot create bundle directory " + dir.string() + ": " + ec.message());
    }

    nlohmann::json manifest;
    manifest["version"] = kBundleVersion;
    manifest["n"] = bundle.size();
    manifest["labels_file"] = "labels.tsv";
    manifest["taxonomy_file"] = "taxonomy.txt";
    manifest["ids_file"] = "ids.txt";
    manifest["modalities"] = nlohmann::json::array();
    for (const auto& m : bundle.modalities) {
        if (!detail::safe_token(m.name) || m.name.find('/') != std::string::npos) {
            fail(Errc::MalformedBundle, "modality name '" + m.name + "' is not a safe file stem");
        }
        const std::string file = m.name + ".f32";
        manifest["modalities"].push_back({{"name", m.name}, {"dim", m.values.cols()}, {"file", file}});
        std::ofstream out(dir / file, std::ios::binary);
        if (!out) {
            fail(Errc::Io, "cannot write " + (dir / file).string());
        }
        detail::write_f32_le(out, m.values.data(), static_cast<std::size_t>(m.values.size()));
    }

    std::ofstream ids(dir / "ids.txt", std::ios::binary);
    std::ofstream labels(dir / "labels.tsv", std::ios::binary);
    for (std::size_t i = 0; i < bundle.size(); ++i) {
        if (!detail::safe_token(bundle.ids[i])) {
            fail(Errc::MalformedBundle, "record id at row " + std::to_string(i) + " is empty or contains tab/newline");
        }
        ids << bundle.ids[i] << '\n';
        labels << bundle.ids[i] << '\t' << bundle.labels[i].join() << '\n';
    }
    bundle.taxonomy.save(dir / "taxonomy.txt");
    std::ofstream(dir / "manifest.json", std::ios::binary) << manifest.dump(2) << '\n';
}

inline EmbeddingBundle load_bundle(const std::filesystem::path& dir)
{
    const auto manifest_text = detail::read_text(dir / "manifest.json", Errc::Io);
    nlohmann::json manifest = nlohmann::json::parse(manifest_text, nullptr, false);
    if (manifest.is_discarded() || !manifest.is_object() || !manifest.contains("version") ||
        manifest["version"] != kBundleVersion) {
        fail(Errc::BadMagic, "manifest.json is not a version-1 bundle manifest");
    }
    std::size_t n = 0;
    try {
        n = manifest.at("n").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::MalformedBundle, std::string("manifest field 'n': ") + e.what());
    }
    const auto field = [&](const char* key, const char* fallback) {
        return manifest.contains(key) ? manifest[key].get<std::string>() : std::string(fallback);
    };

    EmbeddingBundle bundle;
    bundle.taxonomy = Taxonomy::load(dir / field("taxonomy_file", "taxonomy.txt"));
    bundle.ids = detail::split_lines(detail::read_text(dir / field("ids_file", "ids.txt"), Errc::MalformedBundle));
    if (bundle.ids.size() != n) {
        fail(Errc::RowCountMismatch, "ids file has " + std::to_string(bundle.ids.size()) + " rows, manifest says " + std::to_string(n));
    }

    const auto label_lines = detail::split_lines(detail::read_text(dir / field("labels_file", "labels.tsv"), Errc::MalformedBundle));
    if (label_lines.size() != n) {
        fail(Errc::RowCountMismatch, "labels file has " + std::to_string(label_lines.size()) + " rows, manifest says " + std::to_string(n));
    }
    bundle.labels.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto tab = label_lines[i].find('\t');
        if (tab == std::string::npos) {
            fail(Errc::MalformedBundle, "labels row " + std::to_string(i + 1) + " has no tab");
        }
        if (label_lines[i].substr(0, tab) != bundle.ids[i]) {
            fail(Errc::MalformedBundle, "labels row " + std::to_string(i + 1) + " id does not match ids file");
        }
        bundle.labels.push_back(parse_path(std::string_view(label_lines[i]).substr(tab + 1)));
    }

    if (!manifest.contains("modalities") || !manifest["modalities"].is_array()) {
        fail(Errc::MalformedBundle, "manifest has no modalities array");
    }
    for (const auto& desc : manifest["modalities"]) {
        Modality m;
        std::size_t dim = 0;
        std::string file;
        try {
            m.name = desc.at("name").get<std::string>();
            dim = desc.at("dim").get<std::size_t>();
            file = desc.at("file").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            fail(Errc::MalformedBundle, std::string("modality descriptor: ") + e.what());
        }
        if (dim < 1) {
            fail(Errc::DimMismatch, "modality '" + m.name + "' declares dim 0");
        }
        const auto path = dir / file;
        std::error_code ec;
        const auto bytes = std::filesystem::file_size(path, ec);
        if (ec) {
            fail(Errc::MissingModalityFile, "modality '" + m.name + "' file " + path.string());
        }
        const auto row_bytes = dim * sizeof(float);
        if (bytes % row_bytes != 0 || bytes / row_bytes != n) {
            fail(Errc::RowCountMismatch, "modality '" + m.name + "' file holds " + std::to_string(bytes / row_bytes) +
                                             " rows of width " + std::to_string(dim) + ", manifest says " + std::to_string(n));
        }
        m.values.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
        std::ifstream in(path, std::ios::binary);
        detail::read_f32_le(in, m.values.data(), n * dim);
        if (!in) {
            fail(Errc::Io, "short read on " + path.string());
        }
        bundle.modalities.push_back(std::move(m));
    }
    bundle.check();
    return bundle;
}

} // namespace taxengine
