#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>

namespace taxengine {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Row-major single precision, the on-disk layout of bundle matrices.
using FloatMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Errc {
    EmptySegment,
    EmptyPath,
    UnknownNode,
    DuplicateChild,
    DepthExceeded,
    MissingModalityFile,
    RowCountMismatch,
    BadMagic,
    MalformedBundle,
    DegenerateData,
    DimMismatch,
    ShapeMismatch,
    BatchTooSmall,
    InvalidState,
    MissingModality,
    UnknownModality,
    DepthTooShallow,
    LabelOutsideTaxonomy,
    InvalidPath,
    IndexOutOfRange,
    LengthMismatch,
    EmptyInput,
    UnknownClusterId,
    DuplicateLabelAmongSiblings,
    LabelsMissing,
    TaxonomyMismatch,
    InvalidConfig,
    Io,
};

inline constexpr std::string_view errc_name(Errc code) noexcept
{
    switch (code) {
    case Errc::EmptySegment: return "EmptySegment";
    case Errc::EmptyPath: return "EmptyPath";
    case Errc::UnknownNode: return "UnknownNode";
    case Errc::DuplicateChild: return "DuplicateChild";
    case Errc::DepthExceeded: return "DepthExceeded";
    case Errc::MissingModalityFile: return "MissingModalityFile";
    case Errc::RowCountMismatch: return "RowCountMismatch";
    case Errc::BadMagic: return "BadMagic";
    case Errc::MalformedBundle: return "MalformedBundle";
    case Errc::DegenerateData: return "DegenerateData";
    case Errc::DimMismatch: return "DimMismatch";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::BatchTooSmall: return "BatchTooSmall";
    case Errc::InvalidState: return "InvalidState";
    case Errc::MissingModality: return "MissingModality";
    case Errc::UnknownModality: return "UnknownModality";
    case Errc::DepthTooShallow: return "DepthTooShallow";
    case Errc::LabelOutsideTaxonomy: return "LabelOutsideTaxonomy";
    case Errc::InvalidPath: return "InvalidPath";
    case Errc::IndexOutOfRange: return "IndexOutOfRange";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::EmptyInput: return "EmptyInput";
    case Errc::UnknownClusterId: return "UnknownClusterId";
    case Errc::DuplicateLabelAmongSiblings: return "DuplicateLabelAmongSiblings";
    case Errc::LabelsMissing: return "LabelsMissing";
    case Errc::TaxonomyMismatch: return "TaxonomyMismatch";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::Io: return "Io";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code)
    {
    }

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline std::string shape_str(const Matrix& m)
{
    return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

} // namespace taxengine
