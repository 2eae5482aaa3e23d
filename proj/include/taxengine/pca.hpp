#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxengine/core.hpp"

namespace taxengine {

inline constexpr double kDefaultVarianceTarget = 0.90;

struct PcaModel {
    Vector mean;                                 ///< input dim
    Matrix components;                           ///< k x dim, orthonormal rows
    std::vector<double> explained_variance;      ///< eigenvalues of the kept components
    std::vector<double> explained_variance_ratio;///< eigenvalue / total variance

    std::size_t input_dim() const noexcept { return static_cast<std::size_t>(mean.size()); }
    std::size_t output_dim() const noexcept { return static_cast<std::size_t>(components.rows()); }
};

namespace detail {

struct Eigenbasis {
    Vector mean;
    Vector values;  ///< descending, clipped at zero
    Matrix vectors; ///< columns, sign-normalized
    double total = 0.0;
};

inline Eigenbasis covariance_eigenbasis(const Matrix& X)
{
    if (X.rows() < 2 || X.cols() < 1) {
        fail(Errc::EmptyInput, "PCA needs at least 2 rows and 1 column, got " + shape_str(X));
    }
    Eigenbasis out;
    out.mean = X.colwise().mean().transpose();
    const Matrix centered = X.rowwise() - out.mean.transpose();
    const Matrix cov = (centered.transpose() * centered) / static_cast<double>(X.rows() - 1);
    out.total = cov.trace();
    // rounding in the mean leaves ~1e-32 |x|^2 of spurious variance on constant data
    if (!(out.total > 1e-24 * std::max(1.0, out.mean.squaredNorm()))) {
        fail(Errc::DegenerateData, "all rows are identical");
    }
    Eigen::SelfAdjointEigenSolver<Matrix> solver(cov);
    if (solver.info() != Eigen::Success) {
        fail(Errc::DegenerateData, "covariance eigendecomposition did not converge");
    }
    const auto d = cov.rows();
    out.values.resize(d);
    out.vectors.resize(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
        const auto src = d - 1 - i;
        out.values(i) = std::max(0.0, solver.eigenvalues()(src));
        Vector v = solver.eigenvectors().col(src);
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0.0) {
            v = -v;
        }
        out.vectors.col(i) = v;
    }
    return out;
}

inline PcaModel take_components(const Eigenbasis& basis, Eigen::Index k)
{
    PcaModel m;
    m.mean = basis.mean;
    m.components = basis.vectors.leftCols(k).transpose();
    for (Eigen::Index i = 0; i < k; ++i) {
        m.explained_variance.push_back(basis.values(i));
        m.explained_variance_ratio.push_back(basis.values(i) / basis.total);
    }
    return m;
}

} // namespace detail

/// Keeps the fewest leading components whose cumulative explained ratio
/// reaches `variance_target`.
inline PcaModel pca_fit(const Matrix& X, double variance_target = kDefaultVarianceTarget)
{
    if (!(variance_target > 0.0 && variance_target <= 1.0)) {
        fail(Errc::InvalidConfig, "variance_target must lie in (0, 1]");
    }
    const auto basis = detail::covariance_eigenbasis(X);
    const auto d = basis.values.size();
    double cumulative = 0.0;
    Eigen::Index k = 0;
    while (k < d) {
        cumulative += basis.values(k) / basis.total;
        ++k;
        if (cumulative >= variance_target - 1e-12) {
            break;
        }
    }
    return detail::take_components(basis, k);
}

/// Fixed output width, capped at the input width.
inline PcaModel pca_fit_dims(const Matrix& X, std::size_t dims)
{
    if (dims < 1) {
        fail(Errc::InvalidConfig, "PCA target dim must be >= 1");
    }
    const auto basis = detail::covariance_eigenbasis(X);
    return detail::take_components(basis, std::min<Eigen::Index>(static_cast<Eigen::Index>(dims), basis.values.size()));
}

inline Matrix pca_transform(const PcaModel& model, const Matrix& X)
{
    if (static_cast<std::size_t>(X.cols()) != model.input_dim()) {
        fail(Errc::DimMismatch, "PCA model expects width " + std::to_string(model.input_dim()) + ", got " + std::to_string(X.cols()));
    }
    return (X.rowwise() - model.mean.transpose()) * model.components.transpose();
}

inline Matrix pca_inverse_transform(const PcaModel& model, const Matrix& Z)
{
    if (static_cast<std::size_t>(Z.cols()) != model.output_dim()) {
        fail(Errc::DimMismatch, "PCA model has " + std::to_string(model.output_dim()) + " components, got " + std::to_string(Z.cols()));
    }
    return (Z * model.components).rowwise() + model.mean.transpose();
}

inline Vector l2_normalize(const Vector& v)
{
    const double norm = v.norm();
    if (norm == 0.0) {
        return v;
    }
    return v / norm;
}

/// Row-wise l2_normalize.
inline Matrix l2_normalize_rows(const Matrix& X)
{
    Matrix out = X;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const double norm = out.row(r).norm();
        if (norm > 0.0) {
            out.row(r) /= norm;
        }
    }
    return out;
}

} // namespace taxengine
