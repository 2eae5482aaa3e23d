#include <gtest/gtest.h>

#include "oracles.hpp"
#include "support.hpp"

using namespace taxengine;
using namespace testing_support;

namespace {

Matrix gaussian(std::size_t n, std::size_t d, std::uint64_t seed, double sigma = 1.0)
{
    CounterRng rng(seed, 11);
    Matrix X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < X.size(); ++i) {
        X.data()[i] = sigma * rng.normal();
    }
    return X;
}

} // namespace

TEST(Pca, LineIsRankOne)
{
    Matrix X(6, 2);
    for (int i = 0; i < 6; ++i) {
        X(i, 0) = i - 2.5;
        X(i, 1) = 2.0 * (i - 2.5);
    }
    const auto m = pca_fit(X, 0.90);
    ASSERT_EQ(m.output_dim(), 1u);
    EXPECT_NEAR(m.explained_variance_ratio[0], 1.0, 1e-6);
    const Matrix z = pca_transform(m, X);
    EXPECT_NEAR((pca_inverse_transform(m, z) - X).cwiseAbs().maxCoeff(), 0.0, 1e-5);
    // largest-magnitude loading is positive
    EXPECT_GT(m.components(0, 1), 0.0);
}

TEST(Pca, DefaultTargetIsNinetyPercent)
{
    EXPECT_DOUBLE_EQ(kDefaultVarianceTarget, 0.90);
}

TEST(Pca, IsotropicNeedsBothAxes)
{
    const auto m = pca_fit(gaussian(10000, 2, 1), 0.9);
    EXPECT_EQ(m.output_dim(), 2u);
    EXPECT_NEAR(m.explained_variance_ratio[0], 0.5, 0.02);
}

TEST(Pca, TransformOfMeanIsZero)
{
    const Matrix X = gaussian(50, 4, 2);
    const auto m = pca_fit(X, 0.99);
    const Matrix mean = m.mean.transpose();
    EXPECT_LT(pca_transform(m, mean).norm(), 1e-12);
}

TEST(Pca, Errors)
{
    const Matrix same = Matrix::Constant(5, 3, 0.1);
    EXPECT_EQ(code_of([&] { pca_fit(same, 0.9); }), Errc::DegenerateData);
    const auto m = pca_fit(gaussian(20, 3, 3), 0.9);
    EXPECT_EQ(code_of([&] { pca_transform(m, Matrix::Zero(2, 4)); }), Errc::DimMismatch);
}

TEST(PcaProperties, FullRankPreservesDistances)
{
    const Matrix X = gaussian(40, 6, 4);
    const auto m = pca_fit(X, 1.0);
    ASSERT_EQ(m.output_dim(), 6u);
    const Matrix Z = pca_transform(m, X);
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < X.rows(); ++j) {
            EXPECT_NEAR((X.row(i) - X.row(j)).norm(), (Z.row(i) - Z.row(j)).norm(), 1e-4);
        }
    }
}

TEST(PcaProperties, RatiosMatchJacobiOracle)
{
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Matrix X = gaussian(300, 7, 10 + seed);
        // anisotropic scaling so the spectrum is spread
        for (Eigen::Index c = 0; c < X.cols(); ++c) {
            X.col(c) *= 1.0 + double(c);
        }
        X.col(1) += 0.5 * X.col(3);
        const auto m = pca_fit(X, 1.0);
        const auto ref = oracle::explained_ratios(X);
        ASSERT_EQ(m.explained_variance_ratio.size(), ref.size());
        for (std::size_t i = 0; i < ref.size(); ++i) {
            EXPECT_NEAR(m.explained_variance_ratio[i], ref[i], 1e-5);
            if (i > 0) {
                EXPECT_LE(m.explained_variance_ratio[i], m.explained_variance_ratio[i - 1]);
            }
        }
        const Matrix gram = m.components * m.components.transpose();
        EXPECT_LT((gram - Matrix::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff(), 1e-4);
    }
}

TEST(PcaProperties, Deterministic)
{
    const Matrix X = gaussian(100, 5, 21);
    const auto a = pca_fit(X, 0.9);
    const auto b = pca_fit(X, 0.9);
    EXPECT_EQ(a.components, b.components);
    EXPECT_EQ(a.mean, b.mean);
}
