#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <nlohmann/json.hpp>

#include "cadpred/cohort.hpp"
#include "cadpred/error.hpp"

namespace cadpred {

/// x -> ln(1 + x), entrywise.
inline Matrix log1p_matrix(const Matrix& values)
{
    Matrix out(values.rows(), values.cols());
    for (Index j = 0; j < values.cols(); ++j)
        for (Index i = 0; i < values.rows(); ++i) {
            const double x = values(i, j);
            if (!(x > -1.0))
                fail(Errc::DomainError, "log1p needs entries > -1, got " + std::to_string(x) + " at (" +
                                            std::to_string(i) + ", " + std::to_string(j) + ")");
            out(i, j) = std::log1p(x);
        }
    return out;
}

/// Column means and sample (n-1) standard deviations.
struct Standardizer {
    Vector means;
    Vector sds;
    std::vector<std::string> column_names;

    Index size() const { return means.size(); }
};

inline Standardizer fit_standardizer(const Matrix& values, std::vector<std::string> names = {})
{
    const Index n = values.rows();
    if (n < 2)
        fail(Errc::TooFewRows, "standardizer needs at least 2 rows");
    if (!values.allFinite())
        fail(Errc::DomainError, "standardizer input has missing or non-finite entries");
    if (names.empty())
        for (Index j = 0; j < values.cols(); ++j)
            names.push_back("x" + std::to_string(j + 1));
    Standardizer s;
    s.means = values.colwise().mean().transpose();
    s.sds.resize(values.cols());
    for (Index j = 0; j < values.cols(); ++j) {
        const double ss = (values.col(j).array() - s.means(j)).square().sum();
        s.sds(j) = std::sqrt(ss / static_cast<double>(n - 1));
        // Relative test: a column that differs only by rounding is constant.
        if (!(s.sds(j) > 1e-12 * std::max(1.0, std::abs(s.means(j)))))
            fail(Errc::ConstantColumn, names[static_cast<std::size_t>(j)]);
    }
    s.column_names = std::move(names);
    return s;
}

inline Matrix apply_standardizer(const Standardizer& s, const Matrix& values)
{
    if (values.cols() != s.size())
        fail(Errc::DimensionMismatch, "standardizer has " + std::to_string(s.size()) + " columns, matrix has " +
                                          std::to_string(values.cols()));
    return (values.rowwise() - s.means.transpose()).array().rowwise() / s.sds.transpose().array();
}

/// Principal axes of a standardized matrix.
///
/// `loadings` holds all p right singular vectors (columns, orthonormal,
/// largest-magnitude entry positive); the first `k_selected` are the factors
/// used downstream.
struct PcaBasis {
    Matrix loadings;
    Vector explained_fraction;
    Standardizer scaler;
    Index k_selected = 0;
};

/// Smallest k whose cumulative explained fraction exceeds `threshold`.
inline Index select_components(const Vector& explained_fraction, double threshold = 0.95)
{
    if (!(threshold > 0.0 && threshold <= 1.0))
        fail(Errc::OutOfRange, "threshold must be in (0,1]");
    double cum = 0.0;
    for (Index k = 0; k < explained_fraction.size(); ++k) {
        cum += explained_fraction(k);
        if (cum > threshold)
            return k + 1;
    }
    return explained_fraction.size();
}

inline Index select_components(const PcaBasis& basis, double threshold = 0.95)
{
    return select_components(basis.explained_fraction, threshold);
}

/// SVD of an already standardized matrix. The scaler is stored as given.
inline PcaBasis pca_fit_standardized(const Matrix& standardized, Standardizer scaler, double threshold = 0.95)
{
    const Index n = standardized.rows();
    const Index p = standardized.cols();
    if (n < 2)
        fail(Errc::TooFewRows, "PCA needs more than one row");
    Eigen::BDCSVD<Matrix> svd(standardized, Eigen::ComputeFullV);
    const Vector& sv = svd.singularValues();
    const double total = sv.squaredNorm();
    if (!(total > 0.0))
        fail(Errc::DegenerateMatrix, "matrix has rank 0");

    PcaBasis b;
    b.loadings = svd.matrixV();
    b.explained_fraction = Vector::Zero(p);
    for (Index k = 0; k < sv.size(); ++k)
        b.explained_fraction(k) = sv(k) * sv(k) / total;
    for (Index k = 0; k < p; ++k) {
        Index arg = 0;
        b.loadings.col(k).cwiseAbs().maxCoeff(&arg);
        if (b.loadings(arg, k) < 0.0)
            b.loadings.col(k) *= -1.0;
    }
    b.scaler = std::move(scaler);
    b.k_selected = select_components(b.explained_fraction, threshold);
    return b;
}

/// Standardizes `values` with its own statistics, then runs the SVD.
inline PcaBasis pca_fit(const Matrix& values, double threshold = 0.95, std::vector<std::string> names = {})
{
    Standardizer s = fit_standardizer(values, std::move(names));
    const Matrix z = apply_standardizer(s, values);
    return pca_fit_standardized(z, std::move(s), threshold);
}

/// Scores of an already standardized matrix on the first k loadings.
inline Matrix pca_scores(const PcaBasis& basis, const Matrix& standardized, Index k = -1)
{
    if (standardized.cols() != basis.loadings.rows())
        fail(Errc::DimensionMismatch, "matrix has " + std::to_string(standardized.cols()) + " columns, basis has " +
                                          std::to_string(basis.loadings.rows()));
    if (k < 0)
        k = basis.k_selected;
    return standardized * basis.loadings.leftCols(k);
}

/// Standardizes with the basis' scaler, then projects onto the first k factors.
inline Matrix pca_project(const PcaBasis& basis, const Matrix& values, Index k = -1)
{
    if (values.cols() != basis.loadings.rows())
        fail(Errc::DimensionMismatch, "matrix has " + std::to_string(values.cols()) + " columns, basis has " +
                                          std::to_string(basis.loadings.rows()));
    return pca_scores(basis, apply_standardizer(basis.scaler, values), k);
}

/// Back-projection of scores on the first scores.cols() loadings.
inline Matrix pca_reconstruct(const PcaBasis& basis, const Matrix& scores)
{
    return scores * basis.loadings.leftCols(scores.cols()).transpose();
}

inline nlohmann::json basis_json(const PcaBasis& b)
{
    auto vec = [](const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
    nlohmann::json loadings = nlohmann::json::array();
    for (Index k = 0; k < b.loadings.cols(); ++k)
        loadings.push_back(vec(b.loadings.col(k)));
    return {{"columns", b.scaler.column_names},
            {"means", vec(b.scaler.means)},
            {"sds", vec(b.scaler.sds)},
            {"explained_fraction", vec(b.explained_fraction)},
            {"k_selected", b.k_selected},
            {"loadings_by_component", loadings}};
}

inline PcaBasis basis_from_json(const nlohmann::json& j)
{
    auto vec = [](const nlohmann::json& a) {
        auto v = a.get<std::vector<double>>();
        return Vector(Eigen::Map<Vector>(v.data(), static_cast<Index>(v.size())));
    };
    PcaBasis b;
    b.scaler.column_names = j.at("columns").get<std::vector<std::string>>();
    b.scaler.means = vec(j.at("means"));
    b.scaler.sds = vec(j.at("sds"));
    b.explained_fraction = vec(j.at("explained_fraction"));
    b.k_selected = j.at("k_selected").get<Index>();
    const auto& comps = j.at("loadings_by_component");
    const auto p = b.scaler.means.size();
    b.loadings.resize(p, static_cast<Index>(comps.size()));
    for (std::size_t k = 0; k < comps.size(); ++k)
        b.loadings.col(static_cast<Index>(k)) = vec(comps[k]);
    return b;
}

} // namespace cadpred
