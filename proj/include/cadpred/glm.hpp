#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "cadpred/cohort.hpp"
#include "cadpred/error.hpp"
#include "cadpred/impute.hpp"
#include "cadpred/parallel.hpp"
#include "cadpred/transform.hpp"

namespace cadpred {

inline double sigmoid(double eta)
{
    if (eta >= 0.0)
        return 1.0 / (1.0 + std::exp(-eta));
    const double e = std::exp(eta);
    return e / (1.0 + e);
}

/// log(1 + exp(eta)) without overflow.
inline double log1pexp(double eta)
{
    return eta > 0.0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta));
}

/// Bernoulli log-likelihood of labels y under linear predictor eta.
inline double logistic_loglik(const Vector& eta, const Vector& y)
{
    double ll = 0.0;
    for (Index i = 0; i < eta.size(); ++i)
        ll += y(i) * eta(i) - log1pexp(eta(i));
    return ll;
}

struct GlmOptions {
    double tol = 1e-8;
    int max_iter = 100;
    /// Instrumentation: log-likelihood after each accepted step.
    std::vector<double>* trace = nullptr;
};

struct GlmFit {
    Vector coefficients;      // intercept first when the design has one
    Vector standard_errors;
    double log_likelihood = 0.0;
    double gradient_norm = 0.0; // ||X^T (y - mu)||_inf at the returned coefficients
    bool converged = false;
    bool separated = false;
    int iterations = 0;
};

/// Unpenalized logistic regression by Newton/IRLS with step halving.
///
/// Perfect separation is reported through `separated` (and converged=false)
/// rather than thrown, so screening loops can carry on.
inline GlmFit fit_logistic(const Matrix& x, const Vector& y, const GlmOptions& opt = {})
{
    const Index n = x.rows();
    const Index k = x.cols();
    if (y.size() != n)
        fail(Errc::LengthMismatch, "design has " + std::to_string(n) + " rows, outcome " + std::to_string(y.size()));
    const double ysum = y.sum();
    if (ysum <= 0.0 || ysum >= static_cast<double>(n))
        fail(Errc::NoClassVariation, "outcome has a single class");
    if (n <= k)
        fail(Errc::SingularInformation, "need more rows than columns");

    GlmFit fit;
    Vector beta = Vector::Zero(k);
    Vector eta = Vector::Zero(n);
    double ll = logistic_loglik(eta, y);
    Vector mu(n), w(n), grad(k);
    Matrix info(k, k);

    auto evaluate = [&](const Vector& e) {
        for (Index i = 0; i < n; ++i) {
            mu(i) = sigmoid(e(i));
            w(i) = mu(i) * (1.0 - mu(i));
        }
        grad.noalias() = x.transpose() * (y - mu);
    };
    evaluate(eta);

    for (int it = 0; it < opt.max_iter; ++it) {
        fit.iterations = it;
        // Every fitted probability within 1e-6 of its label: separated data,
        // the likelihood has no finite maximizer.
        if ((y - mu).cwiseAbs().maxCoeff() < 1e-6) {
            fit.separated = true;
            break;
        }
        // One further Newton step once under tolerance; convergence is
        // quadratic, so it takes the score down to rounding level.
        if (grad.lpNorm<Eigen::Infinity>() < opt.tol) {
            if (fit.converged)
                break;
            fit.converged = true;
        }
        info.noalias() = x.transpose() * w.asDiagonal() * x;
        Eigen::LDLT<Matrix> ldlt(info);
        if (ldlt.info() != Eigen::Success || !(ldlt.rcond() > 1e-14)) {
            if (w.maxCoeff() < 1e-12) {
                fit.separated = true;
                break;
            }
            fail(Errc::SingularInformation, "information matrix is singular");
        }
        const Vector step = ldlt.solve(grad);
        double scale = 1.0;
        Vector trial_beta;
        Vector trial_eta;
        double trial_ll = -std::numeric_limits<double>::infinity();
        for (int half = 0; half < 40; ++half) {
            trial_beta = beta + scale * step;
            trial_eta.noalias() = x * trial_beta;
            trial_ll = logistic_loglik(trial_eta, y);
            // Near the optimum the likelihood change drowns in rounding; take
            // the full Newton step there instead of halving towards nothing.
            if (trial_ll >= ll || (half == 0 && ll - trial_ll <= 1e-12 * (1.0 + std::abs(ll))))
                break;
            scale *= 0.5;
        }
        if (!(trial_ll >= ll) && !(scale == 1.0 && ll - trial_ll <= 1e-12 * (1.0 + std::abs(ll)))) {
            // No ascent possible at machine precision.
            fit.iterations = it + 1;
            fit.converged = grad.lpNorm<Eigen::Infinity>() < opt.tol;
            break;
        }
        beta = trial_beta;
        eta = trial_eta;
        ll = trial_ll;
        evaluate(eta);
        if (opt.trace)
            opt.trace->push_back(ll);
        fit.iterations = it + 1;
        if (beta.lpNorm<Eigen::Infinity>() > 1e6) {
            fit.separated = true;
            break;
        }
    }
    if (!fit.converged && !fit.separated && grad.lpNorm<Eigen::Infinity>() < opt.tol)
        fit.converged = true;
    if (fit.separated)
        fit.converged = false;

    fit.coefficients = beta;
    fit.log_likelihood = ll;
    fit.gradient_norm = grad.lpNorm<Eigen::Infinity>();
    info.noalias() = x.transpose() * w.asDiagonal() * x;
    Eigen::LDLT<Matrix> ldlt(info);
    if (ldlt.info() == Eigen::Success && ldlt.rcond() > 0.0) {
        const Matrix cov = ldlt.solve(Matrix::Identity(k, k));
        fit.standard_errors = cov.diagonal().cwiseMax(0.0).cwiseSqrt();
    } else {
        fit.standard_errors = Vector::Constant(k, std::numeric_limits<double>::infinity());
    }
    return fit;
}

inline Vector predict_logistic(const Vector& coefficients, const Matrix& x)
{
    if (x.cols() != coefficients.size())
        fail(Errc::DimensionMismatch, "design/coefficient size mismatch");
    Vector eta = x * coefficients;
    for (Index i = 0; i < eta.size(); ++i)
        eta(i) = sigmoid(eta(i));
    return eta;
}

/// Two-sided p-value of a Wald statistic against the standard normal.
inline double wald_p_value(double estimate, double variance)
{
    if (!(variance > 0.0) || !std::isfinite(variance))
        return std::numeric_limits<double>::quiet_NaN();
    const double z = estimate / std::sqrt(variance);
    return std::erfc(std::abs(z) / std::sqrt(2.0));
}

/// Prepends an intercept column.
inline Matrix with_intercept(const Matrix& x)
{
    Matrix d(x.rows(), x.cols() + 1);
    d.col(0).setOnes();
    d.rightCols(x.cols()) = x;
    return d;
}

struct ScreeningRecord {
    std::string name;
    double coefficient = std::numeric_limits<double>::quiet_NaN();
    double standard_error = std::numeric_limits<double>::quiet_NaN();
    double p_value = std::numeric_limits<double>::quiet_NaN();
    bool bonferroni_significant = false;
    std::string error; // non-empty when the fit failed in some imputation
};

struct ScreeningResult {
    std::vector<ScreeningRecord> records;
    std::size_t n_tests = 0;
    double alpha = 0.05;

    double threshold() const { return alpha / static_cast<double>(n_tests); }
};

inline double bonferroni_threshold(double alpha, std::size_t n_tests) { return alpha / static_cast<double>(n_tests); }

/// Per-metabolite logistic screening on log(1+x), pooled across imputations
/// with Rubin's rules and flagged at alpha / (number of metabolites).
///
/// `rows` selects the participants used (all rows when empty).
inline ScreeningResult screen_metabolites(std::span<const CohortTable> tables, bool adjusted,
                                          const std::vector<std::size_t>& rows = {}, double alpha = 0.05,
                                          unsigned threads = 1)
{
    if (tables.empty())
        fail(Errc::EmptyInput, "no imputed tables to screen");
    const auto& schema = tables[0].schema;
    const Index n_cov = tables[0].n_covariates();
    const Index n_met = tables[0].n_metabolites();

    std::vector<std::size_t> use = rows;
    if (use.empty())
        for (Index i = 0; i < tables[0].n_rows(); ++i)
            use.push_back(static_cast<std::size_t>(i));
    const auto n = static_cast<Index>(use.size());

    std::vector<Vector> ys;
    for (const auto& t : tables) {
        if (!t.complete())
            fail(Errc::InvalidConfig, "screening needs complete (imputed) tables");
        Vector y(n);
        for (Index r = 0; r < n; ++r)
            y(r) = t.outcome[use[static_cast<std::size_t>(r)]];
        ys.push_back(std::move(y));
    }

    ScreeningResult res;
    res.alpha = alpha;
    res.n_tests = static_cast<std::size_t>(n_met);
    res.records.resize(static_cast<std::size_t>(n_met));

    parallel_for(static_cast<std::size_t>(n_met), threads, [&](std::size_t jm) {
        auto& rec = res.records[jm];
        rec.name = schema.metabolite_names[jm];
        const Index col = n_cov + static_cast<Index>(jm);
        std::vector<ImputationEstimate> est;
        try {
            for (std::size_t m = 0; m < tables.size(); ++m) {
                const auto& t = tables[m];
                Matrix x(n, 2 + (adjusted ? n_cov : 0));
                x.col(0).setOnes();
                for (Index r = 0; r < n; ++r) {
                    const auto i = static_cast<Index>(use[static_cast<std::size_t>(r)]);
                    const double v = t.values(i, col);
                    if (!(v > -1.0))
                        fail(Errc::DomainError, "log1p needs values > -1");
                    x(r, 1) = std::log1p(v);
                    if (adjusted)
                        for (Index c = 0; c < n_cov; ++c)
                            x(r, 2 + c) = t.values(i, c);
                }
                const GlmFit f = fit_logistic(x, ys[m]);
                if (f.separated)
                    fail(Errc::NoConvergence, "separation in imputation " + std::to_string(m + 1));
                ImputationEstimate e;
                e.point = Vector::Constant(1, f.coefficients(1));
                e.variance = Vector::Constant(1, f.standard_errors(1) * f.standard_errors(1));
                est.push_back(std::move(e));
            }
            double point = 0.0, var = 0.0;
            if (est.size() >= 2) {
                const auto pooled = rubin_pool(est);
                point = pooled.point(0);
                var = pooled.total_var(0);
            } else {
                point = est[0].point(0);
                var = est[0].variance(0);
            }
            rec.coefficient = point;
            rec.standard_error = std::sqrt(var);
            rec.p_value = wald_p_value(point, var);
            rec.bonferroni_significant = rec.p_value < alpha / static_cast<double>(n_met);
        } catch (const Error& e) {
            rec.error = e.what();
        }
    });
    return res;
}

struct FactorModels {
    std::vector<GlmFit> single;      // outcome ~ factor_k [+ covariates]
    std::vector<double> single_p;    // Wald p of the factor coefficient
    std::vector<bool> single_significant; // Bonferroni over k factors
    GlmFit joint;                    // outcome ~ all factors [+ covariates]
    std::vector<double> joint_p;     // per factor
    bool adjusted = false;
    double alpha = 0.05;
};

/// Joint design for the multiple-factor model: [1, scores, covariates?].
inline Matrix factor_design(const Matrix& scores, const Matrix& covariates, bool adjusted)
{
    Matrix x(scores.rows(), 1 + scores.cols() + (adjusted ? covariates.cols() : 0));
    x.col(0).setOnes();
    x.middleCols(1, scores.cols()) = scores;
    if (adjusted)
        x.rightCols(covariates.cols()) = covariates;
    return x;
}

inline FactorModels fit_factor_models(const Matrix& scores, const Vector& y, const Matrix& covariates,
                                      bool adjusted, double alpha = 0.05)
{
    const Index k = scores.cols();
    if (k < 1)
        fail(Errc::InvalidConfig, "need at least one factor");
    if (adjusted && covariates.rows() != scores.rows())
        fail(Errc::DimensionMismatch, "covariate rows differ from score rows");
    FactorModels fm;
    fm.adjusted = adjusted;
    fm.alpha = alpha;
    for (Index f = 0; f < k; ++f) {
        const Matrix x = factor_design(scores.col(f), covariates, adjusted);
        GlmFit fit = fit_logistic(x, y);
        const double se = fit.standard_errors(1);
        const double p = wald_p_value(fit.coefficients(1), se * se);
        fm.single_p.push_back(p);
        fm.single_significant.push_back(p < alpha / static_cast<double>(k));
        fm.single.push_back(std::move(fit));
    }
    fm.joint = fit_logistic(factor_design(scores, covariates, adjusted), y);
    for (Index f = 0; f < k; ++f) {
        const double se = fm.joint.standard_errors(1 + f);
        fm.joint_p.push_back(wald_p_value(fm.joint.coefficients(1 + f), se * se));
    }
    return fm;
}

} // namespace cadpred
