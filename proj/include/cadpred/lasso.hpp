#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cadpred/cohort.hpp"
#include "cadpred/cv.hpp"
#include "cadpred/error.hpp"
#include "cadpred/glm.hpp"
#include "cadpred/parallel.hpp"
#include "cadpred/rng.hpp"

namespace cadpred {

enum class CvMeasure { Deviance, Misclassification };

struct LassoConfig {
    std::size_t n_folds = 50;
    std::size_t lambda_grid_size = 100;
    double lambda_min_ratio = 1e-3;
    bool penalize_covariates = false;
    double tol = 1e-7;
    std::size_t max_sweeps = 10'000;
    std::uint64_t seed = 0;
    CvMeasure measure = CvMeasure::Deviance;
    /// Standardize with full-data statistics inside CV instead of per fold.
    bool global_standardize = false;
    unsigned threads = 1;

    void validate() const
    {
        if (n_folds < 2)
            fail(Errc::FoldTooSmall, "n_folds must be >= 2");
        if (lambda_grid_size < 1)
            fail(Errc::InvalidConfig, "lambda_grid_size must be >= 1");
        if (!(lambda_min_ratio > 0.0 && lambda_min_ratio < 1.0))
            fail(Errc::InvalidConfig, "lambda_min_ratio must lie in (0,1)");
        if (!(tol > 0.0))
            fail(Errc::InvalidConfig, "tol must be positive");
    }
};

/// Penalized objective: (1/n) sum logistic loss + lambda * sum_penalized |beta_j|.
inline double lasso_objective(const Matrix& x, const Vector& y, const std::vector<bool>& penalized, double lambda,
                              double intercept, const Vector& beta)
{
    const Vector eta = (x * beta).array() + intercept;
    double loss = 0.0;
    for (Index i = 0; i < eta.size(); ++i)
        loss += log1pexp(eta(i)) - y(i) * eta(i);
    double pen = 0.0;
    for (Index j = 0; j < beta.size(); ++j)
        if (penalized[static_cast<std::size_t>(j)])
            pen += std::abs(beta(j));
    return loss / static_cast<double>(x.rows()) + lambda * pen;
}

struct CdStart {
    double intercept = 0.0;
    Vector beta; // empty = zeros
};

struct CdResult {
    double intercept = 0.0;
    Vector beta;
    bool converged = false;
    std::size_t sweeps = 0;
    std::size_t irls_iterations = 0;
};

/// Per IRLS step, the quadratic-model objective after each coordinate sweep.
struct CdTrace {
    std::vector<std::vector<double>> sweep_objectives;
};

inline double soft_threshold(double z, double gamma)
{
    if (z > gamma)
        return z - gamma;
    if (z < -gamma)
        return z + gamma;
    return 0.0;
}

/// L1-penalized logistic regression at one lambda by cyclic coordinate
/// descent on the IRLS quadratic approximation.
///
/// Penalized columns are expected to be standardized. The intercept and the
/// unpenalized columns are updated without thresholding. Sweeps run over a
/// working set (unpenalized columns plus the nonzero coefficients of the
/// start) until no coordinate move has weighted size v_j * d_j^2 above `tol`
/// (v_j the coordinate's curvature), and the IRLS loop stops on the same
/// measure applied to the change across one reweighting. Penalized columns
/// outside the set whose exact gradient exceeds lambda are then added and
/// the loop resumes; the set only grows, so this terminates.
/// Exhausting `max_sweeps` returns the current iterate with converged=false.
inline CdResult cd_fit(const Matrix& x, const Vector& y, const std::vector<bool>& penalized, double lambda,
                       const CdStart& start, const LassoConfig& cfg, CdTrace* trace = nullptr)
{
    const Index n = x.rows();
    const Index p = x.cols();
    if (y.size() != n || static_cast<Index>(penalized.size()) != p)
        fail(Errc::LengthMismatch, "cd_fit dimensions disagree");
    const double inv_n = 1.0 / static_cast<double>(n);

    CdResult res;
    res.intercept = start.intercept;
    res.beta = start.beta.size() == p ? start.beta : Vector::Zero(p);
    double& b0 = res.intercept;
    Vector& beta = res.beta;

    Vector eta(n), w(n), r(n), v = Vector::Zero(p), resid(n), grad(p);
    std::vector<char> in_work(static_cast<std::size_t>(p), 0);
    std::vector<Index> work;
    for (Index j = 0; j < p; ++j)
        if (beta(j) != 0.0 || !penalized[static_cast<std::size_t>(j)]) {
            in_work[static_cast<std::size_t>(j)] = 1;
            work.push_back(j);
        }

    auto quad_objective = [&] {
        double q = 0.5 * inv_n * (w.array() * r.array().square()).sum();
        for (Index j = 0; j < p; ++j)
            if (penalized[static_cast<std::size_t>(j)])
                q += lambda * std::abs(beta(j));
        return q;
    };

    // One coordinate update; returns v_j * change^2.
    auto update = [&](Index j) -> double {
        if (!(v(j) > 0.0))
            return 0.0;
        const double old = beta(j);
        const double g = inv_n * (x.col(j).array() * w.array() * r.array()).sum() + v(j) * old;
        const double nv = penalized[static_cast<std::size_t>(j)] ? soft_threshold(g, lambda) / v(j) : g / v(j);
        const double d = nv - old;
        if (d != 0.0) {
            beta(j) = nv;
            r.noalias() -= d * x.col(j);
        }
        return v(j) * d * d;
    };
    auto update_intercept = [&](double wsum) -> double {
        const double d = (w.array() * r.array()).sum() / wsum;
        b0 += d;
        r.array() -= d;
        return wsum * inv_n * d * d;
    };

    constexpr std::size_t max_irls = 200;
    for (std::size_t outer = 0; outer < max_irls; ++outer) {
        ++res.irls_iterations;
        eta.noalias() = x * beta;
        eta.array() += b0;
        for (Index i = 0; i < n; ++i) {
            const double mu = sigmoid(eta(i));
            w(i) = std::max(mu * (1.0 - mu), 1e-5);
            r(i) = (y(i) - mu) / w(i);
        }
        const double wsum = w.sum();
        for (Index j : work)
            v(j) = inv_n * (x.col(j).array().square() * w.array()).sum();

        const double b0_before = b0;
        const Vector beta_before = beta;
        std::vector<double>* sweep_log = nullptr;
        if (trace) {
            trace->sweep_objectives.emplace_back();
            sweep_log = &trace->sweep_objectives.back();
            sweep_log->push_back(quad_objective());
        }

        for (;;) {
            double change = update_intercept(wsum);
            for (Index j : work)
                change = std::max(change, update(j));
            ++res.sweeps;
            if (sweep_log)
                sweep_log->push_back(quad_objective());
            if (change < cfg.tol)
                break;
            if (res.sweeps >= cfg.max_sweeps)
                return res;
        }

        double moved = wsum * inv_n * (b0 - b0_before) * (b0 - b0_before);
        for (Index j : work)
            moved = std::max(moved, v(j) * (beta(j) - beta_before(j)) * (beta(j) - beta_before(j)));
        if (moved >= cfg.tol)
            continue;

        eta.noalias() = x * beta;
        eta.array() += b0;
        for (Index i = 0; i < n; ++i)
            resid(i) = y(i) - sigmoid(eta(i));
        grad.noalias() = x.transpose() * resid;
        grad *= inv_n;
        bool grew = false;
        for (Index j = 0; j < p; ++j)
            if (!in_work[static_cast<std::size_t>(j)] && std::abs(grad(j)) > lambda) {
                in_work[static_cast<std::size_t>(j)] = 1;
                work.push_back(j);
                grew = true;
            }
        if (!grew) {
            res.converged = true;
            return res;
        }
        std::sort(work.begin(), work.end());
    }
    return res;
}

/// Largest violation of the lasso optimality conditions at (intercept, beta):
/// |g_j| = lambda with matching sign on active penalized coordinates,
/// |g_j| <= lambda on inactive ones and g_j = 0 on unpenalized ones and the
/// intercept, where g_j = (1/n) X_j^T (y - mu).
inline double kkt_violation(const Matrix& x, const Vector& y, const std::vector<bool>& penalized, double lambda,
                            double intercept, const Vector& beta)
{
    const Index n = x.rows();
    Vector resid(n);
    const Vector eta = (x * beta).array() + intercept;
    for (Index i = 0; i < n; ++i)
        resid(i) = y(i) - sigmoid(eta(i));
    const Vector g = x.transpose() * resid / static_cast<double>(n);
    double worst = std::abs(resid.mean());
    for (Index j = 0; j < x.cols(); ++j) {
        double viol;
        if (!penalized[static_cast<std::size_t>(j)])
            viol = std::abs(g(j));
        else if (beta(j) != 0.0)
            viol = std::abs(g(j) - lambda * (beta(j) > 0.0 ? 1.0 : -1.0));
        else
            viol = std::max(0.0, std::abs(g(j)) - lambda);
        worst = std::max(worst, viol);
    }
    return worst;
}

/// Fit with every penalized coefficient held at zero.
inline CdStart null_start(const Matrix& x, const Vector& y, const std::vector<bool>& penalized)
{
    const double ybar = y.mean();
    if (ybar <= 0.0 || ybar >= 1.0)
        fail(Errc::NoClassVariation, "outcome has a single class");
    CdStart s;
    s.beta = Vector::Zero(x.cols());
    std::vector<Index> unpen;
    for (Index j = 0; j < x.cols(); ++j)
        if (!penalized[static_cast<std::size_t>(j)])
            unpen.push_back(j);
    if (unpen.empty()) {
        s.intercept = std::log(ybar / (1.0 - ybar));
        return s;
    }
    Matrix d(x.rows(), static_cast<Index>(unpen.size()) + 1);
    d.col(0).setOnes();
    for (std::size_t k = 0; k < unpen.size(); ++k)
        d.col(static_cast<Index>(k) + 1) = x.col(unpen[k]);
    const GlmFit f = fit_logistic(d, y, {.tol = 1e-10, .max_iter = 100});
    s.intercept = f.coefficients(0);
    for (std::size_t k = 0; k < unpen.size(); ++k)
        s.beta(unpen[k]) = f.coefficients(static_cast<Index>(k) + 1);
    return s;
}

/// lambda_max = max over penalized j of |X_j^T (y - mu0)| / n, mu0 the null
/// fit; inflated by 1e-6 relative so the top of the path is exactly sparse.
inline double lambda_max(const Matrix& x, const Vector& y, const std::vector<bool>& penalized, const CdStart& null)
{
    const Vector eta = (x * null.beta).array() + null.intercept;
    Vector resid(x.rows());
    for (Index i = 0; i < x.rows(); ++i)
        resid(i) = y(i) - sigmoid(eta(i));
    double best = 0.0;
    bool any = false;
    for (Index j = 0; j < x.cols(); ++j)
        if (penalized[static_cast<std::size_t>(j)]) {
            any = true;
            best = std::max(best, std::abs(x.col(j).dot(resid)) / static_cast<double>(x.rows()));
        }
    if (!any)
        fail(Errc::InvalidConfig, "no penalized columns");
    return best * (1.0 + 1e-6);
}

/// Descending log-spaced grid from lambda_max to lambda_max * lambda_min_ratio.
inline std::vector<double> lambda_path(const Matrix& x, const Vector& y, const std::vector<bool>& penalized,
                                       const LassoConfig& cfg)
{
    cfg.validate();
    const double top = lambda_max(x, y, penalized, null_start(x, y, penalized));
    std::vector<double> grid(cfg.lambda_grid_size);
    const std::size_t k = cfg.lambda_grid_size;
    for (std::size_t i = 0; i < k; ++i) {
        const double t = k == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(k - 1);
        grid[i] = top * std::pow(cfg.lambda_min_ratio, t);
    }
    grid[0] = top;
    return grid;
}

/// Column centring/scaling used inside the Lasso. Zero-variance columns
/// keep scale 1 (they centre to zero and never enter the model).
struct ColumnScaling {
    Vector means;
    Vector sds;
};

inline ColumnScaling fit_scaling(const Matrix& x, std::span<const Index> rows)
{
    ColumnScaling s;
    s.means = Vector::Zero(x.cols());
    s.sds = Vector::Ones(x.cols());
    const double n = static_cast<double>(rows.size());
    for (Index j = 0; j < x.cols(); ++j) {
        double m = 0.0;
        for (Index i : rows)
            m += x(i, j);
        m /= n;
        double ss = 0.0;
        for (Index i : rows)
            ss += (x(i, j) - m) * (x(i, j) - m);
        const double sd = rows.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
        s.means(j) = m;
        s.sds(j) = sd > 1e-12 * std::max(1.0, std::abs(m)) ? sd : 1.0;
    }
    return s;
}

inline Matrix apply_scaling(const ColumnScaling& s, const Matrix& x, std::span<const Index> rows)
{
    Matrix z(static_cast<Index>(rows.size()), x.cols());
    for (Index j = 0; j < x.cols(); ++j)
        for (std::size_t r = 0; r < rows.size(); ++r)
            z(static_cast<Index>(r), j) = (x(rows[r], j) - s.means(j)) / s.sds(j);
    return z;
}

struct LassoFit {
    std::vector<double> lambdas;
    std::vector<double> cv_mean;
    std::vector<double> cv_se;
    std::size_t selected_index = 0;
    double lambda_selected = 0.0;

    // Fit on the standardized design (the scale the penalty acts on).
    double intercept_std = 0.0;
    Vector beta_std;
    ColumnScaling scaling;

    // Same model on the original column scale.
    double intercept = 0.0;
    Vector coefficients;

    std::vector<std::string> feature_names;
    std::vector<bool> penalized;
    std::vector<std::string> active_set;
    bool converged = true;

    Vector predict_proba(const Matrix& x) const
    {
        if (x.cols() != coefficients.size())
            fail(Errc::DimensionMismatch, "Lasso model expects " + std::to_string(coefficients.size()) + " columns");
        Vector eta = (x * coefficients).array() + intercept;
        for (Index i = 0; i < eta.size(); ++i)
            eta(i) = sigmoid(eta(i));
        return eta;
    }
};

namespace detail {

inline double validation_loss(double prob, double y, CvMeasure m)
{
    if (m == CvMeasure::Misclassification)
        return (prob >= 0.5 ? 1.0 : 0.0) != y ? 1.0 : 0.0;
    const double pc = std::clamp(prob, 1e-15, 1.0 - 1e-15);
    return -2.0 * (y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc));
}

} // namespace detail

/// K-fold cross-validated lambda selection followed by a refit on all rows.
///
/// The lambda grid comes from the full standardized data; each fold refits
/// the whole path on its complement with warm starts. Selection is the plain
/// argmin of mean validation error, ties going to the larger lambda.
inline LassoFit cv_select(const Matrix& x, const Vector& y, const std::vector<bool>& penalized,
                          std::vector<std::string> names, const LassoConfig& cfg)
{
    cfg.validate();
    const Index n = x.rows();
    const Index p = x.cols();
    if (static_cast<Index>(penalized.size()) != p || y.size() != n)
        fail(Errc::LengthMismatch, "cv_select dimensions disagree");
    if (cfg.n_folds > static_cast<std::size_t>(n))
        fail(Errc::FoldTooSmall, std::to_string(cfg.n_folds) + " folds for " + std::to_string(n) + " rows");
    if (names.empty())
        for (Index j = 0; j < p; ++j)
            names.push_back("x" + std::to_string(j + 1));

    std::vector<Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), Index{0});
    const ColumnScaling global = fit_scaling(x, all);
    const Matrix z_all = apply_scaling(global, x, all);
    const std::vector<double> grid = lambda_path(z_all, y, penalized, cfg);
    const std::size_t n_lambda = grid.size();

    const auto folds = assign_folds(static_cast<std::size_t>(n), cfg.n_folds, cfg.seed);
    std::vector<std::vector<double>> fold_sum(cfg.n_folds, std::vector<double>(n_lambda, 0.0));
    std::vector<std::size_t> fold_size(cfg.n_folds, 0);
    std::vector<char> fold_converged(cfg.n_folds, 1);

    parallel_for(cfg.n_folds, cfg.threads, [&](std::size_t k) {
        std::vector<Index> train, val;
        for (Index i = 0; i < n; ++i)
            (folds[static_cast<std::size_t>(i)] == k ? val : train).push_back(i);
        fold_size[k] = val.size();
        if (val.empty())
            fail(Errc::FoldTooSmall, "fold " + std::to_string(k) + " is empty");
        const ColumnScaling sc = cfg.global_standardize ? global : fit_scaling(x, train);
        const Matrix zt = apply_scaling(sc, x, train);
        const Matrix zv = apply_scaling(sc, x, val);
        Vector yt(static_cast<Index>(train.size()));
        for (std::size_t r = 0; r < train.size(); ++r)
            yt(static_cast<Index>(r)) = y(train[r]);
        CdStart warm = null_start(zt, yt, penalized);
        for (std::size_t l = 0; l < n_lambda; ++l) {
            const CdResult fit = cd_fit(zt, yt, penalized, grid[l], warm, cfg);
            if (!fit.converged)
                fold_converged[k] = 0;
            warm.intercept = fit.intercept;
            warm.beta = fit.beta;
            const Vector eta = (zv * fit.beta).array() + fit.intercept;
            double s = 0.0;
            for (std::size_t r = 0; r < val.size(); ++r)
                s += detail::validation_loss(sigmoid(eta(static_cast<Index>(r))), y(val[r]), cfg.measure);
            fold_sum[k][l] = s;
        }
    });

    LassoFit out;
    out.lambdas = grid;
    out.cv_mean.assign(n_lambda, 0.0);
    out.cv_se.assign(n_lambda, 0.0);
    const double k_folds = static_cast<double>(cfg.n_folds);
    for (std::size_t l = 0; l < n_lambda; ++l) {
        double total = 0.0;
        for (std::size_t k = 0; k < cfg.n_folds; ++k)
            total += fold_sum[k][l];
        const double mean = total / static_cast<double>(n);
        double dev = 0.0;
        for (std::size_t k = 0; k < cfg.n_folds; ++k) {
            const double e = fold_sum[k][l] / static_cast<double>(fold_size[k]);
            dev += static_cast<double>(fold_size[k]) * (e - mean) * (e - mean);
        }
        out.cv_mean[l] = mean;
        out.cv_se[l] = std::sqrt(dev / static_cast<double>(n) / (k_folds - 1.0));
    }
    std::size_t best = 0;
    for (std::size_t l = 1; l < n_lambda; ++l)
        if (out.cv_mean[l] < out.cv_mean[best])
            best = l;
    out.selected_index = best;
    out.lambda_selected = grid[best];
    out.converged = std::all_of(fold_converged.begin(), fold_converged.end(), [](char c) { return c != 0; });

    CdStart warm = null_start(z_all, y, penalized);
    CdResult fit{warm.intercept, warm.beta, true, 0, 0};
    for (std::size_t l = 0; l <= best; ++l) {
        fit = cd_fit(z_all, y, penalized, grid[l], warm, cfg);
        warm.intercept = fit.intercept;
        warm.beta = fit.beta;
    }
    out.converged = out.converged && fit.converged;
    out.intercept_std = fit.intercept;
    out.beta_std = fit.beta;
    out.scaling = global;
    out.coefficients = fit.beta.cwiseQuotient(global.sds);
    out.intercept = fit.intercept - out.coefficients.dot(global.means);
    out.feature_names = std::move(names);
    out.penalized = penalized;
    for (Index j = 0; j < p; ++j)
        if (penalized[static_cast<std::size_t>(j)] && fit.beta(j) != 0.0)
            out.active_set.push_back(out.feature_names[static_cast<std::size_t>(j)]);
    return out;
}

struct ActiveSetReport {
    std::vector<std::size_t> per_model_counts;
    std::vector<std::string> union_set;
    std::vector<std::string> intersection_set;
};

inline ActiveSetReport summarize_active_sets(std::span<const std::vector<std::string>> sets)
{
    ActiveSetReport r;
    if (sets.empty())
        return r;
    std::set<std::string> uni, inter(sets[0].begin(), sets[0].end());
    for (const auto& s : sets) {
        r.per_model_counts.push_back(s.size());
        uni.insert(s.begin(), s.end());
        std::set<std::string> here(s.begin(), s.end()), keep;
        for (const auto& name : inter)
            if (here.count(name))
                keep.insert(name);
        inter = std::move(keep);
    }
    r.union_set.assign(uni.begin(), uni.end());
    r.intersection_set.assign(inter.begin(), inter.end());
    return r;
}

/// Lasso design from a complete table: metabolites (penalized) followed by
/// covariates when adjusted (unpenalized unless configured otherwise).
struct LassoDesign {
    Matrix x;
    std::vector<bool> penalized;
    std::vector<std::string> names;
};

inline LassoDesign lasso_design(const CohortTable& t, const std::vector<std::size_t>& rows, bool adjusted,
                                bool penalize_covariates)
{
    const Index n_cov = t.n_covariates();
    const Index n_met = t.n_metabolites();
    const Index cols = n_met + (adjusted ? n_cov : 0);
    LassoDesign d;
    d.x.resize(static_cast<Index>(rows.size()), cols);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto i = static_cast<Index>(rows[r]);
        d.x.row(static_cast<Index>(r)).head(n_met) = t.values.row(i).tail(n_met);
        if (adjusted)
            d.x.row(static_cast<Index>(r)).tail(n_cov) = t.values.row(i).head(n_cov);
    }
    d.names = t.schema.metabolite_names;
    d.penalized.assign(static_cast<std::size_t>(n_met), true);
    if (adjusted) {
        d.names.insert(d.names.end(), t.schema.covariate_names.begin(), t.schema.covariate_names.end());
        d.penalized.insert(d.penalized.end(), static_cast<std::size_t>(n_cov), penalize_covariates);
    }
    return d;
}

struct LassoAcrossImputations {
    std::vector<LassoFit> fits;
    ActiveSetReport active;
};

/// Independent cv_select on each imputed table (training rows only).
inline LassoAcrossImputations lasso_across_imputations(std::span<const CohortTable> tables,
                                                       const std::vector<std::size_t>& rows, bool adjusted,
                                                       const LassoConfig& cfg)
{
    LassoAcrossImputations out;
    std::vector<std::vector<std::string>> sets;
    for (const auto& t : tables) {
        if (!t.complete())
            fail(Errc::InvalidConfig, "Lasso needs complete (imputed) tables");
        const auto d = lasso_design(t, rows, adjusted, cfg.penalize_covariates);
        Vector y(static_cast<Index>(rows.size()));
        for (std::size_t r = 0; r < rows.size(); ++r)
            y(static_cast<Index>(r)) = t.outcome[rows[r]];
        out.fits.push_back(cv_select(d.x, y, d.penalized, d.names, cfg));
        sets.push_back(out.fits.back().active_set);
    }
    out.active = summarize_active_sets(sets);
    return out;
}

} // namespace cadpred
