#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <span>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "cadpred/cohort.hpp"
#include "cadpred/error.hpp"
#include "cadpred/parallel.hpp"
#include "cadpred/rng.hpp"

namespace cadpred {

struct ImputeConfig {
    std::size_t m_imputations = 5;
    std::size_t chain_iterations = 10;
    std::size_t pmm_donors = 5;
    std::uint64_t seed = 0;
    unsigned threads = 1;

    /// Called once per sweep with the column visit order (instrumentation).
    std::function<void(std::size_t chain, std::size_t sweep, std::span<const Index> order)> on_sweep;

    void validate() const
    {
        if (m_imputations < 2)
            fail(Errc::InvalidConfig, "m_imputations must be >= 2");
        if (pmm_donors < 1)
            fail(Errc::InvalidConfig, "pmm_donors must be >= 1");
        if (chain_iterations < 1)
            fail(Errc::InvalidConfig, "chain_iterations must be >= 1");
    }
};

struct ImputedSet {
    std::vector<CohortTable> tables;
    Mask source_mask;
    ImputeConfig config;
    std::vector<std::uint64_t> chain_seeds;
    /// Columns whose regression was singular in some sweep, per chain.
    std::vector<std::vector<Index>> singular_fallbacks;
};

inline std::uint64_t chain_seed(std::uint64_t seed, std::size_t chain)
{
    return derive_seed(seed, "mice-chain", chain);
}

namespace detail {

struct ChainResult {
    CohortTable table;
    std::vector<Index> singular;
};

/// One chained-equation run. Works on a standardized copy of the features
/// and keeps the Gram matrix of [1, features] over the fitting rows current,
/// so each target regression only subtracts the few rows it must exclude.
inline ChainResult run_chain(const CohortTable& source, const ImputeConfig& cfg, std::size_t chain,
                             const std::vector<char>& fit_row)
{
    const Index n = source.n_rows();
    const Index p = source.n_features();
    Rng rng(chain_seed(cfg.seed, chain));

    std::vector<std::vector<Index>> missing_rows(static_cast<std::size_t>(p));
    std::vector<std::vector<Index>> donor_rows(static_cast<std::size_t>(p));
    for (Index j = 0; j < p; ++j) {
        for (Index i = 0; i < n; ++i) {
            if (source.missing(i, j))
                missing_rows[static_cast<std::size_t>(j)].push_back(i);
            else if (fit_row[static_cast<std::size_t>(i)])
                donor_rows[static_cast<std::size_t>(j)].push_back(i);
        }
    }

    // Visit order: incomplete columns by ascending missing count, then index.
    std::vector<Index> order;
    for (Index j = 0; j < p; ++j)
        if (!missing_rows[static_cast<std::size_t>(j)].empty())
            order.push_back(j);
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
        return missing_rows[static_cast<std::size_t>(a)].size() < missing_rows[static_cast<std::size_t>(b)].size();
    });

    ChainResult result{source, {}};
    if (order.empty())
        return result;

    // Working matrix A = [1, standardized features]; imputed cells copy the
    // donor's working value, so the emitted value is the donor's source value.
    Matrix a(n, p + 1);
    a.col(0).setOnes();
    for (Index j = 0; j < p; ++j) {
        const auto& obs = donor_rows[static_cast<std::size_t>(j)];
        double mean = 0.0;
        for (Index i : obs)
            mean += source.values(i, j);
        mean /= static_cast<double>(std::max<std::size_t>(obs.size(), 1));
        double ss = 0.0;
        for (Index i : obs)
            ss += (source.values(i, j) - mean) * (source.values(i, j) - mean);
        double sd = obs.size() > 1 ? std::sqrt(ss / static_cast<double>(obs.size() - 1)) : 0.0;
        if (!(sd > 0.0))
            sd = 1.0;
        for (Index i = 0; i < n; ++i)
            a(i, j + 1) = source.missing(i, j) ? 0.0 : (source.values(i, j) - mean) / sd;
    }

    // Initial fill: random draw from the column's observed (fitting) values.
    std::vector<std::vector<Index>> chosen(static_cast<std::size_t>(p));
    for (Index j : order) {
        const auto& donors = donor_rows[static_cast<std::size_t>(j)];
        auto& ch = chosen[static_cast<std::size_t>(j)];
        for (Index i : missing_rows[static_cast<std::size_t>(j)]) {
            const Index d = donors[static_cast<std::size_t>(rng.index(donors.size()))];
            ch.push_back(d);
            a(i, j + 1) = a(d, j + 1);
        }
    }

    std::vector<Index> fit_idx;
    for (Index i = 0; i < n; ++i)
        if (fit_row[static_cast<std::size_t>(i)])
            fit_idx.push_back(i);
    Matrix a_fit(static_cast<Index>(fit_idx.size()), p + 1);
    for (std::size_t r = 0; r < fit_idx.size(); ++r)
        a_fit.row(static_cast<Index>(r)) = a.row(fit_idx[r]);
    std::vector<Index> fit_pos(static_cast<std::size_t>(n), -1);
    for (std::size_t r = 0; r < fit_idx.size(); ++r)
        fit_pos[static_cast<std::size_t>(fit_idx[r])] = static_cast<Index>(r);

    Matrix gram = Matrix::Zero(p + 1, p + 1);
    gram.selfadjointView<Eigen::Lower>().rankUpdate(a_fit.transpose());
    gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();

    std::vector<char> singular_seen(static_cast<std::size_t>(p), 0);
    std::vector<Index> predictors;
    predictors.reserve(static_cast<std::size_t>(p));
    std::vector<std::pair<double, Index>> dist;

    for (std::size_t sweep = 0; sweep < cfg.chain_iterations; ++sweep) {
        if (cfg.on_sweep)
            cfg.on_sweep(chain, sweep, std::span<const Index>(order));
        for (Index j : order) {
            const Index col = j + 1;
            const auto& miss = missing_rows[static_cast<std::size_t>(j)];
            const auto& donors = donor_rows[static_cast<std::size_t>(j)];
            auto& ch = chosen[static_cast<std::size_t>(j)];

            predictors.clear();
            for (Index c = 0; c <= p; ++c)
                if (c != col)
                    predictors.push_back(c);
            const auto q = static_cast<Index>(predictors.size());

            // Gram over observed fitting rows = full fitting Gram minus the
            // fitting rows where the target is missing.
            Matrix g(q, q);
            Vector rhs(q);
            for (Index u = 0; u < q; ++u) {
                rhs(u) = gram(predictors[static_cast<std::size_t>(u)], col);
                for (Index v = 0; v < q; ++v)
                    g(u, v) = gram(predictors[static_cast<std::size_t>(u)], predictors[static_cast<std::size_t>(v)]);
            }
            std::vector<Index> drop;
            for (Index i : miss)
                if (fit_row[static_cast<std::size_t>(i)])
                    drop.push_back(i);
            if (!drop.empty()) {
                Matrix z(static_cast<Index>(drop.size()), q);
                Vector zt(static_cast<Index>(drop.size()));
                for (std::size_t r = 0; r < drop.size(); ++r) {
                    for (Index u = 0; u < q; ++u)
                        z(static_cast<Index>(r), u) = a(drop[r], predictors[static_cast<std::size_t>(u)]);
                    zt(static_cast<Index>(r)) = a(drop[r], col);
                }
                g.noalias() -= z.transpose() * z;
                rhs.noalias() -= z.transpose() * zt;
            }

            Eigen::LLT<Matrix> llt(g);
            bool singular = llt.info() != Eigen::Success;
            if (!singular) {
                const double rc = llt.rcond();
                singular = !(rc > 1e-12);
            }

            if (singular) {
                if (!singular_seen[static_cast<std::size_t>(j)]) {
                    singular_seen[static_cast<std::size_t>(j)] = 1;
                    result.singular.push_back(j);
                }
                for (std::size_t k = 0; k < miss.size(); ++k) {
                    const Index d = donors[static_cast<std::size_t>(rng.index(donors.size()))];
                    ch[k] = d;
                    a(miss[k], col) = a(d, col);
                }
            } else {
                const Vector beta = llt.solve(rhs);
                auto predict = [&](Index i) {
                    double s = 0.0;
                    for (Index u = 0; u < q; ++u)
                        s += a(i, predictors[static_cast<std::size_t>(u)]) * beta(u);
                    return s;
                };
                Vector donor_pred(static_cast<Index>(donors.size()));
                for (std::size_t r = 0; r < donors.size(); ++r)
                    donor_pred(static_cast<Index>(r)) = predict(donors[r]);
                const std::size_t k_near = std::min(cfg.pmm_donors, donors.size());
                for (std::size_t k = 0; k < miss.size(); ++k) {
                    const double target = predict(miss[k]);
                    dist.clear();
                    for (std::size_t r = 0; r < donors.size(); ++r)
                        dist.emplace_back(std::abs(donor_pred(static_cast<Index>(r)) - target), donors[r]);
                    // (distance, row) order: ties go to the lower row index.
                    std::nth_element(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k_near - 1), dist.end());
                    std::sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k_near));
                    const Index d = dist[static_cast<std::size_t>(rng.index(k_near))].second;
                    ch[k] = d;
                }
                for (std::size_t k = 0; k < miss.size(); ++k)
                    a(miss[k], col) = a(ch[k], col);
            }

            // Refresh row/column `col` of the fitting Gram.
            for (Index i : miss) {
                const Index r = fit_pos[static_cast<std::size_t>(i)];
                if (r >= 0)
                    a_fit(r, col) = a(i, col);
            }
            const Vector gc = a_fit.transpose() * a_fit.col(col);
            gram.col(col) = gc;
            gram.row(col) = gc.transpose();
        }
    }

    for (Index j : order) {
        const auto& miss = missing_rows[static_cast<std::size_t>(j)];
        const auto& ch = chosen[static_cast<std::size_t>(j)];
        for (std::size_t k = 0; k < miss.size(); ++k)
            result.table.values(miss[k], j) = source.values(ch[k], j);
    }
    result.table.missing.setConstant(n, p, false);
    return result;
}

} // namespace detail

/// Multiple imputation by chained equations with predictive mean matching.
///
/// `fit_rows`, when given, restricts the regressions and donor pools to those
/// rows; every row's missing cells are still filled.
inline ImputedSet mice_pmm(const CohortTable& table, const ImputeConfig& config,
                           const std::vector<std::size_t>* fit_rows = nullptr)
{
    config.validate();
    const Index n = table.n_rows();
    const Index p = table.n_features();
    if (table.outcome.size() != static_cast<std::size_t>(n))
        fail(Errc::MissingOutcome, "outcome length does not match table rows");

    std::vector<char> fit_row(static_cast<std::size_t>(n), fit_rows ? 0 : 1);
    if (fit_rows)
        for (auto r : *fit_rows) {
            if (r >= static_cast<std::size_t>(n))
                fail(Errc::OutOfRange, "fit row index out of range");
            fit_row[r] = 1;
        }

    const auto names = table.schema.feature_names();
    for (Index j = 0; j < p; ++j) {
        bool any_missing = false;
        std::size_t observed = 0;
        for (Index i = 0; i < n; ++i) {
            if (table.missing(i, j))
                any_missing = true;
            else if (fit_row[static_cast<std::size_t>(i)])
                ++observed;
        }
        if (any_missing && observed < config.pmm_donors + 1)
            fail(Errc::TooFewObserved, names[static_cast<std::size_t>(j)] + " has " +
                                           std::to_string(observed) + " observed values");
    }

    ImputedSet out;
    out.source_mask = table.missing;
    out.config = config;
    out.tables.resize(config.m_imputations);
    out.singular_fallbacks.resize(config.m_imputations);
    for (std::size_t c = 0; c < config.m_imputations; ++c)
        out.chain_seeds.push_back(chain_seed(config.seed, c));

    parallel_for(config.m_imputations, config.threads, [&](std::size_t c) {
        auto r = detail::run_chain(table, config, c, fit_row);
        out.tables[c] = std::move(r.table);
        out.singular_fallbacks[c] = std::move(r.singular);
    });
    return out;
}

/// Rubin's rules combination of per-imputation estimates.
struct PooledEstimate {
    Vector point;
    Vector within_var;
    Vector between_var;
    Vector total_var;
};

struct ImputationEstimate {
    Vector point;
    Vector variance;
};

inline PooledEstimate rubin_pool(std::span<const ImputationEstimate> estimates)
{
    const std::size_t m = estimates.size();
    if (m < 2)
        fail(Errc::InvalidConfig, "Rubin pooling needs at least 2 imputations");
    const Index k = estimates[0].point.size();
    for (const auto& e : estimates)
        if (e.point.size() != k || e.variance.size() != k)
            fail(Errc::LengthMismatch, "estimate vectors differ in length");

    const double md = static_cast<double>(m);
    PooledEstimate r;
    r.point = Vector::Zero(k);
    r.within_var = Vector::Zero(k);
    for (const auto& e : estimates) {
        r.point += e.point;
        r.within_var += e.variance;
    }
    r.point /= md;
    r.within_var /= md;
    r.between_var = Vector::Zero(k);
    for (const auto& e : estimates)
        r.between_var += (e.point - r.point).cwiseAbs2();
    r.between_var /= (md - 1.0);
    r.total_var = r.within_var + (1.0 + 1.0 / md) * r.between_var;
    return r;
}

/// Componentwise mean of per-imputation probability vectors.
inline std::vector<double> pool_predictions(std::span<const std::vector<double>> probs)
{
    if (probs.empty())
        fail(Errc::EmptyInput, "no prediction vectors to pool");
    const std::size_t n = probs[0].size();
    for (const auto& v : probs) {
        if (v.size() != n)
            fail(Errc::LengthMismatch, "prediction vectors differ in length");
        for (double x : v)
            if (!(x >= 0.0 && x <= 1.0))
                fail(Errc::OutOfRange, "probability outside [0,1]: " + std::to_string(x));
    }
    // Running mean: identical inputs come back bit-identical.
    std::vector<double> out(probs[0]);
    for (std::size_t k = 1; k < probs.size(); ++k)
        for (std::size_t i = 0; i < n; ++i)
            out[i] += (probs[k][i] - out[i]) / static_cast<double>(k + 1);
    for (auto& x : out)
        x = std::clamp(x, 0.0, 1.0);
    return out;
}

} // namespace cadpred
