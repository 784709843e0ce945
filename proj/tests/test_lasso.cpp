#include <algorithm>
#include <cmath>

#include <gtest/gtest.h>

#include "cadpred/lasso.hpp"
#include "cadpred/synth.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cadpred;

namespace {

struct Data {
    Matrix x;
    Vector y;
};

Data logistic_data(Index n, Index p, std::uint64_t seed, double signal = 1.0)
{
    Rng rng(seed);
    Data d{Matrix(n, p), Vector(n)};
    for (Index i = 0; i < n; ++i) {
        double eta = 0.5;
        for (Index j = 0; j < p; ++j) {
            d.x(i, j) = rng.normal() * (1.0 + j) + j;
            if (j < 2)
                eta += signal * (j == 0 ? 1.0 : -0.7) * (d.x(i, j) - j) / (1.0 + j);
        }
        d.y(i) = rng.bernoulli(sigmoid(eta)) ? 1.0 : 0.0;
    }
    return d;
}

Matrix standardized(const Matrix& x)
{
    std::vector<Index> rows(static_cast<std::size_t>(x.rows()));
    std::iota(rows.begin(), rows.end(), Index{0});
    return apply_scaling(fit_scaling(x, rows), x, rows);
}

LassoConfig quick(std::size_t folds = 5)
{
    LassoConfig c;
    c.n_folds = folds;
    c.lambda_grid_size = 30;
    c.lambda_min_ratio = 1e-2;
    return c;
}

} // namespace

TEST(SoftThreshold, Cases)
{
    EXPECT_EQ(soft_threshold(3.0, 1.0), 2.0);
    EXPECT_EQ(soft_threshold(-3.0, 1.0), -2.0);
    EXPECT_EQ(soft_threshold(0.5, 1.0), 0.0);
    EXPECT_EQ(soft_threshold(-1.0, 1.0), 0.0);
}

TEST(LambdaPath, ShapeAndSparseTop)
{
    const auto d = logistic_data(200, 6, 1);
    const Matrix z = standardized(d.x);
    const std::vector<bool> pen(6, true);
    auto cfg = quick();
    const auto grid = lambda_path(z, d.y, pen, cfg);
    ASSERT_EQ(grid.size(), cfg.lambda_grid_size);
    for (std::size_t i = 1; i < grid.size(); ++i)
        EXPECT_LT(grid[i], grid[i - 1]);
    EXPECT_EQ(grid[0], lambda_max(z, d.y, pen, null_start(z, d.y, pen)));
    EXPECT_NEAR(grid.back() / grid[0], cfg.lambda_min_ratio, 1e-12);

    const auto fit = cd_fit(z, d.y, pen, grid[0], null_start(z, d.y, pen), cfg);
    EXPECT_EQ(fit.beta.cwiseAbs().maxCoeff(), 0.0);
    EXPECT_NEAR(fit.intercept, std::log(d.y.mean() / (1.0 - d.y.mean())), 1e-8);
    EXPECT_LE(kkt_violation(z, d.y, pen, grid[0], fit.intercept, fit.beta), 1e-6);
    // Just below the top, something enters.
    const auto below = cd_fit(z, d.y, pen, grid[0] * 0.98, null_start(z, d.y, pen), cfg);
    EXPECT_GT(below.beta.cwiseAbs().maxCoeff(), 0.0);
}

TEST(CdFit, TinyLambdaMatchesUnpenalizedFit)
{
    const auto d = logistic_data(200, 2, 2);
    const Matrix z = standardized(d.x);
    const std::vector<bool> pen(2, true);
    LassoConfig cfg;
    cfg.tol = 1e-12;
    const auto fit = cd_fit(z, d.y, pen, 1e-10, null_start(z, d.y, pen), cfg);
    const auto ref = fit_logistic(with_intercept(z), d.y);
    EXPECT_NEAR(fit.intercept, ref.coefficients(0), 1e-3);
    EXPECT_NEAR(fit.beta(0), ref.coefficients(1), 1e-3);
    EXPECT_NEAR(fit.beta(1), ref.coefficients(2), 1e-3);
}

TEST(CdFit, OneDimensionalGridOracle)
{
    const auto d = logistic_data(80, 1, 3);
    const Matrix z = standardized(d.x);
    const std::vector<bool> pen(1, true);
    const double lambda = 0.3 * lambda_max(z, d.y, pen, null_start(z, d.y, pen));
    const auto fit = cd_fit(z, d.y, pen, lambda, null_start(z, d.y, pen), LassoConfig{});
    const double f_cd = lasso_objective(z, d.y, pen, lambda, fit.intercept, fit.beta);
    double best = std::numeric_limits<double>::infinity();
    double b0 = 0.0;
    for (int k = -300000; k <= 300000; ++k) {
        Vector b = Vector::Constant(1, k * 1e-5);
        best = std::min(best, oracle::profiled_objective(z, d.y, pen, lambda, b, b0));
    }
    EXPECT_NEAR(f_cd, best, 1e-6);
    EXPECT_LE(f_cd, best + 1e-9);
}

TEST(CdFit, RandomSmallProblemsMatchGridSearch)
{
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        const auto pr = oracle::random_small_lasso(seed);
        const auto start = null_start(pr.x, pr.y, pr.penalized);
        const auto fit = cd_fit(pr.x, pr.y, pr.penalized, pr.lambda, start, LassoConfig{});
        ASSERT_TRUE(fit.converged);
        const double f_cd = lasso_objective(pr.x, pr.y, pr.penalized, pr.lambda, fit.intercept, fit.beta);
        const auto grid = oracle::grid_search_lasso(pr.x, pr.y, pr.penalized, pr.lambda);
        EXPECT_NEAR(f_cd, grid.objective, 1e-6) << "seed " << seed;
        EXPECT_LE(kkt_violation(pr.x, pr.y, pr.penalized, pr.lambda, fit.intercept, fit.beta), 1e-4);
    }
}

TEST(CdFit, SweepObjectiveNeverIncreases)
{
    const auto d = logistic_data(300, 8, 4);
    const Matrix z = standardized(d.x);
    const std::vector<bool> pen(8, true);
    const double lambda = 0.05 * lambda_max(z, d.y, pen, null_start(z, d.y, pen));
    CdTrace trace;
    cd_fit(z, d.y, pen, lambda, CdStart{}, LassoConfig{}, &trace);
    ASSERT_FALSE(trace.sweep_objectives.empty());
    for (const auto& step : trace.sweep_objectives)
        for (std::size_t i = 1; i < step.size(); ++i)
            EXPECT_LE(step[i], step[i - 1] + 1e-12);
}

TEST(CdFit, UnpenalizedColumnsStayIn)
{
    const auto d = logistic_data(300, 5, 5);
    const Matrix z = standardized(d.x);
    std::vector<bool> pen(5, true);
    pen[4] = false;
    const auto start = null_start(z, d.y, pen);
    const double top = lambda_max(z, d.y, pen, start);
    const auto fit = cd_fit(z, d.y, pen, top, start, LassoConfig{});
    EXPECT_NE(fit.beta(4), 0.0);
    EXPECT_EQ(fit.beta.head(4).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_LE(kkt_violation(z, d.y, pen, top, fit.intercept, fit.beta), 1e-6);
}

TEST(CvSelect, BackTransformPreservesPredictions)
{
    const auto d = logistic_data(250, 6, 6);
    const std::vector<bool> pen(6, true);
    const auto fit = cv_select(d.x, d.y, pen, {}, quick());
    std::vector<Index> rows(250);
    std::iota(rows.begin(), rows.end(), Index{0});
    const Matrix z = apply_scaling(fit.scaling, d.x, rows);
    const Vector direct = fit.predict_proba(d.x);
    for (Index i = 0; i < 250; ++i)
        EXPECT_NEAR(direct(i), sigmoid(fit.intercept_std + z.row(i).dot(fit.beta_std)), 1e-12);
    EXPECT_EQ(fit.feature_names.size(), 6u);
    EXPECT_EQ(fit.cv_mean.size(), fit.lambdas.size());
    EXPECT_EQ(fit.lambda_selected, fit.lambdas[fit.selected_index]);
    const auto min_it = std::min_element(fit.cv_mean.begin(), fit.cv_mean.end());
    EXPECT_EQ(static_cast<std::size_t>(min_it - fit.cv_mean.begin()), fit.selected_index);
    EXPECT_FALSE(fit.active_set.empty());
    EXPECT_EQ(fit.active_set[0], "x1");
}

TEST(CvSelect, TiesGoToLargerLambda)
{
    Rng rng(7);
    Matrix x(200, 3);
    Vector y(200);
    for (Index i = 0; i < 200; ++i) {
        for (Index j = 0; j < 3; ++j)
            x(i, j) = rng.normal();
        y(i) = i % 10 < 8 ? 1.0 : 0.0;
    }
    auto cfg = quick();
    cfg.measure = CvMeasure::Misclassification;
    cfg.lambda_min_ratio = 0.5;
    const auto fit = cv_select(x, y, std::vector<bool>(3, true), {}, cfg);
    for (double v : fit.cv_mean)
        ASSERT_DOUBLE_EQ(v, fit.cv_mean[0]);
    EXPECT_EQ(fit.selected_index, 0u);
}

TEST(CvSelect, LeaveOneOutAndFoldErrors)
{
    const auto d = logistic_data(20, 2, 8);
    const std::vector<bool> pen(2, true);
    auto cfg = quick(20);
    const auto fit = cv_select(d.x, d.y, pen, {}, cfg);
    EXPECT_EQ(fit.cv_mean.size(), cfg.lambda_grid_size);
    cfg.n_folds = 21;
    EXPECT_ERRC(cv_select(d.x, d.y, pen, {}, cfg), Errc::FoldTooSmall);
    cfg.n_folds = 1;
    EXPECT_ERRC(cv_select(d.x, d.y, pen, {}, cfg), Errc::FoldTooSmall);
}

TEST(CvSelect, DeterministicAcrossThreads)
{
    const auto d = logistic_data(300, 10, 9);
    const std::vector<bool> pen(10, true);
    auto cfg = quick(10);
    cfg.seed = 3;
    const auto a = cv_select(d.x, d.y, pen, {}, cfg);
    cfg.threads = 4;
    const auto b = cv_select(d.x, d.y, pen, {}, cfg);
    EXPECT_EQ(a.cv_mean, b.cv_mean);
    EXPECT_TRUE(a.coefficients == b.coefficients);
    EXPECT_EQ(a.intercept, b.intercept);
}

TEST(ActiveSets, UnionAndIntersection)
{
    const std::vector<std::vector<std::string>> sets{{"A", "B"}, {"B", "C"}};
    const auto r = summarize_active_sets(sets);
    EXPECT_EQ(r.union_set, (std::vector<std::string>{"A", "B", "C"}));
    EXPECT_EQ(r.intersection_set, (std::vector<std::string>{"B"}));
    EXPECT_EQ(r.per_model_counts, (std::vector<std::size_t>{2, 2}));
}

namespace {

SynthConfig support_config(std::uint64_t seed, std::size_t n_true, double effect)
{
    SynthConfig c;
    c.n_rows = 1000;
    c.n_metabolites = 60;
    c.n_true_metabolites = n_true;
    c.effect_size = effect;
    c.confounder_strength = 0.0;
    c.missing_rate = 0.0;
    c.block_structure = std::vector<CorrelationBlock>{};
    c.seed = seed;
    return c;
}

std::vector<std::size_t> all_rows(std::size_t n)
{
    std::vector<std::size_t> r(n);
    std::iota(r.begin(), r.end(), std::size_t{0});
    return r;
}

} // namespace

TEST(LassoAcrossImputations, IdenticalTablesGiveIdenticalFits)
{
    const auto t = generate(support_config(10, 3, 0.8)).table;
    const std::vector<CohortTable> tables{t, t};
    const auto r = lasso_across_imputations(tables, all_rows(1000), true, quick());
    ASSERT_EQ(r.fits.size(), 2u);
    EXPECT_TRUE(r.fits[0].coefficients == r.fits[1].coefficients);
    EXPECT_EQ(r.active.union_set, r.active.intersection_set);
    // Adjusted design: metabolites then the four unpenalized confounders.
    EXPECT_EQ(r.fits[0].coefficients.size(), 64);
    for (Index j = 60; j < 64; ++j)
        EXPECT_FALSE(r.fits[0].penalized[static_cast<std::size_t>(j)]);
}

TEST(LassoAcrossImputations, RecoversPlantedSupport)
{
    int full_recoveries = 0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto res = generate(support_config(seed, 10, 0.6));
        const std::vector<CohortTable> tables{res.table, res.table};
        const auto r = lasso_across_imputations(tables, all_rows(1000), false, quick());
        const auto& active = r.fits[0].active_set;
        bool all_in = true;
        for (auto j : res.truth.support)
            all_in &= std::find(active.begin(), active.end(), res.table.schema.metabolite_names[j]) != active.end();
        full_recoveries += all_in;
    }
    EXPECT_GE(full_recoveries, 3);
}

TEST(LassoAcrossImputations, SparseUnderNull)
{
    std::vector<std::size_t> counts;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto res = generate(support_config(100 + seed, 0, 0.0));
        const std::vector<CohortTable> tables{res.table, res.table};
        counts.push_back(lasso_across_imputations(tables, all_rows(1000), false, quick()).fits[0].active_set.size());
    }
    std::sort(counts.begin(), counts.end());
    EXPECT_LE(counts[2], 5u);
}
