#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cadpred/cohort.hpp"
#include "cadpred/error.hpp"
#include "cadpred/glm.hpp"
#include "cadpred/rng.hpp"

namespace cadpred {

struct CorrelationBlock {
    std::size_t size = 0;
    double correlation = 0.0;
};

/// Marginal targets follow the cohort summary the generator imitates:
/// n = 1474, 256 metabolites, 70% prevalence, age 62.4 +- 11.6, 78% men,
/// 30% statin use, 77% hypertension.
struct SynthConfig {
    std::size_t n_rows = 1474;
    std::size_t n_metabolites = 256;
    double prevalence = 0.70;
    std::size_t n_true_metabolites = 10;
    /// Outcome log-odds per latent SD for each true metabolite (random sign).
    double effect_size = 0.35;
    /// Scales both covariate -> metabolite shifts and covariate -> outcome effects.
    double confounder_strength = 1.0;
    /// Unset = six high-correlation blocks covering all metabolites, sized so
    /// the leading principal components carry roughly 40%, 16%, ... of the
    /// variance and six of them pass 95%. Empty = independent metabolites.
    std::optional<std::vector<CorrelationBlock>> block_structure;
    double missing_rate = 0.02;
    std::uint64_t seed = 0;

    std::vector<CorrelationBlock> blocks() const
    {
        if (block_structure)
            return *block_structure;
        return default_blocks(n_metabolites);
    }

    static std::vector<CorrelationBlock> default_blocks(std::size_t p)
    {
        const double share[6] = {106, 43, 35, 28, 24, 20}; // of 256
        std::vector<CorrelationBlock> b;
        std::size_t used = 0;
        for (int k = 0; k < 6; ++k) {
            std::size_t s = k == 5 ? p - used : static_cast<std::size_t>(std::llround(share[k] / 256.0 * static_cast<double>(p)));
            s = std::min(s, p - used);
            if (s == 0)
                continue;
            b.push_back({s, 0.97});
            used += s;
        }
        return b;
    }

    void validate() const
    {
        if (!(prevalence > 0.0 && prevalence < 1.0))
            fail(Errc::InfeasibleConfig, "prevalence must lie in (0,1)");
        if (!(missing_rate >= 0.0 && missing_rate < 1.0))
            fail(Errc::InfeasibleConfig, "missing_rate must lie in [0,1)");
        if (n_metabolites == 0 || n_rows < 2)
            fail(Errc::InfeasibleConfig, "need rows and metabolites");
        if (n_true_metabolites > n_metabolites)
            fail(Errc::InfeasibleConfig, "more true metabolites than metabolites");
        std::size_t total = 0;
        for (const auto& b : blocks()) {
            if (!(b.correlation >= 0.0 && b.correlation < 1.0))
                fail(Errc::InfeasibleConfig, "block correlation must lie in [0,1)");
            total += b.size;
        }
        if (total > n_metabolites)
            fail(Errc::InfeasibleConfig, "block sizes exceed the metabolite count");
    }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c)
{
    nlohmann::json blocks = nlohmann::json::array();
    for (const auto& b : c.blocks())
        blocks.push_back({{"size", b.size}, {"correlation", b.correlation}});
    j = nlohmann::json{{"n_rows", c.n_rows},
                       {"n_metabolites", c.n_metabolites},
                       {"prevalence", c.prevalence},
                       {"n_true_metabolites", c.n_true_metabolites},
                       {"effect_size", c.effect_size},
                       {"confounder_strength", c.confounder_strength},
                       {"block_structure", blocks},
                       {"missing_rate", c.missing_rate},
                       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c)
{
    c.n_rows = j.value("n_rows", c.n_rows);
    c.n_metabolites = j.value("n_metabolites", c.n_metabolites);
    c.prevalence = j.value("prevalence", c.prevalence);
    c.n_true_metabolites = j.value("n_true_metabolites", c.n_true_metabolites);
    c.effect_size = j.value("effect_size", c.effect_size);
    c.confounder_strength = j.value("confounder_strength", c.confounder_strength);
    c.missing_rate = j.value("missing_rate", c.missing_rate);
    c.seed = j.value("seed", c.seed);
    if (j.contains("block_structure") && !j.at("block_structure").is_null()) {
        std::vector<CorrelationBlock> blocks;
        for (const auto& b : j.at("block_structure"))
            blocks.push_back({b.at("size").get<std::size_t>(), b.at("correlation").get<double>()});
        c.block_structure = blocks;
    }
}

struct GroundTruth {
    double intercept = 0.0;
    std::vector<std::string> covariate_names;
    std::vector<double> covariate_coefficients; // on age-in-SD units, 0/1 indicators
    std::vector<double> metabolite_coefficients; // on the latent (log-scale) metabolite
    std::vector<std::size_t> support;
    std::vector<std::size_t> block_of; // block index per metabolite, -1 as SIZE_MAX when free
    double empirical_prevalence = 0.0;
};

inline nlohmann::json truth_json(const GroundTruth& t)
{
    return {{"intercept", t.intercept},
            {"covariate_names", t.covariate_names},
            {"covariate_coefficients", t.covariate_coefficients},
            {"metabolite_coefficients", t.metabolite_coefficients},
            {"support", t.support},
            {"empirical_prevalence", t.empirical_prevalence}};
}

struct SynthResult {
    CohortTable table;
    GroundTruth truth;
};

inline CohortSchema synth_schema(std::size_t n_metabolites)
{
    CohortSchema s;
    s.outcome_name = "cad";
    s.id_name = "id";
    s.covariate_names = {"age", "sex", "statin", "hypertension"};
    char buf[32];
    for (std::size_t j = 0; j < n_metabolites; ++j) {
        std::snprintf(buf, sizeof buf, "m%03zu", j + 1);
        s.metabolite_names.emplace_back(buf);
    }
    return s;
}

/// Seeded synthetic cohort with planted outcome model and MCAR metabolite
/// missingness. Metabolites are log-normal: block-correlated Gaussians on the
/// log scale, shifted by age (first two blocks) and statin use (third
/// block), then exponentiated. The outcome intercept is bisected until the
/// realised prevalence is within 0.01 of the target.
inline SynthResult generate(const SynthConfig& cfg)
{
    cfg.validate();
    const auto n = static_cast<Index>(cfg.n_rows);
    const auto p = static_cast<Index>(cfg.n_metabolites);
    const double s = cfg.confounder_strength;

    Rng cov_rng(derive_seed(cfg.seed, "synth-covariates"));
    Rng met_rng(derive_seed(cfg.seed, "synth-metabolites"));
    Rng out_rng(derive_seed(cfg.seed, "synth-outcome"));
    Rng miss_rng(derive_seed(cfg.seed, "synth-missing"));

    SynthResult res;
    res.table.schema = synth_schema(cfg.n_metabolites);
    auto& t = res.table;
    t.values.resize(n, 4 + p);
    t.missing.setConstant(n, 4 + p, false);
    t.outcome.assign(static_cast<std::size_t>(n), 0);
    for (Index i = 0; i < n; ++i)
        t.ids.push_back(std::to_string(i + 1));

    Vector age_std(n), sex(n), statin(n), htn(n);
    for (Index i = 0; i < n; ++i) {
        age_std(i) = cov_rng.normal();
        sex(i) = cov_rng.bernoulli(0.78) ? 1.0 : 0.0;
        statin(i) = cov_rng.bernoulli(0.30) ? 1.0 : 0.0;
        htn(i) = cov_rng.bernoulli(0.77) ? 1.0 : 0.0;
        t.values(i, 0) = 62.4 + 11.6 * age_std(i);
        t.values(i, 1) = sex(i);
        t.values(i, 2) = statin(i);
        t.values(i, 3) = htn(i);
    }

    // Latent log-scale metabolites.
    const auto blocks = cfg.blocks();
    Matrix latent(n, p);
    res.truth.block_of.assign(static_cast<std::size_t>(p), static_cast<std::size_t>(-1));
    Index col = 0;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        const auto size = static_cast<Index>(blocks[b].size);
        if (size == 0)
            continue;
        Matrix corr = Matrix::Constant(size, size, blocks[b].correlation);
        corr.diagonal().setOnes();
        const Matrix l = Eigen::LLT<Matrix>(corr).matrixL();
        Vector g(size);
        for (Index i = 0; i < n; ++i) {
            for (Index k = 0; k < size; ++k)
                g(k) = met_rng.normal();
            latent.row(i).segment(col, size) = (l * g).transpose();
        }
        const double age_shift = b == 0 ? 0.5 : (b == 1 ? 0.4 : 0.0);
        const double statin_shift = b == 2 ? -0.6 : 0.0;
        for (Index k = col; k < col + size; ++k) {
            res.truth.block_of[static_cast<std::size_t>(k)] = b;
            latent.col(k) += s * (age_shift * age_std + statin_shift * (statin.array() - 0.3).matrix());
        }
        col += size;
    }
    for (; col < p; ++col)
        for (Index i = 0; i < n; ++i)
            latent(i, col) = met_rng.normal();

    for (Index j = 0; j < p; ++j) {
        const double log_mean = 2.0 * met_rng.uniform();
        const double log_sd = 0.2 + 0.3 * met_rng.uniform();
        for (Index i = 0; i < n; ++i)
            t.values(i, 4 + j) = std::exp(log_mean + log_sd * latent(i, j));
    }

    // Planted outcome model.
    auto& truth = res.truth;
    truth.covariate_names = t.schema.covariate_names;
    truth.covariate_coefficients = {0.9 * s, 0.8 * s, 0.5 * s, 0.6 * s};
    truth.metabolite_coefficients.assign(static_cast<std::size_t>(p), 0.0);
    {
        std::vector<std::size_t> idx(static_cast<std::size_t>(p));
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        for (std::size_t k = 0; k < cfg.n_true_metabolites; ++k) {
            const std::size_t j = k + static_cast<std::size_t>(out_rng.index(idx.size() - k));
            std::swap(idx[k], idx[j]);
        }
        truth.support.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cfg.n_true_metabolites));
        std::sort(truth.support.begin(), truth.support.end());
        for (std::size_t j : truth.support)
            truth.metabolite_coefficients[j] = cfg.effect_size * (out_rng.bernoulli(0.5) ? 1.0 : -1.0);
    }
    Vector eta(n);
    for (Index i = 0; i < n; ++i) {
        double e = truth.covariate_coefficients[0] * age_std(i) + truth.covariate_coefficients[1] * sex(i) +
                   truth.covariate_coefficients[2] * statin(i) + truth.covariate_coefficients[3] * htn(i);
        for (std::size_t j : truth.support)
            e += truth.metabolite_coefficients[j] * latent(i, static_cast<Index>(j));
        eta(i) = e;
    }
    std::vector<double> u(static_cast<std::size_t>(n));
    for (auto& v : u)
        v = out_rng.uniform();

    const auto target = static_cast<std::size_t>(std::llround(cfg.prevalence * static_cast<double>(n)));
    auto cases_at = [&](double b0) {
        std::size_t c = 0;
        for (Index i = 0; i < n; ++i)
            c += u[static_cast<std::size_t>(i)] < sigmoid(b0 + eta(i)) ? 1 : 0;
        return c;
    };
    double lo = -40.0, hi = 40.0;
    for (int it = 0; it < 200 && hi - lo > 1e-12; ++it) {
        const double mid = 0.5 * (lo + hi);
        (cases_at(mid) >= target ? hi : lo) = mid;
    }
    truth.intercept = hi;
    std::size_t cases = 0;
    for (Index i = 0; i < n; ++i) {
        const int y = u[static_cast<std::size_t>(i)] < sigmoid(truth.intercept + eta(i)) ? 1 : 0;
        t.outcome[static_cast<std::size_t>(i)] = y;
        cases += static_cast<std::size_t>(y);
    }
    truth.empirical_prevalence = static_cast<double>(cases) / static_cast<double>(n);
    if (std::abs(truth.empirical_prevalence - cfg.prevalence) > 0.01)
        fail(Errc::InfeasibleConfig, "cannot calibrate prevalence to within 0.01");

    if (cfg.missing_rate > 0.0)
        for (Index j = 0; j < p; ++j)
            for (Index i = 0; i < n; ++i)
                if (miss_rng.uniform() < cfg.missing_rate) {
                    t.missing(i, 4 + j) = true;
                    t.values(i, 4 + j) = std::numeric_limits<double>::quiet_NaN();
                }
    return res;
}

} // namespace cadpred
