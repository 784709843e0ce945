#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cadpred/cohort.hpp"
#include "cadpred/error.hpp"
#include "cadpred/evalx.hpp"
#include "cadpred/forest.hpp"
#include "cadpred/glm.hpp"
#include "cadpred/impute.hpp"
#include "cadpred/lasso.hpp"
#include "cadpred/rng.hpp"
#include "cadpred/synth.hpp"
#include "cadpred/textio.hpp"
#include "cadpred/transform.hpp"

namespace cadpred {

namespace fs = std::filesystem;

enum class Family { Pca, Lasso, Forest };

inline std::string model_name(Family f, bool adjusted)
{
    std::string base = f == Family::Pca ? "PCA regression" : f == Family::Lasso ? "L1 regression" : "Random forest";
    return adjusted ? base + " adjusted" : base;
}

inline std::string variant_tag(bool adjusted) { return adjusted ? "adjusted" : "unadjusted"; }

// ---------------------------------------------------------------------------
// Row helpers

inline std::string row_id(const CohortTable& t, std::size_t i)
{
    return t.ids.empty() ? std::to_string(i + 1) : t.ids[i];
}

inline std::vector<std::size_t> all_rows(const CohortTable& t)
{
    std::vector<std::size_t> r(static_cast<std::size_t>(t.n_rows()));
    std::iota(r.begin(), r.end(), std::size_t{0});
    return r;
}

inline Matrix take_rows(const Matrix& m, const std::vector<std::size_t>& rows)
{
    Matrix out(static_cast<Index>(rows.size()), m.cols());
    for (std::size_t r = 0; r < rows.size(); ++r)
        out.row(static_cast<Index>(r)) = m.row(static_cast<Index>(rows[r]));
    return out;
}

inline Vector take_outcome(const CohortTable& t, const std::vector<std::size_t>& rows)
{
    Vector y(static_cast<Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r)
        y(static_cast<Index>(r)) = t.outcome[rows[r]];
    return y;
}

/// Metabolites, then covariates when adjusted.
inline Matrix model_features(const CohortTable& t, const std::vector<std::size_t>& rows, bool adjusted)
{
    const Index nm = t.n_metabolites(), nc = t.n_covariates();
    Matrix x(static_cast<Index>(rows.size()), nm + (adjusted ? nc : 0));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto i = static_cast<Index>(rows[r]);
        x.row(static_cast<Index>(r)).head(nm) = t.values.row(i).tail(nm);
        if (adjusted)
            x.row(static_cast<Index>(r)).tail(nc) = t.values.row(i).head(nc);
    }
    return x;
}

inline std::vector<std::string> model_feature_names(const CohortSchema& s, bool adjusted)
{
    auto names = s.metabolite_names;
    if (adjusted)
        names.insert(names.end(), s.covariate_names.begin(), s.covariate_names.end());
    return names;
}

// ---------------------------------------------------------------------------
// Model families on imputed tables. Each fits on `train` rows of every
// imputed table and returns per-imputation probabilities for `test` rows.

struct PcaVariant {
    bool adjusted = false;
    std::vector<PcaBasis> bases;
    std::vector<FactorModels> factors;
    std::vector<std::vector<double>> test_probs;
};

inline PcaVariant fit_pca_variant(std::span<const CohortTable> tables, const std::vector<std::size_t>& train,
                                  const std::vector<std::size_t>& test, bool adjusted, double threshold = 0.95,
                                  double alpha = 0.05)
{
    PcaVariant v;
    v.adjusted = adjusted;
    for (const auto& t : tables) {
        const Matrix met = t.metabolites();
        const Matrix cov = t.covariates();
        const Matrix met_train = take_rows(met, train);
        PcaBasis basis = pca_fit(met_train, threshold, t.schema.metabolite_names);
        const Matrix s_train = pca_project(basis, met_train);
        const Vector y = take_outcome(t, train);
        FactorModels fm = fit_factor_models(s_train, y, take_rows(cov, train), adjusted, alpha);

        const Matrix s_test = pca_project(basis, take_rows(met, test));
        const Vector pr = predict_logistic(fm.joint.coefficients, factor_design(s_test, take_rows(cov, test), adjusted));
        v.test_probs.emplace_back(pr.data(), pr.data() + pr.size());
        v.bases.push_back(std::move(basis));
        v.factors.push_back(std::move(fm));
    }
    return v;
}

struct LassoVariant {
    bool adjusted = false;
    LassoAcrossImputations fits;
    std::vector<std::vector<double>> test_probs;
};

inline LassoVariant fit_lasso_variant(std::span<const CohortTable> tables, const std::vector<std::size_t>& train,
                                      const std::vector<std::size_t>& test, bool adjusted, const LassoConfig& cfg)
{
    LassoVariant v;
    v.adjusted = adjusted;
    v.fits = lasso_across_imputations(tables, train, adjusted, cfg);
    for (std::size_t m = 0; m < tables.size(); ++m) {
        const Vector pr = v.fits.fits[m].predict_proba(model_features(tables[m], test, adjusted));
        v.test_probs.emplace_back(pr.data(), pr.data() + pr.size());
    }
    return v;
}

struct RfStageOptions {
    RfConfig forest;          // used as-is when tune == false
    bool tune = true;
    TuneOptions tuning;       // final_trees overrides forest.n_trees after tuning
    std::optional<TuneGrid> grid; // unset = TuneGrid::defaults(p)
    bool keep_dumps = false;
};

struct RfVariant {
    bool adjusted = false;
    std::optional<TuneResult> tuning;
    RfConfig config;
    std::vector<std::vector<double>> importances;
    std::vector<std::string> dumps;
    std::vector<std::vector<double>> test_probs;
};

inline std::uint64_t imputation_forest_seed(std::uint64_t seed, std::size_t m)
{
    return derive_seed(seed, "rf-imputation", m);
}

inline RfVariant fit_rf_variant(std::span<const CohortTable> tables, const std::vector<std::size_t>& train,
                                const std::vector<std::size_t>& test, bool adjusted, const RfStageOptions& opt)
{
    if (tables.empty())
        fail(Errc::EmptyInput, "no imputed tables");
    RfVariant v;
    v.adjusted = adjusted;
    v.config = opt.forest;
    if (opt.tune) {
        const Matrix x = model_features(tables[0], train, adjusted);
        const Vector y = take_outcome(tables[0], train);
        const TuneGrid grid = opt.grid ? *opt.grid : TuneGrid::defaults(static_cast<std::size_t>(x.cols()));
        TuneOptions to = opt.tuning;
        to.threads = opt.forest.threads;
        to.min_leaf = opt.forest.min_leaf;
        v.tuning = tune_two_stage(x, y, grid, to);
        v.config = v.tuning->config;
        v.config.hard_vote = opt.forest.hard_vote;
        v.config.seed = opt.forest.seed;
        v.config.threads = opt.forest.threads;
    }
    v.config.validate();
    for (std::size_t m = 0; m < tables.size(); ++m) {
        RfConfig c = v.config;
        c.seed = imputation_forest_seed(v.config.seed, m);
        const Forest f = fit_forest(model_features(tables[m], train, adjusted), take_outcome(tables[m], train), c);
        v.test_probs.push_back(predict_proba(f, model_features(tables[m], test, adjusted), c.threads));
        v.importances.push_back(importance(f));
        if (opt.keep_dumps)
            v.dumps.push_back(dump_forest(f));
    }
    return v;
}

// ---------------------------------------------------------------------------
// Files shared between stages

struct Predictions {
    std::vector<std::string> ids;
    std::vector<double> probs;
};

inline void write_predictions(const fs::path& path, const std::vector<std::string>& ids,
                              const std::vector<double>& probs)
{
    if (ids.size() != probs.size())
        fail(Errc::LengthMismatch, "prediction ids vs probabilities");
    std::string out = "id,prob\n";
    for (std::size_t i = 0; i < ids.size(); ++i)
        out += ids[i] + "," + textio::format_double(probs[i]) + "\n";
    textio::write_file(path, out);
}

inline Predictions read_predictions(const fs::path& path)
{
    const auto csv = textio::read_csv(path);
    const auto id = csv.column("id"), prob = csv.column("prob");
    if (!id || !prob)
        fail(Errc::MissingColumn, path.string() + " needs id,prob columns");
    Predictions p;
    for (const auto& row : csv.rows) {
        const auto v = textio::parse_double(row.at(*prob));
        if (!v)
            fail(Errc::UnparseableCell, path.string() + ": '" + row.at(*prob) + "'");
        p.ids.push_back(row.at(*id));
        p.probs.push_back(*v);
    }
    return p;
}

struct Labels {
    std::vector<std::string> ids;
    std::vector<int> labels;
};

/// Held-out labels: two columns, id then outcome.
inline void write_labels(const fs::path& path, const CohortTable& t, const std::vector<std::size_t>& rows)
{
    const std::string id_name = t.schema.id_name.empty() ? "id" : t.schema.id_name;
    std::string out = id_name + "," + t.schema.outcome_name + "\n";
    for (auto r : rows)
        out += row_id(t, r) + "," + std::to_string(t.outcome[r]) + "\n";
    textio::write_file(path, out);
}

inline Labels read_labels(const fs::path& path)
{
    const auto csv = textio::read_csv(path);
    if (csv.header.size() < 2)
        fail(Errc::MissingColumn, path.string() + " needs id and outcome columns");
    Labels l;
    for (const auto& row : csv.rows) {
        const auto v = textio::parse_double(row.size() > 1 ? row[1] : std::string{});
        if (!v || (*v != 0.0 && *v != 1.0))
            fail(Errc::NonBinaryOutcome, path.string() + ": label must be 0/1");
        l.ids.push_back(row[0]);
        l.labels.push_back(static_cast<int>(*v));
    }
    return l;
}

inline std::string imputation_file(std::size_t m) { return "imp" + std::to_string(m + 1) + ".csv"; }

struct ImputedDir {
    std::vector<CohortTable> tables;
    CohortSchema schema;
    std::optional<SplitIndices> split;
    nlohmann::json manifest;
};

inline void write_imputed(const fs::path& dir, const ImputedSet& set, const std::optional<SplitIndices>& split,
                          bool train_only)
{
    fs::create_directories(dir);
    for (std::size_t m = 0; m < set.tables.size(); ++m)
        write_csv(set.tables[m], dir / imputation_file(m));
    nlohmann::json files = nlohmann::json::array();
    for (std::size_t m = 0; m < set.tables.size(); ++m)
        files.push_back(imputation_file(m));
    nlohmann::json singular = nlohmann::json::array();
    for (const auto& s : set.singular_fallbacks)
        singular.push_back(s);
    nlohmann::json j{{"schema", set.tables.at(0).schema},
                     {"files", files},
                     {"m_imputations", set.config.m_imputations},
                     {"chain_iterations", set.config.chain_iterations},
                     {"pmm_donors", set.config.pmm_donors},
                     {"seed", set.config.seed},
                     {"chain_seeds", set.chain_seeds},
                     {"train_only", train_only},
                     {"singular_fallbacks", singular},
                     {"missing_cells", set.source_mask.count()}};
    if (split)
        j["split"] = *split;
    textio::write_file(dir / "manifest.json", j.dump(2) + "\n");
}

inline ImputedDir load_imputed(const fs::path& dir)
{
    ImputedDir d;
    d.manifest = nlohmann::json::parse(textio::read_file(dir / "manifest.json"));
    d.schema = d.manifest.at("schema").get<CohortSchema>();
    for (const auto& f : d.manifest.at("files")) {
        d.tables.push_back(load_csv(dir / f.get<std::string>(), d.schema));
        if (!d.tables.back().complete())
            fail(Errc::InvalidConfig, f.get<std::string>() + " still has missing cells");
    }
    if (d.tables.empty())
        fail(Errc::EmptyInput, "no imputed tables in " + dir.string());
    if (d.manifest.contains("split"))
        d.split = d.manifest.at("split").get<SplitIndices>();
    return d;
}

/// Training/held-out rows for model stages: the imputation manifest's split,
/// else every row in both roles.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> model_rows(const ImputedDir& d)
{
    if (d.split)
        return {d.split->train, d.split->test};
    auto r = all_rows(d.tables[0]);
    return {r, r};
}

inline std::vector<std::string> ids_of(const CohortTable& t, const std::vector<std::size_t>& rows)
{
    std::vector<std::string> ids;
    for (auto r : rows)
        ids.push_back(row_id(t, r));
    return ids;
}

inline void write_model_info(const fs::path& dir, Family f, bool adjusted, std::size_t m, nlohmann::json extra = {})
{
    nlohmann::json j{{"name", model_name(f, adjusted)},
                     {"family", f == Family::Pca ? "pca" : f == Family::Lasso ? "lasso" : "rf"},
                     {"adjusted", adjusted},
                     {"imputations", m}};
    for (auto it = extra.begin(); extra.is_object() && it != extra.end(); ++it)
        j[it.key()] = it.value();
    textio::write_file(dir / "model.json", j.dump(2) + "\n");
}

inline std::string pred_file(std::size_t m) { return "pred_" + std::to_string(m + 1) + ".csv"; }

// ---------------------------------------------------------------------------
// Stage writers

inline void write_pca_variant(const fs::path& dir, const PcaVariant& v, const CohortTable& first,
                              const std::vector<std::size_t>& test)
{
    fs::create_directories(dir);
    const auto ids = ids_of(first, test);
    std::vector<Index> ks;
    for (std::size_t m = 0; m < v.bases.size(); ++m) {
        textio::write_file(dir / ("basis_" + std::to_string(m + 1) + ".json"), basis_json(v.bases[m]).dump(2) + "\n");
        const auto& fm = v.factors[m];
        auto vec = [](const Vector& x) { return std::vector<double>(x.data(), x.data() + x.size()); };
        nlohmann::json single = nlohmann::json::array();
        for (std::size_t k = 0; k < fm.single.size(); ++k)
            single.push_back({{"factor", k + 1},
                              {"coefficient", fm.single[k].coefficients(1)},
                              {"standard_error", fm.single[k].standard_errors(1)},
                              {"p_value", fm.single_p[k]},
                              {"significant", static_cast<bool>(fm.single_significant[k])}});
        nlohmann::json fit{{"k_selected", v.bases[m].k_selected},
                           {"single_factor", single},
                           {"joint_coefficients", vec(fm.joint.coefficients)},
                           {"joint_standard_errors", vec(fm.joint.standard_errors)},
                           {"joint_p_values", fm.joint_p},
                           {"converged", fm.joint.converged},
                           {"separated", fm.joint.separated}};
        textio::write_file(dir / ("fit_" + std::to_string(m + 1) + ".json"), fit.dump(2) + "\n");
        write_predictions(dir / pred_file(m), ids, v.test_probs[m]);
        ks.push_back(v.bases[m].k_selected);
    }
    write_model_info(dir, Family::Pca, v.adjusted, v.bases.size(), {{"k_selected", ks}});
}

inline void write_lasso_variant(const fs::path& dir, const LassoVariant& v, const CohortTable& first,
                                const std::vector<std::size_t>& test)
{
    fs::create_directories(dir);
    const auto ids = ids_of(first, test);
    for (std::size_t m = 0; m < v.fits.fits.size(); ++m) {
        const auto& f = v.fits.fits[m];
        std::string coef = "name,coefficient,coefficient_std,penalized\n";
        coef += "(intercept)," + textio::format_double(f.intercept) + "," + textio::format_double(f.intercept_std) +
                ",0\n";
        for (std::size_t j = 0; j < f.feature_names.size(); ++j)
            coef += f.feature_names[j] + "," + textio::format_double(f.coefficients(static_cast<Index>(j))) + "," +
                    textio::format_double(f.beta_std(static_cast<Index>(j))) + "," +
                    (f.penalized[j] ? "1" : "0") + "\n";
        textio::write_file(dir / ("coef_" + std::to_string(m + 1) + ".csv"), coef);
        std::string curve = "lambda,cv_mean,cv_se,selected\n";
        for (std::size_t l = 0; l < f.lambdas.size(); ++l)
            curve += textio::format_double(f.lambdas[l]) + "," + textio::format_double(f.cv_mean[l]) + "," +
                     textio::format_double(f.cv_se[l]) + "," + (l == f.selected_index ? "1" : "0") + "\n";
        textio::write_file(dir / ("cv_curve_" + std::to_string(m + 1) + ".csv"), curve);
        write_predictions(dir / pred_file(m), ids, v.test_probs[m]);
    }
    nlohmann::json per_model = nlohmann::json::array();
    for (const auto& f : v.fits.fits)
        per_model.push_back({{"lambda", f.lambda_selected}, {"active", f.active_set}, {"converged", f.converged}});
    nlohmann::json active{{"per_model_counts", v.fits.active.per_model_counts},
                          {"union", v.fits.active.union_set},
                          {"intersection", v.fits.active.intersection_set},
                          {"models", per_model}};
    textio::write_file(dir / "active_sets.json", active.dump(2) + "\n");
    write_model_info(dir, Family::Lasso, v.adjusted, v.fits.fits.size());
}

inline void write_rf_variant(const fs::path& dir, const RfVariant& v, const CohortTable& first,
                             const std::vector<std::size_t>& test)
{
    fs::create_directories(dir);
    const auto ids = ids_of(first, test);
    const auto names = model_feature_names(first.schema, v.adjusted);
    if (v.tuning) {
        std::string tune = "stage,mtry_fraction,max_depth,cv_error\n";
        auto rows = [&](const char* stage, const std::vector<TunePoint>& pts) {
            for (const auto& p : pts)
                tune += std::string(stage) + "," + textio::format_double(p.mtry_fraction) + "," +
                        (p.max_depth ? std::to_string(*p.max_depth) : std::string("unlimited")) + "," +
                        textio::format_double(p.cv_error) + "\n";
        };
        rows("1", v.tuning->stage1);
        rows("2", v.tuning->stage2);
        textio::write_file(dir / "tuning.csv", tune);
    }
    for (std::size_t m = 0; m < v.test_probs.size(); ++m) {
        std::string imp = "name,importance\n";
        for (std::size_t j = 0; j < names.size(); ++j)
            imp += names[j] + "," + textio::format_double(v.importances[m][j]) + "\n";
        textio::write_file(dir / ("importance_" + std::to_string(m + 1) + ".csv"), imp);
        write_predictions(dir / pred_file(m), ids, v.test_probs[m]);
        if (m < v.dumps.size())
            textio::write_file(dir / ("forest_" + std::to_string(m + 1) + ".txt"), v.dumps[m]);
    }
    nlohmann::json cfg{{"n_trees", v.config.n_trees},
                       {"mtry_fraction", v.config.resolved_mtry(names.size())},
                       {"mtry", v.config.mtry_count(names.size())},
                       {"max_depth", v.config.max_depth ? nlohmann::json(*v.config.max_depth) : nlohmann::json()},
                       {"min_leaf", v.config.min_leaf},
                       {"hard_vote", v.config.hard_vote},
                       {"seed", v.config.seed},
                       {"tuned", v.tuning.has_value()}};
    write_model_info(dir, Family::Forest, v.adjusted, v.test_probs.size(), {{"forest", cfg}});
}

inline std::string screening_csv_header() { return "model,name,estimate,se,p,significant,error\n"; }

inline std::string screening_csv_rows(const ScreeningResult& r, bool adjusted)
{
    std::string out;
    for (const auto& rec : r.records)
        out += variant_tag(adjusted) + "," + rec.name + "," + textio::format_double(rec.coefficient) + "," +
               textio::format_double(rec.standard_error) + "," + textio::format_double(rec.p_value) + "," +
               (rec.bonferroni_significant ? "1" : "0") + "," + rec.error + "\n";
    return out;
}

/// Reads model directories, pools each model's per-imputation predictions,
/// aligns them to the labels by id and evaluates.
inline std::vector<NamedReport> evaluate_model_dirs(const std::vector<fs::path>& dirs, const Labels& labels,
                                                    double threshold)
{
    std::map<std::string, std::size_t> pos;
    for (std::size_t i = 0; i < labels.ids.size(); ++i)
        if (!pos.emplace(labels.ids[i], i).second)
            fail(Errc::InvalidConfig, "duplicate id in labels: " + labels.ids[i]);
    std::vector<NamedReport> out;
    for (const auto& dir : dirs) {
        const auto info = nlohmann::json::parse(textio::read_file(dir / "model.json"));
        const auto m = info.at("imputations").get<std::size_t>();
        std::vector<std::vector<double>> probs;
        for (std::size_t k = 0; k < m; ++k) {
            const auto p = read_predictions(dir / pred_file(k));
            if (p.ids.size() != labels.ids.size())
                fail(Errc::LengthMismatch, dir.string() + ": " + std::to_string(p.ids.size()) + " predictions for " +
                                               std::to_string(labels.ids.size()) + " labels");
            std::vector<double> aligned(labels.ids.size());
            for (std::size_t i = 0; i < p.ids.size(); ++i) {
                auto it = pos.find(p.ids[i]);
                if (it == pos.end())
                    fail(Errc::LengthMismatch, dir.string() + ": id " + p.ids[i] + " has no label");
                aligned[it->second] = p.probs[i];
            }
            probs.push_back(std::move(aligned));
        }
        out.push_back({info.at("name").get<std::string>(), evaluate_pooled(probs, labels.labels, threshold)});
    }
    return out;
}

inline nlohmann::json reports_json(std::span<const NamedReport> reports, double threshold)
{
    nlohmann::json models = nlohmann::json::array();
    for (const auto& r : reports) {
        auto j = report_json(r.report);
        j["name"] = r.name;
        models.push_back(j);
    }
    return {{"threshold", threshold}, {"models", models}};
}

inline void write_evaluation(const fs::path& out_dir, std::span<const NamedReport> reports, double threshold)
{
    const std::string table = emit_table2(reports, out_dir);
    textio::write_file(out_dir / "report.json", reports_json(reports, threshold).dump(2) + "\n");
    textio::write_file(out_dir / "table2.txt", table);
}

// ---------------------------------------------------------------------------
// End-to-end configuration

struct PipelineConfig {
    fs::path data;   // input cohort CSV; empty with `synth` set = generate one
    fs::path schema; // empty = synthetic schema (with `synth`) or error
    fs::path out = "run";
    std::uint64_t seed = 0;
    unsigned threads = 1;
    std::optional<SynthConfig> synth;

    std::optional<std::uint64_t> split_seed;
    bool stratified_split = false;

    ImputeConfig impute;
    std::optional<std::uint64_t> impute_seed;
    bool train_only_imputation = false;

    double pca_threshold = 0.95;
    double alpha = 0.05;

    LassoConfig lasso;
    std::optional<std::uint64_t> lasso_seed;

    RfStageOptions rf;
    std::optional<std::uint64_t> rf_seed;

    std::vector<bool> variants{false, true};
    std::vector<Family> families{Family::Pca, Family::Lasso, Family::Forest};
    double threshold = 0.5;

    std::uint64_t stage_seed(std::string_view stage) const
    {
        const std::optional<std::uint64_t>* explicit_seed = stage == "split"    ? &split_seed
                                                            : stage == "impute" ? &impute_seed
                                                            : stage == "lasso"  ? &lasso_seed
                                                            : stage == "rf"     ? &rf_seed
                                                                                : nullptr;
        if (explicit_seed && *explicit_seed)
            return **explicit_seed;
        return derive_seed(seed, stage);
    }

    void validate() const
    {
        if (data.empty() && !synth)
            fail(Errc::InvalidConfig, "config needs a data file or a synth block");
        if (!data.empty() && schema.empty())
            fail(Errc::InvalidConfig, "config needs a schema file for the data");
        ImputeConfig ic = impute;
        ic.validate();
        lasso.validate();
        rf.forest.validate();
        if (synth)
            synth->validate();
        if (!(pca_threshold > 0.0 && pca_threshold <= 1.0))
            fail(Errc::InvalidConfig, "pca threshold must lie in (0,1]");
        if (!(threshold >= 0.0 && threshold <= 1.0))
            fail(Errc::InvalidConfig, "evaluation threshold must lie in [0,1]");
        if (variants.empty() || families.empty())
            fail(Errc::InvalidConfig, "nothing to fit");
    }
};

inline std::string measure_name(CvMeasure m) { return m == CvMeasure::Deviance ? "deviance" : "misclassification"; }

inline CvMeasure parse_measure(const std::string& s)
{
    if (s == "deviance")
        return CvMeasure::Deviance;
    if (s == "misclassification")
        return CvMeasure::Misclassification;
    fail(Errc::InvalidConfig, "unknown CV measure '" + s + "'");
}

inline nlohmann::json opt_json(const std::optional<std::uint64_t>& v)
{
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json config_json(const PipelineConfig& c)
{
    nlohmann::json variants = nlohmann::json::array();
    for (bool a : c.variants)
        variants.push_back(variant_tag(a));
    nlohmann::json families = nlohmann::json::array();
    for (auto f : c.families)
        families.push_back(f == Family::Pca ? "pca" : f == Family::Lasso ? "lasso" : "rf");
    nlohmann::json depths = nlohmann::json::array(), mtrys = nlohmann::json::array();
    if (c.rf.grid) {
        for (const auto& d : c.rf.grid->max_depths)
            depths.push_back(d ? nlohmann::json(*d) : nlohmann::json("unlimited"));
        mtrys = c.rf.grid->mtry_fractions;
    }
    nlohmann::json j{
        {"data", c.data.string()},
        {"schema", c.schema.string()},
        {"out", c.out.string()},
        {"seed", c.seed},
        {"split", {{"seed", opt_json(c.split_seed)}, {"stratified", c.stratified_split}}},
        {"impute",
         {{"m", c.impute.m_imputations},
          {"iterations", c.impute.chain_iterations},
          {"donors", c.impute.pmm_donors},
          {"seed", opt_json(c.impute_seed)},
          {"train_only", c.train_only_imputation}}},
        {"pca", {{"threshold", c.pca_threshold}}},
        {"screen", {{"alpha", c.alpha}}},
        {"lasso",
         {{"folds", c.lasso.n_folds},
          {"grid_size", c.lasso.lambda_grid_size},
          {"lambda_min_ratio", c.lasso.lambda_min_ratio},
          {"penalize_covariates", c.lasso.penalize_covariates},
          {"tol", c.lasso.tol},
          {"measure", measure_name(c.lasso.measure)},
          {"global_standardize", c.lasso.global_standardize},
          {"seed", opt_json(c.lasso_seed)}}},
        {"rf",
         {{"trees", c.rf.forest.n_trees},
          {"tune", c.rf.tune},
          {"tune_trees", c.rf.tuning.tune_trees},
          {"tune_folds", c.rf.tuning.folds},
          {"criterion", c.rf.tuning.criterion == RfCriterion::Deviance ? "deviance" : "misclassification"},
          {"mtry_fraction", c.rf.forest.mtry_fraction ? nlohmann::json(*c.rf.forest.mtry_fraction) : nlohmann::json()},
          {"max_depth", c.rf.forest.max_depth ? nlohmann::json(*c.rf.forest.max_depth) : nlohmann::json()},
          {"min_leaf", c.rf.forest.min_leaf},
          {"hard_vote", c.rf.forest.hard_vote},
          {"mtry_grid", c.rf.grid ? mtrys : nlohmann::json()},
          {"depth_grid", c.rf.grid ? depths : nlohmann::json()},
          {"dump", c.rf.keep_dumps},
          {"seed", opt_json(c.rf_seed)}}},
        {"variants", variants},
        {"families", families},
        {"threshold", c.threshold}};
    if (c.synth)
        j["synth"] = *c.synth;
    return j;
}

/// Reads the JSON config dialect written by config_json. Unknown keys are
/// rejected so typos do not silently fall back to defaults.
inline PipelineConfig parse_config(const nlohmann::json& j)
{
    static const std::map<std::string, std::vector<std::string>> known{
        {"", {"data", "schema", "out", "seed", "threads", "synth", "split", "impute", "pca", "screen", "lasso", "rf",
              "variants", "families", "threshold"}},
        {"split", {"seed", "stratified"}},
        {"impute", {"m", "iterations", "donors", "seed", "train_only"}},
        {"pca", {"threshold"}},
        {"screen", {"alpha"}},
        {"lasso",
         {"folds", "grid_size", "lambda_min_ratio", "penalize_covariates", "tol", "measure", "global_standardize",
          "seed"}},
        {"rf",
         {"trees", "tune", "tune_trees", "tune_folds", "criterion", "mtry_fraction", "max_depth", "min_leaf",
          "hard_vote", "mtry_grid", "depth_grid", "dump", "seed"}}};
    auto check = [&](const nlohmann::json& obj, const std::string& section) {
        if (!obj.is_object())
            fail(Errc::InvalidConfig, "config section '" + section + "' must be an object");
        const auto& keys = known.at(section);
        for (auto it = obj.begin(); it != obj.end(); ++it)
            if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
                fail(Errc::InvalidConfig, "unknown config key '" + (section.empty() ? "" : section + ".") + it.key() +
                                              "'");
    };
    auto seed_of = [](const nlohmann::json& o) -> std::optional<std::uint64_t> {
        if (!o.contains("seed") || o.at("seed").is_null())
            return std::nullopt;
        return o.at("seed").get<std::uint64_t>();
    };

    check(j, "");
    PipelineConfig c;
    try {
        c.data = j.value("data", std::string{});
        c.schema = j.value("schema", std::string{});
        c.out = j.value("out", std::string("run"));
        c.seed = j.value("seed", std::uint64_t{0});
        c.threads = j.value("threads", 1u);
        if (j.contains("synth") && !j.at("synth").is_null())
            c.synth = j.at("synth").get<SynthConfig>();
        if (j.contains("split")) {
            const auto& s = j.at("split");
            check(s, "split");
            c.split_seed = seed_of(s);
            c.stratified_split = s.value("stratified", false);
        }
        if (j.contains("impute")) {
            const auto& s = j.at("impute");
            check(s, "impute");
            c.impute.m_imputations = s.value("m", c.impute.m_imputations);
            c.impute.chain_iterations = s.value("iterations", c.impute.chain_iterations);
            c.impute.pmm_donors = s.value("donors", c.impute.pmm_donors);
            c.impute_seed = seed_of(s);
            c.train_only_imputation = s.value("train_only", false);
        }
        if (j.contains("pca")) {
            check(j.at("pca"), "pca");
            c.pca_threshold = j.at("pca").value("threshold", c.pca_threshold);
        }
        if (j.contains("screen")) {
            check(j.at("screen"), "screen");
            c.alpha = j.at("screen").value("alpha", c.alpha);
        }
        if (j.contains("lasso")) {
            const auto& s = j.at("lasso");
            check(s, "lasso");
            c.lasso.n_folds = s.value("folds", c.lasso.n_folds);
            c.lasso.lambda_grid_size = s.value("grid_size", c.lasso.lambda_grid_size);
            c.lasso.lambda_min_ratio = s.value("lambda_min_ratio", c.lasso.lambda_min_ratio);
            c.lasso.penalize_covariates = s.value("penalize_covariates", c.lasso.penalize_covariates);
            c.lasso.tol = s.value("tol", c.lasso.tol);
            c.lasso.measure = parse_measure(s.value("measure", std::string("deviance")));
            c.lasso.global_standardize = s.value("global_standardize", false);
            c.lasso_seed = seed_of(s);
        }
        if (j.contains("rf")) {
            const auto& s = j.at("rf");
            check(s, "rf");
            c.rf.forest.n_trees = s.value("trees", c.rf.forest.n_trees);
            c.rf.tune = s.value("tune", c.rf.tune);
            c.rf.tuning.tune_trees = s.value("tune_trees", c.rf.tuning.tune_trees);
            c.rf.tuning.folds = s.value("tune_folds", c.rf.tuning.folds);
            const auto crit = s.value("criterion", std::string("misclassification"));
            if (crit != "misclassification" && crit != "deviance")
                fail(Errc::InvalidConfig, "unknown rf criterion '" + crit + "'");
            c.rf.tuning.criterion = crit == "deviance" ? RfCriterion::Deviance : RfCriterion::Misclassification;
            if (s.contains("mtry_fraction") && !s.at("mtry_fraction").is_null())
                c.rf.forest.mtry_fraction = s.at("mtry_fraction").get<double>();
            if (s.contains("max_depth") && !s.at("max_depth").is_null())
                c.rf.forest.max_depth = s.at("max_depth").get<std::size_t>();
            c.rf.forest.min_leaf = s.value("min_leaf", c.rf.forest.min_leaf);
            c.rf.forest.hard_vote = s.value("hard_vote", false);
            c.rf.keep_dumps = s.value("dump", false);
            const bool has_m = s.contains("mtry_grid") && !s.at("mtry_grid").is_null();
            const bool has_d = s.contains("depth_grid") && !s.at("depth_grid").is_null();
            if (has_m || has_d) {
                TuneGrid g;
                if (has_m)
                    g.mtry_fractions = s.at("mtry_grid").get<std::vector<double>>();
                if (has_d)
                    for (const auto& d : s.at("depth_grid"))
                        g.max_depths.push_back(d.is_string() ? std::nullopt
                                                             : std::optional<std::size_t>(d.get<std::size_t>()));
                c.rf.grid = g;
            }
            c.rf_seed = seed_of(s);
        }
        if (j.contains("variants")) {
            c.variants.clear();
            for (const auto& v : j.at("variants")) {
                const auto s = v.get<std::string>();
                if (s != "adjusted" && s != "unadjusted")
                    fail(Errc::InvalidConfig, "unknown variant '" + s + "'");
                c.variants.push_back(s == "adjusted");
            }
        }
        if (j.contains("families")) {
            c.families.clear();
            for (const auto& v : j.at("families")) {
                const auto s = v.get<std::string>();
                if (s == "pca")
                    c.families.push_back(Family::Pca);
                else if (s == "lasso")
                    c.families.push_back(Family::Lasso);
                else if (s == "rf")
                    c.families.push_back(Family::Forest);
                else
                    fail(Errc::InvalidConfig, "unknown model family '" + s + "'");
            }
        }
        c.threshold = j.value("threshold", c.threshold);
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::InvalidConfig, std::string("config: ") + e.what());
    }
    return c;
}

inline PipelineConfig load_config(const fs::path& path)
{
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(textio::read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        fail(Errc::InvalidConfig, path.string() + ": " + e.what());
    }
    return parse_config(j);
}

/// Hash of the result-affecting configuration (paths and thread count excluded).
inline std::string config_hash(const PipelineConfig& c)
{
    auto j = config_json(c);
    j.erase("out");
    char buf[24];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_name(j.dump())));
    return buf;
}

// ---------------------------------------------------------------------------
// Run layout and stages

struct RunLayout {
    fs::path root;

    fs::path cohort() const { return root / "cohort.csv"; }
    fs::path schema() const { return root / "schema.json"; }
    fs::path truth() const { return root / "truth.json"; }
    fs::path summary() const { return root / "summary.json"; }
    fs::path split() const { return root / "split.json"; }
    fs::path test_labels() const { return root / "test.csv"; }
    fs::path imputed() const { return root / "imputed"; }
    fs::path screening() const { return root / "screening.csv"; }
    fs::path model_dir(Family f, bool adjusted) const
    {
        const char* fam = f == Family::Pca ? "pca_" : f == Family::Lasso ? "lasso_" : "rf_";
        return root / (fam + variant_tag(adjusted));
    }
    fs::path manifest() const { return root / "manifest.json"; }
};

inline const std::vector<std::string>& stage_names()
{
    static const std::vector<std::string> names{"load", "split", "impute", "screen", "pca", "lasso", "rf", "evaluate"};
    return names;
}

/// Error carrying the stage it came from.
class StageError : public Error {
public:
    StageError(std::string stage, const Error& e)
        : Error(e), stage_(std::move(stage)), message_("[" + stage_ + "] " + e.what())
    {
    }

    const char* what() const noexcept override { return message_.c_str(); }
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
    std::string message_;
};

inline std::optional<SplitIndices> read_split(const fs::path& p)
{
    if (!fs::exists(p))
        return std::nullopt;
    return nlohmann::json::parse(textio::read_file(p)).get<SplitIndices>();
}

// Each stage reads only files written by earlier stages in `lay`.

inline void stage_load(const PipelineConfig& c, const RunLayout& lay, nlohmann::json& info)
{
    CohortTable t;
    if (c.data.empty()) {
        SynthConfig sc = *c.synth;
        auto res = generate(sc);
        textio::write_file(lay.truth(), truth_json(res.truth).dump(2) + "\n");
        t = std::move(res.table);
        info["synthetic"] = true;
    } else {
        if (!fs::exists(c.data))
            fail(Errc::Io, "data file not found: " + c.data.string());
        t = load_csv(c.data, load_schema(c.schema));
    }
    fs::create_directories(lay.root);
    save_schema(t.schema, lay.schema());
    write_csv(t, lay.cohort());
    textio::write_file(lay.summary(), summary_json(summarize(t)).dump(2) + "\n");
    info["rows"] = t.n_rows();
    info["missing_cells"] = t.missing.count();
}

inline CohortTable read_run_cohort(const RunLayout& lay)
{
    return load_csv(lay.cohort(), load_schema(lay.schema()));
}

inline void stage_split(const PipelineConfig& c, const RunLayout& lay, nlohmann::json& info)
{
    const auto t = read_run_cohort(lay);
    const auto s = train_test_split(t, c.stage_seed("split"), c.stratified_split);
    textio::write_file(lay.split(), nlohmann::json(s).dump() + "\n");
    write_labels(lay.test_labels(), t, s.test);
    info["train"] = s.train.size();
    info["test"] = s.test.size();
}

inline void stage_impute(const PipelineConfig& c, const RunLayout& lay, nlohmann::json& info)
{
    const auto t = read_run_cohort(lay);
    const auto split = read_split(lay.split());
    ImputeConfig ic = c.impute;
    ic.seed = c.stage_seed("impute");
    ic.threads = c.threads;
    const bool train_only = c.train_only_imputation && split;
    const auto set = mice_pmm(t, ic, train_only ? &split->train : nullptr);
    write_imputed(lay.imputed(), set, split, train_only);
    info["m"] = ic.m_imputations;
}

inline void stage_screen(const PipelineConfig& c, const RunLayout& lay, nlohmann::json& info)
{
    const auto d = load_imputed(lay.imputed());
    std::string out = screening_csv_header();
    for (bool adjusted : c.variants) {
        const auto r = screen_metabolites(d.tables, adjusted, {}, c.alpha, c.threads);
        out += screening_csv_rows(r, adjusted);
        std::size_t sig = 0;
        for (const auto& rec : r.records)
            sig += rec.bonferroni_significant ? 1 : 0;
        info["significant_" + variant_tag(adjusted)] = sig;
    }
    textio::write_file(lay.screening(), out);
}

inline bool has_family(const PipelineConfig& c, Family f)
{
    return std::find(c.families.begin(), c.families.end(), f) != c.families.end();
}

inline void stage_pca(const PipelineConfig& c, const RunLayout& lay, nlohmann::json& info)
{
    const auto d = load_imputed(lay.imputed());
    const auto [train, test] = model_rows(d);
    for (bool adjusted : c.variants) {
        const auto v = fit_pca_variant(d.tables, train, test, adjusted, c.pca_threshold, c.alpha);
        write_pca_variant(lay.model_dir(Family::Pca, adjusted), v, d.tables[0], test);
        info["k_" + variant_tag(adjusted)] = v.bases[0].k_selected;
    }
}

inline LassoConfig resolved_lasso(const PipelineConfig& c)
{
    LassoConfig lc = c.lasso;
    lc.seed = c.stage_seed("lasso");
    lc.threads = c.threads;
    return lc;
}

inline void stage_lasso(const PipelineConfig& c, const RunLayout& lay, nlohmann::json& info)
{
    const auto d = load_imputed(lay.imputed());
    const auto [train, test] = model_rows(d);
    const auto lc = resolved_lasso(c);
    for (bool adjusted : c.variants) {
        const auto v = fit_lasso_variant(d.tables, train, test, adjusted, lc);
        write_lasso_variant(lay.model_dir(Family::Lasso, adjusted), v, d.tables[0], test);
        info["union_" + variant_tag(adjusted)] = v.fits.active.union_set.size();
    }
}

inline RfStageOptions resolved_rf(const PipelineConfig& c)
{
    RfStageOptions o = c.rf;
    o.forest.seed = c.stage_seed("rf");
    o.forest.threads = c.threads;
    o.tuning.seed = derive_seed(o.forest.seed, "rf-tuning");
    o.tuning.final_trees = o.forest.n_trees;
    return o;
}

inline void stage_rf(const PipelineConfig& c, const RunLayout& lay, nlohmann::json& info)
{
    const auto d = load_imputed(lay.imputed());
    const auto [train, test] = model_rows(d);
    const auto o = resolved_rf(c);
    for (bool adjusted : c.variants) {
        const auto v = fit_rf_variant(d.tables, train, test, adjusted, o);
        write_rf_variant(lay.model_dir(Family::Forest, adjusted), v, d.tables[0], test);
        info["mtry_" + variant_tag(adjusted)] = v.config.resolved_mtry(d.tables[0].schema.metabolite_names.size() +
                                                                       (adjusted ? d.tables[0].schema.covariate_names.size() : 0));
    }
}

inline std::vector<fs::path> model_dirs(const PipelineConfig& c, const RunLayout& lay)
{
    // Table order: family by family, unadjusted before adjusted.
    std::vector<fs::path> dirs;
    for (auto f : {Family::Pca, Family::Lasso, Family::Forest}) {
        if (!has_family(c, f))
            continue;
        for (bool adjusted : {false, true})
            if (std::find(c.variants.begin(), c.variants.end(), adjusted) != c.variants.end())
                dirs.push_back(lay.model_dir(f, adjusted));
    }
    return dirs;
}

inline void stage_evaluate(const PipelineConfig& c, const RunLayout& lay, nlohmann::json& info)
{
    const auto labels = read_labels(lay.test_labels());
    const auto reports = evaluate_model_dirs(model_dirs(c, lay), labels, c.threshold);
    write_evaluation(lay.root, reports, c.threshold);
    for (const auto& r : reports)
        info["auc"][r.name] = metric_json(r.report.auc);
}

struct RunOptions {
    std::string from = "load"; // first stage to execute
    std::function<void(const std::string& stage, double seconds)> on_stage;
};

/// Runs the stages in order starting at `from`, writing the manifest after
/// every stage. A failing stage is recorded in the manifest and rethrown as
/// StageError.
inline nlohmann::json run_pipeline(const PipelineConfig& c, const RunOptions& opt = {})
{
    c.validate();
    const auto& names = stage_names();
    const auto start = std::find(names.begin(), names.end(), opt.from);
    if (start == names.end())
        fail(Errc::InvalidConfig, "unknown stage '" + opt.from + "'");
    const RunLayout lay{c.out};
    fs::create_directories(lay.root);

    nlohmann::json manifest{{"config", config_json(c)},
                            {"config_hash", config_hash(c)},
                            {"threads", c.threads},
                            {"from", opt.from},
                            {"seeds",
                             {{"master", c.seed},
                              {"split", c.stage_seed("split")},
                              {"impute", c.stage_seed("impute")},
                              {"lasso", c.stage_seed("lasso")},
                              {"rf", c.stage_seed("rf")}}},
                            {"stages", nlohmann::json::array()}};
    if (c.synth)
        manifest["seeds"]["synth"] = c.synth->seed;
    auto save = [&] { textio::write_file(lay.manifest(), manifest.dump(2) + "\n"); };

    using Fn = void (*)(const PipelineConfig&, const RunLayout&, nlohmann::json&);
    const std::map<std::string, Fn> table{{"load", stage_load},     {"split", stage_split}, {"impute", stage_impute},
                                          {"screen", stage_screen}, {"pca", stage_pca},     {"lasso", stage_lasso},
                                          {"rf", stage_rf},         {"evaluate", stage_evaluate}};
    for (auto it = start; it != names.end(); ++it) {
        const std::string& stage = *it;
        if ((stage == "pca" && !has_family(c, Family::Pca)) || (stage == "lasso" && !has_family(c, Family::Lasso)) ||
            (stage == "rf" && !has_family(c, Family::Forest)))
            continue;
        nlohmann::json info = nlohmann::json::object();
        const auto t0 = std::chrono::steady_clock::now();
        try {
            try {
                table.at(stage)(c, lay, info);
            } catch (const nlohmann::json::exception& e) {
                fail(Errc::Io, e.what());
            } catch (const fs::filesystem_error& e) {
                fail(Errc::Io, e.what());
            }
        } catch (const Error& e) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            manifest["stages"].push_back({{"name", stage}, {"seconds", secs}, {"status", "error"}});
            manifest["error"] = {{"stage", stage}, {"code", errc_name(e.code())}, {"message", e.what()}};
            save();
            throw StageError(stage, e);
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        manifest["stages"].push_back({{"name", stage}, {"seconds", secs}, {"status", "ok"}, {"info", info}});
        save();
        if (opt.on_stage)
            opt.on_stage(stage, secs);
    }
    return manifest;
}

} // namespace cadpred
