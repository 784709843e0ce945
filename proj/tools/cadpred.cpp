// Command-line front end: one subcommand per pipeline stage plus `run`.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cadpred/cadpred.hpp"

namespace fs = std::filesystem;
using namespace cadpred;

namespace {

struct Globals {
    std::optional<std::uint64_t> seed;
    unsigned threads = 1;
    std::vector<std::string> out;
};

std::string out_at(const Globals& g, std::size_t k, const std::string& fallback)
{
    return k < g.out.size() ? g.out[k] : fallback;
}

std::uint64_t seed_or(const Globals& g, std::uint64_t fallback) { return g.seed ? *g.seed : fallback; }

CohortSchema schema_for(const std::string& schema_path, const fs::path& data)
{
    if (!schema_path.empty())
        return load_schema(schema_path);
    // Imputed CSVs carry their schema in the directory manifest.
    const fs::path manifest = data.parent_path() / "manifest.json";
    if (fs::exists(manifest)) {
        const auto j = nlohmann::json::parse(textio::read_file(manifest));
        if (j.contains("schema"))
            return j.at("schema").get<CohortSchema>();
    }
    const fs::path sibling = data.parent_path() / "schema.json";
    if (fs::exists(sibling))
        return load_schema(sibling);
    fail(Errc::InvalidConfig, "no --schema given and none found next to " + data.string());
}

template <class Fn>
int run_stage(const std::string& stage, Fn&& fn)
{
    try {
        try {
            fn();
        } catch (const nlohmann::json::exception& e) {
            fail(Errc::Io, e.what());
        } catch (const fs::filesystem_error& e) {
            fail(Errc::Io, e.what());
        }
    } catch (const StageError& e) {
        std::cerr << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "[" << stage << "] " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Metabolomic CAD risk-prediction pipeline"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Seed for the selected stage (master seed for run)");
    app.add_option("--threads", g.threads, "Worker threads; results do not depend on it")->check(CLI::Range(1u, 1024u));
    app.add_option("--out", g.out, "Output path(s)")->expected(1, 2);

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort with planted ground truth");
    std::string synth_config, synth_schema;
    synth->add_option("--config", synth_config, "JSON synth configuration");
    synth->add_option("--schema", synth_schema, "Where to write the schema (default: schema.json beside the CSV)");

    // load
    auto* load = app.add_subcommand("load", "Validate a cohort CSV and print the population summary");
    std::string load_schema_path, load_data;
    load->add_option("--schema", load_schema_path, "Schema JSON")->required();
    load->add_option("--data", load_data, "Cohort CSV")->required();

    // split
    auto* split = app.add_subcommand("split", "3:1 train/test partition");
    std::string split_schema, split_data;
    bool split_stratified = false;
    split->add_option("--schema", split_schema, "Schema JSON");
    split->add_option("--data", split_data, "Cohort CSV")->required();
    split->add_flag("--stratified", split_stratified, "Allocate the test quarter per outcome class");

    // impute
    auto* impute = app.add_subcommand("impute", "Multiple imputation by chained equations (PMM)");
    std::string imp_data, imp_schema, imp_split;
    ImputeConfig ic;
    bool train_only = false;
    impute->add_option("--data", imp_data, "Cohort CSV")->required();
    impute->add_option("--schema", imp_schema, "Schema JSON");
    impute->add_option("--m", ic.m_imputations, "Number of imputations")->capture_default_str();
    impute->add_option("--iters", ic.chain_iterations, "Chain sweeps")->capture_default_str();
    impute->add_option("--donors", ic.pmm_donors, "PMM donor pool size")->capture_default_str();
    impute->add_option("--split", imp_split, "split.json; recorded for the model stages");
    impute->add_flag("--train-only-imputation", train_only, "Fit chains and donors on training rows only");

    // screen
    auto* screen = app.add_subcommand("screen", "Per-metabolite logistic screening with Bonferroni");
    std::string screen_imputed;
    bool screen_adjusted = false;
    double screen_alpha = 0.05;
    screen->add_option("--imputed", screen_imputed, "Imputation directory")->required();
    screen->add_flag("--adjusted", screen_adjusted, "Add the confounders to every regression");
    screen->add_option("--alpha", screen_alpha, "Family-wise alpha")->capture_default_str();

    // pca
    auto* pca = app.add_subcommand("pca", "PCA factors (basis + scores, or factor regression models)");
    std::string pca_data, pca_schema, pca_imputed;
    double pca_threshold = 0.95;
    bool pca_adjusted = false;
    pca->add_option("--data", pca_data, "One complete CSV: write basis.json and scores.csv");
    pca->add_option("--schema", pca_schema, "Schema JSON for --data");
    pca->add_option("--imputed", pca_imputed, "Imputation directory: fit factor regressions");
    pca->add_option("--threshold", pca_threshold, "Cumulative variance threshold")->capture_default_str();
    pca->add_flag("--adjusted", pca_adjusted, "Adjust the factor regressions for confounders");

    // lasso
    auto* lasso = app.add_subcommand("lasso", "L1-penalized logistic regression with K-fold CV");
    std::string lasso_imputed, lasso_measure = "deviance";
    LassoConfig lc;
    bool lasso_adjusted = false;
    lasso->add_option("--imputed", lasso_imputed, "Imputation directory")->required();
    lasso->add_option("--folds", lc.n_folds, "CV folds")->capture_default_str();
    lasso->add_option("--grid-size", lc.lambda_grid_size, "Lambda grid length")->capture_default_str();
    lasso->add_option("--lambda-min-ratio", lc.lambda_min_ratio, "Smallest lambda / lambda_max")->capture_default_str();
    lasso->add_option("--measure", lasso_measure, "deviance | misclassification")->capture_default_str();
    lasso->add_flag("--penalize-covariates", lc.penalize_covariates, "Penalize confounders too");
    lasso->add_flag("--global-standardize", lc.global_standardize, "Standardize once instead of per fold");
    lasso->add_flag("--adjusted", lasso_adjusted, "Include confounders");

    // rf
    auto* rf = app.add_subcommand("rf", "Random forest (Gini, bootstrap) with optional two-stage tuning");
    std::string rf_imputed, rf_criterion = "misclassification";
    RfStageOptions ro;
    ro.tune = false;
    std::optional<double> rf_mtry;
    std::optional<std::size_t> rf_depth;
    bool rf_adjusted = false;
    rf->add_option("--imputed", rf_imputed, "Imputation directory")->required();
    rf->add_option("--trees", ro.forest.n_trees, "Trees in the final ensemble")->capture_default_str();
    rf->add_flag("--tune", ro.tune, "Two-stage CV over mtry and depth");
    rf->add_option("--tune-trees", ro.tuning.tune_trees, "Trees per tuning forest")->capture_default_str();
    rf->add_option("--tune-folds", ro.tuning.folds, "Tuning CV folds")->capture_default_str();
    rf->add_option("--criterion", rf_criterion, "misclassification | deviance")->capture_default_str();
    rf->add_option("--mtry", rf_mtry, "Feature fraction per split (untuned)");
    rf->add_option("--max-depth", rf_depth, "Depth limit (untuned)");
    rf->add_option("--min-leaf", ro.forest.min_leaf, "Minimum samples per leaf")->capture_default_str();
    rf->add_flag("--hard-vote", ro.forest.hard_vote, "Average hard votes instead of leaf probabilities");
    rf->add_flag("--dump", ro.keep_dumps, "Write plain-text forest dumps");
    rf->add_flag("--adjusted", rf_adjusted, "Include confounders");

    // evaluate
    auto* evaluate = app.add_subcommand("evaluate", "Pooled held-out metrics, ROC curves and the comparison table");
    std::vector<std::string> eval_models;
    std::string eval_labels;
    double eval_threshold = 0.5;
    evaluate->add_option("--models", eval_models, "Model directories")->required();
    evaluate->add_option("--labels", eval_labels, "Held-out labels (test.csv)")->required();
    evaluate->add_option("--threshold", eval_threshold, "Probability cut-off")->capture_default_str();

    // run
    auto* run = app.add_subcommand("run", "End-to-end pipeline");
    std::string run_config, run_data, run_schema, run_from = "load";
    bool run_synth = false;
    std::optional<std::size_t> run_m, run_folds, run_trees, run_tune_trees;
    run->add_option("--config", run_config, "JSON pipeline configuration");
    run->add_option("--data", run_data, "Cohort CSV (overrides config)");
    run->add_option("--schema", run_schema, "Schema JSON (overrides config)");
    run->add_flag("--synth", run_synth, "Use the default synthetic cohort when no data is given");
    run->add_option("--from", run_from, "First stage to execute (earlier outputs must exist)")->capture_default_str();
    run->add_option("--m", run_m, "Imputations (overrides config)");
    run->add_option("--folds", run_folds, "Lasso CV folds (overrides config)");
    run->add_option("--trees", run_trees, "Final forest size (overrides config)");
    run->add_option("--tune-trees", run_tune_trees, "Tuning forest size (overrides config)");

    CLI11_PARSE(app, argc, argv);

    if (*synth)
        return run_stage("synth", [&] {
            SynthConfig sc;
            if (!synth_config.empty())
                sc = nlohmann::json::parse(textio::read_file(synth_config)).get<SynthConfig>();
            sc.seed = seed_or(g, sc.seed);
            const fs::path csv = out_at(g, 0, "cohort.csv");
            const fs::path truth = out_at(g, 1, (csv.parent_path() / "truth.json").string());
            const fs::path schema = synth_schema.empty() ? csv.parent_path() / "schema.json" : fs::path(synth_schema);
            const auto res = generate(sc);
            write_csv(res.table, csv);
            textio::write_file(truth, truth_json(res.truth).dump(2) + "\n");
            save_schema(res.table.schema, schema);
            std::cout << "wrote " << csv.string() << " (" << res.table.n_rows() << " rows, prevalence "
                      << res.truth.empirical_prevalence << ")\n";
        });

    if (*load)
        return run_stage("load", [&] {
            const auto t = load_csv(load_data, load_schema(load_schema_path));
            const auto s = summarize(t);
            std::cout << format_summary(s);
            if (!g.out.empty())
                textio::write_file(g.out[0], summary_json(s).dump(2) + "\n");
        });

    if (*split)
        return run_stage("split", [&] {
            const auto t = load_csv(split_data, schema_for(split_schema, split_data));
            const auto s = train_test_split(t, seed_or(g, 0), split_stratified);
            const fs::path dir = out_at(g, 0, ".");
            textio::write_file(dir / "split.json", nlohmann::json(s).dump() + "\n");
            write_labels(dir / "test.csv", t, s.test);
            std::cout << "train " << s.train.size() << ", test " << s.test.size() << "\n";
        });

    if (*impute)
        return run_stage("impute", [&] {
            const auto t = load_csv(imp_data, schema_for(imp_schema, imp_data));
            std::optional<SplitIndices> s;
            if (!imp_split.empty()) {
                s = read_split(imp_split);
                if (!s)
                    fail(Errc::Io, "cannot open " + imp_split);
            }
            if (train_only && !s)
                fail(Errc::InvalidConfig, "--train-only-imputation needs --split");
            ic.seed = seed_or(g, 0);
            ic.threads = g.threads;
            const auto set = mice_pmm(t, ic, train_only ? &s->train : nullptr);
            write_imputed(out_at(g, 0, "imputed"), set, s, train_only);
        });

    if (*screen)
        return run_stage("screen", [&] {
            const auto d = load_imputed(screen_imputed);
            const auto r = screen_metabolites(d.tables, screen_adjusted, {}, screen_alpha, g.threads);
            textio::write_file(out_at(g, 0, "screening.csv"),
                               screening_csv_header() + screening_csv_rows(r, screen_adjusted));
            std::size_t sig = 0;
            for (const auto& rec : r.records)
                sig += rec.bonferroni_significant ? 1 : 0;
            std::cout << sig << " of " << r.n_tests << " significant at p < " << r.threshold() << "\n";
        });

    if (*pca)
        return run_stage("pca", [&] {
            if (pca_data.empty() == pca_imputed.empty())
                fail(Errc::InvalidConfig, "give exactly one of --data or --imputed");
            if (!pca_data.empty()) {
                const auto t = load_csv(pca_data, schema_for(pca_schema, pca_data));
                if (!t.complete())
                    fail(Errc::InvalidConfig, "PCA input has missing cells; impute first");
                const Matrix met = t.metabolites();
                const auto basis = pca_fit(met, pca_threshold, t.schema.metabolite_names);
                const Matrix scores = pca_project(basis, met);
                textio::write_file(out_at(g, 0, "basis.json"), basis_json(basis).dump(2) + "\n");
                std::string csv;
                for (Index k = 0; k < scores.cols(); ++k)
                    csv += (k ? ",factor" : "factor") + std::to_string(k + 1);
                csv += "\n";
                for (Index i = 0; i < scores.rows(); ++i) {
                    for (Index k = 0; k < scores.cols(); ++k)
                        csv += (k ? "," : "") + textio::format_double(scores(i, k));
                    csv += "\n";
                }
                textio::write_file(out_at(g, 1, "scores.csv"), csv);
                std::cout << basis.k_selected << " factors explain > " << pca_threshold << " of the variance\n";
                return;
            }
            const auto d = load_imputed(pca_imputed);
            const auto [train, test] = model_rows(d);
            const auto v = fit_pca_variant(d.tables, train, test, pca_adjusted, pca_threshold);
            write_pca_variant(out_at(g, 0, "pca"), v, d.tables[0], test);
        });

    if (*lasso)
        return run_stage("lasso", [&] {
            lc.measure = parse_measure(lasso_measure);
            lc.seed = seed_or(g, 0);
            lc.threads = g.threads;
            const auto d = load_imputed(lasso_imputed);
            const auto [train, test] = model_rows(d);
            const auto v = fit_lasso_variant(d.tables, train, test, lasso_adjusted, lc);
            write_lasso_variant(out_at(g, 0, "lasso"), v, d.tables[0], test);
        });

    if (*rf)
        return run_stage("rf", [&] {
            if (rf_criterion != "misclassification" && rf_criterion != "deviance")
                fail(Errc::InvalidConfig, "unknown criterion '" + rf_criterion + "'");
            ro.tuning.criterion = rf_criterion == "deviance" ? RfCriterion::Deviance : RfCriterion::Misclassification;
            ro.forest.mtry_fraction = rf_mtry;
            ro.forest.max_depth = rf_depth;
            ro.forest.seed = seed_or(g, 0);
            ro.forest.threads = g.threads;
            ro.tuning.seed = derive_seed(ro.forest.seed, "rf-tuning");
            ro.tuning.final_trees = ro.forest.n_trees;
            const auto d = load_imputed(rf_imputed);
            const auto [train, test] = model_rows(d);
            const auto v = fit_rf_variant(d.tables, train, test, rf_adjusted, ro);
            write_rf_variant(out_at(g, 0, "rf"), v, d.tables[0], test);
        });

    if (*evaluate)
        return run_stage("evaluate", [&] {
            std::vector<fs::path> dirs(eval_models.begin(), eval_models.end());
            const auto reports = evaluate_model_dirs(dirs, read_labels(eval_labels), eval_threshold);
            // --out names report.json (or a directory); ROC CSVs go beside it.
            fs::path out = out_at(g, 0, ".");
            fs::path dir = out;
            std::string report_name = "report.json";
            if (out.has_extension()) {
                dir = out.parent_path().empty() ? fs::path(".") : out.parent_path();
                report_name = out.filename().string();
            }
            const std::string table = emit_table2(reports, dir);
            textio::write_file(dir / report_name, reports_json(reports, eval_threshold).dump(2) + "\n");
            textio::write_file(dir / "table2.txt", table);
            std::cout << table;
        });

    if (*run)
        return run_stage("run", [&] {
            PipelineConfig c;
            if (!run_config.empty())
                c = load_config(run_config);
            if (!run_data.empty())
                c.data = run_data;
            if (!run_schema.empty())
                c.schema = run_schema;
            if (run_synth && c.data.empty() && !c.synth)
                c.synth = SynthConfig{};
            if (g.seed)
                c.seed = *g.seed;
            if (!g.out.empty())
                c.out = g.out[0];
            c.threads = g.threads;
            if (run_m)
                c.impute.m_imputations = *run_m;
            if (run_folds)
                c.lasso.n_folds = *run_folds;
            if (run_trees)
                c.rf.forest.n_trees = *run_trees;
            if (run_tune_trees)
                c.rf.tuning.tune_trees = *run_tune_trees;
            RunOptions opt;
            opt.from = run_from;
            opt.on_stage = [](const std::string& stage, double secs) {
                std::cerr << "[" << stage << "] done in " << secs << " s\n";
            };
            run_pipeline(c, opt);
            std::cout << textio::read_file(RunLayout{c.out}.root / "table2.txt");
        });

    return 0;
}
