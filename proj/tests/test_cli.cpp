#include <cstdlib>
#include <sys/wait.h>

#include <gtest/gtest.h>

#include "cadpred/pipeline.hpp"
#include "test_util.hpp"

using namespace cadpred;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code = -1;
    std::string out;
    std::string err;
};

class Cli : public ::testing::Test {
protected:
    testutil::TempDir tmp;

    std::string p(const std::string& name) const { return (tmp / name).string(); }

    Outcome run(const std::string& args) const
    {
        const std::string cmd = std::string("'") + CADPRED_CLI_PATH + "' " + args + " > '" + p("stdout.txt") +
                                "' 2> '" + p("stderr.txt") + "'";
        const int status = std::system(cmd.c_str());
        Outcome o;
        o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        o.out = textio::read_file(tmp / "stdout.txt");
        o.err = textio::read_file(tmp / "stderr.txt");
        return o;
    }

    void make_cohort()
    {
        textio::write_file(tmp / "synth.json",
                           R"({"n_rows": 160, "n_metabolites": 12, "n_true_metabolites": 3, "effect_size": 0.9})");
        const auto o = run("synth --config " + p("synth.json") + " --seed 4 --out " + p("cohort.csv"));
        ASSERT_EQ(o.code, 0) << o.err;
    }

    void make_imputed()
    {
        make_cohort();
        ASSERT_EQ(run("split --data " + p("cohort.csv") + " --seed 1 --out " + tmp.path().string()).code, 0);
        const auto o = run("impute --data " + p("cohort.csv") + " --split " + p("split.json") +
                           " --m 2 --iters 3 --seed 2 --out " + p("imputed"));
        ASSERT_EQ(o.code, 0) << o.err;
    }
};

} // namespace

TEST_F(Cli, NoSubcommandIsUsageError)
{
    const auto o = run("");
    EXPECT_NE(o.code, 0);
    const auto h = run("--help");
    EXPECT_EQ(h.code, 0);
    for (const char* sub : {"synth", "load", "split", "impute", "screen", "pca", "lasso", "rf", "evaluate", "run"})
        EXPECT_NE(h.out.find(sub), std::string::npos) << sub;
}

TEST_F(Cli, SynthWritesCohortTruthAndSchema)
{
    make_cohort();
    EXPECT_TRUE(fs::exists(tmp / "truth.json"));
    EXPECT_TRUE(fs::exists(tmp / "schema.json"));
    const auto t = load_csv(tmp / "cohort.csv", load_schema(tmp / "schema.json"));
    EXPECT_EQ(t.n_rows(), 160);
    EXPECT_EQ(t.n_metabolites(), 12);
}

TEST_F(Cli, LoadPrintsSummaryAndRejectsBadData)
{
    make_cohort();
    auto o = run("load --schema " + p("schema.json") + " --data " + p("cohort.csv") + " --out " + p("summary.json"));
    ASSERT_EQ(o.code, 0) << o.err;
    EXPECT_NE(o.out.find("age"), std::string::npos);
    EXPECT_TRUE(fs::exists(tmp / "summary.json"));

    auto text = textio::read_file(tmp / "cohort.csv");
    const auto eol = text.find('\n');
    const auto second = text.find('\n', eol + 1);
    text.replace(eol + 1, second - eol - 1, "x,y,z");
    textio::write_file(tmp / "broken.csv", text);
    o = run("load --schema " + p("schema.json") + " --data " + p("broken.csv"));
    EXPECT_EQ(o.code, 1);
    EXPECT_EQ(o.err.rfind("[load] ", 0), 0u) << o.err;

    o = run("load --schema " + p("schema.json") + " --data " + p("nope.csv"));
    EXPECT_EQ(o.code, 1);
    EXPECT_EQ(o.err.rfind("[load] Io", 0), 0u) << o.err;
}

TEST_F(Cli, ImputeFailsOnMissingSplitFile)
{
    make_cohort();
    const auto o = run("impute --data " + p("cohort.csv") + " --split " + p("nope.json") + " --out " + p("imp"));
    EXPECT_EQ(o.code, 1);
    EXPECT_EQ(o.err.rfind("[impute] Io", 0), 0u) << o.err;
}

TEST_F(Cli, StagewiseModelsThenEvaluate)
{
    make_imputed();
    const auto imp = p("imputed");
    auto o = run("screen --imputed " + imp + " --adjusted --out " + p("screening.csv"));
    ASSERT_EQ(o.code, 0) << o.err;
    EXPECT_NE(o.out.find("of 12 significant"), std::string::npos) << o.out;

    ASSERT_EQ(run("pca --imputed " + imp + " --out " + p("pca_u")).code, 0);
    ASSERT_EQ(run("pca --imputed " + imp + " --adjusted --out " + p("pca_a")).code, 0);
    o = run("lasso --imputed " + imp + " --folds 4 --grid-size 15 --adjusted --seed 3 --out " + p("l1_a"));
    ASSERT_EQ(o.code, 0) << o.err;
    o = run("rf --imputed " + imp + " --trees 40 --mtry 0.3 --dump --seed 3 --out " + p("rf_u"));
    ASSERT_EQ(o.code, 0) << o.err;

    o = run("evaluate --models " + p("pca_u") + " " + p("pca_a") + " " + p("l1_a") + " " + p("rf_u") + " --labels " +
            p("test.csv") + " --out " + p("eval"));
    ASSERT_EQ(o.code, 0) << o.err;
    EXPECT_TRUE(fs::exists(tmp / "eval" / "report.json"));
    EXPECT_TRUE(fs::exists(tmp / "eval" / "table2.txt"));
    const auto report = nlohmann::json::parse(textio::read_file(tmp / "eval" / "report.json"));
    EXPECT_EQ(report.at("models").size(), 4u);
    EXPECT_EQ(o.out, textio::read_file(tmp / "eval" / "table2.txt"));

    o = run("evaluate --models " + p("pca_u") + " --labels " + p("nope.csv"));
    EXPECT_EQ(o.code, 1);
    EXPECT_EQ(o.err.rfind("[evaluate] ", 0), 0u) << o.err;
}

TEST_F(Cli, PcaOnCompleteCsvWritesBasis)
{
    textio::write_file(tmp / "synth.json", R"({"n_rows": 100, "n_metabolites": 10, "missing_rate": 0.0})");
    ASSERT_EQ(run("synth --config " + p("synth.json") + " --out " + p("cohort.csv")).code, 0);
    auto o = run("pca --data " + p("cohort.csv") + " --out " + p("basis.json") + " " + p("scores.csv"));
    ASSERT_EQ(o.code, 0) << o.err;
    const auto b = basis_from_json(nlohmann::json::parse(textio::read_file(tmp / "basis.json")));
    EXPECT_GE(b.k_selected, 1);

    o = run("pca --data " + p("cohort.csv") + " --imputed " + p("x"));
    EXPECT_EQ(o.code, 1);
    EXPECT_EQ(o.err.rfind("[pca] InvalidConfig", 0), 0u) << o.err;
}

TEST_F(Cli, ForestTunesOnlyWhenAsked)
{
    make_imputed();
    auto o = run("rf --imputed " + p("imputed") + " --trees 20 --mtry 0.25 --max-depth 3 --out " + p("plain"));
    ASSERT_EQ(o.code, 0) << o.err;
    EXPECT_FALSE(fs::exists(tmp / "plain" / "tuning.csv"));
    EXPECT_FALSE(fs::exists(tmp / "plain" / "forest_1.txt"));
    o = run("rf --imputed " + p("imputed") + " --trees 20 --tune --tune-trees 10 --tune-folds 3 --dump --out " +
            p("tuned"));
    ASSERT_EQ(o.code, 0) << o.err;
    EXPECT_TRUE(fs::exists(tmp / "tuned" / "tuning.csv"));
    EXPECT_TRUE(fs::exists(tmp / "tuned" / "forest_1.txt"));
}

TEST_F(Cli, BadArgumentsAreRejected)
{
    make_imputed();
    auto o = run("lasso --imputed " + p("imputed") + " --measure auc");
    EXPECT_EQ(o.code, 1);
    EXPECT_EQ(o.err.rfind("[lasso] InvalidConfig", 0), 0u) << o.err;
    o = run("rf --imputed " + p("imputed") + " --criterion gini");
    EXPECT_EQ(o.code, 1);
    EXPECT_EQ(o.err.rfind("[rf] InvalidConfig", 0), 0u) << o.err;
    EXPECT_NE(run("rf --imputed " + p("imputed") + " --threads 0").code, 0);
}

TEST_F(Cli, RunIsThreadInvariant)
{
    const std::string cfg = R"({
        "synth": {"n_rows": 180, "n_metabolites": 14, "n_true_metabolites": 3, "effect_size": 0.8},
        "impute": {"m": 2, "iterations": 3},
        "lasso": {"folds": 4, "grid_size": 15},
        "rf": {"trees": 40, "tune": false}
    })";
    textio::write_file(tmp / "config.json", cfg);
    auto a = run("run --config " + p("config.json") + " --seed 7 --threads 1 --out " + p("run1"));
    ASSERT_EQ(a.code, 0) << a.err;
    auto b = run("run --config " + p("config.json") + " --seed 7 --threads 3 --out " + p("run3"));
    ASSERT_EQ(b.code, 0) << b.err;
    EXPECT_EQ(a.out, b.out);
    EXPECT_NE(a.err.find("[evaluate] done"), std::string::npos);
    EXPECT_EQ(textio::read_file(tmp / "run1" / "report.json"), textio::read_file(tmp / "run3" / "report.json"));

    auto c = run("run --config " + p("config.json") + " --seed 7 --from rf --out " + p("run1"));
    ASSERT_EQ(c.code, 0) << c.err;
    EXPECT_EQ(c.out, a.out);

    textio::write_file(tmp / "typo.json", R"({"lasso": {"fold": 3}})");
    auto d = run("run --config " + p("typo.json") + " --synth");
    EXPECT_EQ(d.code, 1);
    EXPECT_EQ(d.err.rfind("[run] InvalidConfig", 0), 0u) << d.err;

    auto e = run("run --data " + p("nope.csv") + " --schema " + p("nope.json") + " --out " + p("bad"));
    EXPECT_EQ(e.code, 1);
    EXPECT_EQ(e.err.rfind("[load] Io", 0), 0u) << e.err;
}
