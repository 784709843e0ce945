#include <gtest/gtest.h>

#include "cadpred/pipeline.hpp"
#include "test_util.hpp"

using namespace cadpred;
namespace fs = std::filesystem;

namespace {

PipelineConfig small_config(const fs::path& out, std::uint64_t seed = 5)
{
    PipelineConfig c;
    c.out = out;
    c.seed = seed;
    SynthConfig s;
    s.n_rows = 200;
    s.n_metabolites = 20;
    s.n_true_metabolites = 4;
    s.effect_size = 0.8;
    s.seed = seed;
    c.synth = s;
    c.impute.m_imputations = 2;
    c.impute.chain_iterations = 3;
    c.lasso.n_folds = 5;
    c.lasso.lambda_grid_size = 20;
    c.rf.tune = false;
    c.rf.forest.n_trees = 50;
    return c;
}

std::string slurp(const fs::path& p) { return textio::read_file(p); }

std::vector<std::string> roc_files(const fs::path& dir)
{
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.path().filename().string().starts_with("roc_"))
            out.push_back(e.path().filename().string());
    std::sort(out.begin(), out.end());
    return out;
}

void expect_same_outputs(const fs::path& a, const fs::path& b)
{
    EXPECT_EQ(slurp(a / "report.json"), slurp(b / "report.json"));
    EXPECT_EQ(slurp(a / "table2.txt"), slurp(b / "table2.txt"));
    const auto ra = roc_files(a);
    ASSERT_EQ(ra, roc_files(b));
    for (const auto& f : ra)
        EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
}

} // namespace

TEST(PipelineConfig, RoundTripsThroughJson)
{
    auto c = small_config("somewhere");
    c.lasso.measure = CvMeasure::Misclassification;
    c.rf.forest.max_depth = 4;
    c.rf.forest.mtry_fraction = 0.25;
    c.variants = {true};
    c.families = {Family::Lasso, Family::Forest};
    c.rf_seed = 99;
    const auto j = config_json(c);
    const auto back = parse_config(j);
    EXPECT_EQ(config_json(back), j);
    EXPECT_EQ(config_hash(back), config_hash(c));
    EXPECT_EQ(back.stage_seed("rf"), 99u);
    EXPECT_EQ(back.stage_seed("lasso"), derive_seed(c.seed, "lasso"));
}

TEST(PipelineConfig, HashIgnoresOutputLocation)
{
    auto a = small_config("x");
    auto b = small_config("y");
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.lasso.n_folds = 7;
    EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(PipelineConfig, RejectsUnknownKeysAndBadValues)
{
    EXPECT_ERRC(parse_config(nlohmann::json{{"sed", 3}}), Errc::InvalidConfig);
    EXPECT_ERRC(parse_config(nlohmann::json{{"lasso", {{"fold", 3}}}}), Errc::InvalidConfig);
    EXPECT_ERRC(parse_config(nlohmann::json{{"lasso", {{"measure", "auc"}}}}), Errc::InvalidConfig);
    EXPECT_ERRC(parse_config(nlohmann::json{{"families", {"svm"}}}), Errc::InvalidConfig);
    EXPECT_ERRC(parse_config(nlohmann::json{{"seed", "one"}}), Errc::InvalidConfig);

    testutil::TempDir tmp;
    textio::write_file(tmp / "bad.json", "{ not json");
    EXPECT_ERRC(load_config(tmp / "bad.json"), Errc::InvalidConfig);

    PipelineConfig none;
    EXPECT_ERRC(none.validate(), Errc::InvalidConfig);
    auto c = small_config(tmp.path());
    c.pca_threshold = 1.5;
    EXPECT_ERRC(c.validate(), Errc::InvalidConfig);
}

TEST(Pipeline, EndToEndProducesSixModelsInTableOrder)
{
    testutil::TempDir tmp;
    const auto c = small_config(tmp / "run");
    std::vector<std::string> seen;
    RunOptions opt;
    opt.on_stage = [&](const std::string& s, double) { seen.push_back(s); };
    const auto manifest = run_pipeline(c, opt);
    EXPECT_EQ(seen, stage_names());

    const auto report = nlohmann::json::parse(slurp(tmp / "run" / "report.json"));
    const auto& models = report.at("models");
    ASSERT_EQ(models.size(), 6u);
    const char* fams[] = {"PCA", "L1", "Random forest"};
    for (std::size_t i = 0; i < 6; ++i) {
        const auto name = models[i].at("name").get<std::string>();
        EXPECT_NE(name.find(fams[i / 2]), std::string::npos) << name;
        EXPECT_EQ(is_adjusted_name(name), i % 2 == 1) << name;
        const double auc = models[i].at("auc").get<double>();
        EXPECT_GT(auc, 0.5) << name;
        EXPECT_LE(auc, 1.0) << name;
    }
    EXPECT_EQ(roc_files(tmp / "run").size(), 6u);

    const auto table = slurp(tmp / "run" / "table2.txt");
    EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 7);
    EXPECT_EQ(std::count(table.begin(), table.end(), '*'), 2);

    const auto on_disk = nlohmann::json::parse(slurp(tmp / "run" / "manifest.json"));
    EXPECT_EQ(on_disk, manifest);
    EXPECT_EQ(on_disk.at("stages").size(), stage_names().size());
    EXPECT_FALSE(on_disk.contains("error"));
    EXPECT_TRUE(fs::exists(tmp / "run" / "screening.csv"));
    EXPECT_TRUE(fs::exists(tmp / "run" / "truth.json"));
}

TEST(Pipeline, RerunsAreByteIdentical)
{
    testutil::TempDir tmp;
    auto a = small_config(tmp / "a");
    auto b = small_config(tmp / "b");
    b.threads = 4;
    run_pipeline(a);
    run_pipeline(b);
    expect_same_outputs(tmp / "a", tmp / "b");

    RunOptions from;
    from.from = "lasso";
    run_pipeline(a, from);
    expect_same_outputs(tmp / "a", tmp / "b");
    const auto manifest = nlohmann::json::parse(slurp(tmp / "a" / "manifest.json"));
    EXPECT_EQ(manifest.at("from"), "lasso");
    EXPECT_EQ(manifest.at("stages").size(), 3u);
}

TEST(Pipeline, SeedChangesResults)
{
    testutil::TempDir tmp;
    auto a = small_config(tmp / "a", 1);
    auto b = small_config(tmp / "b", 1);
    b.seed = 2;
    run_pipeline(a);
    run_pipeline(b);
    EXPECT_NE(slurp(tmp / "a" / "report.json"), slurp(tmp / "b" / "report.json"));
}

TEST(Pipeline, SubsetOfFamiliesAndVariants)
{
    testutil::TempDir tmp;
    auto c = small_config(tmp / "run");
    c.families = {Family::Pca};
    c.variants = {true};
    run_pipeline(c);
    const auto report = nlohmann::json::parse(slurp(tmp / "run" / "report.json"));
    ASSERT_EQ(report.at("models").size(), 1u);
    EXPECT_TRUE(is_adjusted_name(report.at("models")[0].at("name").get<std::string>()));
    EXPECT_FALSE(fs::exists(tmp / "run" / "rf_unadjusted"));
}

TEST(Pipeline, MissingDataFailsInLoadStage)
{
    testutil::TempDir tmp;
    PipelineConfig c;
    c.out = tmp / "run";
    c.data = tmp / "absent.csv";
    c.schema = tmp / "absent.json";
    try {
        run_pipeline(c);
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "load");
        EXPECT_EQ(e.code(), Errc::Io);
        EXPECT_NE(std::string(e.what()).find("[load]"), std::string::npos);
    }
    const auto manifest = nlohmann::json::parse(slurp(tmp / "run" / "manifest.json"));
    EXPECT_EQ(manifest.at("error").at("stage"), "load");
    EXPECT_EQ(manifest.at("error").at("code"), "Io");
}

TEST(Pipeline, LaterStageWithoutInputsFails)
{
    testutil::TempDir tmp;
    const auto c = small_config(tmp / "run");
    RunOptions opt;
    opt.from = "pca";
    try {
        run_pipeline(c, opt);
        FAIL() << "expected StageError";
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "pca");
    }
    opt.from = "nonsense";
    EXPECT_ERRC(run_pipeline(c, opt), Errc::InvalidConfig);
}

TEST(Pipeline, HeldOutLabelsDoNotReachTheModels)
{
    testutil::TempDir tmp;
    SynthConfig s;
    s.n_rows = 200;
    s.n_metabolites = 20;
    s.n_true_metabolites = 4;
    s.effect_size = 0.8;
    s.seed = 8;
    auto t = generate(s).table;
    write_csv(t, tmp / "cohort.csv");
    save_schema(t.schema, tmp / "schema.json");

    auto config = [&](const fs::path& data, const fs::path& out) {
        auto c = small_config(out);
        c.synth.reset();
        c.data = data;
        c.schema = tmp / "schema.json";
        c.rf.tune = true;
        c.rf.tuning.tune_trees = 20;
        c.rf.tuning.folds = 3;
        return c;
    };
    run_pipeline(config(tmp / "cohort.csv", tmp / "a"));

    const auto split = read_split(tmp / "a" / "split.json");
    ASSERT_TRUE(split);
    for (auto i : split->test)
        t.outcome[i] = 1 - t.outcome[i];
    write_csv(t, tmp / "flipped.csv");
    run_pipeline(config(tmp / "flipped.csv", tmp / "b"));

    std::size_t compared = 0;
    for (const auto& dir : fs::directory_iterator(tmp / "a")) {
        if (!fs::exists(dir.path() / "model.json"))
            continue;
        for (const auto& f : fs::directory_iterator(dir.path())) {
            const auto name = f.path().filename().string();
            if (!name.starts_with("pred_"))
                continue;
            EXPECT_EQ(slurp(f.path()), slurp(tmp / "b" / dir.path().filename() / name)) << dir.path() << name;
            ++compared;
        }
    }
    EXPECT_EQ(compared, 12u);
    EXPECT_NE(slurp(tmp / "a" / "report.json"), slurp(tmp / "b" / "report.json"));
}
