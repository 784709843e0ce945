#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>

#include <gtest/gtest.h>

#include "cadpred/evalx.hpp"
#include "cadpred/forest.hpp"
#include "test_util.hpp"

using namespace cadpred;

namespace {

struct Data {
    Matrix x;
    Vector y;
};

/// Integer-valued features (plenty of ties) with signal in the first two.
Data tied_data(Index n, Index p, std::uint64_t seed)
{
    Rng rng(seed);
    Data d{Matrix(n, p), Vector(n)};
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < p; ++j)
            d.x(i, j) = static_cast<double>(rng.index(j % 3 == 0 ? 5 : 40));
        const double eta = 0.6 * (d.x(i, 0) - 2.0) - 0.05 * (d.x(i, 1) - 20.0);
        d.y(i) = rng.bernoulli(1.0 / (1.0 + std::exp(-eta))) ? 1.0 : 0.0;
    }
    return d;
}

/// Exhaustive weighted Gini scan: max decrease over every feature and
/// midpoint threshold.
double brute_force_best_decrease(const Matrix& x, const Vector& y, const std::vector<Index>& samples,
                                 std::size_t min_leaf)
{
    const double total = static_cast<double>(samples.size());
    double pos = 0.0;
    for (Index i : samples)
        pos += y(i);
    auto g = [](double n, double k) { return n == 0 ? 0.0 : 1.0 - (k / n) * (k / n) - ((n - k) / n) * ((n - k) / n); };
    const double parent = g(total, pos);
    double best = 0.0;
    for (Index f = 0; f < x.cols(); ++f) {
        std::vector<double> vals;
        for (Index i : samples)
            vals.push_back(x(i, f));
        std::sort(vals.begin(), vals.end());
        vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
        for (std::size_t k = 0; k + 1 < vals.size(); ++k) {
            const double thr = 0.5 * (vals[k] + vals[k + 1]);
            double ln = 0, lp = 0;
            for (Index i : samples)
                if (x(i, f) <= thr) {
                    ln += 1;
                    lp += y(i);
                }
            const double rn = total - ln, rp = pos - lp;
            if (ln < min_leaf || rn < min_leaf)
                continue;
            best = std::max(best, parent - ln / total * g(ln, lp) - rn / total * g(rn, rp));
        }
    }
    return best;
}

/// Reference tree grower: recursion over explicit sample lists, best_split
/// at every node, features drawn from the same path-keyed streams.
struct RefNode {
    bool leaf = true;
    Index feature = -1;
    double threshold = 0.0;
    double prob = 0.0;
    std::unique_ptr<RefNode> left, right;
};

std::unique_ptr<RefNode> reference_tree(const Matrix& x, const Vector& y, const std::vector<Index>& samples,
                                        const RfConfig& cfg, std::uint64_t key, std::size_t depth)
{
    auto node = std::make_unique<RefNode>();
    double pos = 0.0;
    for (Index i : samples)
        pos += y(i);
    node->prob = pos / static_cast<double>(samples.size());
    const std::size_t distinct = [&] {
        auto s = samples;
        std::sort(s.begin(), s.end());
        return static_cast<std::size_t>(std::unique(s.begin(), s.end()) - s.begin());
    }();
    if (pos == 0.0 || pos == static_cast<double>(samples.size()) || samples.size() < 2 * cfg.min_leaf ||
        distinct < 2 || (cfg.max_depth && depth >= *cfg.max_depth))
        return node;
    const auto p = static_cast<std::size_t>(x.cols());
    const std::size_t m = cfg.mtry_count(p);
    std::vector<Index> perm(p);
    std::iota(perm.begin(), perm.end(), Index{0});
    KeyedStream stream(key);
    for (std::size_t k = 0; k < m; ++k)
        std::swap(perm[k], perm[k + stream.index(p - k)]);
    std::vector<Index> feats(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
    const auto split = best_split(x, y, samples, feats, cfg.min_leaf);
    if (!split)
        return node;
    node->leaf = false;
    node->feature = split->feature;
    node->threshold = split->threshold;
    std::vector<Index> l, r;
    for (Index i : samples)
        (x(i, split->feature) <= split->threshold ? l : r).push_back(i);
    node->left = reference_tree(x, y, l, cfg, detail::child_key(key, false), depth + 1);
    node->right = reference_tree(x, y, r, cfg, detail::child_key(key, true), depth + 1);
    return node;
}

void expect_same_tree(const Tree& t, std::size_t k, const RefNode& ref)
{
    const auto& n = t.nodes[k];
    ASSERT_EQ(n.is_leaf(), ref.leaf);
    EXPECT_DOUBLE_EQ(n.prob, ref.prob);
    if (ref.leaf)
        return;
    ASSERT_EQ(n.feature, ref.feature);
    ASSERT_EQ(n.threshold, ref.threshold);
    expect_same_tree(t, static_cast<std::size_t>(n.left), *ref.left);
    expect_same_tree(t, static_cast<std::size_t>(n.right), *ref.right);
}

/// `shallow` equals `deep` cut at `limit`.
void expect_truncation(const Tree& shallow, std::size_t a, const Tree& deep, std::size_t b, std::size_t depth,
                       std::size_t limit)
{
    const auto& s = shallow.nodes[a];
    const auto& d = deep.nodes[b];
    EXPECT_EQ(s.count, d.count);
    EXPECT_EQ(s.positives, d.positives);
    if (depth == limit || d.is_leaf()) {
        EXPECT_TRUE(s.is_leaf());
        return;
    }
    ASSERT_FALSE(s.is_leaf());
    ASSERT_EQ(s.feature, d.feature);
    ASSERT_EQ(s.threshold, d.threshold);
    expect_truncation(shallow, static_cast<std::size_t>(s.left), deep, static_cast<std::size_t>(d.left), depth + 1,
                      limit);
    expect_truncation(shallow, static_cast<std::size_t>(s.right), deep, static_cast<std::size_t>(d.right), depth + 1,
                      limit);
}

std::vector<Index> bootstrap(Index n, std::uint64_t seed)
{
    Rng rng(seed);
    return bootstrap_rows(n, rng);
}

double held_out_auc(const Forest& f, const Data& test)
{
    const auto probs = predict_proba(f, test.x);
    std::vector<int> labels(static_cast<std::size_t>(test.y.size()));
    for (Index i = 0; i < test.y.size(); ++i)
        labels[static_cast<std::size_t>(i)] = static_cast<int>(test.y(i));
    return roc_auc(probs, labels).auc;
}

} // namespace

TEST(Gini, Examples)
{
    EXPECT_DOUBLE_EQ(gini(5, 5), 0.5);
    EXPECT_DOUBLE_EQ(gini(10, 0), 0.0);
    EXPECT_NEAR(gini(7, 3), 0.42, 1e-15);
    EXPECT_ERRC(gini(0, 0), Errc::EmptyNode);
}

TEST(BestSplit, WorkedExample)
{
    Matrix x(4, 1);
    x << 1, 2, 8, 9;
    Vector y(4);
    y << 0, 0, 1, 1;
    const std::vector<Index> s{0, 1, 2, 3}, f{0};
    const auto split = best_split(x, y, s, f);
    ASSERT_TRUE(split);
    EXPECT_EQ(split->threshold, 5.0);
    EXPECT_DOUBLE_EQ(split->decrease, 0.5);
}

TEST(BestSplit, PureNodeAndConstantFeature)
{
    Matrix x(4, 2);
    x << 1, 3, 2, 3, 8, 3, 9, 3;
    Vector pure = Vector::Ones(4), mixed(4);
    mixed << 0, 1, 0, 1;
    const std::vector<Index> s{0, 1, 2, 3};
    EXPECT_FALSE(best_split(x, pure, s, std::vector<Index>{0, 1}));
    EXPECT_FALSE(best_split(x, mixed, s, std::vector<Index>{1}));
}

TEST(BestSplit, MatchesExhaustiveScan)
{
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto d = tied_data(60, 4, seed);
        const auto samples = bootstrap(60, seed + 1000);
        const std::vector<Index> feats{0, 1, 2, 3};
        for (std::size_t min_leaf : {1u, 5u}) {
            const double oracle = brute_force_best_decrease(d.x, d.y, samples, min_leaf);
            const auto split = best_split(d.x, d.y, samples, feats, min_leaf);
            if (oracle <= 1e-12) {
                EXPECT_FALSE(split);
                continue;
            }
            ASSERT_TRUE(split);
            EXPECT_NEAR(split->decrease, oracle, 1e-12);
        }
    }
}

TEST(GrowTree, MatchesReferenceInBothSearchModes)
{
    // mtry 1.0 takes the presorted path, a small mtry on many features the
    // per-node sort/histogram path.
    for (double mtry : {1.0, 0.05}) {
        for (std::uint64_t seed = 0; seed < 8; ++seed) {
            const auto d = tied_data(150, 40, seed);
            RfConfig cfg;
            cfg.mtry_fraction = mtry;
            cfg.min_leaf = 1 + seed % 3;
            const auto samples = bootstrap(150, seed);
            const std::uint64_t ts = 77 + seed;
            const Tree t = grow_tree(d.x, d.y, samples, cfg, ts);
            const auto ref = reference_tree(d.x, d.y, samples, cfg, Rng(ts).next_u64(), 0);
            expect_same_tree(t, 0, *ref);
        }
    }
}

TEST(GrowTree, DepthLimitIsTruncation)
{
    for (double mtry : {1.0, 0.1}) {
        const auto d = tied_data(300, 30, 5);
        RfConfig cfg;
        cfg.mtry_fraction = mtry;
        const auto samples = bootstrap(300, 6);
        const Tree deep = grow_tree(d.x, d.y, samples, cfg, 9);
        ASSERT_GT(deep.depth(), 4u);
        for (std::size_t limit : {0u, 1u, 2u, 4u}) {
            cfg.max_depth = limit;
            const Tree shallow = grow_tree(d.x, d.y, samples, cfg, 9);
            EXPECT_LE(shallow.depth(), limit);
            expect_truncation(shallow, 0, deep, 0, 0, limit);
        }
    }
}

TEST(GrowTree, DepthZeroIsPrevalenceLeaf)
{
    const auto d = tied_data(100, 3, 1);
    RfConfig cfg;
    cfg.max_depth = 0;
    std::vector<Index> all(100);
    std::iota(all.begin(), all.end(), Index{0});
    const Tree t = grow_tree(d.x, d.y, all, cfg, 1);
    ASSERT_EQ(t.nodes.size(), 1u);
    EXPECT_DOUBLE_EQ(t.nodes[0].prob, d.y.mean());
}

TEST(GrowTree, SeparableDataSplitsOnce)
{
    Matrix x(10, 1);
    Vector y(10);
    for (Index i = 0; i < 10; ++i) {
        x(i, 0) = i;
        y(i) = i >= 5;
    }
    std::vector<Index> all(10);
    std::iota(all.begin(), all.end(), Index{0});
    const Tree t = grow_tree(x, y, all, RfConfig{}, 3);
    ASSERT_EQ(t.nodes.size(), 3u);
    EXPECT_EQ(t.nodes[0].threshold, 4.5);
    EXPECT_EQ(t.nodes[1].prob, 0.0);
    EXPECT_EQ(t.nodes[2].prob, 1.0);
    EXPECT_EQ(grow_tree(x, y, all, RfConfig{}, 3).nodes.size(), t.nodes.size());
}

TEST(Forest, SingleTreeOnSeparableDataIsExact)
{
    Matrix x(40, 1);
    Vector y(40);
    for (Index i = 0; i < 40; ++i) {
        x(i, 0) = i < 20 ? i : 100 + i;
        y(i) = i >= 20;
    }
    RfConfig cfg;
    cfg.n_trees = 1;
    cfg.seed = 4;
    const auto probs = predict_proba(fit_forest(x, y, cfg), x);
    for (Index i = 0; i < 40; ++i)
        EXPECT_EQ(probs[static_cast<std::size_t>(i)], y(i));
}

TEST(Forest, ThreadCountDoesNotChangeResults)
{
    const auto d = tied_data(200, 12, 2);
    RfConfig cfg;
    cfg.n_trees = 60;
    cfg.seed = 8;
    const auto a = fit_forest(d.x, d.y, cfg);
    cfg.threads = 4;
    const auto b = fit_forest(d.x, d.y, cfg);
    EXPECT_EQ(dump_forest(a), dump_forest(b));
    EXPECT_EQ(predict_proba(a, d.x, 1), predict_proba(b, d.x, 3));
}

TEST(Forest, DumpRoundTrip)
{
    const auto d = tied_data(120, 5, 3);
    RfConfig cfg;
    cfg.n_trees = 20;
    cfg.hard_vote = true;
    const auto f = fit_forest(d.x, d.y, cfg);
    const auto g = parse_forest(dump_forest(f));
    EXPECT_TRUE(g.hard_vote);
    EXPECT_EQ(predict_proba(f, d.x), predict_proba(g, d.x));
    EXPECT_EQ(dump_forest(g), dump_forest(f));
    EXPECT_ERRC(parse_forest("nonsense"), Errc::Io);
}

TEST(Forest, ProbabilitiesAndErrors)
{
    const auto d = tied_data(100, 3, 4);
    RfConfig cfg;
    cfg.n_trees = 10;
    const auto f = fit_forest(d.x, d.y, cfg);
    for (double p : predict_proba(f, d.x)) {
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 1.0);
    }
    EXPECT_ERRC(predict_proba(f, Matrix::Zero(2, 4)), Errc::DimensionMismatch);
    EXPECT_ERRC(fit_forest(d.x, Vector::Zero(100), cfg), Errc::NoClassVariation);
    cfg.mtry_fraction = 0.0;
    EXPECT_ERRC(fit_forest(d.x, d.y, cfg), Errc::InvalidConfig);
}

TEST(Importance, SignalFeatureRanksFirst)
{
    Rng rng(5);
    Matrix x(400, 6);
    Vector y(400);
    for (Index i = 0; i < 400; ++i) {
        for (Index j = 0; j < 6; ++j)
            x(i, j) = rng.normal();
        y(i) = rng.bernoulli(x(i, 3) > 0 ? 0.85 : 0.15);
    }
    RfConfig cfg;
    cfg.n_trees = 100;
    const auto imp = importance(fit_forest(x, y, cfg));
    EXPECT_EQ(std::max_element(imp.begin(), imp.end()) - imp.begin(), 3);
    EXPECT_NEAR(std::accumulate(imp.begin(), imp.end(), 0.0), 1.0, 1e-12);
}

TEST(Importance, StumpsOnOneFeature)
{
    Rng rng(6);
    Matrix x(100, 3);
    Vector y(100);
    for (Index i = 0; i < 100; ++i) {
        y(i) = i % 2;
        x(i, 0) = rng.normal();
        x(i, 1) = y(i) + 0.01 * rng.uniform();
        x(i, 2) = rng.normal();
    }
    RfConfig cfg;
    cfg.n_trees = 30;
    cfg.mtry_fraction = 1.0;
    cfg.max_depth = 1;
    const auto imp = importance(fit_forest(x, y, cfg));
    EXPECT_DOUBLE_EQ(imp[1], 1.0);
    cfg.max_depth = 0;
    EXPECT_ERRC(importance(fit_forest(x, y, cfg)), Errc::NoSplits);
}

TEST(Importance, NoiseIsRoughlyUniform)
{
    std::vector<double> mean(5, 0.0);
    const int seeds = 20;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
        Rng rng(seed);
        Matrix x(300, 5);
        Vector y(300);
        for (Index i = 0; i < 300; ++i) {
            for (Index j = 0; j < 5; ++j)
                x(i, j) = rng.normal();
            y(i) = rng.bernoulli(0.5);
        }
        RfConfig cfg;
        cfg.n_trees = 50;
        cfg.seed = seed;
        const auto imp = importance(fit_forest(x, y, cfg));
        for (std::size_t j = 0; j < 5; ++j)
            mean[j] += imp[j] / seeds;
    }
    for (double m : mean)
        EXPECT_NEAR(m, 0.2, 0.03);
}

TEST(Forest, NullDataAucNearHalf)
{
    double sum = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        Data train{Matrix(300, 10), Vector(300)}, test{Matrix(300, 10), Vector(300)};
        for (Data* d : {&train, &test})
            for (Index i = 0; i < 300; ++i) {
                for (Index j = 0; j < 10; ++j)
                    d->x(i, j) = rng.normal();
                d->y(i) = rng.bernoulli(0.7);
            }
        RfConfig cfg;
        cfg.n_trees = 100;
        cfg.seed = seed;
        sum += held_out_auc(fit_forest(train.x, train.y, cfg), test);
    }
    EXPECT_NEAR(sum / 5.0, 0.5, 0.05);
}

TEST(Tuning, GroupedCvMatchesSeparateRuns)
{
    const auto d = tied_data(150, 10, 7);
    std::vector<RfConfig> configs;
    for (std::optional<std::size_t> depth : {std::optional<std::size_t>{1}, std::optional<std::size_t>{3},
                                             std::optional<std::size_t>{}}) {
        RfConfig c;
        c.n_trees = 15;
        c.mtry_fraction = 0.3;
        c.max_depth = depth;
        c.seed = 4;
        configs.push_back(c);
    }
    for (auto crit : {RfCriterion::Misclassification, RfCriterion::Deviance}) {
        const auto together = detail::cv_errors(d.x, d.y, configs, 3, 11, crit);
        for (std::size_t c = 0; c < configs.size(); ++c) {
            const auto alone = detail::cv_errors(d.x, d.y, {configs[c]}, 3, 11, crit);
            EXPECT_EQ(together[c], alone[0]);
        }
    }
}

TEST(Tuning, SinglePointGrid)
{
    const auto d = tied_data(120, 6, 8);
    TuneGrid g;
    g.mtry_fractions = {0.5};
    g.max_depths = {std::nullopt};
    TuneOptions opt;
    opt.folds = 3;
    opt.tune_trees = 10;
    const auto r = tune_two_stage(d.x, d.y, g, opt);
    EXPECT_EQ(*r.config.mtry_fraction, 0.5);
    EXPECT_FALSE(r.config.max_depth);
    EXPECT_EQ(r.config.n_trees, 5000u);
    EXPECT_EQ(r.stage1.size(), 1u);
    EXPECT_EQ(r.stage2.size(), 1u);
}

TEST(Tuning, InteractionNeedsLargerMtry)
{
    // Label = XOR of the signs of features 0 and 1, among 18 noise features.
    Rng rng(9);
    const Index n = 400, p = 20;
    Matrix x(n, p);
    Vector y(n);
    for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < p; ++j)
            x(i, j) = rng.normal();
        const bool a = x(i, 0) > 0, b = x(i, 1) > 0;
        y(i) = rng.bernoulli((a != b) ? 0.9 : 0.1);
    }
    TuneGrid g;
    g.mtry_fractions = {0.05, 0.5, 1.0};
    g.max_depths = {4, std::nullopt};
    TuneOptions opt;
    opt.folds = 4;
    opt.tune_trees = 60;
    opt.seed = 2;
    const auto r = tune_two_stage(x, y, g, opt);
    EXPECT_GT(*r.config.mtry_fraction, 1.0 / p);
    // Stage 2's choice is its argmin.
    for (const auto& pt : r.stage2)
        EXPECT_GE(pt.cv_error, std::min_element(r.stage2.begin(), r.stage2.end(), [](auto& a, auto& b) {
                                   return a.cv_error < b.cv_error;
                               })->cv_error);
}

TEST(Tuning, Errors)
{
    const auto d = tied_data(50, 3, 10);
    TuneGrid empty;
    EXPECT_ERRC(tune_two_stage(d.x, d.y, empty, TuneOptions{}), Errc::GridEmpty);
    TuneGrid g;
    g.mtry_fractions = {1.0};
    g.max_depths = {2};
    TuneOptions opt;
    opt.folds = 1;
    EXPECT_ERRC(tune_two_stage(d.x, d.y, g, opt), Errc::FoldTooSmall);
}
