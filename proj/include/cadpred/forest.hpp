#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cadpred/cohort.hpp"
#include "cadpred/cv.hpp"
#include "cadpred/error.hpp"
#include "cadpred/parallel.hpp"
#include "cadpred/rng.hpp"
#include "cadpred/textio.hpp"

namespace cadpred {

/// Binary Gini impurity 1 - p0^2 - p1^2.
inline double gini(std::size_t negatives, std::size_t positives)
{
    const std::size_t total = negatives + positives;
    if (total == 0)
        fail(Errc::EmptyNode, "Gini impurity of an empty node");
    const double p1 = static_cast<double>(positives) / static_cast<double>(total);
    const double p0 = 1.0 - p1;
    return 1.0 - p0 * p0 - p1 * p1;
}

struct RfConfig {
    std::size_t n_trees = 5000;
    /// Fraction of features drawn at every split; unset = sqrt(p)/p.
    std::optional<double> mtry_fraction;
    /// Unset = grow until pure or min_leaf.
    std::optional<std::size_t> max_depth;
    std::size_t min_leaf = 1;
    std::uint64_t seed = 0;
    /// Aggregate hard votes instead of leaf probabilities.
    bool hard_vote = false;
    unsigned threads = 1;

    void validate() const
    {
        if (n_trees < 1)
            fail(Errc::InvalidConfig, "n_trees must be >= 1");
        if (mtry_fraction && !(*mtry_fraction > 0.0 && *mtry_fraction <= 1.0))
            fail(Errc::InvalidConfig, "mtry_fraction must lie in (0,1]");
        if (min_leaf < 1)
            fail(Errc::InvalidConfig, "min_leaf must be >= 1");
    }

    double resolved_mtry(std::size_t p) const
    {
        return mtry_fraction ? *mtry_fraction : std::sqrt(static_cast<double>(p)) / static_cast<double>(p);
    }

    std::size_t mtry_count(std::size_t p) const
    {
        const auto m = static_cast<std::size_t>(std::ceil(resolved_mtry(p) * static_cast<double>(p) - 1e-9));
        return std::clamp<std::size_t>(m, 1, p);
    }
};

/// Flat tree node. feature < 0 marks a leaf; samples with x <= threshold go left.
struct TreeNode {
    std::int32_t feature = -1;
    std::int32_t left = -1;
    std::int32_t right = -1;
    std::uint32_t count = 0;     // training samples (with bootstrap multiplicity)
    std::uint32_t positives = 0;
    double threshold = 0.0;
    double prob = 0.0;           // positives / count
    double decrease = 0.0;       // impurity decrease weighted by count / root count

    bool is_leaf() const { return feature < 0; }
};

struct Tree {
    std::vector<TreeNode> nodes;

    template <class Row>
    const TreeNode& leaf_for(const Row& row) const
    {
        std::size_t k = 0;
        while (!nodes[k].is_leaf())
            k = static_cast<std::size_t>(row(nodes[k].feature) <= nodes[k].threshold ? nodes[k].left : nodes[k].right);
        return nodes[k];
    }

    std::size_t depth() const
    {
        std::vector<std::size_t> d(nodes.size(), 0);
        std::size_t best = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
            best = std::max(best, d[k]);
            if (!nodes[k].is_leaf()) {
                d[static_cast<std::size_t>(nodes[k].left)] = d[k] + 1;
                d[static_cast<std::size_t>(nodes[k].right)] = d[k] + 1;
            }
        }
        return best;
    }
};

struct SplitChoice {
    Index feature = -1;
    double threshold = 0.0;
    double decrease = 0.0; // parent Gini minus weighted child Gini
};

namespace detail {

/// Rank-encoded training data shared by all trees of a forest.
struct EncodedData {
    Index n = 0;
    Index p = 0;
    std::vector<std::vector<double>> levels; // sorted distinct values per feature
    std::vector<std::uint32_t> rank;         // rank[f * n + i]
    std::vector<std::uint32_t> order;        // order[f * n + k]: rows ascending by (rank, row)
    std::vector<std::uint8_t> y;

    std::uint32_t r(Index f, Index i) const { return rank[static_cast<std::size_t>(f * n + i)]; }
};

inline EncodedData encode(const Matrix& x, const Vector& y)
{
    EncodedData e;
    e.n = x.rows();
    e.p = x.cols();
    const auto n = static_cast<std::size_t>(e.n);
    e.levels.resize(static_cast<std::size_t>(e.p));
    e.rank.resize(n * static_cast<std::size_t>(e.p));
    e.order.resize(n * static_cast<std::size_t>(e.p));
    e.y.resize(n);
    for (Index i = 0; i < e.n; ++i) {
        if (y(i) != 0.0 && y(i) != 1.0)
            fail(Errc::NonBinaryOutcome, "forest labels must be 0/1");
        e.y[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(y(i));
    }
    std::vector<double> col;
    std::vector<std::uint32_t> start;
    for (Index f = 0; f < e.p; ++f) {
        col.assign(x.col(f).data(), x.col(f).data() + e.n);
        for (double v : col)
            if (!std::isfinite(v))
                fail(Errc::DomainError, "forest input must be finite");
        std::sort(col.begin(), col.end());
        col.erase(std::unique(col.begin(), col.end()), col.end());
        std::uint32_t* rk = e.rank.data() + static_cast<std::size_t>(f) * n;
        for (Index i = 0; i < e.n; ++i)
            rk[i] = static_cast<std::uint32_t>(std::lower_bound(col.begin(), col.end(), x(i, f)) - col.begin());
        // Counting sort by rank keeps rows ascending within a rank.
        start.assign(col.size() + 1, 0);
        for (std::size_t i = 0; i < n; ++i)
            ++start[rk[i] + 1];
        for (std::size_t k = 1; k < start.size(); ++k)
            start[k] += start[k - 1];
        std::uint32_t* ord = e.order.data() + static_cast<std::size_t>(f) * n;
        for (std::size_t i = 0; i < n; ++i)
            ord[start[rk[i]]++] = static_cast<std::uint32_t>(i);
        e.levels[static_cast<std::size_t>(f)] = std::move(col);
        col = {};
    }
    return e;
}

inline double split_midpoint(double lo, double hi)
{
    double t = lo + 0.5 * (hi - lo);
    if (!(t < hi))
        t = lo;
    return t;
}

/// Scratch buffers reused across nodes of one tree.
struct SplitScratch {
    std::vector<std::uint32_t> hist_total;
    std::vector<std::uint32_t> hist_pos;
    std::vector<std::uint64_t> keys;
};

struct SplitSearch {
    Index feature = -1;
    std::uint32_t rank_cut = 0; // rank <= cut goes left
    double threshold = 0.0;
    double decrease = 0.0;
};

constexpr double kMinDecrease = 1e-12;

inline double gini_counts(std::uint32_t total, std::uint32_t pos)
{
    const double p1 = static_cast<double>(pos) / static_cast<double>(total);
    return 2.0 * p1 * (1.0 - p1);
}

/// Running best split over candidate thresholds, fed feature by feature in
/// ascending rank. Ties keep the earlier candidate, so the feature order
/// decides ties.
class SplitTracker {
public:
    SplitTracker(const EncodedData& d, std::uint32_t total, std::uint32_t pos, std::size_t min_leaf)
        : d_(d), total_(total), pos_(pos), min_leaf_(min_leaf), parent_(gini_counts(total, pos)),
          inv_total_(1.0 / static_cast<double>(total))
    {
    }

    /// Left child = ranks <= lo_rank with ln samples, lp of them positive.
    void consider(Index f, std::uint32_t ln, std::uint32_t lp, std::uint32_t lo_rank, std::uint32_t hi_rank)
    {
        const std::uint32_t rn = total_ - ln;
        if (ln < min_leaf_ || rn < min_leaf_)
            return;
        const std::uint32_t rp = pos_ - lp;
        const double child = static_cast<double>(ln) * inv_total_ * gini_counts(ln, lp) +
                             static_cast<double>(rn) * inv_total_ * gini_counts(rn, rp);
        const double dec = parent_ - child;
        if (dec > kMinDecrease && dec > best.decrease + kMinDecrease) {
            best.feature = f;
            best.rank_cut = lo_rank;
            best.decrease = dec;
            hi_rank_ = hi_rank;
        }
    }

    SplitSearch finish()
    {
        if (best.feature >= 0) {
            const auto& lv = d_.levels[static_cast<std::size_t>(best.feature)];
            best.threshold = split_midpoint(lv[best.rank_cut], lv[hi_rank_]);
        }
        return best;
    }

    SplitSearch best;

private:
    const EncodedData& d_;
    std::uint32_t total_, pos_;
    std::size_t min_leaf_;
    double parent_, inv_total_;
    std::uint32_t hi_rank_ = 0;
};

/// Exact best Gini split of the distinct rows `rows` carrying multiplicities
/// `weight[row]`, over `features` in the given order.
inline SplitSearch search_split(const EncodedData& d, std::span<const std::uint32_t> rows,
                                const std::uint32_t* weight, std::uint32_t total, std::uint32_t pos,
                                std::span<const Index> features, std::size_t min_leaf, SplitScratch& s)
{
    SplitTracker tr(d, total, pos, min_leaf);
    for (Index f : features) {
        const auto n_levels = static_cast<std::uint32_t>(d.levels[static_cast<std::size_t>(f)].size());
        if (n_levels < 2)
            continue;
        const std::uint32_t* rk = d.rank.data() + static_cast<std::size_t>(f * d.n);
        if (rows.size() * 8 > n_levels) {
            if (s.hist_total.size() < n_levels) {
                s.hist_total.assign(n_levels, 0);
                s.hist_pos.assign(n_levels, 0);
            }
            for (std::uint32_t i : rows) {
                const std::uint32_t r = rk[i];
                s.hist_total[r] += weight[i];
                s.hist_pos[r] += d.y[i] ? weight[i] : 0;
            }
            std::uint32_t ln = 0, lp = 0, prev = 0;
            bool have_prev = false;
            for (std::uint32_t r = 0; r < n_levels; ++r) {
                const std::uint32_t c = s.hist_total[r];
                if (c == 0)
                    continue;
                if (have_prev)
                    tr.consider(f, ln, lp, prev, r);
                ln += c;
                lp += s.hist_pos[r];
                s.hist_total[r] = 0;
                s.hist_pos[r] = 0;
                prev = r;
                have_prev = true;
            }
        } else {
            // key = rank | y | weight, so one sort groups rows by rank.
            s.keys.clear();
            for (std::uint32_t i : rows)
                s.keys.push_back((static_cast<std::uint64_t>(rk[i]) << 33) |
                                 (static_cast<std::uint64_t>(d.y[i]) << 32) | weight[i]);
            std::sort(s.keys.begin(), s.keys.end());
            std::uint32_t ln = 0, lp = 0;
            for (std::size_t k = 0; k < s.keys.size();) {
                const auto r = static_cast<std::uint32_t>(s.keys[k] >> 33);
                do {
                    const auto w = static_cast<std::uint32_t>(s.keys[k]);
                    ln += w;
                    lp += (s.keys[k] >> 32 & 1u) ? w : 0;
                    ++k;
                } while (k < s.keys.size() && static_cast<std::uint32_t>(s.keys[k] >> 33) == r);
                if (k < s.keys.size())
                    tr.consider(f, ln, lp, r, static_cast<std::uint32_t>(s.keys[k] >> 33));
            }
        }
    }
    return tr.finish();
}

/// Same search over per-feature presorted row lists: sorted + f * stride
/// holds the node's rows ascending by rank of feature f.
/// `packed[row]` = weight << 1 | label.
inline SplitSearch search_split_presorted(const EncodedData& d, const std::uint32_t* sorted, std::size_t stride,
                                          std::size_t begin, std::size_t end, const std::uint32_t* packed,
                                          std::uint32_t total, std::uint32_t pos, std::span<const Index> features,
                                          std::size_t min_leaf)
{
    SplitTracker tr(d, total, pos, min_leaf);
    for (Index f : features) {
        const std::uint32_t* rk = d.rank.data() + static_cast<std::size_t>(f * d.n);
        const std::uint32_t* ord = sorted + static_cast<std::size_t>(f) * stride;
        std::uint32_t ln = 0, lp = 0;
        std::uint32_t r = rk[ord[begin]];
        for (std::size_t k = begin; k + 1 < end; ++k) {
            const std::uint32_t wy = packed[ord[k]];
            ln += wy >> 1;
            lp += (wy >> 1) & (0u - (wy & 1u));
            const std::uint32_t next = rk[ord[k + 1]];
            if (next != r) {
                tr.consider(f, ln, lp, r, next);
                r = next;
            }
        }
    }
    return tr.finish();
}

/// Grows one tree from a bootstrap draw (row indices, repeats allowed).
///
/// Repeated rows are collapsed into multiplicities. With a large feature
/// draw the rows of every feature are kept presorted and partitioned at each
/// split; otherwise each node sorts the drawn features on demand. Both paths
/// see identical candidate counts, so they grow the same tree.
///
/// Each node draws its features from a stream keyed by its path from the
/// root (`root_key`, then child_key per step). A depth-limited tree is
/// therefore exactly the truncation of the unlimited one.
inline std::uint64_t child_key(std::uint64_t parent, bool right)
{
    return splitmix64(parent ^ (right ? 0x5851f42d4c957f2dULL : 0x14057b7ef767814fULL));
}

inline Tree grow_encoded(const EncodedData& d, const std::vector<Index>& draw, const RfConfig& cfg,
                         std::uint64_t root_key)
{
    Tree tree;
    if (draw.empty())
        fail(Errc::EmptyNode, "cannot grow a tree on an empty sample");
    const auto n = static_cast<std::size_t>(d.n);
    const auto p = static_cast<std::size_t>(d.p);
    const std::size_t m = cfg.mtry_count(p);
    const double root_count = static_cast<double>(draw.size());

    std::vector<std::uint32_t> weight(n, 0);
    for (Index i : draw) {
        if (i < 0 || static_cast<std::size_t>(i) >= n)
            fail(Errc::OutOfRange, "sample index out of range");
        ++weight[static_cast<std::size_t>(i)];
    }
    std::vector<std::uint32_t> rows;
    for (std::size_t i = 0; i < n; ++i)
        if (weight[i])
            rows.push_back(static_cast<std::uint32_t>(i));
    const std::size_t nu = rows.size();

    const bool presorted = m * 8 >= p && p > 1;
    std::vector<std::uint32_t> packed(n);
    for (std::size_t i = 0; i < n; ++i)
        packed[i] = weight[i] << 1 | d.y[i];
    std::vector<std::uint32_t> sorted, buffer;
    std::vector<std::uint8_t> goes_left;
    if (presorted) {
        sorted.resize(p * nu + 1); // +1: branchless fill may write one past
        buffer.resize(nu);
        goes_left.assign(n, 0);
        for (std::size_t f = 0; f < p; ++f) {
            const std::uint32_t* ord = d.order.data() + f * n;
            std::uint32_t* out = sorted.data() + f * nu;
            for (std::size_t k = 0; k < n; ++k) {
                *out = ord[k];
                out += weight[ord[k]] != 0;
            }
        }
    }

    std::vector<Index> perm(p);
    std::iota(perm.begin(), perm.end(), Index{0});
    std::vector<Index> feats;
    SplitScratch scratch;

    struct Pending {
        std::int32_t node;
        std::size_t begin, end, depth;
        std::uint64_t key;
    };
    std::vector<Pending> stack;
    tree.nodes.emplace_back();
    stack.push_back({0, 0, nu, 0, root_key});

    while (!stack.empty()) {
        const Pending job = stack.back();
        stack.pop_back();
        const std::uint32_t* node_rows = presorted ? sorted.data() + job.begin : rows.data() + job.begin;
        const std::size_t n_rows = job.end - job.begin;
        std::uint32_t count = 0, pos = 0;
        for (std::size_t k = 0; k < n_rows; ++k) {
            const std::uint32_t i = node_rows[k];
            count += weight[i];
            pos += d.y[i] ? weight[i] : 0;
        }
        {
            auto& node = tree.nodes[static_cast<std::size_t>(job.node)];
            node.count = count;
            node.positives = pos;
            node.prob = static_cast<double>(pos) / static_cast<double>(count);
        }
        const bool pure = pos == 0 || pos == count;
        if (pure || count < 2 * cfg.min_leaf || n_rows < 2 || (cfg.max_depth && job.depth >= *cfg.max_depth))
            continue;

        KeyedStream stream(job.key);
        std::iota(perm.begin(), perm.end(), Index{0});
        for (std::size_t k = 0; k < m; ++k) {
            const std::size_t j = k + static_cast<std::size_t>(stream.index(p - k));
            std::swap(perm[k], perm[j]);
        }
        // Draw order, not index order: exact ties then fall to a random feature.
        feats.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));

        const SplitSearch best =
            presorted ? search_split_presorted(d, sorted.data(), nu, job.begin, job.end, packed.data(), count, pos,
                                               feats, cfg.min_leaf)
                      : search_split(d, std::span<const std::uint32_t>(node_rows, n_rows), weight.data(), count, pos,
                                     feats, cfg.min_leaf, scratch);
        if (best.feature < 0)
            continue;

        const std::uint32_t* rk = d.rank.data() + static_cast<std::size_t>(best.feature * d.n);
        std::size_t n_left = 0;
        if (presorted) {
            for (std::size_t k = job.begin; k < job.end; ++k) {
                const std::uint32_t i = sorted[k];
                goes_left[i] = rk[i] <= best.rank_cut;
                n_left += goes_left[i];
            }
            for (std::size_t f = 0; f < p; ++f) {
                std::uint32_t* seg = sorted.data() + f * nu;
                std::size_t l = job.begin, r = 0;
                for (std::size_t k = job.begin; k < job.end; ++k) {
                    const std::uint32_t i = seg[k];
                    const std::uint8_t g = goes_left[i];
                    seg[l] = i;
                    buffer[r] = i;
                    l += g;
                    r += 1u - g;
                }
                std::copy(buffer.begin(), buffer.begin() + static_cast<std::ptrdiff_t>(r), seg + l);
            }
        } else {
            auto first = rows.begin() + static_cast<std::ptrdiff_t>(job.begin);
            auto mid = std::partition(first, rows.begin() + static_cast<std::ptrdiff_t>(job.end),
                                      [&](std::uint32_t i) { return rk[i] <= best.rank_cut; });
            n_left = static_cast<std::size_t>(mid - first);
        }
        const std::size_t split_at = job.begin + n_left;

        const auto left = static_cast<std::int32_t>(tree.nodes.size());
        tree.nodes.emplace_back();
        const auto right = static_cast<std::int32_t>(tree.nodes.size());
        tree.nodes.emplace_back();
        auto& node = tree.nodes[static_cast<std::size_t>(job.node)];
        node.feature = static_cast<std::int32_t>(best.feature);
        node.threshold = best.threshold;
        node.left = left;
        node.right = right;
        node.decrease = static_cast<double>(node.count) / root_count * best.decrease;
        stack.push_back({right, split_at, job.end, job.depth + 1, child_key(job.key, true)});
        stack.push_back({left, job.begin, split_at, job.depth + 1, child_key(job.key, false)});
    }
    return tree;
}

} // namespace detail

/// Best Gini split of `samples` (row indices, repeats allowed) over the
/// candidate features. Thresholds are midpoints between consecutive distinct
/// values; none is returned when no split lowers impurity. Among exactly
/// tied splits the first listed feature wins.
inline std::optional<SplitChoice> best_split(const Matrix& x, const Vector& y, std::span<const Index> samples,
                                             std::span<const Index> features, std::size_t min_leaf = 1)
{
    if (samples.size() < 2)
        return std::nullopt;
    const auto enc = detail::encode(x, y);
    std::vector<Index> feats;
    for (Index f : features) {
        if (f < 0 || f >= enc.p)
            fail(Errc::OutOfRange, "feature index out of range");
        if (std::find(feats.begin(), feats.end(), f) == feats.end())
            feats.push_back(f);
    }
    std::vector<std::uint32_t> weight(static_cast<std::size_t>(enc.n), 0);
    for (Index i : samples) {
        if (i < 0 || i >= enc.n)
            fail(Errc::OutOfRange, "sample index out of range");
        ++weight[static_cast<std::size_t>(i)];
    }
    std::vector<std::uint32_t> rows;
    std::uint32_t pos = 0;
    for (std::size_t i = 0; i < weight.size(); ++i)
        if (weight[i]) {
            rows.push_back(static_cast<std::uint32_t>(i));
            pos += enc.y[i] ? weight[i] : 0;
        }
    detail::SplitScratch scratch;
    const auto s = detail::search_split(enc, rows, weight.data(), static_cast<std::uint32_t>(samples.size()), pos,
                                        feats, min_leaf, scratch);
    if (s.feature < 0)
        return std::nullopt;
    return SplitChoice{s.feature, s.threshold, s.decrease};
}

/// Grows one tree on `samples` (typically a bootstrap draw).
inline Tree grow_tree(const Matrix& x, const Vector& y, const std::vector<Index>& samples, const RfConfig& cfg,
                      std::uint64_t tree_seed)
{
    cfg.validate();
    const auto enc = detail::encode(x, y);
    Rng rng(tree_seed);
    return detail::grow_encoded(enc, samples, cfg, rng.next_u64());
}

struct Forest {
    std::vector<Tree> trees;
    Index n_features = 0;
    bool hard_vote = false;
};

inline std::uint64_t tree_seed(std::uint64_t seed, std::size_t tree) { return derive_seed(seed, "rf-tree", tree); }

/// Bootstrap rows for one tree: n uniform draws with replacement from the
/// tree's stream; its next draw then keys the per-node feature streams.
inline std::vector<Index> bootstrap_rows(Index n, Rng& rng)
{
    std::vector<Index> rows(static_cast<std::size_t>(n));
    for (auto& r : rows)
        r = static_cast<Index>(rng.index(static_cast<std::uint64_t>(n)));
    std::sort(rows.begin(), rows.end());
    return rows;
}

namespace detail {

inline Forest fit_encoded(const EncodedData& d, const RfConfig& cfg)
{
    Forest f;
    f.n_features = d.p;
    f.hard_vote = cfg.hard_vote;
    f.trees.resize(cfg.n_trees);
    parallel_for(cfg.n_trees, cfg.threads, [&](std::size_t t) {
        Rng rng(tree_seed(cfg.seed, t));
        const auto rows = bootstrap_rows(d.n, rng);
        f.trees[t] = grow_encoded(d, rows, cfg, rng.next_u64());
    });
    return f;
}

} // namespace detail

inline Forest fit_forest(const Matrix& x, const Vector& y, const RfConfig& cfg)
{
    cfg.validate();
    if (x.rows() != y.size())
        fail(Errc::LengthMismatch, "forest design/label length mismatch");
    if (x.rows() == 0)
        fail(Errc::EmptyInput, "no training rows");
    const double s = y.sum();
    if (s <= 0.0 || s >= static_cast<double>(y.size()))
        fail(Errc::NoClassVariation, "forest needs both classes");
    return detail::fit_encoded(detail::encode(x, y), cfg);
}

/// Mean over trees of the leaf class-1 probability (or of leaf votes).
inline std::vector<double> predict_proba(const Forest& forest, const Matrix& x, unsigned threads = 1)
{
    if (x.cols() != forest.n_features)
        fail(Errc::DimensionMismatch, "forest expects " + std::to_string(forest.n_features) + " features");
    const auto n = static_cast<std::size_t>(x.rows());
    std::vector<double> out(n, 0.0);
    constexpr std::size_t chunk = 64;
    const std::size_t n_chunks = (n + chunk - 1) / chunk;
    parallel_for(n_chunks, threads, [&](std::size_t c) {
        const std::size_t lo = c * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        for (std::size_t i = lo; i < hi; ++i) {
            const auto row = x.row(static_cast<Index>(i));
            double s = 0.0;
            for (const auto& t : forest.trees) {
                const double pr = t.leaf_for(row).prob;
                s += forest.hard_vote ? (pr >= 0.5 ? 1.0 : 0.0) : pr;
            }
            out[i] = s / static_cast<double>(forest.trees.size());
        }
    });
    return out;
}

/// Mean decrease in Gini impurity per feature, normalized to sum 1.
inline std::vector<double> importance(const Forest& forest)
{
    std::vector<double> imp(static_cast<std::size_t>(forest.n_features), 0.0);
    for (const auto& t : forest.trees)
        for (const auto& node : t.nodes)
            if (!node.is_leaf())
                imp[static_cast<std::size_t>(node.feature)] += node.decrease;
    double total = 0.0;
    for (auto& v : imp) {
        v /= static_cast<double>(forest.trees.size());
        total += v;
    }
    if (!(total > 0.0))
        fail(Errc::NoSplits, "forest contains no splits");
    for (auto& v : imp)
        v /= total;
    return imp;
}

enum class RfCriterion { Misclassification, Deviance };

struct TuneGrid {
    std::vector<double> mtry_fractions;
    std::vector<std::optional<std::size_t>> max_depths; // nullopt = unlimited

    /// {0.05, 0.1, 0.2, sqrt(p)/p, 0.33, 0.5, 1.0} x {2, 4, 8, 16, unlimited}.
    static TuneGrid defaults(std::size_t p)
    {
        TuneGrid g;
        g.mtry_fractions = {0.05, 0.1, 0.2, std::sqrt(static_cast<double>(p)) / static_cast<double>(p), 0.33, 0.5, 1.0};
        g.max_depths = {2, 4, 8, 16, std::nullopt};
        return g;
    }
};

struct TuneOptions {
    std::size_t folds = 5;
    std::size_t tune_trees = 200;
    std::size_t final_trees = 5000;
    std::uint64_t seed = 0;
    RfCriterion criterion = RfCriterion::Misclassification;
    std::size_t min_leaf = 1;
    unsigned threads = 1;
};

struct TunePoint {
    double mtry_fraction = 0.0;
    std::optional<std::size_t> max_depth;
    double cv_error = 0.0;
};

struct TuneResult {
    std::vector<TunePoint> stage1; // mtry x depth surface
    std::vector<TunePoint> stage2; // mtry with unlimited depth
    RfConfig config;
};

namespace detail {

/// Class-1 score of `row` for each depth limit in `depths` (nullopt =
/// unlimited), read off one tree by stopping the descent at that depth.
template <class Row>
void truncated_scores(const Tree& t, const Row& row, const std::vector<std::optional<std::size_t>>& depths,
                      bool hard_vote, std::vector<double>& acc)
{
    std::size_t k = 0, depth = 0;
    std::size_t done = 0;
    auto score = [&](const TreeNode& n) { return hard_vote ? (n.prob >= 0.5 ? 1.0 : 0.0) : n.prob; };
    // depths are visited in ascending order with unlimited last
    for (;;) {
        const TreeNode& n = t.nodes[k];
        while (done < depths.size() && depths[done] && *depths[done] == depth) {
            acc[done] += score(n);
            ++done;
        }
        if (n.is_leaf() || done == depths.size())
            break;
        k = static_cast<std::size_t>(row(n.feature) <= n.threshold ? n.left : n.right);
        ++depth;
    }
    const double leaf = score(t.nodes[k]);
    for (; done < depths.size(); ++done)
        acc[done] += leaf;
}

/// CV error for every config in `configs`, one shared fold assignment.
///
/// Configs equal up to max_depth share one forest grown to the deepest limit
/// of the group; shallower limits are scored by truncation, which matches
/// growing them separately because node feature draws are path-keyed.
inline std::vector<double> cv_errors(const Matrix& x, const Vector& y, const std::vector<RfConfig>& configs,
                                     std::size_t folds, std::uint64_t seed, RfCriterion criterion)
{
    const Index n = x.rows();
    const auto fold = assign_folds(static_cast<std::size_t>(n), folds, seed);

    // Group configs that differ only in depth.
    std::vector<std::vector<std::size_t>> groups;
    for (std::size_t c = 0; c < configs.size(); ++c) {
        const auto& a = configs[c];
        bool placed = false;
        for (auto& g : groups) {
            const auto& b = configs[g.front()];
            if (a.n_trees == b.n_trees && a.resolved_mtry(static_cast<std::size_t>(x.cols())) ==
                                              b.resolved_mtry(static_cast<std::size_t>(x.cols())) &&
                a.min_leaf == b.min_leaf && a.seed == b.seed && a.hard_vote == b.hard_vote) {
                g.push_back(c);
                placed = true;
                break;
            }
        }
        if (!placed)
            groups.push_back({c});
    }
    for (auto& g : groups)
        std::stable_sort(g.begin(), g.end(), [&](std::size_t a, std::size_t b) {
            const auto& da = configs[a].max_depth;
            const auto& db = configs[b].max_depth;
            if (!db)
                return static_cast<bool>(da);
            return da && *da < *db;
        });

    std::vector<double> err(configs.size(), 0.0);
    for (std::size_t k = 0; k < folds; ++k) {
        std::vector<Index> train, val;
        for (Index i = 0; i < n; ++i)
            (fold[static_cast<std::size_t>(i)] == k ? val : train).push_back(i);
        if (val.empty())
            continue;
        Matrix xt(static_cast<Index>(train.size()), x.cols());
        Vector yt(static_cast<Index>(train.size()));
        for (std::size_t r = 0; r < train.size(); ++r) {
            xt.row(static_cast<Index>(r)) = x.row(train[r]);
            yt(static_cast<Index>(r)) = y(train[r]);
        }
        if (yt.sum() <= 0.0 || yt.sum() >= static_cast<double>(yt.size()))
            fail(Errc::NoClassVariation, "CV fold training part has one class");
        const auto enc = encode(xt, yt);
        for (const auto& g : groups) {
            std::vector<std::optional<std::size_t>> depths;
            for (std::size_t c : g)
                depths.push_back(configs[c].max_depth);
            RfConfig cfg = configs[g.front()];
            cfg.max_depth = depths.back();
            cfg.seed = derive_seed(cfg.seed, "rf-cv-fold", k);
            const Forest f = fit_encoded(enc, cfg);
            std::vector<std::vector<double>> scores(val.size());
            parallel_for(val.size(), cfg.threads, [&](std::size_t r) {
                std::vector<double> acc(depths.size(), 0.0);
                const auto row = x.row(val[r]);
                for (const auto& t : f.trees)
                    truncated_scores(t, row, depths, cfg.hard_vote, acc);
                for (auto& a : acc)
                    a /= static_cast<double>(f.trees.size());
                scores[r] = std::move(acc);
            });
            for (std::size_t r = 0; r < val.size(); ++r) {
                const double yy = y(val[r]);
                for (std::size_t q = 0; q < g.size(); ++q) {
                    const double pr = scores[r][q];
                    if (criterion == RfCriterion::Misclassification) {
                        err[g[q]] += ((pr >= 0.5 ? 1.0 : 0.0) != yy) ? 1.0 : 0.0;
                    } else {
                        const double pc = std::clamp(pr, 1e-15, 1.0 - 1e-15);
                        err[g[q]] += -2.0 * (yy * std::log(pc) + (1.0 - yy) * std::log(1.0 - pc));
                    }
                }
            }
        }
    }
    for (auto& e : err)
        e /= static_cast<double>(n);
    return err;
}

} // namespace detail

/// Two-stage cross-validated tuning.
///
/// Stage 1 cross-validates mtry x max_depth at `tune_trees` trees and keeps
/// the surface for reporting. Stage 2 re-cross-validates mtry alone with
/// unlimited depth on a fresh fold assignment; its argmin (ties to the
/// smaller mtry) is returned with n_trees = final_trees.
inline TuneResult tune_two_stage(const Matrix& x, const Vector& y, const TuneGrid& grid, const TuneOptions& opt)
{
    if (grid.mtry_fractions.empty() || grid.max_depths.empty())
        fail(Errc::GridEmpty, "tuning grid is empty");
    if (opt.folds < 2 || opt.folds > static_cast<std::size_t>(x.rows()))
        fail(Errc::FoldTooSmall, "tuning needs 2 <= folds <= rows");
    std::vector<double> mtrys = grid.mtry_fractions;
    std::sort(mtrys.begin(), mtrys.end());
    mtrys.erase(std::unique(mtrys.begin(), mtrys.end()), mtrys.end());

    auto base = [&](double mtry, std::optional<std::size_t> depth, std::string_view stage) {
        RfConfig c;
        c.n_trees = opt.tune_trees;
        c.mtry_fraction = mtry;
        c.max_depth = depth;
        c.min_leaf = opt.min_leaf;
        c.seed = derive_seed(opt.seed, stage);
        c.threads = opt.threads;
        c.validate();
        return c;
    };

    TuneResult res;
    std::vector<RfConfig> s1;
    for (double m : mtrys)
        for (const auto& d : grid.max_depths)
            s1.push_back(base(m, d, "rf-stage1"));
    const auto e1 = detail::cv_errors(x, y, s1, opt.folds, derive_seed(opt.seed, "rf-stage1-folds"), opt.criterion);
    for (std::size_t c = 0; c < s1.size(); ++c)
        res.stage1.push_back({*s1[c].mtry_fraction, s1[c].max_depth, e1[c]});

    std::vector<RfConfig> s2;
    for (double m : mtrys)
        s2.push_back(base(m, std::nullopt, "rf-stage2"));
    const auto e2 = detail::cv_errors(x, y, s2, opt.folds, derive_seed(opt.seed, "rf-stage2-folds"), opt.criterion);
    std::size_t best = 0;
    for (std::size_t c = 0; c < s2.size(); ++c) {
        res.stage2.push_back({mtrys[c], std::nullopt, e2[c]});
        if (e2[c] < e2[best])
            best = c;
    }
    res.config.n_trees = opt.final_trees;
    res.config.mtry_fraction = mtrys[best];
    res.config.max_depth = std::nullopt;
    res.config.min_leaf = opt.min_leaf;
    res.config.seed = opt.seed;
    res.config.threads = opt.threads;
    return res;
}

/// Plain-text forest dump:
///   forest <n_features> <n_trees> <hard_vote>
///   tree <n_nodes>
///   <feature> <threshold> <left> <right> <count> <positives> <prob> <decrease>
inline std::string dump_forest(const Forest& f)
{
    std::string out = "forest " + std::to_string(f.n_features) + " " + std::to_string(f.trees.size()) + " " +
                      (f.hard_vote ? "1" : "0") + "\n";
    for (const auto& t : f.trees) {
        out += "tree " + std::to_string(t.nodes.size()) + "\n";
        for (const auto& n : t.nodes) {
            out += std::to_string(n.feature);
            out += ' ';
            out += textio::format_double(n.threshold);
            out += ' ' + std::to_string(n.left) + ' ' + std::to_string(n.right) + ' ' + std::to_string(n.count) + ' ' +
                   std::to_string(n.positives) + ' ';
            out += textio::format_double(n.prob);
            out += ' ';
            out += textio::format_double(n.decrease);
            out += '\n';
        }
    }
    return out;
}

inline Forest parse_forest(const std::string& text)
{
    std::istringstream in(text);
    std::string tag;
    Forest f;
    std::size_t n_trees = 0;
    int hard = 0;
    if (!(in >> tag >> f.n_features >> n_trees >> hard) || tag != "forest")
        fail(Errc::Io, "not a forest dump");
    f.hard_vote = hard != 0;
    f.trees.resize(n_trees);
    for (auto& t : f.trees) {
        std::size_t n_nodes = 0;
        if (!(in >> tag >> n_nodes) || tag != "tree")
            fail(Errc::Io, "truncated forest dump");
        t.nodes.resize(n_nodes);
        for (auto& n : t.nodes) {
            std::string thr, prob, dec;
            if (!(in >> n.feature >> thr >> n.left >> n.right >> n.count >> n.positives >> prob >> dec))
                fail(Errc::Io, "truncated tree node");
            n.threshold = textio::parse_double(thr).value_or(0.0);
            n.prob = textio::parse_double(prob).value_or(0.0);
            n.decrease = textio::parse_double(dec).value_or(0.0);
        }
    }
    return f;
}

} // namespace cadpred
