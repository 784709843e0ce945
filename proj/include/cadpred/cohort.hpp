#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <span>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "cadpred/error.hpp"
#include "cadpred/rng.hpp"
#include "cadpred/textio.hpp"

namespace cadpred {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;
using Index = Eigen::Index;

/// Column naming for a cohort file. Feature columns are laid out as
/// covariates first, then metabolites, in the order listed here.
struct CohortSchema {
    std::string outcome_name;
    std::vector<std::string> covariate_names;
    std::vector<std::string> metabolite_names;
    std::string id_name;

    std::vector<std::string> feature_names() const
    {
        std::vector<std::string> out = covariate_names;
        out.insert(out.end(), metabolite_names.begin(), metabolite_names.end());
        return out;
    }

    void validate() const
    {
        if (metabolite_names.empty())
            fail(Errc::InvalidConfig, "schema lists no metabolites");
        if (outcome_name.empty())
            fail(Errc::InvalidConfig, "schema has no outcome name");
        std::set<std::string> seen;
        auto add = [&](const std::string& n) {
            if (n.empty())
                fail(Errc::InvalidConfig, "empty column name in schema");
            if (!seen.insert(n).second)
                fail(Errc::InvalidConfig, "duplicate column name in schema: " + n);
        };
        add(outcome_name);
        for (const auto& n : covariate_names)
            add(n);
        for (const auto& n : metabolite_names)
            add(n);
        if (!id_name.empty())
            add(id_name);
    }

    friend bool operator==(const CohortSchema&, const CohortSchema&) = default;
};

inline void to_json(nlohmann::json& j, const CohortSchema& s)
{
    j = nlohmann::json{{"outcome_name", s.outcome_name},
                       {"covariate_names", s.covariate_names},
                       {"metabolite_names", s.metabolite_names},
                       {"id_name", s.id_name}};
}

inline void from_json(const nlohmann::json& j, CohortSchema& s)
{
    j.at("outcome_name").get_to(s.outcome_name);
    s.covariate_names = j.value("covariate_names", std::vector<std::string>{});
    j.at("metabolite_names").get_to(s.metabolite_names);
    s.id_name = j.value("id_name", std::string{});
}

inline CohortSchema load_schema(const std::filesystem::path& path)
{
    CohortSchema s;
    try {
        s = nlohmann::json::parse(textio::read_file(path)).get<CohortSchema>();
    } catch (const nlohmann::json::exception& e) {
        fail(Errc::InvalidConfig, "bad schema file " + path.string() + ": " + e.what());
    }
    s.validate();
    return s;
}

inline void save_schema(const CohortSchema& s, const std::filesystem::path& path)
{
    textio::write_file(path, nlohmann::json(s).dump(2) + "\n");
}

/// Participants × features, with a missingness mask and a fully observed
/// binary outcome. Missing cells hold NaN and are never read by computation.
struct CohortTable {
    CohortSchema schema;
    std::vector<std::string> ids;
    Matrix values;
    Mask missing;
    std::vector<int> outcome;

    Index n_rows() const { return values.rows(); }
    Index n_features() const { return values.cols(); }
    Index n_covariates() const { return static_cast<Index>(schema.covariate_names.size()); }
    Index n_metabolites() const { return static_cast<Index>(schema.metabolite_names.size()); }

    auto covariates() const { return values.leftCols(n_covariates()); }
    auto metabolites() const { return values.rightCols(n_metabolites()); }

    Vector outcome_vector() const
    {
        Vector y(static_cast<Index>(outcome.size()));
        for (std::size_t i = 0; i < outcome.size(); ++i)
            y(static_cast<Index>(i)) = outcome[i];
        return y;
    }

    bool complete() const { return !missing.any(); }

    CohortTable subset_rows(const std::vector<std::size_t>& rows) const
    {
        CohortTable out;
        out.schema = schema;
        out.values.resize(static_cast<Index>(rows.size()), values.cols());
        out.missing.resize(static_cast<Index>(rows.size()), values.cols());
        out.outcome.reserve(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            const auto src = static_cast<Index>(rows[r]);
            out.values.row(static_cast<Index>(r)) = values.row(src);
            out.missing.row(static_cast<Index>(r)) = missing.row(src);
            out.outcome.push_back(outcome[rows[r]]);
            if (!ids.empty())
                out.ids.push_back(ids[rows[r]]);
        }
        return out;
    }
};

/// Reads a cohort CSV. Empty cells and the literal "NA" are missing.
inline CohortTable load_csv(const std::filesystem::path& path, const CohortSchema& schema)
{
    schema.validate();
    const auto csv = textio::read_csv(path);

    auto require = [&](const std::string& name) {
        auto c = csv.column(name);
        if (!c)
            fail(Errc::MissingColumn, name);
        return *c;
    };
    const std::size_t outcome_col = require(schema.outcome_name);
    std::vector<std::size_t> feature_cols;
    for (const auto& n : schema.feature_names())
        feature_cols.push_back(require(n));
    std::optional<std::size_t> id_col;
    if (!schema.id_name.empty())
        id_col = require(schema.id_name);

    const auto n = static_cast<Index>(csv.rows.size());
    const auto p = static_cast<Index>(feature_cols.size());
    CohortTable t;
    t.schema = schema;
    t.values.setConstant(n, p, std::numeric_limits<double>::quiet_NaN());
    t.missing.setConstant(n, p, false);
    t.outcome.resize(static_cast<std::size_t>(n));

    for (Index i = 0; i < n; ++i) {
        const auto& row = csv.rows[static_cast<std::size_t>(i)];
        const auto row_no = std::to_string(i + 2); // 1-based, header is line 1
        auto cell = [&](std::size_t c) -> std::string_view {
            return c < row.size() ? std::string_view(row[c]) : std::string_view{};
        };
        auto is_missing = [](std::string_view s) {
            return s.empty() || s == "NA";
        };

        const auto y = cell(outcome_col);
        if (is_missing(y))
            fail(Errc::MissingOutcome, "row " + row_no);
        const auto yv = textio::parse_double(y);
        if (!yv || (*yv != 0.0 && *yv != 1.0))
            fail(Errc::NonBinaryOutcome, "row " + row_no + " value '" + std::string(y) + "'");
        t.outcome[static_cast<std::size_t>(i)] = static_cast<int>(*yv);

        for (Index j = 0; j < p; ++j) {
            const auto s = cell(feature_cols[static_cast<std::size_t>(j)]);
            if (is_missing(s)) {
                t.missing(i, j) = true;
                continue;
            }
            const auto v = textio::parse_double(s);
            if (!v)
                fail(Errc::UnparseableCell, "row " + row_no + ", column " +
                                                 csv.header[feature_cols[static_cast<std::size_t>(j)]] +
                                                 ": '" + std::string(s) + "'");
            t.values(i, j) = *v;
        }
        if (id_col)
            t.ids.emplace_back(cell(*id_col));
    }
    return t;
}

inline std::string to_csv(const CohortTable& t)
{
    std::string out;
    std::vector<std::string> header;
    if (!t.schema.id_name.empty())
        header.push_back(t.schema.id_name);
    header.push_back(t.schema.outcome_name);
    for (const auto& n : t.schema.feature_names())
        header.push_back(n);
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (i)
            out += ',';
        out += header[i];
    }
    out += '\n';
    for (Index i = 0; i < t.n_rows(); ++i) {
        if (!t.schema.id_name.empty()) {
            out += t.ids.empty() ? std::to_string(i + 1) : t.ids[static_cast<std::size_t>(i)];
            out += ',';
        }
        out += std::to_string(t.outcome[static_cast<std::size_t>(i)]);
        for (Index j = 0; j < t.n_features(); ++j) {
            out += ',';
            out += t.missing(i, j) ? std::string("NA") : textio::format_double(t.values(i, j));
        }
        out += '\n';
    }
    return out;
}

inline void write_csv(const CohortTable& t, const std::filesystem::path& path)
{
    textio::write_file(path, to_csv(t));
}

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> test;
    std::uint64_t seed = 0;
    std::pair<int, int> ratio{3, 1};
    bool stratified = false;
};

inline void to_json(nlohmann::json& j, const SplitIndices& s)
{
    j = nlohmann::json{{"seed", s.seed},
                       {"ratio", {s.ratio.first, s.ratio.second}},
                       {"stratified", s.stratified},
                       {"train", s.train},
                       {"test", s.test}};
}

inline void from_json(const nlohmann::json& j, SplitIndices& s)
{
    j.at("seed").get_to(s.seed);
    j.at("train").get_to(s.train);
    j.at("test").get_to(s.test);
    s.stratified = j.value("stratified", false);
}

/// Random 3:1 partition with |test| = floor(n/4). With `labels` given the
/// test quarter is allocated to each class in proportion to its size.
inline SplitIndices train_test_split(std::size_t n, std::uint64_t seed,
                                     const std::vector<int>* stratify_labels = nullptr)
{
    if (n < 8)
        fail(Errc::TooFewRows, "need at least 8 rows to split, got " + std::to_string(n));
    const std::size_t n_test = n / 4;
    Rng rng(derive_seed(seed, "split"));
    SplitIndices s;
    s.seed = seed;
    std::vector<char> in_test(n, 0);
    if (stratify_labels == nullptr) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(std::span(order));
        for (std::size_t i = 0; i < n_test; ++i)
            in_test[order[i]] = 1;
    } else {
        if (stratify_labels->size() != n)
            fail(Errc::LengthMismatch, "stratification labels");
        s.stratified = true;
        std::vector<std::size_t> pos, neg;
        for (std::size_t i = 0; i < n; ++i)
            ((*stratify_labels)[i] == 1 ? pos : neg).push_back(i);
        const auto n_test_pos = static_cast<std::size_t>(
            std::llround(static_cast<double>(pos.size()) * static_cast<double>(n_test) / static_cast<double>(n)));
        const std::size_t take_pos = std::min(n_test_pos, pos.size());
        const std::size_t take_neg = std::min(n_test - take_pos, neg.size());
        rng.shuffle(std::span(pos));
        rng.shuffle(std::span(neg));
        for (std::size_t i = 0; i < take_pos; ++i)
            in_test[pos[i]] = 1;
        for (std::size_t i = 0; i < take_neg; ++i)
            in_test[neg[i]] = 1;
    }
    for (std::size_t i = 0; i < n; ++i)
        (in_test[i] ? s.test : s.train).push_back(i);
    return s;
}

inline SplitIndices train_test_split(const CohortTable& t, std::uint64_t seed, bool stratified = false)
{
    return train_test_split(static_cast<std::size_t>(t.n_rows()), seed, stratified ? &t.outcome : nullptr);
}

/// One Table-1 style line.
struct SummaryRow {
    std::string name;
    bool binary = false;
    std::size_t n_observed = 0;
    double mean = std::numeric_limits<double>::quiet_NaN();
    double sd = std::numeric_limits<double>::quiet_NaN();
    std::size_t count = 0;   // binary: number of ones
    double percent = std::numeric_limits<double>::quiet_NaN();
};

struct CohortSummary {
    std::size_t n_rows = 0;
    std::vector<SummaryRow> rows; // outcome first, then features

    const SummaryRow* find(std::string_view name) const
    {
        for (const auto& r : rows)
            if (r.name == name)
                return &r;
        return nullptr;
    }
};

namespace detail {

inline SummaryRow summarize_column(std::string name, const std::vector<double>& obs)
{
    SummaryRow r;
    r.name = std::move(name);
    r.n_observed = obs.size();
    if (obs.empty())
        return r;
    r.binary = std::all_of(obs.begin(), obs.end(), [](double v) { return v == 0.0 || v == 1.0; });
    double sum = 0.0;
    for (double v : obs)
        sum += v;
    r.mean = sum / static_cast<double>(obs.size());
    double ss = 0.0;
    for (double v : obs)
        ss += (v - r.mean) * (v - r.mean);
    r.sd = obs.size() > 1 ? std::sqrt(ss / static_cast<double>(obs.size() - 1)) : 0.0;
    if (r.binary) {
        r.count = static_cast<std::size_t>(std::llround(sum));
        r.percent = 100.0 * sum / static_cast<double>(obs.size());
    }
    return r;
}

} // namespace detail

inline CohortSummary summarize(const CohortTable& t)
{
    CohortSummary s;
    s.n_rows = static_cast<std::size_t>(t.n_rows());
    {
        std::vector<double> obs(t.outcome.begin(), t.outcome.end());
        s.rows.push_back(detail::summarize_column(t.schema.outcome_name, obs));
    }
    const auto names = t.schema.feature_names();
    for (Index j = 0; j < t.n_features(); ++j) {
        std::vector<double> obs;
        for (Index i = 0; i < t.n_rows(); ++i)
            if (!t.missing(i, j))
                obs.push_back(t.values(i, j));
        s.rows.push_back(detail::summarize_column(names[static_cast<std::size_t>(j)], obs));
    }
    return s;
}

inline std::string format_summary(const CohortSummary& s)
{
    std::ostringstream out;
    out << "n = " << s.n_rows << "\n";
    char buf[256];
    for (const auto& r : s.rows) {
        if (r.n_observed == 0)
            std::snprintf(buf, sizeof buf, "%-28s missing only (0 observed)\n", r.name.c_str());
        else if (r.binary)
            std::snprintf(buf, sizeof buf, "%-28s %zu (%.0f%%)\n", r.name.c_str(), r.count, r.percent);
        else
            std::snprintf(buf, sizeof buf, "%-28s %.1f \xC2\xB1 %.1f\n", r.name.c_str(), r.mean, r.sd);
        out << buf;
    }
    return out.str();
}

inline nlohmann::json summary_json(const CohortSummary& s)
{
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : s.rows) {
        nlohmann::json j{{"name", r.name}, {"n_observed", r.n_observed}, {"binary", r.binary}};
        if (r.n_observed == 0) {
            j["missing_only"] = true;
        } else if (r.binary) {
            j["count"] = r.count;
            j["percent"] = r.percent;
        } else {
            j["mean"] = r.mean;
            j["sd"] = r.sd;
        }
        rows.push_back(std::move(j));
    }
    return {{"n_rows", s.n_rows}, {"columns", rows}};
}

} // namespace cadpred
