#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cadpred/error.hpp"
#include "cadpred/impute.hpp"
#include "cadpred/textio.hpp"

namespace cadpred {

struct Confusion {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::size_t total() const { return tp + fp + tn + fn; }
};

namespace detail {

inline void check_inputs(std::span<const double> probs, std::span<const int> labels)
{
    if (probs.size() != labels.size())
        fail(Errc::LengthMismatch, std::to_string(probs.size()) + " scores vs " + std::to_string(labels.size()) +
                                       " labels");
    if (probs.empty())
        fail(Errc::EmptyInput, "no predictions to evaluate");
    for (int y : labels)
        if (y != 0 && y != 1)
            fail(Errc::NonBinaryOutcome, "labels must be 0/1");
}

} // namespace detail

/// Positive iff prob >= threshold.
inline Confusion confusion(std::span<const double> probs, std::span<const int> labels, double threshold = 0.5)
{
    detail::check_inputs(probs, labels);
    Confusion c;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (!(probs[i] >= 0.0 && probs[i] <= 1.0))
            fail(Errc::OutOfRange, "probability outside [0,1]");
        const bool pred = probs[i] >= threshold;
        if (labels[i] == 1)
            (pred ? c.tp : c.fn)++;
        else
            (pred ? c.fp : c.tn)++;
    }
    return c;
}

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocCurve {
    std::vector<RocPoint> points; // (0,0) ... (1,1)
    double auc = 0.0;
};

/// ROC polyline over distinct scores (descending) with trapezoidal AUC.
///
/// Tied scores collapse into one vertex. The area is accumulated in integer
/// units of (negatives x positives / 2) and divided once, so it equals the
/// Mann-Whitney statistic exactly.
inline RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels)
{
    detail::check_inputs(scores, labels);
    std::uint64_t pos = 0, neg = 0;
    for (int y : labels)
        (y == 1 ? pos : neg)++;
    if (pos == 0 || neg == 0)
        fail(Errc::OneClassOnly, "ROC needs both classes");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocCurve roc;
    roc.points.push_back({0.0, 0.0});
    std::uint64_t tp = 0, fp = 0;
    unsigned __int128 area2 = 0; // twice the area, in count units
    for (std::size_t k = 0; k < order.size();) {
        const double s = scores[order[k]];
        std::uint64_t dp = 0, dn = 0;
        while (k < order.size() && scores[order[k]] == s) {
            (labels[order[k]] == 1 ? dp : dn)++;
            ++k;
        }
        area2 += static_cast<unsigned __int128>(dn) * (2 * tp + dp);
        tp += dp;
        fp += dn;
        roc.points.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                              static_cast<double>(tp) / static_cast<double>(pos)});
    }
    roc.auc = static_cast<double>(area2) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
    return roc;
}

/// Ratio with a zero denominator is not-a-value, never 0.
using Metric = std::optional<double>;

inline Metric ratio(std::size_t num, std::size_t den)
{
    if (den == 0)
        return std::nullopt;
    return static_cast<double>(num) / static_cast<double>(den);
}

struct EvalReport {
    Confusion counts;
    double threshold = 0.5;
    Metric accuracy, sensitivity, specificity, ppv, npv;
    Metric auc;
    std::vector<RocPoint> roc;
};

inline EvalReport evaluate(std::span<const double> probs, std::span<const int> labels, double threshold = 0.5)
{
    EvalReport r;
    r.threshold = threshold;
    r.counts = confusion(probs, labels, threshold);
    const auto& c = r.counts;
    r.accuracy = ratio(c.tp + c.tn, c.total());
    r.sensitivity = ratio(c.tp, c.tp + c.fn);
    r.specificity = ratio(c.tn, c.tn + c.fp);
    r.ppv = ratio(c.tp, c.tp + c.fp);
    r.npv = ratio(c.tn, c.tn + c.fn);
    if (c.tp + c.fn > 0 && c.tn + c.fp > 0) {
        auto roc = roc_auc(probs, labels);
        r.auc = roc.auc;
        r.roc = std::move(roc.points);
    }
    return r;
}

/// Mean of the per-imputation probability vectors, then evaluate.
inline EvalReport evaluate_pooled(std::span<const std::vector<double>> per_imputation, std::span<const int> labels,
                                  double threshold = 0.5)
{
    if (per_imputation.empty())
        fail(Errc::EmptyInput, "no prediction vectors");
    const auto pooled = pool_predictions(per_imputation);
    return evaluate(pooled, labels, threshold);
}

inline nlohmann::json metric_json(const Metric& m)
{
    return m ? nlohmann::json(*m) : nlohmann::json(nullptr);
}

inline nlohmann::json report_json(const EvalReport& r, bool include_roc = true)
{
    nlohmann::json undefined = nlohmann::json::array();
    auto add = [&](const char* name, const Metric& m) {
        if (!m)
            undefined.push_back(name);
        return metric_json(m);
    };
    nlohmann::json j{{"threshold", r.threshold},
                     {"tp", r.counts.tp},
                     {"fp", r.counts.fp},
                     {"tn", r.counts.tn},
                     {"fn", r.counts.fn}};
    j["accuracy"] = add("accuracy", r.accuracy);
    j["auc"] = add("auc", r.auc);
    j["sensitivity"] = add("sensitivity", r.sensitivity);
    j["specificity"] = add("specificity", r.specificity);
    j["ppv"] = add("ppv", r.ppv);
    j["npv"] = add("npv", r.npv);
    j["undefined"] = undefined;
    if (include_roc) {
        nlohmann::json roc = nlohmann::json::array();
        for (const auto& p : r.roc)
            roc.push_back({p.fpr, p.tpr});
        j["roc"] = roc;
    }
    return j;
}

/// File-name friendly form of a model name ("L1 regression adjusted" -> "l1_regression_adjusted").
inline std::string slugify(std::string_view name)
{
    std::string s;
    for (char c : name) {
        if (std::isalnum(static_cast<unsigned char>(c)))
            s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        else if (!s.empty() && s.back() != '_')
            s.push_back('_');
    }
    while (!s.empty() && s.back() == '_')
        s.pop_back();
    return s;
}

inline std::string roc_csv(const EvalReport& r)
{
    std::string out = "fpr,tpr\n";
    for (const auto& p : r.roc)
        out += textio::format_double(p.fpr) + "," + textio::format_double(p.tpr) + "\n";
    return out;
}

struct NamedReport {
    std::string name;
    EvalReport report;
};

inline bool is_adjusted_name(std::string_view name)
{
    return name.size() >= 8 && name.substr(name.size() - 8) == "adjusted" &&
           !(name.size() >= 10 && name.substr(name.size() - 10) == "unadjusted");
}

/// Comparison table: one row per model, columns Accuracy, AUC, Sensitivity,
/// Specificity, PPV, NPV. The best AUC within the unadjusted block and within
/// the adjusted block is marked with '*'. Returns the rendered table; with
/// `roc_dir` set, also writes roc_<slug>.csv per model.
inline std::string emit_table2(std::span<const NamedReport> reports,
                               const std::optional<std::filesystem::path>& roc_dir = std::nullopt)
{
    if (reports.empty())
        fail(Errc::EmptyInput, "no reports to tabulate");
    std::vector<bool> flagged(reports.size(), false);
    for (int block = 0; block < 2; ++block) {
        std::optional<std::size_t> best;
        for (std::size_t i = 0; i < reports.size(); ++i) {
            if (is_adjusted_name(reports[i].name) != (block == 1) || !reports[i].report.auc)
                continue;
            if (!best || *reports[i].report.auc > *reports[*best].report.auc)
                best = i;
        }
        if (best)
            flagged[*best] = true;
    }

    auto cell = [](const Metric& m) {
        char buf[32];
        if (m)
            std::snprintf(buf, sizeof buf, "%.3f", *m);
        else
            std::snprintf(buf, sizeof buf, "n/a");
        return std::string(buf);
    };
    std::size_t width = 5;
    for (const auto& r : reports)
        width = std::max(width, r.name.size());
    std::string out;
    char line[512];
    std::snprintf(line, sizeof line, "%-*s  %8s  %8s  %11s  %11s  %8s  %8s\n", static_cast<int>(width), "Model",
                  "Accuracy", "AUC", "Sensitivity", "Specificity", "PPV", "NPV");
    out += line;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const auto& r = reports[i].report;
        const std::string auc = cell(r.auc) + (flagged[i] ? "*" : " ");
        std::snprintf(line, sizeof line, "%-*s  %8s  %8s  %11s  %11s  %8s  %8s\n", static_cast<int>(width),
                      reports[i].name.c_str(), cell(r.accuracy).c_str(), auc.c_str(), cell(r.sensitivity).c_str(),
                      cell(r.specificity).c_str(), cell(r.ppv).c_str(), cell(r.npv).c_str());
        out += line;
    }
    if (roc_dir)
        for (const auto& r : reports)
            textio::write_file(*roc_dir / ("roc_" + slugify(r.name) + ".csv"), roc_csv(r.report));
    return out;
}

} // namespace cadpred
