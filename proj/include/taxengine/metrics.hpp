#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxengine/taxonomy.hpp"

namespace taxengine {

struct HierOptions {
    /// Count the level-1 root in every closure. Off gives scores comparable
    /// to setups that drop the constant top category.
    bool include_root = true;
};

/// Micro-aggregated hierarchical scores; the integer sums are kept so exact
/// comparisons can be made before division.
struct HierScores {
    std::uint64_t overlap = 0;   ///< sum |alpha_i ∩ beta_i|
    std::uint64_t predicted = 0; ///< sum |alpha_i|
    std::uint64_t truth = 0;     ///< sum |beta_i|
    double hP = 0.0;
    double hR = 0.0;
    double hF = 0.0;
};

inline HierScores finish_hier(std::uint64_t overlap, std::uint64_t predicted, std::uint64_t truth)
{
    HierScores s{overlap, predicted, truth};
    s.hP = predicted ? static_cast<double>(overlap) / static_cast<double>(predicted) : 0.0;
    s.hR = truth ? static_cast<double>(overlap) / static_cast<double>(truth) : 0.0;
    s.hF = (s.hP + s.hR) > 0.0 ? 2.0 * s.hP * s.hR / (s.hP + s.hR) : 0.0;
    return s;
}

/// Scores from most-specific node ids. Closures are root-to-node chains, so
/// their intersection is the shared prefix.
inline HierScores hierarchical_metrics(const Taxonomy& tax, std::span<const NodeId> predictions,
                                       std::span<const NodeId> truths, HierOptions opt = {})
{
    if (predictions.size() != truths.size()) {
        fail(Errc::LengthMismatch, std::to_string(predictions.size()) + " predictions vs " + std::to_string(truths.size()) + " truths");
    }
    std::uint64_t overlap = 0;
    std::uint64_t predicted = 0;
    std::uint64_t truth = 0;
    const std::size_t skip = opt.include_root ? 0 : 1;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const auto a = tax.ancestor_closure(predictions[i]);
        const auto b = tax.ancestor_closure(truths[i]);
        std::size_t shared = 0;
        while (shared < a.size() && shared < b.size() && a[shared] == b[shared]) {
            ++shared;
        }
        predicted += a.size() - std::min(skip, a.size());
        truth += b.size() - std::min(skip, b.size());
        overlap += shared - std::min(skip, shared);
    }
    return finish_hier(overlap, predicted, truth);
}

inline HierScores hierarchical_metrics(const Taxonomy& tax, std::span<const CategoryPath> predictions,
                                       std::span<const CategoryPath> truths, HierOptions opt = {})
{
    const auto resolve = [&](std::span<const CategoryPath> paths) {
        std::vector<NodeId> ids;
        ids.reserve(paths.size());
        for (const auto& p : paths) {
            const auto id = tax.find(p);
            if (!id) {
                fail(Errc::InvalidPath, "'" + p.join() + "' does not resolve in the taxonomy");
            }
            ids.push_back(*id);
        }
        return ids;
    };
    const auto pred = resolve(predictions);
    const auto tru = resolve(truths);
    return hierarchical_metrics(tax, std::span<const NodeId>(pred), std::span<const NodeId>(tru), opt);
}

struct ClassScores {
    std::size_t support = 0;   ///< occurrences in truth
    std::size_t predicted = 0; ///< occurrences in predictions
    std::size_t true_positive = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct FlatScores {
    std::size_t count = 0;
    double accuracy = 0.0;
    double macro_precision = 0.0;
    double macro_recall = 0.0;
    double macro_f1 = 0.0;
    double weighted_precision = 0.0;
    double weighted_recall = 0.0;
    double weighted_f1 = 0.0;
    std::vector<ClassScores> per_class;
};

/// Macro averages run over classes present in truth; weighted averages use
/// truth support. A zero denominator scores 0 for that class.
inline FlatScores flat_metrics(std::span<const std::size_t> predictions, std::span<const std::size_t> truths, std::size_t n_classes)
{
    if (predictions.size() != truths.size()) {
        fail(Errc::LengthMismatch, std::to_string(predictions.size()) + " predictions vs " + std::to_string(truths.size()) + " truths");
    }
    FlatScores s;
    s.count = truths.size();
    s.per_class.assign(n_classes, {});
    std::size_t correct = 0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
        if (predictions[i] >= n_classes || truths[i] >= n_classes) {
            fail(Errc::IndexOutOfRange, "class index outside 0.." + std::to_string(n_classes - 1));
        }
        ++s.per_class[truths[i]].support;
        ++s.per_class[predictions[i]].predicted;
        if (predictions[i] == truths[i]) {
            ++s.per_class[truths[i]].true_positive;
            ++correct;
        }
    }
    if (truths.empty()) {
        return s;
    }
    s.accuracy = static_cast<double>(correct) / static_cast<double>(truths.size());
    std::size_t present = 0;
    for (auto& c : s.per_class) {
        c.precision = c.predicted ? static_cast<double>(c.true_positive) / static_cast<double>(c.predicted) : 0.0;
        c.recall = c.support ? static_cast<double>(c.true_positive) / static_cast<double>(c.support) : 0.0;
        c.f1 = (c.precision + c.recall) > 0.0 ? 2.0 * c.precision * c.recall / (c.precision + c.recall) : 0.0;
        if (c.support == 0) {
            continue;
        }
        ++present;
        const double w = static_cast<double>(c.support) / static_cast<double>(truths.size());
        s.macro_precision += c.precision;
        s.macro_recall += c.recall;
        s.macro_f1 += c.f1;
        s.weighted_precision += w * c.precision;
        s.weighted_recall += w * c.recall;
        s.weighted_f1 += w * c.f1;
    }
    s.macro_precision /= static_cast<double>(present);
    s.macro_recall /= static_cast<double>(present);
    s.macro_f1 /= static_cast<double>(present);
    return s;
}

template <class Label>
struct ClusterPurity {
    std::size_t size = 0;
    Label majority{};
    std::size_t majority_count = 0;
    double purity = 0.0;
};

template <class Cluster, class Label>
struct PurityReport {
    double overall = 0.0;
    std::map<Cluster, ClusterPurity<Label>> clusters;
};

/// Majority-label purity: sum over clusters of the majority count, over n.
/// Majority ties resolve to the smallest label.
template <class Cluster, class Label>
PurityReport<Cluster, Label> purity(std::span<const Cluster> assignments, std::span<const Label> truths)
{
    if (assignments.size() != truths.size()) {
        fail(Errc::LengthMismatch, std::to_string(assignments.size()) + " assignments vs " + std::to_string(truths.size()) + " labels");
    }
    std::map<Cluster, std::map<Label, std::size_t>> counts;
    for (std::size_t i = 0; i < assignments.size(); ++i) {
        ++counts[assignments[i]][truths[i]];
    }
    PurityReport<Cluster, Label> rep;
    std::size_t total_majority = 0;
    for (const auto& [cluster, labels] : counts) {
        ClusterPurity<Label> cp;
        for (const auto& [label, count] : labels) {
            cp.size += count;
            if (count > cp.majority_count) {
                cp.majority_count = count;
                cp.majority = label;
            }
        }
        cp.purity = static_cast<double>(cp.majority_count) / static_cast<double>(cp.size);
        total_majority += cp.majority_count;
        rep.clusters.emplace(cluster, cp);
    }
    rep.overall = assignments.empty() ? 0.0 : static_cast<double>(total_majority) / static_cast<double>(assignments.size());
    return rep;
}

template <class Cluster, class Label>
PurityReport<Cluster, Label> purity(const std::vector<Cluster>& assignments, const std::vector<Label>& truths)
{
    return purity(std::span<const Cluster>(assignments), std::span<const Label>(truths));
}

/// Per-level flat scores for levels 2..max_depth plus global hierarchical scores.
struct MetricsReport {
    struct Level {
        std::size_t level = 0;
        FlatScores scores;
    };
    std::vector<Level> levels;
    HierScores hier;
    std::size_t count = 0;
    double exact_path_accuracy = 0.0;
    double valid_path_fraction = 0.0;
    bool masked = true;

    /// Table-style layout: per-level Macro/Weighted F1, then hP, hR, hF1.
    nlohmann::json to_json(bool per_class = false) const
    {
        nlohmann::json j;
        j["count"] = count;
        j["masking"] = masked ? "on" : "off";
        j["macro_f1"] = nlohmann::json::object();
        j["weighted_f1"] = nlohmann::json::object();
        j["accuracy"] = nlohmann::json::object();
        for (const auto& l : levels) {
            const auto key = "level_" + std::to_string(l.level);
            j["macro_f1"][key] = l.scores.macro_f1;
            j["weighted_f1"][key] = l.scores.weighted_f1;
            j["accuracy"][key] = l.scores.accuracy;
            if (per_class) {
                auto arr = nlohmann::json::array();
                for (const auto& c : l.scores.per_class) {
                    arr.push_back({{"support", c.support}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1}});
                }
                j["per_class"][key] = arr;
            }
        }
        j["hP"] = hier.hP;
        j["hR"] = hier.hR;
        j["hF1"] = hier.hF;
        j["hier_counts"] = {{"overlap", hier.overlap}, {"predicted", hier.predicted}, {"truth", hier.truth}};
        j["exact_path_accuracy"] = exact_path_accuracy;
        j["valid_path_fraction"] = valid_path_fraction;
        return j;
    }
};

} // namespace taxengine
