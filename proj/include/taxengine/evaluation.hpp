#pragma once

#include <span>
#include <vector>

#include "taxengine/bundle.hpp"
#include "taxengine/hiermodel.hpp"
#include "taxengine/metrics.hpp"
#include "taxengine/taxonomy.hpp"

namespace taxengine {

/// True when every decoded node is a child of the one before it and the path
/// ends where a path may end.
inline bool is_valid_prediction(const Taxonomy& tax, const PathPrediction& p)
{
    if (p.nodes.empty() || tax.node(p.nodes.front()).parent.has_value()) {
        return false;
    }
    for (std::size_t i = 1; i < p.nodes.size(); ++i) {
        const auto parent = tax.node(p.nodes[i]).parent;
        if (!parent || *parent != p.nodes[i - 1]) {
            return false;
        }
    }
    return tax.is_valid_terminal(p.nodes.back());
}

/// Class index decoded at `level`; levels below an emitted STOP count as STOP.
inline std::size_t predicted_class(const Taxonomy& tax, const PathPrediction& p, std::size_t level)
{
    for (const auto& lp : p.levels) {
        if (lp.level == level) {
            return lp.class_index;
        }
    }
    return tax.stop_index(level);
}

inline MetricsReport score_predictions(const Taxonomy& tax, std::span<const PathPrediction> preds,
                                       std::span<const CategoryPath> truths, bool masked = true)
{
    if (preds.size() != truths.size()) {
        fail(Errc::LengthMismatch, std::to_string(preds.size()) + " predictions vs " + std::to_string(truths.size()) + " labels");
    }
    MetricsReport rep;
    rep.count = preds.size();
    rep.masked = masked;
    const auto targets = make_targets(tax, truths);
    for (std::size_t level = 2; level <= tax.max_depth(); ++level) {
        std::vector<std::size_t> pred_class;
        pred_class.reserve(preds.size());
        for (const auto& p : preds) {
            pred_class.push_back(predicted_class(tax, p, level));
        }
        rep.levels.push_back({level, flat_metrics(pred_class, targets.target[level - 2], tax.class_count(level))});
    }
    std::vector<NodeId> pred_nodes;
    std::vector<NodeId> truth_nodes;
    std::size_t exact = 0;
    std::size_t valid = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        pred_nodes.push_back(preds[i].most_specific());
        truth_nodes.push_back(*tax.find(truths[i]));
        const bool ok = is_valid_prediction(tax, preds[i]);
        valid += ok ? 1 : 0;
        exact += (ok && preds[i].nodes.back() == truth_nodes.back()) ? 1 : 0;
    }
    rep.hier = hierarchical_metrics(tax, std::span<const NodeId>(pred_nodes), std::span<const NodeId>(truth_nodes));
    if (!preds.empty()) {
        rep.exact_path_accuracy = static_cast<double>(exact) / static_cast<double>(preds.size());
        rep.valid_path_fraction = static_cast<double>(valid) / static_cast<double>(preds.size());
    }
    return rep;
}

struct Evaluation {
    MetricsReport report;
    std::vector<PathPrediction> predictions;
};

/// Predicts `indices` of the bundle with the model's current masking setting
/// and scores them against the bundle labels.
inline Evaluation evaluate_model(HierModel& model, const EmbeddingBundle& bundle, std::span<const std::size_t> indices)
{
    Evaluation ev;
    ev.predictions = predict(model, bundle, indices);
    std::vector<CategoryPath> truths;
    truths.reserve(indices.size());
    for (const auto i : indices) {
        truths.push_back(bundle.labels[i]);
    }
    ev.report = score_predictions(model.taxonomy(), ev.predictions, truths, model.masking());
    return ev;
}

} // namespace taxengine
