#pragma once

#include <algorithm>
#include <cstdio>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxengine/bundle.hpp"
#include "taxengine/evaluation.hpp"
#include "taxengine/hiermodel.hpp"

namespace taxengine {

enum class ConfidenceDef { PathProduct, MinLevel, LeafMax };

inline std::string_view to_string(ConfidenceDef d) noexcept
{
    switch (d) {
    case ConfidenceDef::PathProduct: return "path_product";
    case ConfidenceDef::MinLevel: return "min_level";
    case ConfidenceDef::LeafMax: return "leaf_max";
    }
    return "path_product";
}

inline ConfidenceDef parse_confidence(std::string_view s)
{
    if (s == "path_product") return ConfidenceDef::PathProduct;
    if (s == "min_level") return ConfidenceDef::MinLevel;
    if (s == "leaf_max") return ConfidenceDef::LeafMax;
    fail(Errc::InvalidConfig, "unknown confidence '" + std::string(s) + "' (path_product|min_level|leaf_max)");
}

inline double confidence(const PathPrediction& p, ConfidenceDef def) noexcept
{
    switch (def) {
    case ConfidenceDef::PathProduct: return p.path_confidence;
    case ConfidenceDef::MinLevel: return p.min_level_confidence;
    case ConfidenceDef::LeafMax: return p.leaf_confidence;
    }
    return p.path_confidence;
}

enum class Route { Stage1, Escalate };

/// Confidence exactly at the threshold stays in stage 1.
inline Route route(double conf, double tau) noexcept { return conf < tau ? Route::Escalate : Route::Stage1; }

struct CascadeConfig {
    double threshold = 0.9;
    ConfidenceDef confidence = ConfidenceDef::PathProduct;

    void check() const
    {
        if (!(threshold >= 0.0 && threshold <= 1.0)) {
            fail(Errc::InvalidConfig, "cascade threshold must lie in [0, 1]");
        }
    }
};

struct CascadeRecord {
    std::string id;
    Route stage = Route::Stage1;
    double stage1_confidence = 0.0;
    double confidence = 0.0; ///< of the final prediction
    PathPrediction prediction;
};

struct CascadeReport {
    double threshold = 0.0;
    ConfidenceDef confidence = ConfidenceDef::PathProduct;
    std::vector<CascadeRecord> records;
    std::size_t stage1_count = 0;
    std::size_t escalated_count = 0;
    double stage1_mean_confidence = 0.0;
    double stage2_mean_confidence = 0.0;

    double escalation_fraction() const noexcept
    {
        return records.empty() ? 0.0 : static_cast<double>(escalated_count) / static_cast<double>(records.size());
    }

    nlohmann::json to_json(bool per_record = true) const
    {
        nlohmann::json j;
        j["threshold"] = threshold;
        j["confidence"] = to_string(confidence);
        j["count"] = records.size();
        j["stage1_count"] = stage1_count;
        j["escalated_count"] = escalated_count;
        j["escalation_fraction"] = escalation_fraction();
        j["stage1_mean_confidence"] = stage1_mean_confidence;
        j["stage2_mean_confidence"] = stage2_mean_confidence;
        if (per_record) {
            j["records"] = nlohmann::json::array();
            for (const auto& r : records) {
                j["records"].push_back({{"id", r.id},
                                        {"stage", r.stage == Route::Stage1 ? "stage1" : "stage2"},
                                        {"path", r.prediction.path.join()},
                                        {"stage1_confidence", r.stage1_confidence},
                                        {"confidence", r.confidence}});
            }
        }
        return j;
    }
};

namespace detail {

inline void check_same_taxonomy(const HierModel& a, const HierModel& b)
{
    if (a.taxonomy().hash() != b.taxonomy().hash()) {
        fail(Errc::TaxonomyMismatch, "cascade stages were trained on different taxonomies");
    }
}

inline CascadeReport assemble_cascade(const EmbeddingBundle& bundle, std::span<const std::size_t> indices,
                                      const std::vector<PathPrediction>& stage1, const CascadeConfig& cfg,
                                      const std::function<PathPrediction(std::size_t)>& stage2_of)
{
    CascadeReport rep;
    rep.threshold = cfg.threshold;
    rep.confidence = cfg.confidence;
    double s1 = 0.0;
    double s2 = 0.0;
    for (std::size_t k = 0; k < indices.size(); ++k) {
        CascadeRecord r;
        r.id = bundle.ids[indices[k]];
        r.stage1_confidence = confidence(stage1[k], cfg.confidence);
        r.stage = route(r.stage1_confidence, cfg.threshold);
        if (r.stage == Route::Escalate) {
            r.prediction = stage2_of(k);
            r.confidence = confidence(r.prediction, cfg.confidence);
            ++rep.escalated_count;
            s2 += r.confidence;
        } else {
            r.prediction = stage1[k];
            r.confidence = r.stage1_confidence;
            ++rep.stage1_count;
            s1 += r.confidence;
        }
        rep.records.push_back(std::move(r));
    }
    rep.stage1_mean_confidence = rep.stage1_count ? s1 / static_cast<double>(rep.stage1_count) : 0.0;
    rep.stage2_mean_confidence = rep.escalated_count ? s2 / static_cast<double>(rep.escalated_count) : 0.0;
    return rep;
}

} // namespace detail

/// Stage 1 scores every record; the records it routes onward are scored by
/// stage 2 as one batch afterwards.
inline CascadeReport run_cascade(HierModel& stage1, HierModel& stage2, const EmbeddingBundle& bundle,
                                 std::span<const std::size_t> indices, const CascadeConfig& cfg)
{
    cfg.check();
    detail::check_same_taxonomy(stage1, stage2);
    // Fails up front when the bundle lacks a stage-2 modality.
    gather_inputs(bundle, stage2.fusion_config(), std::span<const std::size_t>());
    const auto first = predict(stage1, bundle, indices);
    std::vector<std::size_t> escalated;
    std::vector<std::size_t> position(indices.size(), 0);
    for (std::size_t k = 0; k < indices.size(); ++k) {
        if (route(confidence(first[k], cfg.confidence), cfg.threshold) == Route::Escalate) {
            position[k] = escalated.size();
            escalated.push_back(indices[k]);
        }
    }
    const auto second = predict(stage2, bundle, escalated);
    return detail::assemble_cascade(bundle, indices, first, cfg, [&](std::size_t k) { return second[position[k]]; });
}

inline CascadeReport run_cascade(HierModel& stage1, HierModel& stage2, const EmbeddingBundle& bundle, const CascadeConfig& cfg)
{
    std::vector<std::size_t> all(bundle.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
    }
    return run_cascade(stage1, stage2, bundle, all, cfg);
}

/// Hierarchical and exact-path scores of the cascade's final predictions.
inline MetricsReport score_cascade(const CascadeReport& rep, const EmbeddingBundle& bundle, std::span<const std::size_t> indices)
{
    std::vector<PathPrediction> preds;
    std::vector<CategoryPath> truths;
    for (std::size_t k = 0; k < indices.size(); ++k) {
        preds.push_back(rep.records[k].prediction);
        truths.push_back(bundle.labels[indices[k]]);
    }
    return score_predictions(bundle.taxonomy, preds, truths);
}

struct SweepRow {
    double tau = 0.0;
    double escalated_fraction = 0.0;
    double hF = 0.0;
    double accuracy = 0.0; ///< exact-path accuracy
};

/// Both stages score every record once; each grid value then re-routes.
inline std::vector<SweepRow> sweep_threshold(HierModel& stage1, HierModel& stage2, const EmbeddingBundle& bundle,
                                             std::span<const std::size_t> indices, std::span<const double> grid,
                                             ConfidenceDef def = ConfidenceDef::PathProduct)
{
    if (grid.empty() || !std::is_sorted(grid.begin(), grid.end())) {
        fail(Errc::InvalidConfig, "threshold grid must be non-empty and ascending");
    }
    detail::check_same_taxonomy(stage1, stage2);
    const auto first = predict(stage1, bundle, indices);
    const auto second = predict(stage2, bundle, indices);
    std::vector<SweepRow> rows;
    for (const double tau : grid) {
        const CascadeConfig cfg{tau, def};
        cfg.check();
        const auto rep = detail::assemble_cascade(bundle, indices, first, cfg, [&](std::size_t k) { return second[k]; });
        const auto scores = score_cascade(rep, bundle, indices);
        rows.push_back({tau, rep.escalation_fraction(), scores.hier.hF, scores.exact_path_accuracy});
    }
    return rows;
}

inline void write_sweep_csv(std::ostream& out, std::span<const SweepRow> rows)
{
    out << "tau,escalated_fraction,hF,accuracy\n";
    char line[128];
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%.6g,%.6f,%.6f,%.6f\n", r.tau, r.escalated_fraction, r.hF, r.accuracy);
        out << line;
    }
}

} // namespace taxengine
