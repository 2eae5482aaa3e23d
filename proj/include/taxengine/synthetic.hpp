#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "taxengine/bundle.hpp"
#include "taxengine/rng.hpp"

namespace taxengine {

struct ModalitySpec {
    std::string name;
    std::size_t dim = 8;
    std::optional<double> noise; ///< per-component sigma; falls back to SyntheticOptions::noise
};

struct SyntheticOptions {
    std::size_t per_leaf = 10;
    std::vector<ModalitySpec> modalities;
    double noise = 0.05;
    std::uint64_t seed = 0;
    /// Leaf anchors are redrawn (best effort) until every pair is at least this far apart.
    double min_angle_deg = 60.0;
    /// 0 gives independent anchors; values in (0, 1) pull a node's anchor
    /// toward its parent's, so sibling leaves cluster together.
    double parent_weight = 0.0;
};

struct SyntheticDataset {
    EmbeddingBundle bundle;
    std::vector<NodeId> leaves;                ///< anchor row order
    std::map<std::string, Matrix> anchors;     ///< per modality: leaves x dim, unit rows
    std::vector<std::size_t> leaf_of_record;   ///< index into `leaves`
};

namespace detail {

inline Vector random_unit(CounterRng& rng, std::size_t dim)
{
    Vector v(static_cast<Eigen::Index>(dim));
    do {
        for (Eigen::Index i = 0; i < v.size(); ++i) {
            v(i) = rng.normal();
        }
    } while (v.norm() == 0.0);
    return v.normalized();
}

inline Matrix draw_anchors(const Taxonomy& tax, const std::vector<NodeId>& leaves, std::size_t dim,
                           const SyntheticOptions& opt, CounterRng& rng)
{
    const double max_cos = std::cos(opt.min_angle_deg * std::numbers::pi / 180.0);
    std::vector<Vector> node_anchor(tax.size());
    std::vector<Vector> accepted;
    constexpr int kTries = 256;
    for (std::uint32_t id = 0; id < tax.size(); ++id) {
        const auto& n = tax.node(NodeId{id});
        const bool is_leaf = n.children.empty();
        Vector best;
        double best_cos = 2.0;
        for (int attempt = 0; attempt < kTries; ++attempt) {
            Vector cand = random_unit(rng, dim);
            if (n.parent && opt.parent_weight > 0.0) {
                cand = (opt.parent_weight * node_anchor[n.parent->value] + (1.0 - opt.parent_weight) * cand).normalized();
            }
            if (!is_leaf) {
                best = cand;
                break;
            }
            double worst = -1.0;
            for (const auto& a : accepted) {
                worst = std::max(worst, a.dot(cand));
            }
            if (worst < best_cos) {
                best_cos = worst;
                best = cand;
            }
            if (worst <= max_cos) {
                break;
            }
        }
        node_anchor[id] = best;
        if (is_leaf) {
            accepted.push_back(best);
        }
    }
    Matrix out(static_cast<Eigen::Index>(leaves.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = node_anchor[leaves[i].value].transpose();
    }
    return out;
}

} // namespace detail

/// Every leaf gets a unit anchor per modality; each record is its leaf's
/// anchor plus isotropic Gaussian noise. Records are grouped by leaf in
/// node-id order.
inline SyntheticDataset generate_synthetic(const Taxonomy& tax, const SyntheticOptions& opt)
{
    if (opt.per_leaf < 1) {
        fail(Errc::InvalidConfig, "per_leaf must be >= 1");
    }
    if (opt.modalities.empty()) {
        fail(Errc::InvalidConfig, "at least one modality is required");
    }
    SyntheticDataset ds;
    ds.leaves = tax.leaves();
    ds.bundle.taxonomy = tax;
    const auto n = ds.leaves.size() * opt.per_leaf;

    for (std::size_t li = 0; li < ds.leaves.size(); ++li) {
        const auto label = tax.path_of(ds.leaves[li]);
        for (std::size_t r = 0; r < opt.per_leaf; ++r) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "r%06zu", ds.bundle.ids.size());
            ds.bundle.ids.emplace_back(buf);
            ds.bundle.labels.push_back(label);
            ds.leaf_of_record.push_back(li);
        }
    }

    for (std::size_t mi = 0; mi < opt.modalities.size(); ++mi) {
        const auto& spec = opt.modalities[mi];
        if (spec.dim < 1) {
            fail(Errc::InvalidConfig, "modality '" + spec.name + "' has dim 0");
        }
        CounterRng anchor_rng(opt.seed, mix_keys(fnv1a("anchors"), fnv1a(spec.name)));
        CounterRng noise_rng(opt.seed, mix_keys(fnv1a("noise"), fnv1a(spec.name)));
        const Matrix anchors = detail::draw_anchors(tax, ds.leaves, spec.dim, opt, anchor_rng);
        const double sigma = spec.noise.value_or(opt.noise);

        Modality m{spec.name, FloatMatrix(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(spec.dim))};
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = anchors.row(static_cast<Eigen::Index>(ds.leaf_of_record[i]));
            for (Eigen::Index c = 0; c < row.size(); ++c) {
                const double noise = sigma > 0.0 ? sigma * noise_rng.normal() : 0.0;
                m.values(static_cast<Eigen::Index>(i), c) = static_cast<float>(row(c) + noise);
            }
        }
        ds.bundle.modalities.push_back(std::move(m));
        ds.anchors.emplace(spec.name, anchors);
    }
    return ds;
}

inline EmbeddingBundle gen_synthetic(const Taxonomy& tax, std::size_t per_leaf, std::vector<ModalitySpec> dims,
                                     double sigma, std::uint64_t seed)
{
    SyntheticOptions opt;
    opt.per_leaf = per_leaf;
    opt.modalities = std::move(dims);
    opt.noise = sigma;
    opt.seed = seed;
    return generate_synthetic(tax, opt).bundle;
}

} // namespace taxengine
