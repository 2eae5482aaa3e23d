#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxengine/bundle.hpp"
#include "taxengine/kernels.hpp"

namespace taxengine {

enum class FusionStrategy { Early, Late, Attention };

inline std::string_view to_string(FusionStrategy s) noexcept
{
    switch (s) {
    case FusionStrategy::Early: return "early";
    case FusionStrategy::Late: return "late";
    case FusionStrategy::Attention: return "attention";
    }
    return "?";
}

inline FusionStrategy parse_fusion_strategy(std::string_view s)
{
    if (s == "early") return FusionStrategy::Early;
    if (s == "late") return FusionStrategy::Late;
    if (s == "attention") return FusionStrategy::Attention;
    fail(Errc::InvalidConfig, "unknown fusion strategy '" + std::string(s) + "' (expected early|late|attention)");
}

struct ModalityInput {
    std::string name;
    std::size_t dim = 0;

    friend bool operator==(const ModalityInput&, const ModalityInput&) = default;
};

struct AttentionPair {
    std::string query;
    std::string key_value;

    friend bool operator==(const AttentionPair&, const AttentionPair&) = default;
};

/// Ordering key: title, brand, image, then any other name alphabetically.
inline std::pair<int, std::string> canonical_rank(const std::string& name)
{
    static const std::array<std::string_view, 3> order{"title", "brand", "image"};
    const auto it = std::find(order.begin(), order.end(), name);
    return {it == order.end() ? static_cast<int>(order.size()) : static_cast<int>(it - order.begin()), name};
}

inline constexpr std::size_t kDefaultLateWidth = 256;
inline constexpr std::size_t kDefaultJointWidth = 512;
inline constexpr std::size_t kDefaultAttentionDim = 64;

struct FusionConfig {
    FusionStrategy strategy = FusionStrategy::Early;
    std::vector<ModalityInput> modalities;
    std::vector<std::size_t> late_widths;  ///< one per modality (LATE)
    bool joint_layer = true;               ///< LATE only; ATTENTION always has one
    std::size_t joint_width = kDefaultJointWidth;
    std::vector<AttentionPair> attention_pairs;
    std::size_t attention_dim = kDefaultAttentionDim;

    const ModalityInput& input(std::string_view name) const
    {
        for (const auto& m : modalities) {
            if (m.name == name) {
                return m;
            }
        }
        fail(Errc::UnknownModality, "fusion config has no modality '" + std::string(name) + "'");
    }

    std::size_t input_dim() const
    {
        std::size_t total = 0;
        for (const auto& m : modalities) {
            total += m.dim;
        }
        return total;
    }

    std::size_t output_dim() const
    {
        switch (strategy) {
        case FusionStrategy::Early:
            return input_dim();
        case FusionStrategy::Late: {
            if (joint_layer) {
                return joint_width;
            }
            std::size_t total = 0;
            for (const auto w : late_widths) {
                total += w;
            }
            return total;
        }
        case FusionStrategy::Attention:
            return joint_width;
        }
        return 0;
    }

    /// Sorts modalities canonically (widths follow their modality) and checks
    /// every invariant.
    void canonicalize()
    {
        if (modalities.empty()) {
            fail(Errc::InvalidConfig, "fusion needs at least one modality");
        }
        if (strategy == FusionStrategy::Late && late_widths.empty()) {
            late_widths.assign(modalities.size(), kDefaultLateWidth);
        }
        if (strategy == FusionStrategy::Late && late_widths.size() != modalities.size()) {
            fail(Errc::InvalidConfig, "late fusion needs one width per modality");
        }
        std::vector<std::size_t> order(modalities.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = i;
        }
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return canonical_rank(modalities[a].name) < canonical_rank(modalities[b].name);
        });
        std::vector<ModalityInput> mods;
        std::vector<std::size_t> widths;
        for (const auto i : order) {
            mods.push_back(modalities[i]);
            if (strategy == FusionStrategy::Late) {
                widths.push_back(late_widths[i]);
            }
        }
        modalities = std::move(mods);
        late_widths = std::move(widths);
        for (std::size_t i = 0; i < modalities.size(); ++i) {
            if (modalities[i].dim < 1) {
                fail(Errc::InvalidConfig, "modality '" + modalities[i].name + "' has width 0");
            }
            if (i > 0 && modalities[i].name == modalities[i - 1].name) {
                fail(Errc::InvalidConfig, "duplicate modality '" + modalities[i].name + "'");
            }
        }
        for (const auto w : late_widths) {
            if (w < 1) {
                fail(Errc::InvalidConfig, "late transform width must be >= 1");
            }
        }
        if (strategy != FusionStrategy::Early && joint_width < 1) {
            fail(Errc::InvalidConfig, "joint width must be >= 1");
        }
        if (strategy == FusionStrategy::Attention) {
            if (attention_pairs.empty()) {
                attention_pairs = {{"brand", "image"}, {"title", "image"}};
            }
            if (attention_dim < 1) {
                fail(Errc::InvalidConfig, "attention dim must be >= 1");
            }
            for (const auto& p : attention_pairs) {
                input(p.query);
                input(p.key_value);
            }
        }
    }

    nlohmann::json to_json() const
    {
        nlohmann::json j;
        j["strategy"] = to_string(strategy);
        j["modalities"] = nlohmann::json::array();
        for (const auto& m : modalities) {
            j["modalities"].push_back({{"name", m.name}, {"dim", m.dim}});
        }
        j["late_widths"] = late_widths;
        j["joint_layer"] = joint_layer;
        j["joint_width"] = joint_width;
        j["attention_pairs"] = nlohmann::json::array();
        for (const auto& p : attention_pairs) {
            j["attention_pairs"].push_back({p.query, p.key_value});
        }
        j["attention_dim"] = attention_dim;
        return j;
    }

    static FusionConfig from_json(const nlohmann::json& j)
    {
        FusionConfig c;
        c.strategy = parse_fusion_strategy(j.at("strategy").get<std::string>());
        for (const auto& m : j.at("modalities")) {
            c.modalities.push_back({m.at("name").get<std::string>(), m.at("dim").get<std::size_t>()});
        }
        c.late_widths = j.value("late_widths", std::vector<std::size_t>{});
        c.joint_layer = j.value("joint_layer", true);
        c.joint_width = j.value("joint_width", kDefaultJointWidth);
        for (const auto& p : j.value("attention_pairs", nlohmann::json::array())) {
            c.attention_pairs.push_back({p.at(0).get<std::string>(), p.at(1).get<std::string>()});
        }
        c.attention_dim = j.value("attention_dim", kDefaultAttentionDim);
        c.canonicalize();
        return c;
    }

    friend bool operator==(const FusionConfig&, const FusionConfig&) = default;
};

inline FusionConfig make_fusion_config(FusionStrategy strategy, std::vector<ModalityInput> modalities)
{
    FusionConfig c;
    c.strategy = strategy;
    c.modalities = std::move(modalities);
    c.canonicalize();
    return c;
}

inline std::vector<ModalityInput> bundle_modalities(const EmbeddingBundle& bundle)
{
    std::vector<ModalityInput> out;
    for (const auto& m : bundle.modalities) {
        out.push_back({m.name, static_cast<std::size_t>(m.values.cols())});
    }
    return out;
}

/// Parameter-free passthrough over a subset of the available modalities, for
/// text-only / image-only runs of the same trunk.
inline FusionConfig unimodal_config(std::span<const ModalityInput> available, std::span<const std::string> selected)
{
    if (selected.empty()) {
        fail(Errc::UnknownModality, "no modality selected");
    }
    std::vector<ModalityInput> chosen;
    for (const auto& name : selected) {
        const auto it = std::find_if(available.begin(), available.end(), [&](const ModalityInput& m) { return m.name == name; });
        if (it == available.end()) {
            fail(Errc::UnknownModality, "modality '" + name + "' is not available");
        }
        chosen.push_back(*it);
    }
    return make_fusion_config(FusionStrategy::Early, std::move(chosen));
}

inline FusionConfig unimodal_config(std::span<const ModalityInput> available, const std::string& modality)
{
    const std::string one[] = {modality};
    return unimodal_config(available, one);
}

using ModalityBatch = std::map<std::string, Matrix, std::less<>>;

/// The differentiable fusion subgraph: maps per-modality batches
/// (rows = records) to one joint matrix.
class FusionModule {
public:
    FusionModule() = default;
    explicit FusionModule(FusionConfig cfg) : cfg_(std::move(cfg))
    {
        cfg_.canonicalize();
        if (cfg_.strategy == FusionStrategy::Late) {
            std::size_t concat = 0;
            for (std::size_t i = 0; i < cfg_.modalities.size(); ++i) {
                branches_.emplace_back(DenseLayer(cfg_.modalities[i].dim, cfg_.late_widths[i], "fusion.late." + cfg_.modalities[i].name),
                                       Relu{});
                concat += cfg_.late_widths[i];
            }
            if (cfg_.joint_layer) {
                joint_ = DenseLayer(concat, cfg_.joint_width, "fusion.joint");
            }
        } else if (cfg_.strategy == FusionStrategy::Attention) {
            std::size_t concat = cfg_.input_dim();
            for (const auto& p : cfg_.attention_pairs) {
                attention_.emplace_back(cfg_.input(p.query).dim, cfg_.input(p.key_value).dim, cfg_.attention_dim,
                                        "fusion.attn." + p.query + "_" + p.key_value);
                concat += cfg_.attention_dim;
            }
            joint_ = DenseLayer(concat, cfg_.joint_width, "fusion.joint");
        }
    }

    const FusionConfig& config() const noexcept { return cfg_; }
    std::size_t output_dim() const { return cfg_.output_dim(); }

    void init(CounterRng& rng)
    {
        for (auto& [dense, relu] : branches_) {
            dense.init(rng);
        }
        for (auto& a : attention_) {
            a.init(rng);
        }
        if (has_joint()) {
            joint_.init(rng);
        }
    }

    Matrix forward(const ModalityBatch& inputs)
    {
        check_inputs(inputs);
        const auto n = inputs.begin()->second.rows();
        switch (cfg_.strategy) {
        case FusionStrategy::Early:
            return concat_inputs(inputs, n);
        case FusionStrategy::Late: {
            Matrix cat(n, static_cast<Eigen::Index>(concat_width()));
            Eigen::Index col = 0;
            for (std::size_t i = 0; i < cfg_.modalities.size(); ++i) {
                auto& [dense, relu] = branches_[i];
                const Matrix h = relu.forward(dense.forward(inputs.find(cfg_.modalities[i].name)->second));
                cat.middleCols(col, h.cols()) = h;
                col += h.cols();
            }
            if (!cfg_.joint_layer) {
                return cat;
            }
            return joint_relu_.forward(joint_.forward(cat));
        }
        case FusionStrategy::Attention: {
            Matrix cat(n, static_cast<Eigen::Index>(concat_width()));
            Eigen::Index col = 0;
            for (std::size_t p = 0; p < cfg_.attention_pairs.size(); ++p) {
                const auto& pair = cfg_.attention_pairs[p];
                const Matrix out = attention_[p].forward_pooled(inputs.find(pair.query)->second, inputs.find(pair.key_value)->second);
                cat.middleCols(col, out.cols()) = out;
                col += out.cols();
            }
            cat.rightCols(static_cast<Eigen::Index>(cfg_.input_dim())) = concat_inputs(inputs, n);
            return joint_relu_.forward(joint_.forward(cat));
        }
        }
        return {};
    }

    /// Gradients for every configured modality.
    ModalityBatch backward(const Matrix& d_joint)
    {
        ModalityBatch grads;
        switch (cfg_.strategy) {
        case FusionStrategy::Early:
            split_into(grads, d_joint, 0);
            break;
        case FusionStrategy::Late: {
            const Matrix d_cat = cfg_.joint_layer ? joint_.backward(joint_relu_.backward(d_joint)) : d_joint;
            Eigen::Index col = 0;
            for (std::size_t i = 0; i < cfg_.modalities.size(); ++i) {
                auto& [dense, relu] = branches_[i];
                const auto w = static_cast<Eigen::Index>(cfg_.late_widths[i]);
                grads[cfg_.modalities[i].name] = dense.backward(relu.backward(d_cat.middleCols(col, w)));
                col += w;
            }
            break;
        }
        case FusionStrategy::Attention: {
            const Matrix d_cat = joint_.backward(joint_relu_.backward(d_joint));
            split_into(grads, d_cat, static_cast<Eigen::Index>(cfg_.attention_pairs.size() * cfg_.attention_dim));
            Eigen::Index col = 0;
            for (std::size_t p = 0; p < cfg_.attention_pairs.size(); ++p) {
                const auto& pair = cfg_.attention_pairs[p];
                const auto w = static_cast<Eigen::Index>(cfg_.attention_dim);
                const auto g = attention_[p].backward_pooled(d_cat.middleCols(col, w));
                grads[pair.query] += g.d_queries;
                grads[pair.key_value] += g.d_keys_values;
                col += w;
            }
            break;
        }
        }
        return grads;
    }

    void collect(ParamList& out)
    {
        for (auto& [dense, relu] : branches_) {
            dense.collect(out);
        }
        for (auto& a : attention_) {
            a.collect(out);
        }
        if (has_joint()) {
            joint_.collect(out);
        }
    }

    /// Row-stochastic attention weights of the last forward pass (ATTENTION only).
    Matrix attention_weights(std::size_t pair, const ModalityBatch& inputs) const
    {
        const auto& p = cfg_.attention_pairs.at(pair);
        const auto& q = inputs.find(p.query)->second;
        const auto& kv = inputs.find(p.key_value)->second;
        Matrix w(q.rows(), 1);
        for (Eigen::Index b = 0; b < q.rows(); ++b) {
            w.row(b) = attention_[pair].attend(q.row(b), kv.row(b)).weights;
        }
        return w;
    }

private:
    bool has_joint() const noexcept
    {
        return cfg_.strategy == FusionStrategy::Attention || (cfg_.strategy == FusionStrategy::Late && cfg_.joint_layer);
    }

    std::size_t concat_width() const
    {
        if (cfg_.strategy == FusionStrategy::Late) {
            std::size_t total = 0;
            for (const auto w : cfg_.late_widths) {
                total += w;
            }
            return total;
        }
        return cfg_.input_dim() + cfg_.attention_pairs.size() * cfg_.attention_dim;
    }

    void check_inputs(const ModalityBatch& inputs) const
    {
        for (const auto& m : cfg_.modalities) {
            const auto it = inputs.find(m.name);
            if (it == inputs.end()) {
                fail(Errc::MissingModality, "fusion input lacks modality '" + m.name + "'");
            }
            if (static_cast<std::size_t>(it->second.cols()) != m.dim) {
                fail(Errc::DimMismatch, "modality '" + m.name + "' has width " + std::to_string(it->second.cols()) +
                                            ", expected " + std::to_string(m.dim));
            }
            if (it->second.rows() != inputs.begin()->second.rows()) {
                fail(Errc::ShapeMismatch, "modality batches have different row counts");
            }
        }
        for (const auto& [name, mat] : inputs) {
            const auto known = std::any_of(cfg_.modalities.begin(), cfg_.modalities.end(), [&](const ModalityInput& m) { return m.name == name; });
            if (!known) {
                fail(Errc::UnknownModality, "fusion input has unexpected modality '" + name + "'");
            }
        }
    }

    Matrix concat_inputs(const ModalityBatch& inputs, Eigen::Index n) const
    {
        Matrix out(n, static_cast<Eigen::Index>(cfg_.input_dim()));
        Eigen::Index col = 0;
        for (const auto& m : cfg_.modalities) {
            const auto& x = inputs.find(m.name)->second;
            out.middleCols(col, x.cols()) = x;
            col += x.cols();
        }
        return out;
    }

    void split_into(ModalityBatch& grads, const Matrix& d, Eigen::Index offset) const
    {
        Eigen::Index col = offset;
        for (const auto& m : cfg_.modalities) {
            const auto w = static_cast<Eigen::Index>(m.dim);
            grads[m.name] = d.middleCols(col, w);
            col += w;
        }
    }

    FusionConfig cfg_;
    std::vector<std::pair<DenseLayer, Relu>> branches_;
    std::vector<AttentionBlock> attention_;
    DenseLayer joint_;
    Relu joint_relu_;
};

/// Gathers the configured modalities for `indices` into a fusion input batch.
inline ModalityBatch gather_inputs(const EmbeddingBundle& bundle, const FusionConfig& cfg, std::span<const std::size_t> indices)
{
    ModalityBatch batch;
    for (const auto& m : cfg.modalities) {
        const auto* mod = bundle.find(m.name);
        if (mod == nullptr) {
            fail(Errc::MissingModality, "bundle lacks modality '" + m.name + "' required by the model");
        }
        if (static_cast<std::size_t>(mod->values.cols()) != m.dim) {
            fail(Errc::DimMismatch, "bundle modality '" + m.name + "' has width " + std::to_string(mod->values.cols()) +
                                        ", model expects " + std::to_string(m.dim));
        }
        batch.emplace(m.name, bundle.rows(m.name, indices));
    }
    return batch;
}

} // namespace taxengine
