#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxengine/bundle.hpp"
#include "taxengine/checkpoint.hpp"
#include "taxengine/fusion.hpp"
#include "taxengine/kernels.hpp"
#include "taxengine/log.hpp"
#include "taxengine/metrics.hpp"
#include "taxengine/split.hpp"
#include "taxengine/taxonomy.hpp"

namespace taxengine {

struct ModelConfig {
    std::size_t trunk_width = 512;
    std::size_t head_width = 256;
    double dropout = 0.3;
    double bn_momentum = 0.9;
    double bn_epsilon = 1e-5;
    bool masking = true;
    /// Feed every coarser level's probabilities into a head, not just the parent level's.
    bool concat_all_coarser = false;

    nlohmann::json to_json() const
    {
        return {{"trunk_width", trunk_width}, {"head_width", head_width}, {"dropout", dropout},
                {"bn_momentum", bn_momentum}, {"bn_epsilon", bn_epsilon}, {"masking", masking},
                {"concat_all_coarser", concat_all_coarser}};
    }

    static ModelConfig from_json(const nlohmann::json& j)
    {
        ModelConfig c;
        c.trunk_width = j.at("trunk_width").get<std::size_t>();
        c.head_width = j.at("head_width").get<std::size_t>();
        c.dropout = j.at("dropout").get<double>();
        c.bn_momentum = j.at("bn_momentum").get<double>();
        c.bn_epsilon = j.at("bn_epsilon").get<double>();
        c.masking = j.at("masking").get<bool>();
        c.concat_all_coarser = j.at("concat_all_coarser").get<bool>();
        return c;
    }
};

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 128;
    std::size_t max_epochs = 60;
    std::size_t patience = 5;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const
    {
        return {{"learning_rate", learning_rate}, {"batch_size", batch_size}, {"max_epochs", max_epochs},
                {"patience", patience}, {"seed", seed}};
    }
};

/// Per-level training targets for levels 2..max_depth (index = level - 2).
/// `parent` is the ground-truth node at level - 1, or -1 once the label
/// path has already ended above it.
struct LevelTargets {
    std::vector<std::vector<std::size_t>> target;
    std::vector<std::vector<std::int64_t>> parent;

    std::size_t rows() const noexcept { return target.empty() ? 0 : target.front().size(); }

    LevelTargets select(std::span<const std::size_t> idx) const
    {
        LevelTargets out;
        out.target.resize(target.size());
        out.parent.resize(parent.size());
        for (std::size_t l = 0; l < target.size(); ++l) {
            for (const auto i : idx) {
                out.target[l].push_back(target[l][i]);
                out.parent[l].push_back(parent[l][i]);
            }
        }
        return out;
    }
};

/// Chain of node ids for a label; throws LabelOutsideTaxonomy when the
/// label is not a valid (terminal-ending) path.
inline std::vector<NodeId> label_chain(const Taxonomy& tax, const CategoryPath& label)
{
    if (!tax.validate_path(label)) {
        fail(Errc::LabelOutsideTaxonomy, "label '" + label.join() + "' is not a valid taxonomy path");
    }
    return tax.ancestor_closure(*tax.find(label));
}

inline LevelTargets make_targets(const Taxonomy& tax, std::span<const CategoryPath> labels)
{
    const auto depth = tax.max_depth();
    LevelTargets t;
    t.target.resize(depth > 1 ? depth - 1 : 0);
    t.parent.resize(t.target.size());
    for (const auto& label : labels) {
        const auto chain = label_chain(tax, label);
        for (std::size_t level = 2; level <= depth; ++level) {
            const auto li = level - 2;
            t.target[li].push_back(level <= chain.size() ? tax.position(chain[level - 1]) : tax.stop_index(level));
            t.parent[li].push_back(level - 1 <= chain.size() ? static_cast<std::int64_t>(chain[level - 2].value) : -1);
        }
    }
    return t;
}

/// Additive logit mask over level_index(level(parent) + 1): 0 for the
/// parent's children (and STOP when the parent may end a path), kMaskedLogit
/// elsewhere.
inline RowVector mask_row(const Taxonomy& tax, NodeId parent)
{
    const auto mask = tax.children_mask(parent);
    RowVector row(static_cast<Eigen::Index>(mask.bits.size()));
    for (std::size_t i = 0; i < mask.bits.size(); ++i) {
        row(static_cast<Eigen::Index>(i)) = mask.bits[i] ? 0.0 : kMaskedLogit;
    }
    return row;
}

/// Masked softmax for one record: non-children get probability exactly 0.
inline Vector apply_dynamic_mask(const Vector& logits, NodeId parent, const Taxonomy& tax)
{
    const RowVector row = mask_row(tax, parent);
    if (row.size() != logits.size()) {
        fail(Errc::ShapeMismatch, "logits width " + std::to_string(logits.size()) + " vs level width " + std::to_string(row.size()));
    }
    return softmax(logits + row.transpose());
}

struct LevelPrediction {
    std::size_t level = 0;
    std::size_t class_index = 0;
    bool is_stop = false;
    double confidence = 0.0;
    Vector probs;
};

struct PathPrediction {
    std::vector<LevelPrediction> levels; ///< decoded levels, up to and including a STOP
    CategoryPath path;                   ///< names, truncated at STOP
    std::vector<NodeId> nodes;           ///< node per path segment
    double path_confidence = 1.0;        ///< product of per-level maxima
    double min_level_confidence = 1.0;
    double leaf_confidence = 1.0;        ///< confidence of the last decoded level

    NodeId most_specific() const { return nodes.back(); }
};

class EarlyStopper {
public:
    explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

    /// Returns true when `value` strictly improves on the best so far.
    bool observe(double value)
    {
        ++epoch_;
        if (value < best_) {
            best_ = value;
            best_epoch_ = epoch_;
            wait_ = 0;
            return true;
        }
        ++wait_;
        return false;
    }

    bool should_stop() const noexcept { return wait_ >= patience_; }
    std::size_t best_epoch() const noexcept { return best_epoch_; }
    double best() const noexcept { return best_; }

private:
    std::size_t patience_;
    std::size_t epoch_ = 0;
    std::size_t best_epoch_ = 0;
    std::size_t wait_ = 0;
    double best_ = std::numeric_limits<double>::infinity();
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_hf1 = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;
    double best_val_loss = 0.0;
    bool stopped_early = false;

    nlohmann::json to_json() const
    {
        nlohmann::json j;
        j["best_epoch"] = best_epoch;
        j["best_val_loss"] = best_val_loss;
        j["stopped_early"] = stopped_early;
        j["epochs"] = nlohmann::json::array();
        for (const auto& e : epochs) {
            j["epochs"].push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"val_hf1", e.val_hf1}});
        }
        return j;
    }
};

inline std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Shared trunk feeding one head per level 2..max_depth. Level 1 is the
/// single constant root and has no head. Each head sees the trunk output
/// concatenated with the coarser level's probability vector and emits a
/// softmax over its level's classes (STOP last).
class HierModel {
public:
    HierModel(Taxonomy taxonomy, FusionConfig fusion, ModelConfig cfg, std::uint64_t seed)
        : tax_(std::move(taxonomy)), fusion_(std::move(fusion)), cfg_(cfg), seed_(seed)
    {
        if (tax_.max_depth() < 2) {
            fail(Errc::DepthTooShallow, "hierarchical model needs a taxonomy of depth >= 2");
        }
        if (tax_.roots().size() != 1) {
            fail(Errc::InvalidConfig, "hierarchical model needs a single level-1 root, taxonomy has " + std::to_string(tax_.roots().size()));
        }
        const auto fused = fusion_.output_dim();
        trunk_ = DenseLayer(fused, cfg_.trunk_width, "trunk.dense");
        trunk_bn_ = BatchNorm(cfg_.trunk_width, "trunk.bn", cfg_.bn_momentum, cfg_.bn_epsilon);
        trunk_drop_ = Dropout(cfg_.dropout, mix_keys(seed_, fnv1a("trunk.dropout")));
        for (std::size_t level = 2; level <= tax_.max_depth(); ++level) {
            const auto prefix = "head" + std::to_string(level);
            Head h;
            h.level = level;
            h.hidden = DenseLayer(head_input_dim(level), cfg_.head_width, prefix + ".dense");
            h.bn = BatchNorm(cfg_.head_width, prefix + ".bn", cfg_.bn_momentum, cfg_.bn_epsilon);
            h.drop = Dropout(cfg_.dropout, mix_keys(seed_, fnv1a(prefix + ".dropout")));
            h.out = DenseLayer(cfg_.head_width, tax_.class_count(level), prefix + ".out");
            heads_.push_back(std::move(h));
        }
        CounterRng rng(seed_, fnv1a("init"));
        fusion_.init(rng);
        trunk_.init(rng);
        for (auto& h : heads_) {
            h.hidden.init(rng);
            h.out.init(rng);
        }
        build_masks();
    }

    HierModel(const HierModel&) = default;
    HierModel& operator=(const HierModel&) = default;
    HierModel(HierModel&&) = default;
    HierModel& operator=(HierModel&&) = default;

    const Taxonomy& taxonomy() const noexcept { return tax_; }
    const FusionConfig& fusion_config() const noexcept { return fusion_.config(); }
    const ModelConfig& config() const noexcept { return cfg_; }
    std::uint64_t seed() const noexcept { return seed_; }
    bool masking() const noexcept { return cfg_.masking; }
    void set_masking(bool on) noexcept { cfg_.masking = on; }

    std::size_t head_input_dim(std::size_t level) const
    {
        std::size_t dim = cfg_.trunk_width;
        if (level > 2) {
            if (cfg_.concat_all_coarser) {
                for (std::size_t l = 2; l < level; ++l) {
                    dim += tax_.class_count(l);
                }
            } else {
                dim += tax_.class_count(level - 1);
            }
        }
        return dim;
    }

    ParamList parameters()
    {
        ParamList out;
        fusion_.collect(out);
        trunk_.collect(out);
        trunk_bn_.collect(out);
        for (auto& h : heads_) {
            h.hidden.collect(out);
            h.bn.collect(out);
            h.out.collect(out);
        }
        return out;
    }

    /// Per-level probabilities (index = level - 2). With `teacher`, masks
    /// follow the ground-truth parent; otherwise the argmax of the coarser
    /// level decides. `step` keys the dropout masks.
    std::vector<Matrix> forward(const ModalityBatch& inputs, Mode mode, const LevelTargets* teacher = nullptr, std::uint64_t step = 0)
    {
        const Matrix fused = fusion_.forward(inputs);
        const auto n = fused.rows();
        if (teacher && teacher->rows() != static_cast<std::size_t>(n)) {
            fail(Errc::ShapeMismatch, "teacher targets cover " + std::to_string(teacher->rows()) + " rows, batch has " + std::to_string(n));
        }
        trunk_out_ = trunk_drop_.forward(trunk_bn_.forward(trunk_relu_.forward(trunk_.forward(fused)), mode), mode, step * 64);
        probs_.assign(heads_.size(), Matrix());
        std::vector<std::int64_t> parent(static_cast<std::size_t>(n), static_cast<std::int64_t>(tax_.roots().front().value));
        for (std::size_t li = 0; li < heads_.size(); ++li) {
            auto& h = heads_[li];
            const auto level = h.level;
            const Matrix in = head_input(li);
            const Matrix hidden = h.drop.forward(h.bn.forward(h.relu.forward(h.hidden.forward(in)), mode), mode, step * 64 + level);
            const Matrix logits = h.out.forward(hidden);
            if (teacher) {
                parent.assign(teacher->parent[li].begin(), teacher->parent[li].end());
            } else if (li > 0) {
                for (Eigen::Index r = 0; r < n; ++r) {
                    Eigen::Index arg = 0;
                    probs_[li - 1].row(r).maxCoeff(&arg);
                    const auto prev_level = level - 1;
                    const bool stopped = parent[static_cast<std::size_t>(r)] < 0 ||
                                         static_cast<std::size_t>(arg) == tax_.stop_index(prev_level);
                    parent[static_cast<std::size_t>(r)] = stopped ? -1 : static_cast<std::int64_t>(tax_.at(prev_level, static_cast<std::size_t>(arg)).value);
                }
            }
            if (cfg_.masking) {
                Matrix additive(n, logits.cols());
                for (Eigen::Index r = 0; r < n; ++r) {
                    const auto p = parent[static_cast<std::size_t>(r)];
                    additive.row(r) = p < 0 ? stop_only_[li] : node_masks_[static_cast<std::size_t>(p)];
                }
                probs_[li] = softmax_rows(logits, &additive);
            } else {
                probs_[li] = softmax_rows(logits);
            }
        }
        return probs_;
    }

    /// Sum over levels of mean cross-entropy under teacher-forced masks; with
    /// `backward` the gradients of every parameter are zeroed and refilled.
    double loss(const ModalityBatch& inputs, const LevelTargets& targets, Mode mode, std::uint64_t step, bool backward)
    {
        forward(inputs, mode, &targets, step);
        std::vector<LossGrad> per_level;
        double total = 0.0;
        for (std::size_t li = 0; li < heads_.size(); ++li) {
            per_level.push_back(softmax_cross_entropy(probs_[li], targets.target[li]));
            total += per_level.back().loss;
        }
        if (!backward) {
            return total;
        }
        auto params = parameters();
        zero_grads(params);
        const auto n = trunk_out_.rows();
        Matrix d_trunk = Matrix::Zero(n, trunk_out_.cols());
        std::vector<Matrix> d_probs(heads_.size());
        for (std::size_t li = 0; li < heads_.size(); ++li) {
            d_probs[li] = Matrix::Zero(probs_[li].rows(), probs_[li].cols());
        }
        for (std::size_t li = heads_.size(); li-- > 0;) {
            auto& h = heads_[li];
            Matrix dz = per_level[li].dlogits + softmax_backward(probs_[li], d_probs[li]);
            const Matrix d_in = h.hidden.backward(h.relu.backward(h.bn.backward(h.drop.backward(h.out.backward(dz)))));
            d_trunk += d_in.leftCols(trunk_out_.cols());
            Eigen::Index col = trunk_out_.cols();
            if (li > 0) {
                const std::size_t first = cfg_.concat_all_coarser ? 0 : li - 1;
                for (std::size_t c = first; c < li; ++c) {
                    const auto w = probs_[c].cols();
                    d_probs[c] += d_in.middleCols(col, w);
                    col += w;
                }
            }
        }
        const Matrix d_fused = trunk_.backward(trunk_relu_.backward(trunk_bn_.backward(trunk_drop_.backward(d_trunk))));
        fusion_.backward(d_fused);
        return total;
    }

    /// Greedy top-down decoding of probabilities produced by forward().
    std::vector<PathPrediction> decode(const std::vector<Matrix>& probs) const
    {
        std::vector<PathPrediction> out;
        if (probs.empty()) {
            return out;
        }
        const auto root = tax_.roots().front();
        for (Eigen::Index r = 0; r < probs.front().rows(); ++r) {
            PathPrediction pp;
            pp.nodes.push_back(root);
            pp.path.segments.push_back(tax_.node(root).name);
            pp.min_level_confidence = 1.0;
            for (std::size_t li = 0; li < probs.size(); ++li) {
                const auto level = li + 2;
                LevelPrediction lp;
                lp.level = level;
                lp.probs = probs[li].row(r).transpose();
                Eigen::Index arg = 0;
                lp.confidence = lp.probs.maxCoeff(&arg);
                lp.class_index = static_cast<std::size_t>(arg);
                lp.is_stop = lp.class_index == tax_.stop_index(level);
                pp.path_confidence *= lp.confidence;
                pp.min_level_confidence = std::min(pp.min_level_confidence, lp.confidence);
                pp.leaf_confidence = lp.confidence;
                const bool stop = lp.is_stop;
                if (!stop) {
                    const auto node = tax_.at(level, lp.class_index);
                    pp.nodes.push_back(node);
                    pp.path.segments.push_back(tax_.node(node).name);
                }
                pp.levels.push_back(std::move(lp));
                if (stop) {
                    break;
                }
            }
            out.push_back(std::move(pp));
        }
        return out;
    }

    std::vector<PathPrediction> predict(const ModalityBatch& inputs) { return decode(forward(inputs, Mode::Infer)); }

    void save(const std::filesystem::path& dir, const nlohmann::json& extra = nlohmann::json::object())
    {
        nlohmann::json meta = extra;
        meta["fusion"] = fusion_.config().to_json();
        meta["model"] = cfg_.to_json();
        meta["taxonomy"] = tax_.to_json();
        meta["taxonomy_hash"] = hex64(tax_.hash());
        meta["seed"] = seed_;
        const auto params = parameters();
        save_tensors(dir, params, meta);
    }

    static HierModel load(const std::filesystem::path& dir)
    {
        const auto ar = load_tensors(dir);
        auto tax = Taxonomy::from_json(ar.meta.at("taxonomy"));
        if (hex64(tax.hash()) != ar.meta.at("taxonomy_hash").get<std::string>()) {
            fail(Errc::TaxonomyMismatch, "checkpoint taxonomy does not match its recorded hash");
        }
        HierModel model(std::move(tax), FusionConfig::from_json(ar.meta.at("fusion")), ModelConfig::from_json(ar.meta.at("model")),
                        ar.meta.at("seed").get<std::uint64_t>());
        const auto params = model.parameters();
        restore_tensors(ar, params);
        return model;
    }

    std::vector<Matrix> snapshot()
    {
        std::vector<Matrix> values;
        for (auto* p : parameters()) {
            values.push_back(p->value);
        }
        return values;
    }

    void restore(const std::vector<Matrix>& values)
    {
        const auto params = parameters();
        if (params.size() != values.size()) {
            fail(Errc::ShapeMismatch, "snapshot does not match the parameter list");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i]->value = values[i];
        }
    }

private:
    struct Head {
        std::size_t level = 0;
        DenseLayer hidden;
        Relu relu;
        BatchNorm bn;
        Dropout drop;
        DenseLayer out;
    };

    Matrix head_input(std::size_t li) const
    {
        if (li == 0) {
            return trunk_out_;
        }
        const std::size_t first = cfg_.concat_all_coarser ? 0 : li - 1;
        Eigen::Index width = trunk_out_.cols();
        for (std::size_t c = first; c < li; ++c) {
            width += probs_[c].cols();
        }
        Matrix in(trunk_out_.rows(), width);
        in.leftCols(trunk_out_.cols()) = trunk_out_;
        Eigen::Index col = trunk_out_.cols();
        for (std::size_t c = first; c < li; ++c) {
            in.middleCols(col, probs_[c].cols()) = probs_[c];
            col += probs_[c].cols();
        }
        return in;
    }

    void build_masks()
    {
        node_masks_.assign(tax_.size(), RowVector());
        for (std::uint32_t i = 0; i < tax_.size(); ++i) {
            if (tax_.node(NodeId{i}).level < tax_.max_depth()) {
                node_masks_[i] = mask_row(tax_, NodeId{i});
            }
        }
        stop_only_.clear();
        for (std::size_t level = 2; level <= tax_.max_depth(); ++level) {
            RowVector row = RowVector::Constant(static_cast<Eigen::Index>(tax_.class_count(level)), kMaskedLogit);
            row(static_cast<Eigen::Index>(tax_.stop_index(level))) = 0.0;
            stop_only_.push_back(row);
        }
    }

    Taxonomy tax_;
    FusionModule fusion_;
    ModelConfig cfg_;
    std::uint64_t seed_;
    DenseLayer trunk_;
    Relu trunk_relu_;
    BatchNorm trunk_bn_;
    Dropout trunk_drop_;
    std::vector<Head> heads_;
    std::vector<RowVector> node_masks_;
    std::vector<RowVector> stop_only_;
    Matrix trunk_out_;
    std::vector<Matrix> probs_;
};

inline HierModel build_model(const Taxonomy& tax, const FusionConfig& fusion, std::uint64_t seed, const ModelConfig& cfg = {})
{
    return HierModel(tax, fusion, cfg, seed);
}

namespace detail {

inline ModalityBatch select_rows(const ModalityBatch& all, std::span<const std::size_t> idx)
{
    ModalityBatch out;
    for (const auto& [name, m] : all) {
        Matrix sub(static_cast<Eigen::Index>(idx.size()), m.cols());
        for (std::size_t r = 0; r < idx.size(); ++r) {
            sub.row(static_cast<Eigen::Index>(r)) = m.row(static_cast<Eigen::Index>(idx[r]));
        }
        out.emplace(name, std::move(sub));
    }
    return out;
}

inline constexpr std::size_t kInferenceChunk = 512;

} // namespace detail

/// Batched inference over `indices` of a bundle.
inline std::vector<PathPrediction> predict(HierModel& model, const EmbeddingBundle& bundle, std::span<const std::size_t> indices)
{
    std::vector<PathPrediction> out;
    out.reserve(indices.size());
    for (std::size_t start = 0; start < indices.size(); start += detail::kInferenceChunk) {
        const auto chunk = indices.subspan(start, std::min(detail::kInferenceChunk, indices.size() - start));
        auto preds = model.predict(gather_inputs(bundle, model.fusion_config(), chunk));
        for (auto& p : preds) {
            out.push_back(std::move(p));
        }
    }
    return out;
}

inline std::vector<PathPrediction> predict(HierModel& model, const EmbeddingBundle& bundle)
{
    std::vector<std::size_t> all(bundle.size());
    for (std::size_t i = 0; i < all.size(); ++i) {
        all[i] = i;
    }
    return predict(model, bundle, all);
}

/// Mean teacher-forced loss in inference mode (running batchnorm statistics,
/// no dropout), weighted by chunk size.
inline double evaluate_loss(HierModel& model, const ModalityBatch& all, const LevelTargets& targets, std::span<const std::size_t> indices)
{
    if (indices.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (std::size_t start = 0; start < indices.size(); start += detail::kInferenceChunk) {
        const auto chunk = indices.subspan(start, std::min(detail::kInferenceChunk, indices.size() - start));
        total += model.loss(detail::select_rows(all, chunk), targets.select(chunk), Mode::Infer, 0, false) * static_cast<double>(chunk.size());
    }
    return total / static_cast<double>(indices.size());
}

/// Mini-batch Adam on summed per-level cross-entropy with early stopping on
/// validation loss; the best-validation parameters are restored at the end.
/// Without a validation split the training loss is monitored instead.
inline TrainHistory train(HierModel& model, const EmbeddingBundle& bundle, const SplitAssignment& split, const TrainConfig& cfg)
{
    if (cfg.learning_rate < 0.0 || cfg.batch_size < 2 || cfg.max_epochs < 1 || cfg.patience < 1) {
        fail(Errc::InvalidConfig, "train config needs lr >= 0, batch >= 2, epochs >= 1, patience >= 1");
    }
    if (split.assignment.size() != bundle.size()) {
        fail(Errc::LengthMismatch, "split covers " + std::to_string(split.assignment.size()) + " records, bundle has " + std::to_string(bundle.size()));
    }
    const auto& tax = model.taxonomy();
    const auto targets = make_targets(tax, bundle.labels);
    std::vector<std::size_t> all_idx(bundle.size());
    for (std::size_t i = 0; i < all_idx.size(); ++i) {
        all_idx[i] = i;
    }
    const ModalityBatch all = gather_inputs(bundle, model.fusion_config(), all_idx);
    const auto train_idx = split.indices(Split::Train);
    const auto val_idx = split.indices(Split::Val);
    if (train_idx.size() < 2) {
        fail(Errc::BatchTooSmall, "training split has fewer than 2 records");
    }
    std::vector<NodeId> val_truth;
    for (const auto i : val_idx) {
        val_truth.push_back(*tax.find(bundle.labels[i]));
    }

    Adam optimizer(AdamConfig{.learning_rate = cfg.learning_rate});
    const auto params = model.parameters();
    EarlyStopper stopper(cfg.patience);
    TrainHistory history;
    std::vector<Matrix> best = model.snapshot();
    std::uint64_t step = 0;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        std::vector<std::size_t> order = train_idx;
        CounterRng shuffle_rng(cfg.seed, mix_keys(fnv1a("epoch"), epoch));
        shuffle_rng.shuffle(std::span<std::size_t>(order));

        std::vector<std::pair<std::size_t, std::size_t>> batches;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            batches.emplace_back(start, std::min(cfg.batch_size, order.size() - start));
        }
        // Batchnorm cannot train on a single row: fold a trailing singleton into its predecessor.
        if (batches.size() > 1 && batches.back().second == 1) {
            batches.pop_back();
            batches.back().second += 1;
        }

        double train_loss = 0.0;
        for (const auto& [start, len] : batches) {
            const auto idx = std::span<const std::size_t>(order).subspan(start, len);
            const double l = model.loss(detail::select_rows(all, idx), targets.select(idx), Mode::Train, ++step, true);
            optimizer.step(params);
            train_loss += l * static_cast<double>(len);
        }
        train_loss /= static_cast<double>(order.size());

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = train_loss;
        if (!val_idx.empty()) {
            rec.val_loss = evaluate_loss(model, all, targets, val_idx);
            const auto preds = predict(model, bundle, val_idx);
            std::vector<NodeId> pred_nodes;
            for (const auto& p : preds) {
                pred_nodes.push_back(p.most_specific());
            }
            rec.val_hf1 = hierarchical_metrics(tax, std::span<const NodeId>(pred_nodes), std::span<const NodeId>(val_truth)).hF;
        } else {
            rec.val_loss = evaluate_loss(model, all, targets, train_idx);
        }
        history.epochs.push_back(rec);
        if (stopper.observe(rec.val_loss)) {
            best = model.snapshot();
        }
        char line[160];
        std::snprintf(line, sizeof line, "epoch %zu train_loss %.6f val_loss %.6f val_hF1 %.4f", epoch, rec.train_loss, rec.val_loss, rec.val_hf1);
        log::debug(line);
        if (stopper.should_stop()) {
            history.stopped_early = true;
            break;
        }
    }
    model.restore(best);
    history.best_epoch = stopper.best_epoch();
    history.best_val_loss = stopper.best();
    return history;
}

} // namespace taxengine
