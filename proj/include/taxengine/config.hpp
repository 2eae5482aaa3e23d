#pragma once

#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "taxengine/cascade.hpp"
#include "taxengine/fusion.hpp"
#include "taxengine/hiermodel.hpp"
#include "taxengine/recategorize.hpp"
#include "taxengine/split.hpp"
#include "taxengine/synthetic.hpp"

namespace taxengine {

struct DataSection {
    std::filesystem::path bundle;
    std::optional<std::filesystem::path> taxonomy; ///< replaces the bundle's own taxonomy
    std::uint64_t split_seed = 0;
    SplitFractions fractions;
};

struct ModelSection {
    FusionStrategy fusion = FusionStrategy::Late;
    std::vector<std::string> modalities; ///< empty = every bundle modality
    std::size_t late_width = kDefaultLateWidth;
    bool joint_layer = true;
    std::size_t joint_width = kDefaultJointWidth;
    std::size_t attention_dim = kDefaultAttentionDim;
    std::vector<AttentionPair> attention_pairs;
    ModelConfig net;
};

struct RecatSection {
    std::string target;
    RecatConfig options;
    std::optional<std::filesystem::path> labels_file;
};

struct CascadeSection {
    std::filesystem::path stage1;
    std::filesystem::path stage2;
    CascadeConfig options;
    std::vector<double> sweep;
};

struct SynthSection {
    std::optional<std::filesystem::path> taxonomy;
    std::vector<std::string> paths; ///< inline alternative to `taxonomy`
    SyntheticOptions options;
};

namespace detail {

inline void check_keys(const nlohmann::json& obj, std::string_view section, std::initializer_list<std::string_view> allowed)
{
    if (!obj.is_object()) {
        fail(Errc::InvalidConfig, "config section '" + std::string(section) + "' must be an object");
    }
    for (const auto& [key, value] : obj.items()) {
        bool known = false;
        for (const auto a : allowed) {
            known = known || key == a;
        }
        if (!known) {
            fail(Errc::InvalidConfig, "unknown config key '" + std::string(section) + "." + key + "'");
        }
    }
}

template <class T>
void read_opt(const nlohmann::json& obj, const char* key, T& out)
{
    if (obj.contains(key)) {
        out = obj.at(key).get<T>();
    }
}

inline StopCriterion stop_from_json(const nlohmann::json& j)
{
    StopCriterion s;
    if (j.contains("count")) {
        s.count = j.at("count").get<std::size_t>();
    }
    if (j.contains("threshold")) {
        s.threshold = j.at("threshold").get<double>();
    }
    s.check();
    return s;
}

} // namespace detail

/// One JSON document per run. Relative paths resolve against `base`
/// (the config file's directory). Unknown keys are rejected.
struct RunConfig {
    DataSection data;
    ModelSection model;
    TrainConfig train;
    RecatSection recat;
    CascadeSection cascade;
    SynthSection synth;

    static RunConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {})
    {
        using detail::check_keys;
        using detail::read_opt;
        const auto resolve = [&](const std::string& p) {
            const std::filesystem::path path(p);
            return path.is_absolute() || base.empty() ? path : base / path;
        };
        RunConfig c;
        check_keys(j, "<root>", {"data", "model", "train", "recat", "cascade", "synth"});

        if (j.contains("data")) {
            const auto& d = j["data"];
            check_keys(d, "data", {"bundle", "taxonomy", "split_seed", "fractions"});
            if (d.contains("bundle")) {
                c.data.bundle = resolve(d["bundle"].get<std::string>());
            }
            if (d.contains("taxonomy")) {
                c.data.taxonomy = resolve(d["taxonomy"].get<std::string>());
            }
            read_opt(d, "split_seed", c.data.split_seed);
            if (d.contains("fractions")) {
                const auto& f = d["fractions"];
                check_keys(f, "data.fractions", {"train", "val", "test"});
                read_opt(f, "train", c.data.fractions.train);
                read_opt(f, "val", c.data.fractions.val);
                read_opt(f, "test", c.data.fractions.test);
            }
        }

        if (j.contains("model")) {
            const auto& m = j["model"];
            check_keys(m, "model", {"fusion", "modalities", "late_width", "joint_layer", "joint_width", "attention_dim", "attention_pairs",
                                    "trunk_width", "head_width", "dropout", "bn_momentum", "bn_epsilon", "masking", "concat_all_coarser"});
            if (m.contains("fusion")) {
                c.model.fusion = parse_fusion_strategy(m["fusion"].get<std::string>());
            }
            read_opt(m, "modalities", c.model.modalities);
            read_opt(m, "late_width", c.model.late_width);
            read_opt(m, "joint_layer", c.model.joint_layer);
            read_opt(m, "joint_width", c.model.joint_width);
            read_opt(m, "attention_dim", c.model.attention_dim);
            if (m.contains("attention_pairs")) {
                for (const auto& p : m["attention_pairs"]) {
                    c.model.attention_pairs.push_back({p.at(0).get<std::string>(), p.at(1).get<std::string>()});
                }
            }
            read_opt(m, "trunk_width", c.model.net.trunk_width);
            read_opt(m, "head_width", c.model.net.head_width);
            read_opt(m, "dropout", c.model.net.dropout);
            read_opt(m, "bn_momentum", c.model.net.bn_momentum);
            read_opt(m, "bn_epsilon", c.model.net.bn_epsilon);
            read_opt(m, "masking", c.model.net.masking);
            read_opt(m, "concat_all_coarser", c.model.net.concat_all_coarser);
        }

        if (j.contains("train")) {
            const auto& t = j["train"];
            check_keys(t, "train", {"learning_rate", "batch_size", "max_epochs", "patience", "seed"});
            read_opt(t, "learning_rate", c.train.learning_rate);
            read_opt(t, "batch_size", c.train.batch_size);
            read_opt(t, "max_epochs", c.train.max_epochs);
            read_opt(t, "patience", c.train.patience);
            read_opt(t, "seed", c.train.seed);
        }

        if (j.contains("recat")) {
            const auto& r = j["recat"];
            check_keys(r, "recat", {"target", "modality", "filter", "filter_clusters", "mad_multiplier", "filter_threshold", "depth_plan",
                                    "exemplars", "seed", "external_coordinates", "labels_file"});
            read_opt(r, "target", c.recat.target);
            auto& o = c.recat.options;
            read_opt(r, "modality", o.modality);
            read_opt(r, "filter", o.filter);
            read_opt(r, "filter_clusters", o.filter_clusters);
            read_opt(r, "mad_multiplier", o.keep.mad_multiplier);
            if (r.contains("filter_threshold")) {
                o.keep.threshold = r["filter_threshold"].get<double>();
            }
            read_opt(r, "exemplars", o.exemplars);
            read_opt(r, "seed", o.seed);
            if (r.contains("external_coordinates")) {
                o.external_coordinates = resolve(r["external_coordinates"].get<std::string>());
            }
            if (r.contains("labels_file")) {
                c.recat.labels_file = resolve(r["labels_file"].get<std::string>());
            }
            if (r.contains("depth_plan")) {
                o.depth_plan.clear();
                for (const auto& step : r["depth_plan"]) {
                    check_keys(step, "recat.depth_plan[]", {"count", "threshold", "linkage", "reducer"});
                    DepthPlan p;
                    p.stop = detail::stop_from_json(step);
                    if (step.contains("linkage")) {
                        p.linkage = parse_linkage(step["linkage"].get<std::string>());
                    }
                    if (step.contains("reducer")) {
                        const auto& red = step["reducer"];
                        check_keys(red, "recat.depth_plan[].reducer", {"method", "dims", "variance"});
                        if (red.contains("method")) {
                            p.reducer.method = parse_reducer(red["method"].get<std::string>());
                        }
                        if (red.contains("dims")) {
                            p.reducer.dims = red["dims"].get<std::size_t>();
                        }
                        read_opt(red, "variance", p.reducer.variance);
                    }
                    p.reducer.check();
                    o.depth_plan.push_back(p);
                }
            }
        }

        if (j.contains("cascade")) {
            const auto& k = j["cascade"];
            check_keys(k, "cascade", {"stage1", "stage2", "threshold", "confidence", "sweep"});
            if (k.contains("stage1")) {
                c.cascade.stage1 = resolve(k["stage1"].get<std::string>());
            }
            if (k.contains("stage2")) {
                c.cascade.stage2 = resolve(k["stage2"].get<std::string>());
            }
            read_opt(k, "threshold", c.cascade.options.threshold);
            if (k.contains("confidence")) {
                c.cascade.options.confidence = parse_confidence(k["confidence"].get<std::string>());
            }
            read_opt(k, "sweep", c.cascade.sweep);
        }

        if (j.contains("synth")) {
            const auto& s = j["synth"];
            check_keys(s, "synth", {"taxonomy", "paths", "per_leaf", "modalities", "noise", "seed", "min_angle_deg", "parent_weight"});
            if (s.contains("taxonomy")) {
                c.synth.taxonomy = resolve(s["taxonomy"].get<std::string>());
            }
            read_opt(s, "paths", c.synth.paths);
            auto& o = c.synth.options;
            read_opt(s, "per_leaf", o.per_leaf);
            read_opt(s, "noise", o.noise);
            read_opt(s, "seed", o.seed);
            read_opt(s, "min_angle_deg", o.min_angle_deg);
            read_opt(s, "parent_weight", o.parent_weight);
            if (s.contains("modalities")) {
                for (const auto& m : s["modalities"]) {
                    check_keys(m, "synth.modalities[]", {"name", "dim", "noise"});
                    ModalitySpec spec;
                    spec.name = m.at("name").get<std::string>();
                    read_opt(m, "dim", spec.dim);
                    if (m.contains("noise")) {
                        spec.noise = m["noise"].get<double>();
                    }
                    o.modalities.push_back(spec);
                }
            }
        }
        c.cascade.options.check();
        return c;
    }

    static RunConfig load(const std::filesystem::path& file)
    {
        std::ifstream in(file, std::ios::binary);
        if (!in) {
            fail(Errc::Io, "cannot open config " + file.string());
        }
        const auto j = nlohmann::json::parse(in, nullptr, false);
        if (j.is_discarded()) {
            fail(Errc::InvalidConfig, "config " + file.string() + " is not valid JSON");
        }
        return from_json(j, file.parent_path());
    }

    /// Fully resolved form; from_json(to_json()) round-trips.
    nlohmann::json to_json() const
    {
        nlohmann::json j;
        j["data"] = {{"bundle", data.bundle.string()},
                     {"split_seed", data.split_seed},
                     {"fractions", {{"train", data.fractions.train}, {"val", data.fractions.val}, {"test", data.fractions.test}}}};
        if (data.taxonomy) {
            j["data"]["taxonomy"] = data.taxonomy->string();
        }
        auto pairs = nlohmann::json::array();
        for (const auto& p : model.attention_pairs) {
            pairs.push_back({p.query, p.key_value});
        }
        j["model"] = {{"fusion", to_string(model.fusion)},
                      {"modalities", model.modalities},
                      {"late_width", model.late_width},
                      {"joint_layer", model.joint_layer},
                      {"joint_width", model.joint_width},
                      {"attention_dim", model.attention_dim},
                      {"attention_pairs", pairs}};
        const auto net = model.net.to_json();
        for (const auto& [k, v] : net.items()) {
            j["model"][k] = v;
        }
        j["train"] = train.to_json();
        const auto& o = recat.options;
        auto plan = nlohmann::json::array();
        for (const auto& p : o.depth_plan) {
            nlohmann::json step = {{"linkage", to_string(p.linkage)}};
            if (p.stop.count) {
                step["count"] = *p.stop.count;
            } else {
                step["threshold"] = *p.stop.threshold;
            }
            step["reducer"] = {{"method", p.reducer.method == ReducerMethod::Pca ? "pca" : "external"}, {"variance", p.reducer.variance}};
            if (p.reducer.dims) {
                step["reducer"]["dims"] = *p.reducer.dims;
            }
            plan.push_back(step);
        }
        j["recat"] = {{"target", recat.target},        {"modality", o.modality},   {"filter", o.filter},
                      {"filter_clusters", o.filter_clusters}, {"mad_multiplier", o.keep.mad_multiplier}, {"depth_plan", plan},
                      {"exemplars", o.exemplars},      {"seed", o.seed}};
        if (o.keep.threshold) {
            j["recat"]["filter_threshold"] = *o.keep.threshold;
        }
        if (o.external_coordinates) {
            j["recat"]["external_coordinates"] = o.external_coordinates->string();
        }
        if (recat.labels_file) {
            j["recat"]["labels_file"] = recat.labels_file->string();
        }
        j["cascade"] = {{"stage1", cascade.stage1.string()},
                        {"stage2", cascade.stage2.string()},
                        {"threshold", cascade.options.threshold},
                        {"confidence", to_string(cascade.options.confidence)},
                        {"sweep", cascade.sweep}};
        auto mods = nlohmann::json::array();
        for (const auto& m : synth.options.modalities) {
            nlohmann::json mj = {{"name", m.name}, {"dim", m.dim}};
            if (m.noise) {
                mj["noise"] = *m.noise;
            }
            mods.push_back(mj);
        }
        j["synth"] = {{"paths", synth.paths},
                      {"per_leaf", synth.options.per_leaf},
                      {"modalities", mods},
                      {"noise", synth.options.noise},
                      {"seed", synth.options.seed},
                      {"min_angle_deg", synth.options.min_angle_deg},
                      {"parent_weight", synth.options.parent_weight}};
        if (synth.taxonomy) {
            j["synth"]["taxonomy"] = synth.taxonomy->string();
        }
        return j;
    }
};

/// Fusion settings of the model section applied to the bundle's modalities.
inline FusionConfig fusion_from_model_section(const ModelSection& m, const EmbeddingBundle& bundle)
{
    const auto available = bundle_modalities(bundle);
    std::vector<ModalityInput> chosen;
    if (m.modalities.empty()) {
        chosen = available;
    } else {
        chosen = unimodal_config(available, m.modalities).modalities;
    }
    FusionConfig cfg;
    cfg.strategy = m.fusion;
    cfg.modalities = chosen;
    cfg.late_widths.assign(chosen.size(), m.late_width);
    cfg.joint_layer = m.joint_layer;
    cfg.joint_width = m.joint_width;
    cfg.attention_dim = m.attention_dim;
    cfg.attention_pairs = m.attention_pairs;
    cfg.canonicalize();
    return cfg;
}

} // namespace taxengine
