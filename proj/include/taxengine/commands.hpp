#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "taxengine/bundle.hpp"
#include "taxengine/cascade.hpp"
#include "taxengine/config.hpp"
#include "taxengine/evaluation.hpp"
#include "taxengine/hiermodel.hpp"
#include "taxengine/log.hpp"
#include "taxengine/recategorize.hpp"
#include "taxengine/split.hpp"
#include "taxengine/synthetic.hpp"

namespace taxengine {

/// Usage, configuration and I/O problems exit 2; data and validation errors exit 1.
inline int exit_code(Errc code) noexcept
{
    switch (code) {
    case Errc::Io:
    case Errc::InvalidConfig: return 2;
    default: return 1;
    }
}

namespace detail {

inline void ensure_dir(const std::filesystem::path& dir)
{
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        fail(Errc::Io, "cannot create " + dir.string());
    }
}

inline void write_json(const std::filesystem::path& file, const nlohmann::json& j)
{
    std::ofstream out(file, std::ios::binary);
    if (!out) {
        fail(Errc::Io, "cannot write " + file.string());
    }
    out << j.dump(2) << '\n';
}

inline EmbeddingBundle load_run_bundle(const DataSection& data)
{
    if (data.bundle.empty()) {
        fail(Errc::InvalidConfig, "config has no data.bundle");
    }
    if (!std::filesystem::exists(data.bundle / "manifest.json")) {
        fail(Errc::Io, "bundle " + data.bundle.string() + " does not exist");
    }
    auto bundle = load_bundle(data.bundle);
    if (data.taxonomy) {
        bundle.taxonomy = Taxonomy::load(*data.taxonomy);
        bundle.check();
    }
    return bundle;
}

inline EmbeddingBundle load_run_bundle(const std::filesystem::path& dir)
{
    DataSection data;
    data.bundle = dir;
    return load_run_bundle(data);
}

inline std::vector<std::size_t> all_indices(std::size_t n)
{
    std::vector<std::size_t> v(n);
    for (std::size_t i = 0; i < n; ++i) {
        v[i] = i;
    }
    return v;
}

inline void log_config(const RunConfig& cfg)
{
    log::info("resolved config " + cfg.to_json().dump());
}

} // namespace detail

struct TrainOutputs {
    std::filesystem::path checkpoint;
    std::filesystem::path split;
    std::filesystem::path history;
    std::filesystem::path metrics;
    nlohmann::json metrics_json;
};

/// Writes checkpoint/, split.tsv, history.json and metrics.json (test split,
/// masking on and off) under `out`.
inline TrainOutputs cmd_train(const RunConfig& cfg, const std::filesystem::path& out)
{
    detail::log_config(cfg);
    const auto bundle = detail::load_run_bundle(cfg.data);
    const auto split = stratified_split(bundle, cfg.data.fractions, cfg.data.split_seed);
    auto model = build_model(bundle.taxonomy, fusion_from_model_section(cfg.model, bundle), cfg.train.seed, cfg.model.net);
    const auto history = train(model, bundle, split, cfg.train);

    detail::ensure_dir(out);
    TrainOutputs res{out / "checkpoint", out / "split.tsv", out / "history.json", out / "metrics.json", {}};
    model.save(res.checkpoint, {{"train", cfg.train.to_json()}, {"split_seed", cfg.data.split_seed}});
    split.save(res.split, bundle.ids);
    detail::write_json(res.history, history.to_json());

    const auto test = split.indices(Split::Test);
    HierModel unmasked = model;
    unmasked.set_masking(false);
    res.metrics_json = {{"split", "test"},
                        {"best_epoch", history.best_epoch},
                        {"masked", evaluate_model(model, bundle, test).report.to_json()},
                        {"unmasked", evaluate_model(unmasked, bundle, test).report.to_json()}};
    detail::write_json(res.metrics, res.metrics_json);
    return res;
}

/// Scores every bundle record. `mask` picks one mode; unset reports both.
inline nlohmann::json cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& bundle_dir, std::optional<bool> mask = {})
{
    auto model = HierModel::load(checkpoint);
    const auto bundle = detail::load_run_bundle(bundle_dir);
    const auto idx = detail::all_indices(bundle.size());
    nlohmann::json j;
    for (const bool on : {true, false}) {
        if (mask && *mask != on) {
            continue;
        }
        model.set_masking(on);
        j[on ? "masked" : "unmasked"] = evaluate_model(model, bundle, idx).report.to_json();
    }
    return j;
}

/// `record_id TAB path TAB path_confidence`, one line per record.
inline std::size_t cmd_predict(const std::filesystem::path& checkpoint, const std::filesystem::path& bundle_dir, std::ostream& out,
                               bool mask = true)
{
    auto model = HierModel::load(checkpoint);
    model.set_masking(mask);
    const auto bundle = detail::load_run_bundle(bundle_dir);
    const auto preds = predict(model, bundle);
    char conf[32];
    for (std::size_t i = 0; i < preds.size(); ++i) {
        std::snprintf(conf, sizeof conf, "%.9g", preds[i].path_confidence);
        out << bundle.ids[i] << '\t' << preds[i].path.join() << '\t' << conf << '\n';
    }
    return preds.size();
}

/// Without recat.labels_file: cluster and write clusters.tsv for labeling.
/// With it: graft the labeled clusters and write bundle/ and taxonomy.txt.
inline nlohmann::json cmd_recat(const RunConfig& cfg, const std::filesystem::path& out)
{
    detail::log_config(cfg);
    const auto bundle = detail::load_run_bundle(cfg.data);
    const auto target = parse_path(cfg.recat.target);
    auto disc = discover_subcategories(bundle, target, cfg.recat.options);
    detail::ensure_dir(out);
    nlohmann::json j;
    j["target"] = target.join();
    j["members"] = disc.members.size();
    j["clustered"] = disc.tree.root().members.size();
    j["clusters"] = disc.tree.nodes.size() - 1;
    const auto root_label = bundle.taxonomy.node(disc.target).name;
    if (!cfg.recat.labels_file) {
        export_clusters(disc.tree, out / "clusters.tsv", bundle.ids, root_label);
        j["labels_file"] = (out / "clusters.tsv").string();
        j["status"] = "awaiting_labels";
        return j;
    }
    disc.tree = import_labels(std::move(disc.tree), *cfg.recat.labels_file, root_label);
    const auto res = apply_subcategories(bundle, disc);
    save_bundle(res.bundle, out / "bundle");
    res.taxonomy.save(out / "taxonomy.txt");
    j["status"] = "grafted";
    j["relabeled"] = res.relabeled;
    j["grafted"] = nlohmann::json::array();
    for (const auto& p : res.grafted) {
        j["grafted"].push_back(p.join());
    }
    detail::write_json(out / "recat.json", j);
    return j;
}

/// Writes cascade.json, plus sweep.csv when a sweep grid is configured.
inline CascadeReport cmd_cascade(const RunConfig& cfg, const std::filesystem::path& out)
{
    detail::log_config(cfg);
    auto stage1 = HierModel::load(cfg.cascade.stage1);
    auto stage2 = HierModel::load(cfg.cascade.stage2);
    const auto bundle = detail::load_run_bundle(cfg.data);
    const auto idx = detail::all_indices(bundle.size());
    auto rep = run_cascade(stage1, stage2, bundle, idx, cfg.cascade.options);
    detail::ensure_dir(out);
    auto j = rep.to_json();
    j["metrics"] = score_cascade(rep, bundle, idx).to_json();
    detail::write_json(out / "cascade.json", j);
    if (!cfg.cascade.sweep.empty()) {
        const auto rows = sweep_threshold(stage1, stage2, bundle, idx, cfg.cascade.sweep, cfg.cascade.options.confidence);
        std::ofstream csv(out / "sweep.csv", std::ios::binary);
        write_sweep_csv(csv, rows);
    }
    return rep;
}

/// Generates a synthetic bundle into `out`.
inline EmbeddingBundle cmd_synth(const RunConfig& cfg, const std::filesystem::path& out)
{
    detail::log_config(cfg);
    Taxonomy tax;
    if (cfg.synth.taxonomy) {
        tax = Taxonomy::load(*cfg.synth.taxonomy);
    } else if (!cfg.synth.paths.empty()) {
        std::vector<CategoryPath> paths;
        for (const auto& p : cfg.synth.paths) {
            paths.push_back(parse_path(p));
        }
        tax = Taxonomy::build(paths);
    } else {
        fail(Errc::InvalidConfig, "synth needs a taxonomy file or inline paths");
    }
    auto ds = generate_synthetic(tax, cfg.synth.options);
    save_bundle(ds.bundle, out);
    return std::move(ds.bundle);
}

/// Loads and fully checks a bundle; the report's first line is "OK".
inline std::string cmd_validate(const std::filesystem::path& bundle_dir)
{
    const auto bundle = load_bundle(bundle_dir);
    std::ostringstream os;
    os << "OK\n";
    os << "records " << bundle.size() << '\n';
    os << "taxonomy nodes " << bundle.taxonomy.size() << " depth " << bundle.taxonomy.max_depth() << '\n';
    for (const auto& m : bundle.modalities) {
        os << "modality " << m.name << " dim " << m.values.cols() << '\n';
    }
    return os.str();
}

} // namespace taxengine
