#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "taxengine/taxengine.hpp"

namespace {

using namespace taxengine;

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    std::optional<double> threshold;
    std::string mask;
    std::string checkpoint;
    std::string bundle;
};

RunConfig load_config(const Flags& f)
{
    if (f.config.empty()) {
        fail(Errc::InvalidConfig, "--config is required");
    }
    auto cfg = RunConfig::load(f.config);
    if (f.seed) {
        cfg.train.seed = *f.seed;
        cfg.synth.options.seed = *f.seed;
        cfg.recat.options.seed = *f.seed;
    }
    if (f.threshold) {
        cfg.cascade.options.threshold = *f.threshold;
        cfg.cascade.options.check();
    }
    return cfg;
}

std::optional<bool> mask_flag(const std::string& m)
{
    if (m.empty()) return std::nullopt;
    if (m == "on") return true;
    if (m == "off") return false;
    fail(Errc::InvalidConfig, "--mask takes on|off");
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"taxonomy-aware hierarchical product categorization"};
    app.require_subcommand(1);
    Flags f;

    auto* train = app.add_subcommand("train", "train a model; writes checkpoint, split, history and metrics");
    auto* eval = app.add_subcommand("eval", "score a checkpoint on a bundle");
    auto* predict = app.add_subcommand("predict", "write record_id, path, confidence rows");
    auto* recat = app.add_subcommand("recat", "discover and graft subcategories");
    auto* cascade = app.add_subcommand("cascade", "two-stage routed inference");
    auto* synth = app.add_subcommand("synth", "generate a synthetic bundle");
    auto* validate = app.add_subcommand("validate", "check a bundle directory");

    for (auto* sub : {train, recat, cascade, synth}) {
        sub->add_option("--config", f.config, "JSON run config")->required();
        sub->add_option("--seed", f.seed, "override the config seeds");
        sub->add_option("--out", f.out, "output directory");
    }
    cascade->add_option("--threshold", f.threshold, "stage-1 confidence threshold in [0, 1]");
    for (auto* sub : {eval, predict}) {
        sub->add_option("checkpoint", f.checkpoint, "checkpoint directory")->required();
        sub->add_option("bundle", f.bundle, "bundle directory")->required();
        sub->add_option("--mask", f.mask, "dynamic masking on|off");
    }
    validate->add_option("bundle", f.bundle, "bundle directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (train->parsed()) {
            const auto res = cmd_train(load_config(f), f.out);
            std::cout << res.metrics_json.dump(2) << '\n';
        } else if (eval->parsed()) {
            std::cout << cmd_eval(f.checkpoint, f.bundle, mask_flag(f.mask)).dump(2) << '\n';
        } else if (predict->parsed()) {
            cmd_predict(f.checkpoint, f.bundle, std::cout, mask_flag(f.mask).value_or(true));
        } else if (recat->parsed()) {
            std::cout << cmd_recat(load_config(f), f.out).dump(2) << '\n';
        } else if (cascade->parsed()) {
            const auto rep = cmd_cascade(load_config(f), f.out);
            std::cout << rep.to_json(false).dump(2) << '\n';
        } else if (synth->parsed()) {
            const auto bundle = cmd_synth(load_config(f), f.out);
            std::cout << "wrote " << bundle.size() << " records to " << f.out << '\n';
        } else if (validate->parsed()) {
            std::cout << cmd_validate(f.bundle);
        }
    } catch (const Error& e) {
        std::cerr << "taxengine: " << errc_name(e.code()) << ": " << e.what() << '\n';
        return exit_code(e.code());
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "taxengine: config: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "taxengine: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
