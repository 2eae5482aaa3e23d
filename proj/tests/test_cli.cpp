#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "oracles.hpp"
#include "support.hpp"

using namespace taxengine;
using namespace testing_support;

namespace {

nlohmann::json run_json(bool zero_noise)
{
    auto j = nlohmann::json::parse(R"({
        "synth": {"paths": ["R > a > a1", "R > a > a2", "R > b > b1", "R > b > b2", "R > c"],
                  "per_leaf": 12, "seed": 4,
                  "modalities": [{"name": "title", "dim": 8}, {"name": "image", "dim": 8}]},
        "data": {"bundle": "bundle", "split_seed": 2},
        "model": {"fusion": "late", "late_width": 16, "joint_width": 16, "trunk_width": 32, "head_width": 16},
        "train": {"learning_rate": 0.01, "max_epochs": 40, "seed": 3}
    })");
    j["synth"]["noise"] = zero_noise ? 0.0 : 0.1;
    return j;
}

/// Writes config.json into `dir` and generates its bundle.
RunConfig prepare(const TempDir& dir, bool zero_noise = true)
{
    auto j = run_json(zero_noise);
    std::ofstream(dir / "config.json") << j.dump(2);
    auto cfg = RunConfig::load(dir / "config.json");
    cmd_synth(cfg, dir / "bundle");
    return cfg;
}

int run_cli(const std::string& args, std::string* err = nullptr)
{
    TempDir tmp;
    const auto cmd = std::string(TAXENGINE_CLI_PATH) + " " + args + " > " + (tmp / "out").string() + " 2> " + (tmp / "err").string();
    const int status = std::system(cmd.c_str());
    if (err) {
        *err = slurp(tmp / "err");
    }
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST(Config, UnknownKeysRejected)
{
    EXPECT_EQ(code_of([] { RunConfig::from_json(nlohmann::json::parse(R"({"trian": {}})")); }), Errc::InvalidConfig);
    EXPECT_EQ(code_of([] { RunConfig::from_json(nlohmann::json::parse(R"({"train": {"epochs": 3}})")); }), Errc::InvalidConfig);
    EXPECT_EQ(code_of([] { RunConfig::from_json(nlohmann::json::parse(R"({"model": {"fusion": "deep"}})")); }), Errc::InvalidConfig);
}

TEST(Config, RoundTrip)
{
    const auto a = RunConfig::from_json(run_json(false));
    const auto b = RunConfig::from_json(a.to_json());
    EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
    EXPECT_EQ(a.train.max_epochs, 40u);
    EXPECT_EQ(a.model.fusion, FusionStrategy::Late);
}

TEST(Config, RelativePathsResolveAgainstConfig)
{
    TempDir dir;
    std::ofstream(dir / "c.json") << R"({"data": {"bundle": "b"}})";
    EXPECT_EQ(RunConfig::load(dir / "c.json").data.bundle, dir / "b");
}

TEST(Commands, ValidateSynthBundle)
{
    TempDir dir;
    prepare(dir);
    const auto report = cmd_validate(dir / "bundle");
    EXPECT_EQ(report.substr(0, 3), "OK\n");
    EXPECT_NE(report.find("records 60"), std::string::npos);
}

TEST(Commands, TrainEvalPredict)
{
    TempDir dir;
    const auto cfg = prepare(dir);
    const auto res = cmd_train(cfg, dir / "run");
    for (const auto& p : {res.checkpoint / "manifest.json", res.split, res.history, res.metrics}) {
        EXPECT_TRUE(std::filesystem::exists(p)) << p;
    }
    const auto eval = cmd_eval(res.checkpoint, dir / "bundle");
    EXPECT_EQ(eval["masked"]["hF1"].get<double>(), 1.0);
    EXPECT_EQ(eval["masked"]["valid_path_fraction"].get<double>(), 1.0);
    EXPECT_TRUE(eval.contains("unmasked"));
    std::ostringstream out;
    EXPECT_EQ(cmd_predict(res.checkpoint, dir / "bundle", out), 60u);
    const auto text = out.str();
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 60);
    const auto first = text.substr(0, text.find('\n'));
    EXPECT_EQ(std::count(first.begin(), first.end(), '\t'), 2);
}

TEST(Commands, TrainIsDeterministic)
{
    TempDir dir;
    auto cfg = prepare(dir, false);
    cfg.train.max_epochs = 5;
    const auto a = cmd_train(cfg, dir / "a");
    const auto b = cmd_train(cfg, dir / "b");
    EXPECT_EQ(slurp(a.metrics), slurp(b.metrics));
    EXPECT_EQ(slurp(a.history), slurp(b.history));
    for (const auto& entry : std::filesystem::directory_iterator(a.checkpoint)) {
        EXPECT_EQ(slurp(entry.path()), slurp(b.checkpoint / entry.path().filename())) << entry.path().filename();
    }
}

TEST(Commands, ExitCodes)
{
    EXPECT_EQ(exit_code(Errc::Io), 2);
    EXPECT_EQ(exit_code(Errc::InvalidConfig), 2);
    EXPECT_EQ(exit_code(Errc::LabelOutsideTaxonomy), 1);
}

TEST(Binary, MissingBundleExitsTwo)
{
    TempDir dir;
    std::ofstream(dir / "c.json") << R"({"data": {"bundle": "nowhere"}, "train": {"max_epochs": 1}})";
    std::string err;
    EXPECT_EQ(run_cli("train --config " + (dir / "c.json").string() + " --out " + (dir / "o").string(), &err), 2);
    EXPECT_NE(err.find("nowhere"), std::string::npos) << err;
}

TEST(Binary, ValidateAndUsage)
{
    TempDir dir;
    prepare(dir);
    EXPECT_EQ(run_cli("validate " + (dir / "bundle").string()), 0);
    EXPECT_EQ(run_cli("frobnicate"), 2);
    std::ofstream(dir / "bad.json") << R"({"model": {"widht": 3}})";
    std::string err;
    EXPECT_EQ(run_cli("train --config " + (dir / "bad.json").string(), &err), 2);
    EXPECT_NE(err.find("widht"), std::string::npos) << err;
}
