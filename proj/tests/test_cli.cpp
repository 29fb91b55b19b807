#include "doctest.h"

#include "helpers.hpp"
#include "medt/checkpoint.hpp"
#include "medt/common.hpp"

#include <cstdlib>
#include <filesystem>
#include <sys/wait.h>

using namespace medt;
namespace fs = std::filesystem;

namespace {

fs::path scratch()
{
    const auto p = fs::temp_directory_path() / "medt_cli_test";
    fs::create_directories(p);
    return p;
}

int run(const std::string& args)
{
    const std::string cmd = std::string(MEDT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST_SUITE("cli")
{
    TEST_CASE("unknown flags and missing arguments exit with status 1")
    {
        CHECK(run("gen-data --bogus") == 1);
        CHECK(run("train") == 1);
        CHECK(run("nonsense") == 1);
        CHECK(run("rollout --policy x --oracle --horizon 11") == 1);
    }

    TEST_CASE("gen-data is byte-identical across runs")
    {
        const auto dir = scratch();
        const auto a = (dir / "a.json").string(), b = (dir / "b.json").string();
        REQUIRE(run("gen-data --seed 4 --episodes 25 --out " + a + " --run-dir " + (dir / "run_a").string()) == 0);
        REQUIRE(run("gen-data --seed 4 --episodes 25 --out " + b + " --run-dir " + (dir / "run_b").string()) == 0);
        CHECK(read_file(a) == read_file(b));
        const auto cfg = nlohmann::json::parse(read_file((dir / "run_a" / "config.json").string()));
        CHECK(cfg.contains("config_hash"));
        CHECK(cfg["seed"] == 4);
    }

    TEST_CASE("a bad config document exits with status 1")
    {
        const auto dir = scratch();
        const auto c = (dir / "bad.json").string();
        write_file(c, R"({"seed": 1, "sim": {"noize": 1}})");
        CHECK(run("gen-data --config " + c + " --run-dir " + (dir / "bad").string()) == 1);
    }

    TEST_CASE("ope echoes the requested discount")
    {
        const auto dir = scratch();
        const auto data = (dir / "ope_data.json").string();
        REQUIRE(run("gen-data --seed 2 --episodes 30 --out " + data + " --run-dir " + (dir / "g").string()) == 0);
        const model::SequenceModel m(testing::tiny_config(model::Variant::MeDT), 1);
        const auto ckpt = (dir / "medt.ckpt").string();
        model::save_checkpoint(m, {}, ckpt);
        const auto c = (dir / "ope_cfg.json").string();
        write_file(c, R"({"seed": 2, "eval": {"fqe_iterations": 3, "bootstrap_resamples": 5, "fqe_hidden": 8}})");
        const auto out = dir / "ope_run";
        fs::remove_all(out);
        REQUIRE(run("ope --config " + c + " --data " + data + " --policy " + ckpt + " --estimator wdr --gamma 0.99 --run-dir " + out.string()) == 0);
        const auto doc = nlohmann::json::parse(read_file((out / "ope.json").string()));
        CHECK(doc["gamma"] == 0.99);
        REQUIRE(doc["results"].size() == 1);
        CHECK(doc["results"][0]["estimator"] == "wdr");
        CHECK(doc["results"][0]["gamma"] == 0.99);
        CHECK(doc["results"][0]["bootstrap"]["resamples"] == 5);
    }

    TEST_CASE("oracle rollout and explain write their artifacts")
    {
        const auto dir = scratch();
        model::SequenceModel m(testing::tiny_config(model::Variant::MeDT), 1);
        std::mt19937_64 rng(1);
        for (auto& p : m.params())
            if (p.name.find("head") != std::string::npos) p.value = nn::init_normal(p.value.shape(), 0.5, rng);
        const auto ckpt = (dir / "medt_r.ckpt").string();
        model::save_checkpoint(m, {}, ckpt);
        const auto out = dir / "ro";
        fs::remove_all(out);
        CHECK(run("rollout --seed 1 --policy " + ckpt + " --oracle --horizon 4 --run-dir " + out.string()) == 0);
        const auto data = (dir / "ex_data.json").string();
        REQUIRE(run("gen-data --seed 3 --episodes 5 --out " + data + " --run-dir " + (dir / "g2").string()) == 0);
        const auto ex = dir / "ex";
        fs::remove_all(ex);
        CHECK(run("explain --seed 1 --policy " + ckpt + " --data " + data + " --episode 0 --step 2 --run-dir " + ex.string()) == 0);
        CHECK(fs::exists(ex / "heatmap.svg"));
        CHECK(fs::exists(ex / "explain.json"));
    }
}
