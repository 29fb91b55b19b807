#include "doctest.h"

#include "medt/common.hpp"
#include "medt/error.hpp"
#include "medt/run_config.hpp"

#include <filesystem>

using namespace medt;
using namespace medt::cfg;
using nlohmann::json;

TEST_SUITE("run_config")
{
    TEST_CASE("seed is mandatory")
    {
        CHECK_THROWS_AS(parse_run_config(json::object()), ConfigError);
        CHECK(parse_run_config({{"seed", 5}}).seed == 5);
    }

    TEST_CASE("unknown keys are rejected in every section")
    {
        CHECK_THROWS_AS(parse_run_config({{"seed", 1}, {"extra", 1}}), ConfigError);
        CHECK_THROWS_AS(parse_run_config({{"seed", 1}, {"sim", {{"noize", 0.1}}}}), ConfigError);
        CHECK_THROWS_AS(parse_run_config({{"seed", 1}, {"train", {{"lr", 0.1}}}}), ConfigError);
        CHECK_THROWS_AS(parse_run_config({{"seed", 1}, {"eval", {{"horizn", 3}}}}), ConfigError);
        CHECK_THROWS_AS(parse_run_config({{"seed", 1}, {"serve", {{"prt", 3}}}}), ConfigError);
    }

    TEST_CASE("sections overlay the defaults")
    {
        const auto c = parse_run_config({{"seed", 9},
                                         {"sim", {{"episodes", 300}, {"noise", 0.05}}},
                                         {"train", {{"epochs", 4}}},
                                         {"eval", {{"horizon", 6}}},
                                         {"serve", {{"port", 9000}}}});
        CHECK(c.episodes == 300);
        CHECK(c.sim.noise == 0.05);
        CHECK(c.sim.max_horizon == sim::SimConfig{}.max_horizon);
        CHECK(c.train.epochs == 4);
        CHECK(c.train.seed == 9);
        CHECK(c.eval.horizon == 6);
        CHECK(c.eval.gamma == 0.99);
        CHECK(c.serve.port == 9000);
    }

    TEST_CASE("out-of-range values fail validation")
    {
        CHECK_THROWS_AS(parse_run_config({{"seed", 1}, {"eval", {{"horizon", 11}}}}), ConfigError);
        CHECK_THROWS_AS(parse_run_config({{"seed", 1}, {"eval", {{"behavior", "guess"}}}}), ConfigError);
    }

    TEST_CASE("hash is stable and sensitive to content")
    {
        const auto a = parse_run_config({{"seed", 1}});
        const auto b = parse_run_config({{"seed", 1}});
        const auto c = parse_run_config({{"seed", 2}});
        CHECK(config_hash(a) == config_hash(b));
        CHECK(config_hash(a) != config_hash(c));
        CHECK(config_hash(a).size() == 16);
        json j = a;
        CHECK(config_hash(parse_run_config(j)) == config_hash(a));
    }

    TEST_CASE("load from file")
    {
        const auto path = (std::filesystem::temp_directory_path() / "medt_run_config.json").string();
        write_file(path, R"({"seed": 3, "eval": {"eval_states": 10}})");
        CHECK(load_run_config(path).eval.eval_states == 10);
        write_file(path, "{bad");
        CHECK_THROWS_AS(load_run_config(path), ConfigError);
        std::filesystem::remove(path);
    }
}
