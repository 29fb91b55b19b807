#include "doctest.h"

#include "helpers.hpp"
#include "medt/checkpoint.hpp"
#include "medt/service.hpp"

#include <chrono>
#include <random>
#include <thread>

#include "httplib.h"

using namespace medt;
using namespace medt::service;
using nlohmann::json;

namespace {

model::LoadedModel as_loaded(const model::SequenceModel& m)
{
    return model::parse_checkpoint(model::serialize_checkpoint(m, {}));
}

Service make_service(int atg_tokens = 1)
{
    model::SequenceModel pol(testing::tiny_config(model::Variant::MeDT, atg_tokens), 1);
    std::mt19937_64 rng(2);
    for (auto& p : pol.params())
        if (p.name.find("head") != std::string::npos) p.value = nn::init_normal(p.value.shape(), 0.5, rng);
    auto pc = testing::tiny_config(model::Variant::StatePredictor);
    pc.residual_head = true;
    const model::SequenceModel pred(pc, 3);
    ServiceOptions o;
    o.patients = 5;
    o.patient_seed = 11;
    return Service(as_loaded(pol), as_loaded(pred), sim::SimConfig{}, o);
}

json prefix_json(int steps)
{
    const auto p = testing::prefix_of(testing::small_dataset().episodes[0], steps);
    return {{"states", p.states}, {"actions", p.actions}};
}

} // namespace

TEST_SUITE("service")
{
    TEST_CASE("health and patients")
    {
        auto s = make_service();
        const auto h = s.handle("GET", "/health", "");
        CHECK(h.status == 200);
        CHECK(h.body["status"] == "ok");
        CHECK(h.body["schema_version"] == 1);
        CHECK(h.body["models"]["policy"]["variant"] == "medt");
        CHECK(h.body["models"]["policy"]["checksum"].get<std::string>().size() == 16);
        const auto p = s.handle("GET", "/patients", "");
        CHECK(p.body["patients"].size() == 5);
        CHECK(p.body["patients"][0]["state"].size() == sim::kStateDim);
    }

    TEST_CASE("rollout matches the in-process rollout")
    {
        auto s = make_service();
        const auto r = s.handle("POST", "/rollout", R"({"patient_id": 2, "horizon": 6})");
        REQUIRE(r.status == 200);
        eval::RolloutOptions o;
        o.horizon = 6;
        const eval::ModelPredictor pred(s.predictor());
        const auto direct = eval::rollout(s.policy(), pred, s.patients()[2].state, s.sim_config().rubric, o);
        json expect = direct;
        CHECK(r.body["rollout"] == expect);
        CHECK(r.body["patient_id"] == 2);
    }

    TEST_CASE("rollout with an explicit state and schedule")
    {
        auto s = make_service();
        json req = {{"initial_state", s.patients()[0].state}, {"horizon", 2}, {"atg_schedule", {std::vector<double>(7, 1.0), std::vector<double>(7, 0.0)}}};
        const auto r = s.handle("POST", "/rollout", req.dump());
        REQUIRE(r.status == 200);
        CHECK(r.body["rollout"]["atg"][0][0] == 1.0);
    }

    TEST_CASE("horizon above ten is a domain error")
    {
        auto s = make_service();
        const auto r = s.handle("POST", "/rollout", R"({"patient_id": 0, "horizon": 11})");
        CHECK(r.status == 422);
        CHECK(r.body["error"]["field"] == "horizon");
        CHECK(r.body["schema_version"] == 1);
    }

    TEST_CASE("wrong ATG arity names the field")
    {
        auto s = make_service();
        json req = {{"prefix", prefix_json(2)}, {"atg", {std::vector<double>(7, 1.0), std::vector<double>(6, 1.0)}}};
        const auto r = s.handle("POST", "/recommend", req.dump());
        CHECK(r.status == 400);
        CHECK(r.body["error"]["field"] == "atg[1]");
        CHECK(r.body["error"]["code"] == "bad_request");
    }

    TEST_CASE("out-of-range ATG component is a domain error")
    {
        auto s = make_service();
        json req = {{"prefix", prefix_json(1)}, {"atg", {std::vector<double>{0, 0, 99, 0, 0, 0, 0}}}};
        const auto r = s.handle("POST", "/recommend", req.dump());
        CHECK(r.status == 422);
        CHECK(r.body["error"]["field"] == "atg[0][2]");
    }

    TEST_CASE("malformed requests")
    {
        auto s = make_service();
        CHECK(s.handle("POST", "/recommend", "{oops").status == 400);
        CHECK(s.handle("POST", "/recommend", "[1,2]").status == 400);
        CHECK(s.handle("POST", "/recommend", "{}").body["error"]["field"] == "prefix");
        CHECK(s.handle("POST", "/rollout", R"({"horizon": 3})").status == 400);
        CHECK(s.handle("POST", "/rollout", R"({"patient_id": 99})").status == 422);
        CHECK(s.handle("POST", "/rollout", R"({"patient_id": 0, "schema_version": 2})").status == 422);
        CHECK(s.handle("GET", "/nowhere", "").status == 404);
    }

    TEST_CASE("recommend returns a distribution and a dose")
    {
        auto s = make_service();
        json req = {{"prefix", prefix_json(3)}};
        const auto r = s.handle("POST", "/recommend", req.dump());
        REQUIRE(r.status == 200);
        CHECK(r.body["step"] == 2);
        double sum = 0.0;
        for (const auto& p : r.body["probabilities"]) sum += p.get<double>();
        CHECK(sum == doctest::Approx(1.0));
        const int a = r.body["action"]["index"];
        CHECK(r.body["action"]["iv"] == a / 5);
        CHECK(r.body["atg"].size() == 3);
    }

    TEST_CASE("explain returns a heatmap and ATG views")
    {
        auto s = make_service(7);
        json req = {{"prefix", prefix_json(3)}, {"normalization", "row_sum"}};
        const auto r = s.handle("POST", "/explain", req.dump());
        REQUIRE(r.status == 200);
        CHECK(r.body["heatmap"]["normalization"] == "row_sum");
        CHECK(r.body["atg_component_relevance"].size() == 7);
        CHECK(s.handle("POST", "/explain", json{{"prefix", prefix_json(2)}, {"step", 5}}.dump()).status == 422);
    }

    TEST_CASE("sessions keep ATG edits and an ordered history")
    {
        auto s = make_service();
        const auto c = s.handle("POST", "/sessions", R"({"patient_id": 1})");
        REQUIRE(c.status == 200);
        const std::string id = c.body["session"];
        json atg = {{"atg", std::vector<std::vector<double>>(3, std::vector<double>(7, 2.0))}};
        CHECK(s.handle("PUT", "/sessions/" + id + "/atg", atg.dump()).status == 200);
        const auto r1 = s.handle("POST", "/rollout", json{{"patient_id", 1}, {"horizon", 3}, {"session", id}}.dump());
        const auto r2 = s.handle("POST", "/rollout", json{{"patient_id", 1}, {"horizon", 2}, {"session", id}}.dump());
        CHECK(r1.body["attempt"] == 0);
        CHECK(r2.body["attempt"] == 1);
        CHECK(r1.body["rollout"]["atg"][0][0] == 2.0);
        const auto g = s.handle("GET", "/sessions/" + id, "");
        CHECK(g.body["history"].size() == 2);
        CHECK(g.body["patient_id"] == 1);
        CHECK(s.handle("GET", "/sessions/nope", "").status == 404);
    }

    TEST_CASE("HTTP round trip through a real server")
    {
        auto s = make_service();
        httplib::Server server;
        s.mount(server);
        const int port = server.bind_to_any_port("127.0.0.1");
        REQUIRE(port > 0);
        std::thread t([&] { server.listen_after_bind(); });
        server.wait_until_ready();
        httplib::Client client("127.0.0.1", port);
        const auto h = client.Get("/health");
        REQUIRE(h);
        CHECK(h->status == 200);
        CHECK(json::parse(h->body)["status"] == "ok");
        const auto r = client.Post("/rollout", R"({"patient_id": 0, "horizon": 11})", "application/json");
        REQUIRE(r);
        CHECK(r->status == 422);
        const auto ok = client.Post("/rollout", R"({"patient_id": 0, "horizon": 3})", "application/json");
        REQUIRE(ok);
        CHECK(json::parse(ok->body) == s.handle("POST", "/rollout", R"({"patient_id": 0, "horizon": 3})").body);
        server.stop();
        t.join();
    }
}
