#include "medt/service.hpp"

#include "medt/common.hpp"
#include "medt/error.hpp"

#include <cmath>
#include <iostream>

#include "httplib.h"

namespace medt::service {

using nlohmann::json;

namespace {

RequestError bad(const std::string& field, const std::string& message) { return RequestError(400, field, message); }
RequestError domain(const std::string& field, const std::string& message) { return RequestError(422, field, message); }

const json& require(const json& obj, const std::string& key, const std::string& field)
{
    if (!obj.is_object() || !obj.contains(key)) throw bad(field, "missing required field '" + field + "'");
    return obj.at(key);
}

double number(const json& v, const std::string& field)
{
    if (!v.is_number()) throw bad(field, "'" + field + "' must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw bad(field, "'" + field + "' must be finite");
    return d;
}

int integer(const json& v, const std::string& field)
{
    if (!v.is_number_integer()) throw bad(field, "'" + field + "' must be an integer");
    return v.get<int>();
}

template <std::size_t N>
std::array<double, N> vec(const json& v, const std::string& field)
{
    if (!v.is_array()) throw bad(field, "'" + field + "' must be an array of " + std::to_string(N) + " numbers");
    if (v.size() != N) throw bad(field, "'" + field + "' must have " + std::to_string(N) + " entries, got " + std::to_string(v.size()));
    std::array<double, N> out{};
    for (std::size_t i = 0; i < N; ++i) out[i] = number(v[i], field + "[" + std::to_string(i) + "]");
    return out;
}

eval::AtgSchedule atg_list(const json& v, const std::string& field, const sim::AcuityRubric& rubric)
{
    if (!v.is_array()) throw bad(field, "'" + field + "' must be an array of 7-component vectors");
    eval::AtgSchedule out;
    for (std::size_t t = 0; t < v.size(); ++t) {
        const std::string f = field + "[" + std::to_string(t) + "]";
        const auto k = vec<sim::kOrgans>(v[t], f);
        for (std::size_t o = 0; o < k.size(); ++o) {
            if (k[o] < 0.0 || k[o] > rubric.max[o]) {
                throw domain(f + "[" + std::to_string(o) + "]", "acuity target for " + std::string(sim::organ_name(static_cast<int>(o))) +
                                                                    " must be within [0, " + std::to_string(rubric.max[o]) + "]");
            }
        }
        out.push_back(k);
    }
    return out;
}

json action_json(int index)
{
    const auto d = sim::DoseAction::from_index(index);
    return {{"index", index}, {"iv", d.iv}, {"vp", d.vp}};
}

json acuity_json(const sim::AcuityVector& a)
{
    return {{"components", a.components}, {"total", a.total()}};
}

/// Heuristic schedule for `steps` decisions starting from `start`.
eval::AtgSchedule default_atg(const sim::AcuityVector& start, int steps, double fraction)
{
    auto k = eval::linear_decay_schedule(start, eval::kDefaultHorizon, fraction);
    while (static_cast<int>(k.size()) < steps) k.push_back(k.back());
    k.resize(static_cast<std::size_t>(steps));
    return k;
}

json error_body(const std::string& code, const std::string& message, const std::string& field = {})
{
    json e = {{"code", code}, {"message", message}};
    if (!field.empty()) e["field"] = field;
    return {{"schema_version", kSchemaVersion}, {"error", e}};
}

} // namespace

Service::Service(model::LoadedModel policy, model::LoadedModel predictor, sim::SimConfig sim, ServiceOptions opts)
    : policy_(std::move(policy)), predictor_(std::move(predictor)), sim_(std::move(sim)), opts_(opts)
{
    if (policy_.model.config().variant == model::Variant::StatePredictor) throw ConfigError("service: policy checkpoint holds a state predictor");
    model_predictor_ = std::make_unique<eval::ModelPredictor>(predictor_.model);
    if (opts_.patients < 1) throw ConfigError("service: need at least one patient");
    const sim::Simulator simulator(sim_);
    for (int i = 0; i < opts_.patients; ++i) {
        sim::Rng rng(sim::derive_seed(opts_.patient_seed, static_cast<std::uint64_t>(i)));
        const auto s = simulator.initial_state(rng);
        patients_.push_back({i, s.features(), simulator.acuity(s)});
    }
}

json Service::health() const
{
    return {{"schema_version", kSchemaVersion},
            {"status", "ok"},
            {"code_version", std::string(kCodeVersion)},
            {"models",
             {{"policy", {{"variant", model::variant_name(policy_.model.config().variant)}, {"checksum", policy_.checksum}}},
              {"predictor", {{"variant", model::variant_name(predictor_.model.config().variant)}, {"checksum", predictor_.checksum}}}}}};
}

json Service::list_patients() const
{
    json list = json::array();
    for (const auto& p : patients_) list.push_back({{"id", p.id}, {"state", p.state}, {"acuity", acuity_json(p.acuity)}});
    return {{"schema_version", kSchemaVersion}, {"patients", list}};
}

model::Prefix Service::parse_prefix(const json& req) const
{
    const json& p = require(req, "prefix", "prefix");
    if (!p.is_object()) throw bad("prefix", "'prefix' must be an object");
    const json& states = require(p, "states", "prefix.states");
    if (!states.is_array() || states.empty()) throw bad("prefix.states", "'prefix.states' must be a non-empty array");
    model::Prefix prefix;
    prefix.rtg = 1.0;
    for (std::size_t t = 0; t < states.size(); ++t) prefix.states.push_back(vec<sim::kStateDim>(states[t], "prefix.states[" + std::to_string(t) + "]"));
    const int T = prefix.steps();
    if (T > policy_.model.config().context_steps) {
        throw domain("prefix.states", "prefix has " + std::to_string(T) + " steps; the model context is " +
                                          std::to_string(policy_.model.config().context_steps));
    }
    if (p.contains("actions")) {
        const json& a = p.at("actions");
        if (!a.is_array()) throw bad("prefix.actions", "'prefix.actions' must be an array");
        for (std::size_t t = 0; t < a.size(); ++t) {
            const std::string f = "prefix.actions[" + std::to_string(t) + "]";
            const int v = integer(a[t], f);
            if (v < 0 || v >= sim::kActions) throw domain(f, "action index must be within [0, 24]");
            prefix.actions.push_back(v);
        }
    }
    if (static_cast<int>(prefix.actions.size()) != T - 1) {
        throw bad("prefix.actions", "'prefix.actions' must have one entry fewer than 'prefix.states'");
    }
    if (policy_.model.layout().has(model::TokenType::Atg)) {
        if (req.contains("atg")) {
            prefix.atg = atg_list(req.at("atg"), "atg", sim_.rubric);
            if (static_cast<int>(prefix.atg.size()) != T) throw bad("atg", "'atg' must have one entry per prefix state");
        } else {
            prefix.atg = default_atg(sim_.rubric.score(sim::PatientState::from_features(prefix.states.front())), T, opts_.atg_fraction);
        }
    }
    return prefix;
}

json Service::recommend(const json& req) const
{
    const auto prefix = parse_prefix(req);
    const auto logits = policy_.model.action_logits(prefix).back();
    const auto chosen = model::select_action(logits, model::ArgmaxDecode{});
    json out = {{"schema_version", kSchemaVersion},
                {"step", prefix.steps() - 1},
                {"probabilities", model::softmax_probs(logits)},
                {"action", action_json(chosen.index())}};
    if (!prefix.atg.empty()) out["atg"] = prefix.atg;
    return out;
}

json Service::run_rollout(const json& req)
{
    if (!req.is_object()) throw bad("", "request body must be an object");
    model::StateVec s0{};
    std::optional<int> patient;
    if (req.contains("initial_state")) {
        s0 = vec<sim::kStateDim>(req.at("initial_state"), "initial_state");
    } else if (req.contains("patient_id")) {
        const int id = integer(req.at("patient_id"), "patient_id");
        if (id < 0 || id >= static_cast<int>(patients_.size())) throw domain("patient_id", "unknown patient " + std::to_string(id));
        s0 = patients_[static_cast<std::size_t>(id)].state;
        patient = id;
    } else {
        throw bad("initial_state", "one of 'initial_state' or 'patient_id' is required");
    }
    eval::RolloutOptions opts;
    opts.atg_fraction = opts_.atg_fraction;
    if (req.contains("horizon")) opts.horizon = integer(req.at("horizon"), "horizon");
    if (opts.horizon < 0 || opts.horizon > kMaxApiHorizon) throw domain("horizon", "horizon must be within [0, 10]");
    if (req.contains("atg_schedule")) {
        auto k = atg_list(req.at("atg_schedule"), "atg_schedule", sim_.rubric);
        if (static_cast<int>(k.size()) < opts.horizon) throw bad("atg_schedule", "'atg_schedule' needs at least 'horizon' entries");
        opts.atg = std::move(k);
    }
    if (req.contains("sample")) {
        const json& s = req.at("sample");
        if (!s.is_object()) throw bad("sample", "'sample' must be an object");
        model::SampleDecode d;
        d.seed = s.contains("seed") ? static_cast<std::uint64_t>(integer(s.at("seed"), "sample.seed")) : 0;
        d.temperature = s.contains("temperature") ? number(s.at("temperature"), "sample.temperature") : 1.0;
        if (!(d.temperature > 0.0)) throw domain("sample.temperature", "temperature must be > 0");
        opts.sample = d;
    }
    std::string session;
    if (req.contains("session")) {
        if (!req.at("session").is_string()) throw bad("session", "'session' must be a string");
        session = req.at("session").get<std::string>();
        std::lock_guard lock(sessions_mutex_);
        if (!sessions_.count(session)) throw domain("session", "unknown session '" + session + "'");
        // Stored ATG edits apply when the request carries no schedule.
        const auto& st = sessions_.at(session);
        if (!opts.atg && static_cast<int>(st.atg.size()) >= opts.horizon && !st.atg.empty()) opts.atg = st.atg;
    }

    const auto result = eval::rollout(policy_.model, *model_predictor_, s0, sim_.rubric, opts);
    json out = {{"schema_version", kSchemaVersion},
                {"policy", model::variant_name(policy_.model.config().variant)},
                {"options", opts},
                {"rollout", result}};
    if (patient) out["patient_id"] = *patient;
    if (!session.empty()) {
        std::lock_guard lock(sessions_mutex_);
        auto& st = sessions_.at(session);
        out["attempt"] = st.history.size();
        st.history.push_back({{"request", req}, {"response", out}});
    }
    return out;
}

json Service::explain(const json& req) const
{
    const auto prefix = parse_prefix(req);
    interp::ExplainOptions eo;
    if (req.contains("step")) {
        eo.step = integer(req.at("step"), "step");
        if (*eo.step < 0 || *eo.step >= prefix.steps()) throw domain("step", "step must index a prefix state");
    }
    if (req.contains("action")) {
        eo.action = integer(req.at("action"), "action");
        if (*eo.action < 0 || *eo.action >= sim::kActions) throw domain("action", "action index must be within [0, 24]");
    }
    if (req.contains("normalization")) {
        if (!req.at("normalization").is_string()) throw bad("normalization", "'normalization' must be a string");
        try {
            eo.normalization = interp::parse_normalization(req.at("normalization").get<std::string>());
        } catch (const ConfigError& e) {
            throw domain("normalization", e.what());
        }
    }
    const auto map = interp::explain(policy_.model, prefix, eo);
    json out = {{"schema_version", kSchemaVersion}, {"heatmap", map}};
    if (policy_.model.layout().has(model::TokenType::Atg)) {
        out["atg_step_relevance"] = interp::atg_step_relevance(policy_.model, map);
        if (policy_.model.layout().atg_tokens == sim::kOrgans) out["atg_component_relevance"] = interp::atg_component_relevance(policy_.model, map);
    }
    return out;
}

json Service::create_session(const json& req)
{
    SessionState st;
    if (req.is_object() && req.contains("patient_id")) {
        const int id = integer(req.at("patient_id"), "patient_id");
        if (id < 0 || id >= static_cast<int>(patients_.size())) throw domain("patient_id", "unknown patient " + std::to_string(id));
        st.patient = id;
    }
    std::lock_guard lock(sessions_mutex_);
    st.id = "s" + std::to_string(next_session_++);
    sessions_[st.id] = st;
    json out = {{"schema_version", kSchemaVersion}, {"session", st.id}};
    if (st.patient) out["patient_id"] = *st.patient;
    return out;
}

json Service::get_session(const std::string& id) const
{
    std::lock_guard lock(sessions_mutex_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw RequestError(404, "session", "unknown session '" + id + "'");
    const auto& st = it->second;
    json out = {{"schema_version", kSchemaVersion}, {"session", st.id}, {"atg", st.atg}, {"history", st.history}};
    out["patient_id"] = st.patient ? json(*st.patient) : json(nullptr);
    return out;
}

json Service::set_session_atg(const std::string& id, const json& req)
{
    auto k = atg_list(require(req, "atg", "atg"), "atg", sim_.rubric);
    if (static_cast<int>(k.size()) > kMaxApiHorizon) throw domain("atg", "schedule longer than the horizon cap of 10");
    std::lock_guard lock(sessions_mutex_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw RequestError(404, "session", "unknown session '" + id + "'");
    it->second.atg = std::move(k);
    return {{"schema_version", kSchemaVersion}, {"session", id}, {"atg", it->second.atg}};
}

Response Service::handle(const std::string& method, const std::string& path, const std::string& body)
{
    try {
        json req = json::object();
        if (method == "POST" || method == "PUT") {
            try {
                req = body.empty() ? json::object() : json::parse(body);
            } catch (const json::parse_error&) {
                throw bad("", "request body is not valid JSON");
            }
            if (!req.is_object()) throw bad("", "request body must be an object");
            if (req.contains("schema_version") && req.at("schema_version") != kSchemaVersion) {
                throw domain("schema_version", "unsupported schema_version; this service speaks " + std::to_string(kSchemaVersion));
            }
        }
        const std::string sessions = "/sessions/";
        if (method == "GET" && path == "/health") return {200, health()};
        if (method == "GET" && path == "/patients") return {200, list_patients()};
        if (method == "POST" && path == "/recommend") return {200, recommend(req)};
        if (method == "POST" && path == "/rollout") return {200, run_rollout(req)};
        if (method == "POST" && path == "/explain") return {200, explain(req)};
        if (method == "POST" && path == "/sessions") return {200, create_session(req)};
        if (path.rfind(sessions, 0) == 0) {
            std::string rest = path.substr(sessions.size());
            const auto slash = rest.find('/');
            if (method == "GET" && slash == std::string::npos) return {200, get_session(rest)};
            if (method == "PUT" && slash != std::string::npos && rest.substr(slash) == "/atg") return {200, set_session_atg(rest.substr(0, slash), req)};
        }
        return {404, error_body("not_found", "no route for " + method + " " + path)};
    } catch (const RequestError& e) {
        const std::string code = e.status() == 400 ? "bad_request" : (e.status() == 404 ? "not_found" : "domain_error");
        return {e.status(), error_body(code, e.what(), e.field())};
    } catch (const DomainError& e) {
        return {422, error_body("domain_error", e.what())};
    } catch (const std::exception& e) {
        std::cerr << "medt service: internal error on " << method << ' ' << path << ": " << e.what() << '\n';
        return {500, error_body("internal", "internal error")};
    }
}

void Service::mount(httplib::Server& server)
{
    auto forward = [this](const httplib::Request& req, httplib::Response& res) {
        const auto r = handle(req.method, req.path, req.body);
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    };
    server.Get("/health", forward);
    server.Get("/patients", forward);
    server.Post("/recommend", forward);
    server.Post("/rollout", forward);
    server.Post("/explain", forward);
    server.Post("/sessions", forward);
    server.Get(R"(/sessions/[^/]+)", forward);
    server.Put(R"(/sessions/[^/]+/atg)", forward);
}

void run_server(Service& s, const std::string& host, int port)
{
    httplib::Server server;
    s.mount(server);
    if (!server.listen(host, port)) throw IoError("serve: cannot listen on " + host + ":" + std::to_string(port));
}

} // namespace medt::service
