#pragma once

#include "medt/checkpoint.hpp"
#include "medt/error.hpp"
#include "medt/interpret.hpp"
#include "medt/rollout.hpp"
#include "medt/sim.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace httplib {
class Server;
}

namespace medt::service {

inline constexpr int kSchemaVersion = 1;
inline constexpr int kMaxApiHorizon = 10;

/// Field-level request failure; status is 400 (malformed) or 422 (domain).
class RequestError : public Error {
public:
    RequestError(int status, std::string field, const std::string& message)
        : Error(message), status_(status), field_(std::move(field)) {}
    int status() const { return status_; }
    const std::string& field() const { return field_; }

private:
    int status_;
    std::string field_;
};

struct Patient {
    int id = 0;
    model::StateVec state{};
    sim::AcuityVector acuity;
};

/// Per-console session: the loaded patient, ATG edits and the ordered
/// what-if attempts. History is append-only.
struct SessionState {
    std::string id;
    std::optional<int> patient;
    eval::AtgSchedule atg;
    std::vector<nlohmann::json> history;
};

struct ServiceOptions {
    int patients = 20;
    std::uint64_t patient_seed = 0;
    double atg_fraction = 0.0;
};

struct Response {
    int status = 200;
    nlohmann::json body;
};

/// Frozen policy and predictor behind the JSON API. Handlers only read the
/// models; sessions are guarded by their own lock.
class Service {
public:
    Service(model::LoadedModel policy, model::LoadedModel predictor, sim::SimConfig sim, ServiceOptions opts = {});

    Response handle(const std::string& method, const std::string& path, const std::string& body);

    const std::vector<Patient>& patients() const { return patients_; }
    const model::SequenceModel& policy() const { return policy_.model; }
    const model::SequenceModel& predictor() const { return predictor_.model; }
    const sim::SimConfig& sim_config() const { return sim_; }

    /// Routes every endpoint to handle().
    void mount(httplib::Server& server);

private:
    nlohmann::json health() const;
    nlohmann::json list_patients() const;
    nlohmann::json recommend(const nlohmann::json& req) const;
    nlohmann::json run_rollout(const nlohmann::json& req);
    nlohmann::json explain(const nlohmann::json& req) const;
    nlohmann::json create_session(const nlohmann::json& req);
    nlohmann::json get_session(const std::string& id) const;
    nlohmann::json set_session_atg(const std::string& id, const nlohmann::json& req);

    model::Prefix parse_prefix(const nlohmann::json& req) const;

    model::LoadedModel policy_;
    model::LoadedModel predictor_;
    sim::SimConfig sim_;
    ServiceOptions opts_;
    std::vector<Patient> patients_;
    std::unique_ptr<eval::ModelPredictor> model_predictor_;

    mutable std::mutex sessions_mutex_;
    std::map<std::string, SessionState> sessions_;
    std::uint64_t next_session_ = 1;
};

/// Blocks serving on host:port until the server is stopped.
void run_server(Service& s, const std::string& host, int port);

} // namespace medt::service
