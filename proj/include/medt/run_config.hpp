#pragma once

#include "medt/sim.hpp"
#include "medt/training.hpp"

#include <cstdint>
#include <string>

#include "json.hpp"

namespace medt::cfg {

struct EvalConfig {
    int eval_states = 500;
    int horizon = 10;
    double atg_fraction = 0.0;
    double gamma = 0.99;
    int bootstrap_resamples = 50;
    /// "exact" (logged probabilities) or "estimated" (BC softmax).
    std::string behavior = "exact";
    int fqe_iterations = 50;
    int fqe_hidden = 64;
    int mc_episodes = 2000;
    std::string normalization = "receptive_field";

    void validate() const;
};

struct ServeConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string policy;    ///< checkpoint path
    std::string predictor; ///< checkpoint path
    int patients = 20;
    double atg_fraction = 0.0;

    void validate() const;
};

/// Declarative run document: {seed, sim, train, eval, serve}. `sim` also
/// carries `episodes`, the dataset size.
struct RunConfig {
    std::uint64_t seed = 0;
    sim::SimConfig sim;
    int episodes = 5000;
    train::TrainConfig train;
    EvalConfig eval;
    ServeConfig serve;

    void validate() const;
};

void to_json(nlohmann::json& j, const EvalConfig& c);
void to_json(nlohmann::json& j, const ServeConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);

/// Rejects unknown keys in every section; `seed` is mandatory.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

/// Hash of the fully resolved document.
std::string config_hash(const RunConfig& c);

} // namespace medt::cfg
