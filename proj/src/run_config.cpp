#include "medt/run_config.hpp"

#include "medt/common.hpp"
#include "medt/error.hpp"

namespace medt::cfg {

using nlohmann::json;

void EvalConfig::validate() const
{
    if (eval_states < 1) throw ConfigError("eval.eval_states must be >= 1");
    if (horizon < 0 || horizon > 10) throw ConfigError("eval.horizon must be in [0, 10]");
    if (atg_fraction < 0.0) throw ConfigError("eval.atg_fraction must be >= 0");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("eval.gamma must be in [0, 1]");
    if (bootstrap_resamples < 2) throw ConfigError("eval.bootstrap_resamples must be >= 2");
    if (behavior != "exact" && behavior != "estimated") throw ConfigError("eval.behavior must be 'exact' or 'estimated'");
    if (fqe_iterations < 1 || fqe_hidden < 1) throw ConfigError("eval.fqe_iterations and eval.fqe_hidden must be >= 1");
    if (mc_episodes < 1) throw ConfigError("eval.mc_episodes must be >= 1");
    if (normalization != "receptive_field" && normalization != "row_sum") throw ConfigError("eval.normalization must be 'receptive_field' or 'row_sum'");
}

void ServeConfig::validate() const
{
    if (port < 0 || port > 65535) throw ConfigError("serve.port out of range");
    if (patients < 1) throw ConfigError("serve.patients must be >= 1");
    if (atg_fraction < 0.0) throw ConfigError("serve.atg_fraction must be >= 0");
}

void RunConfig::validate() const
{
    sim.validate();
    if (episodes < 1) throw ConfigError("sim.episodes must be >= 1");
    train.validate();
    eval.validate();
    serve.validate();
}

void to_json(json& j, const EvalConfig& c)
{
    j = {{"eval_states", c.eval_states},
         {"horizon", c.horizon},
         {"atg_fraction", c.atg_fraction},
         {"gamma", c.gamma},
         {"bootstrap_resamples", c.bootstrap_resamples},
         {"behavior", c.behavior},
         {"fqe_iterations", c.fqe_iterations},
         {"fqe_hidden", c.fqe_hidden},
         {"mc_episodes", c.mc_episodes},
         {"normalization", c.normalization}};
}

void to_json(json& j, const ServeConfig& c)
{
    j = {{"host", c.host}, {"port", c.port}, {"policy", c.policy}, {"predictor", c.predictor}, {"patients", c.patients}, {"atg_fraction", c.atg_fraction}};
}

void to_json(json& j, const RunConfig& c)
{
    json sim = c.sim;
    sim["episodes"] = c.episodes;
    j = {{"seed", c.seed}, {"sim", sim}, {"train", c.train}, {"eval", c.eval}, {"serve", c.serve}};
}

namespace {

/// Keys of `j` must be a subset of the keys of `defaults`.
void reject_unknown(const json& j, const json& defaults, const std::string& section)
{
    if (!j.is_object()) throw ConfigError(section + ": expected an object");
    for (const auto& [k, v] : j.items()) {
        if (!defaults.contains(k)) throw ConfigError(section + ": unknown key '" + k + "'");
    }
}

/// Defaults overlaid with `j`, then converted back.
template <class T>
T overlay(const json& j, const T& defaults)
{
    json merged = defaults;
    merged.update(j);
    return merged.get<T>();
}

EvalConfig eval_from(const json& j)
{
    EvalConfig c;
    c.eval_states = j.value("eval_states", c.eval_states);
    c.horizon = j.value("horizon", c.horizon);
    c.atg_fraction = j.value("atg_fraction", c.atg_fraction);
    c.gamma = j.value("gamma", c.gamma);
    c.bootstrap_resamples = j.value("bootstrap_resamples", c.bootstrap_resamples);
    c.behavior = j.value("behavior", c.behavior);
    c.fqe_iterations = j.value("fqe_iterations", c.fqe_iterations);
    c.fqe_hidden = j.value("fqe_hidden", c.fqe_hidden);
    c.mc_episodes = j.value("mc_episodes", c.mc_episodes);
    c.normalization = j.value("normalization", c.normalization);
    return c;
}

ServeConfig serve_from(const json& j)
{
    ServeConfig c;
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    c.policy = j.value("policy", c.policy);
    c.predictor = j.value("predictor", c.predictor);
    c.patients = j.value("patients", c.patients);
    c.atg_fraction = j.value("atg_fraction", c.atg_fraction);
    return c;
}

} // namespace

RunConfig parse_run_config(const json& j)
{
    if (!j.is_object()) throw ConfigError("run config: expected an object");
    for (const auto& [k, v] : j.items()) {
        if (k != "seed" && k != "sim" && k != "train" && k != "eval" && k != "serve") throw ConfigError("run config: unknown key '" + k + "'");
    }
    if (!j.contains("seed")) throw ConfigError("run config: 'seed' is mandatory");
    RunConfig c;
    try {
        c.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("sim")) {
            json sim_defaults = c.sim;
            sim_defaults["episodes"] = c.episodes;
            json s = j.at("sim");
            reject_unknown(s, sim_defaults, "sim");
            if (s.contains("episodes")) {
                c.episodes = s.at("episodes").get<int>();
                s.erase("episodes");
            }
            c.sim = overlay(s, c.sim);
        }
        if (j.contains("train")) {
            if (!j.at("train").is_object()) throw ConfigError("train: expected an object");
            j.at("train").get_to(c.train);
            // The run seed drives training unless the section pins its own.
            if (!j.at("train").contains("seed")) c.train.seed = c.seed;
        } else {
            c.train.seed = c.seed;
        }
        if (j.contains("eval")) {
            reject_unknown(j.at("eval"), json(EvalConfig{}), "eval");
            c.eval = eval_from(j.at("eval"));
        }
        if (j.contains("serve")) {
            reject_unknown(j.at("serve"), json(ServeConfig{}), "serve");
            c.serve = serve_from(j.at("serve"));
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("run config: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig load_run_config(const std::string& path)
{
    const std::string text = read_file(path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return parse_run_config(j);
}

std::string config_hash(const RunConfig& c)
{
    return hex64(fnv1a64(json(c).dump()));
}

} // namespace medt::cfg
