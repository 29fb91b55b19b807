// medt: command-line front end for data generation, training, evaluation,
// off-policy estimates, rollouts, explanations and the HTTP service.

#include "medt/checkpoint.hpp"
#include "medt/common.hpp"
#include "medt/dataset.hpp"
#include "medt/error.hpp"
#include "medt/interpret.hpp"
#include "medt/ope.hpp"
#include "medt/report.hpp"
#include "medt/rollout.hpp"
#include "medt/run_config.hpp"
#include "medt/service.hpp"
#include "medt/training.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace medt;

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string run_dir;
};

cfg::RunConfig resolve_config(const Common& c)
{
    json j = json::object();
    if (!c.config_path.empty()) {
        try {
            j = json::parse(read_file(c.config_path));
        } catch (const json::parse_error& e) {
            throw ConfigError(c.config_path + ": " + e.what());
        }
        if (!j.is_object()) throw ConfigError(c.config_path + ": expected an object");
    }
    if (c.seed) j["seed"] = *c.seed;
    if (!j.contains("seed")) throw ConfigError("a seed is required (--seed or 'seed' in the config file)");
    return cfg::parse_run_config(j);
}

/// $MEDT_RUN_ROOT/<UTC timestamp>-seed<seed>-<command>, unless --run-dir is given.
std::string make_run_dir(const Common& c, const cfg::RunConfig& rc, const std::string& command)
{
    fs::path dir;
    if (!c.run_dir.empty()) {
        dir = c.run_dir;
    } else {
        const char* root = std::getenv("MEDT_RUN_ROOT");
        const std::time_t now = std::time(nullptr);
        std::tm tm{};
        gmtime_r(&now, &tm);
        std::ostringstream name;
        name << std::put_time(&tm, "%Y%m%dT%H%M%SZ") << "-seed" << rc.seed << '-' << command;
        dir = fs::path(root && *root ? root : "runs") / name.str();
    }
    fs::create_directories(dir);
    json resolved = rc;
    resolved["config_hash"] = cfg::config_hash(rc);
    resolved["code_version"] = std::string(kCodeVersion);
    write_file((dir / "config.json").string(), resolved.dump(2) + "\n");
    return dir.string();
}

void write_json(const std::string& path, json doc, const cfg::RunConfig& rc)
{
    doc["config_hash"] = cfg::config_hash(rc);
    doc["seed"] = rc.seed;
    doc["code_version"] = std::string(kCodeVersion);
    write_file(path, doc.dump(2) + "\n");
    std::cout << path << '\n';
}

void require_file(const std::string& path, const std::string& flag)
{
    if (path.empty()) throw ConfigError(flag + " is required");
    if (!fs::exists(path)) throw IoError(flag + ": no such file '" + path + "'");
}

void add_common(CLI::App* sub, Common& c)
{
    sub->add_option("--config", c.config_path, "run configuration document")->check(CLI::ExistingFile);
    sub->add_option("--seed", c.seed, "run seed (overrides the config)");
    sub->add_option("--run-dir", c.run_dir, "output directory (default: $MEDT_RUN_ROOT/<timestamp>-seed<seed>-<command>)");
}

} // namespace

int main(int argc, char** argv)
{
    tune_allocator();
    CLI::App app{"medt: acuity-conditioned decision transformer for sepsis dosing"};
    app.require_subcommand(1);
    Common common;

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "simulate an offline trajectory dataset");
    add_common(gen, common);
    std::optional<int> episodes;
    std::string gen_out;
    gen->add_option("--episodes", episodes, "episode count (overrides sim.episodes)")->check(CLI::PositiveNumber);
    gen->add_option("--out", gen_out, "dataset path (default: <run-dir>/dataset.json)");

    // train
    auto* tr = app.add_subcommand("train", "train bc, dt, medt or the state predictor");
    add_common(tr, common);
    std::string data_path, variant;
    std::optional<int> epochs;
    tr->add_option("--data", data_path, "dataset file")->required();
    tr->add_option("--variant", variant, "bc | dt | medt | predictor");
    tr->add_option("--epochs", epochs, "epochs (overrides train.epochs)")->check(CLI::PositiveNumber);

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "severity-stratified rollout comparison of policies");
    add_common(ev, common);
    std::vector<std::string> policies;
    std::string predictor_path;
    bool oracle = false;
    ev->add_option("--policy", policies, "policy checkpoints (repeatable)")->required();
    ev->add_option("--predictor", predictor_path, "state predictor checkpoint");
    ev->add_flag("--oracle", oracle, "use the noise-free simulator instead of a predictor");

    // ope
    auto* op = app.add_subcommand("ope", "off-policy value estimates on a logged dataset");
    add_common(op, common);
    std::string ope_policy, estimator = "all", bc_path;
    std::optional<double> gamma;
    op->add_option("--data", data_path, "dataset file")->required();
    op->add_option("--policy", ope_policy, "evaluation policy checkpoint")->required();
    op->add_option("--estimator", estimator, "wis | fqe | wdr | all")->check(CLI::IsMember({"wis", "fqe", "wdr", "all"}));
    op->add_option("--gamma", gamma, "discount (overrides eval.gamma)")->check(CLI::Range(0.0, 1.0));
    op->add_option("--behavior-model", bc_path, "BC checkpoint for estimated behaviour probabilities");

    // rollout
    auto* ro = app.add_subcommand("rollout", "closed-loop rollout from one initial state");
    add_common(ro, common);
    std::string ro_policy;
    int state_index = 0;
    std::optional<int> horizon;
    ro->add_option("--policy", ro_policy, "policy checkpoint")->required();
    ro->add_option("--predictor", predictor_path, "state predictor checkpoint");
    ro->add_flag("--oracle", oracle, "use the noise-free simulator instead of a predictor");
    ro->add_option("--state-index", state_index, "index into the evaluation cohort")->check(CLI::NonNegativeNumber);
    ro->add_option("--horizon", horizon, "steps (<= 10)")->check(CLI::Range(0, 10));

    // explain
    auto* ex = app.add_subcommand("explain", "relevancy map for one logged decision");
    add_common(ex, common);
    std::string ex_policy, normalization;
    int episode = 0;
    std::optional<int> step;
    ex->add_option("--policy", ex_policy, "policy checkpoint")->required();
    ex->add_option("--data", data_path, "dataset file")->required();
    ex->add_option("--episode", episode, "episode index")->check(CLI::NonNegativeNumber);
    ex->add_option("--step", step, "decision step (0-based, default last)")->check(CLI::NonNegativeNumber);
    ex->add_option("--normalization", normalization, "receptive_field | row_sum")->check(CLI::IsMember({"receptive_field", "row_sum"}));

    // serve
    auto* sv = app.add_subcommand("serve", "HTTP API over a policy and a state predictor");
    add_common(sv, common);
    std::string serve_policy, serve_predictor, host;
    std::optional<int> port;
    sv->add_option("--policy", serve_policy, "policy checkpoint (overrides serve.policy)");
    sv->add_option("--predictor", serve_predictor, "predictor checkpoint (overrides serve.predictor)");
    sv->add_option("--host", host, "bind address");
    sv->add_option("--port", port, "port")->check(CLI::Range(0, 65535));

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e, std::cout, std::cerr);
        std::cerr << app.help();
        return 1;
    }

    try {
        auto rc = resolve_config(common);

        if (gen->parsed()) {
            if (episodes) rc.episodes = *episodes;
            const auto dir = make_run_dir(common, rc, "gen-data");
            const auto d = data::generate_dataset(rc.episodes, rc.sim, rc.seed);
            const std::string out = gen_out.empty() ? (fs::path(dir) / "dataset.json").string() : gen_out;
            data::save_dataset(d, out);
            std::cout << out << '\n';
            std::cerr << d.episodes.size() << " episodes, survival " << d.survival_fraction() << '\n';
            return 0;
        }

        if (tr->parsed()) {
            require_file(data_path, "--data");
            if (!variant.empty()) rc.train.variant = model::parse_variant(variant);
            if (epochs) rc.train.epochs = *epochs;
            rc.train.validate();
            const auto d = data::load_dataset(data_path);
            const auto dir = make_run_dir(common, rc, "train");
            auto log = [](const train::EpochReport& r) {
                std::cerr << "epoch " << r.epoch << " train " << r.train_loss << " validation " << r.validation_loss << " (" << r.seconds << "s)\n";
            };
            const bool predictor = rc.train.variant == model::Variant::StatePredictor;
            auto result = predictor ? train::train_predictor(d, rc.train, log) : train::train_policy(d, rc.train, log);
            result.meta.config_hash = cfg::config_hash(rc);
            const std::string name = std::string(model::variant_name(rc.train.variant));
            const auto ckpt = (fs::path(dir) / (name + ".ckpt")).string();
            const auto checksum = model::save_checkpoint(result.model, result.meta, ckpt);
            write_file((fs::path(dir) / "curve.csv").string(), train::curve_csv(result.curve));
            json metrics = {{"variant", name}, {"checkpoint", ckpt}, {"checksum", checksum}, {"best_epoch", result.best_epoch}, {"meta", result.meta}};
            if (predictor) {
                const auto s = train::score_predictor(result.model, d, result.split.validation);
                metrics["validation"] = {{"model_mse", s.model_mse}, {"copy_mse", s.copy_mse}, {"improvement", s.improvement()}};
            }
            write_json((fs::path(dir) / "metrics.json").string(), metrics, rc);
            std::cout << ckpt << '\n';
            return 0;
        }

        if (ev->parsed()) {
            if (!oracle) require_file(predictor_path, "--predictor");
            const auto dir = make_run_dir(common, rc, "evaluate");
            std::optional<model::LoadedModel> pred;
            std::unique_ptr<eval::Predictor> predictor;
            if (oracle) {
                predictor = std::make_unique<eval::SimulatorOracle>(rc.sim);
            } else {
                pred = model::load_checkpoint(predictor_path);
                predictor = std::make_unique<eval::ModelPredictor>(pred->model);
            }
            const auto states = eval::initial_states(rc.sim, rc.eval.eval_states, sim::derive_seed(rc.seed, 999));
            std::vector<int> initial;
            for (const auto& s : states) initial.push_back(rc.sim.rubric.score(sim::PatientState::from_features(s)).total());
            const auto terciles = eval::severity_terciles(initial);
            eval::RolloutOptions ro_opts;
            ro_opts.horizon = rc.eval.horizon;
            ro_opts.atg_fraction = rc.eval.atg_fraction;
            std::vector<eval::ReportRow> rows;
            std::vector<std::vector<double>> finals;
            for (const auto& path : policies) {
                require_file(path, "--policy");
                const auto m = model::load_checkpoint(path);
                finals.push_back(eval::final_acuities(m.model, *predictor, states, rc.sim.rubric, ro_opts));
                rows.push_back({std::string(model::variant_name(m.model.config().variant)), eval::stratify(terciles, finals.back())});
            }
            std::vector<double> init_d(initial.begin(), initial.end());
            rows.insert(rows.begin(), eval::ReportRow{"initial", eval::stratify(terciles, init_d)});
            write_file((fs::path(dir) / "strata.csv").string(), eval::table_csv(rows));
            std::cout << eval::table_text(rows);
            json doc = {{"states", states.size()},
                        {"horizon", rc.eval.horizon},
                        {"predictor", oracle ? "oracle" : "model"},
                        {"terciles", {{"low_cut", terciles.low_cut}, {"high_cut", terciles.high_cut}}},
                        {"rows", rows}};
            json tests = json::array();
            for (std::size_t a = 0; a < finals.size(); ++a) {
                for (std::size_t b = a + 1; b < finals.size(); ++b) {
                    json t = eval::paired_t_test(finals[a], finals[b]);
                    t["a"] = rows[a + 1].policy;
                    t["b"] = rows[b + 1].policy;
                    tests.push_back(t);
                }
            }
            doc["paired_tests"] = tests;
            write_json((fs::path(dir) / "evaluation.json").string(), doc, rc);
            return 0;
        }

        if (op->parsed()) {
            require_file(data_path, "--data");
            require_file(ope_policy, "--policy");
            if (gamma) rc.eval.gamma = *gamma;
            if (!bc_path.empty()) rc.eval.behavior = "estimated";
            if (rc.eval.behavior == "estimated" && bc_path.empty()) throw ConfigError("estimated behaviour needs --behavior-model");
            const auto d = data::load_dataset(data_path);
            const auto m = model::load_checkpoint(ope_policy);
            std::optional<model::LoadedModel> bc;
            if (!bc_path.empty()) {
                require_file(bc_path, "--behavior-model");
                bc = model::load_checkpoint(bc_path);
            }
            const auto dir = make_run_dir(common, rc, "ope");
            std::vector<int> all(d.episodes.size());
            for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
            const auto od = ope::from_dataset(d, all, m.model, rc.eval.atg_fraction, bc ? &bc->model : nullptr);
            const double g = rc.eval.gamma;
            const int B = rc.eval.bootstrap_resamples;
            const auto boot_seed = sim::derive_seed(rc.seed, 77);
            json results = json::array();
            if (estimator == "wis" || estimator == "all") {
                auto r = ope::wis(od, g);
                r.bootstrap = ope::bootstrap(od, [g](const ope::OpeData& x) { return ope::wis(x, g).value; }, B, boot_seed);
                results.push_back(r);
            }
            if (estimator == "fqe" || estimator == "wdr" || estimator == "all") {
                ope::FqeNetworkConfig fc;
                fc.iterations = rc.eval.fqe_iterations;
                fc.hidden = rc.eval.fqe_hidden;
                fc.seed = sim::derive_seed(rc.seed, 78);
                ope::FqeReport rep;
                std::cerr << "fitting FQE (" << fc.iterations << " iterations)\n";
                const auto q = ope::fqe_network(od, g, fc, &rep);
                if (estimator != "wdr") {
                    auto r = ope::fqe_value(od, *q, g);
                    r.warnings = rep.warnings;
                    results.push_back(r);
                }
                if (estimator != "fqe") {
                    auto r = ope::wdr(od, *q, g);
                    r.warnings = rep.warnings;
                    r.bootstrap = ope::bootstrap(od, [g, &q](const ope::OpeData& x) { return ope::wdr(x, *q, g).value; }, B, boot_seed);
                    results.push_back(r);
                }
            }
            json doc = {{"policy", model::variant_name(m.model.config().variant)},
                        {"policy_checksum", m.checksum},
                        {"behavior", rc.eval.behavior},
                        {"gamma", g},
                        {"episodes", od.size()},
                        {"behavior_value", ope::mean_discounted_return(od, g)},
                        {"results", results}};
            write_json((fs::path(dir) / "ope.json").string(), doc, rc);
            return 0;
        }

        if (ro->parsed()) {
            require_file(ro_policy, "--policy");
            if (!oracle) require_file(predictor_path, "--predictor");
            const auto m = model::load_checkpoint(ro_policy);
            std::optional<model::LoadedModel> pred;
            std::unique_ptr<eval::Predictor> predictor;
            if (oracle) {
                predictor = std::make_unique<eval::SimulatorOracle>(rc.sim);
            } else {
                pred = model::load_checkpoint(predictor_path);
                predictor = std::make_unique<eval::ModelPredictor>(pred->model);
            }
            const auto states = eval::initial_states(rc.sim, state_index + 1, sim::derive_seed(rc.seed, 999));
            eval::RolloutOptions o;
            o.horizon = horizon.value_or(rc.eval.horizon);
            o.atg_fraction = rc.eval.atg_fraction;
            const auto dir = make_run_dir(common, rc, "rollout");
            const auto r = eval::rollout(m.model, *predictor, states.back(), rc.sim.rubric, o);
            write_json((fs::path(dir) / "rollout.json").string(),
                       {{"state_index", state_index}, {"predictor", oracle ? "oracle" : "model"}, {"options", o}, {"rollout", r}}, rc);
            return 0;
        }

        if (ex->parsed()) {
            require_file(ex_policy, "--policy");
            require_file(data_path, "--data");
            const auto m = model::load_checkpoint(ex_policy);
            const auto d = data::load_dataset(data_path);
            if (episode >= static_cast<int>(d.episodes.size())) throw DomainError("--episode out of range");
            const auto& trj = d.episodes[static_cast<std::size_t>(episode)];
            const int T = std::min(trj.length(), m.model.config().context_steps);
            auto prefix = model::Prefix::from_trajectory(trj, T);
            prefix.rtg = 1.0;
            if (m.model.layout().has(model::TokenType::Atg)) {
                auto k = eval::linear_decay_schedule(trj.acuity.front(), eval::kDefaultHorizon, rc.eval.atg_fraction);
                while (static_cast<int>(k.size()) < T) k.push_back(k.back());
                k.resize(static_cast<std::size_t>(T));
                prefix.atg = k;
            } else {
                prefix.atg.clear();
            }
            prefix.actions.resize(static_cast<std::size_t>(T - 1));
            interp::ExplainOptions eo;
            eo.step = step;
            eo.normalization = interp::parse_normalization(normalization.empty() ? rc.eval.normalization : normalization);
            const auto map = interp::explain(m.model, prefix, eo);
            const auto dir = make_run_dir(common, rc, "explain");
            write_file((fs::path(dir) / "heatmap.svg").string(), interp::heatmap_svg(map));
            json doc = {{"episode", episode}, {"heatmap", map}};
            if (m.model.layout().has(model::TokenType::Atg)) doc["atg_step_relevance"] = interp::atg_step_relevance(m.model, map);
            if (m.model.layout().atg_tokens == sim::kOrgans) doc["atg_component_relevance"] = interp::atg_component_relevance(m.model, map);
            write_json((fs::path(dir) / "explain.json").string(), doc, rc);
            return 0;
        }

        if (sv->parsed()) {
            if (!serve_policy.empty()) rc.serve.policy = serve_policy;
            if (!serve_predictor.empty()) rc.serve.predictor = serve_predictor;
            if (!host.empty()) rc.serve.host = host;
            if (port) rc.serve.port = *port;
            require_file(rc.serve.policy, "--policy");
            require_file(rc.serve.predictor, "--predictor");
            service::ServiceOptions so;
            so.patients = rc.serve.patients;
            so.patient_seed = sim::derive_seed(rc.seed, 999);
            so.atg_fraction = rc.serve.atg_fraction;
            service::Service s(model::load_checkpoint(rc.serve.policy), model::load_checkpoint(rc.serve.predictor), rc.sim, so);
            std::cerr << "serving on " << rc.serve.host << ':' << rc.serve.port << '\n';
            service::run_server(s, rc.serve.host, rc.serve.port);
            return 0;
        }
    } catch (const ConfigError& e) {
        std::cerr << "medt: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "medt: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
