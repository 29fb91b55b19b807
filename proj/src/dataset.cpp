#include "medt/dataset.hpp"

#include "medt/common.hpp"
#include "medt/error.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace medt::data {

using nlohmann::json;

sim::PatientState Trajectory::state(int t) const
{
    sim::PatientState s;
    s.demographics = demographics;
    s.vitals = vitals.at(static_cast<std::size_t>(t));
    return s;
}

double Trajectory::discounted_return(double gamma) const
{
    double g = 0.0, w = 1.0;
    for (double r : rewards) {
        g += w * r;
        w *= gamma;
    }
    return g;
}

double Dataset::mean_discounted_return(double gamma) const
{
    if (episodes.empty()) return 0.0;
    double s = 0.0;
    for (const auto& e : episodes) s += e.discounted_return(gamma);
    return s / static_cast<double>(episodes.size());
}

double Dataset::survival_fraction() const
{
    if (episodes.empty()) return 0.0;
    const auto alive = std::count_if(episodes.begin(), episodes.end(), [](const Trajectory& e) { return e.outcome > 0.0; });
    return static_cast<double>(alive) / static_cast<double>(episodes.size());
}

int Dataset::max_length() const
{
    int m = 0;
    for (const auto& e : episodes) m = std::max(m, e.length());
    return m;
}

std::string sim_config_hash(const sim::SimConfig& c)
{
    return hex64(fnv1a64(json(c).dump()));
}

Dataset generate_dataset(int episodes, const sim::SimConfig& config, std::uint64_t seed, int first_id)
{
    if (episodes < 1) throw DomainError("generate_dataset: need at least one episode");
    const sim::Simulator simulator(config);
    const sim::BehaviorPolicy behavior(config);
    Dataset d;
    d.header.seed = seed;
    d.header.sim = config;
    d.header.config_hash = sim_config_hash(config);
    d.header.code_version = std::string(kCodeVersion);
    d.episodes.reserve(static_cast<std::size_t>(episodes));
    for (int i = 0; i < episodes; ++i) {
        const int id = first_id + i;
        sim::Rng rng(sim::derive_seed(seed, static_cast<std::uint64_t>(id)));
        Trajectory tr;
        tr.id = id;
        tr.clinician = behavior.sample_clinician(rng);
        sim::Episode ep = simulator.start(rng);
        tr.demographics = ep.state.demographics;
        tr.vitals.push_back(ep.state.vitals);
        tr.acuity.push_back(simulator.acuity(ep.state));
        while (!ep.done) {
            const auto draw = behavior.sample(ep.state, tr.clinician, rng);
            const auto r = simulator.step(ep, draw.action, rng);
            tr.actions.push_back(draw.action.index());
            tr.behavior_probs.push_back(draw.probability);
            tr.rewards.push_back(r.reward);
            tr.vitals.push_back(r.next.vitals);
            tr.acuity.push_back(simulator.acuity(r.next));
            if (r.done) tr.outcome = r.reward;
        }
        d.episodes.push_back(std::move(tr));
    }
    return d;
}

// ---- text format -------------------------------------------------------------

namespace {

constexpr const char* kFormatName = "medt-trajectories";

json episode_to_json(const Trajectory& t)
{
    json acuity = json::array();
    for (const auto& k : t.acuity) {
        json row(k.components);
        row.push_back(k.total());
        acuity.push_back(std::move(row));
    }
    return json{{"id", t.id},
                {"demographics", t.demographics},
                {"states", t.vitals},
                {"actions", t.actions},
                {"behavior_probs", t.behavior_probs},
                {"acuity", std::move(acuity)},
                {"rewards", t.rewards},
                {"outcome", t.outcome},
                {"clinician", t.clinician}};
}

Trajectory episode_from_json(const json& j)
{
    Trajectory t;
    j.at("id").get_to(t.id);
    j.at("demographics").get_to(t.demographics);
    j.at("states").get_to(t.vitals);
    j.at("actions").get_to(t.actions);
    j.at("behavior_probs").get_to(t.behavior_probs);
    j.at("rewards").get_to(t.rewards);
    j.at("outcome").get_to(t.outcome);
    j.at("clinician").get_to(t.clinician);
    for (const auto& row : j.at("acuity")) {
        if (row.size() != sim::kOrgans + 1) throw IoError("acuity row must carry 7 components plus total");
        sim::AcuityVector k;
        for (int o = 0; o < sim::kOrgans; ++o) row.at(static_cast<std::size_t>(o)).get_to(k.components[static_cast<std::size_t>(o)]);
        if (row.at(sim::kOrgans).get<int>() != k.total()) throw IoError("acuity total does not equal sum of components");
        t.acuity.push_back(k);
    }
    const std::size_t n = t.actions.size();
    if (n == 0 || t.behavior_probs.size() != n || t.rewards.size() != n || t.vitals.size() != n + 1 || t.acuity.size() != n + 1) {
        throw IoError("episode " + std::to_string(t.id) + ": inconsistent field lengths");
    }
    for (int a : t.actions) {
        if (a < 0 || a >= sim::kActions) throw IoError("episode " + std::to_string(t.id) + ": action outside 0..24");
    }
    return t;
}

} // namespace

std::string serialize_dataset(const Dataset& d)
{
    std::string out;
    json header{{"format", kFormatName},
                {"schema_version", d.header.schema_version},
                {"seed", d.header.seed},
                {"episodes", d.episodes.size()},
                {"sim", d.header.sim},
                {"config_hash", d.header.config_hash},
                {"code_version", d.header.code_version}};
    out += header.dump();
    out += '\n';
    for (const auto& e : d.episodes) {
        out += episode_to_json(e).dump();
        out += '\n';
    }
    json footer{{"end", true}, {"fnv1a64", hex64(fnv1a64(out))}};
    out += footer.dump();
    out += '\n';
    return out;
}

Dataset parse_dataset(const std::string& text, const std::string& origin)
{
    const auto footer_start = text.rfind('\n', text.size() >= 2 ? text.size() - 2 : 0);
    if (text.empty() || text.back() != '\n' || footer_start == std::string::npos) {
        throw ChecksumError(origin + ": truncated dataset (missing footer)");
    }
    const std::string body = text.substr(0, footer_start + 1);
    json footer;
    try {
        footer = json::parse(text.substr(footer_start + 1));
    } catch (const json::exception&) {
        throw ChecksumError(origin + ": truncated dataset (unreadable footer)");
    }
    if (!footer.is_object() || !footer.contains("fnv1a64") || footer.at("fnv1a64") != hex64(fnv1a64(body))) {
        throw ChecksumError(origin + ": dataset checksum mismatch");
    }

    std::istringstream in(body);
    std::string line;
    Dataset d;
    std::size_t expected = 0;
    int line_no = 0;
    try {
        while (std::getline(in, line)) {
            ++line_no;
            const json j = json::parse(line);
            if (line_no == 1) {
                if (j.at("format") != kFormatName) throw IoError(origin + ": not a trajectory file");
                d.header.schema_version = j.at("schema_version").get<int>();
                if (d.header.schema_version > kDatasetSchemaVersion) {
                    throw UnsupportedVersionError(origin + ": dataset schema version " + std::to_string(d.header.schema_version) +
                                                  " is newer than supported version " + std::to_string(kDatasetSchemaVersion));
                }
                d.header.seed = j.at("seed").get<std::uint64_t>();
                d.header.sim = j.at("sim").get<sim::SimConfig>();
                d.header.config_hash = j.at("config_hash").get<std::string>();
                d.header.code_version = j.at("code_version").get<std::string>();
                expected = j.at("episodes").get<std::size_t>();
                continue;
            }
            d.episodes.push_back(episode_from_json(j));
        }
    } catch (const json::exception& e) {
        throw IoError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (line_no == 0) throw IoError(origin + ": empty dataset");
    if (d.episodes.size() != expected) {
        throw IoError(origin + ": header announces " + std::to_string(expected) + " episodes, found " + std::to_string(d.episodes.size()));
    }
    return d;
}

void save_dataset(const Dataset& d, const std::string& path)
{
    write_file(path, serialize_dataset(d));
}

Dataset load_dataset(const std::string& path)
{
    return parse_dataset(read_file(path), path);
}

Split split_episodes(int n, double train_fraction, std::uint64_t seed)
{
    std::vector<int> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_train = static_cast<std::size_t>(std::floor(n * train_fraction));
    if (n > 1) n_train = std::clamp<std::size_t>(n_train, 1, static_cast<std::size_t>(n) - 1);
    Split s;
    s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    s.validation.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.end());
    std::sort(s.train.begin(), s.train.end());
    std::sort(s.validation.begin(), s.validation.end());
    return s;
}

} // namespace medt::data
