#include "medt/sim.hpp"

#include "medt/error.hpp"

#include <algorithm>
#include <cmath>

namespace medt::sim {

std::string_view organ_name(int organ)
{
    static constexpr std::array<std::string_view, kOrgans> names = {
        "cardiovascular", "respiratory", "neurological", "renal", "hepatic", "haematologic", "other"};
    return names.at(static_cast<std::size_t>(organ));
}

std::string_view organ_short_name(int organ)
{
    static constexpr std::array<std::string_view, kOrgans> names = {"kc", "kr", "kn", "kl", "kh", "km", "ko"};
    return names.at(static_cast<std::size_t>(organ));
}

namespace {

std::uint64_t splitmix64(std::uint64_t z)
{
    z += 0x9E3779B97F4A7C15ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

} // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index)
{
    // Hash the seed before adding the index so (seed, index) pairs never alias.
    return splitmix64(splitmix64(seed) + index);
}

std::array<double, kStateDim> PatientState::features() const
{
    std::array<double, kStateDim> f{};
    std::copy(demographics.begin(), demographics.end(), f.begin());
    std::copy(vitals.begin(), vitals.end(), f.begin() + kDemographics);
    return f;
}

PatientState PatientState::from_features(const std::array<double, kStateDim>& f)
{
    PatientState s;
    std::copy(f.begin(), f.begin() + kDemographics, s.demographics.begin());
    std::copy(f.begin() + kDemographics, f.end(), s.vitals.begin());
    return s;
}

int AcuityVector::total() const
{
    int t = 0;
    for (int c : components) t += c;
    return t;
}

DoseAction DoseAction::from_index(int index)
{
    if (index < 0 || index >= kActions) throw DomainError("dose action index " + std::to_string(index) + " outside 0..24");
    return {index / kDoseBins, index % kDoseBins};
}

AcuityVector AcuityRubric::score(const PatientState& s) const
{
    std::array<double, kOrgans> sum{};
    std::array<int, kOrgans> count{};
    for (int i = 0; i < kVitals; ++i) {
        const auto o = static_cast<std::size_t>(kVitalOrgan[static_cast<std::size_t>(i)]);
        sum[o] += std::abs(s.vitals[static_cast<std::size_t>(i)]);
        ++count[o];
    }
    AcuityVector k;
    for (std::size_t o = 0; o < kOrgans; ++o) {
        const double raw = alpha[o] * sum[o] / count[o];
        k.components[o] = std::clamp(static_cast<int>(std::lround(raw)), 0, max[o]);
    }
    return k;
}

int AcuityRubric::max_total() const
{
    int t = 0;
    for (int m : max) t += m;
    return t;
}

void SimConfig::validate() const
{
    for (std::size_t o = 0; o < kOrgans; ++o) {
        if (rubric.alpha[o] < 0.0 || rubric.max[o] <= 0) throw ConfigError("sim: rubric alpha must be >= 0 and max > 0");
    }
    if (noise < 0.0) throw ConfigError("sim: noise must be >= 0");
    if (min_horizon < 1 || max_horizon < min_horizon || max_horizon > 20) {
        throw ConfigError("sim: horizons must satisfy 1 <= min <= max <= 20");
    }
    if (behavior_temperature <= 0.0) throw ConfigError("sim: behavior temperature must be > 0");
    if (behavior_floor <= 0.0 || behavior_floor * kActions >= 1.0) throw ConfigError("sim: behavior floor outside (0, 1/25)");
    if (under_dosing_rate < 0.0 || over_dosing_rate < 0.0 || under_dosing_rate + over_dosing_rate > 1.0) {
        throw ConfigError("sim: clinician rates must be non-negative and sum to <= 1");
    }
    if (survival_threshold <= 0 || death_cap < survival_threshold) throw ConfigError("sim: need 0 < survival_threshold <= death_cap");
}

void to_json(nlohmann::json& j, const SimConfig& c)
{
    j = nlohmann::json{{"alpha", c.rubric.alpha},
                       {"max", c.rubric.max},
                       {"drift", c.drift},
                       {"iv_benefit", c.iv_benefit},
                       {"vp_benefit", c.vp_benefit},
                       {"iv_harm", c.iv_harm},
                       {"vp_harm", c.vp_harm},
                       {"iv_knee", c.iv_knee},
                       {"vp_knee", c.vp_knee},
                       {"knee_sensitivity", c.knee_sensitivity},
                       {"noise", c.noise},
                       {"survival_threshold", c.survival_threshold},
                       {"death_cap", c.death_cap},
                       {"min_horizon", c.min_horizon},
                       {"max_horizon", c.max_horizon},
                       {"severity_mean", c.severity_mean},
                       {"severity_spread", c.severity_spread},
                       {"behavior_temperature", c.behavior_temperature},
                       {"behavior_floor", c.behavior_floor},
                       {"under_dosing_rate", c.under_dosing_rate},
                       {"over_dosing_rate", c.over_dosing_rate},
                       {"clinician_bias", c.clinician_bias}};
}

void from_json(const nlohmann::json& j, SimConfig& c)
{
    SimConfig d;
    auto get = [&j](const char* key, auto& field) {
        if (auto it = j.find(key); it != j.end()) it->get_to(field);
    };
    get("alpha", d.rubric.alpha);
    get("max", d.rubric.max);
    get("drift", d.drift);
    get("iv_benefit", d.iv_benefit);
    get("vp_benefit", d.vp_benefit);
    get("iv_harm", d.iv_harm);
    get("vp_harm", d.vp_harm);
    get("iv_knee", d.iv_knee);
    get("vp_knee", d.vp_knee);
    get("knee_sensitivity", d.knee_sensitivity);
    get("noise", d.noise);
    get("survival_threshold", d.survival_threshold);
    get("death_cap", d.death_cap);
    get("min_horizon", d.min_horizon);
    get("max_horizon", d.max_horizon);
    get("severity_mean", d.severity_mean);
    get("severity_spread", d.severity_spread);
    get("behavior_temperature", d.behavior_temperature);
    get("behavior_floor", d.behavior_floor);
    get("under_dosing_rate", d.under_dosing_rate);
    get("over_dosing_rate", d.over_dosing_rate);
    get("clinician_bias", d.clinician_bias);
    d.validate();
    c = d;
}

// ---- behavior policy -------------------------------------------------------

std::array<double, 2> BehaviorPolicy::preferred_dose(const PatientState& s, int clinician) const
{
    const auto& v = s.vitals;
    // Fluids track perfusion (cardiovascular) and renal/hepatic strain;
    // vasopressors track cardiovascular and neurological status.
    const double fluid_need = (v[0] + v[1] + v[2]) / 3.0 * 0.5 + (v[6] + v[7]) / 2.0 * 0.5;
    const double pressor_need = (v[0] + v[1] + v[2]) / 3.0 * 0.7 + v[5] * 0.3;
    const double bias = config_.clinician_bias * clinician;
    const double iv = std::clamp(0.5 + 1.6 * fluid_need + bias, 0.0, 4.0);
    const double vp = std::clamp(0.3 + 1.4 * pressor_need + bias, 0.0, 4.0);
    return {iv, vp};
}

ActionProbs BehaviorPolicy::probabilities(const PatientState& s, int clinician) const
{
    const auto pref = preferred_dose(s, clinician);
    ActionProbs p{};
    double mx = -1e300;
    std::array<double, kActions> logit{};
    for (int a = 0; a < kActions; ++a) {
        const DoseAction d = DoseAction::from_index(a);
        const double di = d.iv - pref[0];
        const double dv = d.vp - pref[1];
        logit[static_cast<std::size_t>(a)] = -(di * di + dv * dv) / config_.behavior_temperature;
        mx = std::max(mx, logit[static_cast<std::size_t>(a)]);
    }
    double z = 0.0;
    for (int a = 0; a < kActions; ++a) {
        p[static_cast<std::size_t>(a)] = std::exp(logit[static_cast<std::size_t>(a)] - mx);
        z += p[static_cast<std::size_t>(a)];
    }
    // Mixing with the uniform floor keeps every importance ratio finite.
    const double floor = config_.behavior_floor;
    for (auto& q : p) q = (1.0 - kActions * floor) * (q / z) + floor;
    return p;
}

DoseAction BehaviorPolicy::mode(const PatientState& s, int clinician) const
{
    const auto p = probabilities(s, clinician);
    return DoseAction::from_index(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
}

BehaviorPolicy::Draw BehaviorPolicy::sample(const PatientState& s, int clinician, Rng& rng) const
{
    const auto p = probabilities(s, clinician);
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double c = 0.0;
    int chosen = kActions - 1;
    for (int a = 0; a < kActions; ++a) {
        c += p[static_cast<std::size_t>(a)];
        if (u < c) {
            chosen = a;
            break;
        }
    }
    return {DoseAction::from_index(chosen), p[static_cast<std::size_t>(chosen)]};
}

int BehaviorPolicy::sample_clinician(Rng& rng) const
{
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    if (u < config_.under_dosing_rate) return -1;
    if (u < config_.under_dosing_rate + config_.over_dosing_rate) return 1;
    return 0;
}

// ---- simulator -------------------------------------------------------------

Simulator::Simulator(SimConfig config) : config_(std::move(config))
{
    config_.validate();
}

PatientState Simulator::initial_state(Rng& rng) const
{
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    PatientState s;
    s.demographics[0] = std::clamp(normal(rng), -2.0, 2.0);
    s.demographics[1] = std::clamp(normal(rng), -2.0, 2.0);
    s.demographics[2] = uniform(rng) < 0.5 ? 1.0 : 0.0;
    s.demographics[3] = uniform(rng) < 0.2 ? 1.0 : 0.0;
    const double severity = std::max(0.1, config_.severity_mean + config_.severity_spread * normal(rng));
    for (int o = 0; o < kOrgans; ++o) {
        // Patient-specific organ involvement.
        const double involvement = std::clamp(1.0 + 0.35 * normal(rng), 0.2, 2.0);
        for (int i = 0; i < kVitals; ++i) {
            if (kVitalOrgan[static_cast<std::size_t>(i)] != o) continue;
            const double v = severity * involvement + 0.25 * normal(rng);
            s.vitals[static_cast<std::size_t>(i)] = std::clamp(v, -5.0, 5.0);
        }
    }
    return s;
}

Episode Simulator::start(Rng& rng) const
{
    Episode ep;
    ep.state = initial_state(rng);
    ep.horizon = std::uniform_int_distribution<int>(config_.min_horizon, config_.max_horizon)(rng);
    return ep;
}

PatientState Simulator::expected_transition(const PatientState& s, DoseAction a) const
{
    const auto& c = config_;
    PatientState n = s;
    const double frailty = 1.0 + 0.15 * s.demographics[0] + 0.2 * s.demographics[3];
    const double fluid_scale = 1.0 / (1.0 + 0.1 * s.demographics[1]);
    // Compromised lungs tolerate less fluid; compromised kidneys fewer pressors.
    const double resp = std::max(0.0, 0.5 * (s.vitals[3] + s.vitals[4]));
    const double renal = std::max(0.0, s.vitals[6]);
    const double iv_knee = std::max(0.0, c.iv_knee - c.knee_sensitivity * resp);
    const double vp_knee = std::max(0.0, c.vp_knee - c.knee_sensitivity * renal);
    const double iv_over = std::max(0.0, a.iv - iv_knee);
    const double vp_over = std::max(0.0, a.vp - vp_knee);
    for (std::size_t i = 0; i < kVitals; ++i) {
        double v = s.vitals[i];
        v += c.drift[i] * frailty;
        v -= c.iv_benefit[i] * a.iv * fluid_scale + c.vp_benefit[i] * a.vp;
        v += c.iv_harm[i] * iv_over * iv_over + c.vp_harm[i] * vp_over * vp_over;
        n.vitals[i] = std::clamp(v, -5.0, 5.0);
    }
    return n;
}

PatientState Simulator::transition(const PatientState& s, DoseAction a, Rng& rng) const
{
    PatientState n = expected_transition(s, a);
    if (config_.noise > 0.0) {
        std::normal_distribution<double> normal(0.0, config_.noise);
        for (auto& v : n.vitals) v = std::clamp(v + normal(rng), -5.0, 5.0);
    }
    return n;
}

StepResult Simulator::step(Episode& ep, DoseAction a, Rng& rng) const
{
    if (ep.done) throw DomainError("simulator: step on a finished episode");
    StepResult r;
    r.next = transition(ep.state, a, rng);
    ep.t += 1;
    const int total = acuity(r.next).total();
    if (total >= config_.death_cap) {
        r.done = true;
        r.reward = -1.0;
    } else if (ep.t >= ep.horizon) {
        r.done = true;
        r.reward = total < config_.survival_threshold ? 1.0 : -1.0;
    }
    ep.state = r.next;
    ep.done = r.done;
    return r;
}

} // namespace medt::sim
