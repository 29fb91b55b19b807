#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "json.hpp"

namespace medt::sim {

inline constexpr int kDemographics = 4;
inline constexpr int kVitals = 12;
inline constexpr int kStateDim = kDemographics + kVitals;
inline constexpr int kOrgans = 7;
inline constexpr int kDoseBins = 5;
inline constexpr int kActions = kDoseBins * kDoseBins;

using Rng = std::mt19937_64;

enum class Organ { Cardiovascular, Respiratory, Neurological, Renal, Hepatic, Haematologic, Other };

/// Organ block of each vital: cardiovascular x3, respiratory x2, neurological,
/// renal, hepatic, haematologic, other x3.
inline constexpr std::array<int, kVitals> kVitalOrgan = {0, 0, 0, 1, 1, 2, 3, 4, 5, 6, 6, 6};

std::string_view organ_name(int organ);
std::string_view organ_short_name(int organ);

/// Derives an independent stream for (seed, index).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

struct PatientState {
    /// age-scaled, weight-scaled, gender flag, readmission flag.
    std::array<double, kDemographics> demographics{};
    /// Deviation of each vital from its healthy setpoint (0).
    std::array<double, kVitals> vitals{};

    std::array<double, kStateDim> features() const;
    static PatientState from_features(const std::array<double, kStateDim>& f);

    friend bool operator==(const PatientState&, const PatientState&) = default;
};

struct AcuityVector {
    std::array<int, kOrgans> components{};

    int total() const;
    friend bool operator==(const AcuityVector&, const AcuityVector&) = default;
};

struct DoseAction {
    int iv = 0;
    int vp = 0;

    int index() const { return iv * kDoseBins + vp; }
    static DoseAction from_index(int index);
    friend bool operator==(const DoseAction&, const DoseAction&) = default;
};

/// Split-organ severity score: component j = clamp(round(alpha_j * mean|dev|), 0, max_j).
struct AcuityRubric {
    std::array<double, kOrgans> alpha{3.0, 4.0, 5.0, 6.0, 6.0, 6.0, 3.0};
    std::array<int, kOrgans> max{10, 15, 15, 15, 15, 15, 15};

    AcuityVector score(const PatientState& s) const;
    int max_total() const;
};

/// Dynamics and cohort parameters. Vitals move by a worsening drift, minus a
/// linear per-bin drug benefit, plus a quadratic organ-specific harm once a
/// dose passes its knee.
struct SimConfig {
    AcuityRubric rubric;

    std::array<double, kVitals> drift{0.10, 0.08, 0.08, 0.10, 0.08, 0.06, 0.08, 0.08, 0.08, 0.06, 0.06, 0.06};
    std::array<double, kVitals> iv_benefit{0.10, 0.08, 0.06, 0.02, 0.02, 0.04, 0.16, 0.12, 0.06, 0.06, 0.06, 0.04};
    std::array<double, kVitals> vp_benefit{0.16, 0.14, 0.12, 0.06, 0.04, 0.10, 0.04, 0.04, 0.10, 0.04, 0.04, 0.06};
    /// Fluid overload lands on the respiratory block, vasopressor excess on
    /// renal/hepatic/haematologic.
    std::array<double, kVitals> iv_harm{0.00, 0.00, 0.00, 0.30, 0.30, 0.00, 0.05, 0.00, 0.00, 0.05, 0.05, 0.05};
    std::array<double, kVitals> vp_harm{0.05, 0.05, 0.05, 0.00, 0.00, 0.00, 0.20, 0.20, 0.25, 0.00, 0.00, 0.00};
    double iv_knee = 2.5;
    double vp_knee = 2.5;
    /// Knee shift per unit of respiratory (IV) / renal (VP) deviation.
    double knee_sensitivity = 0.4;
    double noise = 0.08;

    int survival_threshold = 47; ///< terminal total acuity below this survives
    int death_cap = 70;          ///< absorbing death at or above this total
    int min_horizon = 10;
    int max_horizon = 20;

    double severity_mean = 1.2;
    double severity_spread = 0.45;

    double behavior_temperature = 1.0;
    double behavior_floor = 1e-4;
    /// Probability of an under-dosing / over-dosing clinician (remainder neutral).
    double under_dosing_rate = 0.25;
    double over_dosing_rate = 0.25;
    double clinician_bias = 1.0;

    void validate() const;
};

void to_json(nlohmann::json& j, const SimConfig& c);
void from_json(const nlohmann::json& j, SimConfig& c);

using ActionProbs = std::array<double, kActions>;

/// Severity-indexed dose preference with softmax exploration. A clinician
/// bias shifts both preferences by a fixed number of bins for a whole episode.
class BehaviorPolicy {
public:
    explicit BehaviorPolicy(const SimConfig& config) : config_(config) {}

    std::array<double, 2> preferred_dose(const PatientState& s, int clinician) const;
    ActionProbs probabilities(const PatientState& s, int clinician) const;
    DoseAction mode(const PatientState& s, int clinician) const;

    struct Draw {
        DoseAction action;
        double probability;
    };
    Draw sample(const PatientState& s, int clinician, Rng& rng) const;

    int sample_clinician(Rng& rng) const;

private:
    SimConfig config_;
};

struct StepResult {
    PatientState next;
    bool done = false;
    double reward = 0.0;
};

/// Running episode: current state plus the step clock.
struct Episode {
    PatientState state;
    int t = 0;
    int horizon = 0;
    bool done = false;
};

class Simulator {
public:
    explicit Simulator(SimConfig config);

    const SimConfig& config() const { return config_; }
    AcuityVector acuity(const PatientState& s) const { return config_.rubric.score(s); }

    PatientState initial_state(Rng& rng) const;
    Episode start(Rng& rng) const;

    /// Next state only; deterministic when noise == 0 (rng untouched).
    PatientState transition(const PatientState& s, DoseAction a, Rng& rng) const;
    /// Mean next state (noise-free dynamics).
    PatientState expected_transition(const PatientState& s, DoseAction a) const;

    /// Advances the episode. Reward is 0 until termination, then +1 if the
    /// final total acuity is below the survival threshold, else -1.
    StepResult step(Episode& ep, DoseAction a, Rng& rng) const;

private:
    SimConfig config_;
};

} // namespace medt::sim
