#pragma once

#include "medt/models.hpp"
#include "medt/sim.hpp"

#include <cstdint>
#include <optional>
#include <vector>

#include "json.hpp"

namespace medt::eval {

using model::AtgVec;
using model::StateVec;

inline constexpr int kDefaultHorizon = 10;

/// Per-step acuity-to-go targets k_1..k_H.
using AtgSchedule = std::vector<AtgVec>;

/// k_t = start + (target - start) * t / H for t = 1..H, per organ.
AtgSchedule linear_decay_schedule(const AtgVec& start, const AtgVec& target, int horizon);
/// Target is `fraction` of the starting acuity in every organ.
AtgSchedule linear_decay_schedule(const sim::AcuityVector& start, int horizon, double fraction);

/// Next-state model used inside the rollout loop.
class Predictor {
public:
    virtual ~Predictor() = default;
    /// s_{t+1} given s_{1:t} and a_{1:t} (equal length).
    virtual StateVec next(const std::vector<StateVec>& states, const std::vector<int>& actions) const = 0;
};

class ModelPredictor : public Predictor {
public:
    explicit ModelPredictor(const model::SequenceModel& m);
    StateVec next(const std::vector<StateVec>& states, const std::vector<int>& actions) const override;

private:
    const model::SequenceModel& model_;
};

/// The simulator's noise-free mean transition.
class SimulatorOracle : public Predictor {
public:
    explicit SimulatorOracle(sim::SimConfig config);
    StateVec next(const std::vector<StateVec>& states, const std::vector<int>& actions) const override;

private:
    sim::Simulator sim_;
};

struct RolloutOptions {
    int horizon = kDefaultHorizon;
    /// Allow horizons above 10 (up to the policy's context).
    bool allow_long_horizon = false;
    double target_return = 1.0;
    /// Explicit schedule (MeDT only); default is the linear-decay heuristic.
    std::optional<AtgSchedule> atg;
    double atg_fraction = 0.0;
    /// Sampling instead of argmax when set.
    std::optional<model::SampleDecode> sample;
};

void to_json(nlohmann::json& j, const RolloutOptions& o);

struct RolloutResult {
    std::vector<int> actions;               // a_1..a_H
    std::vector<StateVec> states;           // s_1..s_{H+1} (s_1 = initial)
    std::vector<sim::AcuityVector> acuity;  // g_1..g_{H+1}
    AtgSchedule atg;                        // schedule actually used (empty for BC/DT)
    std::vector<std::array<double, sim::kActions>> probabilities;

    int final_acuity() const { return acuity.back().total(); }
};

void to_json(nlohmann::json& j, const RolloutResult& r);

/// Closed loop: pick k_t, act, append, predict s_{t+1} and score it.
/// Predicted vitals are clamped to the simulator's range and demographics
/// are held at their initial values. Throws NumericError naming the step if
/// the predictor returns a non-finite state.
RolloutResult rollout(const model::SequenceModel& policy, const Predictor& predictor, const StateVec& s0,
                      const sim::AcuityRubric& rubric, const RolloutOptions& opts = {});

/// Evaluation cohort: state i is the simulator's initial state under derive_seed(seed, i).
std::vector<StateVec> initial_states(const sim::SimConfig& config, int n, std::uint64_t seed);

/// Final total acuity of a rollout from each initial state.
std::vector<double> final_acuities(const model::SequenceModel& policy, const Predictor& predictor, const std::vector<StateVec>& states,
                                   const sim::AcuityRubric& rubric, const RolloutOptions& opts = {});

/// Applies a fixed action sequence to the simulator with its noise disabled.
std::vector<StateVec> simulate_actions(const sim::SimConfig& config, const StateVec& s0, const std::vector<int>& actions);

} // namespace medt::eval
