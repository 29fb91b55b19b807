#include "medt/rollout.hpp"

#include "medt/error.hpp"

#include <algorithm>
#include <cmath>

namespace medt::eval {

using nlohmann::json;

AtgSchedule linear_decay_schedule(const AtgVec& start, const AtgVec& target, int horizon)
{
    if (horizon < 0) throw DomainError("atg schedule: horizon must be >= 0");
    AtgSchedule out;
    for (int t = 1; t <= horizon; ++t) {
        AtgVec k;
        const double f = static_cast<double>(t) / horizon;
        for (std::size_t o = 0; o < k.size(); ++o) k[o] = start[o] + (target[o] - start[o]) * f;
        out.push_back(k);
    }
    return out;
}

AtgSchedule linear_decay_schedule(const sim::AcuityVector& start, int horizon, double fraction)
{
    if (fraction < 0.0) throw DomainError("atg schedule: fraction must be >= 0");
    AtgVec s, t;
    for (std::size_t o = 0; o < s.size(); ++o) {
        s[o] = start.components[o];
        t[o] = fraction * s[o];
    }
    return linear_decay_schedule(s, t, horizon);
}

ModelPredictor::ModelPredictor(const model::SequenceModel& m) : model_(m)
{
    if (m.config().variant != model::Variant::StatePredictor) throw DomainError("ModelPredictor: model is not a state predictor");
}

StateVec ModelPredictor::next(const std::vector<StateVec>& states, const std::vector<int>& actions) const
{
    const auto ctx = static_cast<std::size_t>(model_.config().context_steps);
    if (states.size() <= ctx) return model_.predict_next_states(states, actions).back();
    const std::vector<StateVec> s(states.end() - static_cast<std::ptrdiff_t>(ctx), states.end());
    const std::vector<int> a(actions.end() - static_cast<std::ptrdiff_t>(ctx), actions.end());
    return model_.predict_next_states(s, a).back();
}

SimulatorOracle::SimulatorOracle(sim::SimConfig config) : sim_([&] {
    config.noise = 0.0;
    return config;
}())
{
}

StateVec SimulatorOracle::next(const std::vector<StateVec>& states, const std::vector<int>& actions) const
{
    const auto s = sim::PatientState::from_features(states.back());
    return sim_.expected_transition(s, sim::DoseAction::from_index(actions.back())).features();
}

void to_json(json& j, const RolloutOptions& o)
{
    j = {{"horizon", o.horizon}, {"target_return", o.target_return}, {"atg_fraction", o.atg_fraction}};
    if (o.atg) j["atg"] = *o.atg;
    if (o.sample) j["sample"] = {{"seed", o.sample->seed}, {"temperature", o.sample->temperature}};
}

void to_json(json& j, const RolloutResult& r)
{
    json acuity = json::array();
    json totals = json::array();
    for (const auto& k : r.acuity) {
        acuity.push_back(k.components);
        totals.push_back(k.total());
    }
    json doses = json::array();
    for (int a : r.actions) {
        const auto d = sim::DoseAction::from_index(a);
        doses.push_back({{"index", a}, {"iv", d.iv}, {"vp", d.vp}});
    }
    j = {{"actions", doses},
         {"states", r.states},
         {"acuity", acuity},
         {"acuity_totals", totals},
         {"atg", r.atg},
         {"final_acuity", r.final_acuity()}};
}

namespace {

StateVec sanitise(const StateVec& predicted, const StateVec& s0, int step)
{
    StateVec out = predicted;
    for (double v : predicted)
        if (!std::isfinite(v)) throw NumericError("rollout: state predictor returned a non-finite state at step " + std::to_string(step));
    for (int i = 0; i < sim::kDemographics; ++i) out[static_cast<std::size_t>(i)] = s0[static_cast<std::size_t>(i)];
    for (int i = sim::kDemographics; i < sim::kStateDim; ++i) {
        out[static_cast<std::size_t>(i)] = std::clamp(out[static_cast<std::size_t>(i)], -5.0, 5.0);
    }
    return out;
}

} // namespace

RolloutResult rollout(const model::SequenceModel& policy, const Predictor& predictor, const StateVec& s0,
                      const sim::AcuityRubric& rubric, const RolloutOptions& opts)
{
    const auto variant = policy.config().variant;
    if (variant == model::Variant::StatePredictor) throw DomainError("rollout: policy model is a state predictor");
    if (opts.horizon < 0) throw DomainError("rollout: horizon must be >= 0");
    if (opts.horizon > kDefaultHorizon && !opts.allow_long_horizon) {
        throw DomainError("rollout: horizon " + std::to_string(opts.horizon) + " exceeds 10 without the long-horizon override");
    }
    const int H = opts.horizon;
    const int ctx = policy.config().context_steps;
    for (double v : s0)
        if (!std::isfinite(v)) throw DomainError("rollout: initial state is not finite");

    RolloutResult r;
    r.states.push_back(s0);
    r.acuity.push_back(rubric.score(sim::PatientState::from_features(s0)));
    const bool uses_atg = policy.layout().has(model::TokenType::Atg);
    if (uses_atg) {
        if (opts.atg) {
            if (static_cast<int>(opts.atg->size()) < H) throw DomainError("rollout: ATG schedule shorter than horizon");
            r.atg.assign(opts.atg->begin(), opts.atg->begin() + H);
        } else {
            r.atg = linear_decay_schedule(r.acuity.front(), H, opts.atg_fraction);
        }
    }

    for (int t = 0; t < H; ++t) {
        // Policy sees the last `ctx` steps ending at s_t with a_t unknown.
        const int begin = std::max(0, t + 1 - ctx);
        model::Prefix p;
        p.rtg = opts.target_return;
        for (int s = begin; s <= t; ++s) {
            p.states.push_back(r.states[static_cast<std::size_t>(s)]);
            if (uses_atg) p.atg.push_back(r.atg[static_cast<std::size_t>(s)]);
            if (s < t) p.actions.push_back(r.actions[static_cast<std::size_t>(s)]);
        }
        const auto logits = policy.action_logits(p).back();
        const sim::DoseAction a = opts.sample
                                      ? model::select_action(logits, model::SampleDecode{sim::derive_seed(opts.sample->seed, static_cast<std::uint64_t>(t)),
                                                                                        opts.sample->temperature})
                                      : model::select_action(logits, model::ArgmaxDecode{});
        r.probabilities.push_back(model::softmax_probs(logits));
        r.actions.push_back(a.index());
        const StateVec next = sanitise(predictor.next(r.states, r.actions), s0, t + 1);
        r.states.push_back(next);
        r.acuity.push_back(rubric.score(sim::PatientState::from_features(next)));
    }
    return r;
}

std::vector<StateVec> initial_states(const sim::SimConfig& config, int n, std::uint64_t seed)
{
    if (n < 1) throw DomainError("initial_states: need at least one state");
    const sim::Simulator simulator(config);
    std::vector<StateVec> out;
    for (int i = 0; i < n; ++i) {
        sim::Rng rng(sim::derive_seed(seed, static_cast<std::uint64_t>(i)));
        out.push_back(simulator.initial_state(rng).features());
    }
    return out;
}

std::vector<double> final_acuities(const model::SequenceModel& policy, const Predictor& predictor, const std::vector<StateVec>& states,
                                   const sim::AcuityRubric& rubric, const RolloutOptions& opts)
{
    std::vector<double> out;
    out.reserve(states.size());
    for (const auto& s : states) out.push_back(rollout(policy, predictor, s, rubric, opts).final_acuity());
    return out;
}

std::vector<StateVec> simulate_actions(const sim::SimConfig& config, const StateVec& s0, const std::vector<int>& actions)
{
    sim::SimConfig c = config;
    c.noise = 0.0;
    const sim::Simulator simulator(c);
    sim::Rng rng(0);
    std::vector<StateVec> out{s0};
    auto s = sim::PatientState::from_features(s0);
    for (int a : actions) {
        s = simulator.transition(s, sim::DoseAction::from_index(a), rng);
        out.push_back(s.features());
    }
    return out;
}

} // namespace medt::eval
