#include "doctest.h"

#include "helpers.hpp"
#include "medt/error.hpp"
#include "medt/rollout.hpp"

#include <limits>

using namespace medt;
using namespace medt::eval;

namespace {

class NanPredictor : public Predictor {
public:
    StateVec next(const std::vector<StateVec>&, const std::vector<int>&) const override
    {
        StateVec s{};
        s[5] = std::numeric_limits<double>::quiet_NaN();
        return s;
    }
};

} // namespace

TEST_SUITE("rollout")
{
    TEST_CASE("linear decay schedule hits the target at the horizon")
    {
        AtgVec start{}, target{};
        start.fill(10.0);
        target.fill(2.0);
        const auto s = linear_decay_schedule(start, target, 4);
        REQUIRE(s.size() == 4);
        CHECK(s[0][0] == doctest::Approx(8.0));
        CHECK(s[1][3] == doctest::Approx(6.0));
        CHECK(s[3][6] == doctest::Approx(2.0));
        CHECK(linear_decay_schedule(start, target, 0).empty());
        sim::AcuityVector g;
        g.components = {4, 0, 2, 0, 0, 0, 0};
        const auto h = linear_decay_schedule(g, 2, 0.5);
        CHECK(h[1][0] == doctest::Approx(2.0));
        CHECK(h[0][2] == doctest::Approx(1.5));
    }

    TEST_CASE("horizon zero returns the initial state only")
    {
        const model::SequenceModel pol(testing::tiny_config(model::Variant::MeDT), 1);
        const sim::SimConfig c;
        const auto s0 = initial_states(c, 1, 3)[0];
        RolloutOptions o;
        o.horizon = 0;
        const auto r = rollout(pol, SimulatorOracle(c), s0, c.rubric, o);
        CHECK(r.actions.empty());
        CHECK(r.states.size() == 1);
        CHECK(r.final_acuity() == c.rubric.score(sim::PatientState::from_features(s0)).total());
    }

    TEST_CASE("oracle rollout reproduces the noise-free simulator")
    {
        const model::SequenceModel pol(testing::tiny_config(model::Variant::BC), 2);
        const sim::SimConfig c;
        for (const auto& s0 : initial_states(c, 5, 8)) {
            const auto r = rollout(pol, SimulatorOracle(c), s0, c.rubric);
            REQUIRE(r.actions.size() == 10);
            const auto expect = simulate_actions(c, s0, r.actions);
            REQUIRE(expect.size() == r.states.size());
            for (std::size_t t = 0; t < expect.size(); ++t) CHECK(expect[t] == r.states[t]);
        }
    }

    TEST_CASE("horizon above ten needs the override")
    {
        const model::SequenceModel pol(testing::tiny_config(model::Variant::DT), 1);
        const sim::SimConfig c;
        const auto s0 = initial_states(c, 1, 1)[0];
        RolloutOptions o;
        o.horizon = 11;
        CHECK_THROWS_AS(rollout(pol, SimulatorOracle(c), s0, c.rubric, o), DomainError);
        o.allow_long_horizon = true;
        CHECK(rollout(pol, SimulatorOracle(c), s0, c.rubric, o).actions.size() == 11);
    }

    TEST_CASE("non-finite predictor output raises NumericError naming the step")
    {
        const model::SequenceModel pol(testing::tiny_config(model::Variant::MeDT), 1);
        const sim::SimConfig c;
        const auto s0 = initial_states(c, 1, 1)[0];
        try {
            rollout(pol, NanPredictor{}, s0, c.rubric);
            FAIL("expected NumericError");
        } catch (const NumericError& e) {
            CHECK(std::string(e.what()).find("step 1") != std::string::npos);
        }
    }

    TEST_CASE("MeDT rollout carries the schedule and explicit schedules are honoured")
    {
        const model::SequenceModel pol(testing::tiny_config(model::Variant::MeDT), 4);
        const sim::SimConfig c;
        const auto s0 = initial_states(c, 1, 2)[0];
        RolloutOptions o;
        o.horizon = 3;
        const auto r = rollout(pol, SimulatorOracle(c), s0, c.rubric, o);
        CHECK(r.atg.size() == 3);
        o.atg = AtgSchedule(5, AtgVec{});
        CHECK(rollout(pol, SimulatorOracle(c), s0, c.rubric, o).atg == AtgSchedule(3, AtgVec{}));
        o.atg = AtgSchedule(2, AtgVec{});
        CHECK_THROWS_AS(rollout(pol, SimulatorOracle(c), s0, c.rubric, o), DomainError);
    }

    TEST_CASE("sampled rollouts are reproducible per seed")
    {
        const model::SequenceModel pol(testing::tiny_config(model::Variant::BC), 5);
        const sim::SimConfig c;
        const auto s0 = initial_states(c, 1, 4)[0];
        RolloutOptions o;
        o.sample = model::SampleDecode{42, 1.0};
        const auto a = rollout(pol, SimulatorOracle(c), s0, c.rubric, o);
        const auto b = rollout(pol, SimulatorOracle(c), s0, c.rubric, o);
        CHECK(a.actions == b.actions);
        o.sample->seed = 43;
        CHECK(rollout(pol, SimulatorOracle(c), s0, c.rubric, o).actions != a.actions);
    }

    TEST_CASE("predictor as a policy is rejected")
    {
        const model::SequenceModel pred(testing::tiny_config(model::Variant::StatePredictor), 1);
        const sim::SimConfig c;
        CHECK_THROWS_AS(rollout(pred, SimulatorOracle(c), initial_states(c, 1, 1)[0], c.rubric), DomainError);
        CHECK_THROWS_AS(ModelPredictor(model::SequenceModel(testing::tiny_config(model::Variant::BC), 1)), DomainError);
    }
}
