#include "doctest.h"

#include "helpers.hpp"
#include "medt/error.hpp"
#include "medt/ope.hpp"

#include <cmath>
#include <random>

using namespace medt;
using namespace medt::ope;

namespace {

OpeStep step(int action, double reward, double behavior, std::vector<double> pi, int state = 0)
{
    OpeStep s;
    s.state = state;
    s.features = {static_cast<double>(state)};
    s.action = action;
    s.reward = reward;
    s.behavior_prob = behavior;
    s.pi = std::move(pi);
    return s;
}

/// Random episodes whose only reward arrives on the last step.
OpeData terminal_reward_data(std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    std::uniform_int_distribution<int> len(1, 6);
    OpeData d;
    for (int n = 0; n < 40; ++n) {
        OpeEpisode e;
        const int T = len(rng);
        for (int t = 0; t < T; ++t) {
            const double p = u(rng);
            const int a = u(rng) < 0.5 ? 0 : 1;
            e.steps.push_back(step(a, t + 1 == T ? (u(rng) < 0.5 ? 1.0 : -1.0) : 0.0, u(rng), {p, 1.0 - p}));
        }
        d.push_back(e);
    }
    return d;
}

TabularMdp two_state_cycle()
{
    TabularMdp m;
    m.states = 2;
    m.actions = 1;
    m.initial = {1.0, 0.0};
    m.P = {{{0.0, 1.0}}, {{1.0, 0.0}}};
    m.R = {{0.1}, {0.1}};
    return m;
}

} // namespace

TEST_SUITE("ope")
{
    TEST_CASE("single-episode WIS is the episode return")
    {
        OpeData d{{{step(0, 0.0, 0.3, {0.9, 0.1}), step(1, 2.0, 0.5, {0.2, 0.8})}}};
        CHECK(wis(d, 0.9).value == doctest::Approx(0.9 * 2.0).epsilon(1e-14));
    }

    TEST_CASE("two-episode WIS by hand")
    {
        // ratios 1/0.5 = 2 and 0.5/0.5 = 1, w = 1.5
        OpeData d{{{step(0, 1.0, 0.5, {1.0, 0.0})}}, {{step(0, 0.0, 0.5, {0.5, 0.5})}}};
        const double expect = 0.5 * (2.0 / 1.5 * 1.0 + 1.0 / 1.5 * 0.0);
        CHECK(wis(d, 1.0).value == doctest::Approx(expect).epsilon(1e-14));
        const auto iw = importance_weights(d);
        CHECK(iw.w[0] == doctest::Approx(1.5));
    }

    TEST_CASE("shorter episodes carry their final ratio forward")
    {
        OpeData d{{{step(0, 0.0, 0.5, {1.0, 0.0})}}, {{step(0, 0.0, 0.5, {0.5, 0.5}), step(1, 1.0, 0.25, {0.0, 1.0})}}};
        const auto iw = importance_weights(d);
        REQUIRE(iw.w.size() == 2);
        CHECK(iw.w[1] == doctest::Approx((2.0 + 4.0) / 2.0));
    }

    TEST_CASE("evaluation equal to behaviour gives the mean return")
    {
        const auto m = small_mdp();
        const auto b = small_behavior_policy();
        const auto d = sample_tabular(m, b, b, 300, 4);
        CHECK(wis(d, 0.95).value == doctest::Approx(mean_discounted_return(d, 0.95)).epsilon(1e-12));
    }

    TEST_CASE("zero-Q WDR equals WIS on terminal-reward data")
    {
        for (std::uint64_t s = 1; s <= 5; ++s) {
            const auto d = terminal_reward_data(s);
            CHECK(std::abs(wdr(d, ZeroQ(2), 0.97).value - wis(d, 0.97).value) < 1e-12);
        }
    }

    TEST_CASE("model-based FQE matches exact evaluation")
    {
        const auto m = small_mdp();
        const auto pi = small_target_policy();
        const auto exact = evaluate_exact(m, pi, 0.99);
        FqeReport rep;
        const auto q = fqe_tabular(m, pi, 0.99, 1e-12, 100000, &rep);
        CHECK(std::abs(initial_value(m, pi, *q) - exact.value) < 1e-6);
        for (int s = 0; s < 5; ++s)
            for (int a = 0; a < 3; ++a) CHECK(std::abs(q->at(s, a) - exact.Q[s][a]) < 1e-6);
        CHECK(rep.iterations > 0);
    }

    TEST_CASE("two-state cycle with gamma 0.9 has value 1")
    {
        const auto m = two_state_cycle();
        const TabularPolicy pi{{1.0}, {1.0}};
        CHECK(evaluate_exact(m, pi, 0.9).value == doctest::Approx(1.0).epsilon(1e-10));
        const auto q = fqe_tabular(m, pi, 0.9);
        CHECK(q->at(0, 0) == doctest::Approx(1.0).epsilon(1e-8));
        CHECK(q->at(1, 0) == doctest::Approx(1.0).epsilon(1e-8));
    }

    TEST_CASE("gamma 0 gives Q equal to the reward")
    {
        OpeData d;
        for (int i = 0; i < 3; ++i) d.push_back({{step(0, 0.7, 1.0, {1.0}), step(0, 0.7, 1.0, {1.0})}});
        const auto q = fqe_tabular(d, 1, 1, 0.0);
        CHECK(q->at(0, 0) == doctest::Approx(0.7).epsilon(1e-14));
        CHECK(fqe_value(d, *q, 0.0).value == doctest::Approx(0.7).epsilon(1e-14));
    }

    TEST_CASE("WDR with the exact Q is exact on deterministic dynamics")
    {
        const auto m = small_mdp(true);
        const auto b = small_behavior_policy();
        const auto pi = small_target_policy();
        const auto exact = evaluate_exact(m, pi, 0.99);
        TabularQ q(m.states, m.actions);
        for (int s = 0; s < m.states; ++s)
            for (int a = 0; a < m.actions; ++a) q.at(s, a) = exact.Q[s][a];
        const auto d = sample_tabular(m, b, pi, 200, 8);
        CHECK(std::abs(wdr(d, q, 0.99).value - exact.value) < 1e-6);
    }

    TEST_CASE("Monte Carlo error is zero for deterministic dynamics and policy")
    {
        const auto m = small_mdp(true);
        const TabularPolicy pi(5, std::vector<double>{0.0, 1.0, 0.0});
        const auto mc = mc_oracle(m, pi, 50, 0.99, 1);
        CHECK(mc.stderr_ < 1e-12);
        CHECK(mc.value == doctest::Approx(evaluate_exact(m, pi, 0.99).value).epsilon(1e-12));
    }

    TEST_CASE("Monte Carlo error shrinks like one over root n")
    {
        const auto m = small_mdp();
        const auto pi = small_target_policy();
        const auto a = mc_oracle(m, pi, 4000, 0.99, 3);
        const auto b = mc_oracle(m, pi, 16000, 0.99, 3);
        CHECK(b.stderr_ / a.stderr_ == doctest::Approx(0.5).epsilon(0.2));
    }

    TEST_CASE("sampled FQE and WIS land near the exact value")
    {
        const auto m = small_mdp();
        const auto b = small_behavior_policy();
        const auto pi = small_target_policy();
        const double truth = evaluate_exact(m, pi, 0.99).value;
        const auto d = sample_tabular(m, b, pi, 20000, 5);
        const auto q = fqe_tabular(d, m.states, m.actions, 0.99);
        CHECK(std::abs(fqe_value(d, *q, 0.99).value - truth) < 0.01 * std::abs(truth));
        CHECK(std::abs(wis(d, 0.99).value - truth) < 0.1 * std::abs(truth));
    }

    TEST_CASE("clip rate counts clamped ratios")
    {
        OpeData d{{{step(0, 1.0, 1e-7, {1.0, 0.0}), step(0, 1.0, 0.5, {0.5, 0.5})}}};
        const auto r = wis(d, 1.0);
        CHECK(r.clip_rate == doctest::Approx(0.5));
        const auto iw = importance_weights(d);
        CHECK(iw.cumulative[0][0] == kRatioMax);
    }

    TEST_CASE("validation rejects malformed input")
    {
        CHECK_THROWS_AS(wis({}, 0.9), DomainError);
        CHECK_THROWS_AS(wis({{{step(3, 0.0, 0.5, {0.5, 0.5})}}}, 0.9), DomainError);
        CHECK_THROWS_AS(wis({{{step(0, 0.0, 0.0, {0.5, 0.5})}}}, 0.9), DomainError);
        CHECK_THROWS_AS(wis({{{step(0, 0.0, 0.5, {0.5, 0.5}), step(0, 0.0, 0.5, {1.0})}}}, 0.9), ShapeError);
    }

    TEST_CASE("bootstrap is seeded and brackets the point estimate")
    {
        const auto m = small_mdp();
        const auto d = sample_tabular(m, small_behavior_policy(), small_target_policy(), 500, 6);
        auto est = [](const OpeData& x) { return wis(x, 0.99).value; };
        const auto a = bootstrap(d, est, 40, 2);
        const auto b = bootstrap(d, est, 40, 2);
        CHECK(a.values == b.values);
        CHECK(a.stddev > 0.0);
        CHECK(a.p025 <= a.p50);
        CHECK(a.p50 <= a.p975);
        CHECK_THROWS_AS(bootstrap(d, est, 1, 2), DomainError);
    }

    TEST_CASE("network FQE learns a constant one-step value")
    {
        OpeData d;
        std::mt19937_64 rng(1);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        for (int i = 0; i < 512; ++i) d.push_back({{step(i % 2, 1.0, 0.5, {0.5, 0.5})}});
        for (auto& e : d) e.steps[0].features = {u(rng), u(rng)};
        FqeNetworkConfig c;
        c.hidden = 16;
        c.iterations = 40;
        c.learning_rate = 1e-2;
        c.batch_size = 64;
        FqeReport rep;
        const auto q = fqe_network(d, 0.99, c, &rep);
        CHECK(fqe_value(d, *q, 0.99).value == doctest::Approx(1.0).epsilon(0.05));
        CHECK(rep.iterations == 40);
    }

    TEST_CASE("behaviour Monte Carlo in the simulator agrees with logged returns")
    {
        const sim::SimConfig c;
        const auto mc = mc_oracle(c, BehaviorEpisodePolicy(c), 600, 0.99, 21);
        const auto d = data::generate_dataset(600, c, 22);
        std::vector<double> g;
        for (const auto& e : d.episodes) g.push_back(e.discounted_return(0.99));
        double mean = 0.0, ss = 0.0;
        for (double v : g) mean += v;
        mean /= static_cast<double>(g.size());
        for (double v : g) ss += (v - mean) * (v - mean);
        const double se = std::sqrt(ss / static_cast<double>(g.size() - 1) / static_cast<double>(g.size()));
        CHECK(mean == doctest::Approx(d.mean_discounted_return(0.99)).epsilon(1e-12));
        CHECK(std::abs(mc.value - mean) < 2.0 * std::sqrt(mc.stderr_ * mc.stderr_ + se * se));
    }

    TEST_CASE("dataset conversion keeps logged probabilities and policy rows")
    {
        const auto& ds = testing::small_dataset();
        const model::SequenceModel pol(testing::tiny_config(model::Variant::MeDT), 1);
        const auto d = from_dataset(ds, {0, 1, 2}, pol);
        REQUIRE(d.size() == 3);
        CHECK(d[1].steps.size() == static_cast<std::size_t>(ds.episodes[1].length()));
        CHECK(d[1].steps[0].behavior_prob == ds.episodes[1].behavior_probs[0]);
        CHECK(d[1].steps[0].pi.size() == 25);
        CHECK(d[1].steps[0].pi[4] == doctest::Approx(1.0 / 25.0));
        const model::SequenceModel bc(testing::tiny_config(model::Variant::BC), 1);
        const auto e = from_dataset(ds, {0}, pol, 0.0, &bc);
        CHECK(e[0].steps[0].behavior_prob == doctest::Approx(1.0 / 25.0));
        CHECK_THROWS_AS(from_dataset(ds, {0}, pol, 0.0, &pol), DomainError);
    }
}
