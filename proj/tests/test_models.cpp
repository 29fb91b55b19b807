#include "doctest.h"

#include "helpers.hpp"
#include "medt/error.hpp"
#include "medt/models.hpp"

#include <cmath>
#include <limits>

using namespace medt;
using namespace medt::model;

TEST_SUITE("models")
{
    TEST_CASE("token layouts per variant")
    {
        CHECK(TokenLayout{Variant::BC, 1}.tokens_per_step() == 2);
        CHECK(TokenLayout{Variant::DT, 1}.tokens_per_step() == 3);
        CHECK(TokenLayout{Variant::MeDT, 1}.tokens_per_step() == 4);
        CHECK(TokenLayout{Variant::MeDT, 7}.tokens_per_step() == 10);
        CHECK(TokenLayout{Variant::StatePredictor, 1}.tokens_per_step() == 2);
        const TokenLayout m{Variant::MeDT, 1};
        CHECK(m.slot_of(TokenType::Rtg) == 0);
        CHECK(m.slot_of(TokenType::Atg) == 1);
        CHECK(m.slot_of(TokenType::State) == 2);
        CHECK(m.slot_of(TokenType::Action) == 3);
        CHECK_FALSE(TokenLayout{Variant::BC, 1}.has(TokenType::Rtg));
        CHECK(m.label(6) == "s2");
        CHECK(TokenLayout{Variant::MeDT, 7}.label(4).find("k1:") == 0);
    }

    TEST_CASE("variant names parse back")
    {
        for (auto v : {Variant::BC, Variant::DT, Variant::MeDT, Variant::StatePredictor}) CHECK(parse_variant(variant_name(v)) == v);
        CHECK_THROWS_AS(parse_variant("gpt"), ConfigError);
    }

    TEST_CASE("untrained policy predicts uniformly")
    {
        const SequenceModel m(testing::tiny_config(Variant::MeDT), 1);
        const auto& tr = testing::small_dataset().episodes[0];
        const auto logits = m.action_logits(testing::prefix_of(tr, 3));
        REQUIRE(logits.size() == 3);
        const auto p = softmax_probs(logits.back());
        for (double v : p) CHECK(v == doctest::Approx(1.0 / 25.0).epsilon(1e-12));
    }

    TEST_CASE("padding does not change the unpadded logits")
    {
        SequenceModel m(testing::tiny_config(Variant::MeDT), 2);
        // Give the head non-zero weights so the check is not vacuous.
        std::mt19937_64 rng(4);
        for (auto& p : m.params())
            if (p.name.find("head") != std::string::npos) p.value = nn::init_normal(p.value.shape(), 0.5, rng);
        const auto& tr = testing::small_dataset().episodes[1];
        const auto prefix = Prefix::from_trajectory(tr, 4);
        Tape a(Tape::Mode::NoGrad), b(Tape::Mode::NoGrad);
        const auto plain = m.policy_logits(a, prefix).value();
        ModelForwardOptions o;
        o.pad_to_steps = 9;
        const auto padded = m.policy_logits(b, prefix, o).value();
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 25; ++c) CHECK(plain.at(r, c) == doctest::Approx(padded.at(r, c)).epsilon(1e-12));
    }

    TEST_CASE("logits at step t ignore later steps")
    {
        SequenceModel m(testing::tiny_config(Variant::DT), 3);
        std::mt19937_64 rng(5);
        for (auto& p : m.params())
            if (p.name.find("head") != std::string::npos) p.value = nn::init_normal(p.value.shape(), 0.5, rng);
        const auto& tr = testing::small_dataset().episodes[2];
        const auto shortp = testing::prefix_of(tr, 2);
        const auto longp = Prefix::from_trajectory(tr, 5);
        const auto a = m.action_logits(shortp);
        const auto b = m.action_logits(longp);
        for (int c = 0; c < 25; ++c) CHECK(a[1][static_cast<std::size_t>(c)] == doctest::Approx(b[1][static_cast<std::size_t>(c)]).epsilon(1e-12));
    }

    TEST_CASE("argmax ties go to the lower index and sampling is seeded")
    {
        std::array<double, 25> l{};
        l[3] = 2.0;
        l[17] = 2.0;
        CHECK(select_action(l, ArgmaxDecode{}).index() == 3);
        const auto a = select_action(l, SampleDecode{11, 1.0});
        const auto b = select_action(l, SampleDecode{11, 1.0});
        CHECK(a == b);
        CHECK_THROWS_AS(select_action(l, SampleDecode{1, 0.0}), DomainError);
        l[0] = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS(select_action(l, ArgmaxDecode{}), NumericError);
    }

    TEST_CASE("very low temperature sampling recovers the argmax")
    {
        std::array<double, 25> l{};
        l[9] = 1.0;
        for (std::uint64_t s = 0; s < 20; ++s) CHECK(select_action(l, SampleDecode{s, 1e-3}).index() == 9);
    }

    TEST_CASE("prefix shape errors")
    {
        const SequenceModel m(testing::tiny_config(Variant::MeDT), 1);
        auto p = testing::prefix_of(testing::small_dataset().episodes[0], 3);
        p.atg.pop_back();
        CHECK_THROWS_AS(m.action_logits(p), ShapeError);
        auto q = testing::prefix_of(testing::small_dataset().episodes[0], 3);
        q.actions.push_back(40);
        CHECK_THROWS_AS(m.action_logits(q), DomainError);
    }

    TEST_CASE("residual predictor starts at the copy baseline")
    {
        auto c = testing::tiny_config(Variant::StatePredictor);
        c.residual_head = true;
        const SequenceModel m(c, 1);
        const auto& tr = testing::small_dataset().episodes[0];
        const auto p = Prefix::from_trajectory(tr, 3);
        const auto next = m.predict_next_states(p.states, p.actions);
        for (int t = 0; t < 3; ++t)
            for (int i = 0; i < sim::kStateDim; ++i)
                CHECK(next[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)] ==
                      doctest::Approx(p.states[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)]).epsilon(1e-9));
    }

    TEST_CASE("disabling a type hides it and the state type cannot be disabled")
    {
        SequenceModel m(testing::tiny_config(Variant::MeDT), 1);
        m.disable_token_type(TokenType::Atg);
        CHECK_FALSE(m.token_type_enabled(TokenType::Atg));
        CHECK_THROWS_AS(m.disable_token_type(TokenType::State), DomainError);
    }

    TEST_CASE("copy_shared_parameters transfers matching tensors")
    {
        const SequenceModel a(testing::tiny_config(Variant::DT), 1);
        SequenceModel b(testing::tiny_config(Variant::MeDT), 2);
        const int n = copy_shared_parameters(a, b);
        CHECK(n > 0);
        const auto* pa = a.params().find(a.params().begin()->name);
        const auto* pb = b.params().find(pa->name);
        if (pb && pb->value.same_shape(pa->value)) CHECK(pb->value == pa->value);
    }
}
