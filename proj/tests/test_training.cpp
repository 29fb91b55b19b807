#include "doctest.h"

#include "helpers.hpp"
#include "medt/error.hpp"
#include "medt/training.hpp"

#include <cmath>

using namespace medt;
using namespace medt::train;

TEST_SUITE("training")
{
    TEST_CASE("untrained policy loss is ln 25")
    {
        const model::SequenceModel m(testing::tiny_config(Variant::MeDT), 1);
        std::vector<int> all;
        for (int i = 0; i < 10; ++i) all.push_back(i);
        CHECK(evaluate_loss(m, testing::small_dataset(), all) == doctest::Approx(std::log(25.0)).epsilon(1e-12));
    }

    TEST_CASE("training lowers the loss and emits a curve")
    {
        std::vector<EpochReport> seen;
        const auto r = train_policy(testing::small_dataset(), testing::tiny_train(Variant::DT, 3), [&](const EpochReport& e) { seen.push_back(e); });
        REQUIRE(r.epochs.size() == 4);
        CHECK(r.epochs.back().train_loss < r.epochs.front().train_loss);
        CHECK(r.epochs[0].validation_loss == doctest::Approx(std::log(25.0)).epsilon(1e-9));
        CHECK(seen.size() >= 3);
        const auto csv = curve_csv(r.curve);
        CHECK(csv.rfind("epoch,split,loss", 0) == 0);
        CHECK(csv.find("validation") != std::string::npos);
    }

    TEST_CASE("training is deterministic for a seed")
    {
        const auto c = testing::tiny_train(Variant::BC, 1);
        const auto a = train_policy(testing::small_dataset(), c);
        const auto b = train_policy(testing::small_dataset(), c);
        for (const auto& p : a.model.params()) CHECK(b.model.params().find(p.name)->value == p.value);
    }

    TEST_CASE("predictor training improves on the copy baseline")
    {
        auto c = testing::tiny_train(Variant::StatePredictor, 4);
        c.residual_head = true;
        const auto r = train_predictor(testing::small_dataset(), c);
        const auto s = score_predictor(r.model, testing::small_dataset(), r.split.validation);
        CHECK(s.copy_mse > 0.0);
        CHECK(s.model_mse < s.copy_mse);
    }

    TEST_CASE("config parsing rejects unknown keys and bad values")
    {
        TrainConfig c;
        CHECK_THROWS_AS(nlohmann::json({{"epochz", 3}}).get_to(c), ConfigError);
        CHECK_THROWS_AS(nlohmann::json({{"transformer", {{"layerz", 1}}}}).get_to(c), ConfigError);
        nlohmann::json{{"epochs", 7}}.get_to(c);
        CHECK(c.epochs == 7);
        c.learning_rate = 0.0;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }

    TEST_CASE("batches cover every episode once with per-batch padding")
    {
        const auto& d = testing::small_dataset();
        auto c = testing::tiny_train(Variant::MeDT);
        std::vector<int> eps;
        for (int i = 0; i < 37; ++i) eps.push_back(i);
        const auto batches = make_batches(d, eps, c, 1);
        CHECK(batches.size() == 3);
        std::vector<int> seen;
        for (const auto& b : batches) {
            int longest = 0;
            for (int e : b.episodes) {
                seen.push_back(e);
                longest = std::max(longest, d.episodes[static_cast<std::size_t>(e)].length());
            }
            CHECK(b.padded_steps == longest);
        }
        std::sort(seen.begin(), seen.end());
        CHECK(seen == eps);
        const auto mask = step_mask(3, 5);
        CHECK(mask == std::vector<char>{1, 1, 1, 0, 0});
    }

    TEST_CASE("mode agreement is a fraction")
    {
        const model::SequenceModel m(testing::tiny_config(Variant::BC), 1);
        const double a = mode_agreement(m, testing::small_dataset(), {0, 1, 2});
        CHECK(a >= 0.0);
        CHECK(a <= 1.0);
    }
}
