#include "doctest.h"

#include "medt/error.hpp"
#include "medt/gradcheck.hpp"
#include "medt/transformer.hpp"

#include <random>

using namespace medt;
using namespace medt::nn;

namespace {

TransformerConfig small()
{
    TransformerConfig c;
    c.layers = 2;
    c.heads = 2;
    c.model_dim = 8;
    c.ff_dim = 16;
    c.context_tokens = 6;
    c.dropout = 0.0;
    return c;
}

Tensor random_tokens(int n, int d, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    Tensor t({n, d});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = g(rng);
    return t;
}

} // namespace

TEST_SUITE("transformer")
{
    TEST_CASE("config validation")
    {
        auto c = small();
        CHECK_NOTHROW(c.validate());
        c.heads = 3;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }

    TEST_CASE("causal: earlier outputs ignore later tokens")
    {
        ParameterSet ps;
        std::mt19937_64 rng(1);
        CausalDecoder dec(small(), ps, "dec", rng);
        Tensor x = random_tokens(5, 8, 2);
        Tensor y = x;
        for (int c = 0; c < 8; ++c) y.at(4, c) += 0.5 * (c + 1);
        Tape t1(Tape::Mode::NoGrad), t2(Tape::Mode::NoGrad);
        const auto a = dec.forward(t1, ps, t1.constant(x)).value();
        const auto b = dec.forward(t2, ps, t2.constant(y)).value();
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 8; ++c) CHECK(a.at(r, c) == b.at(r, c));
        CHECK(a.at(4, 0) != b.at(4, 0));
    }

    TEST_CASE("hidden keys do not influence other tokens")
    {
        ParameterSet ps;
        std::mt19937_64 rng(3);
        CausalDecoder dec(small(), ps, "dec", rng);
        Tensor x = random_tokens(4, 8, 4);
        Tensor y = x;
        for (int c = 0; c < 8; ++c) y.at(1, c) = -7.0;
        const std::vector<char> valid{1, 0, 1, 1};
        ForwardOptions o;
        o.key_valid = &valid;
        Tape t1(Tape::Mode::NoGrad), t2(Tape::Mode::NoGrad);
        const auto a = dec.forward(t1, ps, t1.constant(x), o).value();
        const auto b = dec.forward(t2, ps, t2.constant(y), o).value();
        for (int r : {0, 2, 3})
            for (int c = 0; c < 8; ++c) CHECK(a.at(r, c) == doctest::Approx(b.at(r, c)).epsilon(1e-14));
    }

    TEST_CASE("decoder gradients pass a finite-difference check")
    {
        ParameterSet ps;
        std::mt19937_64 rng(5);
        CausalDecoder dec(small(), ps, "dec", rng);
        const Tensor x = random_tokens(4, 8, 6);
        const Tensor w = random_tokens(4, 8, 7);
        // A layer-normalised output has a nearly constant norm; project instead.
        auto loss = [&](ag::Tape& t) {
            auto y = dec.forward(t, ps, t.constant(x));
            return ag::sum(ag::mul(y, t.constant(w)));
        };
        ag::GradCheckOptions o;
        o.max_entries = 12;
        // Attention-key gradients are ~1e-7 here; a smaller step loses them to rounding.
        o.h = 1e-4;
        const auto r = ag::grad_check(loss, ps.pointers(), o);
        CHECK_MESSAGE(r.passed(), "max rel error " << r.max_rel_error);
    }

    TEST_CASE("attention record holds one row-stochastic map per layer")
    {
        ParameterSet ps;
        std::mt19937_64 rng(7);
        CausalDecoder dec(small(), ps, "dec", rng);
        Tape t;
        AttentionRecord rec;
        ForwardOptions o;
        o.record = &rec;
        auto y = dec.forward(t, ps, t.constant(random_tokens(3, 8, 8)), o);
        REQUIRE(rec.layers.size() == 2);
        const auto& a = rec.layers[0].attention;
        CHECK(a.dim(0) == 2);
        for (int h = 0; h < 2; ++h) {
            for (int i = 0; i < 3; ++i) {
                double s = 0.0;
                for (int j = 0; j < 3; ++j) {
                    const double v = a[static_cast<std::size_t>((h * 3 + i) * 3 + j)];
                    if (j > i) CHECK(v == 0.0);
                    s += v;
                }
                CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
            }
        }
        attention_grads(rec, ag::sum(y));
        CHECK(rec.grads_filled);
        CHECK(rec.layers[1].grad.same_shape(rec.layers[1].attention));
    }

    TEST_CASE("causal mask combines future and hidden keys")
    {
        const std::vector<char> valid{1, 0, 1};
        const auto m = causal_mask(3, &valid);
        CHECK(m.at(2, 0) == 0.0);
        CHECK(std::isinf(m.at(2, 1)));
        CHECK(std::isinf(m.at(0, 2)));
    }

    TEST_CASE("init_normal rounds to f32")
    {
        std::mt19937_64 rng(9);
        const auto t = init_normal({10}, 0.02, rng);
        for (double v : t.values()) CHECK(static_cast<double>(static_cast<float>(v)) == v);
    }
}
