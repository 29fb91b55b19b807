#include "doctest.h"

#include "medt/autograd.hpp"
#include "medt/error.hpp"
#include "medt/gradcheck.hpp"
#include "medt/transformer.hpp"

#include <cmath>
#include <limits>
#include <random>

using namespace medt;
using namespace medt::ag;

namespace {

Parameter random_param(const std::string& name, Shape shape, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = n(rng);
    return {name, t, Tensor(shape)};
}

} // namespace

TEST_SUITE("autograd")
{
    TEST_CASE("matmul forward matches hand arithmetic")
    {
        Tape t;
        auto a = t.constant(Tensor::matrix(2, 2, {1, 2, 3, 4}));
        auto b = t.constant(Tensor::matrix(2, 2, {5, 6, 7, 8}));
        const auto& c = matmul(a, b).value();
        CHECK(c.at(0, 0) == 19.0);
        CHECK(c.at(0, 1) == 22.0);
        CHECK(c.at(1, 0) == 43.0);
        CHECK(c.at(1, 1) == 50.0);
        const auto& d = matmul_nt(a, b).value();
        CHECK(d.at(0, 0) == 17.0);
        CHECK(d.at(1, 1) == 53.0);
    }

    TEST_CASE("sum of product has the other operand as gradient")
    {
        Tape t;
        auto a = t.leaf(Tensor({3}, std::vector<double>{1, 2, 3}));
        auto b = t.leaf(Tensor({3}, std::vector<double>{4, 5, 6}));
        auto y = sum(mul(a, b));
        CHECK(y.value()[0] == 32.0);
        t.backward(y);
        const auto ga = t.grad(a.id);
        const auto gb = t.grad(b.id);
        CHECK(ga[0] == 4.0);
        CHECK(ga[2] == 6.0);
        CHECK(gb[1] == 2.0);
    }

    TEST_CASE("mismatched shapes raise ShapeError")
    {
        Tape t;
        auto a = t.constant(Tensor({2, 3}));
        auto b = t.constant(Tensor({2, 3}));
        CHECK_THROWS_AS(matmul(a, b), ShapeError);
        CHECK_THROWS_AS(add(a, t.constant(Tensor({3, 2}))), ShapeError);
    }

    TEST_CASE("masked softmax rows sum to one and fully masked rows are zero")
    {
        Tape t;
        auto x = t.constant(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
        const double inf = std::numeric_limits<double>::infinity();
        Tensor mask = Tensor::matrix(2, 3, {0, -inf, 0, -inf, -inf, -inf});
        const auto& y = softmax(x, &mask).value();
        CHECK(y.at(0, 0) + y.at(0, 2) == doctest::Approx(1.0).epsilon(1e-15));
        CHECK(y.at(0, 1) == 0.0);
        for (int c = 0; c < 3; ++c) CHECK(y.at(1, c) == 0.0);
    }

    TEST_CASE("cross entropy of uniform logits is ln K")
    {
        Tape t;
        auto logits = t.constant(Tensor({3, 25}, 0.0));
        const std::vector<int> targets{0, 7, 24};
        const std::vector<char> valid{1, 1, 0};
        CHECK(cross_entropy(logits, targets, valid).value()[0] == doctest::Approx(std::log(25.0)).epsilon(1e-14));
    }

    TEST_CASE("mse ignores invalid rows")
    {
        Tape t;
        auto p = t.constant(Tensor::matrix(2, 2, {1, 1, 5, 5}));
        const Tensor target = Tensor::matrix(2, 2, {0, 0, 0, 0});
        const std::vector<char> valid{1, 0};
        CHECK(mse(p, target, valid).value()[0] == doctest::Approx(1.0));
    }

    TEST_CASE("gradient check passes on a composite graph")
    {
        auto w = random_param("w", {4, 3}, 1);
        auto g = random_param("g", {3}, 2);
        auto b = random_param("b", {3}, 3);
        const Tensor x = random_param("x", {5, 4}, 4).value;
        auto loss = [&](Tape& t) {
            auto h = layernorm(matmul(t.constant(x), t.param(w)), t.param(g), t.param(b));
            auto s = softmax(gelu(h));
            const std::vector<int> targets{0, 1, 2, 0, 1};
            const std::vector<char> valid(5, 1);
            return add(cross_entropy(h, targets, valid), sum(mul(s, s)));
        };
        const auto r = grad_check(loss, {&w, &g, &b});
        CHECK(r.passed());
        CHECK(r.max_rel_error < 1e-6);
    }

    TEST_CASE("gradient check detects a corrupted gradient")
    {
        auto w = random_param("w", {3, 3}, 5);
        const Tensor x = random_param("x", {2, 3}, 6).value;
        auto loss = [&](Tape& t) { return sum(gelu(matmul(t.constant(x), t.param(w)))); };
        GradCheckOptions o;
        o.after_backward = [](std::vector<Parameter*>& ps) { ps[0]->grad[0] += 0.5; };
        CHECK_FALSE(grad_check(loss, {&w}, o).passed());
    }

    TEST_CASE("parameter gradients accumulate across backward calls")
    {
        auto w = random_param("w", {2}, 7);
        for (int i = 0; i < 2; ++i) {
            Tape t;
            t.backward(sum(t.param(w)));
        }
        CHECK(w.grad[0] == 2.0);
        w.zero_grad();
        CHECK(w.grad[0] == 0.0);
    }

    TEST_CASE("NoGrad tapes record no closures")
    {
        auto w = random_param("w", {2, 2}, 8);
        Tape t(Tape::Mode::NoGrad);
        auto y = sum(matmul(t.param(w), t.param(w)));
        CHECK(std::isfinite(y.value()[0]));
        CHECK_FALSE(t.requires_grad(y.id));
    }

    TEST_CASE("gather, slice and concat route gradients to their sources")
    {
        Tape t;
        auto a = t.leaf(Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6}));
        const std::vector<int> rows{2, 0, 2};
        auto g = gather_rows(a, rows);
        auto s = slice_cols(g, 1, 2);
        auto y = sum(s);
        CHECK(y.value()[0] == 6.0 + 2.0 + 6.0);
        t.backward(y);
        const auto ga = t.grad(a.id);
        CHECK(ga.at(2, 1) == 2.0);
        CHECK(ga.at(0, 1) == 1.0);
        CHECK(ga.at(1, 0) == 0.0);
    }
}
