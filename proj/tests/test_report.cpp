#include "doctest.h"

#include "medt/error.hpp"
#include "medt/report.hpp"

#include <cmath>
#include <numeric>

using namespace medt;
using namespace medt::eval;

namespace {

/// Two-sided Student-t tail by Simpson integration of the density.
double t_two_sided(double t, int dof)
{
    const double nu = dof;
    const double c = std::exp(std::lgamma((nu + 1) / 2) - std::lgamma(nu / 2)) / std::sqrt(nu * M_PI);
    auto f = [&](double x) { return c * std::pow(1.0 + x * x / nu, -(nu + 1) / 2); };
    const double a = 0.0, b = std::abs(t);
    const int n = 20000;
    const double h = (b - a) / n;
    double s = f(a) + f(b);
    for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
    return 1.0 - 2.0 * s * h / 3.0;
}

} // namespace

TEST_SUITE("report")
{
    TEST_CASE("terciles split an evenly spread cohort into thirds")
    {
        std::vector<int> a;
        for (int i = 1; i <= 9; ++i) a.push_back(i);
        const auto t = severity_terciles(a);
        CHECK(t.low_cut == 3);
        CHECK(t.high_cut == 6);
        CHECK(t.stratum == std::vector<int>{1, 1, 1, 2, 2, 2, 3, 3, 3});
    }

    TEST_CASE("equal acuity always lands in the same stratum")
    {
        const std::vector<int> a{5, 5, 5, 5, 2, 9};
        const auto t = severity_terciles(a);
        for (std::size_t i = 1; i < 4; ++i) CHECK(t.stratum[i] == t.stratum[0]);
    }

    TEST_CASE("a constant cohort leaves strata absent")
    {
        const std::vector<int> a(6, 4);
        const std::vector<double> v{1, 2, 3, 4, 5, 6};
        const auto row = stratify(a, v);
        CHECK(row[0].n == 6);
        int present = 0;
        for (int s = 1; s < 4; ++s) present += row[static_cast<std::size_t>(s)].present();
        CHECK(present == 1);
        const auto csv = table_csv({{"bc", row}});
        CHECK(csv.rfind("policy,stratum,n,mean,se\n", 0) == 0);
        CHECK(csv.find(",0,,") != std::string::npos);
        CHECK(table_text({{"bc", row}}).find("absent") != std::string::npos);
    }

    TEST_CASE("stratum mean and standard error use the stratum's own n")
    {
        const std::vector<int> a{1, 1, 1, 5, 5, 5, 9, 9, 9};
        const std::vector<double> v{1, 2, 3, 10, 10, 10, 4, 8, 12};
        const auto row = stratify(a, v);
        CHECK(row[1].n == 3);
        CHECK(row[1].mean == doctest::Approx(2.0));
        CHECK(row[1].se == doctest::Approx(1.0 / std::sqrt(3.0)));
        CHECK(row[2].se == 0.0);
        CHECK(row[3].se == doctest::Approx(4.0 / std::sqrt(3.0)));
        const double m = std::accumulate(v.begin(), v.end(), 0.0) / 9.0;
        CHECK(row[0].mean == doctest::Approx(m));
    }

    TEST_CASE("identical policies report identical cells")
    {
        const std::vector<int> a{3, 7, 2, 8, 5, 5};
        const std::vector<double> v{1.5, 2.5, 3.5, 0.5, 2.0, 1.0};
        const auto x = stratify(a, v);
        const auto y = stratify(a, v);
        for (int s = 0; s < 4; ++s) {
            CHECK(x[static_cast<std::size_t>(s)].mean == y[static_cast<std::size_t>(s)].mean);
            CHECK(x[static_cast<std::size_t>(s)].se == y[static_cast<std::size_t>(s)].se);
        }
    }

    TEST_CASE("text table carries the four stratum columns")
    {
        const auto row = stratify(std::vector<int>{1, 2, 3}, std::vector<double>{1, 2, 3});
        const auto text = table_text({{"medt", row}});
        for (const char* h : {"Overall", "Low", "Mid", "High"}) CHECK(text.find(h) != std::string::npos);
        CHECK_THROWS_AS(stratify(std::vector<int>{1, 2}, std::vector<double>{1}), ShapeError);
    }

    TEST_CASE("paired t-test against a direct computation")
    {
        const std::vector<double> a{20.1, 19.4, 22.0, 18.7, 21.3, 20.9, 19.8, 20.2};
        const std::vector<double> b{21.0, 20.2, 22.4, 19.9, 21.1, 22.0, 20.5, 21.6};
        std::vector<double> d;
        for (std::size_t i = 0; i < a.size(); ++i) d.push_back(a[i] - b[i]);
        const double m = std::accumulate(d.begin(), d.end(), 0.0) / d.size();
        double ss = 0.0;
        for (double x : d) ss += (x - m) * (x - m);
        const double t = m / std::sqrt(ss / (d.size() - 1) / d.size());
        const auto r = paired_t_test(a, b);
        CHECK(r.n == 8);
        CHECK(r.mean_difference == doctest::Approx(m).epsilon(1e-12));
        CHECK(r.t == doctest::Approx(t).epsilon(1e-12));
        CHECK(r.p_two_sided == doctest::Approx(t_two_sided(t, 7)).epsilon(1e-6));
    }

    TEST_CASE("paired t-test degenerate cases")
    {
        const auto same = paired_t_test({1, 2, 3}, {1, 2, 3});
        CHECK(same.t == 0.0);
        CHECK(same.p_two_sided == 1.0);
        const auto shift = paired_t_test({1, 2, 3}, {2, 3, 4});
        CHECK(std::isinf(shift.t));
        CHECK(shift.p_two_sided == 0.0);
        nlohmann::json j = shift;
        CHECK(j["t"] == "-inf");
        CHECK_THROWS_AS(paired_t_test({1}, {2}), DomainError);
    }
}
