#include "medt/report.hpp"

#include "medt/error.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include <boost/math/distributions/students_t.hpp>

namespace medt::eval {

using nlohmann::json;

Terciles severity_terciles(const std::vector<int>& initial_acuity)
{
    if (initial_acuity.empty()) throw DomainError("severity_terciles: empty cohort");
    std::vector<int> sorted = initial_acuity;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    Terciles t;
    t.low_cut = sorted[(n + 2) / 3 - 1];
    t.high_cut = sorted[(2 * n + 2) / 3 - 1];
    for (int a : initial_acuity) t.stratum.push_back(a <= t.low_cut ? 1 : (a <= t.high_cut ? 2 : 3));
    return t;
}

namespace {

StratumStats summarise(const char* name, const std::vector<double>& v)
{
    StratumStats s;
    s.name = name;
    s.n = static_cast<int>(v.size());
    if (v.empty()) return s;
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / s.n;
    if (s.n > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - s.mean) * (x - s.mean);
        s.se = std::sqrt(ss / (s.n - 1)) / std::sqrt(static_cast<double>(s.n));
    }
    return s;
}

} // namespace

StrataRow stratify(const Terciles& t, const std::vector<double>& values)
{
    if (t.stratum.size() != values.size()) throw ShapeError("stratify: values and cohort differ in size");
    std::array<std::vector<double>, 4> groups;
    for (std::size_t i = 0; i < values.size(); ++i) {
        groups[0].push_back(values[i]);
        groups[static_cast<std::size_t>(t.stratum[i])].push_back(values[i]);
    }
    StrataRow row;
    for (std::size_t k = 0; k < 4; ++k) row[k] = summarise(kStratumNames[k], groups[k]);
    return row;
}

StrataRow stratify(const std::vector<int>& initial_acuity, const std::vector<double>& values)
{
    return stratify(severity_terciles(initial_acuity), values);
}

std::string table_csv(const std::vector<ReportRow>& rows)
{
    std::ostringstream os;
    os << std::setprecision(10) << "policy,stratum,n,mean,se\n";
    for (const auto& r : rows) {
        for (const auto& c : r.cells) {
            os << r.policy << ',' << c.name << ',' << c.n << ',';
            if (c.present()) os << c.mean << ',' << c.se;
            else os << ',';
            os << '\n';
        }
    }
    return os.str();
}

std::string table_text(const std::vector<ReportRow>& rows)
{
    std::size_t width = 6;
    for (const auto& r : rows) width = std::max(width, r.policy.size());
    std::ostringstream os;
    os << std::left << std::setw(static_cast<int>(width)) << "policy";
    for (const char* h : {"Overall", "Low", "Mid", "High"}) os << " | " << std::setw(16) << h;
    os << '\n';
    for (const auto& r : rows) {
        os << std::setw(static_cast<int>(width)) << r.policy;
        for (const auto& c : r.cells) {
            std::ostringstream cell;
            if (c.present()) cell << std::fixed << std::setprecision(2) << c.mean << " ± " << c.se;
            else cell << "absent";
            os << " | " << std::setw(16) << cell.str();
        }
        os << '\n';
    }
    return os.str();
}

void to_json(json& j, const StratumStats& s)
{
    if (!s.present()) {
        j = {{"stratum", s.name}, {"n", 0}, {"mean", nullptr}, {"se", nullptr}};
        return;
    }
    j = {{"stratum", s.name}, {"n", s.n}, {"mean", s.mean}, {"se", s.se}};
}

void to_json(json& j, const ReportRow& r)
{
    j = {{"policy", r.policy}, {"strata", r.cells}};
}

PairedTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b)
{
    if (a.size() != b.size()) throw ShapeError("paired_t_test: samples differ in size");
    if (a.size() < 2) throw DomainError("paired_t_test: need at least two pairs");
    PairedTest p;
    p.n = static_cast<int>(a.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) sum += a[i] - b[i];
    p.mean_difference = sum / p.n;
    double ss = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) ss += std::pow(a[i] - b[i] - p.mean_difference, 2);
    const double se = std::sqrt(ss / (p.n - 1) / p.n);
    if (se == 0.0) {
        p.t = p.mean_difference == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), p.mean_difference);
        p.p_two_sided = p.mean_difference == 0.0 ? 1.0 : 0.0;
        return p;
    }
    p.t = p.mean_difference / se;
    const boost::math::students_t dist(p.n - 1);
    p.p_two_sided = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(p.t)));
    return p;
}

void to_json(json& j, const PairedTest& p)
{
    j = {{"n", p.n}, {"mean_difference", p.mean_difference}, {"p_two_sided", p.p_two_sided}};
    j["t"] = std::isfinite(p.t) ? json(p.t) : json(p.t > 0 ? "inf" : "-inf");
}

} // namespace medt::eval
