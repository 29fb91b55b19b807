#pragma once

#include <array>
#include <string>
#include <vector>

#include "json.hpp"

namespace medt::eval {

inline constexpr std::array<const char*, 4> kStratumNames = {"overall", "low", "mid", "high"};

/// Severity terciles of initial total acuity. Cut points come from the
/// cohort itself, so equal acuity always lands in the same stratum.
struct Terciles {
    int low_cut = 0;            ///< acuity <= low_cut is "low"
    int high_cut = 0;           ///< acuity > high_cut is "high"
    std::vector<int> stratum;   ///< 1 = low, 2 = mid, 3 = high
};
Terciles severity_terciles(const std::vector<int>& initial_acuity);

struct StratumStats {
    std::string name;
    int n = 0;
    double mean = 0.0;
    double se = 0.0; ///< sample sd / sqrt(n); 0 when n < 2
    bool present() const { return n > 0; }
};

/// Overall, low, mid, high.
using StrataRow = std::array<StratumStats, 4>;

StrataRow stratify(const std::vector<int>& initial_acuity, const std::vector<double>& values);
StrataRow stratify(const Terciles& t, const std::vector<double>& values);

struct ReportRow {
    std::string policy;
    StrataRow cells;
};

/// policy,stratum,n,mean,se with absent strata written as n=0 and empty fields.
std::string table_csv(const std::vector<ReportRow>& rows);
/// Aligned "mean ± se" table with Overall/Low/Mid/High columns.
std::string table_text(const std::vector<ReportRow>& rows);

void to_json(nlohmann::json& j, const StratumStats& s);
void to_json(nlohmann::json& j, const ReportRow& r);

struct PairedTest {
    int n = 0;
    double mean_difference = 0.0; ///< mean(a - b)
    double t = 0.0;
    double p_two_sided = 1.0;
};

/// Paired Student t-test on a[i] - b[i].
PairedTest paired_t_test(const std::vector<double>& a, const std::vector<double>& b);

void to_json(nlohmann::json& j, const PairedTest& p);

} // namespace medt::eval
