#pragma once

#include "medt/autograd.hpp"

#include <functional>
#include <string>
#include <vector>

namespace medt::ag {

struct ParamError {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
};

struct GradCheckReport {
    std::vector<ParamError> params;
    double max_rel_error = 0.0;
    double tolerance = 0.0;

    bool passed() const { return max_rel_error < tolerance; }
};

struct GradCheckOptions {
    double h = 1e-5;
    double tol = 1e-4;
    /// Denominator floor: rel = |a - n| / max(|a|, |n|, abs_floor).
    double abs_floor = 1e-6;
    /// Entries checked per parameter; 0 checks every entry.
    std::size_t max_entries = 0;
    /// Runs after the analytic backward; lets tests inject faults.
    std::function<void(std::vector<Parameter*>&)> after_backward;
};

/// Compares analytic gradients against central differences. `loss` must build
/// a fresh graph on the given tape (via Tape::param) and return a scalar.
GradCheckReport grad_check(const std::function<Var(Tape&)>& loss, std::vector<Parameter*> params,
                           const GradCheckOptions& opts = {});

} // namespace medt::ag
