#include "medt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace medt::ag {

namespace {

double evaluate(const std::function<Var(Tape&)>& loss)
{
    Tape tape;
    return loss(tape).value()[0];
}

} // namespace

GradCheckReport grad_check(const std::function<Var(Tape&)>& loss, std::vector<Parameter*> params,
                           const GradCheckOptions& opts)
{
    for (Parameter* p : params) p->zero_grad();
    {
        Tape tape;
        tape.backward(loss(tape));
    }
    if (opts.after_backward) opts.after_backward(params);

    GradCheckReport report;
    report.tolerance = opts.tol;
    for (Parameter* p : params) {
        ParamError pe{p->name, 0.0, 0};
        const std::size_t n = p->value.size();
        const std::size_t count = opts.max_entries == 0 ? n : std::min(n, opts.max_entries);
        // Spread the checked entries across the tensor when subsampling.
        const std::size_t stride = std::max<std::size_t>(1, n / count);
        for (std::size_t k = 0, i = 0; k < count && i < n; ++k, i += stride) {
            const double saved = p->value[i];
            p->value[i] = saved + opts.h;
            const double up = evaluate(loss);
            p->value[i] = saved - opts.h;
            const double down = evaluate(loss);
            p->value[i] = saved;
            const double numeric = (up - down) / (2.0 * opts.h);
            const double analytic = p->grad[i];
            const double denom = std::max({std::abs(analytic), std::abs(numeric), opts.abs_floor});
            const double rel = std::abs(analytic - numeric) / denom;
            if (rel > pe.max_rel_error) {
                pe.max_rel_error = rel;
                pe.worst_index = i;
            }
        }
        report.max_rel_error = std::max(report.max_rel_error, pe.max_rel_error);
        report.params.push_back(pe);
    }
    return report;
}

} // namespace medt::ag
