#include "medt/interpret.hpp"

#include "medt/error.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace medt::interp {

using nlohmann::json;

Tensor init_relevancy(int n)
{
    if (n < 1) throw DomainError("init_relevancy: need at least one token");
    return Tensor::identity(n);
}

Tensor aggregate_attention(const Tensor& attention, const Tensor& grad)
{
    if (attention.rank() != 3 || !attention.same_shape(grad)) throw ShapeError("aggregate_attention: expected matching heads x n x n tensors");
    const int heads = attention.dim(0), n = attention.dim(1);
    if (attention.dim(2) != n) throw ShapeError("aggregate_attention: attention maps must be square");
    Tensor out({n, n});
    const std::size_t nn = static_cast<std::size_t>(n) * static_cast<std::size_t>(n);
    for (int h = 0; h < heads; ++h) {
        for (std::size_t i = 0; i < nn; ++i) out[i] += std::max(0.0, grad[h * nn + i] * attention[h * nn + i]);
    }
    for (std::size_t i = 0; i < nn; ++i) out[i] /= heads;
    return out;
}

void propagate(Tensor& R, const Tensor& abar)
{
    const int n = R.rows();
    if (R.rank() != 2 || R.cols() != n || !R.same_shape(abar)) throw ShapeError("propagate: expected conformable square matrices");
    Tensor delta({n, n});
    for (int i = 0; i < n; ++i) {
        for (int k = 0; k < n; ++k) {
            const double a = abar.at(i, k);
            if (a == 0.0) continue;
            for (int j = 0; j < n; ++j) delta.at(i, j) += a * R.at(k, j);
        }
    }
    for (std::size_t i = 0; i < R.size(); ++i) R[i] += delta[i];
}

Tensor relevancy_from_record(const nn::AttentionRecord& record)
{
    if (record.layers.empty()) throw Error("relevancy: no attention was recorded");
    if (!record.grads_filled) throw Error("relevancy: attention gradients have not been computed");
    Tensor R = init_relevancy(record.layers.front().attention.dim(1));
    for (const auto& layer : record.layers) propagate(R, aggregate_attention(layer.attention, layer.grad));
    return R;
}

std::string normalization_name(Normalization n)
{
    return n == Normalization::ReceptiveField ? "receptive_field" : "row_sum";
}

Normalization parse_normalization(const std::string& s)
{
    if (s == "receptive_field") return Normalization::ReceptiveField;
    if (s == "row_sum") return Normalization::RowSum;
    throw ConfigError("unknown relevancy normalization '" + s + "' (expected receptive_field or row_sum)");
}

namespace {

Tensor normalise(const Tensor& R, const std::vector<char>& key_valid, Normalization mode)
{
    const int n = R.rows();
    Tensor out = R;
    int visible = 0;
    for (int i = 0; i < n; ++i) {
        if (key_valid[static_cast<std::size_t>(i)]) ++visible;
        double div = 0.0;
        if (mode == Normalization::ReceptiveField) {
            div = std::max(visible, 1);
        } else {
            for (int j = 0; j < n; ++j) div += R.at(i, j);
        }
        if (div > 0.0)
            for (int j = 0; j < n; ++j) out.at(i, j) /= div;
    }
    return out;
}

} // namespace

RelevancyMap explain(const model::SequenceModel& m, const model::Prefix& prefix, const ExplainOptions& opts)
{
    if (m.config().variant == model::Variant::StatePredictor) throw DomainError("explain: model is a state predictor");
    const int T = prefix.steps();
    if (T < 1) throw DomainError("explain: empty prefix");
    const int step = opts.step.value_or(T - 1);
    if (step < 0 || step >= T) throw DomainError("explain: step " + std::to_string(step) + " outside the prefix");

    RelevancyMap r;
    r.normalization = opts.normalization;
    r.target_step = step;
    {
        ag::Tape probe(ag::Tape::Mode::NoGrad);
        r.key_valid = m.encode(probe, prefix).key_valid;
    }

    ag::Tape tape;
    nn::AttentionRecord record;
    model::ModelForwardOptions fo;
    fo.record = &record;
    auto logits = m.policy_logits(tape, prefix, fo);
    const auto row = logits.value().row(step);
    std::array<double, sim::kActions> lv{};
    std::copy(row.begin(), row.end(), lv.begin());
    r.target_action = opts.action.value_or(model::select_action(lv, model::ArgmaxDecode{}).index());
    if (r.target_action < 0 || r.target_action >= sim::kActions) throw DomainError("explain: action out of range");
    r.target_logit = lv[static_cast<std::size_t>(r.target_action)];
    auto target = ag::sum(ag::slice_cols(ag::slice_rows(logits, step, step + 1), r.target_action, r.target_action + 1));
    nn::attention_grads(record, target);

    r.raw = relevancy_from_record(record);
    r.matrix = normalise(r.raw, r.key_valid, r.normalization);
    r.target_token = m.head_token(step);
    const auto layout = m.layout();
    for (int i = 0; i < r.raw.rows(); ++i) r.labels.push_back(layout.label(i));

    // Per-entry receptive-field share, then the extracted row is rescaled to a distribution.
    const int n = r.raw.rows();
    r.row.assign(static_cast<std::size_t>(n), 0.0);
    double total = 0.0;
    for (int u = 0; u < n; ++u) {
        if (!r.key_valid[static_cast<std::size_t>(u)] && u != r.target_token) continue;
        r.row[static_cast<std::size_t>(u)] = r.matrix.at(r.target_token, u);
        total += r.row[static_cast<std::size_t>(u)];
    }
    if (!(total > 0.0) || !std::isfinite(total)) throw NumericError("explain: relevancy row has no mass");
    for (double& v : r.row) v /= total;
    return r;
}

std::vector<double> atg_step_relevance(const model::SequenceModel& m, const RelevancyMap& r)
{
    const auto layout = m.layout();
    const int per = layout.tokens_per_step();
    const int steps = static_cast<int>(r.row.size()) / per;
    std::vector<double> out;
    if (!layout.has(model::TokenType::Atg)) return out;
    const auto slots = layout.slots();
    for (int s = 0; s < steps; ++s) {
        double sum = 0.0;
        int count = 0;
        for (int k = 0; k < per; ++k) {
            if (slots[static_cast<std::size_t>(k)].type != model::TokenType::Atg) continue;
            sum += r.row[static_cast<std::size_t>(s * per + k)];
            ++count;
        }
        out.push_back(sum / count);
    }
    return out;
}

std::vector<double> atg_component_relevance(const model::SequenceModel& m, const RelevancyMap& r)
{
    const auto layout = m.layout();
    if (layout.atg_tokens != sim::kOrgans) throw DomainError("atg_component_relevance: model does not use per-organ ATG tokens");
    const int per = layout.tokens_per_step();
    const auto slots = layout.slots();
    std::vector<double> out(sim::kOrgans, 0.0);
    for (std::size_t u = 0; u < r.row.size(); ++u) {
        const auto& slot = slots[u % static_cast<std::size_t>(per)];
        if (slot.type == model::TokenType::Atg) out[static_cast<std::size_t>(slot.component)] += r.row[u];
    }
    return out;
}

void to_json(json& j, const RelevancyMap& r)
{
    json rows = json::array();
    for (int i = 0; i < r.matrix.rows(); ++i) {
        const auto row = r.matrix.row(i);
        rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    std::vector<int> valid(r.key_valid.begin(), r.key_valid.end());
    j = {{"labels", r.labels},
         {"matrix", rows},
         {"normalization", normalization_name(r.normalization)},
         {"key_valid", valid},
         {"target", {{"token", r.target_token}, {"step", r.target_step}, {"action", r.target_action}, {"logit", r.target_logit}}},
         {"relevance", r.row}};
}

std::string heatmap_svg(const RelevancyMap& r)
{
    const int n = r.matrix.rows();
    constexpr int cell = 14, margin = 90;
    double peak = 0.0;
    for (double v : r.matrix.values()) peak = std::max(peak, v);
    std::ostringstream os;
    const int size = margin + n * cell + 10;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size << "\" font-family=\"monospace\" font-size=\"9\">\n";
    os << "<text x=\"4\" y=\"12\">relevancy (" << normalization_name(r.normalization) << ")</text>\n";
    for (int i = 0; i < n; ++i) {
        const int y = margin + i * cell;
        os << "<text x=\"4\" y=\"" << y + cell - 3 << "\"" << (i == r.target_token ? " font-weight=\"bold\"" : "") << ">"
           << r.labels[static_cast<std::size_t>(i)] << "</text>\n";
        os << "<text transform=\"translate(" << margin + i * cell + cell - 3 << "," << margin - 4 << ") rotate(-90)\">"
           << r.labels[static_cast<std::size_t>(i)] << "</text>\n";
        for (int j = 0; j < n; ++j) {
            const double v = peak > 0.0 ? r.matrix.at(i, j) / peak : 0.0;
            const int shade = 255 - static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
            os << "<rect x=\"" << margin + j * cell << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\"rgb(255,"
               << shade << ',' << shade << ")\"/>\n";
        }
    }
    os << "</svg>\n";
    return os.str();
}

double logit_with_token_zeroed(const model::SequenceModel& m, const model::Prefix& prefix, const RelevancyMap& r, int token)
{
    std::vector<char> zeroed(r.key_valid.size(), 0);
    if (token < 0 || static_cast<std::size_t>(token) >= zeroed.size()) throw DomainError("deletion: token out of range");
    zeroed[static_cast<std::size_t>(token)] = 1;
    ag::Tape t(ag::Tape::Mode::NoGrad);
    model::ModelForwardOptions fo;
    fo.zeroed_tokens = &zeroed;
    return m.policy_logits(t, prefix, fo).value().at(r.target_step, r.target_action);
}

DeletionResult deletion_test(const model::SequenceModel& m, const model::Prefix& prefix, const RelevancyMap& r)
{
    int top = -1, bottom = -1;
    for (int u = 0; u < r.target_token; ++u) {
        if (!r.key_valid[static_cast<std::size_t>(u)]) continue;
        const double v = r.row[static_cast<std::size_t>(u)];
        if (top < 0 || v > r.row[static_cast<std::size_t>(top)]) top = u;
        if (bottom < 0 || v < r.row[static_cast<std::size_t>(bottom)]) bottom = u;
    }
    if (top < 0) throw DomainError("deletion_test: no input token precedes the target");
    DeletionResult d;
    d.top_token = top;
    d.bottom_token = bottom;
    d.top_change = std::abs(r.target_logit - logit_with_token_zeroed(m, prefix, r, top));
    d.bottom_change = std::abs(r.target_logit - logit_with_token_zeroed(m, prefix, r, bottom));
    return d;
}

} // namespace medt::interp
