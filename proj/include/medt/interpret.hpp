#pragma once

#include "medt/models.hpp"
#include "medt/transformer.hpp"

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace medt::interp {

/// n x n identity.
Tensor init_relevancy(int n);

/// Mean over heads of (grad * A) with negatives clamped to 0. A and grad are
/// heads x n x n; the result is n x n.
Tensor aggregate_attention(const Tensor& attention, const Tensor& grad);

/// R <- R + Abar R
void propagate(Tensor& R, const Tensor& abar);

/// Identity followed by propagate() over every recorded layer in forward order.
Tensor relevancy_from_record(const nn::AttentionRecord& record);

/// How the full matrix is rescaled for display. ReceptiveField divides row i
/// by the number of unmasked keys visible to token i; RowSum rescales every
/// row to sum 1.
enum class Normalization { ReceptiveField, RowSum };

std::string normalization_name(Normalization n);
Normalization parse_normalization(const std::string& s);

struct RelevancyMap {
    Tensor raw;                        ///< R after propagation, n x n
    Tensor matrix;                     ///< normalised display matrix
    std::vector<std::string> labels;   ///< one per token
    std::vector<char> key_valid;
    Normalization normalization = Normalization::ReceptiveField;
    int target_token = 0;
    int target_step = 0;               ///< 0-based decision step
    int target_action = 0;
    double target_logit = 0.0;
    std::vector<double> row;           ///< relevance of each token for the target, sums to 1
};

struct ExplainOptions {
    /// Decision step to explain (0-based); default is the last step.
    std::optional<int> step;
    /// Logit to explain; default is the action the model picks by argmax.
    std::optional<int> action;
    Normalization normalization = Normalization::ReceptiveField;
};

/// Forward with attention recording, backward from the target logit read at
/// the step's s-token, propagate, normalise, extract the target row.
RelevancyMap explain(const model::SequenceModel& m, const model::Prefix& prefix, const ExplainOptions& opts = {});

/// Mean relevance of the k-tokens of each step (the 7-token layout reduces
/// to one value per step; a 1-token layout passes through).
std::vector<double> atg_step_relevance(const model::SequenceModel& m, const RelevancyMap& r);

/// Relevance of each ATG component summed over steps (7-token layout only).
std::vector<double> atg_component_relevance(const model::SequenceModel& m, const RelevancyMap& r);

void to_json(nlohmann::json& j, const RelevancyMap& r);

/// Standalone SVG heatmap of the display matrix.
std::string heatmap_svg(const RelevancyMap& r);

/// Target logit after zeroing one input token's embedding.
double logit_with_token_zeroed(const model::SequenceModel& m, const model::Prefix& prefix, const RelevancyMap& r, int token);

struct DeletionResult {
    int top_token = 0;
    int bottom_token = 0;
    double top_change = 0.0;    ///< |logit - logit with top token zeroed|
    double bottom_change = 0.0;
};

/// Zeroes the most and least relevant unmasked input tokens, the target
/// token itself excluded.
DeletionResult deletion_test(const model::SequenceModel& m, const model::Prefix& prefix, const RelevancyMap& r);

} // namespace medt::interp
