#pragma once

#include "medt/checkpoint.hpp"
#include "medt/dataset.hpp"
#include "medt/models.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

namespace medt::train {

using model::SequenceModel;
using model::Variant;

struct TrainConfig {
    Variant variant = Variant::MeDT;
    int batch_size = 64;
    double learning_rate = 6e-4;
    int epochs = 10;
    int context_steps = model::kContextSteps;
    std::uint64_t seed = 0;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    /// First-moment decay; 0 gives the momentum-free adaptive update.
    double beta1 = 0.0;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int warmup_steps = 0;
    double validation_fraction = 0.1;
    /// Pad every batch to context_steps (true) or to its longest episode.
    bool pad_to_context = true;
    int atg_tokens = 1;
    bool residual_head = false;
    nn::TransformerConfig transformer;

    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
/// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, TrainConfig& c);

struct Batch {
    std::vector<int> episodes;
    int padded_steps = 0;
};

/// Epoch-seeded shuffle of `episodes` cut into batches of batch_size (the
/// last one may be short). Each batch is padded to context or to its
/// longest member.
std::vector<Batch> make_batches(const data::Dataset& d, const std::vector<int>& episodes, const TrainConfig& c, std::uint64_t epoch_seed);

/// Per-step validity mask for one episode inside a padded batch.
std::vector<char> step_mask(int length, int padded_steps);

/// Policy input for teacher forcing: RTG = outcome, ATG = acuity after a_t.
model::Prefix policy_prefix(const data::Trajectory& tr);

/// Cross-entropy over valid steps of one episode.
nn::Var policy_loss(nn::Tape& t, const SequenceModel& m, const data::Trajectory& tr, int padded_steps,
                    nn::DropoutContext* dropout = nullptr);
/// Mean squared error of normalised s_{t+1} over valid steps of one episode.
nn::Var predictor_loss(nn::Tape& t, const SequenceModel& m, const data::Trajectory& tr, int padded_steps,
                       nn::DropoutContext* dropout = nullptr);

/// Mean of the per-episode loss (no dropout, no gradients).
double evaluate_loss(const SequenceModel& m, const data::Dataset& d, const std::vector<int>& episodes);

struct CurvePoint {
    int epoch = 0;
    std::string split; // "train" or "validation"
    double loss = 0.0;
};

std::string curve_csv(const std::vector<CurvePoint>& curve);

struct EpochReport {
    int epoch = 0;
    double train_loss = 0.0;       // mean over batches
    double train_median = 0.0;     // median over batches
    double validation_loss = 0.0;
    double seconds = 0.0;
};

struct TrainResult {
    SequenceModel model; // parameters of the best validation epoch
    model::CheckpointMeta meta;
    std::vector<CurvePoint> curve;
    std::vector<EpochReport> epochs; // index 0 is the untrained model
    int best_epoch = 0;
    data::Split split;
};

using EpochCallback = std::function<void(const EpochReport&)>;

/// Adaptive-moment update with decoupled weight decay on matrices, global
/// gradient-norm clipping, and f32 rounding of the updated values.
class Optimizer {
public:
    Optimizer(const TrainConfig& c, nn::ParameterSet& params);
    /// Returns the pre-clip gradient norm.
    double step(nn::ParameterSet& params);
    int steps() const { return step_; }

private:
    TrainConfig config_;
    std::vector<Tensor> m_, v_;
    int step_ = 0;
};

/// Trains BC, DT or MeDT with cross-entropy on behaviour actions. Throws
/// NumericError if the loss becomes non-finite.
TrainResult train_policy(const data::Dataset& d, const TrainConfig& c, const EpochCallback& on_epoch = {});
/// Trains the state predictor with MSE on the next state.
TrainResult train_predictor(const data::Dataset& d, const TrainConfig& c, const EpochCallback& on_epoch = {});

/// Mean squared error (normalised units) of the copy-current-state baseline
/// and of the predictor on the given episodes.
struct PredictorScore {
    double model_mse = 0.0;
    double copy_mse = 0.0;
    double improvement() const { return copy_mse > 0.0 ? 1.0 - model_mse / copy_mse : 0.0; }
};
PredictorScore score_predictor(const SequenceModel& m, const data::Dataset& d, const std::vector<int>& episodes);

/// Fraction of steps where the policy's argmax equals the behaviour mode.
double mode_agreement(const SequenceModel& m, const data::Dataset& d, const std::vector<int>& episodes);

} // namespace medt::train
