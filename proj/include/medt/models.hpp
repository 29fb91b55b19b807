#pragma once

#include "medt/dataset.hpp"
#include "medt/sim.hpp"
#include "medt/transformer.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace medt::model {

using nn::ParameterSet;
using nn::Tape;
using nn::Var;

inline constexpr int kContextSteps = 20;

enum class Variant { BC, DT, MeDT, StatePredictor };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);

enum class TokenType { Rtg, Atg, State, Action };

std::string_view token_type_name(TokenType t);

/// A token slot within one timestep. `component` is the organ index for
/// per-component ATG tokens, -1 otherwise.
struct TokenSlot {
    TokenType type;
    int component = -1;
};

/// Intra-step token order: BC (s,a), DT (r,s,a), MeDT (r,k,s,a), predictor (s,a).
/// With seven ATG tokens the k slot expands to one token per organ.
struct TokenLayout {
    Variant variant = Variant::MeDT;
    int atg_tokens = 1;

    std::vector<TokenSlot> slots() const;
    int tokens_per_step() const { return static_cast<int>(slots().size()); }
    int encoded_length(int steps) const { return tokens_per_step() * steps; }
    int slot_of(TokenType t) const;
    bool has(TokenType t) const { return slot_of(t) >= 0; }
    /// "s3", "k2:hepatic", ... (1-based steps)
    std::string label(int token) const;
};

struct ModelConfig {
    Variant variant = Variant::MeDT;
    int atg_tokens = 1;
    int context_steps = kContextSteps;
    /// Predictor only: add the current (normalised) state to the head output.
    bool residual_head = false;
    nn::TransformerConfig transformer;
    std::array<double, sim::kStateDim> state_mean{};
    std::array<double, sim::kStateDim> state_std{};
    std::array<double, sim::kOrgans> atg_scale{};

    TokenLayout layout() const { return {variant, atg_tokens}; }
    void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Sensible defaults with state statistics taken from a dataset.
ModelConfig default_config(Variant v, const data::Dataset& d, const nn::TransformerConfig& transformer);
void fit_normalisation(ModelConfig& c, const data::Dataset& d, const std::vector<int>* episodes = nullptr);

using StateVec = std::array<double, sim::kStateDim>;
using AtgVec = std::array<double, sim::kOrgans>;

/// Model input over T steps. `actions` may be one shorter than `states`:
/// the action slot of the final step is then filled with a placeholder that
/// no prediction can see.
struct Prefix {
    double rtg = 1.0;
    std::vector<AtgVec> atg;
    std::vector<StateVec> states;
    std::vector<int> actions;

    int steps() const { return static_cast<int>(states.size()); }

    /// First `steps` steps of an episode with teacher-forced inputs.
    static Prefix from_trajectory(const data::Trajectory& tr, int steps = -1);
};

struct TokenInput {
    Var tokens;                 // [n_tokens, model_dim]
    std::vector<char> key_valid;
    int steps = 0;              // unpadded
    int padded_steps = 0;
};

struct ModelForwardOptions {
    /// Zero-pad the encoded prefix to this many steps (0: no padding).
    int pad_to_steps = 0;
    nn::AttentionRecord* record = nullptr;
    nn::DropoutContext* dropout = nullptr;
    /// tokens whose embedding is replaced by zeros (deletion tests)
    const std::vector<char>* zeroed_tokens = nullptr;
};

/// The shared architecture behind every variant: per-type encoders
/// (linear + layernorm), per-step learned position embeddings, the causal
/// decoder, and one linear head.
class SequenceModel {
public:
    SequenceModel() = default;
    SequenceModel(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    TokenLayout layout() const { return config_.layout(); }
    ParameterSet& params() { return params_; }
    const ParameterSet& params() const { return params_; }
    const nn::CausalDecoder& decoder() const { return decoder_; }

    /// Hide every token of this type from attention (the token is still
    /// encoded but nothing reads it).
    void disable_token_type(TokenType t);
    bool token_type_enabled(TokenType t) const;

    TokenInput encode(Tape& tape, const Prefix& prefix, const ModelForwardOptions& opts = {}) const;

    /// Per-step action logits [T, 25], read at each state token.
    Var policy_logits(Tape& tape, const Prefix& prefix, const ModelForwardOptions& opts = {}) const;
    /// Per-step normalised next-state predictions [T, state_dim], read at
    /// each action token.
    Var predictor_output(Tape& tape, const Prefix& prefix, const ModelForwardOptions& opts = {}) const;

    /// Token index of the head position for step t (s-token or a-token).
    int head_token(int step) const;

    // Inference helpers (no gradient tape retained).
    std::vector<std::array<double, sim::kActions>> action_logits(const Prefix& prefix) const;
    std::vector<StateVec> predict_next_states(const std::vector<StateVec>& states, const std::vector<int>& actions) const;

    StateVec normalise_state(const StateVec& s) const;
    StateVec denormalise_state(const StateVec& s) const;
    AtgVec normalise_atg(const AtgVec& k) const;

private:
    Var hidden(Tape& tape, const Prefix& prefix, const ModelForwardOptions& opts) const;

    ModelConfig config_;
    ParameterSet params_;
    nn::CausalDecoder decoder_;
    std::vector<TokenType> disabled_;

    struct Encoder {
        ParameterSet::Id w = 0, b = 0, ln_g = 0, ln_b = 0;
    };
    std::optional<Encoder> rtg_enc_, atg_enc_, state_enc_;
    std::optional<ParameterSet::Id> atg_component_emb_;
    ParameterSet::Id action_emb_ = 0, action_ln_g_ = 0, action_ln_b_ = 0;
    ParameterSet::Id position_emb_ = 0;
    ParameterSet::Id head_w_ = 0, head_b_ = 0;
};

/// Copies every parameter whose name and shape exist in both models.
int copy_shared_parameters(const SequenceModel& from, SequenceModel& to);

// ---- decoding ----------------------------------------------------------------

struct ArgmaxDecode {};
struct SampleDecode {
    std::uint64_t seed = 0;
    double temperature = 1.0;
};

/// Argmax breaks ties toward the lower index. Sampling is a pure function of
/// (logits, seed, temperature).
sim::DoseAction select_action(std::span<const double> logits, const ArgmaxDecode&);
sim::DoseAction select_action(std::span<const double> logits, const SampleDecode&);

std::array<double, sim::kActions> softmax_probs(std::span<const double> logits);

} // namespace medt::model
