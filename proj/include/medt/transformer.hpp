#pragma once

#include "medt/autograd.hpp"

#include <deque>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

namespace medt::nn {

using ag::Parameter;
using ag::Tape;
using ag::Var;

/// Owns named parameters with stable addresses. Modules hold indices.
class ParameterSet {
public:
    using Id = std::size_t;

    Id add(std::string name, Tensor value);
    Parameter& operator[](Id id) { return params_.at(id); }
    const Parameter& operator[](Id id) const { return params_.at(id); }
    const Parameter* find(const std::string& name) const;
    Parameter* find(const std::string& name);

    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;
    void zero_grad();
    std::vector<Parameter*> pointers();

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::deque<Parameter> params_;
};

/// Normal(0, std) weights rounded to f32 so checkpoints store them exactly.
Tensor init_normal(Shape shape, double stddev, std::mt19937_64& rng);

struct TransformerConfig {
    int layers = 6;
    int heads = 4;
    int model_dim = 128;
    int ff_dim = 512;
    int context_tokens = 80;
    double dropout = 0.1;

    void validate() const;
    std::size_t parameter_count() const;
};

void to_json(nlohmann::json& j, const TransformerConfig& c);
void from_json(const nlohmann::json& j, TransformerConfig& c);

/// Post-softmax attention per layer and, after attention_grads(), the
/// gradient of a scalar target with respect to it.
struct AttentionRecord {
    struct Layer {
        Tensor attention;       // heads x n x n
        Tensor grad;            // same shape; empty until filled
        std::vector<int> nodes; // one tape node per head
    };

    std::vector<Layer> layers;
    Tape* tape = nullptr;
    bool grads_filled = false;
};

/// Seeded dropout state; absent at evaluation.
struct DropoutContext {
    double rate = 0.0;
    std::mt19937_64* rng = nullptr;
};

/// Per-call options for the decoder.
struct ForwardOptions {
    /// key_valid[u] == 0 hides token u from every query (padding, disabled types).
    const std::vector<char>* key_valid = nullptr;
    AttentionRecord* record = nullptr;
    DropoutContext* dropout = nullptr;
};

/// Causal pre-norm decoder: x += attn(ln1(x)); x += ff(ln2(x)); final ln.
class CausalDecoder {
public:
    CausalDecoder() = default;
    CausalDecoder(const TransformerConfig& config, ParameterSet& params, const std::string& prefix, std::mt19937_64& rng);

    const TransformerConfig& config() const { return config_; }

    Var forward(Tape& tape, const ParameterSet& params, Var tokens, const ForwardOptions& opts = {}) const;

    /// Attention sublayer of one block on already-normalised input.
    Var causal_self_attention(Tape& tape, const ParameterSet& params, int layer, Var x, const ForwardOptions& opts) const;

private:
    struct Block {
        ParameterSet::Id ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };

    TransformerConfig config_;
    std::vector<Block> blocks_;
    ParameterSet::Id lnf_g = 0, lnf_b = 0;
};

/// Backward from `target` (a scalar on record.tape) and copy dTarget/dA into
/// each recorded layer. Model parameters are not touched.
void attention_grads(AttentionRecord& record, Var target);

/// Causal mask (0 / -inf) combined with hidden keys.
Tensor causal_mask(int n, const std::vector<char>* key_valid);

} // namespace medt::nn
