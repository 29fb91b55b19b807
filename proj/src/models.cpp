#include "medt/models.hpp"

#include "medt/error.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace medt::model {

using nlohmann::json;

std::string_view variant_name(Variant v)
{
    switch (v) {
    case Variant::BC: return "bc";
    case Variant::DT: return "dt";
    case Variant::MeDT: return "medt";
    case Variant::StatePredictor: return "predictor";
    }
    return "?";
}

Variant parse_variant(std::string_view name)
{
    for (Variant v : {Variant::BC, Variant::DT, Variant::MeDT, Variant::StatePredictor}) {
        if (variant_name(v) == name) return v;
    }
    throw ConfigError("unknown model variant '" + std::string(name) + "' (expected bc, dt, medt or predictor)");
}

std::string_view token_type_name(TokenType t)
{
    switch (t) {
    case TokenType::Rtg: return "r";
    case TokenType::Atg: return "k";
    case TokenType::State: return "s";
    case TokenType::Action: return "a";
    }
    return "?";
}

// ---- layout ------------------------------------------------------------------

std::vector<TokenSlot> TokenLayout::slots() const
{
    std::vector<TokenSlot> out;
    if (variant == Variant::DT || variant == Variant::MeDT) out.push_back({TokenType::Rtg});
    if (variant == Variant::MeDT) {
        if (atg_tokens == 1) {
            out.push_back({TokenType::Atg});
        } else {
            for (int o = 0; o < sim::kOrgans; ++o) out.push_back({TokenType::Atg, o});
        }
    }
    out.push_back({TokenType::State});
    out.push_back({TokenType::Action});
    return out;
}

int TokenLayout::slot_of(TokenType t) const
{
    const auto s = slots();
    for (std::size_t i = 0; i < s.size(); ++i)
        if (s[i].type == t) return static_cast<int>(i);
    return -1;
}

std::string TokenLayout::label(int token) const
{
    const auto s = slots();
    const int n = static_cast<int>(s.size());
    const TokenSlot& slot = s[static_cast<std::size_t>(token % n)];
    std::string out(token_type_name(slot.type));
    out += std::to_string(token / n + 1);
    if (slot.component >= 0) {
        out += ':';
        out += sim::organ_name(slot.component);
    }
    return out;
}

// ---- config ------------------------------------------------------------------

void ModelConfig::validate() const
{
    transformer.validate();
    if (atg_tokens != 1 && atg_tokens != sim::kOrgans) throw ConfigError("model: atg_tokens must be 1 or 7");
    if (context_steps < 1) throw ConfigError("model: context_steps must be positive");
    const int needed = layout().encoded_length(context_steps);
    if (transformer.context_tokens < needed) {
        throw ConfigError("model: context_tokens " + std::to_string(transformer.context_tokens) + " is shorter than " +
                          std::to_string(context_steps) + " steps x " + std::to_string(layout().tokens_per_step()) + " tokens");
    }
    for (double s : state_std)
        if (!(s > 0.0)) throw ConfigError("model: state_std entries must be positive");
    for (double s : atg_scale)
        if (!(s > 0.0)) throw ConfigError("model: atg_scale entries must be positive");
}

void to_json(json& j, const ModelConfig& c)
{
    j = {{"variant", variant_name(c.variant)},
         {"atg_tokens", c.atg_tokens},
         {"context_steps", c.context_steps},
         {"residual_head", c.residual_head},
         {"transformer", c.transformer},
         {"state_mean", c.state_mean},
         {"state_std", c.state_std},
         {"atg_scale", c.atg_scale}};
}

void from_json(const json& j, ModelConfig& c)
{
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.atg_tokens = j.at("atg_tokens").get<int>();
    c.context_steps = j.at("context_steps").get<int>();
    c.residual_head = j.value("residual_head", false);
    c.transformer = j.at("transformer").get<nn::TransformerConfig>();
    c.state_mean = j.at("state_mean").get<StateVec>();
    c.state_std = j.at("state_std").get<StateVec>();
    c.atg_scale = j.at("atg_scale").get<AtgVec>();
}

void fit_normalisation(ModelConfig& c, const data::Dataset& d, const std::vector<int>* episodes)
{
    std::vector<int> all;
    if (!episodes) {
        all.resize(d.episodes.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
        episodes = &all;
    }
    if (episodes->empty()) throw DomainError("fit_normalisation: no episodes");
    StateVec sum{}, sq{};
    double n = 0.0;
    for (int e : *episodes) {
        const auto& tr = d.episodes.at(static_cast<std::size_t>(e));
        for (int t = 0; t <= tr.length(); ++t) {
            const auto f = tr.state(t).features();
            for (int i = 0; i < sim::kStateDim; ++i) {
                sum[static_cast<std::size_t>(i)] += f[static_cast<std::size_t>(i)];
                sq[static_cast<std::size_t>(i)] += f[static_cast<std::size_t>(i)] * f[static_cast<std::size_t>(i)];
            }
            n += 1.0;
        }
    }
    for (std::size_t i = 0; i < sum.size(); ++i) {
        const double m = sum[i] / n;
        const double var = std::max(0.0, sq[i] / n - m * m);
        c.state_mean[i] = m;
        c.state_std[i] = var > 1e-12 ? std::sqrt(var) : 1.0;
    }
    for (int o = 0; o < sim::kOrgans; ++o)
        c.atg_scale[static_cast<std::size_t>(o)] = static_cast<double>(d.header.sim.rubric.max[static_cast<std::size_t>(o)]);
}

ModelConfig default_config(Variant v, const data::Dataset& d, const nn::TransformerConfig& transformer)
{
    ModelConfig c;
    c.variant = v;
    c.transformer = transformer;
    c.transformer.context_tokens = std::max(transformer.context_tokens, c.layout().encoded_length(c.context_steps));
    fit_normalisation(c, d);
    return c;
}

// ---- prefix ------------------------------------------------------------------

Prefix Prefix::from_trajectory(const data::Trajectory& tr, int steps)
{
    const int T = steps < 0 ? tr.length() : steps;
    if (T < 1 || T > tr.length()) throw DomainError("prefix: steps must be in 1.." + std::to_string(tr.length()));
    Prefix p;
    p.rtg = tr.outcome;
    for (int t = 0; t < T; ++t) {
        p.states.push_back(tr.state(t).features());
        p.actions.push_back(tr.actions[static_cast<std::size_t>(t)]);
        AtgVec k{};
        const auto& next = tr.atg(t);
        for (int o = 0; o < sim::kOrgans; ++o) k[static_cast<std::size_t>(o)] = next.components[static_cast<std::size_t>(o)];
        p.atg.push_back(k);
    }
    return p;
}

// ---- model -------------------------------------------------------------------

SequenceModel::SequenceModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config))
{
    config_.validate();
    std::mt19937_64 rng(seed);
    const int d = config_.transformer.model_dim;
    constexpr double std_w = 0.02;
    const auto layout = config_.layout();

    auto make_encoder = [&](const std::string& name, int in) {
        Encoder e;
        e.w = params_.add(name + ".w", nn::init_normal({in, d}, std_w, rng));
        // A nonzero bias keeps input magnitude visible through the layernorm.
        e.b = params_.add(name + ".b", nn::init_normal({d}, std_w, rng));
        e.ln_g = params_.add(name + ".ln.gain", Tensor({d}, 1.0));
        e.ln_b = params_.add(name + ".ln.bias", Tensor({d}));
        return e;
    };

    if (layout.has(TokenType::Rtg)) rtg_enc_ = make_encoder("embed.rtg", 1);
    if (layout.has(TokenType::Atg)) {
        if (config_.atg_tokens == 1) {
            atg_enc_ = make_encoder("embed.atg", sim::kOrgans);
        } else {
            atg_enc_ = make_encoder("embed.atg_component", 1);
            atg_component_emb_ = params_.add("embed.atg_component.organ", nn::init_normal({sim::kOrgans, d}, std_w, rng));
        }
    }
    state_enc_ = make_encoder("embed.state", sim::kStateDim);
    action_emb_ = params_.add("embed.action.table", nn::init_normal({sim::kActions, d}, std_w, rng));
    action_ln_g_ = params_.add("embed.action.ln.gain", Tensor({d}, 1.0));
    action_ln_b_ = params_.add("embed.action.ln.bias", Tensor({d}));
    position_emb_ = params_.add("embed.position", nn::init_normal({config_.context_steps, d}, std_w, rng));

    decoder_ = nn::CausalDecoder(config_.transformer, params_, "decoder", rng);

    const int out = config_.variant == Variant::StatePredictor ? sim::kStateDim : sim::kActions;
    const std::string head = config_.variant == Variant::StatePredictor ? "head.state" : "head.action";
    head_w_ = params_.add(head + ".w", Tensor({d, out}));
    head_b_ = params_.add(head + ".b", Tensor({out}));
}

void SequenceModel::disable_token_type(TokenType t)
{
    if (t == TokenType::State) throw DomainError("the state token type cannot be disabled");
    if (!token_type_enabled(t)) return;
    disabled_.push_back(t);
}

bool SequenceModel::token_type_enabled(TokenType t) const
{
    return std::find(disabled_.begin(), disabled_.end(), t) == disabled_.end();
}

StateVec SequenceModel::normalise_state(const StateVec& s) const
{
    StateVec out;
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = (s[i] - config_.state_mean[i]) / config_.state_std[i];
    return out;
}

StateVec SequenceModel::denormalise_state(const StateVec& s) const
{
    StateVec out;
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = s[i] * config_.state_std[i] + config_.state_mean[i];
    return out;
}

AtgVec SequenceModel::normalise_atg(const AtgVec& k) const
{
    AtgVec out;
    for (std::size_t i = 0; i < k.size(); ++i) out[i] = k[i] / config_.atg_scale[i];
    return out;
}

int SequenceModel::head_token(int step) const
{
    const auto l = layout();
    const TokenType at = config_.variant == Variant::StatePredictor ? TokenType::Action : TokenType::State;
    return step * l.tokens_per_step() + l.slot_of(at);
}

namespace {

Var encode_linear(Tape& t, const ParameterSet& ps, Var x, ParameterSet::Id w, ParameterSet::Id b, ParameterSet::Id g,
                  ParameterSet::Id beta)
{
    Var h = ag::add_bias(ag::matmul(x, t.param(ps[w])), t.param(ps[b]));
    return ag::layernorm(h, t.param(ps[g]), t.param(ps[beta]));
}

} // namespace

TokenInput SequenceModel::encode(Tape& t, const Prefix& prefix, const ModelForwardOptions& opts) const
{
    const int T = prefix.steps();
    const auto layout = config_.layout();
    if (T < 1) throw DomainError("encode: empty prefix");
    if (T > config_.context_steps) {
        throw DomainError("encode: prefix of " + std::to_string(T) + " steps exceeds context of " +
                          std::to_string(config_.context_steps));
    }
    const int P = std::max(T, opts.pad_to_steps);
    if (P > config_.context_steps) throw DomainError("encode: padding exceeds context");
    const int na = static_cast<int>(prefix.actions.size());
    if (na != T && na != T - 1) throw ShapeError("encode: need T or T-1 actions for T states");
    if (layout.has(TokenType::Atg) && static_cast<int>(prefix.atg.size()) != T) {
        throw ShapeError("encode: acuity-to-go needs one 7-component vector per step");
    }

    const int d = config_.transformer.model_dim;
    const auto slots = layout.slots();
    const int tps = static_cast<int>(slots.size());

    // Per-type token blocks, each with one row per padded step (or per
    // step x component for split ATG tokens).
    std::vector<Var> blocks;
    std::vector<int> block_of_slot(static_cast<std::size_t>(tps), -1);
    std::vector<int> block_stride(static_cast<std::size_t>(tps), 1);
    std::vector<int> block_offset(static_cast<std::size_t>(tps), 0);

    auto add_block = [&](TokenType type, Var v, int stride) {
        for (int s = 0; s < tps; ++s) {
            if (slots[static_cast<std::size_t>(s)].type != type) continue;
            block_of_slot[static_cast<std::size_t>(s)] = static_cast<int>(blocks.size());
            block_stride[static_cast<std::size_t>(s)] = stride;
            block_offset[static_cast<std::size_t>(s)] = std::max(0, slots[static_cast<std::size_t>(s)].component);
        }
        blocks.push_back(v);
    };

    if (rtg_enc_) {
        Tensor x({P, 1});
        for (int s = 0; s < T; ++s) x.at(s, 0) = prefix.rtg;
        add_block(TokenType::Rtg, encode_linear(t, params_, t.constant(std::move(x)), rtg_enc_->w, rtg_enc_->b, rtg_enc_->ln_g, rtg_enc_->ln_b), 1);
    }
    if (atg_enc_) {
        if (config_.atg_tokens == 1) {
            Tensor x({P, sim::kOrgans});
            for (int s = 0; s < T; ++s) {
                const auto k = normalise_atg(prefix.atg[static_cast<std::size_t>(s)]);
                std::copy(k.begin(), k.end(), x.row(s).begin());
            }
            add_block(TokenType::Atg, encode_linear(t, params_, t.constant(std::move(x)), atg_enc_->w, atg_enc_->b, atg_enc_->ln_g, atg_enc_->ln_b), 1);
        } else {
            Tensor x({P * sim::kOrgans, 1});
            std::vector<int> organ(static_cast<std::size_t>(P * sim::kOrgans));
            for (int s = 0; s < P; ++s) {
                const AtgVec k = s < T ? normalise_atg(prefix.atg[static_cast<std::size_t>(s)]) : AtgVec{};
                for (int o = 0; o < sim::kOrgans; ++o) {
                    x.at(s * sim::kOrgans + o, 0) = k[static_cast<std::size_t>(o)];
                    organ[static_cast<std::size_t>(s * sim::kOrgans + o)] = o;
                }
            }
            Var h = ag::add_bias(ag::matmul(t.constant(std::move(x)), t.param(params_[atg_enc_->w])), t.param(params_[atg_enc_->b]));
            h = ag::add(h, ag::embedding(t.param(params_[*atg_component_emb_]), organ));
            h = ag::layernorm(h, t.param(params_[atg_enc_->ln_g]), t.param(params_[atg_enc_->ln_b]));
            add_block(TokenType::Atg, h, sim::kOrgans);
        }
    }
    {
        Tensor x({P, sim::kStateDim});
        for (int s = 0; s < T; ++s) {
            const auto z = normalise_state(prefix.states[static_cast<std::size_t>(s)]);
            std::copy(z.begin(), z.end(), x.row(s).begin());
        }
        add_block(TokenType::State, encode_linear(t, params_, t.constant(std::move(x)), state_enc_->w, state_enc_->b, state_enc_->ln_g, state_enc_->ln_b), 1);
    }
    {
        std::vector<int> a(static_cast<std::size_t>(P), 0);
        for (int s = 0; s < na; ++s) {
            const int v = prefix.actions[static_cast<std::size_t>(s)];
            if (v < 0 || v >= sim::kActions) throw DomainError("encode: action index " + std::to_string(v) + " outside 0..24");
            a[static_cast<std::size_t>(s)] = v;
        }
        Var h = ag::embedding(t.param(params_[action_emb_]), a);
        add_block(TokenType::Action, ag::layernorm(h, t.param(params_[action_ln_g_]), t.param(params_[action_ln_b_])), 1);
    }

    // Interleave: stack all blocks, then gather rows in (step, slot) order.
    std::vector<int> base(blocks.size(), 0);
    for (std::size_t b = 1; b < blocks.size(); ++b) base[b] = base[b - 1] + blocks[b - 1].rows();
    Var stacked = ag::concat_rows(blocks);
    const int n = P * tps;
    std::vector<int> order(static_cast<std::size_t>(n));
    std::vector<int> step_of(static_cast<std::size_t>(n));
    TokenInput in;
    in.steps = T;
    in.padded_steps = P;
    in.key_valid.assign(static_cast<std::size_t>(n), 1);
    for (int s = 0; s < P; ++s) {
        for (int k = 0; k < tps; ++k) {
            const auto ks = static_cast<std::size_t>(k);
            const int tok = s * tps + k;
            const int b = block_of_slot[ks];
            order[static_cast<std::size_t>(tok)] = base[static_cast<std::size_t>(b)] + s * block_stride[ks] + block_offset[ks];
            step_of[static_cast<std::size_t>(tok)] = s;
            const bool padded = s >= T || (s == T - 1 && slots[ks].type == TokenType::Action && na == T - 1);
            if (padded || !token_type_enabled(slots[ks].type)) in.key_valid[static_cast<std::size_t>(tok)] = 0;
        }
    }
    Var tokens = ag::gather_rows(stacked, order);
    tokens = ag::add(tokens, ag::embedding(t.param(params_[position_emb_]), step_of));
    if (opts.zeroed_tokens) {
        if (opts.zeroed_tokens->size() != static_cast<std::size_t>(n)) throw ShapeError("encode: zeroed-token mask length mismatch");
        Tensor keep({n, d}, 1.0);
        for (int r = 0; r < n; ++r)
            if ((*opts.zeroed_tokens)[static_cast<std::size_t>(r)]) std::fill(keep.row(r).begin(), keep.row(r).end(), 0.0);
        tokens = ag::mul_const(tokens, keep);
    }
    in.tokens = tokens;
    return in;
}

Var SequenceModel::hidden(Tape& t, const Prefix& prefix, const ModelForwardOptions& opts) const
{
    TokenInput in = encode(t, prefix, opts);
    nn::ForwardOptions fo;
    fo.key_valid = &in.key_valid;
    fo.record = opts.record;
    fo.dropout = opts.dropout;
    Var h = decoder_.forward(t, params_, in.tokens, fo);
    std::vector<int> rows(static_cast<std::size_t>(in.padded_steps));
    for (int s = 0; s < in.padded_steps; ++s) rows[static_cast<std::size_t>(s)] = head_token(s);
    return ag::gather_rows(h, rows);
}

Var SequenceModel::policy_logits(Tape& t, const Prefix& prefix, const ModelForwardOptions& opts) const
{
    if (config_.variant == Variant::StatePredictor) throw DomainError("policy_logits: model is a state predictor");
    Var h = hidden(t, prefix, opts);
    return ag::add_bias(ag::matmul(h, t.param(params_[head_w_])), t.param(params_[head_b_]));
}

Var SequenceModel::predictor_output(Tape& t, const Prefix& prefix, const ModelForwardOptions& opts) const
{
    if (config_.variant != Variant::StatePredictor) throw DomainError("predictor_output: model is a policy");
    if (prefix.actions.size() != prefix.states.size()) throw ShapeError("predictor: states and actions must have equal length");
    Var h = hidden(t, prefix, opts);
    Var out = ag::add_bias(ag::matmul(h, t.param(params_[head_w_])), t.param(params_[head_b_]));
    if (!config_.residual_head) return out;
    const int P = out.rows();
    Tensor cur({P, sim::kStateDim});
    for (int s = 0; s < prefix.steps(); ++s) {
        const auto z = normalise_state(prefix.states[static_cast<std::size_t>(s)]);
        std::copy(z.begin(), z.end(), cur.row(s).begin());
    }
    return ag::add(out, t.constant(std::move(cur)));
}

std::vector<std::array<double, sim::kActions>> SequenceModel::action_logits(const Prefix& prefix) const
{
    Tape t(Tape::Mode::NoGrad);
    const Tensor& v = policy_logits(t, prefix).value();
    std::vector<std::array<double, sim::kActions>> out(static_cast<std::size_t>(prefix.steps()));
    for (int s = 0; s < prefix.steps(); ++s)
        std::copy(v.row(s).begin(), v.row(s).end(), out[static_cast<std::size_t>(s)].begin());
    return out;
}

std::vector<StateVec> SequenceModel::predict_next_states(const std::vector<StateVec>& states, const std::vector<int>& actions) const
{
    if (states.size() != actions.size()) throw ShapeError("predict_next_states: states and actions must have equal length");
    Prefix p;
    p.states = states;
    p.actions = actions;
    Tape t(Tape::Mode::NoGrad);
    const Tensor& v = predictor_output(t, p).value();
    std::vector<StateVec> out(states.size());
    for (std::size_t s = 0; s < states.size(); ++s) {
        StateVec z;
        std::copy(v.row(static_cast<int>(s)).begin(), v.row(static_cast<int>(s)).end(), z.begin());
        out[s] = denormalise_state(z);
    }
    return out;
}

int copy_shared_parameters(const SequenceModel& from, SequenceModel& to)
{
    int copied = 0;
    for (auto& p : to.params()) {
        const auto* src = from.params().find(p.name);
        if (!src || !src->value.same_shape(p.value)) continue;
        p.value = src->value;
        ++copied;
    }
    return copied;
}

// ---- decoding ----------------------------------------------------------------

namespace {

void require_logits(std::span<const double> logits)
{
    if (logits.size() != static_cast<std::size_t>(sim::kActions)) {
        throw ShapeError("select_action: expected 25 logits, got " + std::to_string(logits.size()));
    }
    for (double v : logits)
        if (!std::isfinite(v)) throw NumericError("select_action: non-finite logit");
}

} // namespace

std::array<double, sim::kActions> softmax_probs(std::span<const double> logits)
{
    require_logits(logits);
    std::array<double, sim::kActions> p{};
    const double m = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) z += p[i] = std::exp(logits[i] - m);
    for (double& v : p) v /= z;
    return p;
}

sim::DoseAction select_action(std::span<const double> logits, const ArgmaxDecode&)
{
    require_logits(logits);
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i)
        if (logits[i] > logits[best]) best = i;
    return sim::DoseAction::from_index(static_cast<int>(best));
}

sim::DoseAction select_action(std::span<const double> logits, const SampleDecode& mode)
{
    require_logits(logits);
    if (!(mode.temperature > 0.0)) throw DomainError("select_action: temperature must be positive");
    std::array<double, sim::kActions> scaled{};
    for (std::size_t i = 0; i < scaled.size(); ++i) scaled[i] = logits[i] / mode.temperature;
    const auto p = softmax_probs(scaled);
    std::mt19937_64 rng(mode.seed);
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    double c = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        c += p[i];
        if (u < c) return sim::DoseAction::from_index(static_cast<int>(i));
    }
    return sim::DoseAction::from_index(sim::kActions - 1);
}

} // namespace medt::model
