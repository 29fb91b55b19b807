#include "medt/transformer.hpp"

#include "medt/error.hpp"

#include <cmath>
#include <limits>

namespace medt::nn {

ParameterSet::Id ParameterSet::add(std::string name, Tensor value)
{
    if (find(name)) throw Error("parameter set: duplicate name " + name);
    Parameter p;
    p.name = std::move(name);
    p.value = std::move(value);
    p.grad = Tensor(p.value.shape());
    params_.push_back(std::move(p));
    return params_.size() - 1;
}

const Parameter* ParameterSet::find(const std::string& name) const
{
    for (const auto& p : params_)
        if (p.name == name) return &p;
    return nullptr;
}

Parameter* ParameterSet::find(const std::string& name)
{
    for (auto& p : params_)
        if (p.name == name) return &p;
    return nullptr;
}

std::size_t ParameterSet::scalar_count() const
{
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

void ParameterSet::zero_grad()
{
    for (auto& p : params_) p.zero_grad();
}

std::vector<Parameter*> ParameterSet::pointers()
{
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
}

Tensor init_normal(Shape shape, double stddev, std::mt19937_64& rng)
{
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(dist(rng));
    return t;
}

// ---- config ----------------------------------------------------------------

void TransformerConfig::validate() const
{
    if (layers < 0) throw ConfigError("transformer: layers must be >= 0");
    if (heads <= 0 || model_dim <= 0 || ff_dim <= 0 || context_tokens <= 0) {
        throw ConfigError("transformer: heads, model_dim, ff_dim and context_tokens must be positive");
    }
    if (model_dim % heads != 0) {
        throw ConfigError("transformer: model_dim " + std::to_string(model_dim) + " not divisible by heads " + std::to_string(heads));
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("transformer: dropout must be in [0, 1)");
}

std::size_t TransformerConfig::parameter_count() const
{
    const auto d = static_cast<std::size_t>(model_dim);
    const auto f = static_cast<std::size_t>(ff_dim);
    const std::size_t block = 4 * d + 4 * (d * d + d) + (d * f + f) + (f * d + d);
    return static_cast<std::size_t>(layers) * block + 2 * d;
}

void to_json(nlohmann::json& j, const TransformerConfig& c)
{
    j = {{"layers", c.layers}, {"heads", c.heads}, {"model_dim", c.model_dim},
         {"ff_dim", c.ff_dim}, {"context_tokens", c.context_tokens}, {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, TransformerConfig& c)
{
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.model_dim = j.at("model_dim").get<int>();
    c.ff_dim = j.at("ff_dim").get<int>();
    c.context_tokens = j.at("context_tokens").get<int>();
    c.dropout = j.at("dropout").get<double>();
}

// ---- decoder ---------------------------------------------------------------

CausalDecoder::CausalDecoder(const TransformerConfig& config, ParameterSet& params, const std::string& prefix,
                             std::mt19937_64& rng)
    : config_(config)
{
    config_.validate();
    const int d = config_.model_dim;
    const int f = config_.ff_dim;
    constexpr double std_w = 0.02;
    // Residual projections get the depth-scaled init.
    const double std_out = std_w / std::sqrt(2.0 * std::max(1, config_.layers));
    for (int l = 0; l < config_.layers; ++l) {
        const std::string p = prefix + ".block" + std::to_string(l) + ".";
        Block b{};
        b.ln1_g = params.add(p + "ln1.gain", Tensor({d}, 1.0));
        b.ln1_b = params.add(p + "ln1.bias", Tensor({d}));
        b.wq = params.add(p + "attn.wq", init_normal({d, d}, std_w, rng));
        b.bq = params.add(p + "attn.bq", Tensor({d}));
        b.wk = params.add(p + "attn.wk", init_normal({d, d}, std_w, rng));
        b.bk = params.add(p + "attn.bk", Tensor({d}));
        b.wv = params.add(p + "attn.wv", init_normal({d, d}, std_w, rng));
        b.bv = params.add(p + "attn.bv", Tensor({d}));
        b.wo = params.add(p + "attn.wo", init_normal({d, d}, std_out, rng));
        b.bo = params.add(p + "attn.bo", Tensor({d}));
        b.ln2_g = params.add(p + "ln2.gain", Tensor({d}, 1.0));
        b.ln2_b = params.add(p + "ln2.bias", Tensor({d}));
        b.w1 = params.add(p + "ff.w1", init_normal({d, f}, std_w, rng));
        b.b1 = params.add(p + "ff.b1", Tensor({f}));
        b.w2 = params.add(p + "ff.w2", init_normal({f, d}, std_out, rng));
        b.b2 = params.add(p + "ff.b2", Tensor({d}));
        blocks_.push_back(b);
    }
    lnf_g = params.add(prefix + ".ln_f.gain", Tensor({d}, 1.0));
    lnf_b = params.add(prefix + ".ln_f.bias", Tensor({d}));
}

Tensor causal_mask(int n, const std::vector<char>* key_valid)
{
    constexpr double ninf = -std::numeric_limits<double>::infinity();
    Tensor mask({n, n});
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const bool hidden = j > i || (key_valid && !(*key_valid)[static_cast<std::size_t>(j)]);
            if (hidden) mask.at(i, j) = ninf;
        }
    }
    return mask;
}

namespace {

Var linear(Tape& t, const ParameterSet& ps, Var x, ParameterSet::Id w, ParameterSet::Id b)
{
    return ag::add_bias(ag::matmul(x, t.param(ps[w])), t.param(ps[b]));
}

Var maybe_dropout(Var x, DropoutContext* dropout)
{
    if (!dropout || dropout->rate <= 0.0 || !dropout->rng) return x;
    Tensor mask(x.shape());
    std::bernoulli_distribution keep(1.0 - dropout->rate);
    const double s = 1.0 / (1.0 - dropout->rate);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = keep(*dropout->rng) ? s : 0.0;
    return ag::mul_const(x, mask);
}

} // namespace

Var CausalDecoder::causal_self_attention(Tape& t, const ParameterSet& ps, int layer, Var x, const ForwardOptions& opts) const
{
    const Block& b = blocks_.at(static_cast<std::size_t>(layer));
    const int n = x.rows();
    if (n > config_.context_tokens) {
        throw DomainError("attention: sequence of " + std::to_string(n) + " tokens exceeds context of " +
                          std::to_string(config_.context_tokens));
    }
    if (opts.key_valid && opts.key_valid->size() != static_cast<std::size_t>(n)) {
        throw ShapeError("attention: key mask length does not match token count");
    }
    const int heads = config_.heads;
    const int dh = config_.model_dim / heads;
    const Tensor mask = causal_mask(n, opts.key_valid);
    Var q = linear(t, ps, x, b.wq, b.bq);
    Var k = linear(t, ps, x, b.wk, b.bk);
    Var v = linear(t, ps, x, b.wv, b.bv);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> outs;
    AttentionRecord::Layer rec;
    if (opts.record) rec.attention = Tensor({heads, n, n});
    for (int h = 0; h < heads; ++h) {
        Var qh = ag::slice_cols(q, h * dh, (h + 1) * dh);
        Var kh = ag::slice_cols(k, h * dh, (h + 1) * dh);
        Var vh = ag::slice_cols(v, h * dh, (h + 1) * dh);
        Var a = ag::softmax(ag::scale(ag::matmul_nt(qh, kh), inv_sqrt), &mask);
        if (opts.record) {
            rec.nodes.push_back(a.id);
            const Tensor& av = a.value();
            std::copy(av.values().begin(), av.values().end(), rec.attention.data() + static_cast<std::size_t>(h) * n * n);
        }
        outs.push_back(ag::matmul(a, vh));
    }
    if (opts.record) {
        opts.record->tape = &t;
        opts.record->grads_filled = false;
        opts.record->layers.push_back(std::move(rec));
    }
    Var cat = heads == 1 ? outs.front() : ag::concat_cols(outs);
    return linear(t, ps, cat, b.wo, b.bo);
}

Var CausalDecoder::forward(Tape& t, const ParameterSet& ps, Var x, const ForwardOptions& opts) const
{
    if (x.value().rank() != 2 || x.cols() != config_.model_dim) {
        throw ShapeError("decoder: tokens must be [n," + std::to_string(config_.model_dim) + "], got " + shape_str(x.shape()));
    }
    if (x.rows() > config_.context_tokens) {
        throw DomainError("decoder: sequence of " + std::to_string(x.rows()) + " tokens exceeds context of " +
                          std::to_string(config_.context_tokens));
    }
    if (opts.record) opts.record->layers.clear();
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const Block& b = blocks_[l];
        Var h = ag::layernorm(x, t.param(ps[b.ln1_g]), t.param(ps[b.ln1_b]));
        h = causal_self_attention(t, ps, static_cast<int>(l), h, opts);
        x = ag::add(x, maybe_dropout(h, opts.dropout));
        h = ag::layernorm(x, t.param(ps[b.ln2_g]), t.param(ps[b.ln2_b]));
        h = ag::gelu(linear(t, ps, h, b.w1, b.b1));
        h = linear(t, ps, h, b.w2, b.b2);
        x = ag::add(x, maybe_dropout(h, opts.dropout));
    }
    if (opts.record) opts.record->tape = &t;
    return ag::layernorm(x, t.param(ps[lnf_g]), t.param(ps[lnf_b]));
}

void attention_grads(AttentionRecord& record, Var target)
{
    if (!record.tape || record.tape != target.tape) throw Error("attention_grads: no attention record for this tape");
    Tape& t = *record.tape;
    if (t.requires_grad(target.id)) t.backward(target, false);
    for (auto& layer : record.layers) {
        layer.grad = Tensor(layer.attention.shape());
        const int heads = layer.attention.dim(0);
        const int n = layer.attention.dim(1);
        for (int h = 0; h < heads; ++h) {
            const int node = layer.nodes[static_cast<std::size_t>(h)];
            if (!t.requires_grad(target.id) || !t.has_grad(node)) continue;
            const Tensor g = t.grad(node);
            std::copy(g.values().begin(), g.values().end(), layer.grad.data() + static_cast<std::size_t>(h) * n * n);
        }
    }
    record.grads_filled = true;
}

} // namespace medt::nn
