#include "medt/training.hpp"

#include "medt/common.hpp"
#include "medt/error.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace medt::train {

using nlohmann::json;

void TrainConfig::validate() const
{
    transformer.validate();
    if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (context_steps < 1) throw ConfigError("train: context_steps must be positive");
    if (weight_decay < 0.0 || grad_clip < 0.0) throw ConfigError("train: weight_decay and grad_clip must be >= 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("train: betas must be in [0, 1)");
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) throw ConfigError("train: validation_fraction must be in (0, 1)");
    if (atg_tokens != 1 && atg_tokens != sim::kOrgans) throw ConfigError("train: atg_tokens must be 1 or 7");
}

void to_json(json& j, const TrainConfig& c)
{
    j = {{"variant", model::variant_name(c.variant)},
         {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate},
         {"epochs", c.epochs},
         {"context_steps", c.context_steps},
         {"seed", c.seed},
         {"weight_decay", c.weight_decay},
         {"grad_clip", c.grad_clip},
         {"beta1", c.beta1},
         {"beta2", c.beta2},
         {"adam_eps", c.adam_eps},
         {"warmup_steps", c.warmup_steps},
         {"validation_fraction", c.validation_fraction},
         {"pad_to_context", c.pad_to_context},
         {"atg_tokens", c.atg_tokens},
         {"residual_head", c.residual_head},
         {"transformer", c.transformer}};
}

void from_json(const json& j, TrainConfig& c)
{
    static const std::set<std::string> known = {"variant", "batch_size", "learning_rate", "epochs", "context_steps", "seed",
                                                "weight_decay", "grad_clip", "beta1", "beta2", "adam_eps", "warmup_steps",
                                                "validation_fraction", "pad_to_context", "atg_tokens", "residual_head", "transformer"};
    for (const auto& [k, v] : j.items())
        if (!known.count(k)) throw ConfigError("train: unknown key '" + k + "'");
    if (j.contains("variant")) c.variant = model::parse_variant(j.at("variant").get<std::string>());
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.context_steps = j.value("context_steps", c.context_steps);
    c.seed = j.value("seed", c.seed);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.pad_to_context = j.value("pad_to_context", c.pad_to_context);
    c.atg_tokens = j.value("atg_tokens", c.atg_tokens);
    c.residual_head = j.value("residual_head", c.residual_head);
    if (j.contains("transformer")) {
        static const std::set<std::string> tk = {"layers", "heads", "model_dim", "ff_dim", "context_tokens", "dropout"};
        const auto& t = j.at("transformer");
        for (const auto& [k, v] : t.items())
            if (!tk.count(k)) throw ConfigError("train.transformer: unknown key '" + k + "'");
        c.transformer.layers = t.value("layers", c.transformer.layers);
        c.transformer.heads = t.value("heads", c.transformer.heads);
        c.transformer.model_dim = t.value("model_dim", c.transformer.model_dim);
        c.transformer.ff_dim = t.value("ff_dim", c.transformer.ff_dim);
        c.transformer.context_tokens = t.value("context_tokens", c.transformer.context_tokens);
        c.transformer.dropout = t.value("dropout", c.transformer.dropout);
    }
}

// ---- batching ----------------------------------------------------------------

std::vector<Batch> make_batches(const data::Dataset& d, const std::vector<int>& episodes, const TrainConfig& c, std::uint64_t epoch_seed)
{
    if (episodes.empty()) throw DomainError("make_batches: no episodes");
    std::vector<int> order = episodes;
    std::mt19937_64 rng(epoch_seed);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Batch> out;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(c.batch_size)) {
        Batch b;
        const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(c.batch_size));
        b.episodes.assign(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
        int longest = 0;
        for (int e : b.episodes) {
            const int len = d.episodes.at(static_cast<std::size_t>(e)).length();
            if (len > c.context_steps) {
                throw DomainError("make_batches: episode of " + std::to_string(len) + " steps exceeds context " + std::to_string(c.context_steps));
            }
            longest = std::max(longest, len);
        }
        b.padded_steps = c.pad_to_context ? c.context_steps : longest;
        out.push_back(std::move(b));
    }
    return out;
}

std::vector<char> step_mask(int length, int padded_steps)
{
    std::vector<char> v(static_cast<std::size_t>(padded_steps), 0);
    std::fill(v.begin(), v.begin() + std::min(length, padded_steps), 1);
    return v;
}

model::Prefix policy_prefix(const data::Trajectory& tr)
{
    return model::Prefix::from_trajectory(tr);
}

nn::Var policy_loss(nn::Tape& t, const SequenceModel& m, const data::Trajectory& tr, int padded_steps, nn::DropoutContext* dropout)
{
    model::ModelForwardOptions o;
    o.pad_to_steps = padded_steps;
    o.dropout = dropout;
    nn::Var logits = m.policy_logits(t, policy_prefix(tr), o);
    std::vector<int> targets(static_cast<std::size_t>(logits.rows()), 0);
    std::copy(tr.actions.begin(), tr.actions.end(), targets.begin());
    return ag::cross_entropy(logits, targets, step_mask(tr.length(), logits.rows()));
}

nn::Var predictor_loss(nn::Tape& t, const SequenceModel& m, const data::Trajectory& tr, int padded_steps, nn::DropoutContext* dropout)
{
    model::Prefix p;
    for (int s = 0; s < tr.length(); ++s) {
        p.states.push_back(tr.state(s).features());
        p.actions.push_back(tr.actions[static_cast<std::size_t>(s)]);
    }
    model::ModelForwardOptions o;
    o.pad_to_steps = padded_steps;
    o.dropout = dropout;
    nn::Var pred = m.predictor_output(t, p, o);
    Tensor target({pred.rows(), sim::kStateDim});
    for (int s = 0; s < tr.length(); ++s) {
        const auto z = m.normalise_state(tr.state(s + 1).features());
        std::copy(z.begin(), z.end(), target.row(s).begin());
    }
    return ag::mse(pred, target, step_mask(tr.length(), pred.rows()));
}

namespace {

nn::Var episode_loss(nn::Tape& t, const SequenceModel& m, const data::Trajectory& tr, int padded, nn::DropoutContext* dropout)
{
    return m.config().variant == Variant::StatePredictor ? predictor_loss(t, m, tr, padded, dropout)
                                                         : policy_loss(t, m, tr, padded, dropout);
}

double median(std::vector<double> v)
{
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

double evaluate_loss(const SequenceModel& m, const data::Dataset& d, const std::vector<int>& episodes)
{
    if (episodes.empty()) throw DomainError("evaluate_loss: no episodes");
    double total = 0.0;
    for (int e : episodes) {
        nn::Tape t(nn::Tape::Mode::NoGrad);
        total += episode_loss(t, m, d.episodes.at(static_cast<std::size_t>(e)), 0, nullptr).value()[0];
    }
    return total / static_cast<double>(episodes.size());
}

std::string curve_csv(const std::vector<CurvePoint>& curve)
{
    std::ostringstream out;
    out.precision(10);
    out << "epoch,split,loss\n";
    for (const auto& p : curve) out << p.epoch << ',' << p.split << ',' << p.loss << '\n';
    return out.str();
}

// ---- optimiser ---------------------------------------------------------------

Optimizer::Optimizer(const TrainConfig& c, nn::ParameterSet& params) : config_(c)
{
    for (const auto& p : params) {
        m_.emplace_back(p.value.shape());
        v_.emplace_back(p.value.shape());
    }
}

double Optimizer::step(nn::ParameterSet& params)
{
    double sq = 0.0;
    for (const auto& p : params)
        for (double g : p.grad.values()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("optimizer: non-finite gradient norm at step " + std::to_string(step_));
    const double clip = config_.grad_clip > 0.0 && norm > config_.grad_clip ? config_.grad_clip / norm : 1.0;
    ++step_;
    double lr = config_.learning_rate;
    if (config_.warmup_steps > 0 && step_ < config_.warmup_steps) lr *= static_cast<double>(step_) / config_.warmup_steps;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, step_);
    const double c2 = 1.0 - std::pow(b2, step_);
    std::size_t k = 0;
    for (auto& p : params) {
        Tensor& m = m_[k];
        Tensor& v = v_[k];
        ++k;
        const bool decay = p.value.rank() == 2 && config_.weight_decay > 0.0;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad[i] * clip;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            double upd = (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.adam_eps);
            if (decay) upd += config_.weight_decay * p.value[i];
            p.value[i] = static_cast<float>(p.value[i] - lr * upd);
        }
    }
    return norm;
}

// ---- loop --------------------------------------------------------------------

namespace {

std::vector<Tensor> snapshot(const nn::ParameterSet& ps)
{
    std::vector<Tensor> out;
    for (const auto& p : ps) out.push_back(p.value);
    return out;
}

void restore(nn::ParameterSet& ps, const std::vector<Tensor>& values)
{
    std::size_t k = 0;
    for (auto& p : ps) p.value = values[k++];
}

TrainResult run_training(const data::Dataset& d, const TrainConfig& c, const EpochCallback& on_epoch)
{
    c.validate();
    if (d.episodes.size() < 2) throw DomainError("training needs at least two episodes");
    if (d.max_length() > c.context_steps) {
        throw DomainError("training: longest episode (" + std::to_string(d.max_length()) + " steps) exceeds context " +
                          std::to_string(c.context_steps));
    }
    TrainResult res;
    res.split = data::split_episodes(static_cast<int>(d.episodes.size()), 1.0 - c.validation_fraction, sim::derive_seed(c.seed, 0));

    model::ModelConfig mc;
    mc.variant = c.variant;
    mc.atg_tokens = c.atg_tokens;
    mc.context_steps = c.context_steps;
    mc.residual_head = c.residual_head;
    mc.transformer = c.transformer;
    mc.transformer.context_tokens = std::max(c.transformer.context_tokens, mc.layout().encoded_length(c.context_steps));
    model::fit_normalisation(mc, d, &res.split.train);
    SequenceModel m(mc, sim::derive_seed(c.seed, 1));

    auto timer = std::chrono::steady_clock::now();
    auto elapsed = [&timer] {
        const auto now = std::chrono::steady_clock::now();
        const double s = std::chrono::duration<double>(now - timer).count();
        timer = now;
        return s;
    };

    EpochReport init;
    init.train_loss = init.train_median = evaluate_loss(m, d, res.split.train);
    init.validation_loss = evaluate_loss(m, d, res.split.validation);
    init.seconds = elapsed();
    res.epochs.push_back(init);
    res.curve.push_back({0, "train", init.train_loss});
    res.curve.push_back({0, "validation", init.validation_loss});
    if (on_epoch) on_epoch(init);

    double best = init.validation_loss;
    std::vector<Tensor> best_values = snapshot(m.params());
    res.best_epoch = 0;
    Optimizer opt(c, m.params());

    for (int epoch = 1; epoch <= c.epochs; ++epoch) {
        const auto batches = make_batches(d, res.split.train, c, sim::derive_seed(c.seed, 100 + static_cast<std::uint64_t>(epoch)));
        std::mt19937_64 drop_rng(sim::derive_seed(c.seed, 10000 + static_cast<std::uint64_t>(epoch)));
        nn::DropoutContext dropout{c.transformer.dropout, &drop_rng};
        std::vector<double> batch_losses;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const Batch& b = batches[bi];
            m.params().zero_grad();
            double loss = 0.0;
            const double w = 1.0 / static_cast<double>(b.episodes.size());
            for (int e : b.episodes) {
                nn::Tape t;
                nn::Var l = ag::scale(episode_loss(t, m, d.episodes[static_cast<std::size_t>(e)], b.padded_steps, &dropout), w);
                loss += l.value()[0];
                t.backward(l);
            }
            if (!std::isfinite(loss)) {
                throw NumericError("training diverged: loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(bi));
            }
            opt.step(m.params());
            batch_losses.push_back(loss);
        }
        EpochReport r;
        r.epoch = epoch;
        r.train_loss = std::accumulate(batch_losses.begin(), batch_losses.end(), 0.0) / static_cast<double>(batch_losses.size());
        r.train_median = median(batch_losses);
        r.validation_loss = evaluate_loss(m, d, res.split.validation);
        if (!std::isfinite(r.validation_loss)) throw NumericError("training diverged: validation loss is not finite at epoch " + std::to_string(epoch));
        r.seconds = elapsed();
        res.epochs.push_back(r);
        res.curve.push_back({epoch, "train", r.train_loss});
        res.curve.push_back({epoch, "validation", r.validation_loss});
        if (r.validation_loss < best) {
            best = r.validation_loss;
            best_values = snapshot(m.params());
            res.best_epoch = epoch;
        }
        if (on_epoch) on_epoch(r);
    }
    restore(m.params(), best_values);
    m.params().zero_grad();
    res.model = std::move(m);
    res.meta.seed = c.seed;
    res.meta.epoch = res.best_epoch;
    res.meta.train_loss = res.epochs[static_cast<std::size_t>(res.best_epoch)].train_loss;
    res.meta.validation_loss = best;
    res.meta.data_hash = d.header.config_hash + ":" + std::to_string(d.header.seed) + ":" + std::to_string(d.episodes.size());
    res.meta.config_hash = hex64(fnv1a64(json(c).dump()));
    res.meta.code_version = std::string(kCodeVersion);
    return res;
}

} // namespace

TrainResult train_policy(const data::Dataset& d, const TrainConfig& c, const EpochCallback& on_epoch)
{
    if (c.variant == Variant::StatePredictor) throw ConfigError("train_policy: variant must be bc, dt or medt");
    return run_training(d, c, on_epoch);
}

TrainResult train_predictor(const data::Dataset& d, const TrainConfig& c, const EpochCallback& on_epoch)
{
    TrainConfig pc = c;
    pc.variant = Variant::StatePredictor;
    return run_training(d, pc, on_epoch);
}

PredictorScore score_predictor(const SequenceModel& m, const data::Dataset& d, const std::vector<int>& episodes)
{
    PredictorScore s;
    double n = 0.0;
    for (int e : episodes) {
        const auto& tr = d.episodes.at(static_cast<std::size_t>(e));
        std::vector<model::StateVec> states;
        for (int t = 0; t < tr.length(); ++t) states.push_back(tr.state(t).features());
        const auto pred = m.predict_next_states(states, tr.actions);
        for (int t = 0; t < tr.length(); ++t) {
            const auto truth = m.normalise_state(tr.state(t + 1).features());
            const auto p = m.normalise_state(pred[static_cast<std::size_t>(t)]);
            const auto cur = m.normalise_state(states[static_cast<std::size_t>(t)]);
            for (int i = 0; i < sim::kStateDim; ++i) {
                const auto k = static_cast<std::size_t>(i);
                s.model_mse += (p[k] - truth[k]) * (p[k] - truth[k]);
                s.copy_mse += (cur[k] - truth[k]) * (cur[k] - truth[k]);
            }
            n += sim::kStateDim;
        }
    }
    if (n > 0.0) {
        s.model_mse /= n;
        s.copy_mse /= n;
    }
    return s;
}

double mode_agreement(const SequenceModel& m, const data::Dataset& d, const std::vector<int>& episodes)
{
    const sim::BehaviorPolicy behavior(d.header.sim);
    double hits = 0.0, n = 0.0;
    for (int e : episodes) {
        const auto& tr = d.episodes.at(static_cast<std::size_t>(e));
        const auto logits = m.action_logits(policy_prefix(tr));
        for (int t = 0; t < tr.length(); ++t) {
            const auto a = model::select_action(logits[static_cast<std::size_t>(t)], model::ArgmaxDecode{});
            if (a == behavior.mode(tr.state(t), tr.clinician)) hits += 1.0;
            n += 1.0;
        }
    }
    return n > 0.0 ? hits / n : 0.0;
}

} // namespace medt::train
