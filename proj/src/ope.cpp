#include "medt/ope.hpp"

#include "medt/error.hpp"
#include "medt/rollout.hpp"
#include "medt/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace medt::ope {

using nlohmann::json;

void validate(const OpeData& d)
{
    if (d.empty()) throw DomainError("ope: dataset has no episodes");
    std::size_t actions = 0;
    for (const auto& e : d) {
        if (e.steps.empty()) throw DomainError("ope: empty episode");
        for (const auto& s : e.steps) {
            if (actions == 0) actions = s.pi.size();
            if (s.pi.empty() || s.pi.size() != actions) throw ShapeError("ope: inconsistent policy distribution size");
            if (s.action < 0 || static_cast<std::size_t>(s.action) >= actions) throw DomainError("ope: action out of range");
            if (!(s.behavior_prob > 0.0) || s.behavior_prob > 1.0 + 1e-9) throw DomainError("ope: behaviour probability outside (0, 1]");
            if (!std::isfinite(s.reward)) throw NumericError("ope: non-finite reward");
        }
    }
}

double discounted_return(const OpeEpisode& e, double gamma)
{
    double g = 0.0, w = 1.0;
    for (const auto& s : e.steps) {
        g += w * s.reward;
        w *= gamma;
    }
    return g;
}

double mean_discounted_return(const OpeData& d, double gamma)
{
    if (d.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& e : d) sum += discounted_return(e, gamma);
    return sum / static_cast<double>(d.size());
}

void to_json(json& j, const Bootstrap& b)
{
    j = {{"resamples", b.resamples}, {"std", b.stddev}, {"p2_5", b.p025}, {"p50", b.p50}, {"p97_5", b.p975}};
}

void to_json(json& j, const OpeResult& r)
{
    j = {{"estimator", r.estimator}, {"value", r.value}, {"gamma", r.gamma}, {"clip_rate", r.clip_rate}, {"warnings", r.warnings}};
    if (r.bootstrap.resamples > 0) j["bootstrap"] = r.bootstrap;
}

ImportanceWeights importance_weights(const OpeData& d)
{
    validate(d);
    ImportanceWeights iw;
    std::size_t longest = 0, clipped = 0, total = 0;
    for (const auto& e : d) {
        std::vector<double> cum;
        double c = 1.0;
        for (const auto& s : e.steps) {
            const double raw = s.pi[static_cast<std::size_t>(s.action)] / s.behavior_prob;
            const double r = std::clamp(raw, kRatioMin, kRatioMax);
            if (r != raw) ++clipped;
            ++total;
            c *= r;
            cum.push_back(c);
        }
        longest = std::max(longest, cum.size());
        iw.cumulative.push_back(std::move(cum));
    }
    iw.w.assign(longest, 0.0);
    for (const auto& cum : iw.cumulative) {
        for (std::size_t t = 0; t < longest; ++t) iw.w[t] += cum[std::min(t, cum.size() - 1)];
    }
    for (double& w : iw.w) w /= static_cast<double>(d.size());
    iw.clip_rate = static_cast<double>(clipped) / static_cast<double>(total);
    return iw;
}

OpeResult wis(const OpeData& d, double gamma)
{
    const auto iw = importance_weights(d);
    double sum = 0.0;
    for (std::size_t n = 0; n < d.size(); ++n) {
        const auto& cum = iw.cumulative[n];
        const std::size_t T = cum.size();
        const double w = iw.w[T - 1];
        if (w > 0.0) sum += cum[T - 1] / w * discounted_return(d[n], gamma);
    }
    OpeResult r;
    r.estimator = "wis";
    r.value = sum / static_cast<double>(d.size());
    r.gamma = gamma;
    r.clip_rate = iw.clip_rate;
    return r;
}

double QFunction::state_value(const OpeStep& s) const
{
    const auto q = values(s);
    if (q.size() != s.pi.size()) throw ShapeError("ope: Q function and policy disagree on the action count");
    double v = 0.0;
    for (std::size_t a = 0; a < q.size(); ++a) v += s.pi[a] * q[a];
    return v;
}

std::vector<double> TabularQ::values(const OpeStep& s) const
{
    if (s.state < 0 || s.state >= states_) throw DomainError("TabularQ: state id out of range");
    const auto begin = table_.begin() + static_cast<std::ptrdiff_t>(s.state * actions_);
    return {begin, begin + actions_};
}

namespace {

/// Weighted Bellman-target sample; next_pi == nullptr marks termination.
struct Transition {
    int s, a;
    double r, weight;
    int next;
    const std::vector<double>* next_pi;
};

std::shared_ptr<TabularQ> fqe_fixed_point(const std::vector<Transition>& tr, int states, int actions, double gamma, double tolerance,
                                          int max_iterations, FqeReport* report)
{
    std::vector<double> mass(static_cast<std::size_t>(states * actions), 0.0);
    for (const auto& x : tr) mass[static_cast<std::size_t>(x.s * actions + x.a)] += x.weight;
    auto q = std::make_shared<TabularQ>(states, actions);
    std::vector<double> next(mass.size());
    FqeReport rep;
    for (int it = 0; it < max_iterations; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        for (const auto& x : tr) {
            double v = 0.0;
            if (x.next_pi) {
                for (int a = 0; a < actions; ++a) v += (*x.next_pi)[static_cast<std::size_t>(a)] * q->at(x.next, a);
            }
            next[static_cast<std::size_t>(x.s * actions + x.a)] += x.weight * (x.r + gamma * v);
        }
        double change = 0.0;
        for (int s = 0; s < states; ++s) {
            for (int a = 0; a < actions; ++a) {
                const auto i = static_cast<std::size_t>(s * actions + a);
                const double v = mass[i] > 0.0 ? next[i] / mass[i] : 0.0;
                change = std::max(change, std::abs(v - q->at(s, a)));
                q->at(s, a) = v;
            }
        }
        rep.residuals.push_back(change);
        rep.iterations = it + 1;
        rep.final_residual = change;
        if (change < tolerance) break;
    }
    if (rep.final_residual >= tolerance) {
        rep.warnings.push_back("fqe: residual " + std::to_string(rep.final_residual) + " above tolerance after " +
                               std::to_string(rep.iterations) + " iterations");
    }
    if (report) *report = std::move(rep);
    return q;
}

} // namespace

std::shared_ptr<TabularQ> fqe_tabular(const OpeData& d, int states, int actions, double gamma, double tolerance, int max_iterations,
                                      FqeReport* report)
{
    validate(d);
    if (states < 1 || actions < 1) throw DomainError("fqe_tabular: need at least one state and action");
    std::vector<Transition> tr;
    for (const auto& e : d) {
        for (std::size_t t = 0; t < e.steps.size(); ++t) {
            const auto& s = e.steps[t];
            if (s.state < 0 || s.state >= states) throw DomainError("fqe_tabular: state id out of range");
            if (static_cast<int>(s.pi.size()) != actions) throw ShapeError("fqe_tabular: policy size != action count");
            const OpeStep* n = t + 1 < e.steps.size() ? &e.steps[t + 1] : nullptr;
            tr.push_back({s.state, s.action, s.reward, 1.0, n ? n->state : -1, n ? &n->pi : nullptr});
        }
    }
    return fqe_fixed_point(tr, states, actions, gamma, tolerance, max_iterations, report);
}

// ---- network FQE -------------------------------------------------------------

NetworkQ::NetworkQ(int inputs, int actions, int hidden, std::uint64_t seed) : inputs_(inputs), actions_(actions)
{
    if (inputs < 1 || actions < 1 || hidden < 1) throw DomainError("NetworkQ: sizes must be positive");
    std::mt19937_64 rng(seed);
    w1_ = params_.add("fqe.l1.w", nn::init_normal({inputs, hidden}, std::sqrt(2.0 / inputs), rng));
    b1_ = params_.add("fqe.l1.b", Tensor({hidden}));
    w2_ = params_.add("fqe.l2.w", nn::init_normal({hidden, actions}, std::sqrt(1.0 / hidden), rng));
    b2_ = params_.add("fqe.l2.b", Tensor({actions}));
    mean.assign(static_cast<std::size_t>(inputs), 0.0);
    scale.assign(static_cast<std::size_t>(inputs), 1.0);
}

Tensor NetworkQ::features(const std::vector<const OpeStep*>& steps) const
{
    Tensor x({static_cast<int>(steps.size()), inputs_});
    for (std::size_t r = 0; r < steps.size(); ++r) {
        if (static_cast<int>(steps[r]->features.size()) != inputs_) throw ShapeError("NetworkQ: feature size mismatch");
        for (int c = 0; c < inputs_; ++c) {
            const auto ci = static_cast<std::size_t>(c);
            x.at(static_cast<int>(r), c) = (steps[r]->features[ci] - mean[ci]) / scale[ci];
        }
    }
    return x;
}

ag::Var NetworkQ::forward(ag::Tape& t, const Tensor& x) const
{
    auto h = ag::gelu(ag::add_bias(ag::matmul(t.constant(x), t.param(params_[w1_])), t.param(params_[b1_])));
    return ag::add_bias(ag::matmul(h, t.param(params_[w2_])), t.param(params_[b2_]));
}

Tensor NetworkQ::forward_batch(const std::vector<const OpeStep*>& steps) const
{
    ag::Tape t(ag::Tape::Mode::NoGrad);
    return forward(t, features(steps)).value();
}

std::vector<double> NetworkQ::values(const OpeStep& s) const
{
    const auto out = forward_batch({&s});
    return {out.data(), out.data() + actions_};
}

std::shared_ptr<NetworkQ> fqe_network(const OpeData& d, double gamma, const FqeNetworkConfig& c, FqeReport* report)
{
    validate(d);
    if (c.iterations < 1 || c.epochs_per_iteration < 1 || c.batch_size < 1) throw ConfigError("fqe_network: iterations, epochs and batch size must be >= 1");
    std::vector<const OpeStep*> cur, next;
    for (const auto& e : d) {
        for (std::size_t t = 0; t < e.steps.size(); ++t) {
            cur.push_back(&e.steps[t]);
            next.push_back(t + 1 < e.steps.size() ? &e.steps[t + 1] : nullptr);
        }
    }
    const int inputs = static_cast<int>(cur.front()->features.size());
    const int actions = static_cast<int>(cur.front()->pi.size());
    if (inputs < 1) throw ShapeError("fqe_network: steps carry no features");
    auto q = std::make_shared<NetworkQ>(inputs, actions, c.hidden, c.seed);
    for (int i = 0; i < inputs; ++i) {
        double m = 0.0, v = 0.0;
        for (const auto* s : cur) m += s->features[static_cast<std::size_t>(i)];
        m /= static_cast<double>(cur.size());
        for (const auto* s : cur) v += std::pow(s->features[static_cast<std::size_t>(i)] - m, 2);
        v /= static_cast<double>(cur.size());
        q->mean[static_cast<std::size_t>(i)] = m;
        q->scale[static_cast<std::size_t>(i)] = v > 1e-24 ? std::sqrt(v) : 1.0;
    }

    train::TrainConfig oc;
    oc.learning_rate = c.learning_rate;
    oc.beta1 = 0.9;
    oc.weight_decay = 0.0;
    oc.grad_clip = 1.0;
    train::Optimizer opt(oc, q->params());
    std::mt19937_64 rng(sim::derive_seed(c.seed, 1));

    const std::size_t n = cur.size();
    std::vector<double> targets(n, 0.0), previous;
    FqeReport rep;
    double best = std::numeric_limits<double>::infinity();
    int since_best = 0;
    constexpr std::size_t kChunk = 4096;
    for (int it = 0; it < c.iterations; ++it) {
        // Frozen targets r + gamma V(s') from the current network.
        for (std::size_t b = 0; b < n; b += kChunk) {
            std::vector<const OpeStep*> batch, idx_steps;
            std::vector<std::size_t> idx;
            for (std::size_t i = b; i < std::min(n, b + kChunk); ++i) {
                targets[i] = cur[i]->reward;
                if (next[i]) {
                    batch.push_back(next[i]);
                    idx.push_back(i);
                }
            }
            if (batch.empty()) continue;
            const Tensor out = q->forward_batch(batch);
            for (std::size_t r = 0; r < idx.size(); ++r) {
                double v = 0.0;
                for (int a = 0; a < actions; ++a) v += batch[r]->pi[static_cast<std::size_t>(a)] * out.at(static_cast<int>(r), a);
                targets[idx[r]] += gamma * v;
            }
        }
        double residual = 0.0;
        if (!previous.empty()) {
            for (std::size_t i = 0; i < n; ++i) residual += std::abs(targets[i] - previous[i]);
            residual /= static_cast<double>(n);
            rep.residuals.push_back(residual);
            rep.final_residual = residual;
            if (residual < best) {
                best = residual;
                since_best = 0;
            } else if (++since_best == c.patience) {
                rep.warnings.push_back("fqe: target residual did not decrease over " + std::to_string(c.patience) + " iterations");
            }
        }
        previous = targets;

        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        for (int ep = 0; ep < c.epochs_per_iteration; ++ep) {
            std::shuffle(order.begin(), order.end(), rng);
            for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(c.batch_size)) {
                const std::size_t e = std::min(n, b + static_cast<std::size_t>(c.batch_size));
                std::vector<const OpeStep*> batch;
                for (std::size_t i = b; i < e; ++i) batch.push_back(cur[order[i]]);
                ag::Tape tape;
                auto out = q->forward(tape, q->features(batch));
                // Only the logged action's column carries a residual.
                Tensor target = out.value();
                for (std::size_t r = 0; r < batch.size(); ++r) target.at(static_cast<int>(r), batch[r]->action) = targets[order[b + r]];
                const std::vector<char> valid(batch.size(), 1);
                auto loss = ag::mse(out, target, valid);
                q->params().zero_grad();
                tape.backward(loss);
                opt.step(q->params());
            }
        }
        rep.iterations = it + 1;
    }
    if (report) *report = std::move(rep);
    return q;
}

OpeResult fqe_value(const OpeData& d, const QFunction& q, double gamma)
{
    validate(d);
    double sum = 0.0;
    for (const auto& e : d) sum += q.state_value(e.steps.front());
    OpeResult r;
    r.estimator = "fqe";
    r.value = sum / static_cast<double>(d.size());
    r.gamma = gamma;
    return r;
}

OpeResult wdr(const OpeData& d, const QFunction& q, double gamma)
{
    const auto iw = importance_weights(d);
    double sum = 0.0;
    for (std::size_t n = 0; n < d.size(); ++n) {
        const auto& steps = d[n].steps;
        double prev = 1.0, disc = 1.0;
        for (std::size_t t = 0; t < steps.size(); ++t) {
            const double w = iw.w[t];
            const double cur = w > 0.0 ? iw.cumulative[n][t] / w : 0.0;
            const auto qv = q.values(steps[t]);
            double v = 0.0;
            for (std::size_t a = 0; a < qv.size(); ++a) v += steps[t].pi[a] * qv[a];
            sum += disc * (cur * steps[t].reward - (cur * qv[static_cast<std::size_t>(steps[t].action)] - prev * v));
            prev = cur;
            disc *= gamma;
        }
    }
    OpeResult r;
    r.estimator = "wdr";
    r.value = sum / static_cast<double>(d.size());
    r.gamma = gamma;
    r.clip_rate = iw.clip_rate;
    return r;
}

Bootstrap bootstrap(const OpeData& d, const Estimator& estimator, int resamples, std::uint64_t seed)
{
    if (resamples < 2) throw DomainError("bootstrap: need at least two resamples");
    if (d.empty()) throw DomainError("bootstrap: empty dataset");
    Bootstrap b;
    b.resamples = resamples;
    std::uniform_int_distribution<std::size_t> pick(0, d.size() - 1);
    for (int i = 0; i < resamples; ++i) {
        sim::Rng rng(sim::derive_seed(seed, static_cast<std::uint64_t>(i)));
        OpeData sample;
        sample.reserve(d.size());
        for (std::size_t k = 0; k < d.size(); ++k) sample.push_back(d[pick(rng)]);
        b.values.push_back(estimator(sample));
    }
    const double mean = std::accumulate(b.values.begin(), b.values.end(), 0.0) / resamples;
    double ss = 0.0;
    for (double v : b.values) ss += (v - mean) * (v - mean);
    b.stddev = std::sqrt(ss / (resamples - 1));
    std::vector<double> sorted = b.values;
    std::sort(sorted.begin(), sorted.end());
    auto quantile = [&](double p) {
        const double pos = p * (resamples - 1);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const auto hi = std::min(lo + 1, sorted.size() - 1);
        return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
    };
    b.p025 = quantile(0.025);
    b.p50 = quantile(0.5);
    b.p975 = quantile(0.975);
    return b;
}

// ---- small tabular MDP -------------------------------------------------------

void TabularMdp::validate() const
{
    if (states < 1 || actions < 1) throw DomainError("TabularMdp: empty state or action space");
    if (static_cast<int>(initial.size()) != states || static_cast<int>(P.size()) != states || static_cast<int>(R.size()) != states) {
        throw ShapeError("TabularMdp: table sizes do not match the state count");
    }
    if (std::abs(std::accumulate(initial.begin(), initial.end(), 0.0) - 1.0) > 1e-12) throw DomainError("TabularMdp: initial distribution must sum to 1");
    for (int s = 0; s < states; ++s) {
        if (static_cast<int>(P[s].size()) != actions || static_cast<int>(R[s].size()) != actions) throw ShapeError("TabularMdp: action tables");
        for (int a = 0; a < actions; ++a) {
            if (static_cast<int>(P[s][a].size()) != states) throw ShapeError("TabularMdp: transition row size");
            double total = 0.0;
            for (double p : P[s][a]) {
                if (p < 0.0) throw DomainError("TabularMdp: negative transition probability");
                total += p;
            }
            if (total > 1.0 + 1e-12) throw DomainError("TabularMdp: transition mass above 1");
        }
    }
}

namespace {

void check_policy(const TabularMdp& m, const TabularPolicy& pi)
{
    if (static_cast<int>(pi.size()) != m.states) throw ShapeError("tabular policy: wrong state count");
    for (const auto& row : pi) {
        if (static_cast<int>(row.size()) != m.actions) throw ShapeError("tabular policy: wrong action count");
        if (std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0) > 1e-12) throw DomainError("tabular policy: row does not sum to 1");
    }
}

template <class Probs>
int draw(const Probs& p, double u)
{
    double c = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        c += p[i];
        if (u < c) return static_cast<int>(i);
    }
    for (std::size_t i = p.size(); i-- > 0;)
        if (p[i] > 0.0) return static_cast<int>(i);
    return 0;
}

/// Next state or -1 for termination.
int draw_next(const std::vector<double>& p, double u)
{
    double c = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        c += p[i];
        if (u < c) return static_cast<int>(i);
    }
    return -1;
}

} // namespace

TabularMdp small_mdp(bool deterministic)
{
    TabularMdp m;
    m.states = 5;
    m.actions = 3;
    m.initial = {0.4, 0.3, 0.3, 0.0, 0.0};
    if (deterministic) m.initial = {1.0, 0.0, 0.0, 0.0, 0.0};
    m.R = {{0.2, 0.5, 0.1}, {0.0, 0.3, 0.8}, {0.6, 0.1, 0.4}, {1.0, 0.2, 0.5}, {0.3, 0.9, 0.0}};
    m.P.assign(5, std::vector<std::vector<double>>(3, std::vector<double>(5, 0.0)));
    if (deterministic) {
        // Chain 0 -> 1 -> 2 -> 3 -> 4 -> end, with actions picking skip lengths.
        for (int s = 0; s < 5; ++s) {
            for (int a = 0; a < 3; ++a) {
                const int nxt = s + 1 + a;
                if (nxt < 5) m.P[s][a][nxt] = 1.0;
            }
        }
        return m;
    }
    const double stay = 0.7; // 30% termination per step
    const std::array<std::array<std::array<double, 5>, 3>, 5> shape = {{
        {{{1, 2, 1, 0, 0}, {0, 1, 3, 1, 0}, {0, 0, 1, 2, 2}}},
        {{{2, 1, 0, 1, 0}, {0, 0, 2, 1, 1}, {1, 1, 1, 1, 1}}},
        {{{0, 1, 1, 2, 0}, {1, 0, 0, 1, 3}, {2, 0, 1, 0, 1}}},
        {{{1, 0, 0, 1, 2}, {0, 2, 1, 0, 1}, {1, 1, 0, 2, 0}}},
        {{{0, 0, 2, 1, 1}, {3, 0, 0, 0, 1}, {1, 2, 1, 0, 0}}},
    }};
    for (int s = 0; s < 5; ++s) {
        for (int a = 0; a < 3; ++a) {
            const auto& w = shape[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)];
            const double total = std::accumulate(w.begin(), w.end(), 0.0);
            for (int k = 0; k < 5; ++k) m.P[s][a][k] = stay * w[static_cast<std::size_t>(k)] / total;
        }
    }
    return m;
}

TabularPolicy small_behavior_policy()
{
    return {{0.4, 0.3, 0.3}, {0.3, 0.4, 0.3}, {0.3, 0.3, 0.4}, {0.5, 0.25, 0.25}, {0.25, 0.5, 0.25}};
}

TabularPolicy small_target_policy()
{
    return {{0.35, 0.4, 0.25}, {0.25, 0.35, 0.4}, {0.4, 0.25, 0.35}, {0.55, 0.2, 0.25}, {0.2, 0.55, 0.25}};
}

ExactValue evaluate_exact(const TabularMdp& m, const TabularPolicy& pi, double gamma, double tolerance)
{
    m.validate();
    check_policy(m, pi);
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw DomainError("evaluate_exact: gamma outside [0, 1]");
    ExactValue ev;
    ev.V.assign(static_cast<std::size_t>(m.states), 0.0);
    ev.Q.assign(static_cast<std::size_t>(m.states), std::vector<double>(static_cast<std::size_t>(m.actions), 0.0));
    for (int it = 1; it <= 1000000; ++it) {
        for (int s = 0; s < m.states; ++s) {
            for (int a = 0; a < m.actions; ++a) {
                double q = m.R[s][a];
                for (int k = 0; k < m.states; ++k) q += gamma * m.P[s][a][k] * ev.V[static_cast<std::size_t>(k)];
                ev.Q[s][a] = q;
            }
        }
        double residual = 0.0;
        for (int s = 0; s < m.states; ++s) {
            double v = 0.0;
            for (int a = 0; a < m.actions; ++a) v += pi[s][a] * ev.Q[s][a];
            residual = std::max(residual, std::abs(v - ev.V[static_cast<std::size_t>(s)]));
            ev.V[static_cast<std::size_t>(s)] = v;
        }
        ev.iterations = it;
        ev.residual = residual;
        if (residual < tolerance) break;
    }
    if (ev.residual >= tolerance) throw NumericError("evaluate_exact: did not converge");
    for (int s = 0; s < m.states; ++s) ev.value += m.initial[static_cast<std::size_t>(s)] * ev.V[static_cast<std::size_t>(s)];
    return ev;
}

std::shared_ptr<TabularQ> fqe_tabular(const TabularMdp& m, const TabularPolicy& pi, double gamma, double tolerance, int max_iterations,
                                      FqeReport* report)
{
    m.validate();
    check_policy(m, pi);
    std::vector<Transition> tr;
    for (int s = 0; s < m.states; ++s) {
        for (int a = 0; a < m.actions; ++a) {
            double stay = 0.0;
            for (int k = 0; k < m.states; ++k) {
                const double p = m.P[s][a][k];
                stay += p;
                if (p > 0.0) tr.push_back({s, a, m.R[s][a], p, k, &pi[static_cast<std::size_t>(k)]});
            }
            if (1.0 - stay > 0.0) tr.push_back({s, a, m.R[s][a], 1.0 - stay, -1, nullptr});
        }
    }
    return fqe_fixed_point(tr, m.states, m.actions, gamma, tolerance, max_iterations, report);
}

double initial_value(const TabularMdp& m, const TabularPolicy& pi, const TabularQ& q)
{
    double v = 0.0;
    for (int s = 0; s < m.states; ++s) {
        for (int a = 0; a < m.actions; ++a) v += m.initial[static_cast<std::size_t>(s)] * pi[s][a] * q.at(s, a);
    }
    return v;
}

OpeData sample_tabular(const TabularMdp& m, const TabularPolicy& behavior, const TabularPolicy& target, int episodes, std::uint64_t seed,
                       int max_steps)
{
    m.validate();
    check_policy(m, behavior);
    check_policy(m, target);
    if (episodes < 1) throw DomainError("sample_tabular: need at least one episode");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    OpeData d;
    d.reserve(static_cast<std::size_t>(episodes));
    for (int i = 0; i < episodes; ++i) {
        sim::Rng rng(sim::derive_seed(seed, static_cast<std::uint64_t>(i)));
        OpeEpisode e;
        int s = draw(m.initial, u(rng));
        for (int t = 0; t < max_steps && s >= 0; ++t) {
            const int a = draw(behavior[s], u(rng));
            OpeStep step;
            step.state = s;
            step.features = {static_cast<double>(s)};
            step.action = a;
            step.reward = m.R[s][a];
            step.behavior_prob = behavior[s][a];
            step.pi = target[s];
            e.steps.push_back(std::move(step));
            s = draw_next(m.P[s][a], u(rng));
        }
        d.push_back(std::move(e));
    }
    return d;
}

namespace {

McEstimate summarise(const std::vector<double>& returns)
{
    McEstimate r;
    r.episodes = static_cast<int>(returns.size());
    r.value = std::accumulate(returns.begin(), returns.end(), 0.0) / r.episodes;
    double ss = 0.0;
    for (double g : returns) ss += (g - r.value) * (g - r.value);
    r.stderr_ = r.episodes > 1 ? std::sqrt(ss / (r.episodes - 1) / r.episodes) : 0.0;
    return r;
}

} // namespace

McEstimate mc_oracle(const TabularMdp& m, const TabularPolicy& pi, int episodes, double gamma, std::uint64_t seed)
{
    m.validate();
    check_policy(m, pi);
    if (episodes < 1) throw DomainError("mc_oracle: need at least one episode");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> returns;
    returns.reserve(static_cast<std::size_t>(episodes));
    for (int i = 0; i < episodes; ++i) {
        sim::Rng rng(sim::derive_seed(seed, static_cast<std::uint64_t>(i)));
        int s = draw(m.initial, u(rng));
        double g = 0.0, w = 1.0;
        for (int t = 0; t < 100000 && s >= 0; ++t) {
            const int a = draw(pi[s], u(rng));
            g += w * m.R[s][a];
            w *= gamma;
            s = draw_next(m.P[s][a], u(rng));
        }
        returns.push_back(g);
    }
    return summarise(returns);
}

// ---- sepsis data -------------------------------------------------------------

sim::ActionProbs BehaviorEpisodePolicy::probabilities(const std::vector<model::StateVec>& states, const std::vector<int>&, int clinician) const
{
    return behavior_.probabilities(sim::PatientState::from_features(states.back()), clinician);
}

namespace {

/// Heuristic schedule for `steps` decisions; steps past the horizon hold the target.
std::vector<model::AtgVec> heuristic_atg(const sim::AcuityVector& start, int steps, int horizon, double fraction)
{
    auto k = eval::linear_decay_schedule(start, std::max(1, horizon), fraction);
    while (static_cast<int>(k.size()) < steps) k.push_back(k.back());
    k.resize(static_cast<std::size_t>(steps));
    return k;
}

std::vector<double> to_vector(const std::array<double, sim::kActions>& a) { return {a.begin(), a.end()}; }

} // namespace

ModelEpisodePolicy::ModelEpisodePolicy(const model::SequenceModel& m, const sim::AcuityRubric& rubric, bool greedy, double atg_fraction,
                                       int atg_horizon)
    : model_(m), rubric_(rubric), greedy_(greedy), atg_fraction_(atg_fraction), atg_horizon_(atg_horizon)
{
    if (m.config().variant == model::Variant::StatePredictor) throw DomainError("ModelEpisodePolicy: model is a state predictor");
}

sim::ActionProbs ModelEpisodePolicy::probabilities(const std::vector<model::StateVec>& states, const std::vector<int>& actions, int) const
{
    const int ctx = model_.config().context_steps;
    const int T = static_cast<int>(states.size());
    const int begin = std::max(0, T - ctx);
    model::Prefix p;
    p.rtg = 1.0;
    const bool uses_atg = model_.layout().has(model::TokenType::Atg);
    std::vector<model::AtgVec> k;
    if (uses_atg) k = heuristic_atg(rubric_.score(sim::PatientState::from_features(states.front())), T, atg_horizon_, atg_fraction_);
    for (int t = begin; t < T; ++t) {
        p.states.push_back(states[static_cast<std::size_t>(t)]);
        if (uses_atg) p.atg.push_back(k[static_cast<std::size_t>(t)]);
        if (t < T - 1) p.actions.push_back(actions[static_cast<std::size_t>(t)]);
    }
    const auto logits = model_.action_logits(p).back();
    if (greedy_) {
        sim::ActionProbs out{};
        out[static_cast<std::size_t>(model::select_action(logits, model::ArgmaxDecode{}).index())] = 1.0;
        return out;
    }
    return model::softmax_probs(logits);
}

McEstimate mc_oracle(const sim::SimConfig& config, const EpisodePolicy& pi, int episodes, double gamma, std::uint64_t seed)
{
    if (episodes < 1) throw DomainError("mc_oracle: need at least one episode");
    const sim::Simulator simulator(config);
    const sim::BehaviorPolicy behavior(config);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> returns;
    returns.reserve(static_cast<std::size_t>(episodes));
    for (int i = 0; i < episodes; ++i) {
        sim::Rng rng(sim::derive_seed(seed, static_cast<std::uint64_t>(i)));
        const int clinician = behavior.sample_clinician(rng);
        sim::Episode ep = simulator.start(rng);
        std::vector<model::StateVec> states{ep.state.features()};
        std::vector<int> actions;
        double g = 0.0, w = 1.0;
        while (!ep.done) {
            const auto probs = pi.probabilities(states, actions, clinician);
            const int a = draw(probs, u(rng));
            const auto r = simulator.step(ep, sim::DoseAction::from_index(a), rng);
            g += w * r.reward;
            w *= gamma;
            actions.push_back(a);
            states.push_back(r.next.features());
        }
        returns.push_back(g);
    }
    return summarise(returns);
}

OpeData from_dataset(const data::Dataset& d, const std::vector<int>& episodes, const model::SequenceModel& policy, double atg_fraction, const model::SequenceModel* estimated_behavior)
{
    if (policy.config().variant == model::Variant::StatePredictor) throw DomainError("ope: evaluation model is a state predictor");
    if (estimated_behavior && estimated_behavior->config().variant != model::Variant::BC) {
        throw DomainError("ope: estimated behaviour policy must be a BC model");
    }
    const bool uses_atg = policy.layout().has(model::TokenType::Atg);
    OpeData out;
    out.reserve(episodes.size());
    for (int idx : episodes) {
        const auto& tr = d.episodes.at(static_cast<std::size_t>(idx));
        const int T = tr.length();
        if (T > policy.config().context_steps) throw DomainError("ope: episode longer than the model context");
        auto p = model::Prefix::from_trajectory(tr, T);
        p.rtg = 1.0;
        if (uses_atg) p.atg = heuristic_atg(tr.acuity.front(), T, T, atg_fraction);
        else p.atg.clear();
        const auto logits = policy.action_logits(p);
        std::vector<std::array<double, sim::kActions>> bc;
        if (estimated_behavior) bc = estimated_behavior->action_logits(model::Prefix::from_trajectory(tr, T));
        OpeEpisode e;
        for (int t = 0; t < T; ++t) {
            const auto ut = static_cast<std::size_t>(t);
            OpeStep s;
            const auto f = tr.state(t).features();
            s.features.assign(f.begin(), f.end());
            s.action = tr.actions[ut];
            s.reward = tr.rewards[ut];
            s.pi = to_vector(model::softmax_probs(logits[ut]));
            s.behavior_prob = estimated_behavior ? model::softmax_probs(bc[ut])[static_cast<std::size_t>(s.action)] : tr.behavior_probs[ut];
            e.steps.push_back(std::move(s));
        }
        out.push_back(std::move(e));
    }
    return out;
}

} // namespace medt::ope
