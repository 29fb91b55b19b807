#pragma once

#include "medt/dataset.hpp"
#include "medt/models.hpp"
#include "medt/sim.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

namespace medt::ope {

inline constexpr double kDefaultGamma = 0.99;
inline constexpr double kRatioMin = 1e-6;
inline constexpr double kRatioMax = 1e6;

/// One logged decision with everything the estimators need: the evaluation
/// policy's full action distribution at this state and the behaviour
/// probability of the logged action.
struct OpeStep {
    int state = -1;                 ///< tabular state id, -1 in feature mode
    std::vector<double> features;   ///< state features (network FQE)
    int action = 0;
    double reward = 0.0;
    double behavior_prob = 1.0;
    std::vector<double> pi;         ///< evaluation policy pi(. | s_t)
};

/// Steps in time order; the episode terminates after the last step.
struct OpeEpisode {
    std::vector<OpeStep> steps;
};

using OpeData = std::vector<OpeEpisode>;

void validate(const OpeData& d);

double discounted_return(const OpeEpisode& e, double gamma);
double mean_discounted_return(const OpeData& d, double gamma);

struct Bootstrap {
    int resamples = 0;
    double stddev = 0.0;
    double p025 = 0.0, p50 = 0.0, p975 = 0.0;
    std::vector<double> values;
};

struct OpeResult {
    std::string estimator;
    double value = 0.0;
    double gamma = kDefaultGamma;
    double clip_rate = 0.0;
    Bootstrap bootstrap;
    std::vector<std::string> warnings;
};

void to_json(nlohmann::json& j, const Bootstrap& b);
void to_json(nlohmann::json& j, const OpeResult& r);

/// Per-step clipped ratios and the per-step average cumulative ratio w_t.
/// An episode that ended before t contributes its final cumulative ratio.
struct ImportanceWeights {
    std::vector<std::vector<double>> cumulative; ///< rho_{1:t} per episode
    std::vector<double> w;                       ///< w_t, t = 1..max length
    double clip_rate = 0.0;
};
ImportanceWeights importance_weights(const OpeData& d);

/// (1/N) sum_n rho_{1:T_n} / w_{T_n} * sum_t gamma^{t-1} r_t
OpeResult wis(const OpeData& d, double gamma = kDefaultGamma);

/// Action values of the evaluation policy.
class QFunction {
public:
    virtual ~QFunction() = default;
    virtual std::vector<double> values(const OpeStep& s) const = 0;
    double state_value(const OpeStep& s) const;
};

class ZeroQ : public QFunction {
public:
    explicit ZeroQ(int actions) : actions_(actions) {}
    std::vector<double> values(const OpeStep&) const override { return std::vector<double>(static_cast<std::size_t>(actions_), 0.0); }

private:
    int actions_;
};

class TabularQ : public QFunction {
public:
    TabularQ(int states, int actions) : states_(states), actions_(actions), table_(static_cast<std::size_t>(states * actions), 0.0) {}
    std::vector<double> values(const OpeStep& s) const override;
    double& at(int s, int a) { return table_[static_cast<std::size_t>(s * actions_ + a)]; }
    double at(int s, int a) const { return table_[static_cast<std::size_t>(s * actions_ + a)]; }
    int states() const { return states_; }
    int actions() const { return actions_; }

private:
    int states_, actions_;
    std::vector<double> table_;
};

struct FqeReport {
    int iterations = 0;
    double final_residual = 0.0;
    std::vector<double> residuals;
    std::vector<std::string> warnings;
};

/// Tabular FQE on the empirical model: Q(s,a) <- mean over logged (s,a) of
/// r + gamma * V(s') with V(s') = sum_a' pi(a'|s') Q(s',a'), iterated until
/// the largest change is below `tolerance`. Unvisited pairs stay at 0.
std::shared_ptr<TabularQ> fqe_tabular(const OpeData& d, int states, int actions, double gamma, double tolerance = 1e-10,
                                      int max_iterations = 100000, FqeReport* report = nullptr);

struct FqeNetworkConfig {
    int hidden = 64;
    int iterations = 50;
    int epochs_per_iteration = 1;
    int batch_size = 256;
    double learning_rate = 1e-3;
    int patience = 5;
    std::uint64_t seed = 0;
};

/// Two-layer feed-forward Q network: standardised state features in, one
/// value per action out.
class NetworkQ : public QFunction {
public:
    NetworkQ(int inputs, int actions, int hidden, std::uint64_t seed);
    std::vector<double> values(const OpeStep& s) const override;
    Tensor forward_batch(const std::vector<const OpeStep*>& steps) const;
    ag::Var forward(ag::Tape& t, const Tensor& features) const;
    Tensor features(const std::vector<const OpeStep*>& steps) const;

    nn::ParameterSet& params() { return params_; }
    std::vector<double> mean, scale;

private:
    int inputs_, actions_;
    nn::ParameterSet params_;
    nn::ParameterSet::Id w1_, b1_, w2_, b2_;
};

std::shared_ptr<NetworkQ> fqe_network(const OpeData& d, double gamma, const FqeNetworkConfig& c, FqeReport* report = nullptr);

/// Mean over episodes of sum_a pi(a|s_1) Q(s_1, a).
OpeResult fqe_value(const OpeData& d, const QFunction& q, double gamma);

/// sum_t gamma^{t-1} [ rho_{1:t}/w_t r_t - (rho_{1:t}/w_t Q(s_t,a_t) - rho_{1:t-1}/w_{t-1} V(s_t)) ],
/// averaged over episodes, with rho_{1:0}/w_0 = 1.
OpeResult wdr(const OpeData& d, const QFunction& q, double gamma = kDefaultGamma);

using Estimator = std::function<double(const OpeData&)>;

/// Episode-level resampling with replacement.
Bootstrap bootstrap(const OpeData& d, const Estimator& estimator, int resamples, std::uint64_t seed);

struct McEstimate {
    double value = 0.0;
    double stderr_ = 0.0;
    int episodes = 0;
};

// ---- small tabular MDP -------------------------------------------------------

/// Episodic MDP. From (s,a) the process moves to s' with probability
/// P[s][a][s'] and terminates with the remaining mass; reward R[s][a] is
/// received on every step.
struct TabularMdp {
    int states = 0;
    int actions = 0;
    std::vector<double> initial;
    std::vector<std::vector<std::vector<double>>> P;
    std::vector<std::vector<double>> R;

    void validate() const;
};

using TabularPolicy = std::vector<std::vector<double>>; // [state][action]

/// The fixed 5-state, 3-action MDP used by the oracle tests.
TabularMdp small_mdp(bool deterministic = false);
TabularPolicy small_behavior_policy();
TabularPolicy small_target_policy();

struct ExactValue {
    std::vector<double> V;
    std::vector<std::vector<double>> Q;
    double value = 0.0; ///< sum_s initial(s) V(s)
    int iterations = 0;
    double residual = 0.0;
};

/// Iterative policy evaluation to a Bellman residual below `tolerance`.
ExactValue evaluate_exact(const TabularMdp& m, const TabularPolicy& pi, double gamma, double tolerance = 1e-13);

/// Samples episodes under `behavior`, storing pi(.|s) of `target`.
OpeData sample_tabular(const TabularMdp& m, const TabularPolicy& behavior, const TabularPolicy& target, int episodes,
                       std::uint64_t seed, int max_steps = 1000);

McEstimate mc_oracle(const TabularMdp& m, const TabularPolicy& pi, int episodes, double gamma, std::uint64_t seed);

/// Tabular FQE with expected backups under the known model.
std::shared_ptr<TabularQ> fqe_tabular(const TabularMdp& m, const TabularPolicy& pi, double gamma, double tolerance = 1e-10,
                                      int max_iterations = 100000, FqeReport* report = nullptr);
/// sum_s initial(s) sum_a pi(a|s) Q(s,a)
double initial_value(const TabularMdp& m, const TabularPolicy& pi, const TabularQ& q);

// ---- sepsis data -------------------------------------------------------------

/// Per-episode action distribution for the simulator's Monte Carlo oracle.
class EpisodePolicy {
public:
    virtual ~EpisodePolicy() = default;
    /// states: s_1..s_t, actions: a_1..a_{t-1}; clinician is the episode's latent style.
    virtual sim::ActionProbs probabilities(const std::vector<model::StateVec>& states, const std::vector<int>& actions,
                                           int clinician) const = 0;
};

class BehaviorEpisodePolicy : public EpisodePolicy {
public:
    explicit BehaviorEpisodePolicy(const sim::SimConfig& c) : behavior_(c) {}
    sim::ActionProbs probabilities(const std::vector<model::StateVec>& states, const std::vector<int>& actions, int clinician) const override;

private:
    sim::BehaviorPolicy behavior_;
};

/// Transformer policy with target return 1 and the linear-decay ATG
/// heuristic from the first state's acuity over `atg_horizon` steps.
/// Greedy puts all mass on the argmax.
class ModelEpisodePolicy : public EpisodePolicy {
public:
    ModelEpisodePolicy(const model::SequenceModel& m, const sim::AcuityRubric& rubric, bool greedy, double atg_fraction = 0.0,
                       int atg_horizon = 10);
    sim::ActionProbs probabilities(const std::vector<model::StateVec>& states, const std::vector<int>& actions, int clinician) const override;

private:
    const model::SequenceModel& model_;
    sim::AcuityRubric rubric_;
    bool greedy_;
    double atg_fraction_;
    int atg_horizon_;
};

/// On-policy Monte Carlo in the simulator: episode i draws its clinician,
/// initial state and noise from derive_seed(seed, i).
McEstimate mc_oracle(const sim::SimConfig& config, const EpisodePolicy& pi, int episodes, double gamma, std::uint64_t seed);

/// Converts logged trajectories into estimator input, with pi(.|s_t) from a
/// transformer policy under teacher forcing (target return 1, ATG from the
/// heuristic). Behaviour probabilities come from the log unless
/// `estimated_behavior` (a BC model) is given.
OpeData from_dataset(const data::Dataset& d, const std::vector<int>& episodes, const model::SequenceModel& policy, double atg_fraction = 0.0,
                     const model::SequenceModel* estimated_behavior = nullptr);

} // namespace medt::ope
