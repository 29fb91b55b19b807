#pragma once

#include "medt/sim.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace medt::data {

inline constexpr int kDatasetSchemaVersion = 1;

/// One offline episode. States and acuity carry T+1 entries (the state after
/// the last action included); per-step fields carry T.
struct Trajectory {
    int id = 0;
    std::array<double, sim::kDemographics> demographics{};
    std::vector<std::array<double, sim::kVitals>> vitals;
    std::vector<int> actions;
    std::vector<double> behavior_probs;
    std::vector<sim::AcuityVector> acuity;
    std::vector<double> rewards;
    double outcome = 0.0;
    int clinician = 0;

    int length() const { return static_cast<int>(actions.size()); }
    sim::PatientState state(int t) const;
    /// Return-to-go at every step is the terminal outcome.
    double rtg(int) const { return outcome; }
    /// Acuity-to-go for step t is the acuity of the state after a_t.
    const sim::AcuityVector& atg(int t) const { return acuity.at(static_cast<std::size_t>(t) + 1); }
    double discounted_return(double gamma) const;

    friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct DatasetHeader {
    int schema_version = kDatasetSchemaVersion;
    std::uint64_t seed = 0;
    sim::SimConfig sim;
    std::string config_hash;
    std::string code_version;
};

struct Dataset {
    DatasetHeader header;
    std::vector<Trajectory> episodes;

    double mean_discounted_return(double gamma) const;
    double survival_fraction() const;
    int max_length() const;
};

/// Episode i uses the stream derive_seed(seed, i), so output is independent
/// of how episodes are scheduled.
Dataset generate_dataset(int episodes, const sim::SimConfig& config, std::uint64_t seed, int first_id = 0);

std::string serialize_dataset(const Dataset& d);
Dataset parse_dataset(const std::string& text, const std::string& origin = "<memory>");
void save_dataset(const Dataset& d, const std::string& path);
Dataset load_dataset(const std::string& path);

std::string sim_config_hash(const sim::SimConfig& c);

/// Episode-level split: the first floor(n * train_fraction) episodes after a
/// seeded shuffle go to training.
struct Split {
    std::vector<int> train;
    std::vector<int> validation;
};
Split split_episodes(int n, double train_fraction, std::uint64_t seed);

} // namespace medt::data
