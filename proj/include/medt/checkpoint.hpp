#pragma once

#include "medt/models.hpp"

#include <cstdint>
#include <string>

#include "json.hpp"

namespace medt::model {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    std::uint64_t seed = 0;
    int epoch = 0;
    double train_loss = 0.0;
    double validation_loss = 0.0;
    std::string data_hash;
    std::string config_hash;
    std::string code_version;
};

void to_json(nlohmann::json& j, const CheckpointMeta& m);
void from_json(const nlohmann::json& j, CheckpointMeta& m);

struct LoadedModel {
    SequenceModel model;
    CheckpointMeta meta;
    /// fnv1a64 of the whole file, hex.
    std::string checksum;
};

/// Layout: "MEDTCKPT", u32 version, u64 length + config document (text),
/// u32 parameter count, then per parameter u32 name length, name, u32 rank,
/// rank x u32 dims, f32 payload; trailing u64 fnv1a64 of all preceding bytes.
/// Integers and floats are little-endian.
std::string serialize_checkpoint(const SequenceModel& m, const CheckpointMeta& meta);
LoadedModel parse_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");

/// Returns the checksum of the written file.
std::string save_checkpoint(const SequenceModel& m, const CheckpointMeta& meta, const std::string& path);
LoadedModel load_checkpoint(const std::string& path);

} // namespace medt::model
