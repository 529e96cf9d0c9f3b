#pragma once

// Checkpoint directory layout:
//   manifest.txt   format version, byte order, tick counter, one line per array
//   arrays.bin     every array back to back as little-endian f64
//   config.txt     the resolved run configuration
//   memory.bin     the persisted memory state
//   normalizer.csv feature,mean,std (plus the target name)

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "memts/config.hpp"
#include "memts/data.hpp"
#include "memts/memory.hpp"
#include "memts/model.hpp"

namespace memts {

inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

/// Adam moments aligned with Model::parameters().
struct OptimizerState {
    std::size_t steps = 0;
    std::vector<std::vector<double>> first;
    std::vector<std::vector<double>> second;
};

struct Checkpoint {
    RunConfig config;  // model.features resolved
    Model model;
    MemoryState memory;
    Normalizer normalizer;
    std::vector<std::string> feature_names;
    std::size_t target_index = 0;
    std::size_t steps = 0;  // optimizer steps taken; drives the dropout tick
    std::optional<OptimizerState> optimizer;
};

/// Writes into a sibling temporary directory and renames it over dir.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint);

/// Rebuilds the model from the stored config and overwrites every parameter
/// by name. Missing, extra or misshapen arrays raise PersistenceError.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace memts
