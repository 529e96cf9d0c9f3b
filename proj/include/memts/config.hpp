#pragma once

// Plain-text run configuration: one "dotted.key = value" per line, '#'
// starts a comment. Unset fields fall back to the defaults for the
// configured horizon.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "memts/data.hpp"
#include "memts/model.hpp"
#include "memts/training.hpp"

namespace memts {

struct DataSource {
    std::string path;  // empty: synthetic series
    std::string datetime_column = "date";
    std::string target = "OT";
    std::size_t synth_points = 2000;
    std::size_t synth_features = 3;
    std::uint64_t synth_seed = 1;
};

struct RunConfig {
    DataSource data;
    SplitRatios split;
    ModelConfig model;
    TrainSchedule schedule;
    std::uint64_t seed = 1;
    std::string out_dir = "run";
};

/// Throws ConfigError naming the origin, line and key.
RunConfig parse_run_config(std::string_view text, const std::string& origin = "<config>");
RunConfig load_run_config(const std::filesystem::path& path);
/// Every field, one per line, in a form parse_run_config reads back exactly.
std::string format_run_config(const RunConfig& config);

/// The configured series: CSV at data.path or the synthetic generator.
SeriesTable load_series(const DataSource& source);

struct PreparedData {
    Normalizer normalizer;
    Splits normalized;
};

/// Fills model.features from the table when it is 0 (a different nonzero
/// count is a ConfigError), then validates the model and schedule.
void resolve_features(RunConfig& config, const SeriesTable& table);

/// Chronological split, z-scored with the train statistics, or with the
/// given normalizer when one is passed.
PreparedData prepare_data(const RunConfig& config, const SeriesTable& table, const Normalizer* fixed = nullptr);

}  // namespace memts
