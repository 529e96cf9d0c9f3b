#pragma once

// Series ingestion, normalization, splitting and rolling-window sampling.

#include <array>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "memts/tensor.hpp"

namespace memts {

using TimePoint = std::chrono::sys_seconds;

/// (month 1-12, day 1-31, weekday 0-6 with Monday = 0, hour 0-23)
using CalendarMarks = std::array<int, 4>;

CalendarMarks calendar_features(TimePoint t);

/// Parses "YYYY-MM-DD", "YYYY-MM-DD HH:MM[:SS]" or the ISO form with 'T'
/// and an optional trailing 'Z'. Throws IngestionError.
TimePoint parse_datetime(std::string_view text);
std::string format_datetime(TimePoint t);

/// Timestamped multivariate series, values stored row-major [rows × features].
struct SeriesTable {
    std::vector<TimePoint> timestamps;
    std::vector<double> values;
    std::vector<std::string> feature_names;
    std::size_t target_index = 0;

    std::size_t rows() const { return timestamps.size(); }
    std::size_t features() const { return feature_names.size(); }
    double value(std::size_t row, std::size_t feature) const { return values[row * features() + feature]; }
    double& value(std::size_t row, std::size_t feature) { return values[row * features() + feature]; }

    /// Rows [begin, begin + count) as an independent table.
    SeriesTable slice(std::size_t begin, std::size_t count) const;
    /// Throws IngestionError when the invariants do not hold.
    void validate() const;
};

SeriesTable load_csv(const std::filesystem::path& path, const std::string& datetime_column = "date",
                     const std::string& target_column = "OT");
void write_csv(const SeriesTable& table, const std::filesystem::path& path,
               const std::string& datetime_column = "date");

/// Per-feature z-score statistics.
struct Normalizer {
    std::vector<double> means;
    std::vector<double> stds;

    static constexpr double kMinStd = 1e-8;

    static Normalizer fit(const SeriesTable& train);
    SeriesTable normalize(const SeriesTable& table) const;
    double normalize(double v, std::size_t feature) const { return (v - means[feature]) / stds[feature]; }
    double denormalize(double v, std::size_t feature) const { return v * stds[feature] + means[feature]; }
};

struct SplitRatios {
    double train = 0.6;
    double val = 0.2;
    double test = 0.2;
};

struct Splits {
    SeriesTable train;
    SeriesTable val;
    SeriesTable test;
};

/// Contiguous chronological segments with boundaries at floor(N·cumratio).
/// A segment shorter than min_length is a ConfigError.
Splits split(const SeriesTable& table, SplitRatios ratios, std::size_t min_length = 0);

struct WindowSpec {
    std::size_t encoder_len = 48;
    std::size_t decoder_len = 48;
    std::size_t pred_len = 24;
    std::size_t stride = 1;

    std::size_t window_size() const { return encoder_len + pred_len; }
    void validate() const;
};

struct WindowSample {
    std::size_t start = 0;        // offset of the first encoder row in the table
    Tensor enc_input;             // [L_S × d_f]
    Tensor dec_input;             // [L_dec × d_f], tail of enc_input
    Tensor target;                // [L_p × d_f]
    std::vector<CalendarMarks> enc_marks;  // L_S
    std::vector<CalendarMarks> dec_marks;  // L_dec + L_p, includes the horizon
};

/// Number of valid window starts 0, S_s, 2·S_s, … with start + S_w <= N_d.
std::size_t count_windows(std::size_t n_rows, const WindowSpec& spec);
/// floor((N_d − S_w + 1) / S_s): the textbook sample count. Equals
/// count_windows at stride 1 and undercounts by one for some larger strides.
std::size_t nominal_window_count(std::size_t n_rows, const WindowSpec& spec);

/// Rolling windows over an already normalized table, in chronological order.
/// Samples are materialized on access; the stream keeps a pointer to the table.
class WindowStream {
public:
    WindowStream(const SeriesTable& table, WindowSpec spec);

    std::size_t size() const { return count_; }
    WindowSample operator[](std::size_t i) const;
    const WindowSpec& spec() const { return spec_; }

    class iterator {
    public:
        using value_type = WindowSample;
        using difference_type = std::ptrdiff_t;
        iterator(const WindowStream* s, std::size_t i) : stream_(s), index_(i) {}
        WindowSample operator*() const { return (*stream_)[index_]; }
        iterator& operator++() {
            ++index_;
            return *this;
        }
        bool operator==(const iterator& o) const { return index_ == o.index_; }

    private:
        const WindowStream* stream_;
        std::size_t index_;
    };
    iterator begin() const { return {this, 0}; }
    iterator end() const { return {this, count_}; }

private:
    const SeriesTable* table_;
    WindowSpec spec_;
    std::size_t count_;
};

/// The table must outlive the returned stream.
WindowStream iter_windows(const SeriesTable& normalized_table, const WindowSpec& spec);

/// Fraction of encoder rows shared by consecutive samples: max(0, (L_S − S_s) / L_S).
double similarity(std::size_t encoder_len, std::size_t stride);

struct SynthOptions {
    double noise_std = 0.2;
    double daily_amplitude = 1.0;
    double weekly_amplitude = 0.5;
    double latent_amplitude = 0.6;
    double trend = 1.0;  // total drift over the series, in amplitude units
    TimePoint start = std::chrono::sys_days{std::chrono::year{2016} / 7 / 1};
};

/// Hourly multivariate series: per feature a daily and a weekly sinusoid, a
/// linear trend, Gaussian noise, and a shared latent sinusoid coupling the
/// features. The last feature is named "OT" and is the target.
SeriesTable synth_generate(std::size_t n_points, std::size_t features, std::uint64_t seed,
                           const SynthOptions& options = {});

}  // namespace memts
