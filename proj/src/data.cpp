#include "memts/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "memts/error.hpp"
#include "memts/io.hpp"

namespace memts {

namespace chr = std::chrono;

// ---------------------------------------------------------------------------
// Calendar
// ---------------------------------------------------------------------------

CalendarMarks calendar_features(TimePoint t) {
    const auto day = chr::floor<chr::days>(t);
    const chr::year_month_day ymd{day};
    const chr::hh_mm_ss hms{t - day};
    const chr::weekday wd{day};
    return {static_cast<int>(static_cast<unsigned>(ymd.month())),
            static_cast<int>(static_cast<unsigned>(ymd.day())),
            static_cast<int>(wd.iso_encoding()) - 1, static_cast<int>(hms.hours().count())};
}

namespace {

bool read_int(std::string_view s, std::size_t pos, std::size_t len, int& out) {
    if (pos + len > s.size()) return false;
    for (std::size_t i = pos; i < pos + len; ++i)
        if (s[i] < '0' || s[i] > '9') return false;
    std::from_chars(s.data() + pos, s.data() + pos + len, out);
    return true;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '"')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r' || s.back() == '"'))
        s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split_line(std::string_view line) {
    std::vector<std::string_view> cells;
    std::size_t start = 0;
    for (;;) {
        const std::size_t comma = line.find(',', start);
        cells.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return cells;
}

}  // namespace

TimePoint parse_datetime(std::string_view text) {
    const std::string_view s = trim(text);
    int y = 0, mo = 0, d = 0, h = 0, mi = 0, sec = 0;
    auto fail = [&]() -> TimePoint {
        throw IngestionError("unparsable datetime '" + std::string(s) + "'");
    };
    if (!read_int(s, 0, 4, y) || s.size() < 10 || s[4] != '-' || !read_int(s, 5, 2, mo) || s[7] != '-' ||
        !read_int(s, 8, 2, d))
        return fail();
    std::size_t pos = 10;
    if (pos < s.size()) {
        if (s[pos] != ' ' && s[pos] != 'T') return fail();
        if (!read_int(s, pos + 1, 2, h) || pos + 3 >= s.size() || s[pos + 3] != ':' || !read_int(s, pos + 4, 2, mi))
            return fail();
        pos += 6;
        if (pos < s.size() && s[pos] == ':') {
            if (!read_int(s, pos + 1, 2, sec)) return fail();
            pos += 3;
        }
        if (pos < s.size() && s[pos] == 'Z') ++pos;
        if (pos != s.size()) return fail();
    }
    const chr::year_month_day ymd{chr::year{y}, chr::month{static_cast<unsigned>(mo)},
                                  chr::day{static_cast<unsigned>(d)}};
    if (!ymd.ok() || h > 23 || mi > 59 || sec > 59) return fail();
    return chr::sys_days{ymd} + chr::hours{h} + chr::minutes{mi} + chr::seconds{sec};
}

std::string format_datetime(TimePoint t) {
    const auto day = chr::floor<chr::days>(t);
    const chr::year_month_day ymd{day};
    const chr::hh_mm_ss hms{t - day};
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u %02d:%02d:%02d", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                  static_cast<int>(hms.hours().count()), static_cast<int>(hms.minutes().count()),
                  static_cast<int>(hms.seconds().count()));
    return buf;
}

// ---------------------------------------------------------------------------
// SeriesTable
// ---------------------------------------------------------------------------

SeriesTable SeriesTable::slice(std::size_t begin, std::size_t count) const {
    SeriesTable out;
    out.feature_names = feature_names;
    out.target_index = target_index;
    const auto b = static_cast<std::ptrdiff_t>(begin);
    const auto c = static_cast<std::ptrdiff_t>(count);
    out.timestamps.assign(timestamps.begin() + b, timestamps.begin() + b + c);
    const auto f = static_cast<std::ptrdiff_t>(features());
    out.values.assign(values.begin() + b * f, values.begin() + (b + c) * f);
    return out;
}

void SeriesTable::validate() const {
    if (features() == 0) throw IngestionError("series has no feature columns");
    if (target_index >= features()) throw IngestionError("target index out of range");
    if (values.size() != rows() * features()) throw IngestionError("value matrix does not match timestamp count");
    for (std::size_t i = 1; i < rows(); ++i) {
        if (timestamps[i] <= timestamps[i - 1])
            throw IngestionError("timestamps not strictly increasing at row " + std::to_string(i));
        if (i >= 2 && timestamps[i] - timestamps[i - 1] != timestamps[1] - timestamps[0])
            throw IngestionError("irregular sampling interval at " + format_datetime(timestamps[i]));
    }
}

SeriesTable load_csv(const std::filesystem::path& path, const std::string& datetime_column,
                     const std::string& target_column) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw IngestionError(path.string() + ": missing header row");
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);

    const auto header = split_line(line);
    std::ptrdiff_t date_col = -1;
    std::vector<std::size_t> feature_cols;
    SeriesTable table;
    for (std::size_t c = 0; c < header.size(); ++c) {
        if (header[c] == datetime_column) {
            date_col = static_cast<std::ptrdiff_t>(c);
        } else {
            feature_cols.push_back(c);
            table.feature_names.emplace_back(header[c]);
        }
    }
    if (date_col < 0) throw IngestionError(path.string() + ": no datetime column '" + datetime_column + "'");
    const auto target = std::find(table.feature_names.begin(), table.feature_names.end(), target_column);
    if (target == table.feature_names.end())
        throw IngestionError(path.string() + ": no target column '" + target_column + "'");
    table.target_index = static_cast<std::size_t>(target - table.feature_names.begin());

    struct Row {
        TimePoint t;
        std::size_t line;
        std::vector<double> v;
    };
    std::vector<Row> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        const auto cells = split_line(line);
        if (cells.size() != header.size())
            throw IngestionError(path.string() + ": row " + std::to_string(line_no) + " has " +
                                 std::to_string(cells.size()) + " cells, expected " + std::to_string(header.size()));
        Row r;
        r.line = line_no;
        try {
            r.t = parse_datetime(cells[static_cast<std::size_t>(date_col)]);
        } catch (const IngestionError& e) {
            throw IngestionError(path.string() + ": row " + std::to_string(line_no) + ": " + e.what());
        }
        for (std::size_t c : feature_cols) {
            const std::string_view cell = cells[c];
            double v = 0.0;
            const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (cell.empty() || ec != std::errc{} || ptr != cell.data() + cell.size() || !std::isfinite(v))
                throw IngestionError(path.string() + ": row " + std::to_string(line_no) + ": non-numeric value '" +
                                     std::string(cell) + "' in column '" + std::string(header[c]) + "'");
            r.v.push_back(v);
        }
        rows.push_back(std::move(r));
    }
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.t < b.t; });
    for (std::size_t i = 1; i < rows.size(); ++i)
        if (rows[i].t == rows[i - 1].t)
            throw IngestionError(path.string() + ": row " + std::to_string(rows[i].line) + ": duplicate timestamp " +
                                 format_datetime(rows[i].t));
    for (auto& r : rows) {
        table.timestamps.push_back(r.t);
        table.values.insert(table.values.end(), r.v.begin(), r.v.end());
    }
    try {
        table.validate();
    } catch (const IngestionError& e) {
        throw IngestionError(path.string() + ": " + e.what());
    }
    return table;
}

void write_csv(const SeriesTable& table, const std::filesystem::path& path, const std::string& datetime_column) {
    std::ostringstream os;
    os << datetime_column;
    for (const auto& n : table.feature_names) os << ',' << n;
    os << '\n';
    for (std::size_t i = 0; i < table.rows(); ++i) {
        os << format_datetime(table.timestamps[i]);
        for (std::size_t j = 0; j < table.features(); ++j) os << ',' << format_double(table.value(i, j));
        os << '\n';
    }
    write_file_atomic(path, os.str());
}

// ---------------------------------------------------------------------------
// Normalizer
// ---------------------------------------------------------------------------

Normalizer Normalizer::fit(const SeriesTable& train) {
    const std::size_t f = train.features();
    const std::size_t n = train.rows();
    if (n == 0) throw ConfigError("normalizer: empty training split");
    Normalizer norm;
    norm.means.assign(f, 0.0);
    norm.stds.assign(f, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) norm.means[j] += train.value(i, j);
    for (double& m : norm.means) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < f; ++j) {
            const double d = train.value(i, j) - norm.means[j];
            norm.stds[j] += d * d;
        }
    for (double& s : norm.stds) s = std::max(kMinStd, std::sqrt(s / static_cast<double>(n)));
    return norm;
}

SeriesTable Normalizer::normalize(const SeriesTable& table) const {
    if (table.features() != means.size())
        throw DimensionError("normalizer fitted on " + std::to_string(means.size()) + " features, table has " +
                             std::to_string(table.features()));
    SeriesTable out = table;
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.features(); ++j) out.value(i, j) = normalize(table.value(i, j), j);
    return out;
}

// ---------------------------------------------------------------------------
// Splits and windows
// ---------------------------------------------------------------------------

Splits split(const SeriesTable& table, SplitRatios r, std::size_t min_length) {
    if (!(r.train > 0 && r.val > 0 && r.test > 0) || std::abs(r.train + r.val + r.test - 1.0) > 1e-9)
        throw ConfigError("split ratios must be positive and sum to 1");
    const auto n = static_cast<double>(table.rows());
    // The tolerance keeps 0.7 + 0.1 from flooring 1000 · 0.7999… down to 799.
    const auto b1 = static_cast<std::size_t>(std::floor(n * r.train + 1e-9));
    const auto b2 = std::max(b1, static_cast<std::size_t>(std::floor(n * (r.train + r.val) + 1e-9)));
    Splits s{table.slice(0, b1), table.slice(b1, b2 - b1), table.slice(b2, table.rows() - b2)};
    for (const auto* seg : {&s.train, &s.val, &s.test})
        if (seg->rows() < min_length)
            throw ConfigError("split segment of " + std::to_string(seg->rows()) + " rows is shorter than the window size " +
                              std::to_string(min_length));
    return s;
}

void WindowSpec::validate() const {
    if (encoder_len == 0 || decoder_len == 0 || pred_len == 0 || stride == 0)
        throw ConfigError("window lengths and stride must be positive");
    if (decoder_len > encoder_len)
        throw ConfigError("decoder length " + std::to_string(decoder_len) + " exceeds encoder length " +
                          std::to_string(encoder_len));
}

std::size_t count_windows(std::size_t n_rows, const WindowSpec& spec) {
    if (n_rows < spec.window_size()) return 0;
    return (n_rows - spec.window_size()) / spec.stride + 1;
}

std::size_t nominal_window_count(std::size_t n_rows, const WindowSpec& spec) {
    if (n_rows < spec.window_size()) return 0;
    return (n_rows - spec.window_size() + 1) / spec.stride;
}

WindowStream::WindowStream(const SeriesTable& table, WindowSpec spec)
    : table_(&table), spec_(spec), count_(0) {
    spec_.validate();
    count_ = count_windows(table.rows(), spec_);
}

WindowSample WindowStream::operator[](std::size_t i) const {
    if (i >= count_) throw ContractError("window index " + std::to_string(i) + " out of range");
    const SeriesTable& t = *table_;
    const std::size_t f = t.features();
    const std::size_t s = i * spec_.stride;
    auto rows = [&](std::size_t begin, std::size_t count) {
        const auto first = t.values.begin() + static_cast<std::ptrdiff_t>(begin * f);
        return Tensor({count, f}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * f)));
    };
    WindowSample w;
    w.start = s;
    w.enc_input = rows(s, spec_.encoder_len);
    w.dec_input = rows(s + spec_.encoder_len - spec_.decoder_len, spec_.decoder_len);
    w.target = rows(s + spec_.encoder_len, spec_.pred_len);
    for (std::size_t r = s; r < s + spec_.encoder_len; ++r) w.enc_marks.push_back(calendar_features(t.timestamps[r]));
    for (std::size_t r = s + spec_.encoder_len - spec_.decoder_len; r < s + spec_.window_size(); ++r)
        w.dec_marks.push_back(calendar_features(t.timestamps[r]));
    return w;
}

WindowStream iter_windows(const SeriesTable& normalized_table, const WindowSpec& spec) {
    return WindowStream(normalized_table, spec);
}

double similarity(std::size_t encoder_len, std::size_t stride) {
    if (encoder_len == 0) throw ConfigError("similarity: encoder length must be positive");
    if (stride >= encoder_len) return 0.0;
    return static_cast<double>(encoder_len - stride) / static_cast<double>(encoder_len);
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

SeriesTable synth_generate(std::size_t n_points, std::size_t features, std::uint64_t seed,
                           const SynthOptions& o) {
    if (n_points == 0 || features == 0) throw ConfigError("synth: need at least one point and one feature");
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    constexpr double two_pi = 2.0 * std::numbers::pi;

    struct Feature {
        double daily_amp, daily_phase, weekly_amp, weekly_phase, coupling, slope, offset;
    };
    std::vector<Feature> spec(features);
    for (auto& f : spec) {
        f.daily_amp = o.daily_amplitude * (0.5 + unit(rng));
        f.daily_phase = two_pi * unit(rng);
        f.weekly_amp = o.weekly_amplitude * (0.5 + unit(rng));
        f.weekly_phase = two_pi * unit(rng);
        f.coupling = o.latent_amplitude * (0.5 + 0.5 * unit(rng));
        f.slope = o.trend * (unit(rng) - 0.5) * 2.0 / static_cast<double>(n_points);
        f.offset = 10.0 * unit(rng);
    }
    const double latent_phase = two_pi * unit(rng);

    SeriesTable t;
    for (std::size_t j = 0; j < features; ++j)
        t.feature_names.push_back(j + 1 == features ? "OT" : "f" + std::to_string(j));
    t.target_index = features - 1;
    t.timestamps.reserve(n_points);
    t.values.reserve(n_points * features);
    for (std::size_t i = 0; i < n_points; ++i) {
        const double h = static_cast<double>(i);
        t.timestamps.push_back(o.start + chr::hours{static_cast<long>(i)});
        const double latent = std::sin(two_pi * h / 36.0 + latent_phase);
        for (const auto& f : spec) {
            double v = f.offset + f.daily_amp * std::sin(two_pi * h / 24.0 + f.daily_phase) +
                       f.weekly_amp * std::sin(two_pi * h / 168.0 + f.weekly_phase) + f.coupling * latent +
                       f.slope * h;
            if (o.noise_std > 0.0) v += o.noise_std * noise(rng);
            t.values.push_back(v);
        }
    }
    return t;
}

}  // namespace memts
