#include "memts/config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

#include "memts/error.hpp"
#include "memts/io.hpp"

namespace memts {

namespace {

std::string_view strip(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::size_t to_size(std::string_view v) {
    std::size_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc{} || ptr != v.data() + v.size())
        throw ConfigError("expected a nonnegative integer, got '" + std::string(v) + "'");
    return out;
}

std::uint64_t to_u64(std::string_view v) {
    std::uint64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || ec != std::errc{} || ptr != v.data() + v.size())
        throw ConfigError("expected a nonnegative integer, got '" + std::string(v) + "'");
    return out;
}

bool to_bool(std::string_view v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("expected true or false, got '" + std::string(v) + "'");
}

const char* bool_text(bool b) { return b ? "true" : "false"; }

struct Entry {
    std::string value;
    std::size_t line;
};

using Setter = std::function<void(RunConfig&, std::string_view)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Field {
    const char* key;
    Setter set;
    Getter get;
};

#define MEMTS_SIZE(KEY, EXPR)                                                       \
    Field {                                                                         \
        KEY, [](RunConfig& c, std::string_view v) { c.EXPR = to_size(v); },         \
            [](const RunConfig& c) { return std::to_string(c.EXPR); }               \
    }
#define MEMTS_DOUBLE(KEY, EXPR)                                                     \
    Field {                                                                         \
        KEY, [](RunConfig& c, std::string_view v) { c.EXPR = parse_double(v); },    \
            [](const RunConfig& c) { return format_double(c.EXPR); }                \
    }
#define MEMTS_BOOL(KEY, EXPR)                                                       \
    Field {                                                                         \
        KEY, [](RunConfig& c, std::string_view v) { c.EXPR = to_bool(v); },         \
            [](const RunConfig& c) { return std::string(bool_text(c.EXPR)); }       \
    }
#define MEMTS_STRING(KEY, EXPR)                                                     \
    Field {                                                                         \
        KEY, [](RunConfig& c, std::string_view v) { c.EXPR = std::string(v); },     \
            [](const RunConfig& c) { return c.EXPR; }                               \
    }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        MEMTS_STRING("data.path", data.path),
        MEMTS_STRING("data.datetime_column", data.datetime_column),
        MEMTS_STRING("data.target", data.target),
        MEMTS_SIZE("data.synth.points", data.synth_points),
        MEMTS_SIZE("data.synth.features", data.synth_features),
        Field{"data.synth.seed", [](RunConfig& c, std::string_view v) { c.data.synth_seed = to_u64(v); },
              [](const RunConfig& c) { return std::to_string(c.data.synth_seed); }},
        MEMTS_DOUBLE("split.train", split.train),
        MEMTS_DOUBLE("split.val", split.val),
        MEMTS_DOUBLE("split.test", split.test),
        MEMTS_SIZE("window.encoder_len", model.window.encoder_len),
        MEMTS_SIZE("window.decoder_len", model.window.decoder_len),
        MEMTS_SIZE("window.pred_len", model.window.pred_len),
        MEMTS_SIZE("window.stride", model.window.stride),
        MEMTS_SIZE("model.features", model.features),
        MEMTS_SIZE("model.output_dim", model.output_dim),
        MEMTS_SIZE("model.d_model", model.d_model),
        MEMTS_SIZE("model.d_ff", model.d_ff),
        MEMTS_SIZE("model.n_heads", model.n_heads),
        MEMTS_SIZE("model.enc_layers", model.enc_layers),
        MEMTS_SIZE("model.dec_layers", model.dec_layers),
        MEMTS_DOUBLE("model.base_dropout", model.base_dropout),
        MEMTS_STRING("model.activation", model.activation),
        MEMTS_SIZE("model.conv_width", model.conv_width),
        MEMTS_DOUBLE("model.delta", model.delta),
        MEMTS_BOOL("memory.enabled", model.use_memory),
        MEMTS_SIZE("memory.slots", model.mem_slots),
        MEMTS_SIZE("memory.heads", model.mem_heads),
        Field{"memory.order",
              [](RunConfig& c, std::string_view v) {
                  if (v == "update_then_decode")
                      c.model.memory_order = MemoryOrder::UpdateThenDecode;
                  else if (v == "decode_then_update")
                      c.model.memory_order = MemoryOrder::DecodeThenUpdate;
                  else
                      throw ConfigError("expected update_then_decode or decode_then_update, got '" +
                                        std::string(v) + "'");
              },
              [](const RunConfig& c) {
                  return std::string(c.model.memory_order == MemoryOrder::UpdateThenDecode ? "update_then_decode"
                                                                                           : "decode_then_update");
              }},
        Field{"memory.gate_feed",
              [](RunConfig& c, std::string_view v) {
                  if (v == "current")
                      c.model.gate_feed = GateFeed::Current;
                  else if (v == "previous")
                      c.model.gate_feed = GateFeed::Previous;
                  else
                      throw ConfigError("expected current or previous, got '" + std::string(v) + "'");
              },
              [](const RunConfig& c) {
                  return std::string(c.model.gate_feed == GateFeed::Current ? "current" : "previous");
              }},
        MEMTS_BOOL("memory.squash", model.mem_squash),
        MEMTS_DOUBLE("train.theta_max", schedule.theta_max),
        MEMTS_DOUBLE("train.gamma_decay", schedule.gamma_decay),
        MEMTS_SIZE("train.cadence", schedule.cadence),
        MEMTS_SIZE("train.epochs", schedule.epochs),
        MEMTS_SIZE("train.patience", schedule.patience),
        MEMTS_DOUBLE("train.lr0", schedule.lr0),
        MEMTS_SIZE("train.lr_halving_start_epoch", schedule.lr_halving_start_epoch),
        MEMTS_SIZE("train.batch_size", schedule.batch_size),
        MEMTS_DOUBLE("train.clip_norm", schedule.clip_norm),
        MEMTS_BOOL("train.progressive_dropout", schedule.progressive_dropout),
        MEMTS_BOOL("train.target_only_loss", schedule.target_only_loss),
        Field{"run.seed", [](RunConfig& c, std::string_view v) { c.seed = to_u64(v); },
              [](const RunConfig& c) { return std::to_string(c.seed); }},
        MEMTS_STRING("run.out_dir", out_dir),
    };
    return table;
}

#undef MEMTS_SIZE
#undef MEMTS_DOUBLE
#undef MEMTS_BOOL
#undef MEMTS_STRING

[[noreturn]] void fail(const std::string& origin, std::size_t line, std::string_view key, const std::string& why) {
    std::string msg = origin + ":" + std::to_string(line);
    if (!key.empty()) msg += ": field '" + std::string(key) + "'";
    throw ConfigError(msg + ": " + why);
}

}  // namespace

RunConfig parse_run_config(std::string_view text, const std::string& origin) {
    std::map<std::string, Entry, std::less<>> entries;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = strip(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) fail(origin, line_no, "", "expected 'key = value'");
        const std::string key(strip(line.substr(0, eq)));
        const std::string value(strip(line.substr(eq + 1)));
        if (key.empty()) fail(origin, line_no, "", "missing key");
        if (entries.count(key)) fail(origin, line_no, key, "duplicate key (first set on line " +
                                                               std::to_string(entries[key].line) + ")");
        entries[key] = {value, line_no};
    }

    for (const auto& [key, e] : entries) {
        const bool known = std::any_of(fields().begin(), fields().end(), [&](const Field& f) { return key == f.key; });
        if (!known) fail(origin, e.line, key, "unknown key");
    }

    auto apply = [&](RunConfig& c, std::string_view key) {
        const auto it = entries.find(key);
        if (it == entries.end()) return;
        const auto f = std::find_if(fields().begin(), fields().end(), [&](const Field& x) { return key == x.key; });
        try {
            f->set(c, it->second.value);
        } catch (const ConfigError& err) {
            fail(origin, it->second.line, key, err.what());
        }
    };

    // The horizon and feature count pick the bucket defaults; everything else
    // overrides them.
    RunConfig probe;
    apply(probe, "window.pred_len");
    apply(probe, "model.features");
    apply(probe, "data.synth.features");
    apply(probe, "data.path");
    const std::size_t features = entries.count("model.features") ? probe.model.features
                                 : probe.data.path.empty()        ? probe.data.synth_features
                                                                  : 0;
    RunConfig c;
    c.model = ModelConfig::for_horizon(probe.model.window.pred_len, features);
    c.schedule.batch_size = ModelConfig::batch_size_for_horizon(probe.model.window.pred_len);
    for (const Field& f : fields()) apply(c, f.key);
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = read_file(path);
    } catch (const PersistenceError&) {
        throw ConfigError("cannot read config " + path.string());
    }
    return parse_run_config(text, path.string());
}

std::string format_run_config(const RunConfig& config) {
    std::ostringstream os;
    for (const Field& f : fields()) os << f.key << " = " << f.get(config) << '\n';
    return os.str();
}

SeriesTable load_series(const DataSource& source) {
    if (source.path.empty()) return synth_generate(source.synth_points, source.synth_features, source.synth_seed);
    return load_csv(source.path, source.datetime_column, source.target);
}

void resolve_features(RunConfig& config, const SeriesTable& table) {
    if (config.model.features == 0)
        config.model.features = table.features();
    else if (config.model.features != table.features())
        throw ConfigError("model.features is " + std::to_string(config.model.features) + " but the series has " +
                          std::to_string(table.features()));
    config.model.validate();
    config.schedule.validate();
}

PreparedData prepare_data(const RunConfig& config, const SeriesTable& table, const Normalizer* fixed) {
    Splits raw = split(table, config.split, config.model.window.window_size());
    PreparedData out;
    out.normalizer = fixed ? *fixed : Normalizer::fit(raw.train);
    out.normalized.train = out.normalizer.normalize(raw.train);
    out.normalized.val = out.normalizer.normalize(raw.val);
    out.normalized.test = out.normalizer.normalize(raw.test);
    return out;
}

}  // namespace memts
