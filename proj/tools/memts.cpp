// memts: train, evaluate and inspect memory-driven forecasters.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "memts/checkpoint.hpp"
#include "memts/config.hpp"
#include "memts/error.hpp"
#include "memts/io.hpp"
#include "memts/selfcheck.hpp"
#include "memts/training.hpp"

namespace fs = std::filesystem;
using namespace memts;

namespace {

enum Exit : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

// A --set key=value replaces any line of the file setting the same key.
std::string merge_overrides(const std::string& text, const std::vector<std::string>& sets) {
    auto key_of = [](std::string_view line) {
        line = line.substr(0, line.find('#'));
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) return std::string();
        std::string_view k = line.substr(0, eq);
        while (!k.empty() && (k.front() == ' ' || k.front() == '\t')) k.remove_prefix(1);
        while (!k.empty() && (k.back() == ' ' || k.back() == '\t')) k.remove_suffix(1);
        return std::string(k);
    };
    std::vector<std::string> keys;
    for (const auto& s : sets) {
        if (key_of(s).empty()) throw ConfigError("--set expects key=value, got '" + s + "'");
        keys.push_back(key_of(s));
    }
    std::ostringstream out;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        const std::string k = key_of(line);
        // Keep the line count stable so diagnostics still point at the file.
        out << (!k.empty() && std::find(keys.begin(), keys.end(), k) != keys.end() ? "" : line) << '\n';
    }
    for (const auto& s : sets) out << s << '\n';
    return out.str();
}

struct ConfigArgs {
    std::string path;
    std::vector<std::string> sets;
    std::uint64_t seed = 0;
    bool seed_given = false;
    std::string out;
};

RunConfig load_config(const ConfigArgs& a) {
    const std::string text = a.path.empty() ? std::string() : [&] {
        try {
            return read_file(a.path);
        } catch (const PersistenceError&) {
            throw ConfigError("cannot read config " + a.path);
        }
    }();
    RunConfig c = parse_run_config(merge_overrides(text, a.sets), a.path.empty() ? "<defaults>" : a.path);
    if (a.seed_given) c.seed = a.seed;
    if (!a.out.empty()) c.out_dir = a.out;
    return c;
}

const SeriesTable& pick(const Splits& s, const std::string& name) {
    if (name == "train") return s.train;
    if (name == "val") return s.val;
    return s.test;
}

int cmd_train(const ConfigArgs& args) {
    RunConfig config = load_config(args);
    const SeriesTable raw = load_series(config.data);
    resolve_features(config, raw);
    const PreparedData data = prepare_data(config, raw);

    Model model(config.model, config.seed);
    MemoryState memory = model.initial_memory();
    FitOptions options;
    options.on_epoch = [](const EpochRecord& r) {
        std::printf("epoch %zu  train_mse %.6f  val_mse %.6f  lr %.3g  dropout %.4f  steps %zu\n", r.epoch,
                    r.train_mse, r.val_mse, r.lr, r.dropout_rate, r.steps);
        std::fflush(stdout);
    };
    FitResult fit_result = fit(model, memory, data.normalized.train, data.normalized.val, config.schedule,
                               config.seed, options);

    const fs::path out = config.out_dir;
    fs::create_directories(out);
    Checkpoint ck;
    ck.config = config;
    ck.model = model;
    ck.memory = memory;
    ck.normalizer = data.normalizer;
    ck.feature_names = raw.feature_names;
    ck.target_index = raw.target_index;
    ck.steps = fit_result.optimizer.steps();
    ck.optimizer = OptimizerState{fit_result.optimizer.steps(), fit_result.optimizer.first_moments(),
                                  fit_result.optimizer.second_moments()};
    save_checkpoint(out / "checkpoint", ck);
    write_file_atomic(out / "history.csv", history_csv(fit_result.history));
    write_file_atomic(out / "resolved_config.txt", format_run_config(config));

    MemoryState scratch = memory;
    const EvalResult test = evaluate(model, &scratch, data.normalized.test);
    const EvalResult persistence =
        evaluate_baseline(Baseline::Persistence, data.normalized.test, config.model.window);
    const EvalResult mean = evaluate_baseline(Baseline::Mean, data.normalized.test, config.model.window);
    std::printf("best epoch %zu (val_mse %.6f)%s\n", fit_result.best_epoch, fit_result.best_val_mse,
                fit_result.stopped_early ? ", stopped early" : "");
    std::printf("test mse %.6f  mae %.6f  (persistence %.6f, mean %.6f)\n", test.mse, test.mae, persistence.mse,
                mean.mse);
    std::printf("wrote %s\n", out.string().c_str());
    return kOk;
}

struct DataArgs {
    std::string checkpoint;
    std::string data;
    std::string split = "test";
    bool freeze = false;
    std::string out = ".";
};

struct Loaded {
    Checkpoint ck;
    SeriesTable raw;
    PreparedData data;
};

Loaded load_for_inference(const DataArgs& a) {
    Loaded l{load_checkpoint(a.checkpoint), {}, {}};
    DataSource source = l.ck.config.data;
    if (!a.data.empty()) source.path = a.data;
    l.raw = load_series(source);
    if (l.raw.features() != l.ck.config.model.features)
        throw ConfigError("dataset has " + std::to_string(l.raw.features()) + " features, checkpoint expects " +
                          std::to_string(l.ck.config.model.features));
    l.data = prepare_data(l.ck.config, l.raw, &l.ck.normalizer);
    return l;
}

int cmd_eval(const DataArgs& args) {
    Loaded l = load_for_inference(args);
    MemoryState& memory = l.ck.memory;
    memory.frozen = args.freeze;
    const std::uint64_t before = memory.update_count;
    const EvalResult r = evaluate(l.ck.model, &memory, pick(l.data.normalized, args.split));

    std::ostringstream os;
    os << "mse = " << format_double(r.mse) << '\n'
       << "mae = " << format_double(r.mae) << '\n'
       << "windows = " << r.windows << '\n'
       << "split = " << args.split << '\n'
       << "frozen_memory = " << (args.freeze ? "true" : "false") << '\n'
       << "memory_update_count = " << memory.update_count << '\n';
    const fs::path out = fs::path(args.out) / "metrics.txt";
    write_file_atomic(out, os.str());
    if (!args.freeze && l.ck.config.model.use_memory && memory.update_count != before) {
        memory.frozen = false;
        write_file_atomic(fs::path(args.checkpoint) / "memory.bin", persist(memory));
    }
    std::printf("mse %.6f  mae %.6f  windows %zu  memory updates %llu\n", r.mse, r.mae, r.windows,
                static_cast<unsigned long long>(memory.update_count));
    std::printf("wrote %s\n", out.string().c_str());
    return kOk;
}

int cmd_forecast(const DataArgs& args, std::size_t index) {
    Loaded l = load_for_inference(args);
    const SeriesTable& table = pick(l.data.normalized, args.split);
    const WindowStream windows = iter_windows(table, l.ck.config.model.window);
    if (index >= windows.size())
        throw ConfigError("window index " + std::to_string(index) + " out of range (the " + args.split +
                          " split has " + std::to_string(windows.size()) + " windows)");
    const WindowSample w = windows[index];
    MemoryState memory = l.ck.memory;
    memory.frozen = args.freeze;
    Forecast f;
    {
        NoGradGuard no_grad;
        f = l.ck.model.forward(w, l.ck.config.model.use_memory ? &memory : nullptr, ForwardContext{});
    }
    if (f.prediction.cols() != table.features())
        throw ConfigError("forecast needs the multivariate head (output_dim == features)");

    const Normalizer& norm = l.ck.normalizer;
    const std::size_t t = l.ck.target_index;
    const std::size_t first = w.start + l.ck.config.model.window.encoder_len;
    const double last = norm.denormalize(w.enc_input(w.enc_input.rows() - 1, t), t);
    std::ostringstream fc, plot;
    fc << "timestamp,true,predicted,persistence\n";
    plot << "timestamp";
    for (const auto& name : table.feature_names) plot << ',' << name << "_true," << name << "_predicted";
    plot << '\n';
    for (std::size_t k = 0; k < f.prediction.rows(); ++k) {
        const std::string stamp = format_datetime(table.timestamps[first + k]);
        fc << stamp << ',' << format_double(norm.denormalize(w.target(k, t), t)) << ','
           << format_double(norm.denormalize(f.prediction(k, t), t)) << ',' << format_double(last) << '\n';
        plot << stamp;
        for (std::size_t j = 0; j < table.features(); ++j)
            plot << ',' << format_double(norm.denormalize(w.target(k, j), j)) << ','
                 << format_double(norm.denormalize(f.prediction(k, j), j));
        plot << '\n';
    }
    const fs::path out = args.out;
    write_file_atomic(out / "forecast.csv", fc.str());
    write_file_atomic(out / "plot_data.csv", plot.str());
    std::printf("wrote %zu rows to %s\n", static_cast<std::size_t>(f.prediction.rows()),
                (out / "forecast.csv").string().c_str());
    return kOk;
}

int cmd_selfcheck(std::uint64_t seed, const std::string& fault) {
    SelfCheckOptions o;
    o.seed = seed;
    o.inject_fault = fault;
    const SelfCheckReport report = run_selfcheck(o);
    std::fputs(report.format().c_str(), stdout);
    return report.passed() ? kOk : kNumeric;
}

int cmd_synth(std::size_t n, std::size_t features, std::uint64_t seed, const std::string& out) {
    if (n == 0 || features == 0) throw ConfigError("synth needs --n and --features >= 1");
    write_csv(synth_generate(n, features, seed), out);
    std::printf("wrote %zu rows x %zu features to %s\n", n, features, out.c_str());
    return kOk;
}

template <class F>
int guarded(F&& f) {
    try {
        return f();
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "configuration error: %s\n", e.what());
        return kUsage;
    } catch (const DimensionError& e) {
        std::fprintf(stderr, "dimension error: %s\n", e.what());
        return kUsage;
    } catch (const ContractError& e) {
        std::fprintf(stderr, "usage error: %s\n", e.what());
        return kUsage;
    } catch (const IngestionError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kData;
    } catch (const PersistenceError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kData;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return kData;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return kNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kNumeric;
    }
}

void add_config_flags(CLI::App* cmd, ConfigArgs& a) {
    cmd->add_option("--config", a.path, "Run configuration file (dotted key = value)");
    cmd->add_option("--set", a.sets, "Override one key, e.g. --set model.d_model=64");
    cmd->add_option("--seed", a.seed, "Run seed")->each([&a](const std::string&) { a.seed_given = true; });
    cmd->add_option("--out", a.out, "Output directory");
}

void add_data_flags(CLI::App* cmd, DataArgs& a) {
    cmd->add_option("--checkpoint", a.checkpoint, "Checkpoint directory")->required();
    cmd->add_option("--data", a.data, "CSV to read instead of the checkpoint's data source");
    cmd->add_option("--split", a.split, "Segment to use")->check(CLI::IsMember({"train", "val", "test"}));
    cmd->add_flag("--freeze-memory", a.freeze, "Read the memory without updating it");
    cmd->add_option("--out", a.out, "Output directory");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Memory-driven transformer forecaster"};
    app.require_subcommand(1);

    ConfigArgs train_args;
    auto* train = app.add_subcommand("train", "Fit a model and write a checkpoint, history.csv and resolved_config.txt");
    add_config_flags(train, train_args);

    DataArgs eval_args;
    auto* eval = app.add_subcommand("eval", "Write MSE and MAE for a checkpoint on a dataset split");
    add_data_flags(eval, eval_args);

    DataArgs forecast_args;
    std::size_t window = 0;
    auto* forecast = app.add_subcommand("forecast", "Write forecast.csv and plot_data.csv for one window");
    add_data_flags(forecast, forecast_args);
    forecast->add_option("--window", window, "Window index within the split")->required();

    std::uint64_t check_seed = 7;
    std::string fault;
    auto* selfcheck = app.add_subcommand("selfcheck", "Gradient and invariant checks on toy shapes");
    selfcheck->add_option("--seed", check_seed, "Seed for the random test tensors");
    selfcheck->add_option("--inject-fault", fault)->group("");

    std::size_t n = 2000, features = 3;
    std::uint64_t synth_seed = 1;
    std::string synth_out = "synth.csv";
    auto* synth = app.add_subcommand("synth", "Write a synthetic hourly series as CSV");
    synth->add_option("--n", n, "Number of rows");
    synth->add_option("--features", features, "Number of features (the last is the target OT)");
    synth->add_option("--seed", synth_seed, "Generator seed");
    synth->add_option("--out", synth_out, "Output CSV path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    if (*train) return guarded([&] { return cmd_train(train_args); });
    if (*eval) return guarded([&] { return cmd_eval(eval_args); });
    if (*forecast) return guarded([&] { return cmd_forecast(forecast_args, window); });
    if (*selfcheck) return guarded([&] { return cmd_selfcheck(check_seed, fault); });
    if (*synth) return guarded([&] { return cmd_synth(n, features, synth_seed, synth_out); });
    return kUsage;
}
