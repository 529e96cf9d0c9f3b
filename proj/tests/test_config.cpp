#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "memts/checkpoint.hpp"
#include "memts/config.hpp"
#include "memts/error.hpp"
#include "memts/io.hpp"

using namespace memts;
namespace fs = std::filesystem;

namespace {

std::string error_of(std::string_view text) {
    try {
        parse_run_config(text, "cfg.txt");
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("memts_test_config_" + name);
    fs::remove_all(p);
    fs::remove_all(fs::path(p.string() + ".partial"));
    return p;
}

RunConfig small_config() {
    return parse_run_config(
        "data.synth.points = 300\n"
        "data.synth.features = 2\n"
        "window.encoder_len = 12\n"
        "window.decoder_len = 6\n"
        "window.pred_len = 4\n"
        "model.d_model = 8\n"
        "model.d_ff = 16\n"
        "model.n_heads = 2\n"
        "memory.heads = 2\n"
        "train.epochs = 1\n"
        "train.batch_size = 4\n");
}

Checkpoint trained_checkpoint() {
    RunConfig config = small_config();
    const SeriesTable raw = load_series(config.data);
    resolve_features(config, raw);
    const PreparedData data = prepare_data(config, raw);
    Model model(config.model, config.seed);
    MemoryState memory = model.initial_memory();
    FitResult r = fit(model, memory, data.normalized.train, data.normalized.val, config.schedule, config.seed);
    Checkpoint ck{config, model, memory, data.normalizer, raw.feature_names, raw.target_index, r.optimizer.steps(),
                  OptimizerState{r.optimizer.steps(), r.optimizer.first_moments(), r.optimizer.second_moments()}};
    return ck;
}

std::vector<double> predictions(Checkpoint& ck) {
    const SeriesTable raw = load_series(ck.config.data);
    const PreparedData data = prepare_data(ck.config, raw, &ck.normalizer);
    MemoryState frozen = ck.memory;
    frozen.frozen = true;
    std::vector<double> out;
    for (const WindowSample& w : iter_windows(data.normalized.test, ck.config.model.window)) {
        const auto v = ck.model.forward(w, &frozen, ForwardContext{}).prediction.values();
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

void rewrite(const fs::path& file, const std::string& from, const std::string& to) {
    std::string text = read_file(file);
    const auto at = text.find(from);
    REQUIRE(at != std::string::npos);
    text.replace(at, from.size(), to);
    std::ofstream(file, std::ios::binary) << text;
}

}  // namespace

TEST_SUITE("run config") {
    TEST_CASE("empty text gives the 24-step bucket") {
        const RunConfig c = parse_run_config("");
        CHECK(c.model.window.encoder_len == 48);
        CHECK(c.model.window.decoder_len == 48);
        CHECK(c.model.window.pred_len == 24);
        CHECK(c.model.enc_layers == 1);
        CHECK(c.schedule.batch_size == 32);
        CHECK(c.model.features == 3);
        CHECK(c.data.path.empty());
    }

    TEST_CASE("the horizon picks its bucket; explicit keys still win") {
        const RunConfig c = parse_run_config("window.pred_len = 168\n");
        CHECK(c.model.window.encoder_len == 168);
        CHECK(c.model.window.decoder_len == 168);
        CHECK(c.model.enc_layers == 2);
        CHECK(c.schedule.batch_size == 8);
        const RunConfig d = parse_run_config("model.enc_layers = 3\nwindow.pred_len = 720\n");
        CHECK(d.model.window.encoder_len == 336);
        CHECK(d.model.enc_layers == 3);
        CHECK(d.schedule.batch_size == 4);
    }

    TEST_CASE("a CSV source leaves features to be resolved from the data") {
        RunConfig c = parse_run_config("data.path = x.csv\n");
        CHECK(c.model.features == 0);
        SeriesTable t = synth_generate(50, 5, 1);
        resolve_features(c, t);
        CHECK(c.model.features == 5);
        RunConfig d = parse_run_config("data.path = x.csv\nmodel.features = 4\n");
        CHECK_THROWS_AS(resolve_features(d, t), ConfigError);
    }

    TEST_CASE("comments and blank lines are ignored") {
        const RunConfig c = parse_run_config("# header\n\n  run.seed = 9   # trailing\n");
        CHECK(c.seed == 9);
    }

    TEST_CASE("errors name the line and the field") {
        CHECK(error_of("run.seed = 1\nmodel.d_model = abc\n").find("cfg.txt:2: field 'model.d_model'") == 0);
        CHECK(error_of("\n\nmodel.dmodel = 8\n").find("cfg.txt:3: field 'model.dmodel': unknown key") == 0);
        CHECK(error_of("run.seed = 1\nrun.seed = 2\n").find("cfg.txt:2: field 'run.seed': duplicate") == 0);
        CHECK(error_of("memory.enabled = maybe\n").find("field 'memory.enabled'") != std::string::npos);
        CHECK(error_of("memory.order = sideways\n").find("update_then_decode") != std::string::npos);
        CHECK(error_of("just words\n").find("cfg.txt:1: expected 'key = value'") == 0);
        CHECK(error_of("train.epochs = -3\n").find("field 'train.epochs'") != std::string::npos);
    }

    TEST_CASE("missing file is a config error") {
        CHECK_THROWS_AS(load_run_config("/nonexistent/memts.cfg"), ConfigError);
    }

    TEST_CASE("formatting reads back to the same text") {
        RunConfig c = parse_run_config("window.pred_len = 48\nmodel.base_dropout = 0.07\ntrain.lr0 = 0.0003\n"
                                       "memory.order = decode_then_update\nmemory.gate_feed = previous\n"
                                       "data.target = load\nrun.out_dir = /tmp/some where\n");
        c.schedule.gamma_decay = 1.0 / 3.0;
        const std::string text = format_run_config(c);
        const RunConfig back = parse_run_config(text);
        CHECK(format_run_config(back) == text);
        CHECK(back.schedule.gamma_decay == 1.0 / 3.0);
        CHECK(back.model.memory_order == MemoryOrder::DecodeThenUpdate);
        CHECK(back.model.gate_feed == GateFeed::Previous);
        CHECK(back.out_dir == "/tmp/some where");
        CHECK(text.find("model.base_dropout = 0.07\n") != std::string::npos);
    }

    TEST_CASE("prepare_data normalizes with the train statistics") {
        RunConfig c = small_config();
        const SeriesTable raw = load_series(c.data);
        resolve_features(c, raw);
        const PreparedData d = prepare_data(c, raw);
        for (std::size_t f = 0; f < 2; ++f) {
            double s = 0;
            for (std::size_t r = 0; r < d.normalized.train.rows(); ++r) s += d.normalized.train.value(r, f);
            CHECK(std::abs(s / d.normalized.train.rows()) < 1e-12);
        }
        const std::size_t total = d.normalized.train.rows() + d.normalized.val.rows() + d.normalized.test.rows();
        CHECK(total == raw.rows());
    }
}

TEST_SUITE("checkpoint") {
    TEST_CASE("round trip reproduces predictions, memory and optimizer bit for bit") {
        Checkpoint ck = trained_checkpoint();
        const fs::path dir = scratch("roundtrip");
        save_checkpoint(dir, ck);
        CHECK_FALSE(fs::exists(fs::path(dir.string() + ".partial")));
        for (const char* f : {"manifest.txt", "arrays.bin", "config.txt", "memory.bin", "normalizer.csv"})
            CHECK(fs::exists(dir / f));

        Checkpoint back = load_checkpoint(dir);
        CHECK(format_run_config(back.config) == format_run_config(ck.config));
        CHECK(back.memory.M.values() == ck.memory.M.values());
        CHECK(back.memory.update_count == ck.memory.update_count);
        CHECK(back.normalizer.means == ck.normalizer.means);
        CHECK(back.normalizer.stds == ck.normalizer.stds);
        CHECK(back.feature_names == ck.feature_names);
        CHECK(back.target_index == ck.target_index);
        CHECK(back.steps == ck.steps);
        REQUIRE(back.optimizer.has_value());
        CHECK(back.optimizer->first == ck.optimizer->first);
        CHECK(back.optimizer->second == ck.optimizer->second);
        CHECK(predictions(back) == predictions(ck));

        save_checkpoint(dir, back);
        CHECK(predictions(back) == predictions(ck));
        fs::remove_all(dir);
    }

    TEST_CASE("damaged checkpoints are persistence errors") {
        Checkpoint ck = trained_checkpoint();
        ck.optimizer.reset();
        const fs::path dir = scratch("damaged");

        SUBCASE("missing directory") { CHECK_THROWS_AS(load_checkpoint(dir), PersistenceError); }
        SUBCASE("wrong version") {
            save_checkpoint(dir, ck);
            rewrite(dir / "manifest.txt", "memts-checkpoint 1", "memts-checkpoint 2");
            CHECK_THROWS_AS(load_checkpoint(dir), PersistenceError);
        }
        SUBCASE("misshapen array") {
            save_checkpoint(dir, ck);
            const std::string m = read_file(dir / "manifest.txt");
            const auto at = m.find("head.bias f64 ");
            REQUIRE(at != std::string::npos);
            rewrite(dir / "manifest.txt", "head.bias f64 ", "head.bias f64 2x");
            CHECK_THROWS_AS(load_checkpoint(dir), PersistenceError);
        }
        SUBCASE("missing array") {
            save_checkpoint(dir, ck);
            rewrite(dir / "manifest.txt", "array head.bias", "array head.bogus");
            CHECK_THROWS_AS(load_checkpoint(dir), PersistenceError);
        }
        SUBCASE("truncated data") {
            save_checkpoint(dir, ck);
            fs::resize_file(dir / "arrays.bin", fs::file_size(dir / "arrays.bin") - 8);
            CHECK_THROWS_AS(load_checkpoint(dir), PersistenceError);
        }
        SUBCASE("config for a different architecture") {
            save_checkpoint(dir, ck);
            rewrite(dir / "config.txt", "model.d_model = 8", "model.d_model = 16");
            CHECK_THROWS_AS(load_checkpoint(dir), PersistenceError);
        }
        SUBCASE("bad config text") {
            save_checkpoint(dir, ck);
            rewrite(dir / "config.txt", "model.d_model = 8", "model.d_model = eight");
            CHECK_THROWS_AS(load_checkpoint(dir), PersistenceError);
        }
        SUBCASE("normalizer for another feature count") {
            save_checkpoint(dir, ck);
            std::ofstream(dir / "normalizer.csv") << "feature,mean,std\nf0,0,1\n# target,f0\n";
            CHECK_THROWS_AS(load_checkpoint(dir), PersistenceError);
        }
        fs::remove_all(dir);
    }
}
