#include <sys/wait.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "memts/config.hpp"
#include "memts/io.hpp"

using namespace memts;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code = -1;
    std::string output;
};

Run cli(const std::string& args) {
    const std::string cmd = std::string(MEMTS_BINARY) + " " + args + " 2>&1";
    Run r;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buf{};
    while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) r.output.append(buf.data(), n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

const fs::path& workdir() {
    static const fs::path dir = [] {
        const fs::path d = fs::temp_directory_path() / "memts_test_cli";
        fs::remove_all(d);
        fs::create_directories(d);
        std::ofstream(d / "small.txt") << "# desk-scale run\n"
                                          "data.synth.points = 300\n"
                                          "window.encoder_len = 12\n"
                                          "window.decoder_len = 6\n"
                                          "window.pred_len = 4\n"
                                          "model.d_model = 8\n"
                                          "model.d_ff = 16\n"
                                          "model.n_heads = 2\n"
                                          "memory.heads = 2\n"
                                          "train.epochs = 2\n"
                                          "train.batch_size = 4\n";
        return d;
    }();
    return dir;
}

std::string w(const std::string& name) { return (workdir() / name).string(); }

// Trains once and shares the run between cases.
const fs::path& trained() {
    static const fs::path out = [] {
        const Run r = cli("train --config " + w("small.txt") + " --out " + w("run"));
        REQUIRE_MESSAGE(r.code == 0, r.output);
        return workdir() / "run";
    }();
    return out;
}

std::string metric(const fs::path& file, const std::string& key) {
    const std::string text = read_file(file);
    const auto at = text.find(key + " = ");
    REQUIRE(at != std::string::npos);
    const auto start = at + key.size() + 3;
    return text.substr(start, text.find('\n', start) - start);
}

std::size_t line_count(const fs::path& file) {
    const std::string text = read_file(file);
    return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
}

}  // namespace

TEST_SUITE("cli train") {
    TEST_CASE("writes checkpoint, history and resolved config") {
        const fs::path run = trained();
        CHECK(fs::exists(run / "checkpoint" / "manifest.txt"));
        CHECK(line_count(run / "history.csv") == 3);
        const RunConfig resolved = load_run_config(run / "resolved_config.txt");
        CHECK(resolved.model.features == 3);
        CHECK(resolved.model.d_model == 8);
    }

    TEST_CASE("same seed, same history; another seed differs") {
        trained();
        const Run a = cli("train --config " + w("small.txt") + " --out " + w("run_again"));
        REQUIRE(a.code == 0);
        CHECK(read_file(workdir() / "run_again" / "history.csv") == read_file(trained() / "history.csv"));
        const Run b = cli("train --config " + w("small.txt") + " --seed 2 --set train.epochs=1 --out " + w("run_b"));
        REQUIRE(b.code == 0);
        CHECK(line_count(workdir() / "run_b" / "history.csv") == 2);
        CHECK(metric(workdir() / "run_b" / "resolved_config.txt", "run.seed") == "2");
        CHECK(read_file(workdir() / "run_b" / "history.csv").substr(0, 60) !=
              read_file(trained() / "history.csv").substr(0, 60));
    }

    TEST_CASE("reports the test metrics and both baselines") {
        const Run r = cli("train --config " + w("small.txt") + " --set train.epochs=1 --out " + w("run_c"));
        REQUIRE(r.code == 0);
        CHECK(r.output.find("persistence") != std::string::npos);
        CHECK(r.output.find("mean") != std::string::npos);
        CHECK(r.output.find("mae") != std::string::npos);
    }
}

TEST_SUITE("cli eval") {
    TEST_CASE("frozen evaluation repeats; live evaluation advances the memory") {
        const std::string ck = (trained() / "checkpoint").string();
        fs::remove_all(workdir() / "ck_copy");
        fs::copy(ck, workdir() / "ck_copy");
        const std::string copy = w("ck_copy");

        REQUIRE(cli("eval --checkpoint " + copy + " --freeze-memory --out " + w("e1")).code == 0);
        REQUIRE(cli("eval --checkpoint " + copy + " --freeze-memory --out " + w("e2")).code == 0);
        CHECK(read_file(workdir() / "e1" / "metrics.txt") == read_file(workdir() / "e2" / "metrics.txt"));
        CHECK(metric(workdir() / "e1" / "metrics.txt", "frozen_memory") == "true");

        const auto before = std::stoull(metric(workdir() / "e1" / "metrics.txt", "memory_update_count"));
        REQUIRE(cli("eval --checkpoint " + copy + " --out " + w("e3")).code == 0);
        const auto windows = std::stoull(metric(workdir() / "e3" / "metrics.txt", "windows"));
        REQUIRE(cli("eval --checkpoint " + copy + " --out " + w("e4")).code == 0);
        CHECK(std::stoull(metric(workdir() / "e4" / "metrics.txt", "memory_update_count")) == before + 2 * windows);
        CHECK(metric(workdir() / "e3" / "metrics.txt", "mse") != metric(workdir() / "e4" / "metrics.txt", "mse"));
    }

    TEST_CASE("a split can be chosen") {
        const std::string ck = (trained() / "checkpoint").string();
        REQUIRE(cli("eval --checkpoint " + ck + " --freeze-memory --split val --out " + w("ev")).code == 0);
        CHECK(metric(workdir() / "ev" / "metrics.txt", "split") == "val");
        CHECK(cli("eval --checkpoint " + ck + " --split holdout --out " + w("ex")).code == 1);
    }
}

TEST_SUITE("cli forecast") {
    TEST_CASE("one window to CSV") {
        const std::string ck = (trained() / "checkpoint").string();
        REQUIRE(cli("forecast --checkpoint " + ck + " --window 0 --out " + w("fc")).code == 0);
        const std::string fc = read_file(workdir() / "fc" / "forecast.csv");
        CHECK(fc.rfind("timestamp,true,predicted,persistence\n", 0) == 0);
        CHECK(line_count(workdir() / "fc" / "forecast.csv") == 1 + 4);
        const std::string plot = read_file(workdir() / "fc" / "plot_data.csv");
        CHECK(plot.rfind("timestamp,f0_true,f0_predicted,f1_true,f1_predicted,OT_true,OT_predicted\n", 0) == 0);
        CHECK(line_count(workdir() / "fc" / "plot_data.csv") == 1 + 4);
    }

    TEST_CASE("out-of-range window is a usage error") {
        const std::string ck = (trained() / "checkpoint").string();
        const Run r = cli("forecast --checkpoint " + ck + " --window 100000 --out " + w("fc_bad"));
        CHECK(r.code == 1);
        CHECK(r.output.find("window") != std::string::npos);
    }
}

TEST_SUITE("cli synth and data") {
    TEST_CASE("synth is reproducible and trains from the CSV") {
        REQUIRE(cli("synth --n 300 --features 3 --seed 5 --out " + w("s1.csv")).code == 0);
        REQUIRE(cli("synth --n 300 --features 3 --seed 5 --out " + w("s2.csv")).code == 0);
        CHECK(read_file(workdir() / "s1.csv") == read_file(workdir() / "s2.csv"));
        const SeriesTable t = load_csv(workdir() / "s1.csv");
        CHECK(t.rows() == 300);
        CHECK(t.features() == 3);
        const Run r = cli("train --config " + w("small.txt") + " --set data.path=" + w("s1.csv") +
                            " --set train.epochs=1 --out " + w("run_csv"));
        CHECK_MESSAGE(r.code == 0, r.output);
    }

    TEST_CASE("a dataset with the wrong width is rejected") {
        REQUIRE(cli("synth --n 300 --features 4 --seed 5 --out " + w("wide.csv")).code == 0);
        const std::string ck = (trained() / "checkpoint").string();
        CHECK(cli("eval --checkpoint " + ck + " --data " + w("wide.csv") + " --out " + w("ew")).code == 1);
    }
}

TEST_SUITE("cli errors") {
    TEST_CASE("bad configuration exits 1 and names the field") {
        std::ofstream(workdir() / "bad.txt") << "model.d_model = 8\nmodel.n_heads = three\n";
        const Run r = cli("train --config " + w("bad.txt") + " --out " + w("run_bad"));
        CHECK(r.code == 1);
        CHECK(r.output.find(":2: field 'model.n_heads'") != std::string::npos);
        CHECK(cli("train --config " + w("small.txt") + " --set nonsense=1 --out " + w("run_bad")).code == 1);
        CHECK(cli("frobnicate").code == 1);
    }

    TEST_CASE("missing checkpoint or data exits 2") {
        CHECK(cli("eval --checkpoint " + w("nowhere") + " --out " + w("en")).code == 2);
        const std::string ck = (trained() / "checkpoint").string();
        CHECK(cli("eval --checkpoint " + ck + " --data " + w("nowhere.csv") + " --out " + w("en")).code == 2);
    }

    TEST_CASE("selfcheck passes clean and fails with an injected fault") {
        const Run ok = cli("selfcheck");
        CHECK_MESSAGE(ok.code == 0, ok.output);
        CHECK(ok.output.find("0 failed") != std::string::npos);
        const Run bad = cli("selfcheck --inject-fault matmul");
        CHECK(bad.code == 3);
        CHECK(bad.output.find("FAIL") != std::string::npos);
    }
}
