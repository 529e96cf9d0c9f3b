#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "memts/error.hpp"
#include "memts/model.hpp"

using namespace memts;

namespace {

Tensor randn(Shape shape, Rng& rng, double s = 1.0) {
    std::normal_distribution<double> d(0.0, s);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = d(rng);
    return t;
}

ModelConfig toy(std::size_t d_model = 8, std::size_t heads = 2) {
    ModelConfig c;
    c.features = 2;
    c.window = {6, 4, 2, 1};
    c.d_model = d_model;
    c.d_ff = 12;
    c.n_heads = heads;
    c.mem_heads = heads;
    return c;
}

WindowSample first_window(const ModelConfig& c, std::uint64_t seed = 5) {
    static SeriesTable table;
    table = synth_generate(40, c.features, seed);
    return iter_windows(table, c.window)[3];
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

std::vector<double> row(const Tensor& t, std::size_t i) {
    auto s = t.data().subspan(i * t.cols(), t.cols());
    return {s.begin(), s.end()};
}

}  // namespace

TEST_SUITE("attention") {
    TEST_CASE("a single key returns its value row through the output map") {
        Rng rng(1);
        MultiHeadAttention mha(8, 2, rng);
        const Tensor q = randn({1, 8}, rng), kv = randn({1, 8}, rng);
        const Tensor y = mha(q, kv, ForwardContext{});
        const Tensor expect = mha.w_o(mha.w_v(kv));
        CHECK(max_abs_diff(y.data(), expect.data()) < 1e-12);
    }

    TEST_CASE("weight rows sum to one, causal rows are masked") {
        Rng rng(2);
        MultiHeadAttention mha(8, 4, rng);
        const Tensor x = randn({5, 8}, rng);
        std::vector<Tensor> w;
        mha(x, x, ForwardContext{}, true, &w);
        REQUIRE(w.size() == 4);
        for (const Tensor& h : w)
            for (std::size_t i = 0; i < 5; ++i) {
                double s = 0;
                for (std::size_t j = 0; j < 5; ++j) {
                    s += h(i, j);
                    if (j > i) CHECK(h(i, j) == 0.0);
                }
                CHECK(std::abs(s - 1.0) < 1e-9);
            }
    }

    TEST_CASE("one head against a dense-loop oracle") {
        Rng rng(3);
        MultiHeadAttention mha(4, 1, rng);
        const Tensor q_in = randn({3, 4}, rng), kv_in = randn({5, 4}, rng);
        const Tensor y = mha(q_in, kv_in, ForwardContext{});
        auto proj = [](const Tensor& x, const Tensor& w) {
            std::vector<double> out(x.rows() * w.cols(), 0.0);
            for (std::size_t i = 0; i < x.rows(); ++i)
                for (std::size_t j = 0; j < w.cols(); ++j)
                    for (std::size_t p = 0; p < x.cols(); ++p) out[i * w.cols() + j] += x(i, p) * w(p, j);
            return out;
        };
        const auto Q = proj(q_in, mha.w_q.weight), K = proj(kv_in, mha.w_k.weight), V = proj(kv_in, mha.w_v.weight);
        std::vector<double> ctx(3 * 4, 0.0);
        for (std::size_t i = 0; i < 3; ++i) {
            std::vector<double> s(5);
            double mx = -1e300, den = 0;
            for (std::size_t j = 0; j < 5; ++j) {
                for (std::size_t p = 0; p < 4; ++p) s[j] += Q[i * 4 + p] * K[j * 4 + p];
                s[j] /= 2.0;
                mx = std::max(mx, s[j]);
            }
            for (double& v : s) den += (v = std::exp(v - mx));
            for (std::size_t j = 0; j < 5; ++j)
                for (std::size_t p = 0; p < 4; ++p) ctx[i * 4 + p] += s[j] / den * V[j * 4 + p];
        }
        std::vector<double> expect(12, 0.0);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 4; ++j)
                for (std::size_t p = 0; p < 4; ++p) expect[i * 4 + j] += ctx[i * 4 + p] * mha.w_o.weight(p, j);
        CHECK(max_abs_diff(y.data(), expect) < 1e-10);
    }

    TEST_CASE("width mismatch is a dimension error") {
        Rng rng(4);
        MultiHeadAttention mha(8, 2, rng);
        CHECK_THROWS_AS(mha(randn({2, 8}, rng), randn({3, 6}, rng), ForwardContext{}), DimensionError);
    }
}

TEST_SUITE("encoder") {
    TEST_CASE("shape, determinism, and a zeroed FFN output is a pure residual") {
        const ModelConfig c = toy();
        Rng rng(5);
        EncoderLayer layer(c, rng);
        const Tensor x = randn({6, 8}, rng);
        const Tensor y = layer(x, ForwardContext{});
        CHECK(y.shape() == Shape{6, 8});
        CHECK(layer(x, ForwardContext{}).values() == y.values());

        layer.ffn.out.zero();
        const Tensor h = layer.norm1(add(x, layer.attn(x, x, ForwardContext{})));
        CHECK(max_abs_diff(layer(x, ForwardContext{}).data(), layer.norm2(h).data()) == 0.0);
    }
}

TEST_SUITE("decoder") {
    TEST_CASE("feed is the known tail plus a zero placeholder with future marks") {
        ModelConfig c = toy();
        c.window = {96, 48, 24, 1};
        const SeriesTable table = synth_generate(200, 2, 1);
        const WindowSample w = iter_windows(table, c.window)[10];
        const DecoderFeed feed = build_decoder_feed(w, 24);
        CHECK(feed.values.shape() == Shape{72, 2});
        for (std::size_t i = 0; i < 48; ++i)
            for (std::size_t j = 0; j < 2; ++j) CHECK(feed.values(i, j) == w.dec_input(i, j));
        for (std::size_t i = 48; i < 72; ++i)
            for (std::size_t j = 0; j < 2; ++j) CHECK(feed.values(i, j) == 0.0);
        REQUIRE(feed.marks.size() == 72);
        for (std::size_t k = 0; k < 24; ++k)
            CHECK(feed.marks[48 + k] == calendar_features(table.timestamps[w.start + 96 + k]));
    }

    TEST_CASE("causal self-attention: later rows do not reach earlier outputs") {
        const ModelConfig c = toy();
        Rng rng(6);
        DecoderLayer layer(c, rng);
        const Tensor x = randn({6, 8}, rng), enc = randn({5, 8}, rng), m = randn({1, 8}, rng);
        const Tensor y = layer(x, enc, m, ForwardContext{});
        CHECK(y.shape() == Shape{6, 8});
        const std::size_t i = 2;
        Tensor x2(x.shape(), x.values());
        for (std::size_t r = i + 1; r < 6; ++r)
            for (std::size_t j = 0; j < 8; ++j) x2.at(r, j) += 3.0;
        const Tensor y2 = layer(x2, enc, m, ForwardContext{});
        for (std::size_t r = 0; r <= i; ++r) CHECK(max_abs_diff(row(y, r), row(y2, r)) < 1e-12);
        CHECK(max_abs_diff(row(y, 5), row(y2, 5)) > 1e-6);
    }

    TEST_CASE("zero memory with zero maps equals the plain layer") {
        const ModelConfig c = toy();
        Rng rng(7);
        DecoderLayer layer(c, rng);
        layer.norm1.zero_maps();
        const Tensor x = randn({6, 8}, rng), enc = randn({5, 8}, rng);
        CHECK(layer(x, enc, Tensor(Shape{1, 8}), ForwardContext{}).values() ==
              layer(x, enc, Tensor(), ForwardContext{}).values());
    }

    TEST_CASE("memory width must equal d_model") {
        const ModelConfig c = toy();
        Model model(c, 1);
        Rng rng(8);
        CHECK_THROWS_AS(model.decode(randn({6, 8}, rng), randn({6, 8}, rng), randn({1, 4}, rng), ForwardContext{}),
                        ConfigError);
    }
}

TEST_SUITE("output head") {
    TEST_CASE("shape, zero head, and only the horizon rows matter") {
        const ModelConfig c = toy();
        Model model(c, 2);
        Rng rng(9);
        const Tensor dec = randn({6, 8}, rng);
        const Tensor y = model.project_output(dec);
        CHECK(y.shape() == Shape{2, 2});
        Tensor earlier(dec.shape(), dec.values());
        for (std::size_t j = 0; j < 8; ++j) earlier.at(0, j) = 100.0;
        CHECK(model.project_output(earlier).values() == y.values());
        model.head.zero();
        for (double v : model.project_output(dec).data()) CHECK(v == 0.0);
    }

    TEST_CASE("univariate head") {
        ModelConfig c = toy();
        c.output_dim = 1;
        Model model(c, 3);
        MemoryState m = model.initial_memory();
        CHECK(model.forward(first_window(c), &m, ForwardContext{}).prediction.shape() == Shape{2, 1});
    }
}

TEST_SUITE("model") {
    TEST_CASE("one forward yields the whole horizon; memory steps once") {
        const ModelConfig c = toy();
        Model model(c, 4);
        MemoryState m = model.initial_memory();
        const Forecast f = model.forward(first_window(c), &m, ForwardContext{});
        CHECK(f.prediction.shape() == Shape{2, 2});
        CHECK(m.update_count == 1);
        CHECK(f.memory.values() == m.M.values());
    }

    TEST_CASE("the memory path reduces to the vanilla model over ten weight draws") {
        for (std::uint64_t seed = 100; seed < 110; ++seed) {
            ModelConfig with = toy();
            ModelConfig without = with;
            without.use_memory = false;
            Model a(with, seed), b(without, seed);
            for (auto& layer : a.decoder) layer.norm1.zero_maps();
            MemoryState zero;
            zero.M = Tensor(Shape{with.mem_slots, with.d_model});
            zero.frozen = true;
            const WindowSample w = first_window(with, seed);
            const Tensor pa = a.forward(w, &zero, ForwardContext{}).prediction;
            const Tensor pb = b.forward(w, nullptr, ForwardContext{}).prediction;
            CHECK(pa.values() == pb.values());
        }
    }

    TEST_CASE("decode-then-update reads the old matrix and still advances it") {
        ModelConfig c = toy();
        c.memory_order = MemoryOrder::DecodeThenUpdate;
        Model model(c, 5);
        MemoryState m = model.initial_memory();
        const std::vector<double> before = m.M.values();
        const Forecast f = model.forward(first_window(c), &m, ForwardContext{});
        CHECK(f.memory.values() == before);
        CHECK(m.update_count == 1);
        CHECK(m.M.values() != before);
    }

    TEST_CASE("a batch of one matches the single-window forward") {
        const ModelConfig c = toy();
        Model model(c, 6);
        MemoryState m1 = model.initial_memory(), m2 = model.initial_memory();
        const WindowSample w = first_window(c);
        const auto batch = model.forward_batch({w}, &m1, ForwardContext{});
        const Forecast single = model.forward(w, &m2, ForwardContext{});
        CHECK(batch.front().prediction.values() == single.prediction.values());
        CHECK(m1.M.values() == m2.M.values());
    }

    TEST_CASE("end-to-end finite-difference check on a one-head toy") {
        ModelConfig c = toy(8, 1);
        Model model(c, 7);
        const WindowSample w = first_window(c);
        Rng rng(10);
        const Tensor weight = randn({2, 2}, rng);
        NamedTensors named = model.parameters();
        std::vector<Tensor> params;
        for (auto& [n, t] : named) params.push_back(t);
        const MemoryState start = model.initial_memory();
        const double err = grad_check(
            [&] {
                MemoryState m = start;
                return sum(mul(model.forward(w, &m, ForwardContext{}).prediction, weight));
            },
            params);
        CHECK(err < 1e-3);
    }

    TEST_CASE("finite outputs across many small random draws") {
        const ModelConfig c = toy();
        const WindowSample w = first_window(c);
        Rng rng(11);
        std::normal_distribution<double> d(0.0, 0.1);
        NoGradGuard ng;
        for (int draw = 0; draw < 1000; ++draw) {
            Model model(c, static_cast<std::uint64_t>(draw));
            for (auto& [n, t] : model.parameters())
                for (double& v : t.data()) v = d(rng);
            MemoryState m = model.initial_memory();
            for (double v : model.forward(w, &m, ForwardContext{}).prediction.data()) REQUIRE(std::isfinite(v));
        }
    }

    TEST_CASE("parameter names are unique and stable") {
        const ModelConfig c = toy();
        const NamedTensors p = Model(c, 8).parameters();
        std::set<std::string> names;
        for (const auto& [n, t] : p) names.insert(n);
        CHECK(names.size() == p.size());
        CHECK(names.count("decoder.0.norm1.gamma_map.weight") == 1);
        CHECK(names.count("memory.w_q.weight") == 1);
        ModelConfig v = c;
        v.use_memory = false;
        const NamedTensors q = Model(v, 8).parameters();
        for (const auto& [n, t] : q) CHECK(n.find("memory") == std::string::npos);
        for (const auto& [n, t] : q) CHECK(n.find("gamma_map") == std::string::npos);
    }
}

TEST_SUITE("model config") {
    TEST_CASE("horizon buckets") {
        struct Row {
            std::size_t pred, enc, dec, layers, batch;
        };
        for (const Row r : {Row{24, 48, 48, 1, 32}, Row{48, 96, 48, 1, 32}, Row{168, 168, 168, 2, 8},
                            Row{336, 168, 168, 2, 8}, Row{720, 336, 336, 2, 4}}) {
            const ModelConfig c = ModelConfig::for_horizon(r.pred, 7);
            CHECK(c.window.encoder_len == r.enc);
            CHECK(c.window.decoder_len == r.dec);
            CHECK(c.window.pred_len == r.pred);
            CHECK(c.enc_layers == r.layers);
            CHECK(c.dec_layers == 1);
            CHECK(c.d_model == 1024);
            CHECK(c.d_ff == 2048);
            CHECK(c.n_heads == 8);
            CHECK(c.base_dropout == 0.1);
            CHECK(ModelConfig::batch_size_for_horizon(r.pred) == r.batch);
        }
        CHECK(ModelConfig::for_horizon(100, 7).window.encoder_len == 168);
        CHECK(ModelConfig::for_horizon(1000, 7).window.encoder_len == 336);
    }

    TEST_CASE("validation") {
        ModelConfig c = toy();
        CHECK_NOTHROW(c.validate());
        c.n_heads = 3;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = toy();
        c.activation = "relu";
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = toy();
        c.mem_heads = 3;
        CHECK_THROWS_AS(c.validate(), ConfigError);
        c = toy();
        c.d_model = 7;
        c.n_heads = 7;
        CHECK_THROWS_AS(c.validate(), ConfigError);
    }
}
