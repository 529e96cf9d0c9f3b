#include <cmath>
#include <random>

#include "doctest.h"
#include "memts/error.hpp"
#include "memts/training.hpp"

using namespace memts;

namespace {

Tensor randn(Shape shape, Rng& rng) {
    std::normal_distribution<double> d;
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = d(rng);
    return t;
}

ModelConfig toy() {
    ModelConfig c;
    c.features = 2;
    c.window = {12, 6, 4, 1};
    c.d_model = 8;
    c.d_ff = 16;
    c.n_heads = 2;
    c.mem_heads = 2;
    return c;
}

struct ToyData {
    SeriesTable train, val, test;
};

ToyData toy_data(std::size_t n = 200, std::uint64_t seed = 3) {
    const SeriesTable raw = synth_generate(n, 2, seed);
    const Splits s = split(raw, {}, 16);
    const Normalizer norm = Normalizer::fit(s.train);
    return {norm.normalize(s.train), norm.normalize(s.val), norm.normalize(s.test)};
}

TrainSchedule quick(std::size_t epochs = 2) {
    TrainSchedule s;
    s.epochs = epochs;
    s.cadence = 5;
    s.lr0 = 1e-3;
    return s;
}

}  // namespace

TEST_SUITE("dropout schedule") {
    TEST_CASE("zero at the start, 0.1 in the limit") {
        TrainSchedule s;
        CHECK(dropout_rate(0, s) == 0.0);
        CHECK(dropout_rate(100000, s) == doctest::Approx(0.1).epsilon(1e-15));
    }

    TEST_CASE("t = 10 against long double evaluation") {
        TrainSchedule s;
        const long double expect = 0.9L * (1.0L - std::exp(-0.1L));
        CHECK(std::abs(dropout_rate(10, s) - static_cast<double>(expect)) < 1e-15);
        CHECK(dropout_rate(10, s) == doctest::Approx(0.08565).epsilon(1e-4));
    }

    TEST_CASE("monotone and capped for both decay rates") {
        for (double g : {0.001, 0.01}) {
            TrainSchedule s;
            s.gamma_decay = g;
            double prev = 0;
            for (std::size_t t = 0; t <= 5000; ++t) {
                const double v = dropout_rate(t, s);
                CHECK(v >= prev);
                CHECK(v <= 0.1);
                prev = v;
            }
        }
    }

    TEST_CASE("limits above one half are rejected") {
        TrainSchedule s;
        s.theta_max = 0.6;
        CHECK_THROWS_AS(s.validate(), ConfigError);
        s.theta_max = 0.5;
        CHECK_NOTHROW(s.validate());
    }
}

TEST_SUITE("learning rate") {
    TEST_CASE("two flat epochs then halving") {
        TrainSchedule s;
        CHECK(learning_rate(0, s) == 1e-4);
        CHECK(learning_rate(1, s) == 1e-4);
        CHECK(learning_rate(2, s) == 5e-5);
        CHECK(learning_rate(3, s) == 2.5e-5);
        CHECK(learning_rate(4, s) == 1.25e-5);
    }
}

TEST_SUITE("loss") {
    TEST_CASE("hand values and shape contract") {
        CHECK(mse_loss(Tensor(Shape{2, 1}), Tensor(Shape{2, 1}, std::vector<double>{1, 2})).item() == 2.5);
        Rng rng(1);
        const Tensor a = randn({7, 3}, rng);
        CHECK(mse_loss(a, a).item() == 0.0);
        const Tensor b = randn({7, 3}, rng);
        double s = 0;
        for (std::size_t i = 0; i < 21; ++i) s += (a.data()[i] - b.data()[i]) * (a.data()[i] - b.data()[i]);
        CHECK(std::abs(mse_loss(a, b).item() - s / 21.0) < 1e-12);
        CHECK_THROWS_AS(mse_loss(a, randn({3, 7}, rng)), DimensionError);
    }
}

TEST_SUITE("adam") {
    TEST_CASE("scalar recurrence with a constant gradient") {
        Tensor p(Shape{1}, 0.3, true);
        Adam opt({{"p", p}});
        const double g = 0.7, lr = 0.01;
        double x = 0.3, m = 0, v = 0;
        for (int t = 1; t <= 25; ++t) {
            p.grad_buffer()[0] = g;
            opt.step(lr);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
            x -= lr * mh / (std::sqrt(vh) + 1e-8);
            CHECK(std::abs(p.data()[0] - x) < 1e-10);
            CHECK(p.grad_buffer()[0] == 0.0);
        }
    }

    TEST_CASE("zero gradient leaves parameters alone") {
        Tensor p(Shape{3}, 1.5, true);
        p.grad_buffer();
        Adam opt({{"p", p}});
        opt.step(0.1);
        CHECK(p.values() == std::vector<double>{1.5, 1.5, 1.5});
    }

    TEST_CASE("clipping scales to the requested global norm") {
        Tensor a(Shape{2}, 0.0, true), b(Shape{1}, 0.0, true);
        a.grad_buffer()[0] = 3;
        a.grad_buffer()[1] = 0;
        b.grad_buffer()[0] = 4;
        Adam opt({{"a", a}, {"b", b}});
        CHECK(opt.clip_grad_norm(1.0) == doctest::Approx(5.0));
        CHECK(a.grad_buffer()[0] == doctest::Approx(0.6));
        CHECK(b.grad_buffer()[0] == doctest::Approx(0.8));
    }

    TEST_CASE("one small step lowers the loss of a toy model") {
        const ModelConfig c = toy();
        const ToyData d = toy_data();
        const WindowSample w = iter_windows(d.train, c.window)[0];
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            Model model(c, seed);
            MemoryState frozen = model.initial_memory();
            frozen.frozen = true;
            Adam opt(model.parameters());
            const Tensor loss = mse_loss(model.forward(w, &frozen, ForwardContext{}).prediction, w.target);
            const double before = loss.item();
            backward(loss);
            opt.step(1e-6);
            NoGradGuard ng;
            const double after = mse_loss(model.forward(w, &frozen, ForwardContext{}).prediction, w.target).item();
            CHECK(after < before);
        }
    }
}

TEST_SUITE("early stopping") {
    TEST_CASE("patience one with a worsening loss stops on the second epoch") {
        EarlyStopping s(1);
        CHECK_FALSE(s.update(1.0));
        CHECK(s.update(1.5));
        CHECK(s.best_epoch() == 0);
    }

    TEST_CASE("ties do not count as improvement; improvement resets") {
        EarlyStopping s(3);
        CHECK_FALSE(s.update(2.0));
        CHECK_FALSE(s.update(2.0));
        CHECK_FALSE(s.update(1.0));
        CHECK(s.improved());
        CHECK_FALSE(s.update(1.0));
        CHECK_FALSE(s.update(3.0));
        CHECK(s.update(1.0));
        CHECK(s.best_epoch() == 2);
        CHECK(s.best() == 1.0);
    }
}

TEST_SUITE("fit") {
    TEST_CASE("history, dropout trajectory, and restored best parameters") {
        const ModelConfig c = toy();
        const ToyData d = toy_data();
        Model model(c, 1);
        MemoryState memory = model.initial_memory();
        const TrainSchedule s = quick(3);
        std::vector<EpochRecord> seen;
        FitOptions opts;
        opts.on_epoch = [&](const EpochRecord& r) { seen.push_back(r); };
        const FitResult r = fit(model, memory, d.train, d.val, s, 9, opts);

        REQUIRE(r.history.size() == 3);
        CHECK(seen.size() == 3);
        const std::size_t per_epoch = count_windows(d.train.rows(), c.window);
        CHECK(r.dropout_trajectory.size() == 3 * per_epoch);
        for (std::size_t i = 0; i < r.dropout_trajectory.size(); ++i) {
            const long double t = static_cast<long double>(i / s.cadence);
            const long double e = std::min(0.1L, 0.9L * (1.0L - std::exp(-0.01L * t)));
            CHECK(std::abs(r.dropout_trajectory[i] - static_cast<double>(e)) < 1e-12);
        }
        CHECK(memory.update_count == (r.best_epoch + 1) * per_epoch);

        MemoryState frozen = memory;
        frozen.frozen = true;
        CHECK(evaluate(model, &frozen, d.val).mse == r.best_val_mse);
        for (const auto& e : r.history) CHECK(r.best_val_mse <= e.val_mse);
    }

    TEST_CASE("two runs with the same seed agree bit for bit") {
        const ModelConfig c = toy();
        const ToyData d = toy_data();
        auto run = [&] {
            Model model(c, 4);
            MemoryState memory = model.initial_memory();
            const FitResult r = fit(model, memory, d.train, d.val, quick(), 4);
            return history_csv(r.history);
        };
        const std::string a = run();
        CHECK(a == run());
        CHECK(a.rfind("epoch,train_mse,val_mse,lr,dropout_rate\n", 0) == 0);
    }

    TEST_CASE("batches share one memory step") {
        const ModelConfig c = toy();
        const ToyData d = toy_data();
        Model model(c, 5);
        MemoryState memory = model.initial_memory();
        TrainSchedule s = quick(1);
        s.batch_size = 4;
        const FitResult r = fit(model, memory, d.train, d.val, s, 5);
        const std::size_t windows = count_windows(d.train.rows(), c.window);
        CHECK(r.optimizer.steps() == (windows + 3) / 4);
        CHECK(memory.update_count == r.optimizer.steps());
    }

    TEST_CASE("vanilla model trains without touching the memory") {
        ModelConfig c = toy();
        c.use_memory = false;
        const ToyData d = toy_data();
        Model model(c, 6);
        MemoryState memory = model.initial_memory();
        TrainSchedule s = quick(1);
        s.progressive_dropout = false;
        const FitResult r = fit(model, memory, d.train, d.val, s, 6);
        CHECK(memory.update_count == 0);
        for (double rate : r.dropout_trajectory) CHECK(rate == c.base_dropout);
    }

    TEST_CASE("target-only loss trains") {
        const ModelConfig c = toy();
        const ToyData d = toy_data();
        Model model(c, 7);
        MemoryState memory = model.initial_memory();
        TrainSchedule s = quick(1);
        s.target_only_loss = true;
        CHECK(std::isfinite(fit(model, memory, d.train, d.val, s, 7).history.front().train_mse));
    }

    TEST_CASE("a non-finite loss aborts with diagnostics") {
        const ModelConfig c = toy();
        const ToyData d = toy_data();
        Model model(c, 8);
        model.head.bias.data()[0] = std::numeric_limits<double>::quiet_NaN();
        MemoryState memory = model.initial_memory();
        try {
            fit(model, memory, d.train, d.val, quick(), 8);
            FAIL("expected a numeric error");
        } catch (const NumericError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("epoch 0") != std::string::npos);
            CHECK(msg.find("lr") != std::string::npos);
            CHECK(msg.find("dropout") != std::string::npos);
        }
    }

    TEST_CASE("feature mismatch and short splits are configuration errors") {
        ModelConfig c = toy();
        const ToyData d = toy_data();
        c.features = 3;
        Model model(c, 9);
        MemoryState memory = model.initial_memory();
        CHECK_THROWS_AS(fit(model, memory, d.train, d.val, quick(), 9), ConfigError);
        const ModelConfig ok = toy();
        Model m2(ok, 9);
        CHECK_THROWS_AS(fit(m2, memory, d.train.slice(0, 10), d.val, quick(), 9), ConfigError);
    }
}

TEST_SUITE("evaluate") {
    TEST_CASE("persistence on a constant series is perfect") {
        SeriesTable t = synth_generate(100, 2, 1);
        std::fill(t.values.begin(), t.values.end(), 0.25);
        const EvalResult r = evaluate_baseline(Baseline::Persistence, t, toy().window);
        CHECK(r.mse == 0.0);
        CHECK(r.mae == 0.0);
        CHECK(r.windows == count_windows(100, toy().window));
    }

    TEST_CASE("zero predictor on z-scored data is near one") {
        const SeriesTable raw = synth_generate(3000, 3, 2);
        const SeriesTable z = Normalizer::fit(raw).normalize(raw);
        const EvalResult r = evaluate_baseline(Baseline::Mean, z, toy().window);
        CHECK(std::abs(r.mse - 1.0) < 0.1);
    }

    TEST_CASE("per-window MAE squared never exceeds MSE") {
        const ModelConfig c = toy();
        const ToyData d = toy_data();
        Model model(c, 10);
        MemoryState memory = model.initial_memory();
        const EvalResult r = evaluate(model, &memory, d.test);
        REQUIRE(r.windows == r.window_mse.size());
        for (std::size_t i = 0; i < r.windows; ++i) CHECK(r.window_mae[i] * r.window_mae[i] <= r.window_mse[i] + 1e-15);
        CHECK(memory.update_count == r.windows);
    }

    TEST_CASE("frozen memory gives repeatable metrics; live memory moves") {
        const ModelConfig c = toy();
        const ToyData d = toy_data();
        Model model(c, 11);
        MemoryState frozen = model.initial_memory();
        frozen.frozen = true;
        CHECK(evaluate(model, &frozen, d.test).mse == evaluate(model, &frozen, d.test).mse);
        MemoryState live = model.initial_memory();
        const double first = evaluate(model, &live, d.test).mse;
        CHECK(evaluate(model, &live, d.test).mse != first);
    }
}
