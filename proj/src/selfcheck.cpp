#include "memts/selfcheck.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <sstream>

#include "memts/data.hpp"
#include "memts/io.hpp"
#include "memts/kernels.hpp"
#include "memts/memory.hpp"
#include "memts/model.hpp"
#include "memts/training.hpp"

namespace memts {

namespace {

Tensor leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor t(std::move(shape), 0.0, true);
    for (double& v : t.data()) v = d(rng);
    return t;
}

class FaultScope {
public:
    explicit FaultScope(const std::string& op) { debug::inject_gradient_sign_flip(op); }
    ~FaultScope() { debug::inject_gradient_sign_flip(""); }
    FaultScope(const FaultScope&) = delete;
    FaultScope& operator=(const FaultScope&) = delete;
};

struct Runner {
    Rng rng;
    SelfCheckReport report;

    void record(std::string name, CheckKind kind, double err, double tol, std::string detail = {}) {
        report.checks.push_back({std::move(name), kind, err, tol, std::isfinite(err) && err < tol, std::move(detail)});
    }

    // Contracts f(params) against a fixed random weighting so every output
    // coordinate contributes a distinct gradient.
    void gradient(std::string name, CheckKind kind, std::vector<Tensor> params,
                  const std::function<Tensor()>& f) {
        const Tensor probe = [&] {
            NoGradGuard g;
            return f();
        }();
        Tensor w = leaf(probe.shape(), rng);
        w.set_requires_grad(false);
        auto loss = [&] { return sum(mul(f(), w)); };
        const double tol = kind == CheckKind::Primitive ? kPrimitiveTolerance : kCompositeTolerance;
        double err = 0.0;
        std::string detail;
        try {
            err = grad_check(loss, params);
        } catch (const std::exception& e) {
            err = INFINITY;
            detail = e.what();
        }
        record(std::move(name), kind, err, tol, std::move(detail));
    }

    void invariant(std::string name, const std::function<std::string()>& check) {
        std::string why;
        try {
            why = check();
        } catch (const std::exception& e) {
            why = e.what();
        }
        record(std::move(name), CheckKind::Invariant, why.empty() ? 0.0 : 1.0, 0.5, std::move(why));
    }
};

void primitives(Runner& r) {
    Rng& g = r.rng;
    {
        Tensor a = leaf({3, 4}, g), b = leaf({4, 5}, g);
        r.gradient("matmul", CheckKind::Primitive, {a, b}, [=] { return matmul(a, b); });
    }
    {
        Tensor a = leaf({3, 4}, g), b = leaf({5, 4}, g);
        r.gradient("matmul_nt", CheckKind::Primitive, {a, b}, [=] { return matmul_nt(a, b); });
    }
    {
        Tensor a = leaf({3, 4}, g);
        r.gradient("transpose", CheckKind::Primitive, {a}, [=] { return transpose(a); });
    }
    {
        Tensor x = leaf({6, 3}, g), k = leaf({3, 3, 4}, g);
        r.gradient("conv1d", CheckKind::Primitive, {x, k}, [=] { return conv1d(x, k); });
    }
    {
        Tensor x = leaf({4, 5}, g, -2.0, 2.0);
        r.gradient("softmax_rows", CheckKind::Primitive, {x}, [=] { return softmax_rows(x); });
        r.gradient("softmax_rows_causal", CheckKind::Primitive, {x}, [=] { return softmax_rows_causal(x, 1); });
    }
    {
        Tensor h = leaf({3, 6}, g, -2.0, 2.0);
        r.gradient("layer_stats.mean", CheckKind::Primitive, {h}, [=] { return layer_stats(h).mean; });
        r.gradient("layer_stats.sigma", CheckKind::Primitive, {h}, [=] { return layer_stats(h).sigma; });
        r.gradient("normalize_rows", CheckKind::Primitive, {h}, [=] { return normalize_rows(h); });
    }
    {
        Tensor a = leaf({3, 4}, g), b = leaf({3, 4}, g);
        r.gradient("add", CheckKind::Primitive, {a, b}, [=] { return add(a, b); });
        r.gradient("sub", CheckKind::Primitive, {a, b}, [=] { return sub(a, b); });
        r.gradient("mul", CheckKind::Primitive, {a, b}, [=] { return mul(a, b); });
        r.gradient("scale", CheckKind::Primitive, {a}, [=] { return scale(a, -1.7); });
        r.gradient("sigmoid", CheckKind::Primitive, {a}, [=] { return sigmoid(a); });
        r.gradient("tanh", CheckKind::Primitive, {a}, [=] { return tanh(a); });
        r.gradient("gelu", CheckKind::Primitive, {a}, [=] { return gelu(a); });
        r.gradient("mse", CheckKind::Primitive, {a, b}, [=] { return mse(a, b); });
        r.gradient("sum", CheckKind::Primitive, {a}, [=] { return sum(a); });
        r.gradient("mean", CheckKind::Primitive, {a}, [=] { return mean(a); });
        r.gradient("mean_rows", CheckKind::Primitive, {a}, [=] { return mean_rows(a); });
        r.gradient("concat_rows", CheckKind::Primitive, {a, b}, [=] { return concat_rows(a, b); });
        r.gradient("slice_rows", CheckKind::Primitive, {a}, [=] { return slice_rows(a, 1, 2); });
        r.gradient("concat_cols", CheckKind::Primitive, {a, b}, [=] { return concat_cols({a, b, a}); });
        r.gradient("slice_cols", CheckKind::Primitive, {a}, [=] { return slice_cols(a, 1, 2); });
    }
    {
        Tensor x = leaf({3, 4}, g), row = leaf({1, 4}, g), col = leaf({3, 1}, g, 0.5, 1.5);
        r.gradient("add_row", CheckKind::Primitive, {x, row}, [=] { return add_row(x, row); });
        r.gradient("mul_row", CheckKind::Primitive, {x, row}, [=] { return mul_row(x, row); });
        r.gradient("repeat_rows", CheckKind::Primitive, {row}, [=] { return repeat_rows(row, 3); });
        r.gradient("mul_col", CheckKind::Primitive, {x, col}, [=] { return mul_col(x, col); });
        r.gradient("sub_col", CheckKind::Primitive, {x, col}, [=] { return sub_col(x, col); });
        r.gradient("div_col", CheckKind::Primitive, {x, col}, [=] { return div_col(x, col); });
    }
    {
        Tensor x = leaf({4, 5}, g);
        r.gradient("dropout", CheckKind::Primitive, {x}, [=] {
            Rng mask(11);
            return dropout_train(x, 0.3, mask);
        });
    }
}

std::vector<Tensor> leaves(const NamedTensors& named) {
    std::vector<Tensor> out;
    for (const auto& [name, t] : named) out.push_back(t);
    return out;
}

void composites(Runner& r) {
    constexpr std::size_t d = 8, slots = 2;
    Rng& g = r.rng;
    MemoryUnit unit(d, slots, 2, g);
    Mdcln norm(d, d, g);
    Tensor feed = leaf({5, d}, g);
    Tensor h = leaf({4, d}, g, -2.0, 2.0);
    Tensor m0 = leaf({slots, d}, g);

    NamedTensors unit_params;
    unit.collect("memory", unit_params);
    NamedTensors norm_params;
    norm.collect("norm", norm_params);

    for (const GateFeed gate_feed : {GateFeed::Current, GateFeed::Previous}) {
        std::vector<Tensor> params = leaves(unit_params);
        params.push_back(feed);
        params.push_back(m0);
        Tensor prev_summary = leaf({slots, d}, g);
        prev_summary.set_requires_grad(false);
        const std::string suffix = gate_feed == GateFeed::Current ? "" : " (previous-window gates)";
        r.gradient("memory step" + suffix, CheckKind::Composite, params, [=, &unit] {
            MemoryState s;
            s.M = m0;
            s.previous_summary = prev_summary;
            return unit.step(s, feed, gate_feed);
        });
    }

    {
        std::vector<Tensor> params = leaves(norm_params);
        params.push_back(h);
        params.push_back(m0);
        r.gradient("mdcln", CheckKind::Composite, params, [=, &norm] { return norm(h, m0); });
    }

    {
        std::vector<Tensor> params = leaves(unit_params);
        for (const Tensor& t : leaves(norm_params)) params.push_back(t);
        params.push_back(feed);
        params.push_back(h);
        params.push_back(m0);
        r.gradient("memory step + mdcln", CheckKind::Composite, params, [=, &unit, &norm] {
            MemoryState s;
            s.M = m0;
            return norm(h, unit.step(s, feed));
        });
    }

    {
        ModelConfig c;
        c.features = 2;
        c.window = {6, 4, 3, 1};
        c.d_model = d;
        c.d_ff = 12;
        c.n_heads = 2;
        c.mem_heads = 2;
        c.base_dropout = 0.0;
        Model model(c, 3);
        const SeriesTable table = synth_generate(12, 2, 5);
        const WindowSample w = iter_windows(table, c.window)[0];
        const MemoryState start = model.initial_memory();
        r.gradient("full model forward", CheckKind::Composite, leaves(model.parameters()), [=, &model] {
            MemoryState s = start;
            return model.forward(w, &s, ForwardContext{}).prediction;
        });
    }
}

std::string expect(bool ok, const std::string& why) { return ok ? std::string() : why; }

void invariants(Runner& r) {
    r.invariant("dropout schedule monotone and bounded", [] {
        TrainSchedule s;
        double prev = 0.0;
        for (std::size_t t = 0; t <= 2000; ++t) {
            const double v = dropout_rate(t, s);
            if (v < prev || v > s.theta_max) return "violated at tick " + std::to_string(t);
            prev = v;
        }
        return expect(dropout_rate(0, s) == 0.0, "nonzero at tick 0");
    });

    r.invariant("softmax rows sum to one", [&] {
        NoGradGuard ng;
        const Tensor y = softmax_rows(leaf({5, 7}, r.rng, -30.0, 30.0));
        for (std::size_t i = 0; i < y.rows(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < y.cols(); ++j) s += y(i, j);
            if (std::abs(s - 1.0) > 1e-12) return "row " + std::to_string(i) + " sums to " + format_double(s);
        }
        return std::string();
    });

    r.invariant("serial and parallel kernels agree", [&] {
        const kernels::GemmShape s{7, 9, 11};
        std::vector<double> a(s.m * s.k), b(s.k * s.n), c1(s.m * s.n), c2(s.m * s.n);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        for (double& v : a) v = u(r.rng);
        for (double& v : b) v = u(r.rng);
        kernels::serial::gemm(a, b, c1, s, false);
        kernels::parallel::gemm(a, b, c2, s, false);
        return expect(c1 == c2, "gemm outputs differ");
    });

    r.invariant("frozen memory is left unchanged", [&] {
        NoGradGuard ng;
        MemoryUnit unit(8, 2, 2, r.rng);
        MemoryState s = init_memory(2, 8);
        s.frozen = true;
        const std::vector<double> before = s.M.values();
        unit.step(s, leaf({4, 8}, r.rng));
        return expect(s.M.values() == before && s.update_count == 0, "frozen state moved");
    });

    r.invariant("memory state round-trips bit-exactly", [&] {
        MemoryState s;
        s.M = leaf({3, 8}, r.rng);
        s.update_count = 41;
        const MemoryState back = restore(persist(s));
        return expect(back.M.values() == s.M.values() && back.update_count == 41 && !back.frozen,
                      "restored state differs");
    });

    r.invariant("zero memory with zero maps matches the plain decoder", [&] {
        NoGradGuard ng;
        ModelConfig c;
        c.features = 2;
        c.window = {6, 4, 3, 1};
        c.d_model = 8;
        c.d_ff = 12;
        c.n_heads = 2;
        c.mem_heads = 2;
        Model model(c, 9);
        for (auto& layer : model.decoder) layer.norm1.zero_maps();
        const SeriesTable table = synth_generate(12, 2, 5);
        const WindowSample w = iter_windows(table, c.window)[0];
        MemoryState zero;
        zero.M = Tensor(Shape{c.mem_slots, c.d_model});
        zero.frozen = true;
        const Tensor with = model.forward(w, &zero, ForwardContext{}).prediction;
        const Tensor without = model.forward(w, nullptr, ForwardContext{}).prediction;
        return expect(with.values() == without.values(), "outputs differ");
    });
}

const char* kind_label(CheckKind k) {
    switch (k) {
        case CheckKind::Primitive: return "primitive";
        case CheckKind::Composite: return "composite";
        case CheckKind::Invariant: return "invariant";
    }
    return "?";
}

}  // namespace

bool SelfCheckReport::passed() const { return failures() == 0; }

std::size_t SelfCheckReport::failures() const {
    return static_cast<std::size_t>(std::count_if(checks.begin(), checks.end(), [](const auto& c) { return !c.passed; }));
}

std::string SelfCheckReport::format() const {
    std::ostringstream os;
    for (const CheckResult& c : checks) {
        os << (c.passed ? "PASS " : "FAIL ") << kind_label(c.kind) << ' ' << c.name;
        if (c.kind != CheckKind::Invariant) {
            char buf[64];
            std::snprintf(buf, sizeof buf, " max_rel_err=%.3e tol=%.0e", c.max_rel_error, c.tolerance);
            os << buf;
        }
        if (!c.detail.empty()) os << " (" << c.detail << ')';
        os << '\n';
    }
    char buf[96];
    std::snprintf(buf, sizeof buf, "%zu checks, %zu failed, %.2f s\n", checks.size(), failures(), seconds);
    os << buf;
    return os.str();
}

SelfCheckReport run_selfcheck(const SelfCheckOptions& options) {
    const auto t0 = std::chrono::steady_clock::now();
    Runner r{Rng(options.seed), {}};
    {
        FaultScope fault(options.inject_fault);
        primitives(r);
        composites(r);
        invariants(r);
    }
    r.report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r.report;
}

}  // namespace memts
