#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "memts/kernels.hpp"

namespace k = memts::kernels;

namespace {

std::vector<double> random_buffer(std::size_t n, unsigned seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d;
    std::vector<double> v(n);
    for (double& x : v) x = d(rng);
    return v;
}

template <auto Gemm>
void bm_gemm(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const k::GemmShape s{n, n, n};
    const auto a = random_buffer(n * n, 1), b = random_buffer(n * n, 2);
    std::vector<double> c(n * n);
    for (auto _ : state) {
        Gemm(a, b, c, s, false);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}

template <auto Conv>
void bm_conv(benchmark::State& state) {
    const auto L = static_cast<std::size_t>(state.range(0));
    const k::ConvShape s{L, 3, 7, 64};
    const auto x = random_buffer(L * s.in, 3), w = random_buffer(s.width * s.in * s.out, 4);
    std::vector<double> y(L * s.out);
    for (auto _ : state) {
        Conv(x, w, y, s);
        benchmark::DoNotOptimize(y.data());
    }
}

template <auto Softmax>
void bm_softmax(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto x = random_buffer(n * n, 5);
    std::vector<double> y(n * n);
    for (auto _ : state) {
        Softmax(x, y, n, n, true, 0);
        benchmark::DoNotOptimize(y.data());
    }
}

template <auto Normalize>
void bm_normalize(benchmark::State& state) {
    const auto rows = static_cast<std::size_t>(state.range(0));
    const std::size_t cols = 512;
    const auto x = random_buffer(rows * cols, 6);
    std::vector<double> y(rows * cols), mean(rows), sigma(rows);
    for (auto _ : state) {
        Normalize(x, y, mean, sigma, rows, cols, 1e-5);
        benchmark::DoNotOptimize(y.data());
    }
}

}  // namespace

BENCHMARK(bm_gemm<k::serial::gemm>)->Name("gemm/serial")->RangeMultiplier(2)->Range(64, 512);
BENCHMARK(bm_gemm<k::parallel::gemm>)->Name("gemm/parallel")->RangeMultiplier(2)->Range(64, 512)->UseRealTime();
BENCHMARK(bm_conv<k::serial::conv1d_circular>)->Name("conv1d/serial")->Arg(96)->Arg(336)->Arg(1024);
BENCHMARK(bm_conv<k::parallel::conv1d_circular>)->Name("conv1d/parallel")->Arg(96)->Arg(336)->Arg(1024)->UseRealTime();
BENCHMARK(bm_softmax<k::serial::softmax_rows>)->Name("softmax/serial")->Arg(96)->Arg(336)->Arg(720);
BENCHMARK(bm_softmax<k::parallel::softmax_rows>)->Name("softmax/parallel")->Arg(96)->Arg(336)->Arg(720)->UseRealTime();
BENCHMARK(bm_normalize<k::serial::normalize_rows>)->Name("normalize/serial")->Arg(96)->Arg(336)->Arg(1024);
BENCHMARK(bm_normalize<k::parallel::normalize_rows>)->Name("normalize/parallel")->Arg(96)->Arg(336)->Arg(1024)->UseRealTime();

BENCHMARK_MAIN();
