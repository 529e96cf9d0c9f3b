// Parallel kernels against the serial reference.

#include <random>
#include <vector>

#include "doctest.h"
#include "memts/kernels.hpp"

using namespace memts::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
    std::normal_distribution<double> d;
    std::vector<double> v(n);
    for (auto& x : v) x = d(rng);
    return v;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("gemm variants agree with the serial reference bit for bit") {
    std::mt19937_64 rng(7);
    set_threads(4);
    for (GemmShape s : {GemmShape{3, 4, 2}, GemmShape{64, 48, 96}, GemmShape{1, 1, 1}, GemmShape{130, 33, 70}, GemmShape{7, 5, 13}, GemmShape{72, 8, 12}}) {
        const auto a = random_vec(s.m * s.k, rng);
        const auto b = random_vec(s.k * s.n, rng);
        const auto bt = random_vec(s.n * s.k, rng);
        const auto at = random_vec(s.k * s.m, rng);
        const auto seed = random_vec(s.m * s.n, rng);
        for (bool acc : {false, true}) {
            auto c1 = seed, c2 = seed;
            serial::gemm(a, b, c1, s, acc);
            parallel::gemm(a, b, c2, s, acc);
            CHECK(c1 == c2);
            c1 = seed, c2 = seed;
            serial::gemm_tn(at, b, c1, s, acc);
            parallel::gemm_tn(at, b, c2, s, acc);
            CHECK(c1 == c2);
            c1 = seed, c2 = seed;
            serial::gemm_nt(a, bt, c1, s, acc);
            parallel::gemm_nt(a, bt, c2, s, acc);
            CHECK(c1 == c2);
        }
    }
    set_threads(1);
}

TEST_CASE("conv1d forward and backward agree with the serial reference") {
    std::mt19937_64 rng(11);
    set_threads(3);
    for (ConvShape s : {ConvShape{5, 3, 2, 4}, ConvShape{96, 3, 7, 64}, ConvShape{4, 1, 1, 1}}) {
        const auto x = random_vec(s.length * s.in, rng);
        const auto k = random_vec(s.width * s.in * s.out, rng);
        const auto dy = random_vec(s.length * s.out, rng);
        std::vector<double> y1(s.length * s.out), y2(y1.size());
        serial::conv1d_circular(x, k, y1, s);
        parallel::conv1d_circular(x, k, y2, s);
        CHECK(y1 == y2);

        std::vector<double> dx1(x.size()), dx2(x.size()), dk1(k.size()), dk2(k.size());
        serial::conv1d_circular_backward(x, k, dy, dx1, dk1, s);
        parallel::conv1d_circular_backward(x, k, dy, dx2, dk2, s);
        CHECK(max_abs_diff(dx1, dx2) < 1e-12);
        CHECK(max_abs_diff(dk1, dk2) < 1e-12);
    }
    set_threads(1);
}

TEST_CASE("row kernels agree with the serial reference") {
    std::mt19937_64 rng(3);
    set_threads(2);
    const std::size_t rows = 200, cols = 300;
    const auto x = random_vec(rows * cols, rng);
    const auto dy = random_vec(rows * cols, rng);
    for (bool causal : {false, true}) {
        std::vector<double> y1(x.size()), y2(x.size());
        serial::softmax_rows(x, y1, rows, cols, causal, 5);
        parallel::softmax_rows(x, y2, rows, cols, causal, 5);
        CHECK(y1 == y2);
        std::vector<double> d1(x.size()), d2(x.size());
        serial::softmax_rows_backward(y1, dy, d1, rows, cols);
        parallel::softmax_rows_backward(y1, dy, d2, rows, cols);
        CHECK(d1 == d2);
    }
    std::vector<double> y1(x.size()), y2(x.size()), m1(rows), m2(rows), s1(rows), s2(rows);
    serial::normalize_rows(x, y1, m1, s1, rows, cols, 1e-5);
    parallel::normalize_rows(x, y2, m2, s2, rows, cols, 1e-5);
    CHECK(y1 == y2);
    CHECK(s1 == s2);
    std::vector<double> d1(x.size()), d2(x.size());
    serial::normalize_rows_backward(y1, s1, dy, d1, rows, cols);
    parallel::normalize_rows_backward(y1, s1, dy, d2, rows, cols);
    CHECK(d1 == d2);
    set_threads(1);
}

TEST_CASE("thread count does not change results") {
    std::mt19937_64 rng(5);
    const GemmShape s{100, 80, 90};
    const auto a = random_vec(s.m * s.k, rng);
    const auto b = random_vec(s.k * s.n, rng);
    std::vector<double> one(s.m * s.n), many(s.m * s.n);
    set_threads(1);
    parallel::gemm(a, b, one, s, false);
    set_threads(8);
    parallel::gemm(a, b, many, s, false);
    set_threads(1);
    CHECK(one == many);
}
