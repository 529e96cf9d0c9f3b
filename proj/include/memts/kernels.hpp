#pragma once

// Raw dense kernels over row-major buffers. Every kernel has two builds:
//   serial::   plain loops in textbook order, kept as the reference
//   parallel:: OpenMP over independent output rows
// Each output element is produced by exactly one thread, so results do not
// depend on the thread count. Forward kernels also keep the serial summation
// order; the conv1d backward gathers where the reference scatters.

#include <cstddef>
#include <span>

namespace memts::kernels {

struct GemmShape {
    std::size_t m = 0;
    std::size_t k = 0;
    std::size_t n = 0;
};

struct ConvShape {
    std::size_t length = 0;
    std::size_t width = 0;
    std::size_t in = 0;
    std::size_t out = 0;
};

namespace serial {

// c[m×n] (+)= a[m×k] · b[k×n]
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
          bool accumulate);
// c[m×n] (+)= a[k×m]ᵀ · b[k×n]
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmShape s, bool accumulate);
// c[m×n] (+)= a[m×k] · b[n×k]ᵀ
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmShape s, bool accumulate);

// y[t, o] = Σ_w Σ_c x[(t + w - (width-1)/2) mod L, c] · kernel[w, c, o]
void conv1d_circular(std::span<const double> x, std::span<const double> kernel,
                     std::span<double> y, ConvShape s);
// Accumulates into dx and dkernel.
void conv1d_circular_backward(std::span<const double> x, std::span<const double> kernel,
                              std::span<const double> dy, std::span<double> dx,
                              std::span<double> dkernel, ConvShape s);

// With causal set, row i only sees columns j <= i + causal_offset.
void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows,
                  std::size_t cols, bool causal, std::size_t causal_offset);
void softmax_rows_backward(std::span<const double> y, std::span<const double> dy,
                           std::span<double> dx, std::size_t rows, std::size_t cols);

// y = (x - mean) / sqrt(var + eps) per row, population variance.
void normalize_rows(std::span<const double> x, std::span<double> y, std::span<double> mean,
                    std::span<double> sigma, std::size_t rows, std::size_t cols, double eps);
void normalize_rows_backward(std::span<const double> y, std::span<const double> sigma,
                             std::span<const double> dy, std::span<double> dx, std::size_t rows,
                             std::size_t cols);

}  // namespace serial

namespace parallel {

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
          bool accumulate);
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmShape s, bool accumulate);
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmShape s, bool accumulate);
void conv1d_circular(std::span<const double> x, std::span<const double> kernel,
                     std::span<double> y, ConvShape s);
void conv1d_circular_backward(std::span<const double> x, std::span<const double> kernel,
                              std::span<const double> dy, std::span<double> dx,
                              std::span<double> dkernel, ConvShape s);
void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows,
                  std::size_t cols, bool causal, std::size_t causal_offset);
void softmax_rows_backward(std::span<const double> y, std::span<const double> dy,
                           std::span<double> dx, std::size_t rows, std::size_t cols);
void normalize_rows(std::span<const double> x, std::span<double> y, std::span<double> mean,
                    std::span<double> sigma, std::size_t rows, std::size_t cols, double eps);
void normalize_rows_backward(std::span<const double> y, std::span<const double> sigma,
                             std::span<const double> dy, std::span<double> dx, std::size_t rows,
                             std::size_t cols);

}  // namespace parallel

/// Threads available to the parallel kernels (1 when built without OpenMP).
int max_threads();
void set_threads(int n);

}  // namespace memts::kernels
