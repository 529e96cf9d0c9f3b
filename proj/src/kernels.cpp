#include "memts/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace memts::kernels {

namespace {

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr std::size_t kParallelWork = 1 << 15;

inline std::size_t wrap(std::size_t t, std::size_t w, std::size_t pad, std::size_t length) {
    return (t + w + length - pad) % length;
}

}  // namespace

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
    omp_set_num_threads(std::max(1, n));
#else
    (void)n;
#endif
}

// ---------------------------------------------------------------------------
// Serial reference
// ---------------------------------------------------------------------------

namespace serial {

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
          bool accumulate) {
    for (std::size_t i = 0; i < s.m; ++i) {
        for (std::size_t j = 0; j < s.n; ++j) {
            double sum = 0.0;
            for (std::size_t p = 0; p < s.k; ++p) sum += a[i * s.k + p] * b[p * s.n + j];
            c[i * s.n + j] = accumulate ? c[i * s.n + j] + sum : sum;
        }
    }
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmShape s, bool accumulate) {
    for (std::size_t i = 0; i < s.m; ++i) {
        for (std::size_t j = 0; j < s.n; ++j) {
            double sum = 0.0;
            for (std::size_t p = 0; p < s.k; ++p) sum += a[p * s.m + i] * b[p * s.n + j];
            c[i * s.n + j] = accumulate ? c[i * s.n + j] + sum : sum;
        }
    }
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmShape s, bool accumulate) {
    for (std::size_t i = 0; i < s.m; ++i) {
        for (std::size_t j = 0; j < s.n; ++j) {
            double sum = 0.0;
            for (std::size_t p = 0; p < s.k; ++p) sum += a[i * s.k + p] * b[j * s.k + p];
            c[i * s.n + j] = accumulate ? c[i * s.n + j] + sum : sum;
        }
    }
}

void conv1d_circular(std::span<const double> x, std::span<const double> kernel,
                     std::span<double> y, ConvShape s) {
    const std::size_t pad = (s.width - 1) / 2;
    for (std::size_t t = 0; t < s.length; ++t) {
        for (std::size_t o = 0; o < s.out; ++o) {
            double sum = 0.0;
            for (std::size_t w = 0; w < s.width; ++w) {
                const std::size_t src = wrap(t, w, pad, s.length);
                for (std::size_t c = 0; c < s.in; ++c)
                    sum += x[src * s.in + c] * kernel[(w * s.in + c) * s.out + o];
            }
            y[t * s.out + o] = sum;
        }
    }
}

void conv1d_circular_backward(std::span<const double> x, std::span<const double> kernel,
                              std::span<const double> dy, std::span<double> dx,
                              std::span<double> dkernel, ConvShape s) {
    const std::size_t pad = (s.width - 1) / 2;
    for (std::size_t t = 0; t < s.length; ++t) {
        for (std::size_t w = 0; w < s.width; ++w) {
            const std::size_t src = wrap(t, w, pad, s.length);
            for (std::size_t c = 0; c < s.in; ++c) {
                for (std::size_t o = 0; o < s.out; ++o) {
                    const double g = dy[t * s.out + o];
                    if (!dx.empty()) dx[src * s.in + c] += g * kernel[(w * s.in + c) * s.out + o];
                    if (!dkernel.empty()) dkernel[(w * s.in + c) * s.out + o] += g * x[src * s.in + c];
                }
            }
        }
    }
}

void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows,
                  std::size_t cols, bool causal, std::size_t causal_offset) {
    for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t visible = causal ? std::min(cols, i + causal_offset + 1) : cols;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < visible; ++j) mx = std::max(mx, x[i * cols + j]);
        double total = 0.0;
        for (std::size_t j = 0; j < visible; ++j) {
            y[i * cols + j] = std::exp(x[i * cols + j] - mx);
            total += y[i * cols + j];
        }
        for (std::size_t j = 0; j < visible; ++j) y[i * cols + j] /= total;
        for (std::size_t j = visible; j < cols; ++j) y[i * cols + j] = 0.0;
    }
}

void softmax_rows_backward(std::span<const double> y, std::span<const double> dy,
                           std::span<double> dx, std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < cols; ++j) dot += y[i * cols + j] * dy[i * cols + j];
        for (std::size_t j = 0; j < cols; ++j)
            dx[i * cols + j] += y[i * cols + j] * (dy[i * cols + j] - dot);
    }
}

void normalize_rows(std::span<const double> x, std::span<double> y, std::span<double> mean,
                    std::span<double> sigma, std::size_t rows, std::size_t cols, double eps) {
    const double inv = 1.0 / static_cast<double>(cols);
    for (std::size_t i = 0; i < rows; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mu += x[i * cols + j];
        mu *= inv;
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double d = x[i * cols + j] - mu;
            var += d * d;
        }
        const double sd = std::sqrt(var * inv + eps);
        for (std::size_t j = 0; j < cols; ++j) y[i * cols + j] = (x[i * cols + j] - mu) / sd;
        mean[i] = mu;
        sigma[i] = sd;
    }
}

void normalize_rows_backward(std::span<const double> y, std::span<const double> sigma,
                             std::span<const double> dy, std::span<double> dx, std::size_t rows,
                             std::size_t cols) {
    const double inv = 1.0 / static_cast<double>(cols);
    for (std::size_t i = 0; i < rows; ++i) {
        double g_mean = 0.0;
        double gy_mean = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            g_mean += dy[i * cols + j];
            gy_mean += dy[i * cols + j] * y[i * cols + j];
        }
        g_mean *= inv;
        gy_mean *= inv;
        for (std::size_t j = 0; j < cols; ++j)
            dx[i * cols + j] +=
                (dy[i * cols + j] - g_mean - y[i * cols + j] * gy_mean) / sigma[i];
    }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP
// ---------------------------------------------------------------------------

namespace parallel {

namespace {

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kWideCols = 8;
constexpr std::size_t kNarrowCols = 4;

// a(i, p) reads row-major a[m×k] or, transposed, a[k×m].
template <bool TransA>
inline double a_at(const double* a, std::size_t i, std::size_t p, const GemmShape& s) {
    return TransA ? a[p * s.m + i] : a[i * s.k + p];
}

// One kTileRows × Cols block of c held in registers, reading a packed panel
// laid out [k × kTileRows]. Each element still accumulates over p in
// ascending order from zero.
template <std::size_t Cols>
inline void tile(const double* panel, const double* b, double* c, const GemmShape& s, std::size_t i0,
                 std::size_t j0, bool accumulate) {
    double acc[kTileRows][Cols] = {};
    for (std::size_t p = 0; p < s.k; ++p) {
        const double* brow = b + p * s.n + j0;
        const double* av = panel + p * kTileRows;
        for (std::size_t r = 0; r < kTileRows; ++r)
            for (std::size_t q = 0; q < Cols; ++q) acc[r][q] += av[r] * brow[q];
    }
    for (std::size_t r = 0; r < kTileRows; ++r) {
        double* crow = c + (i0 + r) * s.n + j0;
        for (std::size_t q = 0; q < Cols; ++q) crow[q] = accumulate ? crow[q] + acc[r][q] : acc[r][q];
    }
}

// Edge rows and columns outside full tiles.
template <bool TransA>
inline void edge(const double* a, const double* b, double* c, const GemmShape& s, std::size_t i,
                 std::size_t j_begin, bool accumulate) {
    for (std::size_t j = j_begin; j < s.n; ++j) {
        double sum = 0.0;
        for (std::size_t p = 0; p < s.k; ++p) sum += a_at<TransA>(a, i, p, s) * b[p * s.n + j];
        c[i * s.n + j] = accumulate ? c[i * s.n + j] + sum : sum;
    }
}

template <bool TransA>
void tiled_gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
                bool accumulate) {
    const std::size_t full_rows = s.m / kTileRows * kTileRows;
    const auto row_blocks = static_cast<std::ptrdiff_t>(s.m / kTileRows + (full_rows < s.m ? 1 : 0));
#pragma omp parallel if (s.m * s.n * s.k > kParallelWork)
    {
        std::vector<double> panel(s.k * kTileRows);
#pragma omp for schedule(static)
        for (std::ptrdiff_t bb = 0; bb < row_blocks; ++bb) {
            const std::size_t i0 = static_cast<std::size_t>(bb) * kTileRows;
            if (i0 + kTileRows > s.m) {
                for (std::size_t i = i0; i < s.m; ++i) edge<TransA>(a.data(), b.data(), c.data(), s, i, 0, accumulate);
                continue;
            }
            for (std::size_t p = 0; p < s.k; ++p)
                for (std::size_t r = 0; r < kTileRows; ++r) panel[p * kTileRows + r] = a_at<TransA>(a.data(), i0 + r, p, s);
            std::size_t j0 = 0;
            for (; j0 + kWideCols <= s.n; j0 += kWideCols)
                tile<kWideCols>(panel.data(), b.data(), c.data(), s, i0, j0, accumulate);
            for (; j0 + kNarrowCols <= s.n; j0 += kNarrowCols)
                tile<kNarrowCols>(panel.data(), b.data(), c.data(), s, i0, j0, accumulate);
            for (std::size_t i = i0; i < i0 + kTileRows; ++i)
                edge<TransA>(a.data(), b.data(), c.data(), s, i, j0, accumulate);
        }
    }
}

}  // namespace

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
          bool accumulate) {
    tiled_gemm<false>(a, b, c, s, accumulate);
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmShape s, bool accumulate) {
    tiled_gemm<true>(a, b, c, s, accumulate);
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmShape s, bool accumulate) {
    // Transposing b lets the inner loop run over contiguous columns; each
    // output still sums over p in ascending order, as in the serial form.
    std::vector<double> bt(s.k * s.n);
    for (std::size_t j = 0; j < s.n; ++j)
        for (std::size_t p = 0; p < s.k; ++p) bt[p * s.n + j] = b[j * s.k + p];
    gemm(a, bt, c, s, accumulate);
}

void conv1d_circular(std::span<const double> x, std::span<const double> kernel,
                     std::span<double> y, ConvShape s) {
    const std::size_t pad = (s.width - 1) / 2;
    const auto length = static_cast<std::ptrdiff_t>(s.length);
#pragma omp parallel if (s.length * s.width * s.in * s.out > kParallelWork)
    {
        std::vector<double> acc(s.out);
#pragma omp for schedule(static)
        for (std::ptrdiff_t tt = 0; tt < length; ++tt) {
            const auto t = static_cast<std::size_t>(tt);
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t w = 0; w < s.width; ++w) {
                const std::size_t src = wrap(t, w, pad, s.length);
                for (std::size_t c = 0; c < s.in; ++c) {
                    const double xv = x[src * s.in + c];
                    const double* krow = kernel.data() + (w * s.in + c) * s.out;
                    for (std::size_t o = 0; o < s.out; ++o) acc[o] += xv * krow[o];
                }
            }
            std::copy(acc.begin(), acc.end(), y.begin() + static_cast<std::ptrdiff_t>(t * s.out));
        }
    }
}

void conv1d_circular_backward(std::span<const double> x, std::span<const double> kernel,
                              std::span<const double> dy, std::span<double> dx,
                              std::span<double> dkernel, ConvShape s) {
    const std::size_t pad = (s.width - 1) / 2;
    const bool big = s.length * s.width * s.in * s.out > kParallelWork;
    if (!dx.empty()) {
        // Gather form: input row r receives from output rows t with wrap(t, w) == r.
        const auto length = static_cast<std::ptrdiff_t>(s.length);
#pragma omp parallel for schedule(static) if (big)
        for (std::ptrdiff_t rr = 0; rr < length; ++rr) {
            const auto r = static_cast<std::size_t>(rr);
            for (std::size_t w = 0; w < s.width; ++w) {
                const std::size_t t = (r + pad + s.length * s.width - w) % s.length;
                const double* g = dy.data() + t * s.out;
                for (std::size_t c = 0; c < s.in; ++c) {
                    const double* krow = kernel.data() + (w * s.in + c) * s.out;
                    double sum = 0.0;
                    for (std::size_t o = 0; o < s.out; ++o) sum += g[o] * krow[o];
                    dx[r * s.in + c] += sum;
                }
            }
        }
    }
    if (!dkernel.empty()) {
        const auto taps = static_cast<std::ptrdiff_t>(s.width * s.in);
#pragma omp parallel for schedule(static) if (big)
        for (std::ptrdiff_t qq = 0; qq < taps; ++qq) {
            const auto q = static_cast<std::size_t>(qq);
            const std::size_t w = q / s.in;
            const std::size_t c = q % s.in;
            double* krow = dkernel.data() + q * s.out;
            for (std::size_t t = 0; t < s.length; ++t) {
                const double xv = x[wrap(t, w, pad, s.length) * s.in + c];
                const double* g = dy.data() + t * s.out;
                for (std::size_t o = 0; o < s.out; ++o) krow[o] += xv * g[o];
            }
        }
    }
}

void softmax_rows(std::span<const double> x, std::span<double> y, std::size_t rows,
                  std::size_t cols, bool causal, std::size_t causal_offset) {
    const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
    for (std::ptrdiff_t ii = 0; ii < n; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        serial::softmax_rows(x.subspan(i * cols, cols), y.subspan(i * cols, cols), 1, cols,
                             causal, i + causal_offset);
    }
}

void softmax_rows_backward(std::span<const double> y, std::span<const double> dy,
                           std::span<double> dx, std::size_t rows, std::size_t cols) {
    const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
    for (std::ptrdiff_t ii = 0; ii < n; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        serial::softmax_rows_backward(y.subspan(i * cols, cols), dy.subspan(i * cols, cols),
                                      dx.subspan(i * cols, cols), 1, cols);
    }
}

void normalize_rows(std::span<const double> x, std::span<double> y, std::span<double> mean,
                    std::span<double> sigma, std::size_t rows, std::size_t cols, double eps) {
    const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
    for (std::ptrdiff_t ii = 0; ii < n; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        serial::normalize_rows(x.subspan(i * cols, cols), y.subspan(i * cols, cols),
                               mean.subspan(i, 1), sigma.subspan(i, 1), 1, cols, eps);
    }
}

void normalize_rows_backward(std::span<const double> y, std::span<const double> sigma,
                             std::span<const double> dy, std::span<double> dx, std::size_t rows,
                             std::size_t cols) {
    const auto n = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static) if (rows * cols > kParallelWork)
    for (std::ptrdiff_t ii = 0; ii < n; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        serial::normalize_rows_backward(y.subspan(i * cols, cols), sigma.subspan(i, 1),
                                        dy.subspan(i * cols, cols), dx.subspan(i * cols, cols),
                                        1, cols);
    }
}

}  // namespace parallel

}  // namespace memts::kernels
