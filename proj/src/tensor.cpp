#include "memts/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "memts/error.hpp"
#include "memts/kernels.hpp"

namespace memts {

namespace k = kernels::parallel;

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
    os << ']';
    return os.str();
}

std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
    impl_->data.assign(element_count(shape), fill);
    impl_->shape = std::move(shape);
    impl_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
    if (element_count(shape) != data.size())
        throw DimensionError("tensor: shape " + to_string(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(m * n);
    for (const auto& r : rows) {
        if (r.size() != n) throw DimensionError("matrix: ragged rows");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({m, n}, std::move(data));
}

Tensor Tensor::uniform(Shape shape, double bound, Rng& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = dist(rng);
    return t;
}

double Tensor::item() const {
    if (size() != 1) throw ContractError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
    return impl_->data[0];
}

std::vector<double> Tensor::grad() const {
    if (impl_->grad.empty()) return std::vector<double>(impl_->data.size(), 0.0);
    return impl_->grad;
}

std::span<double> Tensor::grad_buffer() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::string t_flipped_op;

std::span<double> grad_of(TensorImpl& t) {
    if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
    return t.grad;
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
    if (!t_grad_enabled) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor* t) { return t->requires_grad(); });
}

// Attaches a backward closure to out when any input requires grad.
void record(std::string_view op, std::initializer_list<const Tensor*> inputs, Tensor& out,
            std::function<void(const TapeNode&)> fn) {
    if (!any_requires_grad(inputs)) return;
    TapeNode node;
    node.op = op;
    for (const Tensor* t : inputs) node.inputs.push_back(t->impl());
    node.output = out.impl();
    node.backward = std::move(fn);
    out.set_requires_grad(true);
    Tape::current().record(std::move(node));
}

void require_matrix(const Tensor& t, std::string_view op) {
    if (t.rank() != 2)
        throw DimensionError(std::string(op) + ": expected a matrix, got shape " + to_string(t.shape()));
}

[[noreturn]] void mismatch(std::string_view op, const Tensor& a, const Tensor& b) {
    throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
}

}  // namespace

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::record(TapeNode node) {
    node.output->tape_generation = generation_;
    nodes_.push_back(std::move(node));
}

void Tape::clear() {
    nodes_.clear();
    ++generation_;
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

void debug::inject_gradient_sign_flip(std::string_view op) { t_flipped_op = op; }

void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1)
        throw ContractError("backward: loss must be a scalar, got shape " +
                            (loss.defined() ? to_string(loss.shape()) : std::string("undefined")));
    Tape& tape = Tape::current();
    if (tape.empty() || loss.impl()->tape_generation != tape.generation())
        throw ContractError(
            "backward: loss is not on the live tape (no recorded forward, or the tape was "
            "already replayed)");

    grad_of(*loss.impl())[0] += 1.0;
    const auto& nodes = tape.nodes();
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        auto& out = *it->output;
        if (out.grad.empty()) continue;
        const bool flip = !t_flipped_op.empty() && it->op == t_flipped_op;
        if (flip)
            for (double& g : out.grad) g = -g;
        it->backward(*it);
        if (flip)
            for (double& g : out.grad) g = -g;
    }
    tape.clear();
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows()) mismatch("matmul", a, b);
    const kernels::GemmShape s{a.rows(), a.cols(), b.cols()};
    Tensor out({s.m, s.n});
    k::gemm(a.data(), b.data(), out.data(), s, false);
    record("matmul", {&a, &b}, out, [s](const TapeNode& n) {
        auto& A = *n.inputs[0];
        auto& B = *n.inputs[1];
        const auto& dc = n.output->grad;
        if (A.requires_grad) k::gemm_nt(dc, B.data, grad_of(A), {s.m, s.n, s.k}, true);
        if (B.requires_grad) k::gemm_tn(A.data, dc, grad_of(B), {s.k, s.m, s.n}, true);
    });
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    if (a.cols() != b.cols()) mismatch("matmul_nt", a, b);
    const kernels::GemmShape s{a.rows(), a.cols(), b.rows()};
    Tensor out({s.m, s.n});
    k::gemm_nt(a.data(), b.data(), out.data(), s, false);
    record("matmul_nt", {&a, &b}, out, [s](const TapeNode& n) {
        auto& A = *n.inputs[0];
        auto& B = *n.inputs[1];
        const auto& dc = n.output->grad;
        if (A.requires_grad) k::gemm(dc, B.data, grad_of(A), {s.m, s.n, s.k}, true);
        if (B.requires_grad) k::gemm_tn(dc, A.data, grad_of(B), {s.n, s.m, s.k}, true);
    });
    return out;
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a(i, j);
    record("transpose", {&a}, out, [m, n](const TapeNode& nd) {
        auto g = grad_of(*nd.inputs[0]);
        const auto& dy = nd.output->grad;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += dy[j * m + i];
    });
    return out;
}

Tensor conv1d(const Tensor& x, const Tensor& kernel) {
    require_matrix(x, "conv1d");
    if (kernel.rank() != 3 || kernel.dim(1) != x.cols()) mismatch("conv1d", x, kernel);
    const kernels::ConvShape s{x.rows(), kernel.dim(0), kernel.dim(1), kernel.dim(2)};
    if (s.width == 0 || s.width > s.length)
        throw ConfigError("conv1d: kernel width " + std::to_string(s.width) +
                          " exceeds sequence length " + std::to_string(s.length));
    Tensor out({s.length, s.out});
    k::conv1d_circular(x.data(), kernel.data(), out.data(), s);
    record("conv1d", {&x, &kernel}, out, [s](const TapeNode& n) {
        auto& X = *n.inputs[0];
        auto& K = *n.inputs[1];
        std::span<double> dx = X.requires_grad ? grad_of(X) : std::span<double>{};
        std::span<double> dk = K.requires_grad ? grad_of(K) : std::span<double>{};
        k::conv1d_circular_backward(X.data, K.data, n.output->grad, dx, dk, s);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Softmax and normalization
// ---------------------------------------------------------------------------

namespace {

Tensor softmax_impl(const Tensor& x, bool causal, std::size_t offset, std::string_view op) {
    require_matrix(x, op);
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out({m, n});
    k::softmax_rows(x.data(), out.data(), m, n, causal, offset);
    record(op, {&x}, out, [m, n](const TapeNode& nd) {
        k::softmax_rows_backward(nd.output->data, nd.output->grad, grad_of(*nd.inputs[0]), m, n);
    });
    return out;
}

}  // namespace

Tensor softmax_rows(const Tensor& x) { return softmax_impl(x, false, 0, "softmax_rows"); }

Tensor softmax_rows_causal(const Tensor& x, std::size_t offset) {
    return softmax_impl(x, true, offset, "softmax_rows_causal");
}

RowStats layer_stats(const Tensor& h, double eps) {
    require_matrix(h, "layer_stats");
    const std::size_t m = h.rows(), d = h.cols();
    if (d == 0) throw DimensionError("layer_stats: rows must have at least one column");
    Tensor normalized({m, d});
    RowStats stats{Tensor({m, 1}), Tensor({m, 1})};
    kernels::serial::normalize_rows(h.data(), normalized.data(), stats.mean.data(),
                                    stats.sigma.data(), m, d, eps);
    const double inv = 1.0 / static_cast<double>(d);
    record("layer_stats.mean", {&h}, stats.mean, [m, d, inv](const TapeNode& n) {
        auto g = grad_of(*n.inputs[0]);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < d; ++j) g[i * d + j] += n.output->grad[i] * inv;
    });
    // d sigma / d h_j = (h_j - mu) / (d sigma)
    record("layer_stats.sigma", {&h}, stats.sigma,
           [m, d, inv, mean = stats.mean.values()](const TapeNode& n) {
               auto g = grad_of(*n.inputs[0]);
               const auto& x = n.inputs[0]->data;
               for (std::size_t i = 0; i < m; ++i) {
                   const double c = n.output->grad[i] * inv / n.output->data[i];
                   for (std::size_t j = 0; j < d; ++j) g[i * d + j] += c * (x[i * d + j] - mean[i]);
               }
           });
    return stats;
}

Tensor normalize_rows(const Tensor& h, double eps) {
    require_matrix(h, "normalize_rows");
    const std::size_t m = h.rows(), d = h.cols();
    Tensor out({m, d});
    auto sigma = std::make_shared<std::vector<double>>(m);
    std::vector<double> mu(m);
    k::normalize_rows(h.data(), out.data(), mu, *sigma, m, d, eps);
    record("normalize_rows", {&h}, out, [m, d, sigma](const TapeNode& n) {
        k::normalize_rows_backward(n.output->data, *sigma, n.output->grad, grad_of(*n.inputs[0]), m, d);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {

enum class Binary { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, Binary op, std::string_view name) {
    const bool same = a.shape() == b.shape();
    const bool b_scalar = !same && b.size() == 1;
    const bool a_scalar = !same && !b_scalar && a.size() == 1;
    if (!same && !a_scalar && !b_scalar) mismatch(name, a, b);
    const Tensor& big = a_scalar ? b : a;
    const std::size_t n = big.size();
    Tensor out(big.shape());
    auto A = a.data();
    auto B = b.data();
    auto O = out.data();
    auto ai = [&](std::size_t i) { return a_scalar ? A[0] : A[i]; };
    auto bi = [&](std::size_t i) { return b_scalar ? B[0] : B[i]; };
    for (std::size_t i = 0; i < n; ++i) {
        switch (op) {
            case Binary::Add: O[i] = ai(i) + bi(i); break;
            case Binary::Sub: O[i] = ai(i) - bi(i); break;
            case Binary::Mul: O[i] = ai(i) * bi(i); break;
        }
    }
    record(name, {&a, &b}, out, [op, n, a_scalar, b_scalar](const TapeNode& nd) {
        auto& A = *nd.inputs[0];
        auto& B = *nd.inputs[1];
        const auto& dy = nd.output->grad;
        if (A.requires_grad) {
            auto g = grad_of(A);
            for (std::size_t i = 0; i < n; ++i) {
                const double bv = b_scalar ? B.data[0] : B.data[i];
                const double gi = op == Binary::Mul ? dy[i] * bv : dy[i];
                g[a_scalar ? 0 : i] += gi;
            }
        }
        if (B.requires_grad) {
            auto g = grad_of(B);
            for (std::size_t i = 0; i < n; ++i) {
                const double av = a_scalar ? A.data[0] : A.data[i];
                const double gi = op == Binary::Mul ? dy[i] * av : op == Binary::Sub ? -dy[i] : dy[i];
                g[b_scalar ? 0 : i] += gi;
            }
        }
    });
    return out;
}

// y = f(x); dx = dy * df(x, y)
template <typename F, typename DF>
Tensor unary(const Tensor& x, std::string_view name, F f, DF df) {
    Tensor out(x.shape());
    auto X = x.data();
    auto Y = out.data();
    for (std::size_t i = 0; i < X.size(); ++i) Y[i] = f(X[i]);
    record(name, {&x}, out, [df](const TapeNode& n) {
        auto g = grad_of(*n.inputs[0]);
        const auto& xs = n.inputs[0]->data;
        const auto& ys = n.output->data;
        const auto& dy = n.output->grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * df(xs[i], ys[i]);
    });
    return out;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Mul, "mul"); }

Tensor scale(const Tensor& a, double s) {
    return unary(a, "scale", [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor sigmoid(const Tensor& x) {
    return unary(
        x, "sigmoid",
        [](double v) {
            if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
    return unary(
        x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor gelu(const Tensor& x) {
    return unary(
        x, "gelu",
        [](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); },
        [](double v, double) {
            const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
            return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
        });
}

Tensor pointwise(Pointwise op, const Tensor& x) {
    switch (op) {
        case Pointwise::Sigmoid: return sigmoid(x);
        case Pointwise::Tanh: return tanh(x);
        case Pointwise::Gelu: return gelu(x);
    }
    throw ContractError("pointwise: unknown op");
}

// ---------------------------------------------------------------------------
// Row / column broadcasts (explicit)
// ---------------------------------------------------------------------------

namespace {

void require_row(const Tensor& x, const Tensor& row, std::string_view op) {
    require_matrix(x, op);
    if (row.rank() != 2 || row.rows() != 1 || row.cols() != x.cols()) mismatch(op, x, row);
}

void require_col(const Tensor& x, const Tensor& col, std::string_view op) {
    require_matrix(x, op);
    if (col.rank() != 2 || col.cols() != 1 || col.rows() != x.rows()) mismatch(op, x, col);
}

}  // namespace

Tensor add_row(const Tensor& x, const Tensor& row) {
    require_row(x, row, "add_row");
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x(i, j) + row(0, j);
    record("add_row", {&x, &row}, out, [m, n](const TapeNode& nd) {
        const auto& dy = nd.output->grad;
        if (nd.inputs[0]->requires_grad) {
            auto g = grad_of(*nd.inputs[0]);
            for (std::size_t i = 0; i < m * n; ++i) g[i] += dy[i];
        }
        if (nd.inputs[1]->requires_grad) {
            auto g = grad_of(*nd.inputs[1]);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += dy[i * n + j];
        }
    });
    return out;
}

Tensor mul_row(const Tensor& x, const Tensor& row) {
    require_row(x, row, "mul_row");
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x(i, j) * row(0, j);
    record("mul_row", {&x, &row}, out, [m, n](const TapeNode& nd) {
        const auto& X = nd.inputs[0]->data;
        const auto& R = nd.inputs[1]->data;
        const auto& dy = nd.output->grad;
        if (nd.inputs[0]->requires_grad) {
            auto g = grad_of(*nd.inputs[0]);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[i * n + j] += dy[i * n + j] * R[j];
        }
        if (nd.inputs[1]->requires_grad) {
            auto g = grad_of(*nd.inputs[1]);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) g[j] += dy[i * n + j] * X[i * n + j];
        }
    });
    return out;
}

namespace {

enum class ColOp { Mul, Sub, Div };

Tensor col_op(const Tensor& x, const Tensor& col, ColOp op, std::string_view name) {
    require_col(x, col, name);
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double c = col(i, 0);
        for (std::size_t j = 0; j < n; ++j) {
            const double v = x(i, j);
            out.at(i, j) = op == ColOp::Mul ? v * c : op == ColOp::Sub ? v - c : v / c;
        }
    }
    record(name, {&x, &col}, out, [m, n, op](const TapeNode& nd) {
        const auto& X = nd.inputs[0]->data;
        const auto& C = nd.inputs[1]->data;
        const auto& dy = nd.output->grad;
        if (nd.inputs[0]->requires_grad) {
            auto g = grad_of(*nd.inputs[0]);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double d = dy[i * n + j];
                    g[i * n + j] += op == ColOp::Mul ? d * C[i] : op == ColOp::Sub ? d : d / C[i];
                }
        }
        if (nd.inputs[1]->requires_grad) {
            auto g = grad_of(*nd.inputs[1]);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double d = dy[i * n + j];
                    g[i] += op == ColOp::Mul   ? d * X[i * n + j]
                            : op == ColOp::Sub ? -d
                                               : -d * X[i * n + j] / (C[i] * C[i]);
                }
        }
    });
    return out;
}

}  // namespace

Tensor mul_col(const Tensor& x, const Tensor& col) { return col_op(x, col, ColOp::Mul, "mul_col"); }
Tensor sub_col(const Tensor& x, const Tensor& col) { return col_op(x, col, ColOp::Sub, "sub_col"); }
Tensor div_col(const Tensor& x, const Tensor& col) { return col_op(x, col, ColOp::Div, "div_col"); }

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    require_matrix(a, "concat_rows");
    require_matrix(b, "concat_rows");
    if (a.cols() != b.cols()) mismatch("concat_rows", a, b);
    const std::size_t na = a.size();
    std::vector<double> data(a.data().begin(), a.data().end());
    data.insert(data.end(), b.data().begin(), b.data().end());
    Tensor out({a.rows() + b.rows(), a.cols()}, std::move(data));
    record("concat_rows", {&a, &b}, out, [na](const TapeNode& nd) {
        const auto& dy = nd.output->grad;
        if (nd.inputs[0]->requires_grad) {
            auto g = grad_of(*nd.inputs[0]);
            for (std::size_t i = 0; i < na; ++i) g[i] += dy[i];
        }
        if (nd.inputs[1]->requires_grad) {
            auto g = grad_of(*nd.inputs[1]);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[na + i];
        }
    });
    return out;
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
    require_matrix(x, "slice_rows");
    if (begin + count > x.rows())
        throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " +
                             std::to_string(begin + count) + ") out of range for " + to_string(x.shape()));
    const std::size_t n = x.cols();
    const auto first = x.data().begin() + static_cast<std::ptrdiff_t>(begin * n);
    Tensor out({count, n}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(count * n)));
    record("slice_rows", {&x}, out, [begin, n](const TapeNode& nd) {
        auto g = grad_of(*nd.inputs[0]);
        const auto& dy = nd.output->grad;
        for (std::size_t i = 0; i < dy.size(); ++i) g[begin * n + i] += dy[i];
    });
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t m = parts.front().rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_matrix(p, "concat_cols");
        if (p.rows() != m) mismatch("concat_cols", parts.front(), p);
        total += p.cols();
    }
    Tensor out({m, total});
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out.at(i, off + j) = p(i, j);
        off += p.cols();
    }
    if (!grad_enabled() ||
        std::none_of(parts.begin(), parts.end(), [](const Tensor& p) { return p.requires_grad(); }))
        return out;
    TapeNode node;
    node.op = "concat_cols";
    for (const auto& p : parts) node.inputs.push_back(p.impl());
    node.output = out.impl();
    node.backward = [m, total, offsets](const TapeNode& nd) {
        const auto& dy = nd.output->grad;
        for (std::size_t q = 0; q < nd.inputs.size(); ++q) {
            auto& in = *nd.inputs[q];
            if (!in.requires_grad) continue;
            const std::size_t w = in.shape[1];
            auto g = grad_of(in);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) g[i * w + j] += dy[i * total + offsets[q] + j];
        }
    };
    out.set_requires_grad(true);
    Tape::current().record(std::move(node));
    return out;
}

Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
    require_matrix(x, "slice_cols");
    if (begin + count > x.cols())
        throw DimensionError("slice_cols: columns out of range for " + to_string(x.shape()));
    const std::size_t m = x.rows(), n = x.cols();
    Tensor out({m, count});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) out.at(i, j) = x(i, begin + j);
    record("slice_cols", {&x}, out, [m, n, begin, count](const TapeNode& nd) {
        auto g = grad_of(*nd.inputs[0]);
        const auto& dy = nd.output->grad;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < count; ++j) g[i * n + begin + j] += dy[i * count + j];
    });
    return out;
}

Tensor mean_rows(const Tensor& x) {
    require_matrix(x, "mean_rows");
    const std::size_t m = x.rows(), n = x.cols();
    if (m == 0) throw DimensionError("mean_rows: no rows");
    Tensor out({1, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(0, j) += x(i, j);
    const double inv = 1.0 / static_cast<double>(m);
    for (double& v : out.data()) v *= inv;
    record("mean_rows", {&x}, out, [m, n, inv](const TapeNode& nd) {
        auto g = grad_of(*nd.inputs[0]);
        const auto& dy = nd.output->grad;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += dy[j] * inv;
    });
    return out;
}

Tensor repeat_rows(const Tensor& row, std::size_t k) {
    require_matrix(row, "repeat_rows");
    if (row.rows() != 1) throw DimensionError("repeat_rows: expected a [1xn] row, got " + to_string(row.shape()));
    const std::size_t n = row.cols();
    Tensor out({k, n});
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = row(0, j);
    record("repeat_rows", {&row}, out, [k, n](const TapeNode& nd) {
        auto g = grad_of(*nd.inputs[0]);
        const auto& dy = nd.output->grad;
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < n; ++j) g[j] += dy[i * n + j];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += v;
    Tensor out = Tensor::scalar(total);
    record("sum", {&x}, out, [](const TapeNode& nd) {
        auto g = grad_of(*nd.inputs[0]);
        for (double& v : g) v += nd.output->grad[0];
    });
    return out;
}

Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw DimensionError("mean: empty tensor");
    double total = 0.0;
    for (double v : x.data()) total += v;
    const double inv = 1.0 / static_cast<double>(x.size());
    Tensor out = Tensor::scalar(total * inv);
    record("mean", {&x}, out, [inv](const TapeNode& nd) {
        auto g = grad_of(*nd.inputs[0]);
        for (double& v : g) v += nd.output->grad[0] * inv;
    });
    return out;
}

Tensor mse(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) mismatch("mse", a, b);
    if (a.size() == 0) throw DimensionError("mse: empty tensors");
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        total += d * d;
    }
    const double inv = 1.0 / static_cast<double>(a.size());
    Tensor out = Tensor::scalar(total * inv);
    record("mse", {&a, &b}, out, [inv](const TapeNode& nd) {
        const auto& A = nd.inputs[0]->data;
        const auto& B = nd.inputs[1]->data;
        const double g0 = nd.output->grad[0] * 2.0 * inv;
        if (nd.inputs[0]->requires_grad) {
            auto g = grad_of(*nd.inputs[0]);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += g0 * (A[i] - B[i]);
        }
        if (nd.inputs[1]->requires_grad) {
            auto g = grad_of(*nd.inputs[1]);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= g0 * (A[i] - B[i]);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

Tensor dropout_train(const Tensor& x, double rate, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0))
        throw ConfigError("dropout_train: rate must lie in [0, 1), got " + std::to_string(rate));
    if (rate == 0.0) return x;
    const double keep_scale = 1.0 / (1.0 - rate);
    auto mask = std::make_shared<std::vector<double>>(x.size());
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        // 53 random mantissa bits, uniform on [0, 1)
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        (*mask)[i] = u < rate ? 0.0 : keep_scale;
        out.data()[i] = x.data()[i] * (*mask)[i];
    }
    record("dropout", {&x}, out, [mask](const TapeNode& nd) {
        auto g = grad_of(*nd.inputs[0]);
        const auto& dy = nd.output->grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * (*mask)[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Gradient check
// ---------------------------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
    std::vector<Tensor> params{Tensor(x.shape(), x.values(), true)};
    const Tensor leaf = params.front();
    return grad_check([&] { return f(leaf); }, params, h);
}

double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double h) {
    for (auto& p : params) p.zero_grad();
    Tape::current().clear();
    const Tensor loss = f();
    if (loss.requires_grad())
        backward(loss);
    else
        Tape::current().clear();

    double worst = 0.0;
    NoGradGuard no_grad;
    for (auto& p : params) {
        const std::vector<double> analytic = p.grad();
        auto data = p.data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + h;
            const double fp = f().item();
            data[i] = orig - h;
            const double fm = f().item();
            data[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
        }
        p.zero_grad();
    }
    return worst;
}

}  // namespace memts
