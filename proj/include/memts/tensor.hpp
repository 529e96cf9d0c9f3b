#pragma once

// Dense row-major tensors of doubles with tape-based reverse-mode
// differentiation.
//
// A Tensor is a shared handle: copies alias the same storage. Every
// differentiable primitive appends one node to the calling thread's tape
// when any input requires a gradient and recording is enabled. backward()
// replays the tape once in reverse and clears it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace memts {

using Shape = std::vector<std::size_t>;
using Rng = std::mt19937_64;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Stabilizer added to the row variance before the square root in layer statistics.
inline constexpr double kLayerNormEps = 1e-5;

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient flows in
    bool requires_grad = false;
    std::uint64_t tape_generation = 0;  // 0: not produced on a tape
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
    static Tensor scalar(double v) { return Tensor(Shape{1}, v); }
    /// Matrix from nested rows; all rows must have equal length.
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor uniform(Shape shape, double bound, Rng& rng);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
    std::size_t rows() const { return impl_->shape.at(0); }
    std::size_t cols() const { return impl_->shape.size() > 1 ? impl_->shape[1] : 1; }
    std::size_t size() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> data() { return impl_->data; }
    std::vector<double> values() const { return impl_->data; }
    double operator()(std::size_t i, std::size_t j) const { return impl_->data[i * cols() + j]; }
    double& at(std::size_t i, std::size_t j) { return impl_->data[i * cols() + j]; }
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool on) { impl_->requires_grad = on; }
    bool has_grad() const { return !impl_->grad.empty(); }
    /// Gradient buffer; all zeros when nothing has flowed in yet.
    std::vector<double> grad() const;
    std::span<double> grad_buffer();
    void zero_grad() { impl_->grad.clear(); }

    /// Fresh storage with the same values and no tape linkage.
    Tensor detach() const;
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

struct TapeNode {
    std::string_view op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    // Reads output->grad and accumulates into the inputs that require grad.
    std::function<void(const TapeNode&)> backward;
};

class Tape {
public:
    /// The calling thread's tape.
    static Tape& current();

    void record(TapeNode node);
    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    std::uint64_t generation() const { return generation_; }
    const std::vector<TapeNode>& nodes() const { return nodes_; }
    /// Drops all nodes and starts a new generation; handles from the old one
    /// can no longer seed backward.
    void clear();

private:
    std::vector<TapeNode> nodes_;
    std::uint64_t generation_ = 1;
};

bool grad_enabled();

/// Disables tape recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

/// Replays the current tape from a scalar loss. Throws ContractError for a
/// non-scalar loss or when the loss is not on the live tape (for example a
/// second backward without a new forward).
void backward(const Tensor& loss);

namespace debug {
/// Test hook: negate the gradient contribution of every node recorded by
/// the named primitive. Empty name clears the fault.
void inject_gradient_sign_flip(std::string_view op);
}  // namespace debug

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Circular 1-D cross-correlation along rows. kernel is [w × d_in × d_out].
Tensor conv1d(const Tensor& x, const Tensor& kernel);

Tensor softmax_rows(const Tensor& x);
/// Row i attends to columns 0..i+offset only.
Tensor softmax_rows_causal(const Tensor& x, std::size_t offset = 0);

struct RowStats {
    Tensor mean;   // [rows × 1]
    Tensor sigma;  // [rows × 1], sqrt(var + eps)
};
RowStats layer_stats(const Tensor& h, double eps = kLayerNormEps);
/// (h - mean) / sigma per row, fused.
Tensor normalize_rows(const Tensor& h, double eps = kLayerNormEps);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
/// tanh approximation: 0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))
Tensor gelu(const Tensor& x);

enum class Pointwise { Sigmoid, Tanh, Gelu };
Tensor pointwise(Pointwise op, const Tensor& x);

/// x[m×n] + row[1×n] on every row.
Tensor add_row(const Tensor& x, const Tensor& row);
/// x[m×n] ⊙ row[1×n] on every row.
Tensor mul_row(const Tensor& x, const Tensor& row);
/// x[m×n] ⊙ col[m×1] on every column.
Tensor mul_col(const Tensor& x, const Tensor& col);
Tensor sub_col(const Tensor& x, const Tensor& col);
Tensor div_col(const Tensor& x, const Tensor& col);

Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count);
/// Column means as [1×n].
Tensor mean_rows(const Tensor& x);
/// row[1×n] stacked k times.
Tensor repeat_rows(const Tensor& row, std::size_t k);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// (1/n) Σ (a - b)²
Tensor mse(const Tensor& a, const Tensor& b);

/// Inverted dropout. rate must lie in [0, 1).
Tensor dropout_train(const Tensor& x, double rate, Rng& rng);

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

/// Max over coordinates of |analytic − central difference| / max(1, |analytic|)
/// for a scalar function of one tensor.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double h = 1e-5);

/// Same, over every coordinate of each leaf in params; f closes over them.
double grad_check(const std::function<Tensor()>& f, std::span<Tensor> params, double h = 1e-5);

}  // namespace memts
