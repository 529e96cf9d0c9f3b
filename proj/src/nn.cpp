#include "memts/nn.hpp"

#include <cmath>

#include "memts/error.hpp"

namespace memts {

Tensor ForwardContext::dropout(const Tensor& x) const {
    if (!training || dropout_rate <= 0.0) return x;
    if (rng == nullptr) throw ContractError("training forward without an rng");
    return dropout_train(x, dropout_rate, *rng);
}

Linear::Linear(std::size_t in, std::size_t out, bool with_bias, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = Tensor::uniform({in, out}, bound, rng);
    weight.set_requires_grad(true);
    if (with_bias) {
        bias = Tensor::uniform({1, out}, bound, rng);
        bias.set_requires_grad(true);
    }
}

Tensor Linear::operator()(const Tensor& x) const {
    Tensor y = matmul(x, weight);
    return bias.defined() ? add_row(y, bias) : y;
}

void Linear::zero() {
    std::fill(weight.data().begin(), weight.data().end(), 0.0);
    if (bias.defined()) std::fill(bias.data().begin(), bias.data().end(), 0.0);
}

void Linear::collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".weight", weight);
    if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

LayerNorm::LayerNorm(std::size_t d) : gamma(Shape{1, d}, 1.0, true), beta(Shape{1, d}, 0.0, true) {}

Tensor affine_rows(const Tensor& normalized, const Tensor& gamma, const Tensor& beta) {
    return add_row(mul_row(normalized, gamma), beta);
}

Tensor LayerNorm::operator()(const Tensor& h) const { return affine_rows(normalize_rows(h), gamma, beta); }

void LayerNorm::collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
}

FeedForward::FeedForward(std::size_t d, std::size_t hidden, Rng& rng)
    : in(d, hidden, true, rng), out(hidden, d, true, rng) {}

Tensor FeedForward::operator()(const Tensor& x, const ForwardContext& ctx) const {
    return out(ctx.dropout(gelu(in(x))));
}

void FeedForward::collect(const std::string& prefix, NamedTensors& out_params) const {
    in.collect(prefix + ".in", out_params);
    out.collect(prefix + ".out", out_params);
}

Tensor split_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                            const ForwardContext& ctx, bool causal, std::size_t offset,
                            std::vector<Tensor>* weights) {
    const std::size_t d = q.cols();
    if (k.cols() != d || v.cols() != d || k.rows() != v.rows())
        throw DimensionError("attention: q " + to_string(q.shape()) + ", k " + to_string(k.shape()) + ", v " +
                             to_string(v.shape()));
    if (n_heads == 0 || d % n_heads != 0)
        throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                          std::to_string(n_heads) + " heads");
    const std::size_t dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    if (weights) weights->clear();
    for (std::size_t h = 0; h < n_heads; ++h) {
        Tensor qh = n_heads == 1 ? q : slice_cols(q, h * dh, dh);
        Tensor kh = n_heads == 1 ? k : slice_cols(k, h * dh, dh);
        Tensor vh = n_heads == 1 ? v : slice_cols(v, h * dh, dh);
        Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt);
        Tensor a = causal ? softmax_rows_causal(scores, offset) : softmax_rows(scores);
        if (weights) weights->push_back(a);
        heads.push_back(matmul(ctx.dropout(a), vh));
    }
    return n_heads == 1 ? heads.front() : concat_cols(heads);
}

MultiHeadAttention::MultiHeadAttention(std::size_t d_model, std::size_t n_heads, Rng& rng)
    : heads(n_heads),
      w_q(d_model, d_model, false, rng),
      w_k(d_model, d_model, false, rng),
      w_v(d_model, d_model, false, rng),
      w_o(d_model, d_model, false, rng) {
    if (n_heads == 0 || d_model % n_heads != 0)
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by " + std::to_string(n_heads) +
                          " heads");
}

Tensor MultiHeadAttention::operator()(const Tensor& q_in, const Tensor& kv_in, const ForwardContext& ctx,
                                      bool causal, std::vector<Tensor>* weights) const {
    const std::size_t d = w_q.in_features();
    if (q_in.cols() != d || kv_in.cols() != d)
        throw DimensionError("attention input widths " + to_string(q_in.shape()) + " and " +
                             to_string(kv_in.shape()) + " do not match d_model " + std::to_string(d));
    Tensor ctx_rows = split_head_attention(w_q(q_in), w_k(kv_in), w_v(kv_in), heads, ctx, causal, 0, weights);
    return w_o(ctx_rows);
}

void MultiHeadAttention::collect(const std::string& prefix, NamedTensors& out) const {
    w_q.collect(prefix + ".w_q", out);
    w_k.collect(prefix + ".w_k", out);
    w_v.collect(prefix + ".w_v", out);
    w_o.collect(prefix + ".w_o", out);
}

}  // namespace memts
