#pragma once

// Layer building blocks shared by the backbone and the memory unit.

#include <string>
#include <utility>
#include <vector>

#include "memts/tensor.hpp"

namespace memts {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

/// Per-forward switches: dropout only fires when training with a positive rate.
struct ForwardContext {
    bool training = false;
    double dropout_rate = 0.0;
    Rng* rng = nullptr;

    Tensor dropout(const Tensor& x) const;
};

/// x·W (+ b). Weight is [in × out], bias [1 × out].
class Linear {
public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out, bool bias, Rng& rng);

    Tensor operator()(const Tensor& x) const;
    void zero();
    void collect(const std::string& prefix, NamedTensors& out) const;

    std::size_t in_features() const { return weight.rows(); }
    std::size_t out_features() const { return weight.cols(); }

    Tensor weight;
    Tensor bias;  // undefined when constructed without bias
};

/// gamma ⊙ normalize_rows(h) + beta
class LayerNorm {
public:
    LayerNorm() = default;
    explicit LayerNorm(std::size_t d);

    Tensor operator()(const Tensor& h) const;
    void collect(const std::string& prefix, NamedTensors& out) const;

    Tensor gamma;  // [1 × d]
    Tensor beta;   // [1 × d]
};

/// Affine modulation of already normalized rows. Shared by LayerNorm and the
/// memory-conditioned variant so both paths run the same operation sequence.
Tensor affine_rows(const Tensor& normalized, const Tensor& gamma, const Tensor& beta);

/// Linear → GELU → dropout → Linear
class FeedForward {
public:
    FeedForward() = default;
    FeedForward(std::size_t d, std::size_t hidden, Rng& rng);

    Tensor operator()(const Tensor& x, const ForwardContext& ctx) const;
    void collect(const std::string& prefix, NamedTensors& out) const;

    Linear in;
    Linear out;
};

/// Scaled dot-product attention with the feature axis split into n_heads
/// blocks. Q is [L_q × d], K and V are [L_k × d]. With causal set, query i
/// sees keys 0..i+offset. Post-softmax weights are dropped out at the context
/// rate and, when requested, returned per head.
Tensor split_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                            const ForwardContext& ctx, bool causal = false, std::size_t offset = 0,
                            std::vector<Tensor>* weights = nullptr);

class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(std::size_t d_model, std::size_t n_heads, Rng& rng);

    Tensor operator()(const Tensor& q_in, const Tensor& kv_in, const ForwardContext& ctx, bool causal = false,
                      std::vector<Tensor>* weights = nullptr) const;
    void collect(const std::string& prefix, NamedTensors& out) const;

    std::size_t heads = 1;
    Linear w_q, w_k, w_v, w_o;
};

}  // namespace memts
