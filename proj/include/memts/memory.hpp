#pragma once

// Task-level relational memory: a small matrix of slots refreshed once per
// prediction window and read by the decoder through conditional layer norm.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "memts/nn.hpp"
#include "memts/tensor.hpp"

namespace memts {

struct MemoryState {
    Tensor M;  // [n_slots × d_rm], never tape-linked
    std::uint64_t update_count = 0;
    bool frozen = false;
    // Only used by the previous-window gate variant; not persisted.
    Tensor previous_summary;

    std::size_t slots() const { return M.rows(); }
    std::size_t width() const { return M.cols(); }
};

/// Slot s is one-hot at column s (zero rows past d_rm).
MemoryState init_memory(std::size_t n_slots, std::size_t d_rm);

/// Column mean of the embedded feed, stacked n_slots times.
Tensor summarize_feed(const Tensor& feed_embed, std::size_t n_slots);

struct Gates {
    Tensor input;   // pre-sigmoid
    Tensor forget;  // pre-sigmoid
};

/// sigmoid(forget) ⊙ M_prev + sigmoid(input) ⊙ candidate
Tensor gated_update(const Tensor& m_prev, const Tensor& candidate, const Gates& gates);

/// gated_update applied to a state: returns the state unchanged when frozen,
/// otherwise the new matrix with update_count + 1. Non-finite entries raise
/// NumericError and leave nothing modified.
MemoryState update_memory(const MemoryState& state, const Tensor& candidate, const Gates& gates);

enum class GateFeed {
    Current,   // gates read the same window's feed as the attention
    Previous,  // gates read the preceding window's summary
};

class MemoryUnit {
public:
    MemoryUnit() = default;
    MemoryUnit(std::size_t d_rm, std::size_t n_slots, std::size_t n_heads, Rng& rng);

    /// Q from M, K and V from [M; feed]. Z has the shape of M.
    Tensor attention(const Tensor& m, const Tensor& feed_embed, std::vector<Tensor>* weights = nullptr) const;
    /// ffn(Z + M) + Z + M
    Tensor candidate(const Tensor& z, const Tensor& m) const;
    Gates gates(const Tensor& feed_summary, const Tensor& m) const;

    /// One refresh for one prediction. Returns the tape-linked M_t (or the
    /// stored matrix when frozen) and stores a detached copy in state. With
    /// squash_candidate the candidate passes through tanh before gating;
    /// without it |M| grows geometrically under repeated steps.
    Tensor step(MemoryState& state, const Tensor& feed_embed, GateFeed gate_feed = GateFeed::Current) const;

    void collect(const std::string& prefix, NamedTensors& out) const;

    std::size_t slots() const { return n_slots_; }
    std::size_t width() const { return w_q.in_features(); }

    std::size_t heads = 1;
    bool squash_candidate = true;
    Linear w_q, w_k, w_v;
    Linear ffn_in, ffn_out;
    Linear w_i, u_i, w_f, u_f;

private:
    std::size_t n_slots_ = 1;
};

/// Conditional layer norm: (gamma + f_g(m̄)) ⊙ (h − μ)/σ + (beta + f_b(m̄)) with
/// m̄ the slot mean of M_t.
class Mdcln {
public:
    Mdcln() = default;
    Mdcln(std::size_t d_rm, std::size_t d_model, Rng& rng);

    Tensor operator()(const Tensor& h, const Tensor& m) const;
    /// The unconditioned form with the same gamma and beta.
    Tensor plain(const Tensor& h) const;
    void zero_maps();
    void collect(const std::string& prefix, NamedTensors& out) const;

    Tensor gamma;  // [1 × d_model]
    Tensor beta;   // [1 × d_model]
    Linear gamma_map;
    Linear beta_map;
};

inline constexpr std::uint32_t kMemoryFormatVersion = 1;

/// "MEMTS", u32 version, u64 slots, u64 width, u64 update_count, u8 frozen,
/// then the matrix rows as little-endian f64.
std::string persist(const MemoryState& state);
MemoryState restore(std::string_view bytes);
/// As above, also rejecting a stored shape other than (n_slots, d_rm).
MemoryState restore(std::string_view bytes, std::size_t n_slots, std::size_t d_rm);

}  // namespace memts
