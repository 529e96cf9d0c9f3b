#include "memts/memory.hpp"

#include <algorithm>
#include <cmath>

#include "memts/error.hpp"
#include "memts/io.hpp"

namespace memts {

namespace {

constexpr std::string_view kMagic = "MEMTS";

void require_finite(const Tensor& t, std::string_view what) {
    const auto d = t.data();
    const auto bad = std::find_if(d.begin(), d.end(), [](double v) { return !std::isfinite(v); });
    if (bad != d.end()) {
        const auto i = static_cast<std::size_t>(bad - d.begin());
        throw NumericError(std::string(what) + ": non-finite value " + std::to_string(*bad) + " at slot " +
                           std::to_string(i / t.cols()) + ", column " + std::to_string(i % t.cols()));
    }
}

}  // namespace

MemoryState init_memory(std::size_t n_slots, std::size_t d_rm) {
    if (n_slots == 0 || d_rm == 0) throw ConfigError("memory needs at least one slot and one column");
    MemoryState s;
    s.M = Tensor(Shape{n_slots, d_rm});
    for (std::size_t i = 0; i < std::min(n_slots, d_rm); ++i) s.M.at(i, i) = 1.0;
    return s;
}

Tensor summarize_feed(const Tensor& feed_embed, std::size_t n_slots) {
    return repeat_rows(mean_rows(feed_embed), n_slots);
}

Tensor gated_update(const Tensor& m_prev, const Tensor& candidate, const Gates& gates) {
    return add(mul(sigmoid(gates.forget), m_prev), mul(sigmoid(gates.input), candidate));
}

MemoryState update_memory(const MemoryState& state, const Tensor& candidate, const Gates& gates) {
    if (state.frozen) return state;
    Tensor next = gated_update(state.M, candidate, gates);
    require_finite(next, "memory update");
    MemoryState out = state;
    out.M = next.detach();
    ++out.update_count;
    return out;
}

MemoryUnit::MemoryUnit(std::size_t d_rm, std::size_t n_slots, std::size_t n_heads, Rng& rng)
    : heads(n_heads),
      w_q(d_rm, d_rm, false, rng),
      w_k(d_rm, d_rm, false, rng),
      w_v(d_rm, d_rm, false, rng),
      ffn_in(d_rm, d_rm, true, rng),
      ffn_out(d_rm, d_rm, true, rng),
      w_i(d_rm, d_rm, false, rng),
      u_i(d_rm, d_rm, false, rng),
      w_f(d_rm, d_rm, false, rng),
      u_f(d_rm, d_rm, false, rng),
      n_slots_(n_slots) {
    if (n_slots == 0) throw ConfigError("memory needs at least one slot");
    if (n_heads == 0 || d_rm % n_heads != 0)
        throw ConfigError("memory width " + std::to_string(d_rm) + " not divisible by " + std::to_string(n_heads) +
                          " heads");
}

Tensor MemoryUnit::attention(const Tensor& m, const Tensor& feed_embed, std::vector<Tensor>* weights) const {
    if (m.cols() != width() || feed_embed.cols() != width())
        throw DimensionError("memory attention: memory " + to_string(m.shape()) + ", feed " +
                             to_string(feed_embed.shape()) + ", width " + std::to_string(width()));
    const Tensor mf = concat_rows(m, feed_embed);
    return split_head_attention(w_q(m), w_k(mf), w_v(mf), heads, ForwardContext{}, false, 0, weights);
}

Tensor MemoryUnit::candidate(const Tensor& z, const Tensor& m) const {
    const Tensor zm = add(z, m);
    return add(ffn_out(gelu(ffn_in(zm))), zm);
}

Gates MemoryUnit::gates(const Tensor& feed_summary, const Tensor& m) const {
    const Tensor tm = tanh(m);
    return {add(w_i(feed_summary), u_i(tm)), add(w_f(feed_summary), u_f(tm))};
}

Tensor MemoryUnit::step(MemoryState& state, const Tensor& feed_embed, GateFeed gate_feed) const {
    if (state.M.rows() != n_slots_ || state.M.cols() != width())
        throw ConfigError("memory state " + to_string(state.M.shape()) + " does not match unit (" +
                          std::to_string(n_slots_) + " x " + std::to_string(width()) + ")");
    if (state.frozen) return state.M;
    const Tensor& m = state.M;
    const Tensor summary = summarize_feed(feed_embed, n_slots_);
    Tensor gate_input = summary;
    if (gate_feed == GateFeed::Previous)
        gate_input = state.previous_summary.defined() ? state.previous_summary : Tensor(summary.shape());
    const Tensor z = attention(m, feed_embed);
    Tensor m_bar = candidate(z, m);
    if (squash_candidate) m_bar = tanh(m_bar);
    Tensor m_t = gated_update(m, m_bar, gates(gate_input, m));
    require_finite(m_t, "memory update");
    state.M = m_t.detach();
    if (gate_feed == GateFeed::Previous) state.previous_summary = summary.detach();
    ++state.update_count;
    return m_t;
}

void MemoryUnit::collect(const std::string& prefix, NamedTensors& out) const {
    w_q.collect(prefix + ".w_q", out);
    w_k.collect(prefix + ".w_k", out);
    w_v.collect(prefix + ".w_v", out);
    ffn_in.collect(prefix + ".ffn_in", out);
    ffn_out.collect(prefix + ".ffn_out", out);
    w_i.collect(prefix + ".w_i", out);
    u_i.collect(prefix + ".u_i", out);
    w_f.collect(prefix + ".w_f", out);
    u_f.collect(prefix + ".u_f", out);
}

Mdcln::Mdcln(std::size_t d_rm, std::size_t d_model, Rng& rng)
    : gamma(Shape{1, d_model}, 1.0, true),
      beta(Shape{1, d_model}, 0.0, true),
      gamma_map(d_rm, d_model, true, rng),
      beta_map(d_rm, d_model, true, rng) {}

Tensor Mdcln::operator()(const Tensor& h, const Tensor& m) const {
    const Tensor pooled = m.rows() == 1 ? m : mean_rows(m);
    const Tensor gamma_t = add(gamma, gamma_map(pooled));
    const Tensor beta_t = add(beta, beta_map(pooled));
    return affine_rows(normalize_rows(h), gamma_t, beta_t);
}

Tensor Mdcln::plain(const Tensor& h) const { return affine_rows(normalize_rows(h), gamma, beta); }

void Mdcln::zero_maps() {
    gamma_map.zero();
    beta_map.zero();
}

void Mdcln::collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
    gamma_map.collect(prefix + ".gamma_map", out);
    beta_map.collect(prefix + ".beta_map", out);
}

std::string persist(const MemoryState& state) {
    ByteWriter w;
    w.bytes(kMagic);
    w.u32(kMemoryFormatVersion);
    w.u64(state.M.rows());
    w.u64(state.M.cols());
    w.u64(state.update_count);
    w.u8(state.frozen ? 1 : 0);
    w.f64s(state.M.data());
    return w.str();
}

MemoryState restore(std::string_view bytes) {
    ByteReader r(bytes);
    if (bytes.size() < kMagic.size() || r.bytes(kMagic.size()) != kMagic)
        throw PersistenceError("not a memory state (bad magic)");
    const std::uint32_t version = r.u32();
    if (version != kMemoryFormatVersion)
        throw PersistenceError("memory state version " + std::to_string(version) + ", expected " +
                               std::to_string(kMemoryFormatVersion));
    const std::uint64_t slots = r.u64();
    const std::uint64_t width = r.u64();
    MemoryState s;
    s.update_count = r.u64();
    const std::uint8_t frozen = r.u8();
    if (frozen > 1) throw PersistenceError("memory state: bad frozen flag");
    s.frozen = frozen == 1;
    if (slots == 0 || width == 0 || slots > (1u << 20) || width > (1u << 24))
        throw PersistenceError("memory state: implausible shape " + std::to_string(slots) + " x " +
                               std::to_string(width));
    s.M = Tensor(Shape{slots, width});
    r.f64s(s.M.data());
    if (r.remaining() != 0) throw PersistenceError("memory state: " + std::to_string(r.remaining()) + " trailing bytes");
    return s;
}

MemoryState restore(std::string_view bytes, std::size_t n_slots, std::size_t d_rm) {
    MemoryState s = restore(bytes);
    if (s.slots() != n_slots || s.width() != d_rm)
        throw PersistenceError("memory state shape " + std::to_string(s.slots()) + " x " + std::to_string(s.width()) +
                               " does not match model (" + std::to_string(n_slots) + " x " + std::to_string(d_rm) +
                               ")");
    return s;
}

}  // namespace memts
