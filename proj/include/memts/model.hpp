#pragma once

// Encoder-decoder forecaster with one-shot decoding and an optional memory
// unit conditioning the first normalization of each decoder layer.

#include <cstdint>
#include <string>
#include <vector>

#include "memts/data.hpp"
#include "memts/embedding.hpp"
#include "memts/memory.hpp"
#include "memts/nn.hpp"

namespace memts {

enum class MemoryOrder {
    UpdateThenDecode,
    DecodeThenUpdate,
};

struct ModelConfig {
    std::size_t features = 7;     // d_f
    std::size_t output_dim = 0;   // 0: same as features
    WindowSpec window;
    std::size_t d_model = 1024;
    std::size_t d_ff = 2048;
    std::size_t n_heads = 8;
    std::size_t enc_layers = 1;
    std::size_t dec_layers = 1;
    double base_dropout = 0.1;
    std::string activation = "gelu";
    std::size_t conv_width = 3;
    double delta = 1.0;

    bool use_memory = true;
    std::size_t mem_slots = 1;
    std::size_t mem_heads = 4;
    MemoryOrder memory_order = MemoryOrder::UpdateThenDecode;
    GateFeed gate_feed = GateFeed::Current;
    bool mem_squash = true;

    std::size_t outputs() const { return output_dim == 0 ? features : output_dim; }
    /// Memory width; the row concatenation with the embedded feed ties it to d_model.
    std::size_t d_rm() const { return d_model; }
    void validate() const;

    /// Defaults for a horizon, snapped up to the nearest of 24, 48, 168, 336,
    /// 720 (anything longer uses the 720 settings with its own pred_len).
    static ModelConfig for_horizon(std::size_t pred_len, std::size_t features);
    /// Training batch size paired with the horizon bucket.
    static std::size_t batch_size_for_horizon(std::size_t pred_len);
};

/// Decoder feed: the known tail rows followed by a zero placeholder for the
/// horizon, with calendar marks for every position.
struct DecoderFeed {
    Tensor values;                     // [(L_dec + L_p) × d_f]
    std::vector<CalendarMarks> marks;  // L_dec + L_p
};
DecoderFeed build_decoder_feed(const WindowSample& window, std::size_t pred_len);

class EncoderLayer {
public:
    EncoderLayer() = default;
    EncoderLayer(const ModelConfig& c, Rng& rng);
    Tensor operator()(const Tensor& x, const ForwardContext& ctx) const;
    void collect(const std::string& prefix, NamedTensors& out) const;

    MultiHeadAttention attn;
    LayerNorm norm1, norm2;
    FeedForward ffn;
};

class DecoderLayer {
public:
    DecoderLayer() = default;
    DecoderLayer(const ModelConfig& c, Rng& rng);
    /// memory undefined selects the plain normalization after self-attention.
    Tensor operator()(const Tensor& x, const Tensor& enc_out, const Tensor& memory, const ForwardContext& ctx) const;
    void collect(const std::string& prefix, NamedTensors& out) const;

    MultiHeadAttention self_attn, cross_attn;
    Mdcln norm1;  // maps are built either way so both variants share an init stream
    LayerNorm norm2, norm3;
    FeedForward ffn;
    bool conditioned = true;
};

struct Forecast {
    Tensor prediction;  // [L_p × outputs]
    Tensor memory;      // M_t used by the decoder (undefined without memory)
};

class Model {
public:
    Model() = default;
    Model(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }

    Tensor encode(const Tensor& enc_embed, const ForwardContext& ctx) const;
    Tensor decode(const Tensor& dec_embed, const Tensor& enc_out, const Tensor& memory,
                  const ForwardContext& ctx) const;
    /// Linear head on the last L_p rows.
    Tensor project_output(const Tensor& dec_out) const;

    /// One window end to end. With memory enabled and a state given, the
    /// state is stepped once (or read as-is when frozen).
    Forecast forward(const WindowSample& window, MemoryState* memory, const ForwardContext& ctx) const;

    /// Batch form: one shared memory step driven by the batch-mean embedded
    /// feed, then every window decoded against that M_t.
    std::vector<Forecast> forward_batch(const std::vector<WindowSample>& windows, MemoryState* memory,
                                        const ForwardContext& ctx) const;

    MemoryState initial_memory() const;

    /// Every trainable tensor with a stable dotted name, in construction order.
    NamedTensors parameters() const;

    DataEmbedding enc_embedding, dec_embedding;
    std::vector<EncoderLayer> encoder;
    std::vector<DecoderLayer> decoder;
    Linear head;
    MemoryUnit memory_unit;  // only populated when config.use_memory

private:
    ModelConfig config_;
};

}  // namespace memts
