#include "memts/model.hpp"

#include <algorithm>
#include <array>

#include "memts/error.hpp"

namespace memts {

namespace {

struct HorizonBucket {
    std::size_t pred_len;
    std::size_t encoder_len;
    std::size_t decoder_len;
    std::size_t enc_layers;
    std::size_t batch;
};

constexpr std::array<HorizonBucket, 5> kBuckets{{
    {24, 48, 48, 1, 32},
    {48, 96, 48, 1, 32},
    {168, 168, 168, 2, 8},
    {336, 168, 168, 2, 8},
    {720, 336, 336, 2, 4},
}};

const HorizonBucket& bucket_for(std::size_t pred_len) {
    for (const auto& b : kBuckets)
        if (pred_len <= b.pred_len) return b;
    return kBuckets.back();
}

}  // namespace

void ModelConfig::validate() const {
    window.validate();
    if (features == 0) throw ConfigError("model.features must be positive");
    if (d_model == 0 || d_ff == 0) throw ConfigError("model.d_model and model.d_ff must be positive");
    if (d_model % 2 != 0) throw ConfigError("model.d_model must be even for the positional encoding");
    if (n_heads == 0 || d_model % n_heads != 0)
        throw ConfigError("model.d_model (" + std::to_string(d_model) + ") not divisible by model.n_heads (" +
                          std::to_string(n_heads) + ")");
    if (enc_layers == 0 || dec_layers == 0) throw ConfigError("model needs at least one encoder and decoder layer");
    if (!(base_dropout >= 0.0 && base_dropout < 1.0)) throw ConfigError("model.base_dropout must lie in [0, 1)");
    if (activation != "gelu") throw ConfigError("model.activation '" + activation + "' unsupported (only gelu)");
    if (conv_width == 0 || conv_width > window.decoder_len || conv_width > window.encoder_len)
        throw ConfigError("model.conv_width must lie in [1, min(encoder_len, decoder_len)]");
    if (!(delta >= 0.0)) throw ConfigError("model.delta must be nonnegative");
    if (use_memory) {
        if (mem_slots == 0) throw ConfigError("memory.slots must be positive");
        if (mem_heads == 0 || d_rm() % mem_heads != 0)
            throw ConfigError("memory width (" + std::to_string(d_rm()) + ") not divisible by memory.heads (" +
                              std::to_string(mem_heads) + ")");
    }
}

ModelConfig ModelConfig::for_horizon(std::size_t pred_len, std::size_t features) {
    const HorizonBucket& b = bucket_for(pred_len);
    ModelConfig c;
    c.features = features;
    c.window.pred_len = pred_len;
    c.window.encoder_len = b.encoder_len;
    c.window.decoder_len = b.decoder_len;
    c.enc_layers = b.enc_layers;
    return c;
}

std::size_t ModelConfig::batch_size_for_horizon(std::size_t pred_len) { return bucket_for(pred_len).batch; }

DecoderFeed build_decoder_feed(const WindowSample& window, std::size_t pred_len) {
    const std::size_t l_dec = window.dec_input.rows();
    const std::size_t d_f = window.dec_input.cols();
    if (window.dec_marks.size() != l_dec + pred_len)
        throw DimensionError("decoder marks cover " + std::to_string(window.dec_marks.size()) + " positions, need " +
                             std::to_string(l_dec + pred_len));
    DecoderFeed feed;
    feed.values = Tensor(Shape{l_dec + pred_len, d_f});
    const auto src = window.dec_input.data();
    std::copy(src.begin(), src.end(), feed.values.data().begin());
    feed.marks = window.dec_marks;
    return feed;
}

EncoderLayer::EncoderLayer(const ModelConfig& c, Rng& rng)
    : attn(c.d_model, c.n_heads, rng), norm1(c.d_model), norm2(c.d_model), ffn(c.d_model, c.d_ff, rng) {}

Tensor EncoderLayer::operator()(const Tensor& x, const ForwardContext& ctx) const {
    Tensor h = norm1(add(x, ctx.dropout(attn(x, x, ctx))));
    return norm2(add(h, ctx.dropout(ffn(h, ctx))));
}

void EncoderLayer::collect(const std::string& prefix, NamedTensors& out) const {
    attn.collect(prefix + ".attn", out);
    norm1.collect(prefix + ".norm1", out);
    ffn.collect(prefix + ".ffn", out);
    norm2.collect(prefix + ".norm2", out);
}

DecoderLayer::DecoderLayer(const ModelConfig& c, Rng& rng)
    : self_attn(c.d_model, c.n_heads, rng),
      cross_attn(c.d_model, c.n_heads, rng),
      norm1(c.d_rm(), c.d_model, rng),
      norm2(c.d_model),
      norm3(c.d_model),
      ffn(c.d_model, c.d_ff, rng),
      conditioned(c.use_memory) {}

Tensor DecoderLayer::operator()(const Tensor& x, const Tensor& enc_out, const Tensor& memory,
                                const ForwardContext& ctx) const {
    Tensor h = add(x, ctx.dropout(self_attn(x, x, ctx, true)));
    h = memory.defined() ? norm1(h, memory) : norm1.plain(h);
    h = norm2(add(h, ctx.dropout(cross_attn(h, enc_out, ctx))));
    return norm3(add(h, ctx.dropout(ffn(h, ctx))));
}

void DecoderLayer::collect(const std::string& prefix, NamedTensors& out) const {
    self_attn.collect(prefix + ".self_attn", out);
    if (conditioned) {
        norm1.collect(prefix + ".norm1", out);
    } else {
        out.emplace_back(prefix + ".norm1.gamma", norm1.gamma);
        out.emplace_back(prefix + ".norm1.beta", norm1.beta);
    }
    cross_attn.collect(prefix + ".cross_attn", out);
    norm2.collect(prefix + ".norm2", out);
    ffn.collect(prefix + ".ffn", out);
    norm3.collect(prefix + ".norm3", out);
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    enc_embedding = DataEmbedding(config_.features, config_.d_model, rng, config_.conv_width, config_.delta);
    dec_embedding = DataEmbedding(config_.features, config_.d_model, rng, config_.conv_width, config_.delta);
    for (std::size_t i = 0; i < config_.enc_layers; ++i) encoder.emplace_back(config_, rng);
    for (std::size_t i = 0; i < config_.dec_layers; ++i) decoder.emplace_back(config_, rng);
    head = Linear(config_.d_model, config_.outputs(), true, rng);
    if (config_.use_memory) {
        memory_unit = MemoryUnit(config_.d_rm(), config_.mem_slots, config_.mem_heads, rng);
        memory_unit.squash_candidate = config_.mem_squash;
    }
}

Tensor Model::encode(const Tensor& enc_embed, const ForwardContext& ctx) const {
    Tensor h = enc_embed;
    for (const auto& layer : encoder) h = layer(h, ctx);
    return h;
}

Tensor Model::decode(const Tensor& dec_embed, const Tensor& enc_out, const Tensor& memory,
                     const ForwardContext& ctx) const {
    if (memory.defined() && memory.cols() != config_.d_model)
        throw ConfigError("memory width " + std::to_string(memory.cols()) + " differs from d_model " +
                          std::to_string(config_.d_model));
    Tensor h = dec_embed;
    for (const auto& layer : decoder) h = layer(h, enc_out, memory, ctx);
    return h;
}

Tensor Model::project_output(const Tensor& dec_out) const {
    const std::size_t l_p = config_.window.pred_len;
    if (dec_out.rows() < l_p)
        throw DimensionError("decoder output has " + std::to_string(dec_out.rows()) + " rows, horizon is " +
                             std::to_string(l_p));
    return head(slice_rows(dec_out, dec_out.rows() - l_p, l_p));
}

Forecast Model::forward(const WindowSample& window, MemoryState* memory, const ForwardContext& ctx) const {
    return std::move(forward_batch({window}, memory, ctx).front());
}

std::vector<Forecast> Model::forward_batch(const std::vector<WindowSample>& windows, MemoryState* memory,
                                           const ForwardContext& ctx) const {
    if (windows.empty()) return {};
    const std::size_t l_p = config_.window.pred_len;
    std::vector<Tensor> enc_out, dec_embed;
    for (const auto& w : windows) {
        if (w.enc_input.cols() != config_.features)
            throw ConfigError("window has " + std::to_string(w.enc_input.cols()) + " features, model expects " +
                              std::to_string(config_.features));
        enc_out.push_back(encode(enc_embedding(w.enc_input, w.enc_marks, ctx), ctx));
        const DecoderFeed feed = build_decoder_feed(w, l_p);
        dec_embed.push_back(dec_embedding(feed.values, feed.marks, ctx));
    }

    Tensor m_t;
    Tensor pending_feed;
    if (config_.use_memory && memory != nullptr) {
        Tensor feed = dec_embed.front();
        if (windows.size() > 1) {
            for (std::size_t i = 1; i < dec_embed.size(); ++i) feed = add(feed, dec_embed[i]);
            feed = scale(feed, 1.0 / static_cast<double>(windows.size()));
        }
        if (config_.memory_order == MemoryOrder::UpdateThenDecode) {
            m_t = memory_unit.step(*memory, feed, config_.gate_feed);
        } else {
            m_t = memory->M;
            pending_feed = feed;
        }
    }

    std::vector<Forecast> out;
    out.reserve(windows.size());
    for (std::size_t i = 0; i < windows.size(); ++i)
        out.push_back({project_output(decode(dec_embed[i], enc_out[i], m_t, ctx)), m_t});

    if (pending_feed.defined()) {
        NoGradGuard no_grad;
        memory_unit.step(*memory, pending_feed.detach(), config_.gate_feed);
    }
    return out;
}

MemoryState Model::initial_memory() const { return init_memory(config_.mem_slots, config_.d_rm()); }

NamedTensors Model::parameters() const {
    NamedTensors out;
    enc_embedding.collect("enc_embedding", out);
    dec_embedding.collect("dec_embedding", out);
    for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].collect("encoder." + std::to_string(i), out);
    for (std::size_t i = 0; i < decoder.size(); ++i) decoder[i].collect("decoder." + std::to_string(i), out);
    head.collect("head", out);
    if (config_.use_memory) memory_unit.collect("memory", out);
    return out;
}

}  // namespace memts
