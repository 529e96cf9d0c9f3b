#include "memts/embedding.hpp"

#include <cmath>

#include "memts/error.hpp"

namespace memts {

Tensor positional_encoding(std::size_t length, std::size_t d_model) {
    if (d_model == 0 || d_model % 2 != 0)
        throw ConfigError("positional encoding needs an even width, got " + std::to_string(d_model));
    Tensor pe(Shape{length, d_model});
    for (std::size_t i = 0; i < d_model / 2; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(2 * i) / static_cast<double>(d_model));
        for (std::size_t pos = 0; pos < length; ++pos) {
            const double angle = static_cast<double>(pos) * freq;
            pe.at(pos, 2 * i) = std::sin(angle);
            pe.at(pos, 2 * i + 1) = std::cos(angle);
        }
    }
    return pe;
}

DataEmbedding::DataEmbedding(std::size_t features, std::size_t d_model, Rng& rng, std::size_t conv_width,
                             double delta)
    : d_model_(d_model), delta_(delta) {
    if (!(delta >= 0.0)) throw ConfigError("embedding delta must be nonnegative");
    if (conv_width == 0) throw ConfigError("convolution width must be positive");
    const double bound = 1.0 / std::sqrt(static_cast<double>(conv_width * features));
    kernel = Tensor::uniform({conv_width, features, d_model}, bound, rng);
    kernel.set_requires_grad(true);
    for (std::size_t k = 0; k < tables_.size(); ++k) tables_[k] = positional_encoding(kCalendarCardinality[k], d_model);
}

Tensor DataEmbedding::context_vector(const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != kernel.dim(1))
        throw DimensionError("embedding expects " + std::to_string(kernel.dim(1)) + " features, got " +
                             to_string(x.shape()));
    return conv1d(x, kernel);
}

Tensor DataEmbedding::seasonal_embedding(const std::vector<CalendarMarks>& marks) const {
    Tensor se(Shape{marks.size(), d_model_});
    for (std::size_t r = 0; r < marks.size(); ++r) {
        for (std::size_t k = 0; k < 4; ++k) {
            const int m = marks[r][k];
            if (m < 0 || static_cast<std::size_t>(m) >= kCalendarCardinality[k])
                throw IngestionError("calendar mark " + std::to_string(m) + " out of range at position " +
                                     std::to_string(r));
            const auto row = tables_[k].data().subspan(static_cast<std::size_t>(m) * d_model_, d_model_);
            for (std::size_t j = 0; j < d_model_; ++j) se.at(r, j) += row[j];
        }
    }
    return se;
}

Tensor DataEmbedding::operator()(const Tensor& x, const std::vector<CalendarMarks>& marks,
                                 const ForwardContext& ctx) const {
    if (marks.size() != x.rows())
        throw DimensionError("embedding: " + std::to_string(marks.size()) + " marks for " +
                             std::to_string(x.rows()) + " rows");
    Tensor u = context_vector(x);
    if (delta_ != 1.0) u = scale(u, delta_);
    Tensor fixed = positional_encoding(x.rows(), d_model_);
    const Tensor se = seasonal_embedding(marks);
    auto f = fixed.data();
    const auto s = se.data();
    for (std::size_t i = 0; i < f.size(); ++i) f[i] += s[i];
    return ctx.dropout(add(u, fixed));
}

void DataEmbedding::collect(const std::string& prefix, NamedTensors& out) const {
    out.emplace_back(prefix + ".kernel", kernel);
}

}  // namespace memts
