#pragma once

#include <array>
#include <vector>

#include "memts/data.hpp"
#include "memts/nn.hpp"
#include "memts/tensor.hpp"

namespace memts {

/// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same). d must be even.
Tensor positional_encoding(std::size_t length, std::size_t d_model);

/// Table sizes for month (0 is padding), day, weekday and hour.
inline constexpr std::array<std::size_t, 4> kCalendarCardinality{13, 32, 7, 24};

class DataEmbedding {
public:
    DataEmbedding() = default;
    DataEmbedding(std::size_t features, std::size_t d_model, Rng& rng, std::size_t conv_width = 3,
                  double delta = 1.0);

    /// Circular convolution of the raw rows up to d_model channels.
    Tensor context_vector(const Tensor& x) const;
    /// Sum of the four calendar table rows per position; constant w.r.t. parameters.
    Tensor seasonal_embedding(const std::vector<CalendarMarks>& marks) const;
    /// delta·context + PE + seasonal, then dropout when ctx is training.
    Tensor operator()(const Tensor& x, const std::vector<CalendarMarks>& marks, const ForwardContext& ctx) const;

    void collect(const std::string& prefix, NamedTensors& out) const;

    std::size_t d_model() const { return d_model_; }
    double delta() const { return delta_; }
    const Tensor& seasonal_table(std::size_t level) const { return tables_.at(level); }

    Tensor kernel;  // [w × d_f × d_model]

private:
    std::size_t d_model_ = 0;
    double delta_ = 1.0;
    std::array<Tensor, 4> tables_;
};

}  // namespace memts
