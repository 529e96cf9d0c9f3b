#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "memts/data.hpp"
#include "memts/memory.hpp"
#include "memts/model.hpp"

namespace memts {

struct TrainSchedule {
    double theta_max = 0.1;
    double gamma_decay = 0.01;
    std::size_t cadence = 100;  // optimizer steps per tick
    std::size_t epochs = 6;
    std::size_t patience = 3;
    double lr0 = 1e-4;
    std::size_t lr_halving_start_epoch = 2;
    std::size_t batch_size = 1;
    double clip_norm = 5.0;     // 0 disables clipping
    bool progressive_dropout = true;  // false: constant model base_dropout
    bool target_only_loss = false;

    void validate() const;
};

/// min(theta_max, (1 − theta_max)(1 − e^(−gamma·t)))
double dropout_rate(std::size_t tick, const TrainSchedule& schedule);
/// lr0 up to the halving start epoch, then halved once per epoch.
double learning_rate(std::size_t epoch, const TrainSchedule& schedule);

Tensor mse_loss(const Tensor& prediction, const Tensor& target);

class Adam {
public:
    Adam() = default;
    explicit Adam(NamedTensors params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    /// Scales all gradients so their global L2 norm is at most max_norm;
    /// returns the norm before scaling.
    double clip_grad_norm(double max_norm);
    /// One bias-corrected update, then clears the gradients.
    void step(double lr);
    void zero_grad();

    std::size_t steps() const { return t_; }
    const NamedTensors& params() const { return params_; }
    std::vector<std::vector<double>>& first_moments() { return m_; }
    std::vector<std::vector<double>>& second_moments() { return v_; }
    void set_steps(std::size_t t) { t_ = t; }

private:
    NamedTensors params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::size_t t_ = 0;
};

/// Patience counter over validation losses; only a strict improvement resets it.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {}
    /// Records one epoch's loss; true when training should stop.
    bool update(double val_loss);
    bool improved() const { return improved_; }
    double best() const { return best_; }
    std::size_t best_epoch() const { return best_epoch_; }

private:
    std::size_t patience_;
    std::size_t epochs_ = 0;
    std::size_t bad_ = 0;
    std::size_t best_epoch_ = 0;
    double best_ = std::numeric_limits<double>::infinity();
    bool improved_ = false;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double train_mse = 0.0;
    double val_mse = 0.0;
    double lr = 0.0;
    double dropout_rate = 0.0;  // rate in force at the epoch's last step
    std::size_t steps = 0;      // cumulative optimizer steps
};

struct FitResult {
    std::vector<EpochRecord> history;
    std::vector<double> dropout_trajectory;  // one entry per optimizer step
    std::size_t best_epoch = 0;
    double best_val_mse = 0.0;
    bool stopped_early = false;
    Adam optimizer;
};

struct FitOptions {
    std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains over chronological windows of the normalized train table, steps
/// the task memory once per batch, validates with memory frozen, stops
/// early, and restores the best epoch's parameters and memory.
FitResult fit(Model& model, MemoryState& memory, const SeriesTable& train, const SeriesTable& val,
              const TrainSchedule& schedule, std::uint64_t seed, const FitOptions& options = {});

/// epoch,train_mse,val_mse,lr,dropout_rate
std::string history_csv(const std::vector<EpochRecord>& history);

struct EvalResult {
    double mse = 0.0;
    double mae = 0.0;
    std::size_t windows = 0;
    std::vector<double> window_mse;
    std::vector<double> window_mae;
};

/// Metrics over every window in normalized units. The memory is stepped per
/// window in order unless frozen; pass nullptr to run without memory.
EvalResult evaluate(const Model& model, MemoryState* memory, const SeriesTable& table);

enum class Baseline {
    Persistence,  // repeat the last observed row
    Mean,         // predict zero, the train mean after normalization
};
EvalResult evaluate_baseline(Baseline kind, const SeriesTable& table, const WindowSpec& spec);

}  // namespace memts
