#include "memts/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "memts/error.hpp"
#include "memts/io.hpp"

namespace memts {

void TrainSchedule::validate() const {
    if (!(theta_max > 0.0 && theta_max <= 0.5))
        throw ConfigError("train.theta_max must lie in (0, 0.5], got " + format_double(theta_max));
    if (!(gamma_decay >= 0.0)) throw ConfigError("train.gamma_decay must be nonnegative");
    if (cadence == 0) throw ConfigError("train.cadence must be positive");
    if (epochs == 0) throw ConfigError("train.epochs must be positive");
    if (patience == 0) throw ConfigError("train.patience must be positive");
    if (!(lr0 > 0.0)) throw ConfigError("train.lr0 must be positive");
    if (lr_halving_start_epoch == 0) throw ConfigError("train.lr_halving_start_epoch must be positive");
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (!(clip_norm >= 0.0)) throw ConfigError("train.clip_norm must be nonnegative");
}

double dropout_rate(std::size_t tick, const TrainSchedule& s) {
    const double t = static_cast<double>(tick);
    return std::min(s.theta_max, (1.0 - s.theta_max) * -std::expm1(-s.gamma_decay * t));
}

double learning_rate(std::size_t epoch, const TrainSchedule& s) {
    if (epoch < s.lr_halving_start_epoch) return s.lr0;
    return s.lr0 * std::ldexp(1.0, -static_cast<int>(epoch - s.lr_halving_start_epoch + 1));
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) { return mse(prediction, target); }

Adam::Adam(NamedTensors params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, p] : params_) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
    }
}

double Adam::clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (auto& [name, p] : params_)
        if (p.has_grad())
            for (double g : p.grad_buffer()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& [name, p] : params_)
            if (p.has_grad())
                for (double& g : p.grad_buffer()) g *= s;
    }
    return norm;
}

void Adam::step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i].second;
        if (!p.has_grad()) continue;
        auto w = p.data();
        const auto g = p.grad_buffer();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
        }
    }
    zero_grad();
}

void Adam::zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
}

bool EarlyStopping::update(double val_loss) {
    improved_ = val_loss < best_;
    if (improved_) {
        best_ = val_loss;
        best_epoch_ = epochs_;
        bad_ = 0;
    } else {
        ++bad_;
    }
    ++epochs_;
    return bad_ >= patience_;
}

namespace {

std::vector<std::vector<double>> snapshot(const NamedTensors& params) {
    std::vector<std::vector<double>> out;
    out.reserve(params.size());
    for (const auto& [name, p] : params) out.push_back(p.values());
    return out;
}

void restore_snapshot(NamedTensors& params, const std::vector<std::vector<double>>& values) {
    for (std::size_t i = 0; i < params.size(); ++i)
        std::copy(values[i].begin(), values[i].end(), params[i].second.data().begin());
}

Tensor window_loss(const Tensor& prediction, const Tensor& target, bool target_only, std::size_t target_index) {
    if (!target_only) return mse_loss(prediction, target);
    return mse_loss(slice_cols(prediction, target_index, 1), slice_cols(target, target_index, 1));
}

}  // namespace

FitResult fit(Model& model, MemoryState& memory, const SeriesTable& train, const SeriesTable& val,
              const TrainSchedule& schedule, std::uint64_t seed, const FitOptions& options) {
    schedule.validate();
    const ModelConfig& cfg = model.config();
    if (train.features() != cfg.features || val.features() != cfg.features)
        throw ConfigError("tables have " + std::to_string(train.features()) + " features, model expects " +
                          std::to_string(cfg.features));
    if (schedule.target_only_loss && cfg.outputs() != cfg.features)
        throw ConfigError("target-only loss needs the full multivariate head");
    const WindowStream windows = iter_windows(train, cfg.window);
    if (windows.size() == 0) throw ConfigError("training split too short for one window");
    if (count_windows(val.rows(), cfg.window) == 0) throw ConfigError("validation split too short for one window");

    MemoryState* mem = cfg.use_memory ? &memory : nullptr;
    NamedTensors params = model.parameters();
    FitResult result;
    result.optimizer = Adam(params);
    Adam& opt = result.optimizer;
    Rng rng(seed ^ 0x9E3779B97F4A7C15ull);

    std::vector<std::vector<double>> best_params = snapshot(params);
    MemoryState best_memory = memory;
    EarlyStopping stopper(schedule.patience);

    for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
        const double lr = learning_rate(epoch, schedule);
        double loss_sum = 0.0;
        std::size_t loss_count = 0;
        double rate = 0.0;
        for (std::size_t begin = 0; begin < windows.size(); begin += schedule.batch_size) {
            const std::size_t end = std::min(windows.size(), begin + schedule.batch_size);
            std::vector<WindowSample> batch;
            for (std::size_t i = begin; i < end; ++i) batch.push_back(windows[i]);

            rate = schedule.progressive_dropout ? dropout_rate(opt.steps() / schedule.cadence, schedule)
                                                : cfg.base_dropout;
            const ForwardContext ctx{true, rate, &rng};
            const auto forecasts = model.forward_batch(batch, mem, ctx);
            Tensor loss = window_loss(forecasts[0].prediction, batch[0].target, schedule.target_only_loss,
                                      train.target_index);
            for (std::size_t i = 1; i < batch.size(); ++i)
                loss = add(loss, window_loss(forecasts[i].prediction, batch[i].target, schedule.target_only_loss,
                                             train.target_index));
            if (batch.size() > 1) loss = scale(loss, 1.0 / static_cast<double>(batch.size()));
            const double value = loss.item();
            if (!std::isfinite(value)) {
                Tape::current().clear();
                throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                                   std::to_string(opt.steps()) + " (lr " + format_double(lr) + ", dropout " +
                                   format_double(rate) + ")");
            }
            backward(loss);
            opt.clip_grad_norm(schedule.clip_norm);
            opt.step(lr);
            result.dropout_trajectory.push_back(rate);
            loss_sum += value * static_cast<double>(batch.size());
            loss_count += batch.size();
        }

        MemoryState frozen = memory;
        frozen.frozen = true;
        const EvalResult v = evaluate(model, mem ? &frozen : nullptr, val);

        EpochRecord rec{epoch, loss_sum / static_cast<double>(loss_count), v.mse, lr, rate, opt.steps()};
        result.history.push_back(rec);
        if (options.on_epoch) options.on_epoch(rec);

        const bool stop = stopper.update(v.mse);
        if (stopper.improved()) {
            best_params = snapshot(params);
            best_memory = memory;
        }
        if (stop) {
            result.stopped_early = epoch + 1 < schedule.epochs;
            break;
        }
    }

    restore_snapshot(params, best_params);
    memory = best_memory;
    result.best_epoch = stopper.best_epoch();
    result.best_val_mse = stopper.best();
    return result;
}

std::string history_csv(const std::vector<EpochRecord>& history) {
    std::ostringstream os;
    os << "epoch,train_mse,val_mse,lr,dropout_rate\n";
    for (const auto& r : history)
        os << r.epoch << ',' << format_double(r.train_mse) << ',' << format_double(r.val_mse) << ','
           << format_double(r.lr) << ',' << format_double(r.dropout_rate) << '\n';
    return os.str();
}

namespace {

void accumulate(EvalResult& r, std::span<const double> pred, std::span<const double> truth) {
    double se = 0.0, ae = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double e = pred[i] - truth[i];
        se += e * e;
        ae += std::abs(e);
    }
    const double n = static_cast<double>(pred.size());
    r.window_mse.push_back(se / n);
    r.window_mae.push_back(ae / n);
}

void finish(EvalResult& r) {
    r.windows = r.window_mse.size();
    if (r.windows == 0) return;
    double se = 0.0, ae = 0.0;
    for (std::size_t i = 0; i < r.windows; ++i) {
        se += r.window_mse[i];
        ae += r.window_mae[i];
    }
    r.mse = se / static_cast<double>(r.windows);
    r.mae = ae / static_cast<double>(r.windows);
}

}  // namespace

EvalResult evaluate(const Model& model, MemoryState* memory, const SeriesTable& table) {
    NoGradGuard no_grad;
    const ModelConfig& cfg = model.config();
    if (table.features() != cfg.features)
        throw ConfigError("table has " + std::to_string(table.features()) + " features, model expects " +
                          std::to_string(cfg.features));
    EvalResult r;
    const ForwardContext ctx{};
    for (const WindowSample& w : iter_windows(table, cfg.window)) {
        const Forecast f = model.forward(w, cfg.use_memory ? memory : nullptr, ctx);
        if (f.prediction.cols() != w.target.cols())
            throw ConfigError("evaluation needs the multivariate head (output_dim == features)");
        accumulate(r, f.prediction.data(), w.target.data());
    }
    finish(r);
    return r;
}

EvalResult evaluate_baseline(Baseline kind, const SeriesTable& table, const WindowSpec& spec) {
    EvalResult r;
    for (const WindowSample& w : iter_windows(table, spec)) {
        Tensor pred(w.target.shape());
        if (kind == Baseline::Persistence) {
            const std::size_t last = w.enc_input.rows() - 1;
            for (std::size_t i = 0; i < pred.rows(); ++i)
                for (std::size_t j = 0; j < pred.cols(); ++j) pred.at(i, j) = w.enc_input(last, j);
        }
        accumulate(r, pred.data(), w.target.data());
    }
    finish(r);
    return r;
}

}  // namespace memts
