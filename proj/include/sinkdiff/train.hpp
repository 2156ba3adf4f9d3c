#pragma once

// AdamW with decoupled weight decay, warmup + cosine learning-rate schedule,
// and a single training step over a batch of sequences.

#include "sinkdiff/corpus.hpp"
#include "sinkdiff/diffusion.hpp"
#include "sinkdiff/errors.hpp"
#include "sinkdiff/nn.hpp"
#include "sinkdiff/random.hpp"
#include "sinkdiff/sink.hpp"
#include "sinkdiff/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

namespace sinkdiff {

struct OptimConfig {
    double peak_lr = 1e-4;
    double min_lr = 1e-5;
    double warmup_fraction = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double weight_decay = 0.1;
    double eps = 1e-8;
    double grad_clip = 1.0; // global-norm clip; <= 0 disables

    void validate() const {
        if (peak_lr < 0.0 || min_lr < 0.0) {
            throw ConfigError("train: learning rates must be non-negative");
        }
        if (warmup_fraction < 0.0 || warmup_fraction > 1.0) {
            throw ConfigError("train.warmup_fraction must lie in [0, 1]");
        }
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
            throw ConfigError("train: beta1 and beta2 must lie in [0, 1)");
        }
        if (weight_decay < 0.0 || eps <= 0.0) {
            throw ConfigError("train: weight_decay must be >= 0 and eps > 0");
        }
    }

    bool operator==(const OptimConfig&) const = default;
};

inline std::size_t warmup_steps(std::size_t total_steps, const OptimConfig& cfg) {
    return static_cast<std::size_t>(std::ceil(cfg.warmup_fraction * static_cast<double>(total_steps) - 1e-9));
}

/// Linear warmup from 0 to peak over the warmup steps, then cosine decay to min_lr at total_steps.
inline double lr_at(std::size_t step, std::size_t total_steps, const OptimConfig& cfg) {
    step = std::min(step, total_steps);
    const std::size_t warm = warmup_steps(total_steps, cfg);
    if (step < warm) {
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warm);
    }
    if (total_steps == warm) {
        return cfg.peak_lr;
    }
    const double progress = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
    return cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <class T>
struct OptimState {
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::uint64_t step = 0;
};

template <class T>
class AdamW {
public:
    AdamW() = default;

    AdamW(OptimConfig cfg, const std::vector<NamedParameter<T>>& params) : cfg_(cfg) {
        cfg_.validate();
        for (const auto& p : params) {
            state_.m.emplace_back(p.tensor.size(), T(0));
            state_.v.emplace_back(p.tensor.size(), T(0));
        }
    }

    const OptimConfig& config() const noexcept { return cfg_; }
    OptimState<T>& state() noexcept { return state_; }
    const OptimState<T>& state() const noexcept { return state_; }

    /// Global L2 norm of all gradients (missing gradients count as zero).
    static double grad_norm(const std::vector<NamedParameter<T>>& params) {
        double ss = 0.0;
        for (const auto& p : params) {
            for (T g : p.tensor.grad()) {
                ss += static_cast<double>(g) * g;
            }
        }
        return std::sqrt(ss);
    }

    /// Clips to cfg.grad_clip, then applies one AdamW update at `lr`.
    /// Returns the pre-clip gradient norm.
    double step(const std::vector<NamedParameter<T>>& params, double lr) {
        if (params.size() != state_.m.size()) {
            throw ConsistencyError("optimizer state does not match parameter list");
        }
        const double norm = grad_norm(params);
        const double clip = (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;
        ++state_.step;
        const double t = static_cast<double>(state_.step);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t);
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto tensor = params[k].tensor;
            auto data = tensor.mutable_data();
            auto grad = tensor.grad();
            auto& m = state_.m[k];
            auto& v = state_.v[k];
            if (m.size() != data.size()) {
                throw ConsistencyError("optimizer moment shape mismatch for " + params[k].name);
            }
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double g = grad.empty() ? 0.0 : static_cast<double>(grad[i]) * clip;
                const double mi = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                const double vi = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                m[i] = static_cast<T>(mi);
                v[i] = static_cast<T>(vi);
                const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
                const double p = data[i];
                data[i] = static_cast<T>(p - lr * (update + cfg_.weight_decay * p));
            }
        }
        return norm;
    }

private:
    OptimConfig cfg_;
    OptimState<T> state_;
};

struct StepMetrics {
    std::size_t step = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
    double masked_fraction = 0.0;
};

/// One optimization step: per-sequence t ~ U{1..T}, corrupt, augment,
/// forward, masked loss averaged over the batch, backward, clipped AdamW.
/// `step` is 1-based and indexes the learning-rate schedule.
template <class T>
StepMetrics train_step(BasicModel<T>& model, const Batch& batch, const NoiseSchedule& schedule, AdamW<T>& optim,
                       std::size_t step, std::size_t total_steps, std::uint64_t step_seed) {
    const auto& cfg = model.config();
    const auto params = model.parameters();
    StepMetrics metrics;
    metrics.step = step;

    BasicTape<T> tape;
    BasicTensor<T> loss;
    std::size_t masked = 0, positions = 0;
    {
        BasicTapeScope<T> scope(tape);
        std::vector<BasicTensor<T>> terms;
        for (std::size_t r = 0; r < batch.rows(); ++r) {
            const auto x0 = batch.row(r);
            if (x0.size() == 0) {
                continue;
            }
            std::mt19937_64 trng(mix_seed(step_seed, 2 * r));
            const std::size_t t = 1 + static_cast<std::size_t>(uniform_below(trng, schedule.steps()));
            const auto xt = corrupt(x0, t, schedule, mix_seed(step_seed, 2 * r + 1), cfg.mask_id);
            const auto aug = augment(xt, cfg.sink, cfg.sink_id);
            const auto logits = strip(forward_augmented(model, aug), aug);
            auto ml = masked_loss(logits, x0, xt, schedule.at(t));
            masked += ml.masked_count;
            positions += x0.size();
            if (!ml.no_masked_positions()) {
                terms.push_back(std::move(ml.value));
            }
        }
        if (!terms.empty()) {
            loss = scale(add_scalars(terms), static_cast<T>(1.0 / static_cast<double>(batch.rows())));
        }
    }
    metrics.loss = loss.defined() ? static_cast<double>(loss.item()) : 0.0;
    metrics.masked_fraction = positions ? static_cast<double>(masked) / static_cast<double>(positions) : 0.0;
    if (!std::isfinite(metrics.loss)) {
        throw TrainingError("non-finite loss " + std::to_string(metrics.loss) + " at step " + std::to_string(step) +
                            " (step seed " + std::to_string(step_seed) + ")");
    }
    if (loss.defined()) {
        tape.backward(loss);
    }

    const bool freeze_sink = cfg.sink.count > 0 && !cfg.sink.trainable_embedding;
    std::vector<T> sink_row;
    const std::size_t d = cfg.d_model;
    const std::size_t sink_offset = static_cast<std::size_t>(cfg.sink_id) * d;
    if (freeze_sink) {
        auto emb = model.tok_emb.data();
        sink_row.assign(emb.begin() + static_cast<std::ptrdiff_t>(sink_offset),
                        emb.begin() + static_cast<std::ptrdiff_t>(sink_offset + d));
        if (model.tok_emb.has_grad()) {
            auto g = model.tok_emb.mutable_grad();
            std::fill_n(g.begin() + static_cast<std::ptrdiff_t>(sink_offset), d, T(0));
        }
    }
    metrics.lr = lr_at(step, total_steps, optim.config());
    metrics.grad_norm = optim.step(params, metrics.lr);
    if (freeze_sink) {
        std::copy(sink_row.begin(), sink_row.end(),
                  model.tok_emb.mutable_data().begin() + static_cast<std::ptrdiff_t>(sink_offset));
    }
    model.zero_grad();
    return metrics;
}

} // namespace sinkdiff
