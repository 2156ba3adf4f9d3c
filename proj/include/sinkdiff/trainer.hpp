#pragma once

// Training driver: owns model, optimizer and batch stream, emits one metrics
// JSON line per step and writes checkpoints. Step s (1-based) always trains on
// batch s-1 of the stream with step seed mix_seed(seeds.diffusion, s), so a
// resumed run replays exactly what an uninterrupted one would have done.

#include "sinkdiff/checkpoint.hpp"
#include "sinkdiff/corpus.hpp"
#include "sinkdiff/run_config.hpp"
#include "sinkdiff/train.hpp"

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>

namespace sinkdiff {

inline nlohmann::ordered_json metrics_to_json(const StepMetrics& m, double wallclock_ms, const Seeds& seeds) {
    nlohmann::ordered_json j;
    j["step"] = m.step;
    j["loss"] = m.loss;
    j["lr"] = m.lr;
    j["grad_norm"] = m.grad_norm;
    j["masked_fraction"] = m.masked_fraction;
    j["wallclock_ms"] = wallclock_ms;
    j["seeds"] = seeds_to_json(seeds);
    return j;
}

class Trainer {
public:
    Trainer(RunConfig cfg, std::vector<std::uint8_t> corpus)
        : cfg_(std::move(cfg)),
          schedule_(cfg_.schedule.build()),
          stream_(std::move(corpus), cfg_.train.seq_len, cfg_.train.batch_size, cfg_.seeds.data),
          model_(Model::initialized(cfg_.model, cfg_.seeds.init)),
          optim_(cfg_.train.optim, model_.parameters()) {
        cfg_.validate();
    }

    /// Continues from a checkpoint written by a run with the same config.
    void resume(const LoadedCheckpoint& ckpt) {
        if (!(ckpt.config == cfg_)) {
            throw ConfigError("resume: checkpoint config differs from the run config");
        }
        if (!ckpt.optimizer) {
            throw ConfigError("resume: checkpoint carries no optimizer state");
        }
        auto src = ckpt.model.parameters();
        auto dst = model_.parameters();
        for (std::size_t k = 0; k < src.size(); ++k) {
            std::copy(src[k].tensor.data().begin(), src[k].tensor.data().end(), dst[k].tensor.mutable_data().begin());
        }
        optim_.state() = *ckpt.optimizer;
        step_ = ckpt.step;
    }

    const RunConfig& config() const noexcept { return cfg_; }
    const Model& model() const noexcept { return model_; }
    Model& model() noexcept { return model_; }
    const AdamW<float>& optimizer() const noexcept { return optim_; }
    std::size_t step() const noexcept { return step_; }
    bool done() const noexcept { return step_ >= cfg_.train.total_steps; }

    StepMetrics step_once() {
        const std::size_t s = step_ + 1;
        const auto batch = stream_.batch_at(s - 1);
        auto m = train_step(model_, batch, schedule_, optim_, s, cfg_.train.total_steps,
                            mix_seed(cfg_.seeds.diffusion, s));
        step_ = s;
        return m;
    }

    void save(const std::filesystem::path& dir) const { save_checkpoint(dir, cfg_, model_, &optim_.state(), step_); }

    /// Runs to total_steps. Metrics lines go to `metrics`; the first line
    /// written by a fresh run also carries the config.
    void run(std::ostream& metrics, const std::function<void(const Trainer&)>& on_checkpoint = {},
             const std::function<void(const StepMetrics&)>& on_step = {}) {
        while (!done()) {
            const auto t0 = std::chrono::steady_clock::now();
            const auto m = step_once();
            const double ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            auto j = metrics_to_json(m, ms, cfg_.seeds);
            if (m.step == 1) {
                j["config"] = run_config_to_json(cfg_);
            }
            metrics << j.dump() << '\n';
            metrics.flush();
            if (on_step) {
                on_step(m);
            }
            const auto every = cfg_.train.checkpoint_every;
            if (on_checkpoint && every > 0 && step_ % every == 0 && !done()) {
                on_checkpoint(*this);
            }
        }
    }

private:
    RunConfig cfg_;
    NoiseSchedule schedule_;
    BatchStream stream_;
    Model model_;
    AdamW<float> optim_;
    std::size_t step_ = 0;
};

} // namespace sinkdiff
