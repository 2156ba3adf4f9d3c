#include "sinkdiff/corpus.hpp"
#include "sinkdiff/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

using namespace sinkdiff;

namespace {

ModelConfig tiny_model(std::size_t sinks, AttentionVariant variant = AttentionVariant::vanilla) {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_model = 16;
    c.max_seq_len = 40;
    c.attention_variant = variant;
    c.sink.count = sinks;
    return c;
}

BatchStream pattern_stream(std::size_t seq_len = 24, std::size_t batch = 4) {
    const auto text = generate_corpus(CorpusKind::pattern, 4000, 1);
    return BatchStream(std::vector<std::uint8_t>(text.begin(), text.end()), seq_len, batch, 2);
}

std::vector<float> flat_params(const Model& m) {
    std::vector<float> out;
    for (const auto& p : m.parameters()) {
        out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
    }
    return out;
}

std::vector<double> run_steps(Model& model, const OptimConfig& oc, std::size_t steps, std::uint64_t seed) {
    const auto stream = pattern_stream();
    const auto schedule = NoiseSchedule::linear(100);
    AdamW<float> opt(oc, model.parameters());
    std::vector<double> losses;
    for (std::size_t s = 1; s <= steps; ++s) {
        losses.push_back(train_step(model, stream.batch_at(s - 1), schedule, opt, s, steps, mix_seed(seed, s)).loss);
    }
    return losses;
}

} // namespace

TEST(LearningRate, WarmupThenCosine) {
    OptimConfig c;
    c.peak_lr = 1e-3;
    c.min_lr = 1e-4;
    c.warmup_fraction = 0.1;
    const std::size_t total = 1000;
    EXPECT_EQ(warmup_steps(total, c), 100u);
    EXPECT_EQ(lr_at(0, total, c), 0.0);
    EXPECT_NEAR(lr_at(50, total, c), 5e-4, 1e-15);
    EXPECT_NEAR(lr_at(100, total, c), 1e-3, 1e-15);
    EXPECT_NEAR(lr_at(total, total, c), 1e-4, 1e-15);
    EXPECT_NEAR(lr_at(total + 10, total, c), 1e-4, 1e-15);
    EXPECT_NEAR(lr_at(550, total, c), 1e-4 + 0.5 * (1e-3 - 1e-4), 1e-15);
    const double p = 300.0 / 900.0;
    EXPECT_NEAR(lr_at(400, total, c), 1e-4 + 0.9e-3 * 0.5 * (1.0 + std::cos(std::numbers::pi * p)), 1e-15);
}

TEST(LearningRate, MonotoneAfterWarmup) {
    OptimConfig c;
    for (std::size_t s = warmup_steps(500, c) + 1; s <= 500; ++s) {
        EXPECT_LE(lr_at(s, 500, c), lr_at(s - 1, 500, c));
    }
}

TEST(AdamW, ZeroGradientIsPureDecoupledDecay) {
    OptimConfig c;
    c.weight_decay = 0.1;
    NamedParameter<double> p{"w", BasicTensor<double>({3}, {1.0, -2.0, 0.5}, true)};
    AdamW<double> opt(c, {p});
    opt.step({p}, 1e-2);
    EXPECT_NEAR(p.tensor.data()[0], 1.0 * (1 - 1e-3), 1e-15);
    EXPECT_NEAR(p.tensor.data()[1], -2.0 * (1 - 1e-3), 1e-15);
    EXPECT_NEAR(p.tensor.data()[2], 0.5 * (1 - 1e-3), 1e-15);
}

TEST(AdamW, FirstStepMovesEachEntryByLr) {
    // bias-corrected first step: m/sqrt(v) = sign(g)
    OptimConfig c;
    c.weight_decay = 0.0;
    c.grad_clip = 0.0;
    NamedParameter<double> p{"w", BasicTensor<double>({2}, {0.0, 0.0}, true)};
    p.tensor.mutable_grad()[0] = 3.0;
    p.tensor.mutable_grad()[1] = -0.01;
    AdamW<double> opt(c, {p});
    opt.step({p}, 0.1);
    EXPECT_NEAR(p.tensor.data()[0], -0.1, 1e-8);
    EXPECT_NEAR(p.tensor.data()[1], 0.1, 1e-5);
}

TEST(AdamW, ReportsPreClipNormAndClips) {
    OptimConfig c;
    c.grad_clip = 1.0;
    NamedParameter<double> p{"w", BasicTensor<double>({2}, {0.0, 0.0}, true)};
    p.tensor.mutable_grad()[0] = 3.0;
    p.tensor.mutable_grad()[1] = 4.0;
    AdamW<double> opt(c, {p});
    EXPECT_DOUBLE_EQ(opt.step({p}, 0.1), 5.0);
    EXPECT_NEAR(opt.state().m[0][0], 0.1 * 0.6, 1e-15);
    EXPECT_NEAR(opt.state().m[0][1], 0.1 * 0.8, 1e-15);
}

TEST(AdamW, ConvergesOnQuadratic) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> normal;
    std::vector<double> target(10), init(10);
    for (std::size_t i = 0; i < 10; ++i) {
        target[i] = normal(rng);
        init[i] = normal(rng);
    }
    NamedParameter<double> p{"x", BasicTensor<double>({10}, init, true)};
    OptimConfig c;
    c.weight_decay = 0.0;
    c.grad_clip = 0.0;
    AdamW<double> opt(c, {p});
    auto loss = [&] {
        double l = 0.0;
        for (std::size_t i = 0; i < 10; ++i) {
            l += (p.tensor.data()[i] - target[i]) * (p.tensor.data()[i] - target[i]);
        }
        return l;
    };
    const double l0 = loss();
    for (int s = 0; s < 1000; ++s) {
        auto g = p.tensor.mutable_grad();
        for (std::size_t i = 0; i < 10; ++i) {
            g[i] = 2.0 * (p.tensor.data()[i] - target[i]);
        }
        opt.step({p}, 1e-2);
    }
    EXPECT_LT(loss(), 1e-3 * l0);
}

TEST(AdamW, MismatchedStateIsConsistencyError) {
    NamedParameter<double> p{"w", BasicTensor<double>({2}, {0.0, 0.0}, true)};
    AdamW<double> opt(OptimConfig{}, {p});
    EXPECT_THROW(opt.step({p, p}, 0.1), ConsistencyError);
}

TEST(OptimConfig, Validation) {
    OptimConfig c;
    c.beta2 = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = {};
    c.warmup_fraction = 1.5;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainStep, DeterministicGivenSeeds) {
    auto a = Model::initialized(tiny_model(1), 4), b = Model::initialized(tiny_model(1), 4);
    const auto la = run_steps(a, OptimConfig{}, 5, 9), lb = run_steps(b, OptimConfig{}, 5, 9);
    EXPECT_EQ(la, lb);
    EXPECT_EQ(flat_params(a), flat_params(b));
}

TEST(TrainStep, ZeroLearningRateLeavesParametersBitwise) {
    OptimConfig c;
    c.peak_lr = c.min_lr = 0.0;
    auto m = Model::initialized(tiny_model(1), 5);
    const auto before = flat_params(m);
    run_steps(m, c, 3, 1);
    EXPECT_EQ(flat_params(m), before);
}

TEST(TrainStep, FrozenSinkEmbeddingStaysFixed) {
    auto cfg = tiny_model(1);
    cfg.sink.trainable_embedding = false;
    auto m = Model::initialized(cfg, 6);
    const std::size_t off = static_cast<std::size_t>(Vocab::kSinkId) * cfg.d_model;
    const std::vector<float> row(m.tok_emb.data().begin() + off, m.tok_emb.data().begin() + off + cfg.d_model);
    const auto before = flat_params(m);
    OptimConfig c;
    c.peak_lr = 1e-2;
    run_steps(m, c, 3, 2);
    EXPECT_EQ(std::vector<float>(m.tok_emb.data().begin() + off, m.tok_emb.data().begin() + off + cfg.d_model), row);
    EXPECT_NE(flat_params(m), before);
}

TEST(TrainStep, TrainableSinkEmbeddingMoves) {
    const auto cfg = tiny_model(1);
    auto m = Model::initialized(cfg, 6);
    const std::size_t off = static_cast<std::size_t>(Vocab::kSinkId) * cfg.d_model;
    const std::vector<float> row(m.tok_emb.data().begin() + off, m.tok_emb.data().begin() + off + cfg.d_model);
    OptimConfig c;
    c.peak_lr = 1e-2;
    c.weight_decay = 0.0;
    run_steps(m, c, 3, 2);
    EXPECT_NE(std::vector<float>(m.tok_emb.data().begin() + off, m.tok_emb.data().begin() + off + cfg.d_model), row);
}

TEST(TrainStep, NonFiniteLossIsTrainingError) {
    auto m = Model::initialized(tiny_model(0), 7);
    m.parameters()[1].tensor.mutable_data()[0] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(run_steps(m, OptimConfig{}, 1, 3), TrainingError);
}

TEST(TrainStep, MetricsAreSane) {
    auto m = Model::initialized(tiny_model(1), 8);
    const auto stream = pattern_stream();
    const auto schedule = NoiseSchedule::linear(100);
    OptimConfig c;
    AdamW<float> opt(c, m.parameters());
    const auto r = train_step(m, stream.batch_at(0), schedule, opt, 1, 10, 42);
    EXPECT_EQ(r.step, 1u);
    EXPECT_GT(r.loss, 0.0);
    EXPECT_GT(r.grad_norm, 0.0);
    EXPECT_DOUBLE_EQ(r.lr, lr_at(1, 10, c));
    EXPECT_GT(r.masked_fraction, 0.0);
    EXPECT_LE(r.masked_fraction, 1.0);
}

struct LossDecreaseCase {
    const char* name;
    std::size_t sinks;
    AttentionVariant variant;
    bool zero_value;
};

class LossDecreases : public ::testing::TestWithParam<LossDecreaseCase> {};

TEST_P(LossDecreases, SmoothedLossFallsOnPatternCorpus) {
    auto cfg = tiny_model(GetParam().sinks, GetParam().variant);
    cfg.sink.zero_value = GetParam().zero_value;
    auto m = Model::initialized(cfg, 10);
    OptimConfig c;
    c.peak_lr = 1e-2;
    c.min_lr = 1e-3;
    c.warmup_fraction = 0.05;
    const auto losses = run_steps(m, c, 200, 11);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 40; ++i) {
        first += losses[i] / 40.0;
        last += losses[losses.size() - 40 + i] / 40.0;
    }
    EXPECT_LT(last, 0.8 * first) << "first " << first << " last " << last;
}

INSTANTIATE_TEST_SUITE_P(Variants, LossDecreases,
                         ::testing::Values(LossDecreaseCase{"vanilla", 0, AttentionVariant::vanilla, false},
                                           LossDecreaseCase{"sink", 1, AttentionVariant::vanilla, false},
                                           LossDecreaseCase{"zero_value", 1, AttentionVariant::vanilla, true},
                                           LossDecreaseCase{"gated", 0, AttentionVariant::gated, false}),
                         [](const auto& info) { return std::string(info.param.name); });
