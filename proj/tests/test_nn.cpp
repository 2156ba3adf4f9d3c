#include "reference_model.hpp"
#include "sinkdiff/analyze.hpp"
#include "sinkdiff/nn.hpp"
#include "sinkdiff/sink.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

using namespace sinkdiff;
using sinkdiff::testing::DTensor;

namespace {

ModelConfig small_config(std::size_t sinks = 0, SinkPlacement placement = SinkPlacement::front,
                         AttentionVariant variant = AttentionVariant::vanilla, bool zero_value = false) {
    ModelConfig c;
    c.n_layers = 3;
    c.n_heads = 2;
    c.d_model = 8;
    c.max_seq_len = 24;
    c.attention_variant = variant;
    c.sink.count = sinks;
    c.sink.placement = placement;
    c.sink.zero_value = zero_value;
    return c;
}

std::vector<TokenId> random_ids(std::mt19937_64& rng, std::size_t n) {
    std::vector<TokenId> ids(n);
    for (auto& id : ids) {
        id = static_cast<TokenId>(rng() % 257); // bytes and MASK
    }
    return ids;
}

std::vector<std::size_t> iota(std::size_t n) {
    std::vector<std::size_t> v(n);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
}

} // namespace

struct ForwardCase {
    const char* name;
    std::size_t sinks;
    SinkPlacement placement;
    AttentionVariant variant;
    bool zero_value;
};

class ForwardMatchesReference : public ::testing::TestWithParam<ForwardCase> {};

TEST_P(ForwardMatchesReference, Logits) {
    const auto& p = GetParam();
    const auto cfg = small_config(p.sinks, p.placement, p.variant, p.zero_value);
    const auto model = BasicModel<double>::randomized(cfg, 17);
    std::mt19937_64 rng(5);
    const auto aug = augment(TokenSequence(random_ids(rng, 7)), cfg.sink, cfg.sink_id);
    BasicForwardCapture<double> cap;
    cap.options.hidden_states = true;
    const auto logits = forward_augmented(model, aug, &cap);
    const auto ref = sinkdiff::testing::reference_forward(model, aug.ids, aug.sink_positions);
    ASSERT_EQ(logits.rows(), aug.size());
    ASSERT_EQ(logits.cols(), cfg.vocab_size);
    double worst = 0.0;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        for (std::size_t j = 0; j < logits.cols(); ++j) {
            worst = std::max(worst, std::abs(logits.at(i, j) - ref.logits[i][j]));
        }
    }
    EXPECT_LE(worst, 1e-9);
    ASSERT_EQ(cap.hidden.size(), cfg.n_layers);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (std::size_t i = 0; i < aug.size(); ++i) {
            for (std::size_t j = 0; j < cfg.d_model; ++j) {
                EXPECT_NEAR(cap.hidden[l][i * cfg.d_model + j], ref.hidden[l][i][j], 1e-9);
            }
        }
    }
}

INSTANTIATE_TEST_SUITE_P(
    Variants, ForwardMatchesReference,
    ::testing::Values(ForwardCase{"vanilla", 0, SinkPlacement::front, AttentionVariant::vanilla, false},
                      ForwardCase{"front", 1, SinkPlacement::front, AttentionVariant::vanilla, false},
                      ForwardCase{"front2", 2, SinkPlacement::front, AttentionVariant::vanilla, false},
                      ForwardCase{"end", 1, SinkPlacement::end, AttentionVariant::vanilla, false},
                      ForwardCase{"end4", 4, SinkPlacement::end, AttentionVariant::vanilla, false},
                      ForwardCase{"zero_value", 1, SinkPlacement::front, AttentionVariant::vanilla, true},
                      ForwardCase{"gated", 0, SinkPlacement::front, AttentionVariant::gated, false},
                      ForwardCase{"gated_sink", 1, SinkPlacement::front, AttentionVariant::gated, false}),
    [](const auto& info) { return std::string(info.param.name); });

TEST(AttentionForward, SingleTokenOutputIsProjectedValue) {
    const auto cfg = small_config();
    const auto model = BasicModel<double>::randomized(cfg, 3);
    const auto& w = model.layers[0];
    std::mt19937_64 rng(1);
    const auto x = sinkdiff::testing::random_tensor({1, 8}, rng, 1.0, false);
    const std::vector<std::size_t> pos{0};
    BasicForwardCapture<double> cap;
    const auto out = attention_forward<double>(x, nullptr, w, cfg, pos, {}, &cap);
    for (const auto& h : cap.layers[0].heads) {
        EXPECT_EQ(h.attention, std::vector<double>{1.0});
    }
    const auto expected = matmul(matmul(x, w.wv), w.wo);
    for (std::size_t j = 0; j < 8; ++j) {
        EXPECT_NEAR(out.data()[j], expected.data()[j], 1e-12);
    }
}

TEST(AttentionForward, ForcedOneHotRowCopiesFirstValue) {
    const auto cfg = small_config();
    const auto model = BasicModel<double>::randomized(cfg, 4);
    const auto& w = model.layers[0];
    std::mt19937_64 rng(2);
    const auto x = sinkdiff::testing::random_tensor({4, 8}, rng, 1.0, false);
    std::vector<double> b(16, 0.0);
    for (std::size_t j = 1; j < 4; ++j) {
        b[2 * 4 + j] = mask_sentinel<double>();
    }
    const DTensor bias({4, 4}, b);
    const auto pos = iota(4);
    BasicForwardCapture<double> cap;
    const auto out = attention_forward<double>(x, &bias, w, cfg, pos, {}, &cap);
    for (const auto& h : cap.layers[0].heads) {
        EXPECT_EQ(h.attention[2 * 4 + 0], 1.0);
        for (std::size_t j = 1; j < 4; ++j) {
            EXPECT_EQ(h.attention[2 * 4 + j], 0.0);
        }
    }
    const auto v0w = matmul(select_rows(matmul(x, w.wv), std::vector<std::size_t>{0}), w.wo);
    for (std::size_t j = 0; j < 8; ++j) {
        EXPECT_NEAR(out.at(2, j), v0w.data()[j], 1e-12);
    }
}

TEST(AttentionForward, OutputIsLinearInOneTokensValue) {
    const auto cfg = small_config();
    const auto model = BasicModel<double>::randomized(cfg, 5);
    std::mt19937_64 rng(3);
    const auto x = sinkdiff::testing::random_tensor({5, 8}, rng, 1.0, false);
    const auto pos = iota(5);
    BasicForwardCapture<double> cap;
    cap.options.raw_vectors = true;
    attention_forward<double>(x, nullptr, model.layers[0], cfg, pos, {}, &cap);
    const auto& tr = cap.layers[0];
    const std::size_t dh = tr.head_dim, n = tr.cols, j_scaled = 3;
    const double c = 2.5;
    for (const auto& h : tr.heads) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < dh; ++k) {
                double dense = 0.0, scaled = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    dense += h.attention[i * n + j] * h.values[j * dh + k];
                    scaled += h.attention[i * n + j] * h.values[j * dh + k] * (j == j_scaled ? c : 1.0);
                }
                EXPECT_NEAR(h.outputs[i * dh + k], dense, 1e-12);
                EXPECT_NEAR(scaled - dense, (c - 1.0) * h.attention[i * n + j_scaled] * h.values[j_scaled * dh + k],
                            1e-12);
            }
        }
    }
}

TEST(AttentionForward, BiasShapeMismatch) {
    const auto cfg = small_config();
    const auto model = BasicModel<double>::randomized(cfg, 5);
    const auto x = DTensor::zeros({3, 8});
    const auto bias = DTensor::zeros({2, 2});
    const auto pos = iota(3);
    EXPECT_THROW(attention_forward<double>(x, &bias, model.layers[0], cfg, pos, {}), DimensionError);
}

TEST(ZeroValueHook, ZeroesSinkRowsOnly) {
    const auto v = Tensor::matrix({{1, 2}, {3, 4}});
    const std::vector<std::size_t> sinks{0};
    const auto z = zero_value_hook(v, sinks);
    EXPECT_EQ(std::vector<float>(z.data().begin(), z.data().end()), (std::vector<float>{0, 0, 3, 4}));
}

TEST(ZeroValueHook, EmptySetIsIdentity) {
    const auto v = Tensor::matrix({{1, 2}, {3, 4}});
    const auto z = zero_value_hook(v, std::span<const std::size_t>{});
    EXPECT_EQ(std::vector<float>(z.data().begin(), z.data().end()), (std::vector<float>{1, 2, 3, 4}));
}

TEST(ZeroValueHook, OutputBoundedByNonSinkMass) {
    const auto cfg = small_config(1, SinkPlacement::front, AttentionVariant::vanilla, true);
    const auto model = BasicModel<double>::randomized(cfg, 8);
    std::mt19937_64 rng(9);
    const auto aug = augment(TokenSequence(random_ids(rng, 9)), cfg.sink);
    BasicForwardCapture<double> cap;
    forward_augmented(model, aug, &cap);
    for (const auto& tr : cap.layers) {
        for (const auto& h : tr.heads) {
            EXPECT_EQ(h.value_norms[0], 0.0);
            double vmax = 0.0;
            for (std::size_t j = 1; j < tr.cols; ++j) {
                vmax = std::max(vmax, h.value_norms[j]);
            }
            for (std::size_t i = 1; i < tr.rows; ++i) {
                const double a = h.attention[i * tr.cols + 0];
                EXPECT_LE(h.output_norms[i], (1.0 - a) * vmax + 1e-12);
            }
        }
    }
}

TEST(ZeroValueHook, NoGradientIntoSinkValueRows) {
    const auto cfg = small_config(2, SinkPlacement::end, AttentionVariant::vanilla, true);
    const auto model = BasicModel<double>::randomized(cfg, 8);
    std::mt19937_64 rng(10);
    const auto aug = augment(TokenSequence(random_ids(rng, 6)), cfg.sink);
    BasicForwardCapture<double> cap;
    BasicTape<double> tape;
    DTensor loss;
    {
        BasicTapeScope<double> scope(tape);
        loss = sum(strip(forward_augmented(model, aug, &cap), aug));
    }
    tape.backward(loss);
    for (const auto& v : cap.value_inputs) {
        ASSERT_TRUE(v.has_grad());
        for (std::size_t s : aug.sink_positions) {
            for (std::size_t c = 0; c < cfg.d_model; ++c) {
                EXPECT_EQ(v.grad()[s * cfg.d_model + c], 0.0);
            }
        }
    }
}

TEST(Block, ZeroOutputProjectionsGiveIdentity) {
    const auto cfg = small_config();
    const auto model = Model::initialized(cfg, 1);
    std::mt19937_64 rng(4);
    const auto h = tensor_cast<float>(sinkdiff::testing::random_tensor({6, 8}, rng, 1.0, false));
    const auto pos = iota(6);
    const auto out = block_forward<float>(h, nullptr, model.layers[0], cfg, pos, {});
    EXPECT_TRUE(std::equal(out.data().begin(), out.data().end(), h.data().begin()));
}

TEST(Block, GradientMatchesFiniteDifferences) {
    for (auto variant : {AttentionVariant::vanilla, AttentionVariant::gated}) {
        const auto cfg = small_config(1, SinkPlacement::front, variant);
        const auto model = BasicModel<double>::randomized(cfg, 12);
        std::mt19937_64 rng(6);
        auto h = sinkdiff::testing::random_tensor({5, 8}, rng);
        const auto w = sinkdiff::testing::random_tensor({5, 8}, rng, 1.0, false);
        const std::vector<std::size_t> sinks{0};
        const auto bias = build_mask_bias<double>(5, sinks);
        const auto pos = iota(5);
        const auto& lw = model.layers[0];
        std::vector<DTensor> inputs{h, lw.attn_norm, lw.wq, lw.wk, lw.wv, lw.wo, lw.mlp_norm, lw.w_up, lw.w_down};
        if (variant == AttentionVariant::gated) {
            inputs.push_back(lw.wg);
        }
        auto loss = [&] { return sum(mul(block_forward<double>(h, &bias, lw, cfg, pos, sinks), w)); };
        EXPECT_LE(sinkdiff::testing::fd_max_rel_error(loss, inputs), 1e-3) << to_string(variant);
    }
}

TEST(Block, TraceHasOneRowStochasticMatrixPerHead) {
    const auto cfg = small_config(1);
    const auto model = Model::initialized(cfg, 2);
    std::mt19937_64 rng(4);
    const auto aug = augment(TokenSequence(random_ids(rng, 10)), cfg.sink);
    ForwardCapture cap;
    model.logits(aug, &cap);
    ASSERT_EQ(cap.layers.size(), cfg.n_layers);
    for (const auto& tr : cap.layers) {
        ASSERT_EQ(tr.heads.size(), cfg.n_heads);
        for (const auto& h : tr.heads) {
            for (std::size_t i = 0; i < tr.rows; ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < tr.cols; ++j) {
                    EXPECT_GE(h.attention[i * tr.cols + j], 0.0);
                    s += h.attention[i * tr.cols + j];
                }
                EXPECT_NEAR(s, 1.0, 1e-6);
            }
        }
    }
}

TEST(ModelForward, SingleMaskTokenShape) {
    const auto cfg = small_config();
    const auto model = Model::initialized(cfg, 3);
    const auto aug = augment(TokenSequence::all_masked(1), cfg.sink);
    const auto logits = model.logits(aug);
    EXPECT_EQ(logits.shape(), (Shape{1, Vocab::kSize}));
    for (float v : logits.data()) {
        EXPECT_TRUE(std::isfinite(v));
    }
}

TEST(ModelForward, CaptureIsObservationallyPure) {
    const auto cfg = small_config(1);
    const auto model = BasicModel<double>::randomized(cfg, 3).cast<float>();
    std::mt19937_64 rng(4);
    const auto aug = augment(TokenSequence(random_ids(rng, 12)), cfg.sink);
    ForwardCapture cap;
    cap.options = {true, true};
    const auto a = model.logits(aug, &cap);
    const auto b = model.logits(aug);
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(ModelForward, PermutingTokensWithTheirPositionsPermutesLogits) {
    const auto cfg = small_config();
    const auto model = BasicModel<double>::randomized(cfg, 31);
    std::mt19937_64 rng(7);
    auto ids = random_ids(rng, 8);
    auto pos = iota(8);
    const auto base = model_forward<double>(model, ids, pos, nullptr, {});
    std::swap(ids[1], ids[6]);
    std::swap(pos[1], pos[6]);
    const auto swapped = model_forward<double>(model, ids, pos, nullptr, {});
    for (std::size_t r = 0; r < 8; ++r) {
        const std::size_t src = r == 1 ? 6 : r == 6 ? 1 : r;
        for (std::size_t j = 0; j < cfg.vocab_size; ++j) {
            EXPECT_NEAR(swapped.at(r, j), base.at(src, j), 1e-10);
        }
    }
}

TEST(ModelForward, TooLongIsLengthError) {
    const auto cfg = small_config();
    const auto model = Model::initialized(cfg, 3);
    const auto aug = augment(TokenSequence::all_masked(cfg.max_seq_len + 1), cfg.sink);
    EXPECT_THROW(model.logits(aug), LengthError);
}

TEST(GatedAttention, GateValuesInUnitInterval) {
    const auto cfg = small_config(0, SinkPlacement::front, AttentionVariant::gated);
    const auto model = BasicModel<double>::randomized(cfg, 3);
    std::mt19937_64 rng(4);
    const auto x = sinkdiff::testing::random_tensor({6, 8}, rng, 3.0, false);
    const auto g = sigmoid(matmul(x, model.layers[0].wg));
    for (double v : g.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(GatedAttention, LargeNegativeGateSuppressesOutput) {
    const auto gated_cfg = small_config(0, SinkPlacement::front, AttentionVariant::gated);
    auto vanilla_cfg = gated_cfg;
    vanilla_cfg.attention_variant = AttentionVariant::vanilla;
    auto model = BasicModel<double>::randomized(gated_cfg, 3);
    const std::size_t d = gated_cfg.d_model;
    // unit-RMS rows of ones times W_g = -20/d everywhere gives pre-activation -20
    const auto x = DTensor::full({5, d}, 1.0);
    for (auto& w : model.layers[0].wg.mutable_data()) {
        w = -20.0 / static_cast<double>(d);
    }
    const auto pos = iota(5);
    const auto gated = attention_forward<double>(x, nullptr, model.layers[0], gated_cfg, pos, {});
    const auto plain = attention_forward<double>(x, nullptr, model.layers[0], vanilla_cfg, pos, {});
    auto norm = [](const DTensor& t) {
        double s = 0.0;
        for (double v : t.data()) {
            s += v * v;
        }
        return std::sqrt(s);
    };
    ASSERT_GT(norm(plain), 0.0);
    EXPECT_LE(norm(gated), 1e-3 * norm(plain));
}

TEST(Invariants, OutputNormBoundOnCapturedTraces) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto cfg = small_config(seed % 3, seed % 2 ? SinkPlacement::end : SinkPlacement::front,
                                      seed % 4 == 3 ? AttentionVariant::gated : AttentionVariant::vanilla);
        const auto model = BasicModel<double>::randomized(cfg, seed).cast<float>();
        std::mt19937_64 rng(seed);
        const auto aug = augment(TokenSequence(random_ids(rng, 10)), cfg.sink);
        ForwardCapture cap;
        cap.options.raw_vectors = true;
        model.logits(aug, &cap);
        for (const auto& tr : cap.layers) {
            TraceRecord rec{0, aug.sink_positions, tr};
            EXPECT_LE(noop_bound_check(rec), 1e-5);
        }
    }
}

TEST(Invariants, SinkTrajectoryIndependentOfContent) {
    const auto cfg = small_config(1);
    const auto model = BasicModel<double>::randomized(cfg, 77).cast<float>();
    std::mt19937_64 rng(1);
    ForwardCapture a, b;
    a.options.hidden_states = b.options.hidden_states = true;
    model.logits(augment(TokenSequence(random_ids(rng, 11)), cfg.sink), &a);
    model.logits(augment(TokenSequence(random_ids(rng, 11)), cfg.sink), &b);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (std::size_t c = 0; c < cfg.d_model; ++c) {
            EXPECT_NEAR(a.hidden[l][c], b.hidden[l][c], 1e-6);
        }
    }
}

TEST(Invariants, NoSinkConfigMatchesPlainForwardBitwise) {
    const auto cfg = small_config(0);
    const auto model = BasicModel<double>::randomized(cfg, 9).cast<float>();
    std::mt19937_64 rng(2);
    const auto ids = random_ids(rng, 9);
    const auto via_sink_module = model.logits(augment(TokenSequence(ids), cfg.sink));
    const auto pos = iota(9);
    const auto plain = model_forward<float>(model, ids, pos, nullptr, {});
    EXPECT_TRUE(std::equal(plain.data().begin(), plain.data().end(), via_sink_module.data().begin()));
}

TEST(Invariants, ZeroValueOutputsDropSinkContribution) {
    const auto cfg = small_config(1, SinkPlacement::front, AttentionVariant::vanilla, true);
    const auto model = BasicModel<double>::randomized(cfg, 15).cast<float>();
    std::mt19937_64 rng(3);
    const auto aug = augment(TokenSequence(random_ids(rng, 9)), cfg.sink);
    ForwardCapture cap;
    cap.options.raw_vectors = true;
    model.logits(aug, &cap);
    const std::size_t d = cfg.d_model, dh = cfg.head_dim();
    for (std::size_t l = 0; l < cap.layers.size(); ++l) {
        const auto& tr = cap.layers[l];
        const auto v_in = cap.value_inputs[l].data(); // before the hook
        for (std::size_t h = 0; h < tr.heads.size(); ++h) {
            for (std::size_t i = 0; i < tr.rows; ++i) {
                for (std::size_t k = 0; k < dh; ++k) {
                    double o = 0.0;
                    for (std::size_t j = 0; j < tr.cols; ++j) {
                        if (!aug.is_sink(j)) {
                            o += tr.alpha(h, i, j) * v_in[j * d + h * dh + k];
                        }
                    }
                    EXPECT_NEAR(tr.heads[h].outputs[i * dh + k], o, 1e-6);
                }
            }
        }
    }
}

TEST(Model, ParameterOrderAndCast) {
    const auto cfg = small_config(0, SinkPlacement::front, AttentionVariant::gated);
    const auto m = Model::initialized(cfg, 4);
    const auto params = m.parameters();
    EXPECT_EQ(params.front().name, "tok_emb");
    EXPECT_EQ(params.back().name, "w_out");
    EXPECT_EQ(params[6].name, "layers.0.wg");
    const auto d = m.cast<double>().cast<float>();
    const auto back = d.parameters();
    for (std::size_t k = 0; k < params.size(); ++k) {
        EXPECT_TRUE(std::equal(params[k].tensor.data().begin(), params[k].tensor.data().end(),
                               back[k].tensor.data().begin()));
    }
}

TEST(Model, InitializationZeroesResidualOutputs) {
    const auto m = Model::initialized(small_config(), 4);
    for (const auto& p : m.parameters()) {
        const bool zero_expected = p.name.ends_with(".wo") || p.name.ends_with(".w_down");
        const bool all_zero = std::all_of(p.tensor.data().begin(), p.tensor.data().end(), [](float v) { return v == 0; });
        EXPECT_EQ(all_zero, zero_expected) << p.name;
        if (p.tensor.rank() == 2 && !zero_expected) {
            for (float v : p.tensor.data()) {
                EXPECT_LE(std::abs(v), 0.04f + 1e-7f);
            }
        }
    }
}

TEST(ModelConfig, Validation) {
    auto c = small_config();
    c.n_heads = 3;
    EXPECT_THROW(c.validate(), ConfigError);
    c = small_config(1);
    c.sink_id = c.mask_id;
    EXPECT_THROW(c.validate(), ConfigError);
}
