#pragma once

// Bidirectional pre-norm transformer with rotary positions, optional
// sigmoid-gated attention output, the zero-value sink hook, and capture of
// attention maps / value norms / hidden states for analysis.

#include "sinkdiff/errors.hpp"
#include "sinkdiff/sequence.hpp"
#include "sinkdiff/sink.hpp"
#include "sinkdiff/tensor.hpp"
#include "sinkdiff/trace.hpp"

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace sinkdiff {

enum class AttentionVariant { vanilla, gated };

inline std::string_view to_string(AttentionVariant v) { return v == AttentionVariant::vanilla ? "vanilla" : "gated"; }

inline AttentionVariant parse_attention_variant(std::string_view s) {
    if (s == "vanilla") {
        return AttentionVariant::vanilla;
    }
    if (s == "gated") {
        return AttentionVariant::gated;
    }
    throw ConfigError("model.attention_variant must be \"vanilla\" or \"gated\", got \"" + std::string(s) + "\"");
}

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t d_model = 16;
    std::size_t vocab_size = Vocab::kSize;
    std::size_t max_seq_len = 128; // augmented length, sinks included
    AttentionVariant attention_variant = AttentionVariant::vanilla;
    SinkConfig sink;
    double rope_base = 10000.0;
    TokenId mask_id = Vocab::kMaskId;
    TokenId sink_id = Vocab::kSinkId;
    std::size_t mlp_ratio = 4;
    double norm_eps = 1e-6;

    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t mlp_width() const { return mlp_ratio * d_model; }

    void validate() const {
        if (n_layers == 0 || n_heads == 0 || d_model == 0) {
            throw ConfigError("model: n_layers, n_heads and d_model must be positive");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("model.d_model (" + std::to_string(d_model) + ") must be divisible by model.n_heads (" +
                              std::to_string(n_heads) + ")");
        }
        if (head_dim() % 2 != 0) {
            throw ConfigError("model: head dimension must be even for rotary encoding");
        }
        if (vocab_size < 2) {
            throw ConfigError("model.vocab_size must be at least 2");
        }
        if (mask_id < 0 || static_cast<std::size_t>(mask_id) >= vocab_size) {
            throw ConfigError("model: mask id outside vocabulary");
        }
        if (sink.count > 0 &&
            (sink_id < 0 || static_cast<std::size_t>(sink_id) >= vocab_size || sink_id == mask_id)) {
            throw ConfigError("model: sink id must be a dedicated vocabulary entry distinct from the mask id");
        }
        if (max_seq_len == 0) {
            throw ConfigError("model.max_seq_len must be positive");
        }
        sink.validate();
    }

    bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct LayerWeights {
    BasicTensor<T> attn_norm; // [d]
    BasicTensor<T> wq, wk, wv, wo; // [d x d]
    BasicTensor<T> wg;        // [d x d], gated variant only
    BasicTensor<T> mlp_norm;  // [d]
    BasicTensor<T> w_up;      // [d x 4d]
    BasicTensor<T> w_down;    // [4d x d]
};

template <class T>
struct NamedParameter {
    std::string name;
    BasicTensor<T> tensor;
};

struct CaptureOptions {
    bool raw_vectors = false;   // keep per-head value vectors and outputs
    bool hidden_states = false; // keep each block's output hidden state
};

template <class T>
struct BasicForwardCapture {
    CaptureOptions options;
    std::vector<AttentionTrace> layers;
    std::vector<std::vector<double>> hidden;   // per layer, n x d after the block
    std::vector<BasicTensor<T>> value_inputs;  // per layer, V before the zero-value hook
};

using ForwardCapture = BasicForwardCapture<float>;

template <class T>
class BasicModel {
public:
    BasicModel() = default;

    explicit BasicModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const std::size_t d = cfg_.d_model, f = cfg_.mlp_width(), v = cfg_.vocab_size;
        tok_emb = BasicTensor<T>::zeros({v, d}, true);
        layers.resize(cfg_.n_layers);
        for (auto& l : layers) {
            l.attn_norm = BasicTensor<T>::full({d}, T(1));
            l.wq = BasicTensor<T>::zeros({d, d}, true);
            l.wk = BasicTensor<T>::zeros({d, d}, true);
            l.wv = BasicTensor<T>::zeros({d, d}, true);
            l.wo = BasicTensor<T>::zeros({d, d}, true);
            if (cfg_.attention_variant == AttentionVariant::gated) {
                l.wg = BasicTensor<T>::zeros({d, d}, true);
            }
            l.mlp_norm = BasicTensor<T>::full({d}, T(1));
            l.w_up = BasicTensor<T>::zeros({d, f}, true);
            l.w_down = BasicTensor<T>::zeros({f, d}, true);
            l.attn_norm.set_requires_grad(true);
            l.mlp_norm.set_requires_grad(true);
        }
        final_norm = BasicTensor<T>::full({d}, T(1));
        final_norm.set_requires_grad(true);
        w_out = BasicTensor<T>::zeros({d, v}, true);
    }

    /// Truncated normal (std, cut at 2 std) for all matrices; the residual
    /// output projections (wo, w_down) start at zero; norm gains at one.
    static BasicModel initialized(ModelConfig cfg, std::uint64_t seed, double std = 0.02) {
        BasicModel m(std::move(cfg));
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        auto fill = [&](BasicTensor<T>& t) {
            for (auto& x : t.mutable_data()) {
                double z = normal(rng);
                while (std::abs(z) > 2.0) {
                    z = normal(rng);
                }
                x = static_cast<T>(z * std);
            }
        };
        for (auto& p : m.parameters()) {
            if (p.tensor.rank() != 2) {
                continue;
            }
            const bool residual_out = p.name.ends_with(".wo") || p.name.ends_with(".w_down");
            if (!residual_out) {
                fill(p.tensor);
            }
        }
        return m;
    }

    /// Every parameter random and non-degenerate, scaled so activations stay
    /// O(1): matrices N(0, gain^2 / fan_in), embedding rows N(0, 1), norm gains
    /// 1 + N(0, 0.1^2). Used where gradients are wanted everywhere.
    static BasicModel randomized(ModelConfig cfg, std::uint64_t seed, double gain = 1.0) {
        BasicModel m(std::move(cfg));
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (auto& p : m.parameters()) {
            double base = 0.0, sd = 1.0;
            if (p.tensor.rank() == 1) {
                base = 1.0;
                sd = 0.1;
            } else if (p.name != "tok_emb") {
                sd = gain / std::sqrt(static_cast<double>(p.tensor.rows()));
            }
            for (auto& x : p.tensor.mutable_data()) {
                x = static_cast<T>(base + sd * normal(rng));
            }
        }
        return m;
    }

    const ModelConfig& config() const noexcept { return cfg_; }

    std::vector<NamedParameter<T>> parameters() const {
        std::vector<NamedParameter<T>> out;
        out.push_back({"tok_emb", tok_emb});
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto p = "layers." + std::to_string(i) + ".";
            const auto& l = layers[i];
            out.push_back({p + "attn_norm", l.attn_norm});
            out.push_back({p + "wq", l.wq});
            out.push_back({p + "wk", l.wk});
            out.push_back({p + "wv", l.wv});
            out.push_back({p + "wo", l.wo});
            if (l.wg.defined()) {
                out.push_back({p + "wg", l.wg});
            }
            out.push_back({p + "mlp_norm", l.mlp_norm});
            out.push_back({p + "w_up", l.w_up});
            out.push_back({p + "w_down", l.w_down});
        }
        out.push_back({"final_norm", final_norm});
        out.push_back({"w_out", w_out});
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) {
            n += p.tensor.size();
        }
        return n;
    }

    void zero_grad() {
        for (auto& p : parameters()) {
            p.tensor.zero_grad();
        }
    }

    template <class U>
    BasicModel<U> cast() const {
        BasicModel<U> out(cfg_);
        auto src = parameters();
        auto dst = out.parameters();
        for (std::size_t i = 0; i < src.size(); ++i) {
            auto d = dst[i].tensor.mutable_data();
            auto s = src[i].tensor.data();
            for (std::size_t k = 0; k < s.size(); ++k) {
                d[k] = static_cast<U>(s[k]);
            }
        }
        return out;
    }

    /// Logits over every augmented position, [n x vocab].
    BasicTensor<T> logits(const AugmentedSequence& aug, BasicForwardCapture<T>* capture = nullptr) const;

    BasicTensor<T> tok_emb;
    std::vector<LayerWeights<T>> layers;
    BasicTensor<T> final_norm;
    BasicTensor<T> w_out;

private:
    ModelConfig cfg_;
};

using Model = BasicModel<float>;

namespace detail {

template <class T>
std::vector<double> row_norms(std::span<const T> data, std::size_t rows, std::size_t cols) {
    std::vector<double> out(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double v = data[i * cols + j];
            ss += v * v;
        }
        out[i] = std::sqrt(ss);
    }
    return out;
}

} // namespace detail

/// Replaces value rows at sink positions with exact zeros (all heads).
template <class T>
BasicTensor<T> zero_value_hook(const BasicTensor<T>& values, std::span<const std::size_t> sink_positions) {
    if (sink_positions.empty()) {
        return values;
    }
    return zero_rows(values, sink_positions);
}

/// Multi-head attention on an already-normalized input. Returns the
/// projected update (residual add is the caller's job).
template <class T>
BasicTensor<T> attention_forward(const BasicTensor<T>& x, const BasicTensor<T>* mask_bias, const LayerWeights<T>& w,
                                 const ModelConfig& cfg, std::span<const std::size_t> positions,
                                 std::span<const std::size_t> sink_positions,
                                 BasicForwardCapture<T>* capture = nullptr, std::size_t layer_index = 0) {
    detail::require_rank2(x, "attention_forward");
    const std::size_t n = x.rows(), dh = cfg.head_dim();
    if (mask_bias && (mask_bias->rank() != 2 || mask_bias->rows() != n || mask_bias->cols() != n)) {
        throw DimensionError("attention_forward: mask bias " + shape_string(mask_bias->shape()) +
                             " does not match sequence length " + std::to_string(n));
    }
    auto q = rope(matmul(x, w.wq), positions, dh, cfg.rope_base);
    auto k = rope(matmul(x, w.wk), positions, dh, cfg.rope_base);
    auto v_in = matmul(x, w.wv);
    auto v = cfg.sink.zero_value ? zero_value_hook(v_in, sink_positions) : v_in;

    AttentionTrace trace;
    if (capture) {
        trace.layer = layer_index;
        trace.rows = n;
        trace.cols = n;
        trace.head_dim = dh;
        trace.query_index = AttentionTrace::identity_rows(n);
        capture->value_inputs.push_back(v_in);
    }

    const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<BasicTensor<T>> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        auto qh = slice_cols(q, h * dh, dh);
        auto kh = slice_cols(k, h * dh, dh);
        auto vh = slice_cols(v, h * dh, dh);
        auto alpha = softmax_lastdim(scale(matmul(qh, transpose(kh)), inv_sqrt), mask_bias);
        auto oh = matmul(alpha, vh);
        if (capture) {
            HeadTrace ht;
            ht.attention.assign(alpha.data().begin(), alpha.data().end());
            ht.value_norms = detail::row_norms(vh.data(), n, dh);
            ht.output_norms = detail::row_norms(oh.data(), n, dh);
            if (capture->options.raw_vectors) {
                ht.values.assign(vh.data().begin(), vh.data().end());
                ht.outputs.assign(oh.data().begin(), oh.data().end());
            }
            trace.heads.push_back(std::move(ht));
        }
        heads.push_back(std::move(oh));
    }
    if (capture) {
        capture->layers.push_back(std::move(trace));
    }
    auto y = cfg.n_heads == 1 ? heads.front() : concat_cols(heads);
    if (cfg.attention_variant == AttentionVariant::gated) {
        y = mul(y, sigmoid(matmul(x, w.wg)));
    }
    return matmul(y, w.wo);
}

/// h' = h + Attn(norm(h)); h'' = h' + MLP(norm(h')).
template <class T>
BasicTensor<T> block_forward(const BasicTensor<T>& h, const BasicTensor<T>* mask_bias, const LayerWeights<T>& w,
                             const ModelConfig& cfg, std::span<const std::size_t> positions,
                             std::span<const std::size_t> sink_positions, BasicForwardCapture<T>* capture = nullptr,
                             std::size_t layer_index = 0) {
    auto attn = attention_forward(rms_norm(h, w.attn_norm, cfg.norm_eps), mask_bias, w, cfg, positions,
                                  sink_positions, capture, layer_index);
    auto h1 = add(h, attn);
    auto mlp = matmul(silu(matmul(rms_norm(h1, w.mlp_norm, cfg.norm_eps), w.w_up)), w.w_down);
    auto h2 = add(h1, mlp);
    if (capture && capture->options.hidden_states) {
        capture->hidden.emplace_back(h2.data().begin(), h2.data().end());
    }
    return h2;
}

/// Full forward with explicit rotary positions and an optional mask bias.
template <class T>
BasicTensor<T> model_forward(const BasicModel<T>& model, std::span<const TokenId> ids,
                             std::span<const std::size_t> positions, const BasicTensor<T>* mask_bias,
                             std::span<const std::size_t> sink_positions, BasicForwardCapture<T>* capture = nullptr) {
    const auto& cfg = model.config();
    if (ids.empty()) {
        throw LengthError("model_forward: empty sequence");
    }
    if (ids.size() > cfg.max_seq_len) {
        throw LengthError("model_forward: sequence of " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                          std::to_string(cfg.max_seq_len));
    }
    if (positions.size() != ids.size()) {
        throw DimensionError("model_forward: positions and ids differ in length");
    }
    auto h = embedding(model.tok_emb, ids);
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        h = block_forward(h, mask_bias, model.layers[l], cfg, positions, sink_positions, capture, l);
    }
    return matmul(rms_norm(h, model.final_norm, cfg.norm_eps), model.w_out);
}

/// Forward over a sink-augmented sequence: rotary index = augmented index,
/// mask bias present only when the sequence carries sinks.
template <class T>
BasicTensor<T> forward_augmented(const BasicModel<T>& model, const AugmentedSequence& aug,
                                 BasicForwardCapture<T>* capture = nullptr) {
    const std::size_t n = aug.size();
    std::vector<std::size_t> positions(n);
    for (std::size_t i = 0; i < n; ++i) {
        positions[i] = i;
    }
    if (aug.sink_positions.empty()) {
        return model_forward<T>(model, aug.ids, positions, nullptr, aug.sink_positions, capture);
    }
    const auto bias = build_mask_bias<T>(n, aug.sink_positions);
    return model_forward<T>(model, aug.ids, positions, &bias, aug.sink_positions, capture);
}

template <class T>
BasicTensor<T> BasicModel<T>::logits(const AugmentedSequence& aug, BasicForwardCapture<T>* capture) const {
    return forward_augmented(*this, aug, capture);
}

} // namespace sinkdiff
