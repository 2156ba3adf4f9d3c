#pragma once

// Whole-model gradient check: analytic gradients of a small double-precision
// model against central finite differences, one report per attention variant.

#include "sinkdiff/nn.hpp"
#include "sinkdiff/random.hpp"
#include "sinkdiff/sink.hpp"
#include "sinkdiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace sinkdiff {

struct GradcheckVariant {
    std::string name;
    ModelConfig config;
};

/// 2 layers, 2 heads, d_model 16, in every configuration the engine supports.
inline std::vector<GradcheckVariant> gradcheck_variants() {
    ModelConfig base;
    base.n_layers = 2;
    base.n_heads = 2;
    base.d_model = 16;
    base.max_seq_len = 16;
    std::vector<GradcheckVariant> out;
    out.push_back({"vanilla", base});
    auto front = base;
    front.sink.count = 1;
    out.push_back({"sink_front", front});
    auto end = front;
    end.sink.placement = SinkPlacement::end;
    out.push_back({"sink_end", end});
    auto zero = front;
    zero.sink.zero_value = true;
    out.push_back({"zero_value", zero});
    auto gated = base;
    gated.attention_variant = AttentionVariant::gated;
    out.push_back({"gated", gated});
    return out;
}

struct GradcheckReport {
    std::string variant;
    double max_rel_error = 0.0;
    std::string worst_parameter;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t entries_checked = 0;
    std::optional<bool> sink_value_grad_zero; // zero-value variants only
};

struct GradcheckOptions {
    double h = 1e-3;
    double weight_gain = 1.0;
    // Denominator floor: below it, relative error measures finite-difference
    // truncation (which shrinks as h^2) rather than gradient mistakes.
    double abs_floor = 1e-3;
    std::size_t content_length = 5;
};

namespace detail {

struct GradcheckProblem {
    AugmentedSequence aug;
    std::vector<TokenId> targets;
    std::vector<double> weights;
};

inline GradcheckProblem make_gradcheck_problem(const ModelConfig& cfg, std::uint64_t seed, std::size_t length) {
    std::mt19937_64 rng(seed);
    std::vector<TokenId> ids(length);
    for (std::size_t i = 0; i < length; ++i) {
        // a mix of byte ids and masks, as seen during training
        ids[i] = uniform_below(rng, 3) == 0 ? cfg.mask_id : static_cast<TokenId>(uniform_below(rng, 256));
    }
    GradcheckProblem p;
    p.aug = augment(TokenSequence(ids, cfg.mask_id), cfg.sink, cfg.sink_id);
    for (std::size_t i = 0; i < length; ++i) {
        p.targets.push_back(static_cast<TokenId>(uniform_below(rng, 256)));
        p.weights.push_back(0.5 + uniform01(rng));
    }
    return p;
}

inline BasicTensor<double> gradcheck_loss(const BasicModel<double>& model, const GradcheckProblem& p,
                                          BasicForwardCapture<double>* capture = nullptr) {
    const auto logits = strip(forward_augmented(model, p.aug, capture), p.aug);
    return cross_entropy_rows(logits, p.targets, p.weights);
}

} // namespace detail

inline GradcheckReport gradcheck_variant(const GradcheckVariant& variant, std::uint64_t seed,
                                         const GradcheckOptions& opt = {}) {
    GradcheckReport report;
    report.variant = variant.name;
    auto model = BasicModel<double>::randomized(variant.config, mix_seed(seed, 1), opt.weight_gain);
    const auto problem = detail::make_gradcheck_problem(variant.config, mix_seed(seed, 2), opt.content_length);

    BasicForwardCapture<double> capture;
    {
        BasicTape<double> tape;
        BasicTensor<double> loss;
        {
            BasicTapeScope<double> scope(tape);
            loss = detail::gradcheck_loss(model, problem, &capture);
        }
        tape.backward(loss);
    }
    if (variant.config.sink.zero_value) {
        bool zero = true;
        const std::size_t d = variant.config.d_model;
        for (const auto& v : capture.value_inputs) {
            const auto g = v.grad();
            for (std::size_t k : problem.aug.sink_positions) {
                for (std::size_t c = 0; c < d; ++c) {
                    zero = zero && (g.empty() || g[k * d + c] == 0.0);
                }
            }
        }
        report.sink_value_grad_zero = zero;
    }

    for (auto& p : model.parameters()) {
        const std::vector<double> analytic(p.tensor.grad().begin(), p.tensor.grad().end());
        auto data = p.tensor.mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + opt.h;
            const double up = detail::gradcheck_loss(model, problem).item();
            data[i] = orig - opt.h;
            const double down = detail::gradcheck_loss(model, problem).item();
            data[i] = orig;
            const double numeric = (up - down) / (2.0 * opt.h);
            const double a = analytic.empty() ? 0.0 : analytic[i];
            const double denom = std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > report.max_rel_error || std::isnan(rel)) {
                report.max_rel_error = std::isnan(rel) ? std::numeric_limits<double>::infinity() : rel;
                report.worst_parameter = p.name + "[" + std::to_string(i) + "]";
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            ++report.entries_checked;
        }
    }
    return report;
}

inline std::vector<GradcheckReport> gradcheck_all(std::uint64_t seed, const GradcheckOptions& opt = {}) {
    std::vector<GradcheckReport> out;
    for (const auto& v : gradcheck_variants()) {
        out.push_back(gradcheck_variant(v, seed, opt));
    }
    return out;
}

} // namespace sinkdiff
