#pragma once

// Absorbing-state masked diffusion: forward corruption, the 1/tau-weighted
// masked-token objective, and the parallel denoising sampler.

#include "sinkdiff/errors.hpp"
#include "sinkdiff/nn.hpp"
#include "sinkdiff/random.hpp"
#include "sinkdiff/sequence.hpp"
#include "sinkdiff/sink.hpp"
#include "sinkdiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace sinkdiff {

class NoiseSchedule {
public:
    NoiseSchedule() : NoiseSchedule(linear(1)) {}

    /// tau_1..tau_T: each in (0, 1], non-decreasing, tau_T == 1.
    explicit NoiseSchedule(std::vector<double> tau) : tau_(std::move(tau)) {
        if (tau_.empty()) {
            throw ConfigError("noise schedule needs at least one step");
        }
        for (std::size_t i = 0; i < tau_.size(); ++i) {
            if (!(tau_[i] > 0.0 && tau_[i] <= 1.0)) {
                throw ConfigError("noise schedule: tau_" + std::to_string(i + 1) + " = " + std::to_string(tau_[i]) +
                                  " outside (0, 1]");
            }
            if (i > 0 && tau_[i] < tau_[i - 1]) {
                throw ConfigError("noise schedule must be non-decreasing");
            }
        }
        if (tau_.back() != 1.0) {
            throw ConfigError("noise schedule must end at tau_T = 1");
        }
    }

    /// tau_t = t / T.
    static NoiseSchedule linear(std::size_t steps) {
        if (steps == 0) {
            throw ConfigError("noise schedule needs at least one step");
        }
        std::vector<double> tau(steps);
        for (std::size_t t = 1; t <= steps; ++t) {
            tau[t - 1] = static_cast<double>(t) / static_cast<double>(steps);
        }
        return NoiseSchedule(std::move(tau));
    }

    std::size_t steps() const noexcept { return tau_.size(); }
    const std::vector<double>& taus() const noexcept { return tau_; }

    /// 1-based step lookup.
    double at(std::size_t t) const {
        if (t < 1 || t > tau_.size()) {
            throw StepError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(tau_.size()) +
                            "]");
        }
        return tau_[t - 1];
    }

private:
    std::vector<double> tau_;
};

/// Masks each non-pad position independently with probability tau.
inline TokenSequence corrupt_at_rate(const TokenSequence& x0, double tau, std::uint64_t seed,
                                     TokenId mask_id = Vocab::kMaskId, TokenId pad_id = Vocab::kPadId) {
    if (!(tau > 0.0 && tau <= 1.0)) {
        throw StepError("masking rate " + std::to_string(tau) + " outside (0, 1]");
    }
    std::mt19937_64 rng(seed);
    TokenSequence xt = x0;
    for (std::size_t i = 0; i < xt.size(); ++i) {
        const double u = uniform01(rng);
        if (x0.ids[i] != pad_id && u < tau) {
            xt.ids[i] = mask_id;
            xt.mask_flags[i] = true;
        }
    }
    return xt;
}

/// Samples x_t ~ q(x_t | x_0) directly from the marginal masking rate tau_t.
inline TokenSequence corrupt(const TokenSequence& x0, std::size_t t, const NoiseSchedule& schedule,
                             std::uint64_t seed, TokenId mask_id = Vocab::kMaskId,
                             TokenId pad_id = Vocab::kPadId) {
    return corrupt_at_rate(x0, schedule.at(t), seed, mask_id, pad_id);
}

template <class T>
struct MaskedLoss {
    BasicTensor<T> value;
    std::size_t masked_count = 0;

    /// Set when no position was masked; value is then exactly 0.
    bool no_masked_positions() const noexcept { return masked_count == 0; }
};

/// (1/tau) * sum over masked positions of -log p(x0_i | x_t).
/// `logits` holds one row per content position (sink rows already stripped).
template <class T>
MaskedLoss<T> masked_loss(const BasicTensor<T>& logits, const TokenSequence& x0, const TokenSequence& xt,
                          double tau) {
    if (!(tau > 0.0 && tau <= 1.0)) {
        throw StepError("masked_loss: tau " + std::to_string(tau) + " outside (0, 1]");
    }
    if (logits.rank() != 2 || logits.rows() != x0.size() || xt.size() != x0.size()) {
        throw DimensionError("masked_loss: logits " + shape_string(logits.shape()) + " for sequences of length " +
                             std::to_string(x0.size()) + " / " + std::to_string(xt.size()));
    }
    std::vector<double> weights(x0.size(), 0.0);
    std::size_t masked = 0;
    for (std::size_t i = 0; i < x0.size(); ++i) {
        if (xt.mask_flags[i]) {
            weights[i] = 1.0 / tau;
            ++masked;
        }
    }
    MaskedLoss<T> out;
    out.masked_count = masked;
    if (masked == 0) {
        out.value = BasicTensor<T>::scalar(T(0));
        return out;
    }
    out.value = cross_entropy_rows(logits, std::span<const TokenId>(x0.ids), std::span<const double>(weights));
    return out;
}

enum class UnmaskStrategy { confidence, random };

inline std::string_view to_string(UnmaskStrategy s) { return s == UnmaskStrategy::confidence ? "confidence" : "random"; }

inline UnmaskStrategy parse_unmask_strategy(std::string_view s) {
    if (s == "confidence") {
        return UnmaskStrategy::confidence;
    }
    if (s == "random") {
        return UnmaskStrategy::random;
    }
    throw ConfigError("unmasking strategy must be \"confidence\" or \"random\", got \"" + std::string(s) + "\"");
}

/// Anything producing [n_augmented x vocab] logits for an augmented sequence.
template <class M>
concept LogitModel = requires(const M& m, const AugmentedSequence& aug, ForwardCapture* capture) {
    { m.logits(aug, capture) } -> std::convertible_to<Tensor>;
};

struct StepReport {
    std::size_t step = 0;
    std::size_t masked_before = 0;
    std::vector<std::size_t> committed; // content positions filled this step
    const AugmentedSequence* augmented = nullptr;
    const ForwardCapture* capture = nullptr; // non-null when capture was requested
};

struct DenoiseOptions {
    TokenId mask_id = Vocab::kMaskId;
    TokenId sink_id = Vocab::kSinkId;
    TokenId pad_id = Vocab::kPadId;
    double temperature = 0.0; // 0 = greedy argmax
    bool capture = false;
    CaptureOptions capture_options;
    std::function<void(const StepReport&)> on_step;
};

namespace detail {

struct Candidate {
    std::size_t position;
    TokenId token;
    double confidence;
};

inline Candidate decode_position(std::span<const float> row, std::size_t position, const DenoiseOptions& opt,
                                 std::mt19937_64& rng) {
    const std::size_t vocab = row.size();
    auto allowed = [&](std::size_t j) {
        const auto id = static_cast<TokenId>(j);
        return id != opt.mask_id && id != opt.sink_id && id != opt.pad_id;
    };
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < vocab; ++j) {
        mx = std::max(mx, static_cast<double>(row[j]));
    }
    std::vector<double> p(vocab);
    double total = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) {
        p[j] = std::exp(static_cast<double>(row[j]) - mx);
        total += p[j];
    }
    std::size_t best = vocab;
    if (opt.temperature > 0.0) {
        std::vector<double> w(vocab, 0.0);
        double wt = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            if (allowed(j)) {
                w[j] = std::exp((static_cast<double>(row[j]) - mx) / opt.temperature);
                wt += w[j];
            }
        }
        double u = uniform01(rng) * wt;
        for (std::size_t j = 0; j < vocab; ++j) {
            if (w[j] == 0.0) {
                continue;
            }
            best = j;
            if (u < w[j]) {
                break;
            }
            u -= w[j];
        }
    } else {
        for (std::size_t j = 0; j < vocab; ++j) {
            if (allowed(j) && (best == vocab || row[j] > row[best])) {
                best = j;
            }
        }
    }
    if (best == vocab) {
        throw ConfigError("denoise: vocabulary has no decodable token");
    }
    return {position, static_cast<TokenId>(best), p[best] / total};
}

} // namespace detail

/// One reverse step: predict every masked position in parallel and commit
/// min(n_unmask, #masked) of them. Sinks are never decoded.
template <LogitModel M>
TokenSequence denoise_step(const TokenSequence& xt, const M& model, const SinkConfig& sink_cfg, std::size_t n_unmask,
                           UnmaskStrategy strategy, std::uint64_t seed, const DenoiseOptions& opt = {},
                           std::size_t step_index = 0) {
    const std::size_t masked = xt.masked_count();
    if (masked == 0) {
        throw NoMaskError("denoise_step: sequence has no masked positions");
    }
    if (n_unmask == 0) {
        throw ConfigError("denoise_step: n_unmask must be at least 1");
    }
    const auto aug = augment(xt, sink_cfg, opt.sink_id);
    ForwardCapture capture;
    capture.options = opt.capture_options;
    const Tensor all_logits = model.logits(aug, opt.capture ? &capture : nullptr);
    const Tensor logits = strip(all_logits, aug);
    const std::size_t vocab = logits.cols();

    std::mt19937_64 rng(seed);
    std::vector<detail::Candidate> cands;
    cands.reserve(masked);
    for (std::size_t i = 0; i < xt.size(); ++i) {
        if (xt.mask_flags[i]) {
            cands.push_back(detail::decode_position(logits.data().subspan(i * vocab, vocab), i, opt, rng));
        }
    }
    const std::size_t take = std::min(n_unmask, cands.size());
    if (strategy == UnmaskStrategy::confidence) {
        std::stable_sort(cands.begin(), cands.end(),
                         [](const auto& a, const auto& b) { return a.confidence > b.confidence; });
    } else {
        // partial Fisher-Yates: the first `take` entries become a uniform choice
        for (std::size_t i = 0; i < take; ++i) {
            const auto j = i + static_cast<std::size_t>(uniform_below(rng, cands.size() - i));
            std::swap(cands[i], cands[j]);
        }
    }
    TokenSequence out = xt;
    StepReport report;
    report.step = step_index;
    report.masked_before = masked;
    for (std::size_t c = 0; c < take; ++c) {
        out.set(cands[c].position, cands[c].token, opt.mask_id);
        report.committed.push_back(cands[c].position);
    }
    if (opt.on_step) {
        report.augmented = &aug;
        report.capture = opt.capture ? &capture : nullptr;
        opt.on_step(report);
    }
    return out;
}

/// Reverse process from a partially masked sequence: unmasked positions act as
/// a fixed prompt. Step k commits ceil(remaining / remaining_steps) positions,
/// so at most `steps` forwards run.
template <LogitModel M>
TokenSequence sample_from(TokenSequence x, const M& model, const SinkConfig& sink_cfg, std::size_t steps,
                          UnmaskStrategy strategy, std::uint64_t seed, const DenoiseOptions& opt = {}) {
    if (steps == 0 || x.size() == 0) {
        throw ConfigError("sample: length and steps must be at least 1");
    }
    for (std::size_t k = 0; k < steps; ++k) {
        const std::size_t remaining = x.masked_count();
        if (remaining == 0) {
            break;
        }
        const std::size_t left = steps - k;
        const std::size_t budget = (remaining + left - 1) / left;
        x = denoise_step(x, model, sink_cfg, budget, strategy, mix_seed(seed, k), opt, k);
    }
    return x;
}

/// Full reverse process from an all-mask sequence of `length`.
template <LogitModel M>
TokenSequence sample(std::size_t length, const M& model, const SinkConfig& sink_cfg, std::size_t steps,
                     UnmaskStrategy strategy, std::uint64_t seed, const DenoiseOptions& opt = {}) {
    return sample_from(TokenSequence::all_masked(length, opt.mask_id), model, sink_cfg, steps, strategy, seed, opt);
}

/// `length` positions: the prompt bytes followed by masks.
inline TokenSequence prompted(std::string_view prompt, std::size_t length, TokenId mask_id = Vocab::kMaskId) {
    if (prompt.size() > length) {
        throw ConfigError("prompt of " + std::to_string(prompt.size()) + " bytes exceeds length " +
                          std::to_string(length));
    }
    std::vector<TokenId> ids(length, mask_id);
    for (std::size_t i = 0; i < prompt.size(); ++i) {
        ids[i] = static_cast<TokenId>(static_cast<unsigned char>(prompt[i]));
    }
    return TokenSequence(std::move(ids), mask_id);
}

} // namespace sinkdiff
