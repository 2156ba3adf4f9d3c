#pragma once

// Sink diagnostics over captured attention traces: head-averaged value norms,
// attention mass received by sinks, sink detection for models without an
// explicit sink, the triangle-inequality output bound, and streaming
// per-layer summaries.

#include "sinkdiff/errors.hpp"
#include "sinkdiff/trace.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace sinkdiff {

struct TraceRecord {
    std::size_t step = 0;
    std::vector<std::size_t> sink_positions; // sorted, augmented indices
    AttentionTrace attention;

    std::size_t layer() const noexcept { return attention.layer; }
    std::size_t length() const noexcept { return attention.cols; }
    bool is_sink(std::size_t j) const {
        return std::binary_search(sink_positions.begin(), sink_positions.end(), j);
    }
};

/// Neumaier-compensated running sum.
class CompensatedSum {
public:
    void add(double x) noexcept {
        const double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x)) {
            comp_ += (sum_ - t) + x;
        } else {
            comp_ += (x - t) + sum_;
        }
        sum_ = t;
    }
    void merge(const CompensatedSum& o) noexcept {
        add(o.sum_);
        add(o.comp_);
    }
    double value() const noexcept { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

/// Head-averaged value norm of every key token: mean over heads of ||v_j||.
inline std::vector<double> value_norms(const TraceRecord& rec) {
    const auto& tr = rec.attention;
    std::vector<double> out(tr.cols, 0.0);
    if (tr.heads.empty()) {
        return out;
    }
    for (const auto& h : tr.heads) {
        for (std::size_t j = 0; j < tr.cols; ++j) {
            out[j] += h.value_norms[j];
        }
    }
    for (auto& v : out) {
        v /= static_cast<double>(tr.heads.size());
    }
    return out;
}

/// Mean over heads and non-sink query rows of the attention mass landing on sink columns.
inline double sink_attention_mass(const TraceRecord& rec) {
    if (rec.sink_positions.empty()) {
        throw AnalysisError("sink_attention_mass: record has no sink positions");
    }
    const auto& tr = rec.attention;
    CompensatedSum total;
    std::size_t count = 0;
    for (const auto& h : tr.heads) {
        for (std::size_t r = 0; r < tr.rows; ++r) {
            if (rec.is_sink(tr.query_index[r])) {
                continue;
            }
            double mass = 0.0;
            for (std::size_t k : rec.sink_positions) {
                mass += h.attention[r * tr.cols + k];
            }
            total.add(mass);
            ++count;
        }
    }
    if (count == 0) {
        throw AnalysisError("sink_attention_mass: no non-sink query rows");
    }
    return total.value() / static_cast<double>(count);
}

/// Tokens whose received attention, averaged over all query rows and heads, exceeds `threshold`.
inline std::vector<std::size_t> detect_sinks(const TraceRecord& rec, double threshold = 0.3) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw AnalysisError("detect_sinks: threshold must lie in (0, 1)");
    }
    const auto& tr = rec.attention;
    std::vector<double> col(tr.cols, 0.0);
    for (const auto& h : tr.heads) {
        for (std::size_t r = 0; r < tr.rows; ++r) {
            for (std::size_t j = 0; j < tr.cols; ++j) {
                col[j] += h.attention[r * tr.cols + j];
            }
        }
    }
    const double denom = static_cast<double>(tr.rows * tr.heads.size());
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < tr.cols; ++j) {
        if (denom > 0.0 && col[j] / denom > threshold) {
            out.push_back(j);
        }
    }
    return out;
}

/// Per-layer sink sets for the records of one denoising step.
inline std::vector<std::vector<std::size_t>> detect_sinks(std::span<const TraceRecord> step_records,
                                                          double threshold = 0.3) {
    std::size_t layers = 0;
    for (const auto& r : step_records) {
        layers = std::max(layers, r.layer() + 1);
    }
    std::vector<std::vector<std::size_t>> out(layers);
    for (const auto& r : step_records) {
        out[r.layer()] = detect_sinks(r, threshold);
    }
    return out;
}

/// max_i ||o_i|| - sum_j alpha_ij ||v_j|| for one head, from raw vectors.
inline double noop_bound_violation(std::span<const double> alpha, std::span<const double> values,
                                   std::span<const double> outputs, std::size_t rows, std::size_t cols,
                                   std::size_t head_dim) {
    if (alpha.size() != rows * cols || values.size() != cols * head_dim || outputs.size() != rows * head_dim) {
        throw AnalysisError("noop_bound_violation: inconsistent sizes");
    }
    std::vector<double> vnorm(cols);
    for (std::size_t j = 0; j < cols; ++j) {
        double ss = 0.0;
        for (std::size_t k = 0; k < head_dim; ++k) {
            ss += values[j * head_dim + k] * values[j * head_dim + k];
        }
        vnorm[j] = std::sqrt(ss);
    }
    double worst = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < rows; ++i) {
        double ss = 0.0;
        for (std::size_t k = 0; k < head_dim; ++k) {
            ss += outputs[i * head_dim + k] * outputs[i * head_dim + k];
        }
        double bound = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            bound += alpha[i * cols + j] * vnorm[j];
        }
        worst = std::max(worst, std::sqrt(ss) - bound);
    }
    return worst;
}

/// Bound violation over every head and query of a record. Uses the raw
/// vectors when present, otherwise the stored norms.
inline double noop_bound_check(const TraceRecord& rec) {
    const auto& tr = rec.attention;
    double worst = -std::numeric_limits<double>::infinity();
    for (const auto& h : tr.heads) {
        if (!h.values.empty() && !h.outputs.empty()) {
            worst = std::max(worst, noop_bound_violation(h.attention, h.values, h.outputs, tr.rows, tr.cols,
                                                         tr.head_dim));
            continue;
        }
        for (std::size_t i = 0; i < tr.rows; ++i) {
            double bound = 0.0;
            for (std::size_t j = 0; j < tr.cols; ++j) {
                bound += h.attention[i * tr.cols + j] * h.value_norms[j];
            }
            worst = std::max(worst, h.output_norms[i] - bound);
        }
    }
    return worst;
}

struct LayerStats {
    std::size_t layer = 0;
    std::optional<double> sink_norm_mean; // empty when no record had sinks
    double other_norm_mean = 0.0;
    std::optional<double> sink_attn_mass;
    std::size_t samples = 0;
};

/// Streaming per-layer means; accumulators for disjoint record sets merge associatively.
class LayerStatsAccumulator {
public:
    void add(const TraceRecord& rec) {
        auto& a = slot(rec.layer());
        const auto norms = value_norms(rec);
        CompensatedSum sink, other;
        std::size_t n_sink = 0, n_other = 0;
        for (std::size_t j = 0; j < norms.size(); ++j) {
            if (rec.is_sink(j)) {
                sink.add(norms[j]);
                ++n_sink;
            } else {
                other.add(norms[j]);
                ++n_other;
            }
        }
        ++a.samples;
        if (n_other > 0) {
            a.other_norm.add(other.value() / static_cast<double>(n_other));
            ++a.other_samples;
        }
        if (n_sink > 0) {
            a.sink_norm.add(sink.value() / static_cast<double>(n_sink));
            a.sink_mass.add(sink_attention_mass(rec));
            ++a.sink_samples;
        }
    }

    void merge(const LayerStatsAccumulator& o) {
        for (std::size_t l = 0; l < o.layers_.size(); ++l) {
            auto& a = slot(l);
            const auto& b = o.layers_[l];
            a.sink_norm.merge(b.sink_norm);
            a.other_norm.merge(b.other_norm);
            a.sink_mass.merge(b.sink_mass);
            a.samples += b.samples;
            a.sink_samples += b.sink_samples;
            a.other_samples += b.other_samples;
        }
    }

    std::vector<LayerStats> finish() const {
        std::vector<LayerStats> out;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& a = layers_[l];
            if (a.samples == 0) {
                continue;
            }
            LayerStats s;
            s.layer = l;
            s.samples = a.samples;
            if (a.other_samples > 0) {
                s.other_norm_mean = a.other_norm.value() / static_cast<double>(a.other_samples);
            }
            if (a.sink_samples > 0) {
                s.sink_norm_mean = a.sink_norm.value() / static_cast<double>(a.sink_samples);
                s.sink_attn_mass = a.sink_mass.value() / static_cast<double>(a.sink_samples);
            }
            out.push_back(s);
        }
        return out;
    }

private:
    struct Slot {
        CompensatedSum sink_norm, other_norm, sink_mass;
        std::size_t samples = 0, sink_samples = 0, other_samples = 0;
    };

    Slot& slot(std::size_t layer) {
        if (layer >= layers_.size()) {
            layers_.resize(layer + 1);
        }
        return layers_[layer];
    }

    std::vector<Slot> layers_;
};

inline std::vector<LayerStats> summarize(std::span<const TraceRecord> records) {
    if (records.empty()) {
        throw AnalysisError("summarize: no records");
    }
    LayerStatsAccumulator acc;
    for (const auto& r : records) {
        acc.add(r);
    }
    return acc.finish();
}

namespace detail {

inline void write_optional(std::ostream& os, const std::optional<double>& v) {
    if (v) {
        os << *v;
    } else {
        os << "nan";
    }
}

} // namespace detail

/// layer_stats.csv. `comment` (e.g. the run config as JSON) is written as a
/// leading "# ..." line when non-empty.
inline void write_layer_stats_csv(std::ostream& os, std::span<const LayerStats> stats, const std::string& comment = {}) {
    if (!comment.empty()) {
        os << "# " << comment << '\n';
    }
    os << "layer,sink_norm_mean,other_norm_mean,sink_attn_mass,samples\n";
    os << std::setprecision(17);
    for (const auto& s : stats) {
        os << s.layer << ',';
        detail::write_optional(os, s.sink_norm_mean);
        os << ',' << s.other_norm_mean << ',';
        detail::write_optional(os, s.sink_attn_mass);
        os << ',' << s.samples << '\n';
    }
}

inline void write_norm_scatter_header(std::ostream& os, const std::string& comment = {}) {
    if (!comment.empty()) {
        os << "# " << comment << '\n';
    }
    os << "token_kind,norm\n";
}

/// One row per token of the record: its head-averaged value norm.
inline void write_norm_scatter_rows(std::ostream& os, const TraceRecord& rec) {
    const auto norms = value_norms(rec);
    os << std::setprecision(17);
    for (std::size_t j = 0; j < norms.size(); ++j) {
        os << (rec.is_sink(j) ? "sink" : "other") << ',' << norms[j] << '\n';
    }
}

} // namespace sinkdiff
