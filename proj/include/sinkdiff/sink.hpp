#pragma once

// Extra sink token(s): sequence augmentation, the self-only attention mask
// bias, and the inverse mapping back to content positions.

#include "sinkdiff/errors.hpp"
#include "sinkdiff/sequence.hpp"
#include "sinkdiff/tensor.hpp"
#include "sinkdiff/trace.hpp"

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace sinkdiff {

enum class SinkPlacement { front, end };

inline std::string_view to_string(SinkPlacement p) { return p == SinkPlacement::front ? "front" : "end"; }

inline SinkPlacement parse_sink_placement(std::string_view s) {
    if (s == "front") {
        return SinkPlacement::front;
    }
    if (s == "end") {
        return SinkPlacement::end;
    }
    throw ConfigError("sink.placement must be \"front\" or \"end\", got \"" + std::string(s) + "\"");
}

struct SinkConfig {
    std::size_t count = 0; // 0 = vanilla
    SinkPlacement placement = SinkPlacement::front;
    bool zero_value = false;
    bool trainable_embedding = true;

    /// Counts used in the sink-count ablation; other values work but are flagged.
    bool is_ablation_count() const noexcept { return count == 0 || count == 1 || count == 2 || count == 4; }

    void validate() const {
        if (zero_value && count == 0) {
            throw ConfigError("sink.zero_value requires sink.count >= 1");
        }
    }

    bool operator==(const SinkConfig&) const = default;
};

struct AugmentedSequence {
    std::vector<TokenId> ids;
    std::vector<std::size_t> sink_positions;                   // sorted
    std::vector<std::optional<std::size_t>> content_index_map; // augmented index -> content index
    std::vector<std::size_t> content_rows;                     // content index -> augmented index

    std::size_t size() const noexcept { return ids.size(); }
    bool is_sink(std::size_t i) const {
        return std::binary_search(sink_positions.begin(), sink_positions.end(), i);
    }
};

/// Inserts cfg.count sink tokens before (front) or after (end) the content.
inline AugmentedSequence augment(const TokenSequence& x, const SinkConfig& cfg, TokenId sink_id = Vocab::kSinkId) {
    cfg.validate();
    const std::size_t len = x.size();
    const std::size_t k = cfg.count;
    AugmentedSequence out;
    out.ids.reserve(len + k);
    out.content_index_map.reserve(len + k);
    out.content_rows.reserve(len);
    const std::size_t first_content = cfg.placement == SinkPlacement::front ? k : 0;
    const std::size_t first_sink = cfg.placement == SinkPlacement::front ? 0 : len;
    for (std::size_t s = 0; s < k; ++s) {
        out.sink_positions.push_back(first_sink + s);
    }
    for (std::size_t i = 0; i < len + k; ++i) {
        const bool sink = i >= first_sink && i < first_sink + k;
        if (sink) {
            out.ids.push_back(sink_id);
            out.content_index_map.emplace_back(std::nullopt);
        } else {
            const std::size_t c = i - (i >= first_content ? first_content : 0);
            out.ids.push_back(x.ids[c]);
            out.content_index_map.emplace_back(c);
            out.content_rows.push_back(i);
        }
    }
    return out;
}

/// n x n additive bias: a sink row may only attend to its own column;
/// every other entry is 0. Masked entries hold mask_sentinel<T>().
template <class T = float>
BasicTensor<T> build_mask_bias(std::size_t n, std::span<const std::size_t> sink_positions) {
    std::vector<T> data(n * n, T(0));
    for (std::size_t k : sink_positions) {
        if (k >= n) {
            throw IndexError("build_mask_bias: sink position " + std::to_string(k) + " outside length " +
                             std::to_string(n));
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (j != k) {
                data[k * n + j] = mask_sentinel<T>();
            }
        }
    }
    return BasicTensor<T>({n, n}, std::move(data));
}

/// Drops sink rows from per-position outputs (logits), keeping content order.
/// Differentiable: gradients flow back to the kept rows.
template <class T>
BasicTensor<T> strip(const BasicTensor<T>& rows, const AugmentedSequence& aug) {
    if (rows.rank() != 2 || rows.rows() != aug.content_index_map.size()) {
        throw ConsistencyError("strip: " + shape_string(rows.shape()) + " does not match an augmented length of " +
                               std::to_string(aug.content_index_map.size()));
    }
    if (aug.sink_positions.empty()) {
        return rows;
    }
    return select_rows(rows, std::span<const std::size_t>(aug.content_rows));
}

/// Drops sink query rows from a trace. Key columns (including the sink
/// columns) and per-key value norms are retained.
inline AttentionTrace strip_trace(const AttentionTrace& trace, const AugmentedSequence& aug) {
    if (trace.cols != aug.content_index_map.size() || trace.rows != trace.cols) {
        throw ConsistencyError("strip_trace: trace of " + std::to_string(trace.rows) + "x" +
                               std::to_string(trace.cols) + " does not match an augmented length of " +
                               std::to_string(aug.content_index_map.size()));
    }
    AttentionTrace out;
    out.layer = trace.layer;
    out.cols = trace.cols;
    out.head_dim = trace.head_dim;
    out.rows = aug.content_rows.size();
    out.query_index = aug.content_rows;
    for (const auto& h : trace.heads) {
        HeadTrace s;
        s.value_norms = h.value_norms;
        s.values = h.values;
        for (std::size_t r : aug.content_rows) {
            s.attention.insert(s.attention.end(), h.attention.begin() + static_cast<std::ptrdiff_t>(r * trace.cols),
                               h.attention.begin() + static_cast<std::ptrdiff_t>((r + 1) * trace.cols));
            s.output_norms.push_back(h.output_norms[r]);
            if (!h.outputs.empty()) {
                s.outputs.insert(s.outputs.end(),
                                 h.outputs.begin() + static_cast<std::ptrdiff_t>(r * trace.head_dim),
                                 h.outputs.begin() + static_cast<std::ptrdiff_t>((r + 1) * trace.head_dim));
            }
        }
        out.heads.push_back(std::move(s));
    }
    return out;
}

/// Content ids recovered from an augmented sequence.
inline std::vector<TokenId> strip_ids(const AugmentedSequence& aug) {
    std::vector<TokenId> out;
    out.reserve(aug.content_rows.size());
    for (std::size_t r : aug.content_rows) {
        out.push_back(aug.ids[r]);
    }
    return out;
}

} // namespace sinkdiff
