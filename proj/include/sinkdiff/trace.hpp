#pragma once

#include <cstddef>
#include <numeric>
#include <vector>

namespace sinkdiff {

/// One head's captured attention state at one layer.
struct HeadTrace {
    std::vector<double> attention;    // rows x cols, row-major (queries x keys)
    std::vector<double> value_norms;  // one L2 norm per key token
    std::vector<double> output_norms; // one L2 norm per query row (pre-projection head output)
    std::vector<double> values;       // raw value vectors, cols x head_dim (in-memory capture only)
    std::vector<double> outputs;      // raw head outputs, rows x head_dim (in-memory capture only)
};

/// Per-layer attention capture. Columns always span the full augmented
/// sequence; rows may be a subset of queries (see strip_trace), with
/// query_index mapping each row back to its augmented position.
struct AttentionTrace {
    std::size_t layer = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t head_dim = 0;
    std::vector<std::size_t> query_index;
    std::vector<HeadTrace> heads;

    double alpha(std::size_t head, std::size_t row, std::size_t col) const {
        return heads[head].attention[row * cols + col];
    }

    bool has_raw_vectors() const {
        return !heads.empty() && !heads.front().values.empty() && !heads.front().outputs.empty();
    }

    static std::vector<std::size_t> identity_rows(std::size_t n) {
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        return idx;
    }
};

} // namespace sinkdiff
