#pragma once

#include "sinkdiff/errors.hpp"
#include "sinkdiff/tensor.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace sinkdiff {

/// Byte-level vocabulary: ids 0..255 are raw bytes, followed by three reserved ids.
struct Vocab {
    static constexpr TokenId kByteCount = 256;
    static constexpr TokenId kMaskId = 256;
    static constexpr TokenId kSinkId = 257;
    static constexpr TokenId kPadId = 258;
    static constexpr std::size_t kSize = 259;

    static constexpr bool is_byte(TokenId id) noexcept { return id >= 0 && id < kByteCount; }
};

/// Content tokens (no sink) plus per-position mask flags.
struct TokenSequence {
    std::vector<TokenId> ids;
    std::vector<bool> mask_flags;

    TokenSequence() = default;

    /// Flags are derived from ids: a position is masked iff its id is mask_id.
    explicit TokenSequence(std::vector<TokenId> token_ids, TokenId mask_id = Vocab::kMaskId)
        : ids(std::move(token_ids)), mask_flags(ids.size()) {
        for (std::size_t i = 0; i < ids.size(); ++i) {
            mask_flags[i] = ids[i] == mask_id;
        }
    }

    static TokenSequence all_masked(std::size_t length, TokenId mask_id = Vocab::kMaskId) {
        return TokenSequence(std::vector<TokenId>(length, mask_id), mask_id);
    }

    std::size_t size() const noexcept { return ids.size(); }

    std::size_t masked_count() const noexcept {
        std::size_t n = 0;
        for (bool m : mask_flags) {
            n += m ? 1 : 0;
        }
        return n;
    }

    void set(std::size_t i, TokenId id, TokenId mask_id = Vocab::kMaskId) {
        ids.at(i) = id;
        mask_flags[i] = id == mask_id;
    }

    bool consistent(TokenId mask_id = Vocab::kMaskId) const {
        if (ids.size() != mask_flags.size()) {
            return false;
        }
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if ((ids[i] == mask_id) != mask_flags[i]) {
                return false;
            }
        }
        return true;
    }

    bool operator==(const TokenSequence&) const = default;
};

} // namespace sinkdiff
