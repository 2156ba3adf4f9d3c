#pragma once

// Byte-level tokenization, windowed batching, and seeded synthetic corpora.

#include "sinkdiff/errors.hpp"
#include "sinkdiff/random.hpp"
#include "sinkdiff/sequence.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace sinkdiff {

inline TokenSequence tokenize(std::string_view text) {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (char c : text) {
        ids.push_back(static_cast<TokenId>(static_cast<unsigned char>(c)));
    }
    return TokenSequence(std::move(ids));
}

inline std::string detokenize(std::span<const TokenId> ids) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
        if (!Vocab::is_byte(id)) {
            throw IndexError("detokenize: id " + std::to_string(id) + " is not a byte token");
        }
        out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

inline std::string detokenize(const TokenSequence& seq) { return detokenize(std::span<const TokenId>(seq.ids)); }

/// B x L token matrix; rows are PAD-filled past their true length.
struct Batch {
    std::size_t seq_len = 0;
    std::vector<TokenId> tokens;
    std::vector<std::size_t> lengths;
    std::uint64_t seed = 0;

    std::size_t rows() const noexcept { return lengths.size(); }

    /// Row r without its padding.
    TokenSequence row(std::size_t r) const {
        auto first = tokens.begin() + static_cast<std::ptrdiff_t>(r * seq_len);
        return TokenSequence(std::vector<TokenId>(first, first + static_cast<std::ptrdiff_t>(lengths.at(r))));
    }
};

/// Infinite, seed-determined stream of batches over fixed-length windows.
/// Each epoch visits every window once in a seeded order; the final batch
/// of an epoch may hold fewer than B rows.
class BatchStream {
public:
    BatchStream(std::vector<std::uint8_t> bytes, std::size_t seq_len, std::size_t batch_size, std::uint64_t seed)
        : bytes_(std::move(bytes)), seq_len_(seq_len), batch_size_(batch_size), seed_(seed) {
        if (bytes_.empty()) {
            throw CorpusError("corpus is empty");
        }
        if (seq_len_ == 0 || batch_size_ == 0) {
            throw ConfigError("corpus: seq_len and batch_size must be positive");
        }
        windows_ = (bytes_.size() + seq_len_ - 1) / seq_len_;
    }

    std::size_t window_count() const noexcept { return windows_; }
    std::size_t batches_per_epoch() const noexcept { return (windows_ + batch_size_ - 1) / batch_size_; }
    std::size_t position() const noexcept { return cursor_; }

    /// Batch number `index` of the endless stream (epoch-major).
    Batch batch_at(std::size_t index) const {
        const std::size_t per_epoch = batches_per_epoch();
        const std::size_t epoch = index / per_epoch, within = index % per_epoch;
        const std::uint64_t epoch_seed = mix_seed(seed_, epoch);
        const auto order = permutation(epoch_seed);
        Batch b;
        b.seq_len = seq_len_;
        b.seed = epoch_seed;
        const std::size_t first = within * batch_size_;
        const std::size_t last = std::min(first + batch_size_, windows_);
        for (std::size_t w = first; w < last; ++w) {
            const std::size_t start = order[w] * seq_len_;
            const std::size_t len = std::min(seq_len_, bytes_.size() - start);
            for (std::size_t i = 0; i < seq_len_; ++i) {
                b.tokens.push_back(i < len ? static_cast<TokenId>(bytes_[start + i]) : Vocab::kPadId);
            }
            b.lengths.push_back(len);
        }
        return b;
    }

    Batch next() { return batch_at(cursor_++); }
    void seek(std::size_t index) noexcept { cursor_ = index; }

private:
    std::vector<std::size_t> permutation(std::uint64_t seed) const {
        std::vector<std::size_t> order(windows_);
        for (std::size_t i = 0; i < windows_; ++i) {
            order[i] = i;
        }
        std::mt19937_64 rng(seed);
        for (std::size_t i = windows_; i > 1; --i) {
            std::swap(order[i - 1], order[uniform_below(rng, i)]);
        }
        return order;
    }

    std::vector<std::uint8_t> bytes_;
    std::size_t seq_len_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::size_t windows_ = 0;
    std::size_t cursor_ = 0;
};

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) {
        throw IoError("failed reading " + path.string());
    }
    return bytes;
}

inline BatchStream load_corpus(const std::filesystem::path& path, std::size_t seq_len, std::size_t batch_size,
                               std::uint64_t seed) {
    auto bytes = read_bytes(path);
    if (bytes.empty()) {
        throw CorpusError("corpus file " + path.string() + " is empty");
    }
    return BatchStream(std::move(bytes), seq_len, batch_size, seed);
}

enum class CorpusKind { pattern, arith };

inline CorpusKind parse_corpus_kind(std::string_view s) {
    if (s == "pattern") {
        return CorpusKind::pattern;
    }
    if (s == "arith") {
        return CorpusKind::arith;
    }
    throw ConfigError("corpus kind must be \"pattern\" or \"arith\", got \"" + std::string(s) + "\"");
}

/// Exactly `bytes` bytes of synthetic text.
///  pattern: lines of a short random lowercase motif repeated to 24..48 chars.
///  arith:   lines "a+b=c" / "a-b=c" with operands below 100.
inline std::string generate_corpus(CorpusKind kind, std::size_t bytes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::string out;
    out.reserve(bytes + 64);
    while (out.size() < bytes) {
        if (kind == CorpusKind::pattern) {
            const std::size_t motif_len = 2 + uniform_below(rng, 5);
            const std::size_t line_len = 24 + uniform_below(rng, 25);
            std::string motif;
            for (std::size_t i = 0; i < motif_len; ++i) {
                motif.push_back(static_cast<char>('a' + uniform_below(rng, 26)));
            }
            for (std::size_t i = 0; i < line_len; ++i) {
                out.push_back(motif[i % motif_len]);
            }
        } else {
            const auto a = static_cast<long>(uniform_below(rng, 100));
            const auto b = static_cast<long>(uniform_below(rng, 100));
            const bool plus = uniform_below(rng, 2) == 0;
            out += std::to_string(a) + (plus ? "+" : "-") + std::to_string(b) + "=" +
                   std::to_string(plus ? a + b : a - b);
        }
        out.push_back('\n');
    }
    out.resize(bytes);
    return out;
}

} // namespace sinkdiff
