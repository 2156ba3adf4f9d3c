#pragma once

// Trace JSONL. Line 1 is a header object
//   {"format":"sinkdiff-trace","version":1,"run_config":{...},"sample":{...}}
// and every following line is one TraceRecord (one layer of one denoising step).

#include "sinkdiff/analyze.hpp"
#include "sinkdiff/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstddef>
#include <functional>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

namespace sinkdiff {

inline constexpr const char* kTraceFormat = "sinkdiff-trace";
inline constexpr int kTraceVersion = 1;

inline nlohmann::ordered_json trace_header(const nlohmann::ordered_json& run_config,
                                           const nlohmann::ordered_json& sample_info) {
    nlohmann::ordered_json h;
    h["format"] = kTraceFormat;
    h["version"] = kTraceVersion;
    h["run_config"] = run_config;
    h["sample"] = sample_info;
    return h;
}

inline nlohmann::ordered_json trace_record_to_json(const TraceRecord& rec) {
    const auto& tr = rec.attention;
    nlohmann::ordered_json j;
    j["step"] = rec.step;
    j["layer"] = tr.layer;
    j["n"] = tr.cols;
    j["rows"] = tr.rows;
    j["head_dim"] = tr.head_dim;
    j["sink_positions"] = rec.sink_positions;
    j["query_index"] = tr.query_index;
    auto heads = nlohmann::ordered_json::array();
    for (const auto& h : tr.heads) {
        nlohmann::ordered_json hj;
        hj["attention"] = h.attention;
        hj["value_norms"] = h.value_norms;
        hj["output_norms"] = h.output_norms;
        if (!h.values.empty()) {
            hj["values"] = h.values;
            hj["outputs"] = h.outputs;
        }
        heads.push_back(std::move(hj));
    }
    j["heads"] = std::move(heads);
    return j;
}

/// Parses and validates one record; throws AnalysisError on any inconsistency.
inline TraceRecord trace_record_from_json(const nlohmann::json& j) {
    try {
        TraceRecord rec;
        rec.step = j.at("step").get<std::size_t>();
        rec.sink_positions = j.at("sink_positions").get<std::vector<std::size_t>>();
        auto& tr = rec.attention;
        tr.layer = j.at("layer").get<std::size_t>();
        tr.cols = j.at("n").get<std::size_t>();
        tr.rows = j.at("rows").get<std::size_t>();
        tr.head_dim = j.at("head_dim").get<std::size_t>();
        tr.query_index = j.at("query_index").get<std::vector<std::size_t>>();
        if (tr.query_index.size() != tr.rows || !std::is_sorted(rec.sink_positions.begin(), rec.sink_positions.end())) {
            throw AnalysisError("trace record: bad query_index or sink_positions");
        }
        for (std::size_t k : rec.sink_positions) {
            if (k >= tr.cols) {
                throw AnalysisError("trace record: sink position out of range");
            }
        }
        for (const auto& hj : j.at("heads")) {
            HeadTrace h;
            h.attention = hj.at("attention").get<std::vector<double>>();
            h.value_norms = hj.at("value_norms").get<std::vector<double>>();
            h.output_norms = hj.at("output_norms").get<std::vector<double>>();
            if (hj.contains("values")) {
                h.values = hj.at("values").get<std::vector<double>>();
                h.outputs = hj.at("outputs").get<std::vector<double>>();
                if (h.values.size() != tr.cols * tr.head_dim || h.outputs.size() != tr.rows * tr.head_dim) {
                    throw AnalysisError("trace record: raw vector sizes do not match");
                }
            }
            if (h.attention.size() != tr.rows * tr.cols || h.value_norms.size() != tr.cols ||
                h.output_norms.size() != tr.rows) {
                throw AnalysisError("trace record: head array sizes do not match");
            }
            tr.heads.push_back(std::move(h));
        }
        if (tr.heads.empty()) {
            throw AnalysisError("trace record: no heads");
        }
        return rec;
    } catch (const nlohmann::json::exception& e) {
        throw AnalysisError(std::string("trace record: ") + e.what());
    }
}

class TraceWriter {
public:
    TraceWriter(std::ostream& os, const nlohmann::ordered_json& header) : os_(os) {
        os_ << header.dump() << '\n';
    }

    void write(const TraceRecord& rec) {
        os_ << trace_record_to_json(rec).dump() << '\n';
        ++records_;
    }

    std::size_t records() const noexcept { return records_; }

private:
    std::ostream& os_;
    std::size_t records_ = 0;
};

struct TraceReadSummary {
    nlohmann::json header;
    std::size_t records = 0;
    std::size_t warnings = 0; // skipped lines
    std::vector<std::string> messages;
};

/// Streams every valid record of a trace to `fn`. Malformed record lines are
/// skipped and counted; a missing or foreign header is a VersionError.
inline TraceReadSummary read_trace(std::istream& in, const std::function<void(const TraceRecord&)>& fn) {
    TraceReadSummary out;
    std::string line;
    if (!std::getline(in, line)) {
        throw VersionError("trace: empty file");
    }
    try {
        out.header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error&) {
        throw VersionError("trace: first line is not a header object");
    }
    if (!out.header.is_object() || out.header.value("format", "") != kTraceFormat) {
        throw VersionError("trace: missing sinkdiff-trace header");
    }
    if (out.header.value("version", 0) != kTraceVersion) {
        throw VersionError("trace: unsupported version " + out.header.value("version", nlohmann::json()).dump());
    }
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) {
            continue;
        }
        try {
            const auto rec = trace_record_from_json(nlohmann::json::parse(line));
            ++out.records;
            fn(rec);
        } catch (const nlohmann::json::parse_error& e) {
            ++out.warnings;
            out.messages.push_back("line " + std::to_string(line_no) + ": " + e.what());
        } catch (const AnalysisError& e) {
            ++out.warnings;
            out.messages.push_back("line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

inline std::vector<TraceRecord> read_trace_records(std::istream& in, TraceReadSummary* summary = nullptr) {
    std::vector<TraceRecord> recs;
    auto s = read_trace(in, [&](const TraceRecord& r) { recs.push_back(r); });
    if (summary) {
        *summary = std::move(s);
    }
    return recs;
}

} // namespace sinkdiff
