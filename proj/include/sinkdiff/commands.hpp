#pragma once

// Implementations behind the sinkdiff command-line tool. Each command writes
// its report to `out`, diagnostics to `err`, and returns the process exit code.

#include "sinkdiff/analyze.hpp"
#include "sinkdiff/checkpoint.hpp"
#include "sinkdiff/corpus.hpp"
#include "sinkdiff/diffusion.hpp"
#include "sinkdiff/gradcheck.hpp"
#include "sinkdiff/run_config.hpp"
#include "sinkdiff/trace_io.hpp"
#include "sinkdiff/trainer.hpp"

#include <glob.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace sinkdiff {

enum ExitCode : int {
    kExitOk = 0,
    kExitFailure = 1,    // runtime failure, check failed
    kExitBadInput = 2,   // invalid config, arguments or files
    kExitViolation = 3,  // analysis invariant violated
};

inline constexpr double kNoopTolerance = 1e-5;
inline constexpr double kGradcheckTolerance = 1e-3;

inline std::filesystem::path final_checkpoint_dir(const std::filesystem::path& out_dir) { return out_dir / "checkpoint"; }

inline std::filesystem::path periodic_checkpoint_dir(const std::filesystem::path& out_dir, std::size_t step) {
    std::ostringstream name;
    name << "step-" << std::setw(6) << std::setfill('0') << step;
    return out_dir / "checkpoints" / name.str();
}

namespace detail {

/// Keeps the metrics lines of steps <= `step` so a resumed run appends cleanly.
inline void truncate_metrics(const std::filesystem::path& path, std::size_t step) {
    std::ifstream in(path);
    if (!in) {
        return;
    }
    std::vector<std::string> keep;
    std::string line;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (!j.is_discarded() && j.contains("step") && j["step"].get<std::size_t>() <= step) {
            keep.push_back(line);
        }
    }
    in.close();
    std::ofstream out(path, std::ios::trunc);
    for (const auto& l : keep) {
        out << l << '\n';
    }
}

} // namespace detail

inline int cmd_train(const std::filesystem::path& config_path, const std::optional<std::filesystem::path>& resume,
                     std::ostream& out, std::ostream& err) {
    RunConfig cfg;
    try {
        cfg = load_run_config(config_path);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitBadInput;
    }
    if (cfg.paths.corpus.empty() || cfg.paths.out_dir.empty()) {
        err << "error: paths.corpus and paths.out_dir are required for training\n";
        return kExitBadInput;
    }
    const std::filesystem::path out_dir = cfg.paths.out_dir;
    try {
        Trainer trainer(cfg, read_bytes(cfg.paths.corpus));
        std::filesystem::create_directories(out_dir);
        const auto metrics_path = out_dir / "metrics.jsonl";
        std::ios::openmode mode = std::ios::trunc;
        if (resume) {
            const auto ckpt = load_checkpoint(*resume);
            trainer.resume(ckpt);
            detail::truncate_metrics(metrics_path, ckpt.step);
            mode = std::ios::app;
            out << "resumed at step " << ckpt.step << '\n';
        }
        std::ofstream metrics(metrics_path, mode);
        if (!metrics) {
            throw IoError("cannot write " + metrics_path.string());
        }
        trainer.run(metrics, [&](const Trainer& t) { t.save(periodic_checkpoint_dir(out_dir, t.step())); });
        trainer.save(final_checkpoint_dir(out_dir));
        out << "trained " << trainer.step() << " steps; checkpoint at " << final_checkpoint_dir(out_dir).string()
            << '\n';
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kExitBadInput;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
}

struct SampleOptions {
    std::filesystem::path checkpoint;
    std::size_t length = 32;
    std::size_t steps = 32;
    std::uint64_t seed = 0;
    std::string prompt; // fixed leading bytes; the rest of `length` is generated
    UnmaskStrategy strategy = UnmaskStrategy::confidence;
    bool trace = false;
    std::size_t trace_every = 1;
    bool trace_raw = false;
    std::filesystem::path out_dir = ".";
};

inline std::filesystem::path trace_path(const SampleOptions& opt) {
    return opt.out_dir / ("trace-seed" + std::to_string(opt.seed) + ".jsonl");
}

/// Samples with `model`, streaming per-layer trace records to `writer` when given.
inline TokenSequence sample_with_trace(const Model& model, const SampleOptions& opt, TraceWriter* writer) {
    DenoiseOptions dopt;
    dopt.mask_id = model.config().mask_id;
    dopt.sink_id = model.config().sink_id;
    if (writer) {
        dopt.capture = true;
        dopt.capture_options.raw_vectors = opt.trace_raw;
        dopt.on_step = [&](const StepReport& r) {
            if (r.step % opt.trace_every != 0 || !r.capture) {
                return;
            }
            for (const auto& layer : r.capture->layers) {
                TraceRecord rec;
                rec.step = r.step;
                rec.sink_positions = r.augmented->sink_positions;
                rec.attention = layer;
                writer->write(rec);
            }
        };
    }
    return sample_from(prompted(opt.prompt, opt.length, dopt.mask_id), model, model.config().sink, opt.steps,
                       opt.strategy, opt.seed, dopt);
}

inline int cmd_sample(const SampleOptions& opt, std::ostream& out, std::ostream& err) {
    if (opt.length == 0 || opt.steps == 0 || opt.trace_every == 0) {
        err << "error: --len, --steps and --trace-every must be at least 1\n";
        return kExitBadInput;
    }
    try {
        const auto ckpt = load_checkpoint(opt.checkpoint);
        const auto& mc = ckpt.config.model;
        if (opt.length + mc.sink.count > mc.max_seq_len) {
            err << "error: --len " << opt.length << " plus " << mc.sink.count << " sink(s) exceeds max_seq_len "
                << mc.max_seq_len << '\n';
            return kExitBadInput;
        }
        if (opt.prompt.size() > opt.length) {
            err << "error: --prompt is longer than --len " << opt.length << '\n';
            return kExitBadInput;
        }
        std::optional<std::ofstream> trace_file;
        std::optional<TraceWriter> writer;
        if (opt.trace) {
            std::filesystem::create_directories(opt.out_dir);
            trace_file.emplace(trace_path(opt));
            if (!*trace_file) {
                throw IoError("cannot write " + trace_path(opt).string());
            }
            nlohmann::ordered_json info;
            info["checkpoint"] = opt.checkpoint.string();
            info["checkpoint_step"] = ckpt.step;
            info["length"] = opt.length;
            info["prompt"] = opt.prompt;
            info["steps"] = opt.steps;
            info["seed"] = opt.seed;
            info["strategy"] = std::string(to_string(opt.strategy));
            info["trace_every"] = opt.trace_every;
            writer.emplace(*trace_file, trace_header(run_config_to_json(ckpt.config), info));
        }
        const auto result = sample_with_trace(ckpt.model, opt, writer ? &*writer : nullptr);
        out << detokenize(result) << '\n';
        if (writer) {
            err << "wrote " << writer->records() << " trace records to " << trace_path(opt).string() << '\n';
        }
        return kExitOk;
    } catch (const VersionError& e) {
        err << "error: " << e.what() << '\n';
        return kExitBadInput;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
}

inline std::vector<std::string> expand_glob(const std::string& pattern) {
    glob_t g{};
    std::vector<std::string> out;
    if (::glob(pattern.c_str(), 0, nullptr, &g) == 0) {
        for (std::size_t i = 0; i < g.gl_pathc; ++i) {
            out.emplace_back(g.gl_pathv[i]);
        }
    }
    ::globfree(&g);
    std::sort(out.begin(), out.end());
    return out;
}

/// Worker count from SINKDIFF_THREADS (default: hardware concurrency), at most `jobs`.
inline std::size_t worker_count(std::size_t jobs) {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("SINKDIFF_THREADS")) {
        char* end = nullptr;
        const auto v = std::strtoul(env, &end, 10);
        if (end != env && v > 0) {
            n = v;
        }
    }
    return std::max<std::size_t>(1, std::min(n, jobs));
}

struct AnalysisResult {
    std::vector<LayerStats> stats;
    double max_violation = -std::numeric_limits<double>::infinity();
    std::size_t records = 0;
    std::size_t warnings = 0;
    std::vector<std::string> messages;
    nlohmann::json run_config; // from the first file's header
};

/// Summarizes trace files. Files are parsed in parallel; per-file results
/// merge in file order, so output does not depend on the worker count.
inline AnalysisResult analyze_traces(const std::vector<std::string>& files, std::ostream* scatter) {
    struct FileResult {
        LayerStatsAccumulator acc;
        double max_violation = -std::numeric_limits<double>::infinity();
        std::string scatter;
        TraceReadSummary summary;
        std::string error;
    };
    std::vector<FileResult> results(files.size());
    auto work = [&](std::size_t i) {
        auto& r = results[i];
        std::ifstream in(files[i]);
        if (!in) {
            r.error = "cannot open " + files[i];
            return;
        }
        std::ostringstream sc;
        try {
            r.summary = read_trace(in, [&](const TraceRecord& rec) {
                r.acc.add(rec);
                r.max_violation = std::max(r.max_violation, noop_bound_check(rec));
                if (scatter) {
                    write_norm_scatter_rows(sc, rec);
                }
            });
        } catch (const Error& e) {
            r.error = files[i] + ": " + e.what();
        }
        r.scatter = sc.str();
    };
    const std::size_t workers = worker_count(files.size());
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < files.size(); i = next++) {
                work(i);
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }

    AnalysisResult out;
    LayerStatsAccumulator total;
    for (std::size_t i = 0; i < results.size(); ++i) {
        auto& r = results[i];
        if (!r.error.empty()) {
            ++out.warnings;
            out.messages.push_back(r.error);
            continue;
        }
        if (out.run_config.is_null() && r.summary.header.contains("run_config")) {
            out.run_config = r.summary.header["run_config"];
        }
        total.merge(r.acc);
        out.max_violation = std::max(out.max_violation, r.max_violation);
        out.records += r.summary.records;
        out.warnings += r.summary.warnings;
        for (auto& m : r.summary.messages) {
            out.messages.push_back(files[i] + ": " + m);
        }
        if (scatter) {
            *scatter << r.scatter;
        }
    }
    out.stats = total.finish();
    return out;
}

inline int cmd_analyze(const std::string& pattern, const std::filesystem::path& out_dir, std::ostream& out,
                       std::ostream& err) {
    const auto files = expand_glob(pattern);
    if (files.empty()) {
        err << "error: no trace files match " << pattern << '\n';
        return kExitBadInput;
    }
    try {
        std::filesystem::create_directories(out_dir);
        std::ostringstream scatter;
        const auto res = analyze_traces(files, &scatter);
        for (const auto& m : res.messages) {
            err << "warning: " << m << '\n';
        }
        if (res.records == 0) {
            err << "error: no valid trace records in " << files.size() << " file(s)\n";
            return kExitBadInput;
        }
        nlohmann::ordered_json meta;
        meta["run_config"] = res.run_config;
        meta["trace_files"] = files.size();
        meta["records"] = res.records;
        const std::string comment = meta.dump();
        {
            std::ofstream csv(out_dir / "layer_stats.csv");
            write_layer_stats_csv(csv, res.stats, comment);
        }
        {
            std::ofstream csv(out_dir / "norm_scatter.csv");
            write_norm_scatter_header(csv, comment);
            csv << scatter.str();
        }
        out << "files " << files.size() << ", records " << res.records << ", warnings " << res.warnings << '\n';
        out << std::setprecision(6);
        out << "max no-op bound violation " << res.max_violation << '\n';
        out << "layer  sink_norm    other_norm   sink_mass    samples\n";
        for (const auto& s : res.stats) {
            out << std::left << std::setw(7) << s.layer << std::setw(13)
                << (s.sink_norm_mean ? std::to_string(*s.sink_norm_mean) : "nan") << std::setw(13)
                << s.other_norm_mean << std::setw(13)
                << (s.sink_attn_mass ? std::to_string(*s.sink_attn_mass) : "nan") << s.samples << std::right
                << '\n';
        }
        if (res.max_violation > kNoopTolerance) {
            err << "error: no-op bound violated by " << res.max_violation << '\n';
            return kExitViolation;
        }
        return kExitOk;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
}

inline int cmd_gradcheck(std::uint64_t seed, std::ostream& out) {
    bool ok = true;
    out << std::setprecision(3) << std::scientific;
    for (const auto& r : gradcheck_all(seed)) {
        const bool pass = r.max_rel_error <= kGradcheckTolerance && r.sink_value_grad_zero.value_or(true);
        ok = ok && pass;
        out << std::left << std::setw(12) << r.variant << std::right << " max_rel_error " << r.max_rel_error
            << " over " << r.entries_checked << " entries (worst " << r.worst_parameter << ": analytic "
            << r.worst_analytic << ", numeric " << r.worst_numeric << ")";
        if (r.sink_value_grad_zero) {
            out << ", sink value grad " << (*r.sink_value_grad_zero ? "zero" : "NONZERO");
        }
        out << (pass ? "  ok" : "  FAIL") << '\n';
    }
    return ok ? kExitOk : kExitFailure;
}

inline int cmd_gen_corpus(const std::string& kind, std::size_t bytes, std::uint64_t seed,
                          const std::filesystem::path& path, std::ostream& out, std::ostream& err) {
    try {
        const auto text = generate_corpus(parse_corpus_kind(kind), bytes, seed);
        if (path.has_parent_path()) {
            std::filesystem::create_directories(path.parent_path());
        }
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!f) {
            throw IoError("cannot write " + path.string());
        }
        out << "wrote " << text.size() << " bytes to " << path.string() << '\n';
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << '\n';
        return kExitBadInput;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kExitFailure;
    }
}

} // namespace sinkdiff
