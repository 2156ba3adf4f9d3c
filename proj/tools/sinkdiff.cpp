#include "sinkdiff/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    using namespace sinkdiff;
    CLI::App app{"masked-diffusion language models with an attention-sink token"};
    app.require_subcommand(1);

    std::string config;
    std::string resume;
    auto* train = app.add_subcommand("train", "train a model from a JSON run config");
    train->add_option("--config", config, "run config path")->required();
    train->add_option("--resume", resume, "checkpoint directory to continue from");

    SampleOptions sopt;
    std::string strategy = "confidence";
    std::string ckpt;
    std::string sample_out = ".";
    auto* samp = app.add_subcommand("sample", "generate text from a checkpoint");
    samp->add_option("--ckpt", ckpt, "checkpoint directory")->required();
    samp->add_option("--len", sopt.length, "sequence length")->required();
    samp->add_option("--steps", sopt.steps, "denoising steps")->required();
    samp->add_option("--seed", sopt.seed, "sampling seed")->required();
    samp->add_option("--prompt", sopt.prompt, "fixed leading text; the remaining positions are generated");
    samp->add_option("--strategy", strategy, "unmasking strategy: confidence or random");
    samp->add_flag("--trace", sopt.trace, "write per-layer attention traces");
    samp->add_option("--trace-every", sopt.trace_every, "trace every k-th denoising step");
    samp->add_flag("--trace-raw", sopt.trace_raw, "include raw value and output vectors in traces");
    samp->add_option("--out-dir", sample_out, "directory for trace files");

    std::string pattern;
    std::string analyze_out = ".";
    auto* analyze = app.add_subcommand("analyze", "summarize trace files into CSV statistics");
    analyze->add_option("glob", pattern, "trace file glob")->required();
    analyze->add_option("--out-dir", analyze_out, "directory for layer_stats.csv and norm_scatter.csv");

    std::uint64_t gc_seed = 0;
    auto* gc = app.add_subcommand("gradcheck", "compare analytic and finite-difference gradients");
    gc->add_option("--seed", gc_seed, "seed for weights and inputs");

    std::string kind;
    std::size_t bytes = 0;
    std::uint64_t corpus_seed = 0;
    std::string corpus_out;
    auto* gen = app.add_subcommand("gen-corpus", "write a synthetic training corpus");
    gen->add_option("--kind", kind, "pattern or arith")->required()->check(CLI::IsMember({"pattern", "arith"}));
    gen->add_option("--bytes", bytes, "corpus size in bytes")->required();
    gen->add_option("--seed", corpus_seed, "generator seed")->required();
    gen->add_option("--out", corpus_out, "output path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : kExitBadInput;
    }

    if (*train) {
        std::optional<std::filesystem::path> r;
        if (!resume.empty()) {
            r = resume;
        }
        return cmd_train(config, r, std::cout, std::cerr);
    }
    if (*samp) {
        try {
            sopt.strategy = parse_unmask_strategy(strategy);
        } catch (const ConfigError& e) {
            std::cerr << "error: " << e.what() << '\n';
            return kExitBadInput;
        }
        sopt.checkpoint = ckpt;
        sopt.out_dir = sample_out;
        return cmd_sample(sopt, std::cout, std::cerr);
    }
    if (*analyze) {
        return cmd_analyze(pattern, analyze_out, std::cout, std::cerr);
    }
    if (*gc) {
        return cmd_gradcheck(gc_seed, std::cout);
    }
    return cmd_gen_corpus(kind, bytes, corpus_seed, corpus_out, std::cout, std::cerr);
}
