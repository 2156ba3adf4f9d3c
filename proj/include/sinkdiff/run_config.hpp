#pragma once

// RunConfig: the versioned JSON configuration for training runs. Unknown
// keys are rejected with the full field path in the message.

#include "sinkdiff/diffusion.hpp"
#include "sinkdiff/errors.hpp"
#include "sinkdiff/nn.hpp"
#include "sinkdiff/sink.hpp"
#include "sinkdiff/train.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

namespace sinkdiff {

inline constexpr int kRunConfigVersion = 1;

struct ScheduleConfig {
    std::size_t steps = 100;   // T for the linear schedule
    std::vector<double> tau;   // explicit schedule; overrides `steps` when non-empty

    NoiseSchedule build() const { return tau.empty() ? NoiseSchedule::linear(steps) : NoiseSchedule(tau); }
    bool operator==(const ScheduleConfig&) const = default;
};

struct TrainConfig {
    OptimConfig optim;
    std::size_t total_steps = 1000;
    std::size_t batch_size = 8;
    std::size_t seq_len = 32;
    std::size_t checkpoint_every = 0; // 0 = final checkpoint only
    bool operator==(const TrainConfig&) const = default;
};

struct Seeds {
    std::uint64_t data = 1;
    std::uint64_t diffusion = 2;
    std::uint64_t init = 3;
    bool operator==(const Seeds&) const = default;
};

struct Paths {
    std::string corpus;
    std::string out_dir;
    bool operator==(const Paths&) const = default;
};

struct RunConfig {
    int version = kRunConfigVersion;
    ModelConfig model;
    ScheduleConfig schedule;
    TrainConfig train;
    Seeds seeds;
    Paths paths;

    const SinkConfig& sink() const noexcept { return model.sink; }

    void validate() const {
        if (version != kRunConfigVersion) {
            throw ConfigError("version: unsupported config version " + std::to_string(version));
        }
        model.validate();
        train.optim.validate();
        (void)schedule.build();
        if (train.total_steps == 0 || train.batch_size == 0 || train.seq_len == 0) {
            throw ConfigError("train: total_steps, batch_size and seq_len must be positive");
        }
        if (train.seq_len + model.sink.count > model.max_seq_len) {
            throw ConfigError("model.max_seq_len (" + std::to_string(model.max_seq_len) +
                              ") is smaller than train.seq_len + sink.count");
        }
        if (!paths.corpus.empty() && !paths.out_dir.empty() &&
            std::filesystem::path(paths.corpus).lexically_normal() ==
                std::filesystem::path(paths.out_dir).lexically_normal()) {
            throw ConfigError("paths: corpus and out_dir must differ");
        }
    }

    bool operator==(const RunConfig&) const = default;
};

namespace detail {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seeds are read as size_t");

/// Reads fields of one JSON object, remembering which keys were consumed.
class ObjectReader {
public:
    ObjectReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError(where() + ": expected an object");
        }
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) {
            return;
        }
        read(*it, out, field(key));
    }

    template <class T>
    void require(const char* key, T& out) {
        if (!j_.contains(key)) {
            throw ConfigError(field(key) + ": missing required field");
        }
        get(key, out);
    }

    const nlohmann::json* child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) {
                throw ConfigError(field(it.key().c_str()) + ": unknown key");
            }
        }
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    std::string where() const { return path_.empty() ? "<root>" : path_; }

    static void read(const nlohmann::json& v, std::size_t& out, const std::string& f) {
        if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
            throw ConfigError(f + ": expected a non-negative integer");
        }
        out = v.get<std::size_t>();
    }
    static void read(const nlohmann::json& v, int& out, const std::string& f) {
        if (!v.is_number_integer()) {
            throw ConfigError(f + ": expected an integer");
        }
        out = v.get<int>();
    }
    static void read(const nlohmann::json& v, double& out, const std::string& f) {
        if (!v.is_number()) {
            throw ConfigError(f + ": expected a number");
        }
        out = v.get<double>();
    }
    static void read(const nlohmann::json& v, bool& out, const std::string& f) {
        if (!v.is_boolean()) {
            throw ConfigError(f + ": expected true or false");
        }
        out = v.get<bool>();
    }
    static void read(const nlohmann::json& v, std::string& out, const std::string& f) {
        if (!v.is_string()) {
            throw ConfigError(f + ": expected a string");
        }
        out = v.get<std::string>();
    }
    static void read(const nlohmann::json& v, std::vector<double>& out, const std::string& f) {
        if (!v.is_array()) {
            throw ConfigError(f + ": expected an array of numbers");
        }
        out.clear();
        for (const auto& e : v) {
            if (!e.is_number()) {
                throw ConfigError(f + ": expected an array of numbers");
            }
            out.push_back(e.get<double>());
        }
    }

    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <class Fn>
void with_child(ObjectReader& r, const char* key, const std::string& path, Fn fn) {
    if (const auto* c = r.child(key)) {
        ObjectReader sub(*c, path);
        fn(sub);
        sub.finish();
    }
}

} // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    detail::ObjectReader root(j, "");
    root.require("version", c.version);
    if (c.version != kRunConfigVersion) {
        throw VersionError("version: unsupported config version " + std::to_string(c.version));
    }
    detail::with_child(root, "model", "model", [&](detail::ObjectReader& r) {
        auto& m = c.model;
        r.get("n_layers", m.n_layers);
        r.get("n_heads", m.n_heads);
        r.get("d_model", m.d_model);
        r.get("max_seq_len", m.max_seq_len);
        r.get("rope_base", m.rope_base);
        r.get("mlp_ratio", m.mlp_ratio);
        std::string variant(to_string(m.attention_variant));
        r.get("attention_variant", variant);
        try {
            m.attention_variant = parse_attention_variant(variant);
        } catch (const ConfigError&) {
            throw ConfigError(r.field("attention_variant") + ": must be \"vanilla\" or \"gated\"");
        }
    });
    detail::with_child(root, "sink", "sink", [&](detail::ObjectReader& r) {
        auto& s = c.model.sink;
        r.get("count", s.count);
        std::string placement(to_string(s.placement));
        r.get("placement", placement);
        try {
            s.placement = parse_sink_placement(placement);
        } catch (const ConfigError&) {
            throw ConfigError(r.field("placement") + ": must be \"front\" or \"end\"");
        }
        r.get("zero_value", s.zero_value);
        r.get("trainable_embedding", s.trainable_embedding);
    });
    detail::with_child(root, "schedule", "schedule", [&](detail::ObjectReader& r) {
        r.get("steps", c.schedule.steps);
        r.get("tau", c.schedule.tau);
    });
    detail::with_child(root, "train", "train", [&](detail::ObjectReader& r) {
        auto& t = c.train;
        r.get("total_steps", t.total_steps);
        r.get("batch_size", t.batch_size);
        r.get("seq_len", t.seq_len);
        r.get("checkpoint_every", t.checkpoint_every);
        r.get("peak_lr", t.optim.peak_lr);
        r.get("min_lr", t.optim.min_lr);
        r.get("warmup_fraction", t.optim.warmup_fraction);
        r.get("beta1", t.optim.beta1);
        r.get("beta2", t.optim.beta2);
        r.get("weight_decay", t.optim.weight_decay);
        r.get("eps", t.optim.eps);
        r.get("grad_clip", t.optim.grad_clip);
    });
    detail::with_child(root, "seeds", "seeds", [&](detail::ObjectReader& r) {
        r.get("data", c.seeds.data);
        r.get("diffusion", c.seeds.diffusion);
        r.get("init", c.seeds.init);
    });
    detail::with_child(root, "paths", "paths", [&](detail::ObjectReader& r) {
        r.get("corpus", c.paths.corpus);
        r.get("out_dir", c.paths.out_dir);
    });
    root.finish();
    c.validate();
    return c;
}

inline nlohmann::ordered_json seeds_to_json(const Seeds& s) {
    return {{"data", s.data}, {"diffusion", s.diffusion}, {"init", s.init}};
}

inline nlohmann::ordered_json run_config_to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["version"] = c.version;
    j["model"] = {{"n_layers", c.model.n_layers},
                  {"n_heads", c.model.n_heads},
                  {"d_model", c.model.d_model},
                  {"max_seq_len", c.model.max_seq_len},
                  {"rope_base", c.model.rope_base},
                  {"mlp_ratio", c.model.mlp_ratio},
                  {"attention_variant", std::string(to_string(c.model.attention_variant))}};
    j["sink"] = {{"count", c.model.sink.count},
                 {"placement", std::string(to_string(c.model.sink.placement))},
                 {"zero_value", c.model.sink.zero_value},
                 {"trainable_embedding", c.model.sink.trainable_embedding}};
    j["schedule"] = {{"steps", c.schedule.steps}, {"tau", c.schedule.tau}};
    j["train"] = {{"total_steps", c.train.total_steps},
                  {"batch_size", c.train.batch_size},
                  {"seq_len", c.train.seq_len},
                  {"checkpoint_every", c.train.checkpoint_every},
                  {"peak_lr", c.train.optim.peak_lr},
                  {"min_lr", c.train.optim.min_lr},
                  {"warmup_fraction", c.train.optim.warmup_fraction},
                  {"beta1", c.train.optim.beta1},
                  {"beta2", c.train.optim.beta2},
                  {"weight_decay", c.train.optim.weight_decay},
                  {"eps", c.train.optim.eps},
                  {"grad_clip", c.train.optim.grad_clip}};
    j["seeds"] = seeds_to_json(c.seeds);
    j["paths"] = {{"corpus", c.paths.corpus}, {"out_dir", c.paths.out_dir}};
    return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config " + path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

} // namespace sinkdiff
