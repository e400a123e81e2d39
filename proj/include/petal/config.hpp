#pragma once

// Run configuration: one JSON document covering every module. Parsing is
// strict; an unknown or mistyped key raises ConfigError naming its path.

#include <filesystem>
#include <optional>
#include <string>

#include "petal/datasim.hpp"
#include "petal/injection.hpp"
#include "petal/losses.hpp"
#include "petal/metrics.hpp"
#include "petal/trainer.hpp"

namespace petal {

struct GateSettings {
    std::string estimator = "sharpness";
    std::pair<double, double> range{0.0, 1.0};
    int samples = 1000;
};

struct LossSettings {
    MarginVariant variant = MarginVariant::arcface;
    std::optional<double> margin; // variant default when unset
    double scale = 64.0;

    double resolved_margin() const { return margin.value_or(default_margin(variant)); }
};

/// Pre-training of the base backbone on a clean identity pool disjoint from the benchmark.
struct PretrainSettings {
    int identities = 48;
    int images_per_identity = 16;
    /// First identity index of the pool; the benchmark starts at data.first_identity.
    int first_identity = 1000;
    LossSettings loss{MarginVariant::cosface, 0.1, 16.0};
    TrainConfig train = defaults();

    static TrainConfig defaults()
    {
        TrainConfig t;
        t.epochs = 12;
        t.warmup_epochs = 1;
        t.batch_size = 16;
        t.initial_lr = 2e-3;
        t.weight_decay = 0.05;
        t.mode = TrainMode::full_ft;
        return t;
    }
};

struct EvalSettings {
    int batch_size = 16;
    EvalOptions options;
    Split probe_split = Split::probe;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string out = "petal-run";
    BenchmarkSpec data;
    /// External manifest; defaults to <out>/manifest.jsonl.
    std::optional<std::string> manifest;
    BackboneConfig backbone;
    /// Base weights file; without one the backbone is the seeded random initialization.
    std::optional<std::string> backbone_weights;
    InjectionConfig injection;
    GateSettings gate;
    LossSettings loss;
    TrainConfig train;
    PretrainSettings pretrain;
    EvalSettings eval;

    /// Sets the run seed and the per-module seeds derived from it.
    void set_seed(std::uint64_t s);
    void validate() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_json(const RunConfig& cfg);

} // namespace petal
