#pragma once

// Glue shared by the command-line tool and the acceptance runner: backbone
// construction, clean-pool pre-training, heads and the evaluation protocol.

#include <iosfwd>
#include <optional>

#include "petal/checkpoint.hpp"
#include "petal/config.hpp"

namespace petal {

using Model = AdaptedModel<float>;
using Backbone = ToyBackbone<float>;

/// Weights file when configured, otherwise the seeded random initialization.
Backbone initial_backbone(const RunConfig& cfg);

/// Clean identity pool used for pre-training and the clean verification check.
BenchmarkSpec pretrain_pool_spec(const RunConfig& cfg);

/// Trains every base weight on the pool's train split; the result carries no adapters.
Backbone pretrain_backbone(const RunConfig& cfg, const GeneratedBenchmark& pool, std::ostream* progress = nullptr,
                           TrainReport* report = nullptr);

MarginHead<float> make_head(const LossSettings& loss, int classes, int feature_dim, std::uint64_t seed);

/// Gate with the configured estimator and, if given, a fixed calibration.
QualityGate make_gate(const RunConfig& cfg, std::optional<GateCalibration> calibration = std::nullopt);

/// Probe-vs-gallery evaluation. Probes whose identity is not enrolled are
/// treated as unknowns for open-set identification.
EvalReport evaluate_model(const Model& model, const LabeledImages& gallery, const LabeledImages& probe,
                          const EvalSettings& eval);

/// Best-threshold verification accuracy on balanced probe-vs-gallery pairs.
double balanced_verification(const Model& model, const LabeledImages& gallery, const LabeledImages& probe,
                             int batch_size, std::uint64_t seed);

} // namespace petal
