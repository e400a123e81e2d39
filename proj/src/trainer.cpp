#include "petal/trainer.hpp"

#include <cmath>

#include "json.hpp"

namespace petal {

using nlohmann::json;

std::string_view train_mode_name(TrainMode m)
{
    switch (m) {
    case TrainMode::petalface: return "petalface";
    case TrainMode::single_lora: return "single_lora";
    case TrainMode::full_ft: return "full_ft";
    case TrainMode::frozen: return "frozen";
    }
    return "?";
}

std::optional<TrainMode> parse_train_mode(std::string_view s)
{
    for (TrainMode m : {TrainMode::petalface, TrainMode::single_lora, TrainMode::full_ft, TrainMode::frozen})
        if (train_mode_name(m) == s)
            return m;
    return std::nullopt;
}

void TrainConfig::validate() const
{
    if (epochs < 0 || warmup_epochs < 0)
        throw ConfigError("train: epochs and warmup_epochs must be nonnegative");
    if (epochs > 0 && warmup_epochs >= epochs)
        throw ConfigError("train: warmup_epochs must be smaller than epochs");
    if (batch_size < 1)
        throw ConfigError("train: batch_size must be at least 1");
    if (!(initial_lr >= 0.0) || !std::isfinite(initial_lr))
        throw ConfigError("train: initial_lr must be finite and nonnegative");
    if (!(weight_decay >= 0.0))
        throw ConfigError("train: weight_decay must be nonnegative");
    if (!(lr_power > 0.0))
        throw ConfigError("train: lr_power must be positive");
    if (clip_norm && !(*clip_norm > 0.0))
        throw ConfigError("train: clip_norm must be positive");
    if (calibration_samples < 1)
        throw ConfigError("train: calibration_samples must be at least 1");
    if (alpha_override && !(*alpha_override >= 0.0 && *alpha_override <= 1.0))
        throw ConfigError("train: alpha_override must lie in [0, 1]");
}

std::string format_epoch_line(const EpochSummary& e)
{
    char buf[160];
    std::snprintf(buf, sizeof buf, "epoch=%d loss=%.6f lr=%.6g max_grad=%.6g", e.epoch, e.mean_loss, e.lr,
                  e.max_grad);
    return buf;
}

std::string train_report_json(const TrainReport& r)
{
    json epochs = json::array();
    for (const auto& e : r.epochs)
        epochs.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"lr", e.lr}, {"max_grad", e.max_grad}});
    json j = {{"mode", std::string(train_mode_name(r.mode))},
              {"steps", r.loss.size()},
              {"loss", r.loss},
              {"max_grad", r.max_grad},
              {"lr", r.lr},
              {"epochs", epochs},
              {"trainable_params", r.trainable_params},
              {"total_params", r.total_params},
              {"wall_seconds", r.wall_seconds}};
    if (r.calibration)
        j["calibration"] = {{"mu", r.calibration->mu},
                            {"sigma", r.calibration->sigma},
                            {"threshold", r.calibration->threshold},
                            {"l", r.calibration->sample_count}};
    return j.dump(2);
}

GradProbeResult summarize_gradients(TrainMode mode, std::vector<double> g, int bins)
{
    GradProbeResult r;
    r.mode = mode;
    r.count = static_cast<long>(g.size());
    r.histogram.counts.assign(static_cast<std::size_t>(bins), 0);
    if (g.empty())
        return r;
    double sum = 0.0;
    const double width = (r.histogram.log10_high - r.histogram.log10_low) / bins;
    for (double v : g) {
        sum += v;
        r.max_abs = std::max(r.max_abs, v);
        if (v == 0.0) {
            ++r.histogram.zeros;
            continue;
        }
        int k = static_cast<int>(std::floor((std::log10(v) - r.histogram.log10_low) / width));
        k = std::clamp(k, 0, bins - 1);
        ++r.histogram.counts[static_cast<std::size_t>(k)];
    }
    r.mean_abs = sum / static_cast<double>(g.size());
    // Nearest-rank 99th percentile.
    const auto rank = static_cast<std::size_t>(std::ceil(0.99 * static_cast<double>(g.size())));
    std::nth_element(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(rank - 1), g.end());
    r.p99 = g[rank - 1];
    return r;
}

std::string grad_probe_json(const std::vector<GradProbeResult>& results)
{
    json arr = json::array();
    for (const auto& r : results)
        arr.push_back({{"mode", std::string(train_mode_name(r.mode))},
                       {"count", r.count},
                       {"max_abs", r.max_abs},
                       {"p99", r.p99},
                       {"mean_abs", r.mean_abs},
                       {"histogram",
                        {{"log10_low", r.histogram.log10_low},
                         {"log10_high", r.histogram.log10_high},
                         {"counts", r.histogram.counts},
                         {"zeros", r.histogram.zeros}}}});
    return json{{"modes", arr}}.dump(2);
}

} // namespace petal
