#pragma once

// Fine-tuning loop: frozen base, trainable adapters (or everything, or only the
// head), margin loss, AdamW, warmup + polynomial decay. Also the first-step
// gradient probe used to compare parameter-efficient and full fine-tuning.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "petal/datasim.hpp"
#include "petal/injection.hpp"
#include "petal/losses.hpp"
#include "petal/optim.hpp"

namespace petal {

enum class TrainMode { petalface, single_lora, full_ft, frozen };

std::string_view train_mode_name(TrainMode m);
std::optional<TrainMode> parse_train_mode(std::string_view s);

struct TrainConfig {
    int epochs = 40;
    int warmup_epochs = 2;
    int batch_size = 8;
    double initial_lr = 4e-5;
    double weight_decay = 0.1;
    double lr_power = 1.0;
    /// Global L2 gradient-norm clip; disabled when unset.
    std::optional<double> clip_norm;
    /// l, the number of images sampled for lazy gate calibration.
    int calibration_samples = 1000;
    std::uint64_t seed = 0;
    TrainMode mode = TrainMode::petalface;
    /// Forces every blend weight to this value instead of asking the gate.
    std::optional<double> alpha_override;

    void validate() const;
};

struct EpochSummary {
    int epoch = 0;
    double mean_loss = 0.0;
    double lr = 0.0;
    double max_grad = 0.0;
};

struct TrainReport {
    TrainMode mode = TrainMode::petalface;
    std::vector<double> loss;     // per step
    std::vector<double> max_grad; // per step, max |g| over trainable parameters
    std::vector<double> lr;       // per step
    std::vector<EpochSummary> epochs;
    std::optional<GateCalibration> calibration;
    Eigen::Index trainable_params = 0;
    Eigen::Index total_params = 0;
    double wall_seconds = 0.0;
};

std::string train_report_json(const TrainReport& r);
std::string format_epoch_line(const EpochSummary& e);

/// Builds the model a training mode works on: twin adapters (petalface), one
/// adapter per site (single_lora), all base weights trainable (full_ft) or
/// nothing but the head (frozen).
template <typename Scalar>
AdaptedModel<Scalar> prepare_model(ToyBackbone<Scalar> backbone, TrainMode mode, InjectionConfig inj,
                                   std::optional<QualityGate> gate, std::uint64_t seed)
{
    switch (mode) {
    case TrainMode::petalface: inj.mode = AdapterMode::twin; break;
    case TrainMode::single_lora: inj.mode = AdapterMode::single; break;
    case TrainMode::full_ft:
    case TrainMode::frozen: inj.mode = AdapterMode::none; break;
    }
    AdaptedModel<Scalar> model = inject(std::move(backbone), inj, std::move(gate), seed);
    if (mode == TrainMode::full_ft)
        model.backbone().set_base_trainable(true);
    return model;
}

namespace detail {

template <typename Scalar>
std::vector<Param<Scalar>*> trainable_params(ToyBackbone<Scalar>& b, MarginHead<Scalar>* head)
{
    std::vector<Param<Scalar>*> out;
    b.for_each_param([&](Param<Scalar>& p) {
        if (p.trainable)
            out.push_back(&p);
    });
    if (head != nullptr && head->class_weights.trainable)
        out.push_back(&head->class_weights);
    return out;
}

template <typename Scalar>
double max_abs_grad(const std::vector<Param<Scalar>*>& params)
{
    double m = 0.0;
    for (const Param<Scalar>* p : params)
        if (p->has_grad())
            m = std::max(m, static_cast<double>(p->grad.cwiseAbs().maxCoeff()));
    return m;
}

template <typename Scalar>
void clip_grad_norm(const std::vector<Param<Scalar>*>& params, double max_norm)
{
    double sq = 0.0;
    for (const Param<Scalar>* p : params)
        if (p->has_grad())
            sq += static_cast<double>(p->grad.squaredNorm());
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0)
        for (Param<Scalar>* p : params)
            if (p->has_grad())
                p->grad *= static_cast<Scalar>(max_norm / norm);
}

} // namespace detail

/// Blend weights for a labelled image set, one per image. Calibrates the gate
/// on `images` first when it has no calibration yet.
template <typename Scalar>
Vec<Scalar> training_alpha(AdaptedModel<Scalar>& model, const std::vector<Image>& images, const TrainConfig& cfg)
{
    const auto n = static_cast<Eigen::Index>(images.size());
    if (cfg.alpha_override)
        return Vec<Scalar>::Constant(n, static_cast<Scalar>(*cfg.alpha_override));
    if (!model.gated())
        return Vec<Scalar>::Ones(n);
    if (!model.gate() || !model.gate()->estimator)
        throw StateError("twin-adapted model has no quality estimator");
    if (!model.gate()->calibration) {
        QualityGate g = *model.gate();
        g.calibration = calibrate_gate(*g.estimator, images, cfg.calibration_samples, cfg.seed);
        model.set_gate(std::move(g));
    }
    return model.alpha(images);
}

/// Sample order of one epoch: a seeded shuffle of 0..n-1.
inline std::vector<long> epoch_order(long n, std::uint64_t seed, int epoch)
{
    std::vector<long> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0L);
    Rng rng(derive_seed(derive_seed(seed, "shuffle"), static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

/// One optimization run. `head` is trained alongside whatever `model` marks trainable.
template <typename Scalar>
TrainReport finetune(AdaptedModel<Scalar>& model, const LabeledImages& train, MarginHead<Scalar>& head,
                     const TrainConfig& cfg, std::ostream* progress = nullptr)
{
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    TrainReport report;
    report.mode = cfg.mode;
    const ParamCount pc = model.count_trainable();
    report.total_params = pc.total;
    report.trainable_params = pc.trainable + (head.class_weights.trainable ? head.class_weights.size() : 0);
    if (cfg.epochs == 0) {
        report.calibration = model.gate() ? model.gate()->calibration : std::nullopt;
        return report;
    }
    if (train.size() == 0)
        throw InputError("training split is empty");
    if (head.num_classes() < train.num_classes())
        throw DimensionError("head has fewer classes than the training split");

    const Vec<Scalar> alpha_all = training_alpha(model, train.images, cfg);
    report.calibration = model.gate() ? model.gate()->calibration : std::nullopt;

    const Mat<Scalar> pixels_all = pixel_rows<Scalar>(train.images);
    const auto n = static_cast<long>(train.size());
    const long steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    LrSchedule sched{cfg.initial_lr, cfg.warmup_epochs * steps_per_epoch, cfg.epochs * steps_per_epoch, cfg.lr_power};
    AdamW<Scalar> opt(AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
    std::vector<Param<Scalar>*> params = detail::trainable_params(model.backbone(), &head);
    Rng dropout_rng(derive_seed(cfg.seed, "dropout"));

    long step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<long> order = epoch_order(n, cfg.seed, epoch);
        EpochSummary sum;
        sum.epoch = epoch + 1;
        for (long b = 0; b < steps_per_epoch; ++b, ++step) {
            const long lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
            const auto p = static_cast<Eigen::Index>(hi - lo);
            Mat<Scalar> x(p, pixels_all.cols());
            Vec<Scalar> a(p);
            std::vector<int> y(static_cast<std::size_t>(p));
            for (Eigen::Index i = 0; i < p; ++i) {
                const long k = order[static_cast<std::size_t>(lo + i)];
                x.row(i) = pixels_all.row(k);
                a(i) = alpha_all(k);
                y[static_cast<std::size_t>(i)] = train.labels[static_cast<std::size_t>(k)];
            }
            model.backbone().zero_grad();
            head.class_weights.zero_grad();
            typename ToyBackbone<Scalar>::Tape tape;
            ForwardOptions<Scalar> fo;
            fo.training = true;
            fo.rng = &dropout_rng;
            Mat<Scalar> emb = model.forward(x, a, fo, &tape);
            LossResult<Scalar> lr;
            try {
                lr = margin_loss(head, emb, y, true);
            } catch (const NumericError& e) {
                throw NumericError("epoch " + std::to_string(epoch + 1) + " step " + std::to_string(step) + ": " +
                                   e.what());
            }
            model.backbone().backward(tape, lr.d_embeddings);
            if (cfg.clip_norm)
                detail::clip_grad_norm(params, *cfg.clip_norm);
            const double g = detail::max_abs_grad(params);
            if (!std::isfinite(g))
                throw NumericError("non-finite gradient at epoch " + std::to_string(epoch + 1) + " step " +
                                   std::to_string(step));
            const double rate = sched.lr(step);
            opt.step(params, rate);
            report.loss.push_back(static_cast<double>(lr.loss));
            report.max_grad.push_back(g);
            report.lr.push_back(rate);
            sum.mean_loss += static_cast<double>(lr.loss);
            sum.max_grad = std::max(sum.max_grad, g);
            sum.lr = rate;
        }
        sum.mean_loss /= static_cast<double>(steps_per_epoch);
        report.epochs.push_back(sum);
        if (progress != nullptr)
            *progress << format_epoch_line(sum) << std::endl;
    }
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

struct GradHistogram {
    double log10_low = -12.0;
    double log10_high = 2.0;
    std::vector<long> counts; // equal-width bins of log10 |g| over [low, high]; ends absorb overflow
    long zeros = 0;
};

struct GradProbeResult {
    TrainMode mode = TrainMode::petalface;
    long count = 0;
    double max_abs = 0.0;
    double p99 = 0.0;
    double mean_abs = 0.0;
    GradHistogram histogram;
};

GradProbeResult summarize_gradients(TrainMode mode, std::vector<double> magnitudes, int bins = 14);
std::string grad_probe_json(const std::vector<GradProbeResult>& results);

/// First-iteration gradient magnitudes over the backbone's trainable
/// parameters (the head is left out so both modes are compared on the same
/// footing). Every mode sees the same batch, head and dropout stream.
template <typename Scalar>
std::vector<GradProbeResult> grad_probe(const ToyBackbone<Scalar>& backbone, const std::vector<Image>& batch,
                                        const std::vector<int>& labels, const std::optional<QualityGate>& gate,
                                        const MarginHead<Scalar>& head, const InjectionConfig& inj,
                                        const std::vector<TrainMode>& modes, std::uint64_t seed)
{
    std::vector<GradProbeResult> out;
    TrainConfig tc;
    tc.seed = seed;
    for (TrainMode mode : modes) {
        AdaptedModel<Scalar> model = prepare_model(backbone, mode, inj, gate, seed);
        MarginHead<Scalar> h = head;
        tc.mode = mode;
        const Vec<Scalar> a = training_alpha(model, batch, tc);
        model.backbone().zero_grad();
        h.class_weights.zero_grad();
        Rng rng(derive_seed(seed, "dropout"));
        ForwardOptions<Scalar> fo;
        fo.training = true;
        fo.rng = &rng;
        typename ToyBackbone<Scalar>::Tape tape;
        Mat<Scalar> emb = model.forward(pixel_rows<Scalar>(batch), a, fo, &tape);
        model.backbone().backward(tape, margin_loss(h, emb, labels, true).d_embeddings);
        std::vector<double> mags;
        model.backbone().for_each_param([&](Param<Scalar>& p) {
            if (!p.trainable)
                return;
            if (!p.has_grad()) {
                mags.insert(mags.end(), static_cast<std::size_t>(p.size()), 0.0);
                return;
            }
            for (Eigen::Index i = 0; i < p.grad.size(); ++i)
                mags.push_back(std::abs(static_cast<double>(p.grad.data()[i])));
        });
        out.push_back(summarize_gradients(mode, std::move(mags)));
    }
    return out;
}

} // namespace petal
