#pragma once

// Adapter-only checkpoints ("petal-ckpt/1") and full backbone weight files
// ("petal-backbone/1"). Both share one container:
//
//   <format string>\n
//   u64 little-endian manifest length
//   manifest (JSON, UTF-8)
//   float32 little-endian tensors, row-major, in manifest order
//
// The manifest records every tensor's name and shape and an FNV-1a checksum of
// the tensor payload.

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "petal/injection.hpp"
#include "petal/losses.hpp"

namespace petal {

inline constexpr const char* kCheckpointFormat = "petal-ckpt/1";
inline constexpr const char* kBackboneFormat = "petal-backbone/1";
inline constexpr const char* kAlphaConvention = "alpha-weights-hi";

struct Tensor {
    std::string name;
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    std::vector<float> data; // row-major

    template <typename Scalar>
    static Tensor from(const std::string& name, const Mat<Scalar>& m)
    {
        Tensor t{name, m.rows(), m.cols(), {}};
        t.data.reserve(static_cast<std::size_t>(m.size()));
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j)
                t.data.push_back(static_cast<float>(m(i, j)));
        return t;
    }

    template <typename Scalar>
    Mat<Scalar> to() const
    {
        Mat<Scalar> m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j)
                m(i, j) = static_cast<Scalar>(data[static_cast<std::size_t>(i * cols + j)]);
        return m;
    }
};

struct HeadState {
    MarginVariant variant = MarginVariant::arcface;
    double margin = 0.5;
    double logit_scale = 64.0;
    std::vector<std::string> identities; // class id -> label
    Tensor class_weights;
};

struct AdapterCheckpoint {
    std::string digest;
    InjectionConfig injection;
    BackboneConfig backbone;
    std::optional<GateCalibration> calibration;
    /// Per adapted layer: "<id>.adapter_hi.down", "<id>.adapter_hi.up" and,
    /// in twin mode, the same for adapter_lo.
    std::vector<std::string> layer_ids;
    std::vector<Tensor> tensors;
    std::optional<HeadState> head;
    /// Hash of the base weights the adapters were trained against; empty if unknown.
    std::string base_fingerprint;

    const Tensor* find(const std::string& name) const;
};

/// FNV-1a over every base parameter's name and float32 values.
template <typename Scalar>
std::string base_fingerprint(const ToyBackbone<Scalar>& b)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= c[i];
            h *= 0x100000001b3ULL;
        }
    };
    b.for_each_param([&](const Param<Scalar>& p) {
        if (p.name.find(".adapter_") != std::string::npos)
            return;
        mix(p.name.data(), p.name.size());
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            const float v = static_cast<float>(p.value.data()[i]);
            mix(&v, sizeof v);
        }
    });
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_checkpoint(const AdapterCheckpoint& ckpt, const std::filesystem::path& path);
AdapterCheckpoint read_checkpoint(const std::filesystem::path& path);

template <typename Scalar>
AdapterCheckpoint save_adapters(AdaptedModel<Scalar>& model, const MarginHead<Scalar>* head = nullptr,
                                const std::vector<std::string>& identities = {})
{
    if (model.stripped())
        throw StateError("cannot checkpoint a stripped model");
    AdapterCheckpoint c;
    c.injection = model.config();
    c.backbone = model.backbone().config();
    c.digest = injection_digest(c.injection, c.backbone);
    c.base_fingerprint = base_fingerprint(model.backbone());
    if (model.gate() && model.gate()->calibration)
        c.calibration = model.gate()->calibration;
    for (auto& [kind, site] : model.backbone().injectable()) {
        if (!site->adapted())
            continue;
        c.layer_ids.push_back(site->id());
        const auto& t = site->twin();
        c.tensors.push_back(Tensor::from(t.adapter_hi.down.name, t.adapter_hi.down.value));
        c.tensors.push_back(Tensor::from(t.adapter_hi.up.name, t.adapter_hi.up.value));
        if (t.adapter_lo) {
            c.tensors.push_back(Tensor::from(t.adapter_lo->down.name, t.adapter_lo->down.value));
            c.tensors.push_back(Tensor::from(t.adapter_lo->up.name, t.adapter_lo->up.value));
        }
    }
    if (head != nullptr) {
        HeadState h;
        h.variant = head->variant;
        h.margin = head->margin;
        h.logit_scale = head->logit_scale;
        h.identities = identities;
        h.class_weights = Tensor::from(head->class_weights.name, head->class_weights.value);
        c.head = std::move(h);
    }
    return c;
}

/// Copies adapter tensors into an injected model. Base weights are not read or written.
template <typename Scalar>
void load_adapters(AdaptedModel<Scalar>& model, const AdapterCheckpoint& c)
{
    if (model.stripped())
        throw StateError("cannot load adapters into a stripped model");
    const std::string want = injection_digest(model.config(), model.backbone().config());
    if (c.digest != want)
        throw IncompatibleError("checkpoint was made for a different injection or backbone (digest " + c.digest +
                                ", model " + want + ")");
    if (!c.base_fingerprint.empty() && c.base_fingerprint != base_fingerprint(model.backbone()))
        throw IncompatibleError("checkpoint was trained against different base weights (fingerprint " +
                                c.base_fingerprint + ", model " + base_fingerprint(model.backbone()) + ")");
    auto assign = [&](Param<Scalar>& p) {
        const Tensor* t = c.find(p.name);
        if (t == nullptr)
            throw CorruptionError("checkpoint has no tensor '" + p.name + "'");
        if (t->rows != p.value.rows() || t->cols != p.value.cols())
            throw CorruptionError("checkpoint tensor '" + p.name + "' has the wrong shape");
        p.value = t->template to<Scalar>();
    };
    for (auto& [kind, site] : model.backbone().injectable()) {
        if (!site->adapted())
            continue;
        if (std::find(c.layer_ids.begin(), c.layer_ids.end(), site->id()) == c.layer_ids.end())
            throw CorruptionError("checkpoint is missing layer '" + site->id() + "'");
        auto& t = site->twin();
        assign(t.adapter_hi.down);
        assign(t.adapter_hi.up);
        if (t.adapter_lo) {
            assign(t.adapter_lo->down);
            assign(t.adapter_lo->up);
        }
    }
    if (c.calibration) {
        QualityGate g = model.gate().value_or(QualityGate{});
        if (!g.estimator)
            g.estimator = make_estimator(c.calibration->estimator_name);
        g.calibration = c.calibration;
        model.set_gate(std::move(g));
    }
}

template <typename Scalar>
MarginHead<Scalar> load_head(const AdapterCheckpoint& c)
{
    if (!c.head)
        throw CorruptionError("checkpoint carries no classification head");
    MarginHead<Scalar> h;
    h.variant = c.head->variant;
    h.margin = c.head->margin;
    h.logit_scale = c.head->logit_scale;
    h.class_weights = Param<Scalar>(c.head->class_weights.name, c.head->class_weights.template to<Scalar>(), true);
    return h;
}

struct BackboneWeights {
    BackboneConfig config;
    std::vector<Tensor> tensors;
};

void write_backbone(const BackboneWeights& w, const std::filesystem::path& path);
BackboneWeights read_backbone(const std::filesystem::path& path);

template <typename Scalar>
BackboneWeights save_backbone(ToyBackbone<Scalar>& b)
{
    BackboneWeights w{b.config(), {}};
    b.for_each_base_param([&](Param<Scalar>& p) { w.tensors.push_back(Tensor::from(p.name, p.value)); });
    return w;
}

template <typename Scalar>
ToyBackbone<Scalar> load_backbone(const BackboneWeights& w)
{
    ToyBackbone<Scalar> b(w.config, 0);
    b.for_each_base_param([&](Param<Scalar>& p) {
        auto it = std::find_if(w.tensors.begin(), w.tensors.end(), [&](const Tensor& t) { return t.name == p.name; });
        if (it == w.tensors.end())
            throw CorruptionError("backbone file has no tensor '" + p.name + "'");
        if (it->rows != p.value.rows() || it->cols != p.value.cols())
            throw CorruptionError("backbone tensor '" + p.name + "' has the wrong shape");
        p.value = it->template to<Scalar>();
    });
    return b;
}

} // namespace petal
