#pragma once

// Model surgery: wraps selected backbone linears with twin (or single)
// low-rank adapters and threads the per-sample blend weight through them.

#include <algorithm>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "petal/backbone.hpp"
#include "petal/image.hpp"
#include "petal/quality.hpp"

namespace petal {

enum class AdapterMode { none, single, twin };

inline std::string_view mode_name(AdapterMode m)
{
    switch (m) {
    case AdapterMode::none: return "none";
    case AdapterMode::single: return "single";
    case AdapterMode::twin: return "twin";
    }
    return "?";
}

inline std::optional<AdapterMode> parse_mode(std::string_view s)
{
    for (AdapterMode m : {AdapterMode::none, AdapterMode::single, AdapterMode::twin})
        if (mode_name(m) == s)
            return m;
    return std::nullopt;
}

struct InjectionConfig {
    std::vector<Site> sites{Site::attention_qkv, Site::feature_head};
    int rank = 8;
    double scale = 1.0;
    double dropout_rate = 0.1;
    AdapterMode mode = AdapterMode::twin;

    static InjectionConfig recommended() { return {}; }

    /// Named presets accepted by the CLI: "recommended", "attention", "attention+feature",
    /// "attention+proj", "attention+mlp", "attention+patch", "all".
    static InjectionConfig preset(std::string_view name)
    {
        InjectionConfig c;
        if (name == "recommended" || name == "attention+feature")
            c.sites = {Site::attention_qkv, Site::feature_head};
        else if (name == "attention")
            c.sites = {Site::attention_qkv};
        else if (name == "attention+proj")
            c.sites = {Site::attention_qkv, Site::attention_proj};
        else if (name == "attention+mlp")
            c.sites = {Site::attention_qkv, Site::mlp};
        else if (name == "attention+patch")
            c.sites = {Site::attention_qkv, Site::patch_reduction};
        else if (name == "all")
            c.sites = {kAllSites.begin(), kAllSites.end()};
        else
            throw ConfigError("unknown injection preset '" + std::string(name) + "'");
        return c;
    }

    bool has_site(Site s) const { return std::find(sites.begin(), sites.end(), s) != sites.end(); }

    void validate() const
    {
        if (mode != AdapterMode::none && sites.empty())
            throw ConfigError("injection: at least one site is required unless mode is none");
        for (std::size_t i = 0; i < sites.size(); ++i)
            for (std::size_t j = i + 1; j < sites.size(); ++j)
                if (sites[i] == sites[j])
                    throw ConfigError("injection: site '" + std::string(site_name(sites[i])) + "' listed twice");
        if (rank < 1)
            throw ConfigError("injection: rank must be at least 1");
        if (!(scale >= 0.0) || !std::isfinite(scale))
            throw ConfigError("injection: scale must be finite and nonnegative");
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
            throw ConfigError("injection: dropout_rate must lie in [0, 1)");
    }

    /// Order-independent text form; feeds the checkpoint digest.
    std::string canonical() const
    {
        std::vector<std::string> names;
        for (Site s : sites)
            names.emplace_back(site_name(s));
        std::sort(names.begin(), names.end());
        std::string out = "mode=" + std::string(mode_name(mode)) + ";rank=" + std::to_string(rank) + ";scale=";
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.17g", scale);
        out += buf;
        out += ";sites=";
        for (std::size_t i = 0; i < names.size(); ++i)
            out += (i ? "," : "") + names[i];
        return out;
    }
};

inline std::string canonical(const BackboneConfig& c)
{
    return "image=" + std::to_string(c.image_size) + ";channels=" + std::to_string(c.channels) +
           ";patch=" + std::to_string(c.patch_size) + ";embed=" + std::to_string(c.embed_dim) +
           ";attn=" + std::to_string(c.attn_dim) + ";heads=" + std::to_string(c.heads) +
           ";depth=" + std::to_string(c.depth) + ";mlp=" + std::to_string(c.mlp_dim) +
           ";feature=" + std::to_string(c.feature_dim) + ";reduction=" + (c.has_reduction() ? "1" : "0");
}

/// 64-bit FNV-1a of the injection and backbone shape descriptions, hex encoded.
inline std::string injection_digest(const InjectionConfig& inj, const BackboneConfig& bb)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : inj.canonical() + "|" + canonical(bb)) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

struct ParamCount {
    Eigen::Index total = 0;
    Eigen::Index trainable = 0;
};

/// Closed form: adapters per site times rank * (m + n), summed over injected sites.
template <typename Scalar>
Eigen::Index expected_adapter_params(ToyBackbone<Scalar>& backbone, const InjectionConfig& cfg)
{
    if (cfg.mode == AdapterMode::none)
        return 0;
    const Eigen::Index copies = cfg.mode == AdapterMode::twin ? 2 : 1;
    Eigen::Index n = 0;
    for (auto& [kind, site] : backbone.injectable())
        if (cfg.has_site(kind))
            n += copies * cfg.rank * (site->base().out_features() + site->base().in_features());
    return n;
}

template <typename Scalar>
class AdaptedModel {
public:
    AdaptedModel(ToyBackbone<Scalar> backbone, InjectionConfig cfg, std::optional<QualityGate> gate)
        : backbone_(std::move(backbone)), cfg_(std::move(cfg)), gate_(std::move(gate))
    {}

    ToyBackbone<Scalar>& backbone() { return backbone_; }
    const ToyBackbone<Scalar>& backbone() const { return backbone_; }
    const InjectionConfig& config() const { return cfg_; }
    const std::optional<QualityGate>& gate() const { return gate_; }
    void set_gate(QualityGate g) { gate_ = std::move(g); }
    bool stripped() const { return stripped_; }

    /// True when the forward blends two adapters and so needs gate weights.
    bool gated() const { return cfg_.mode == AdapterMode::twin && !stripped_; }

    /// Per-image blend weights from the gate; ones when the model does not blend.
    Vec<Scalar> alpha(std::span<const Image> images) const
    {
        if (!gated())
            return Vec<Scalar>::Ones(static_cast<Eigen::Index>(images.size()));
        if (!gate_)
            throw StateError("twin-adapted model has no quality gate");
        return gate_->alpha(images).template cast<Scalar>();
    }

    Mat<Scalar> forward(const Mat<Scalar>& pixels, const Vec<Scalar>& alpha, const ForwardOptions<Scalar>& opt = {},
                        typename ToyBackbone<Scalar>::Tape* tape = nullptr) const
    {
        return backbone_.forward(pixels, alpha, opt, tape);
    }

    /// Computes alpha once for the batch from the raw images, then runs the backbone.
    Mat<Scalar> forward(std::span<const Image> images, const ForwardOptions<Scalar>& opt = {},
                        typename ToyBackbone<Scalar>::Tape* tape = nullptr) const
    {
        return backbone_.forward(pixel_rows<Scalar>(images), alpha(images), opt, tape);
    }

    /// Removes every adapter and returns the untouched base backbone.
    ToyBackbone<Scalar> strip()
    {
        if (stripped_)
            throw StateError("model has already been stripped");
        for (auto& [kind, site] : backbone_.injectable())
            if (site->adapted())
                site->detach();
        stripped_ = true;
        return std::move(backbone_);
    }

    ParamCount count_trainable() const
    {
        ParamCount c;
        backbone_.for_each_param([&](const Param<Scalar>& p) {
            c.total += p.size();
            if (p.trainable)
                c.trainable += p.size();
        });
        return c;
    }

private:
    ToyBackbone<Scalar> backbone_;
    InjectionConfig cfg_;
    std::optional<QualityGate> gate_;
    bool stripped_ = false;
};

/// Attaches adapters at every linear of the configured site kinds and freezes
/// the base. Adapter seeds derive from (seed, layer id) so placement order
/// never changes initialization.
template <typename Scalar>
AdaptedModel<Scalar> inject(ToyBackbone<Scalar> backbone, const InjectionConfig& cfg,
                            std::optional<QualityGate> gate, std::uint64_t seed)
{
    cfg.validate();
    if (cfg.mode != AdapterMode::none) {
        auto sites = backbone.injectable();
        for (Site s : cfg.sites) {
            const bool present = std::any_of(sites.begin(), sites.end(), [&](const auto& e) { return e.first == s; });
            if (!present)
                throw ConfigError("injection site '" + std::string(site_name(s)) + "' does not exist in this backbone");
        }
        for (auto& [kind, site] : sites) {
            if (!cfg.has_site(kind))
                continue;
            const Linear<Scalar>& b = site->base();
            const Eigen::Index m = b.out_features(), n = b.in_features();
            auto hi = init_adapter<Scalar>(m, n, cfg.rank, cfg.scale, cfg.dropout_rate,
                                           derive_seed(seed, site->id() + ".hi"), site->id() + ".adapter_hi");
            std::optional<LowRankAdapter<Scalar>> lo;
            if (cfg.mode == AdapterMode::twin)
                lo = init_adapter<Scalar>(m, n, cfg.rank, cfg.scale, cfg.dropout_rate,
                                          derive_seed(seed, site->id() + ".lo"), site->id() + ".adapter_lo");
            site->attach(std::move(hi), std::move(lo));
        }
    }
    backbone.set_base_trainable(false);
    return AdaptedModel<Scalar>(std::move(backbone), cfg, std::move(gate));
}

} // namespace petal
