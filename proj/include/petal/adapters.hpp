#pragma once

// Low-rank adapters and the quality-blended twin-adapter linear layer.
//
// Layout conventions: activations are row-major in the logical sense, one
// sample (or token) per row, so a layer with weight W (m x n) maps an input
// block X (rows x n) to X * W^T (rows x m). The blend weight alpha is given
// per row; callers expand per-sample alpha across token rows.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "petal/core.hpp"

namespace petal {

template <typename Scalar>
struct LowRankAdapter {
    Param<Scalar> down; // rank x n
    Param<Scalar> up;   // m x rank
    int rank = 0;
    Scalar scale = Scalar(1);
    Scalar dropout_rate = Scalar(0);

    Eigen::Index in_features() const { return down.value.cols(); }
    Eigen::Index out_features() const { return up.value.rows(); }
    Eigen::Index parameter_count() const { return down.size() + up.size(); }

    void set_trainable(bool on)
    {
        down.trainable = on;
        up.trainable = on;
    }

    template <typename Other>
    LowRankAdapter<Other> cast() const
    {
        LowRankAdapter<Other> out;
        out.down = Param<Other>(down.name, down.value.template cast<Other>(), down.trainable);
        out.up = Param<Other>(up.name, up.value.template cast<Other>(), up.trainable);
        out.rank = rank;
        out.scale = static_cast<Other>(scale);
        out.dropout_rate = static_cast<Other>(dropout_rate);
        return out;
    }
};

/// Fresh adapter: up-projection exactly zero, down-projection ~ N(0, (1/rank)^2).
template <typename Scalar>
LowRankAdapter<Scalar> init_adapter(Eigen::Index m, Eigen::Index n, int rank, double scale,
                                    double dropout_rate, std::uint64_t seed,
                                    const std::string& name = "adapter")
{
    if (m <= 0 || n <= 0)
        throw ConfigError("adapter dimensions must be positive (got " + std::to_string(m) + "x" +
                          std::to_string(n) + ")");
    if (rank < 1 || rank > std::min(m, n))
        throw ConfigError("adapter rank " + std::to_string(rank) + " outside [1, min(" +
                          std::to_string(m) + ", " + std::to_string(n) + ")]");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
        throw ConfigError("adapter dropout rate must lie in [0, 1)");
    if (!(scale >= 0.0) || !std::isfinite(scale))
        throw ConfigError("adapter scale must be a finite nonnegative number");

    LowRankAdapter<Scalar> a;
    a.rank = rank;
    a.scale = static_cast<Scalar>(scale);
    a.dropout_rate = static_cast<Scalar>(dropout_rate);
    a.down = Param<Scalar>(name + ".down", gaussian_matrix<Scalar>(rank, n, 1.0 / rank, seed), true);
    a.up = Param<Scalar>(name + ".up", Mat<Scalar>::Zero(m, rank), true);
    return a;
}

/// Intermediate values needed to backpropagate through one adapter call.
template <typename Scalar>
struct AdapterTrace {
    Mat<Scalar> hidden; // rows x rank
    Mat<Scalar> mask;   // rows x m, already divided by the keep probability; empty = no dropout
};

/// scale * dropout(W_up (W_dw x)), one input per row of `x`.
template <typename Scalar>
Mat<Scalar> adapter_delta(const LowRankAdapter<Scalar>& a, const Mat<Scalar>& x, bool training,
                          Rng* rng = nullptr, AdapterTrace<Scalar>* trace = nullptr)
{
    if (x.cols() != a.in_features())
        throw DimensionError("adapter expects width " + std::to_string(a.in_features()) + ", got " +
                             std::to_string(x.cols()));
    Mat<Scalar> hidden = x * a.down.value.transpose();
    Mat<Scalar> out = hidden * a.up.value.transpose();
    Mat<Scalar> mask;
    if (training && a.dropout_rate > Scalar(0)) {
        if (rng == nullptr)
            throw StateError("adapter dropout in training mode needs a random generator");
        const double keep = 1.0 - static_cast<double>(a.dropout_rate);
        std::bernoulli_distribution draw(keep);
        mask.resize(out.rows(), out.cols());
        for (Eigen::Index j = 0; j < mask.cols(); ++j)
            for (Eigen::Index i = 0; i < mask.rows(); ++i)
                mask(i, j) = draw(*rng) ? static_cast<Scalar>(1.0 / keep) : Scalar(0);
        out = out.cwiseProduct(mask);
    }
    out *= a.scale;
    if (trace != nullptr) {
        trace->hidden = std::move(hidden);
        trace->mask = std::move(mask);
    }
    return out;
}

/// Backward of adapter_delta. `d_delta` is the gradient w.r.t. the adapter's
/// (already blended) output; returns the gradient w.r.t. the input.
template <typename Scalar>
Mat<Scalar> adapter_backward(LowRankAdapter<Scalar>& a, const Mat<Scalar>& x,
                             const AdapterTrace<Scalar>& trace, const Mat<Scalar>& d_delta)
{
    Mat<Scalar> d_out = a.scale * d_delta;
    if (trace.mask.size() != 0)
        d_out = d_out.cwiseProduct(trace.mask);
    a.up.accumulate(d_out.transpose() * trace.hidden);
    Mat<Scalar> d_hidden = d_out * a.up.value;
    a.down.accumulate(d_hidden.transpose() * x);
    return d_hidden * a.down.value;
}

/// Plain dense layer y = W x + b.
template <typename Scalar>
struct Linear {
    Param<Scalar> weight; // m x n
    Param<Scalar> bias;   // m x 1, empty when the layer has no bias

    Eigen::Index in_features() const { return weight.value.cols(); }
    Eigen::Index out_features() const { return weight.value.rows(); }
    bool has_bias() const { return bias.size() != 0; }

    Mat<Scalar> forward(const Mat<Scalar>& x) const
    {
        if (x.cols() != in_features())
            throw DimensionError(weight.name + ": expected width " + std::to_string(in_features()) +
                                 ", got " + std::to_string(x.cols()));
        Mat<Scalar> y = x * weight.value.transpose();
        if (has_bias())
            y.rowwise() += bias.value.col(0).transpose();
        return y;
    }

    Mat<Scalar> backward(const Mat<Scalar>& x, const Mat<Scalar>& dy)
    {
        weight.accumulate(dy.transpose() * x);
        if (has_bias())
            bias.accumulate(dy.colwise().sum().transpose());
        return dy * weight.value;
    }

    void set_trainable(bool on)
    {
        weight.trainable = on;
        bias.trainable = on;
    }
};

template <typename Scalar>
Linear<Scalar> init_linear(Eigen::Index m, Eigen::Index n, bool with_bias, std::uint64_t seed,
                           const std::string& name)
{
    Linear<Scalar> l;
    l.weight = Param<Scalar>(name + ".weight", gaussian_matrix<Scalar>(m, n, 1.0 / std::sqrt(double(n)), seed));
    if (with_bias)
        l.bias = Param<Scalar>(name + ".bias", Mat<Scalar>::Zero(m, 1));
    return l;
}

/// Frozen base layer plus two low-rank adapters blended per row:
///   y = W0 x + b + alpha * delta_hi(x) + (1 - alpha) * delta_lo(x).
/// `adapter_lo` empty means single-adapter mode: y = W0 x + b + delta_hi(x).
template <typename Scalar>
struct TwinAdaptedLinear {
    Linear<Scalar> base;
    LowRankAdapter<Scalar> adapter_hi;
    std::optional<LowRankAdapter<Scalar>> adapter_lo;

    bool is_twin() const { return adapter_lo.has_value(); }

    Eigen::Index adapter_parameter_count() const
    {
        return adapter_hi.parameter_count() + (adapter_lo ? adapter_lo->parameter_count() : 0);
    }
};

template <typename Scalar>
struct LinearTrace {
    Mat<Scalar> x;
    Vec<Scalar> alpha;
    AdapterTrace<Scalar> hi;
    AdapterTrace<Scalar> lo;
};

inline constexpr double kAlphaTolerance = 1e-6;

/// Validates and clamps a blend-weight vector to [0, 1].
template <typename Scalar>
Vec<Scalar> checked_alpha(const Vec<Scalar>& alpha)
{
    Vec<Scalar> out(alpha.size());
    for (Eigen::Index i = 0; i < alpha.size(); ++i) {
        const double v = static_cast<double>(alpha(i));
        if (!std::isfinite(v) || v < -kAlphaTolerance || v > 1.0 + kAlphaTolerance)
            throw GatingError("blend weight " + std::to_string(v) + " outside [0, 1]");
        out(i) = std::clamp(alpha(i), Scalar(0), Scalar(1));
    }
    return out;
}

template <typename Scalar>
Mat<Scalar> twin_forward(const TwinAdaptedLinear<Scalar>& layer, const Mat<Scalar>& x,
                         const Vec<Scalar>& alpha, bool training, Rng* rng = nullptr,
                         LinearTrace<Scalar>* trace = nullptr)
{
    if (alpha.size() != x.rows())
        throw DimensionError("blend weights: expected " + std::to_string(x.rows()) + " entries, got " +
                             std::to_string(alpha.size()));
    Vec<Scalar> a = checked_alpha(alpha);
    Mat<Scalar> y = layer.base.forward(x);
    AdapterTrace<Scalar>* hi_trace = trace ? &trace->hi : nullptr;
    AdapterTrace<Scalar>* lo_trace = trace ? &trace->lo : nullptr;
    if (layer.is_twin()) {
        y += a.asDiagonal() * adapter_delta(layer.adapter_hi, x, training, rng, hi_trace);
        Vec<Scalar> rest = Vec<Scalar>::Ones(a.size()) - a;
        y += rest.asDiagonal() * adapter_delta(*layer.adapter_lo, x, training, rng, lo_trace);
    } else {
        y += adapter_delta(layer.adapter_hi, x, training, rng, hi_trace);
    }
    if (trace != nullptr) {
        trace->x = x;
        trace->alpha = std::move(a);
    }
    return y;
}

template <typename Scalar>
Mat<Scalar> twin_backward(TwinAdaptedLinear<Scalar>& layer, const LinearTrace<Scalar>& trace,
                          const Mat<Scalar>& dy)
{
    Mat<Scalar> dx = layer.base.backward(trace.x, dy);
    if (layer.is_twin()) {
        Mat<Scalar> d_hi = trace.alpha.asDiagonal() * dy;
        dx += adapter_backward(layer.adapter_hi, trace.x, trace.hi, d_hi);
        Vec<Scalar> rest = Vec<Scalar>::Ones(trace.alpha.size()) - trace.alpha;
        Mat<Scalar> d_lo = rest.asDiagonal() * dy;
        dx += adapter_backward(*layer.adapter_lo, trace.x, trace.lo, d_lo);
    } else {
        dx += adapter_backward(layer.adapter_hi, trace.x, trace.hi, dy);
    }
    return dx;
}

/// A linear sublayer of the backbone that may or may not carry adapters.
template <typename Scalar>
class LinearSite {
public:
    using Layer = std::variant<Linear<Scalar>, TwinAdaptedLinear<Scalar>>;

    LinearSite() = default;
    LinearSite(std::string id, Linear<Scalar> l) : id_(std::move(id)), layer_(std::move(l)) {}

    const std::string& id() const { return id_; }
    bool adapted() const { return std::holds_alternative<TwinAdaptedLinear<Scalar>>(layer_); }

    const Linear<Scalar>& base() const
    {
        if (adapted())
            return std::get<TwinAdaptedLinear<Scalar>>(layer_).base;
        return std::get<Linear<Scalar>>(layer_);
    }
    Linear<Scalar>& base()
    {
        return const_cast<Linear<Scalar>&>(std::as_const(*this).base());
    }

    const TwinAdaptedLinear<Scalar>& twin() const { return std::get<TwinAdaptedLinear<Scalar>>(layer_); }
    TwinAdaptedLinear<Scalar>& twin() { return std::get<TwinAdaptedLinear<Scalar>>(layer_); }

    void attach(LowRankAdapter<Scalar> hi, std::optional<LowRankAdapter<Scalar>> lo)
    {
        if (adapted())
            throw ConfigError("layer '" + id_ + "' already carries adapters");
        TwinAdaptedLinear<Scalar> t{std::get<Linear<Scalar>>(std::move(layer_)), std::move(hi), std::move(lo)};
        layer_ = std::move(t);
    }

    void detach()
    {
        if (!adapted())
            throw StateError("layer '" + id_ + "' carries no adapters");
        Linear<Scalar> l = std::move(std::get<TwinAdaptedLinear<Scalar>>(layer_).base);
        layer_ = std::move(l);
    }

    Mat<Scalar> forward(const Mat<Scalar>& x, const Vec<Scalar>& alpha_rows, bool training, Rng* rng,
                        LinearTrace<Scalar>* trace) const
    {
        if (adapted())
            return twin_forward(twin(), x, alpha_rows, training, rng, trace);
        if (trace != nullptr)
            trace->x = x;
        return base().forward(x);
    }

    Mat<Scalar> backward(const LinearTrace<Scalar>& trace, const Mat<Scalar>& dy)
    {
        if (adapted())
            return twin_backward(twin(), trace, dy);
        return base().backward(trace.x, dy);
    }

    template <typename Fn>
    void for_each_param(Fn&& fn)
    {
        Linear<Scalar>& b = base();
        fn(b.weight);
        if (b.has_bias())
            fn(b.bias);
        if (adapted()) {
            auto& t = twin();
            fn(t.adapter_hi.down);
            fn(t.adapter_hi.up);
            if (t.adapter_lo) {
                fn(t.adapter_lo->down);
                fn(t.adapter_lo->up);
            }
        }
    }

private:
    std::string id_;
    Layer layer_;
};

} // namespace petal
