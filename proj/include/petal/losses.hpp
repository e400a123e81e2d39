#pragma once

// Additive-angular (ArcFace) and additive-cosine (CosFace) margin softmax heads.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "petal/core.hpp"

namespace petal {

enum class MarginVariant { arcface, cosface };

inline std::string_view variant_name(MarginVariant v)
{
    return v == MarginVariant::arcface ? "arcface" : "cosface";
}

inline std::optional<MarginVariant> parse_variant(std::string_view s)
{
    if (s == "arcface")
        return MarginVariant::arcface;
    if (s == "cosface")
        return MarginVariant::cosface;
    return std::nullopt;
}

inline constexpr double kCosEps = 1e-7;

template <typename Scalar>
struct MarginHead {
    Param<Scalar> class_weights; // C x d
    double margin = 0.5;
    double logit_scale = 64.0;
    MarginVariant variant = MarginVariant::arcface;

    int num_classes() const { return static_cast<int>(class_weights.value.rows()); }
    int dim() const { return static_cast<int>(class_weights.value.cols()); }
};

inline double default_margin(MarginVariant v) { return v == MarginVariant::arcface ? 0.5 : 0.35; }

/// Fresh head: unit Gaussian rows, then normalized.
template <typename Scalar>
MarginHead<Scalar> make_margin_head(int classes, int dim, MarginVariant variant, double margin, double scale,
                                    std::uint64_t seed)
{
    if (classes < 1 || dim < 1)
        throw ConfigError("margin head needs at least one class and one dimension");
    if (!(margin >= 0.0) || !(scale > 0.0))
        throw ConfigError("margin head: margin must be >= 0 and scale > 0");
    MarginHead<Scalar> h;
    Mat<Scalar> w = gaussian_matrix<Scalar>(classes, dim, 1.0, seed);
    w.rowwise().normalize();
    h.class_weights = Param<Scalar>("head.class_weights", std::move(w), true);
    h.margin = margin;
    h.logit_scale = scale;
    h.variant = variant;
    return h;
}

/// Intermediates shared by logits, loss and backward.
template <typename Scalar>
struct MarginTrace {
    Mat<Scalar> e_hat;   // p x d normalized embeddings
    Vec<Scalar> e_norm;  // p
    Mat<Scalar> w_hat;   // C x d normalized class weights
    Vec<Scalar> w_norm;  // C
    Mat<Scalar> cosine;  // p x C
    Vec<Scalar> d_target; // slope of the target-cosine mapping, per sample
};

namespace detail {

template <typename Scalar>
Scalar target_cos(MarginVariant v, double m, Scalar c, Scalar* slope)
{
    if (v == MarginVariant::cosface) {
        *slope = Scalar(1);
        return c - Scalar(m);
    }
    const double cm = std::cos(m), sm = std::sin(m);
    const double cd = static_cast<double>(c);
    // Linear continuation past theta = pi - m.
    if (cd <= std::cos(M_PI - m)) {
        *slope = Scalar(1);
        return static_cast<Scalar>(cd - m * sm);
    }
    const double cc = std::clamp(cd, -1.0 + kCosEps, 1.0 - kCosEps);
    *slope = static_cast<Scalar>(cm + cc * sm / std::sqrt(1.0 - cc * cc));
    return static_cast<Scalar>(cd * cm - std::sqrt(std::max(0.0, 1.0 - cd * cd)) * sm);
}

} // namespace detail

template <typename Scalar>
Mat<Scalar> margin_logits(const MarginHead<Scalar>& head, const Mat<Scalar>& embeddings,
                          const std::vector<int>& labels, MarginTrace<Scalar>* trace = nullptr)
{
    if (embeddings.cols() != head.dim())
        throw DimensionError("margin head expects width " + std::to_string(head.dim()) + ", got " +
                             std::to_string(embeddings.cols()));
    if (static_cast<Eigen::Index>(labels.size()) != embeddings.rows())
        throw DimensionError("margin head: one label per embedding required");
    for (int y : labels)
        if (y < 0 || y >= head.num_classes())
            throw InputError("label " + std::to_string(y) + " outside [0, " + std::to_string(head.num_classes()) + ")");

    Vec<Scalar> e_norm = embeddings.rowwise().norm();
    for (Eigen::Index i = 0; i < e_norm.size(); ++i)
        if (!(e_norm(i) > Scalar(0)) || !std::isfinite(static_cast<double>(e_norm(i))))
            throw NumericError("embedding " + std::to_string(i) + " has zero or non-finite norm");
    Vec<Scalar> w_norm = head.class_weights.value.rowwise().norm();
    for (Eigen::Index j = 0; j < w_norm.size(); ++j)
        if (!(w_norm(j) > Scalar(0)))
            throw NumericError("class weight " + std::to_string(j) + " has zero norm");

    Mat<Scalar> e_hat = e_norm.cwiseInverse().asDiagonal() * embeddings;
    Mat<Scalar> w_hat = w_norm.cwiseInverse().asDiagonal() * head.class_weights.value;
    Mat<Scalar> cosine = e_hat * w_hat.transpose();
    const Scalar s = static_cast<Scalar>(head.logit_scale);
    Mat<Scalar> logits = s * cosine;
    Vec<Scalar> slope(labels.size());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        logits(i, y) = s * detail::target_cos(head.variant, head.margin, cosine(i, y), &slope(i));
    }
    if (trace != nullptr)
        *trace = {std::move(e_hat), std::move(e_norm), std::move(w_hat), std::move(w_norm), std::move(cosine),
                  std::move(slope)};
    return logits;
}

template <typename Scalar>
struct LossResult {
    Scalar loss = Scalar(0);
    Mat<Scalar> d_embeddings; // filled when requested
};

/// Mean cross-entropy over margin logits. With `backward`, also accumulates the
/// class-weight gradient into the head and returns d(loss)/d(embeddings).
template <typename Scalar>
LossResult<Scalar> margin_loss(MarginHead<Scalar>& head, const Mat<Scalar>& embeddings, const std::vector<int>& labels,
                               bool backward = false)
{
    MarginTrace<Scalar> t;
    Mat<Scalar> logits = margin_logits(head, embeddings, labels, &t);
    const Eigen::Index p = logits.rows();
    Vec<Scalar> mx = logits.rowwise().maxCoeff();
    Mat<Scalar> ex = (logits.colwise() - mx).array().exp().matrix();
    Vec<Scalar> z = ex.rowwise().sum();
    LossResult<Scalar> r;
    double loss = 0.0;
    for (Eigen::Index i = 0; i < p; ++i) {
        const int y = labels[static_cast<std::size_t>(i)];
        loss += static_cast<double>(std::log(z(i)) + mx(i) - logits(i, y));
    }
    loss /= static_cast<double>(p);
    if (!std::isfinite(loss))
        throw NumericError("margin loss is not finite");
    r.loss = static_cast<Scalar>(loss);
    if (!backward)
        return r;

    // d loss / d logits = (softmax - onehot) / p; chain through the target mapping.
    Mat<Scalar> d_cos = z.cwiseInverse().asDiagonal() * ex;
    for (Eigen::Index i = 0; i < p; ++i)
        d_cos(i, labels[static_cast<std::size_t>(i)]) -= Scalar(1);
    d_cos *= static_cast<Scalar>(head.logit_scale) / Scalar(p);
    for (Eigen::Index i = 0; i < p; ++i)
        d_cos(i, labels[static_cast<std::size_t>(i)]) *= t.d_target(i);

    Mat<Scalar> d_ehat = d_cos * t.w_hat;
    Mat<Scalar> d_what = d_cos.transpose() * t.e_hat;
    // Through x -> x / |x|: (g - x_hat (x_hat . g)) / |x|.
    auto unnormalize = [](const Mat<Scalar>& g, const Mat<Scalar>& xh, const Vec<Scalar>& n) {
        Vec<Scalar> dot = g.cwiseProduct(xh).rowwise().sum();
        return Mat<Scalar>(n.cwiseInverse().asDiagonal() * (g - dot.asDiagonal() * xh));
    };
    head.class_weights.accumulate(unnormalize(d_what, t.w_hat, t.w_norm));
    r.d_embeddings = unnormalize(d_ehat, t.e_hat, t.e_norm);
    return r;
}

} // namespace petal
