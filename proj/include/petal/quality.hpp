#pragma once

// No-reference quality estimation, dataset calibration of the gate threshold,
// and the per-sample blend-weight transform.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>

#include "petal/image.hpp"

namespace petal {

class QualityEstimator {
public:
    virtual ~QualityEstimator() = default;

    virtual std::string name() const = 0;
    /// Range of raw_score(); score() maps it affinely onto [0, 1].
    virtual std::pair<double, double> nominal_range() const = 0;
    virtual double raw_score(const Image& img) const = 0;
    /// False when the estimator only reads Image::annotated_quality.
    virtual bool needs_pixels() const { return true; }

    /// Normalized score in [0, 1].
    double score(const Image& img) const;
};

/// Laplacian-variance sharpness squashed to [0, 1], damped by a noise-floor
/// factor and a block-seam factor.
std::shared_ptr<const QualityEstimator> builtin_sharpness_estimator();

/// Reads scores supplied with the data (Image::annotated_quality) and
/// normalizes them from [low, high].
std::shared_ptr<const QualityEstimator> precomputed_estimator(double low, double high);

/// Looks up an estimator by name: "sharpness" or "precomputed".
std::shared_ptr<const QualityEstimator> make_estimator(const std::string& name,
                                                       std::pair<double, double> nominal_range = {0.0, 1.0});

struct GateCalibration {
    double mu = 0.0;
    double sigma = 0.0;
    double threshold = 0.0; // mu + sigma
    int sample_count = 0;   // l
    std::string estimator_name;
    std::uint64_t seed = 0;

    bool operator==(const GateCalibration&) const = default;
};

/// Population mean and standard deviation (1/l form) of `l` scores sampled
/// from `n` items; without replacement when l <= n, with replacement otherwise.
GateCalibration calibrate_from_scores(const std::function<double(std::size_t)>& score_at, std::size_t n, int l,
                                      std::uint64_t seed, std::string estimator_name = "scores");

GateCalibration calibrate_gate(const QualityEstimator& estimator, std::span<const Image> dataset, int l,
                               std::uint64_t seed);

/// Blend weight before clamping: 0.5 + (q - t).
inline double raw_alpha(double q, double t) { return 0.5 + (q - t); }

/// alpha_i = clamp(raw_alpha(q_i, t), 0, 1).
Eigen::VectorXd alpha_from_quality(const Eigen::VectorXd& q, const GateCalibration& calib);

/// Estimator plus calibration: maps a batch of raw input images to blend weights.
struct QualityGate {
    std::shared_ptr<const QualityEstimator> estimator;
    std::optional<GateCalibration> calibration;

    Eigen::VectorXd scores(std::span<const Image> images) const;
    Eigen::VectorXd alpha(std::span<const Image> images) const;
};

/// key=value text record (mu, sigma, threshold, l, estimator, seed).
std::string format_calibration(const GateCalibration& c);
GateCalibration parse_calibration(const std::string& text);
void write_calibration(const GateCalibration& c, const std::filesystem::path& path);
GateCalibration read_calibration(const std::filesystem::path& path);

} // namespace petal
