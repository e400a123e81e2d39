#pragma once

// Synthetic cross-resolution benchmark: procedural identities, degradation
// pipeline, JSON-lines manifests and folder ingestion.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "petal/image.hpp"
#include "petal/quality.hpp"

namespace petal {

enum class Split { train, gallery, probe };

std::string split_name(Split s);
std::optional<Split> parse_split(const std::string& s);

struct DegradationSpec {
    double blur_sigma = 0.0;
    int downscale_factor = 1;
    double noise_sigma = 0.0;
    int jpeg_quality = 100;
    double occlusion_fraction = 0.0;

    bool is_identity() const
    {
        return blur_sigma == 0.0 && downscale_factor == 1 && noise_sigma == 0.0 && jpeg_quality == 100 &&
               occlusion_fraction == 0.0;
    }
    void validate() const;
    bool operator==(const DegradationSpec&) const = default;
};

/// Occlusion, blur, down-then-up resampling, additive noise, block-DCT
/// quantization, in that order. Identity spec returns the input unchanged.
Image degrade(const Image& img, const DegradationSpec& spec, std::uint64_t seed);

Image gaussian_blur(const Image& img, double sigma);
Image resample_down_up(const Image& img, int factor);
Image jpeg_like(const Image& img, int quality);

/// The grid used by gen-data when none is configured.
std::vector<DegradationSpec> default_degradation_grid();

struct BenchmarkSpec {
    int n_identities = 24;
    int train_per_identity = 8;
    int gallery_per_identity = 2;
    int probe_per_identity = 4;
    /// Share of train images drawn from the degradation grid (mixed-quality fine-tuning set).
    double train_degraded_fraction = 0.5;
    /// Additional probe-only identities for open-set evaluation.
    int unknown_identities = 0;
    /// Numbering offset, so disjoint identity pools can come from one seed.
    int first_identity = 0;
    int image_size = 64;
    int channels = 1;
    /// Scales how far identity parameters stray from the mean face (difficulty knob).
    double identity_spread = 1.0;
    std::vector<DegradationSpec> degradation_grid = default_degradation_grid();
    std::uint64_t seed = 0;

    void validate() const;
};

struct ManifestRecord {
    std::string path; // relative to the manifest directory
    std::string identity;
    Split split = Split::train;
    std::optional<int> degradation; // index into the generating grid
    std::optional<double> quality;  // externally supplied score

    bool operator==(const ManifestRecord&) const = default;
};

inline constexpr const char* kManifestFormat = "petal-manifest/1";

struct DatasetManifest {
    std::vector<ManifestRecord> records;

    std::vector<std::string> identities(std::optional<Split> split = std::nullopt) const;
    std::size_t count(Split split) const;
    /// Throws ManifestError when a probe identity has no gallery image.
    void check_closed_set() const;

    bool operator==(const DatasetManifest&) const = default;
};

std::string identity_label(int id);

/// Clean rendering of one identity sample. `sample_key` distinguishes
/// samples (pose jitter, lighting); identical arguments give identical pixels.
Image render_identity(const BenchmarkSpec& spec, int identity, std::uint64_t sample_key);

/// Stable key for (split, index) used by generate_benchmark.
std::uint64_t sample_key(Split split, int index);

struct QualityGapReport {
    double gallery_mean = 0.0;
    double probe_mean = 0.0;
    double train_mean = 0.0;
    std::vector<int> gallery_histogram; // 10 bins over [0, 1]
    std::vector<int> probe_histogram;
};

struct GeneratedBenchmark {
    DatasetManifest manifest;
    std::vector<Image> images; // aligned with manifest.records
    QualityGapReport quality;
};

GeneratedBenchmark generate_benchmark(const BenchmarkSpec& spec);

/// Writes manifest.jsonl and the PNG files under `dir`.
void write_benchmark(const GeneratedBenchmark& bench, const std::filesystem::path& dir);

std::string manifest_to_jsonl(const DatasetManifest& m);
DatasetManifest manifest_from_jsonl(const std::string& text);
void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

struct RecordError {
    std::string path;
    std::string message;
};

struct IngestResult {
    DatasetManifest manifest;
    std::vector<RecordError> errors;
};

/// Scans `<root>/<split>/<identity>/<image>.png`.
IngestResult ingest_folder(const std::filesystem::path& root, bool closed_set = true);

/// Images of one split with dense class ids (sorted identity order).
struct LabeledImages {
    std::vector<Image> images;
    std::vector<int> labels;
    std::vector<std::string> identities; // class id -> identity label
    std::vector<std::string> paths;

    std::size_t size() const { return images.size(); }
    int num_classes() const { return static_cast<int>(identities.size()); }
};

LabeledImages collect_split(const DatasetManifest& m, const std::vector<Image>& images, Split split);

/// Loads the PNGs of one split. Undecodable files are skipped and reported.
LabeledImages load_split(const DatasetManifest& m, const std::filesystem::path& base, Split split,
                         std::vector<RecordError>* errors = nullptr, bool load_pixels = true);

} // namespace petal
