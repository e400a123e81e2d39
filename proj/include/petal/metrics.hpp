#pragma once

// Recognition metrics over cosine similarity of L2-normalized embeddings.
//
// Conventions:
//   - a gallery identity's score for a probe is the max over its images;
//   - ties between identities go to the one enrolled first in the gallery;
//   - verification accepts a pair when score >= threshold;
//   - TAR@FAR takes the most permissive threshold among observed scores
//     (plus +inf) whose FAR does not exceed the target;
//   - open-set: the threshold is the (k+1)-th largest unknown-probe top score,
//     k = floor(FPIR * #unknown), and a known probe is accepted when its top
//     score is strictly greater.

#include <optional>
#include <string>
#include <vector>

#include "petal/datasim.hpp"
#include "petal/injection.hpp"

namespace petal {

struct EmbeddingSet {
    Eigen::MatrixXd embeddings; // N x d, unit rows
    std::vector<std::string> labels;
    std::vector<std::string> paths;

    Eigen::Index size() const { return embeddings.rows(); }
};

/// Normalizes rows; throws NumericError on a zero or non-finite row.
EmbeddingSet make_embedding_set(Eigen::MatrixXd raw, std::vector<std::string> labels,
                                std::vector<std::string> paths = {});

/// Mean of each identity's rows, renormalized; identities in first-seen order.
EmbeddingSet pool_templates(const EmbeddingSet& s);

template <typename Scalar>
EmbeddingSet extract(const AdaptedModel<Scalar>& model, const LabeledImages& data, int batch_size)
{
    if (batch_size < 1)
        throw ConfigError("extract: batch_size must be at least 1");
    const auto n = static_cast<Eigen::Index>(data.size());
    Eigen::MatrixXd raw(n, model.backbone().config().feature_dim);
    for (Eigen::Index lo = 0; lo < n; lo += batch_size) {
        const Eigen::Index hi = std::min<Eigen::Index>(n, lo + batch_size);
        std::span<const Image> batch(data.images.data() + lo, static_cast<std::size_t>(hi - lo));
        raw.middleRows(lo, hi - lo) = model.forward(batch).template cast<double>();
    }
    std::vector<std::string> labels;
    for (int y : data.labels)
        labels.push_back(data.identities[static_cast<std::size_t>(y)]);
    return make_embedding_set(std::move(raw), std::move(labels), data.paths);
}

/// Fraction of probes whose identity is among the top-k gallery identities, per k.
std::vector<double> rank_retrieval(const EmbeddingSet& gallery, const EmbeddingSet& probe, const std::vector<int>& ks);

struct VerificationResult {
    double accuracy = 0.0;
    double threshold = 0.0;
};

/// Best accuracy over all thresholds on the given scored pairs.
VerificationResult verification_accuracy(const std::vector<double>& scores, const std::vector<bool>& same);

std::vector<double> tar_at_far(const std::vector<double>& scores, const std::vector<bool>& same,
                               const std::vector<double>& fars);

/// Scores and labels of every (probe, gallery) pair.
void cross_pairs(const EmbeddingSet& a, const EmbeddingSet& b, std::vector<double>& scores, std::vector<bool>& same);

/// Scores and labels of every unordered pair within one set.
void within_pairs(const EmbeddingSet& s, std::vector<double>& scores, std::vector<bool>& same);

/// Every positive pair plus an equal number of negatives drawn without
/// replacement (all negatives if there are fewer).
void balance_pairs(std::vector<double>& scores, std::vector<bool>& same, std::uint64_t seed);

std::vector<double> tpir_at_fpir(const EmbeddingSet& gallery, const EmbeddingSet& known, const EmbeddingSet& unknown,
                                 const std::vector<double>& fpirs);

struct EvalOptions {
    std::vector<int> ranks{1, 5, 10, 20};
    std::vector<double> fars{1e-4, 1e-3, 1e-2};
    std::vector<double> fpirs{1e-2, 1e-1};
    /// Mean-pool the probes of each identity into one template before matching.
    bool probe_templates = false;
};

struct EvalReport {
    std::vector<int> ranks;
    std::vector<double> rank_accuracy;
    double verification_accuracy = 0.0;
    double verification_threshold = 0.0;
    std::vector<double> fars;
    std::vector<double> tar;
    std::vector<double> fpirs;
    std::vector<double> tpir; // empty without unknown probes
    long gallery_count = 0;
    long probe_count = 0;
    long unknown_count = 0;
    long positive_pairs = 0;
    long negative_pairs = 0;
    std::vector<RecordError> skipped;
};

/// Closed-set retrieval and probe-vs-gallery verification; open-set
/// identification when `unknown` is non-empty.
EvalReport evaluate_embeddings(const EmbeddingSet& gallery, const EmbeddingSet& probe, const EmbeddingSet* unknown,
                               const EvalOptions& opt = {});

std::string eval_report_json(const EvalReport& r);
std::string eval_report_table(const EvalReport& r);

} // namespace petal
