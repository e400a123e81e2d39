#include "petal/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace petal {

using nlohmann::json;

EmbeddingSet make_embedding_set(Eigen::MatrixXd raw, std::vector<std::string> labels, std::vector<std::string> paths)
{
    if (static_cast<Eigen::Index>(labels.size()) != raw.rows())
        throw DimensionError("embedding set: one label per row required");
    for (Eigen::Index i = 0; i < raw.rows(); ++i) {
        const double n = raw.row(i).norm();
        if (!(n > 0.0) || !std::isfinite(n))
            throw NumericError("embedding row " + std::to_string(i) + " has zero or non-finite norm");
        raw.row(i) /= n;
    }
    return {std::move(raw), std::move(labels), std::move(paths)};
}

EmbeddingSet pool_templates(const EmbeddingSet& s)
{
    std::vector<std::string> order;
    std::map<std::string, Eigen::VectorXd> sums;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
        const std::string& id = s.labels[static_cast<std::size_t>(i)];
        auto it = sums.find(id);
        if (it == sums.end()) {
            order.push_back(id);
            sums.emplace(id, s.embeddings.row(i).transpose());
        } else {
            it->second += s.embeddings.row(i).transpose();
        }
    }
    Eigen::MatrixXd raw(static_cast<Eigen::Index>(order.size()), s.embeddings.cols());
    for (std::size_t k = 0; k < order.size(); ++k)
        raw.row(static_cast<Eigen::Index>(k)) = sums[order[k]].transpose();
    return make_embedding_set(std::move(raw), order, order);
}

namespace {

struct GalleryIndex {
    std::vector<std::string> ids; // insertion order
    std::vector<int> owner;       // gallery row -> identity index
};

GalleryIndex index_gallery(const EmbeddingSet& g)
{
    GalleryIndex gi;
    std::map<std::string, int> pos;
    for (const std::string& l : g.labels) {
        auto [it, fresh] = pos.emplace(l, static_cast<int>(gi.ids.size()));
        if (fresh)
            gi.ids.push_back(l);
        gi.owner.push_back(it->second);
    }
    return gi;
}

/// Per-identity max similarity for each probe row: P x G_ids.
Eigen::MatrixXd identity_scores(const EmbeddingSet& gallery, const GalleryIndex& gi, const EmbeddingSet& probe)
{
    if (gallery.size() == 0)
        throw ProtocolError("gallery is empty");
    if (gallery.embeddings.cols() != probe.embeddings.cols())
        throw DimensionError("gallery and probe embeddings differ in width");
    const Eigen::MatrixXd sim = probe.embeddings * gallery.embeddings.transpose();
    Eigen::MatrixXd best = Eigen::MatrixXd::Constant(probe.size(), static_cast<Eigen::Index>(gi.ids.size()),
                                                     -std::numeric_limits<double>::infinity());
    for (Eigen::Index j = 0; j < sim.cols(); ++j) {
        const int k = gi.owner[static_cast<std::size_t>(j)];
        best.col(k) = best.col(k).cwiseMax(sim.col(j));
    }
    return best;
}

/// Top identity by score, earliest-enrolled on ties.
int top_identity(const Eigen::MatrixXd& scores, Eigen::Index row)
{
    int best = 0;
    for (Eigen::Index k = 1; k < scores.cols(); ++k)
        if (scores(row, k) > scores(row, best))
            best = static_cast<int>(k);
    return best;
}

int find_id(const GalleryIndex& gi, const std::string& label)
{
    auto it = std::find(gi.ids.begin(), gi.ids.end(), label);
    return it == gi.ids.end() ? -1 : static_cast<int>(it - gi.ids.begin());
}

void check_roc_input(const std::vector<double>& scores, const std::vector<bool>& same)
{
    if (scores.size() != same.size())
        throw DimensionError("one label per score required");
    const auto pos = std::count(same.begin(), same.end(), true);
    if (pos == 0 || pos == static_cast<long>(same.size()))
        throw ProtocolError("ROC needs at least one positive and one negative pair");
}

} // namespace

std::vector<double> rank_retrieval(const EmbeddingSet& gallery, const EmbeddingSet& probe, const std::vector<int>& ks)
{
    const GalleryIndex gi = index_gallery(gallery);
    const Eigen::MatrixXd s = identity_scores(gallery, gi, probe);
    std::vector<long> hits(ks.size(), 0);
    for (Eigen::Index i = 0; i < probe.size(); ++i) {
        const int truth = find_id(gi, probe.labels[static_cast<std::size_t>(i)]);
        if (truth < 0)
            throw ProtocolError("probe identity '" + probe.labels[static_cast<std::size_t>(i)] +
                                "' is not enrolled in the gallery");
        // Position of the true identity after a stable descending sort.
        long ahead = 0;
        for (Eigen::Index k = 0; k < s.cols(); ++k)
            if (s(i, k) > s(i, truth) || (s(i, k) == s(i, truth) && k < truth))
                ++ahead;
        for (std::size_t q = 0; q < ks.size(); ++q)
            if (ahead < ks[q])
                ++hits[q];
    }
    std::vector<double> out;
    for (long h : hits)
        out.push_back(probe.size() ? static_cast<double>(h) / static_cast<double>(probe.size()) : 0.0);
    return out;
}

VerificationResult verification_accuracy(const std::vector<double>& scores, const std::vector<bool>& same)
{
    if (scores.size() != same.size())
        throw DimensionError("one label per score required");
    if (scores.empty())
        throw ProtocolError("verification needs at least one pair");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    const long n = static_cast<long>(scores.size());
    const long pos = std::count(same.begin(), same.end(), true);
    // Threshold below everything: all accepted.
    long correct = pos;
    VerificationResult best{static_cast<double>(correct) / n, scores[idx.front()] - 1.0};
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            correct += same[idx[j]] ? -1 : 1; // moves from accepted to rejected
            ++j;
        }
        const double thr = j < idx.size() ? 0.5 * (scores[idx[i]] + scores[idx[j]]) : scores[idx[i]] + 1.0;
        if (static_cast<double>(correct) / n > best.accuracy)
            best = {static_cast<double>(correct) / n, thr};
        i = j;
    }
    return best;
}

std::vector<double> tar_at_far(const std::vector<double>& scores, const std::vector<bool>& same,
                               const std::vector<double>& fars)
{
    check_roc_input(scores, same);
    std::vector<double> pos, neg;
    for (std::size_t i = 0; i < scores.size(); ++i)
        (same[i] ? pos : neg).push_back(scores[i]);
    std::sort(pos.begin(), pos.end());
    std::sort(neg.begin(), neg.end());
    std::vector<double> thresholds = scores;
    std::sort(thresholds.begin(), thresholds.end());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

    auto at_least = [](const std::vector<double>& v, double t) {
        return static_cast<long>(v.end() - std::lower_bound(v.begin(), v.end(), t));
    };
    std::vector<double> out;
    for (double target : fars) {
        double tar = 0.0; // threshold +inf
        for (double t : thresholds) {
            const long fa = at_least(neg, t);
            if (static_cast<double>(fa) / static_cast<double>(neg.size()) <= target) {
                tar = static_cast<double>(at_least(pos, t)) / static_cast<double>(pos.size());
                break;
            }
        }
        out.push_back(tar);
    }
    return out;
}

void cross_pairs(const EmbeddingSet& a, const EmbeddingSet& b, std::vector<double>& scores, std::vector<bool>& same)
{
    const Eigen::MatrixXd sim = a.embeddings * b.embeddings.transpose();
    for (Eigen::Index i = 0; i < a.size(); ++i)
        for (Eigen::Index j = 0; j < b.size(); ++j) {
            scores.push_back(sim(i, j));
            same.push_back(a.labels[static_cast<std::size_t>(i)] == b.labels[static_cast<std::size_t>(j)]);
        }
}

void within_pairs(const EmbeddingSet& s, std::vector<double>& scores, std::vector<bool>& same)
{
    const Eigen::MatrixXd sim = s.embeddings * s.embeddings.transpose();
    for (Eigen::Index i = 0; i < s.size(); ++i)
        for (Eigen::Index j = i + 1; j < s.size(); ++j) {
            scores.push_back(sim(i, j));
            same.push_back(s.labels[static_cast<std::size_t>(i)] == s.labels[static_cast<std::size_t>(j)]);
        }
}

void balance_pairs(std::vector<double>& scores, std::vector<bool>& same, std::uint64_t seed)
{
    if (scores.size() != same.size())
        throw DimensionError("balance_pairs: scores and labels differ in length");
    std::vector<double> out;
    std::vector<std::size_t> neg;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (same[i])
            out.push_back(scores[i]);
        else
            neg.push_back(i);
    }
    const std::size_t pos = out.size();
    Rng rng(derive_seed(seed, "pairs"));
    std::shuffle(neg.begin(), neg.end(), rng);
    neg.resize(std::min(neg.size(), pos));
    std::sort(neg.begin(), neg.end());
    for (std::size_t i : neg)
        out.push_back(scores[i]);
    same.assign(out.size(), false);
    std::fill(same.begin(), same.begin() + static_cast<std::ptrdiff_t>(pos), true);
    scores = std::move(out);
}

std::vector<double> tpir_at_fpir(const EmbeddingSet& gallery, const EmbeddingSet& known, const EmbeddingSet& unknown,
                                 const std::vector<double>& fpirs)
{
    if (unknown.size() == 0)
        throw ProtocolError("open-set identification needs at least one unknown probe");
    const GalleryIndex gi = index_gallery(gallery);
    for (const std::string& l : unknown.labels)
        if (find_id(gi, l) >= 0)
            throw ProtocolError("unknown probe identity '" + l + "' is enrolled in the gallery");

    const Eigen::MatrixXd su = identity_scores(gallery, gi, unknown);
    std::vector<double> top_u;
    for (Eigen::Index i = 0; i < su.rows(); ++i)
        top_u.push_back(su.row(i).maxCoeff());
    std::sort(top_u.begin(), top_u.end(), std::greater<>());

    const Eigen::MatrixXd sk = identity_scores(gallery, gi, known);
    std::vector<double> out;
    for (double f : fpirs) {
        const auto k = static_cast<std::size_t>(std::floor(f * static_cast<double>(top_u.size())));
        const double tau = k < top_u.size() ? top_u[k] : -std::numeric_limits<double>::infinity();
        long hits = 0;
        for (Eigen::Index i = 0; i < sk.rows(); ++i) {
            const int truth = find_id(gi, known.labels[static_cast<std::size_t>(i)]);
            if (truth < 0)
                throw ProtocolError("known probe identity '" + known.labels[static_cast<std::size_t>(i)] +
                                    "' is not enrolled in the gallery");
            const int top = top_identity(sk, i);
            if (top == truth && sk(i, top) > tau)
                ++hits;
        }
        out.push_back(known.size() ? static_cast<double>(hits) / static_cast<double>(known.size()) : 0.0);
    }
    return out;
}

EvalReport evaluate_embeddings(const EmbeddingSet& gallery, const EmbeddingSet& probe_in, const EmbeddingSet* unknown,
                               const EvalOptions& opt)
{
    const EmbeddingSet probe = opt.probe_templates ? pool_templates(probe_in) : probe_in;
    EvalReport r;
    r.ranks = opt.ranks;
    r.rank_accuracy = rank_retrieval(gallery, probe, opt.ranks);
    std::vector<double> scores;
    std::vector<bool> same;
    cross_pairs(probe, gallery, scores, same);
    r.positive_pairs = std::count(same.begin(), same.end(), true);
    r.negative_pairs = static_cast<long>(same.size()) - r.positive_pairs;
    const VerificationResult v = verification_accuracy(scores, same);
    r.verification_accuracy = v.accuracy;
    r.verification_threshold = v.threshold;
    r.fars = opt.fars;
    r.tar = (r.positive_pairs && r.negative_pairs) ? tar_at_far(scores, same, opt.fars)
                                                   : std::vector<double>(opt.fars.size(), 0.0);
    r.fpirs = opt.fpirs;
    if (unknown != nullptr && unknown->size() > 0) {
        const EmbeddingSet u = opt.probe_templates ? pool_templates(*unknown) : *unknown;
        r.tpir = tpir_at_fpir(gallery, probe, u, opt.fpirs);
        r.unknown_count = u.size();
    }
    r.gallery_count = gallery.size();
    r.probe_count = probe.size();
    return r;
}

std::string eval_report_json(const EvalReport& r)
{
    json ranks = json::object();
    for (std::size_t i = 0; i < r.ranks.size(); ++i)
        ranks["rank" + std::to_string(r.ranks[i])] = r.rank_accuracy[i];
    auto keyed = [](const std::vector<double>& at, const std::vector<double>& val) {
        json o = json::array();
        for (std::size_t i = 0; i < val.size(); ++i)
            o.push_back({{"at", at[i]}, {"value", val[i]}});
        return o;
    };
    json skipped = json::array();
    for (const auto& e : r.skipped)
        skipped.push_back({{"path", e.path}, {"error", e.message}});
    json j = {{"retrieval", ranks},
              {"verification", {{"accuracy", r.verification_accuracy}, {"threshold", r.verification_threshold}}},
              {"tar_at_far", keyed(r.fars, r.tar)},
              {"tpir_at_fpir", keyed(r.fpirs, r.tpir)},
              {"counts",
               {{"gallery", r.gallery_count},
                {"probe", r.probe_count},
                {"unknown", r.unknown_count},
                {"positive_pairs", r.positive_pairs},
                {"negative_pairs", r.negative_pairs}}},
              {"skipped", skipped}};
    return j.dump(2);
}

std::string eval_report_table(const EvalReport& r)
{
    auto pct = [](double v) {
        char b[16];
        std::snprintf(b, sizeof b, "%6.2f", 100.0 * v);
        return std::string(b);
    };
    auto sci = [](double v) {
        char b[16];
        std::snprintf(b, sizeof b, "%.0e", v);
        return std::string(b);
    };
    std::vector<std::string> head, vals;
    for (std::size_t i = 0; i < r.ranks.size(); ++i) {
        head.push_back("Rank-" + std::to_string(r.ranks[i]));
        vals.push_back(pct(r.rank_accuracy[i]));
    }
    head.push_back("Verif.");
    vals.push_back(pct(r.verification_accuracy));
    for (std::size_t i = 0; i < r.tar.size(); ++i) {
        head.push_back("TAR@" + sci(r.fars[i]));
        vals.push_back(pct(r.tar[i]));
    }
    for (std::size_t i = 0; i < r.tpir.size(); ++i) {
        head.push_back("TPIR@" + sci(r.fpirs[i]));
        vals.push_back(pct(r.tpir[i]));
    }
    std::ostringstream os;
    std::string rule;
    for (std::size_t i = 0; i < head.size(); ++i) {
        const std::size_t w = std::max<std::size_t>(head[i].size(), 6);
        char b[64];
        std::snprintf(b, sizeof b, "%*s", static_cast<int>(w), head[i].c_str());
        os << (i ? " | " : "") << b;
        rule += (i ? "-+-" : "") + std::string(w, '-');
    }
    os << '\n' << rule << '\n';
    for (std::size_t i = 0; i < vals.size(); ++i) {
        const std::size_t w = std::max<std::size_t>(head[i].size(), 6);
        char b[64];
        std::snprintf(b, sizeof b, "%*s", static_cast<int>(w), vals[i].c_str());
        os << (i ? " | " : "") << b;
    }
    os << "\n\ngallery=" << r.gallery_count << " probe=" << r.probe_count << " unknown=" << r.unknown_count
       << " pairs=" << r.positive_pairs << "+/" << r.negative_pairs << "-\n";
    return os.str();
}

} // namespace petal
