#pragma once

// Reference implementations for tests. Deliberately naive: explicit loops,
// exhaustive threshold enumeration, no shared code with the library.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace oracle {

inline double dot(const Eigen::MatrixXd& a, Eigen::Index i, const Eigen::MatrixXd& b, Eigen::Index j)
{
    double s = 0.0;
    for (Eigen::Index k = 0; k < a.cols(); ++k)
        s += a(i, k) * b(j, k);
    return s;
}

struct Scored {
    std::vector<std::string> ids;           // gallery insertion order
    std::vector<std::vector<double>> score; // probe -> per-identity max
};

inline Scored identity_scores(const Eigen::MatrixXd& g, const std::vector<std::string>& gl, const Eigen::MatrixXd& p)
{
    Scored s;
    for (const auto& l : gl)
        if (std::find(s.ids.begin(), s.ids.end(), l) == s.ids.end())
            s.ids.push_back(l);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
        std::vector<double> row(s.ids.size(), -std::numeric_limits<double>::infinity());
        for (Eigen::Index j = 0; j < g.rows(); ++j) {
            const auto k = std::find(s.ids.begin(), s.ids.end(), gl[static_cast<std::size_t>(j)]) - s.ids.begin();
            row[static_cast<std::size_t>(k)] = std::max(row[static_cast<std::size_t>(k)], dot(p, i, g, j));
        }
        s.score.push_back(row);
    }
    return s;
}

/// Identity indices ranked by score, ties kept in enrollment order.
inline std::vector<std::size_t> ranking(const std::vector<double>& row)
{
    std::vector<std::size_t> idx(row.size());
    for (std::size_t i = 0; i < idx.size(); ++i)
        idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    return idx;
}

inline std::size_t index_of(const std::vector<std::string>& v, const std::string& s)
{
    return static_cast<std::size_t>(std::find(v.begin(), v.end(), s) - v.begin());
}

inline std::vector<double> rank_k(const Eigen::MatrixXd& g, const std::vector<std::string>& gl, const Eigen::MatrixXd& p,
                                  const std::vector<std::string>& pl, const std::vector<int>& ks)
{
    const Scored s = identity_scores(g, gl, p);
    std::vector<double> out;
    for (int k : ks) {
        int hits = 0;
        for (std::size_t i = 0; i < pl.size(); ++i) {
            const auto r = ranking(s.score[i]);
            const std::size_t truth = index_of(s.ids, pl[i]);
            for (int q = 0; q < k && q < static_cast<int>(r.size()); ++q)
                if (r[static_cast<std::size_t>(q)] == truth)
                    ++hits;
        }
        out.push_back(pl.empty() ? 0.0 : double(hits) / double(pl.size()));
    }
    return out;
}

/// Max over every candidate threshold (each observed score and +inf) of the
/// accuracy of "accept iff score >= threshold".
inline double verification(const std::vector<double>& s, const std::vector<bool>& same)
{
    std::vector<double> cand = s;
    cand.push_back(std::numeric_limits<double>::infinity());
    double best = 0.0;
    for (double t : cand) {
        int ok = 0;
        for (std::size_t i = 0; i < s.size(); ++i)
            ok += (s[i] >= t) == same[i];
        best = std::max(best, double(ok) / double(s.size()));
    }
    return best;
}

inline double tar_at_far(const std::vector<double>& s, const std::vector<bool>& same, double far)
{
    std::vector<double> cand = s;
    cand.push_back(std::numeric_limits<double>::infinity());
    int npos = 0, nneg = 0;
    for (bool b : same)
        (b ? npos : nneg) += 1;
    double best_t = std::numeric_limits<double>::infinity();
    for (double t : cand) {
        int fa = 0;
        for (std::size_t i = 0; i < s.size(); ++i)
            fa += !same[i] && s[i] >= t;
        if (double(fa) / double(nneg) <= far)
            best_t = std::min(best_t, t);
    }
    int ta = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        ta += same[i] && s[i] >= best_t;
    return double(ta) / double(npos);
}

/// Smallest threshold among unknown top scores (and +-inf) whose strict-accept
/// FPIR stays within the target; TPIR counts correct rank-1 known probes above it.
inline double tpir_at_fpir(const Eigen::MatrixXd& g, const std::vector<std::string>& gl, const Eigen::MatrixXd& known,
                           const std::vector<std::string>& kl, const Eigen::MatrixXd& unknown, double fpir)
{
    const Scored su = identity_scores(g, gl, unknown);
    std::vector<double> tops;
    for (const auto& row : su.score)
        tops.push_back(*std::max_element(row.begin(), row.end()));
    std::vector<double> cand = tops;
    cand.push_back(std::numeric_limits<double>::infinity());
    cand.push_back(-std::numeric_limits<double>::infinity());
    double tau = std::numeric_limits<double>::infinity();
    for (double t : cand) {
        int fp = 0;
        for (double u : tops)
            fp += u > t;
        if (double(fp) / double(tops.size()) <= fpir)
            tau = std::min(tau, t);
    }
    const Scored sk = identity_scores(g, gl, known);
    int hits = 0;
    for (std::size_t i = 0; i < kl.size(); ++i) {
        const auto r = ranking(sk.score[i]);
        if (r[0] == index_of(sk.ids, kl[i]) && sk.score[i][r[0]] > tau)
            ++hits;
    }
    return kl.empty() ? 0.0 : double(hits) / double(kl.size());
}

/// The blend-weight rule as three cases.
inline double alpha_three_branch(double q, double t)
{
    if (q == t)
        return 0.5;
    if (q < t)
        return 0.5 - (t - q);
    return 0.5 + (q - t);
}

/// Population mean and standard deviation in two passes.
inline std::pair<double, double> mean_std(const std::vector<double>& v)
{
    double m = 0.0;
    for (double x : v)
        m += x;
    m /= double(v.size());
    double ss = 0.0;
    for (double x : v)
        ss += (x - m) * (x - m);
    return {m, std::sqrt(ss / double(v.size()))};
}

} // namespace oracle
