#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "petal/injection.hpp"
#include "petal/losses.hpp"
#include "petal/metrics.hpp"

namespace fixture {

using petal::Mat;
using petal::Rng;
using petal::Vec;

/// Unit rows whose pairwise dot products are exact in any summation order:
/// four entries of +-1/2 or a single +-1.
inline Eigen::MatrixXd dyadic_rows(Eigen::Index n, Eigen::Index dim, Rng& rng)
{
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(n, dim);
    std::uniform_int_distribution<Eigen::Index> col(0, dim - 1);
    std::bernoulli_distribution coin(0.5), sparse(0.2);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (sparse(rng)) {
            m(i, col(rng)) = coin(rng) ? 1.0 : -1.0;
            continue;
        }
        int placed = 0;
        while (placed < 4) {
            const Eigen::Index c = col(rng);
            if (m(i, c) != 0.0)
                continue;
            m(i, c) = coin(rng) ? 0.5 : -0.5;
            ++placed;
        }
    }
    return m;
}

struct MetricInstance {
    petal::EmbeddingSet gallery, known, unknown;
};

/// Random open-set instance with at most 25 embeddings in total.
inline MetricInstance metric_instance(Rng& rng)
{
    std::uniform_int_distribution<int> ids(2, 5), dim(4, 8), per(1, 3), nk(3, 9), nu(1, 5);
    const int n_id = ids(rng);
    const Eigen::Index d = dim(rng);
    std::vector<std::string> gl;
    for (int k = 0; k < n_id; ++k)
        for (int j = per(rng); j > 0; --j)
            gl.push_back("id" + std::to_string(k));
    std::shuffle(gl.begin(), gl.end(), rng);
    std::uniform_int_distribution<int> pick(0, n_id - 1);
    std::vector<std::string> kl;
    for (int i = nk(rng); i > 0; --i)
        kl.push_back("id" + std::to_string(pick(rng)));
    std::vector<std::string> ul;
    for (int i = nu(rng); i > 0; --i)
        ul.push_back("unk" + std::to_string(i));
    const auto rows = [&](std::size_t n) { return dyadic_rows(static_cast<Eigen::Index>(n), d, rng); };
    MetricInstance m;
    m.gallery = petal::make_embedding_set(rows(gl.size()), gl);
    m.known = petal::make_embedding_set(rows(kl.size()), kl);
    m.unknown = petal::make_embedding_set(rows(ul.size()), ul);
    return m;
}

inline petal::BackboneConfig tiny_backbone()
{
    petal::BackboneConfig c;
    c.image_size = 16;
    c.patch_size = 4;
    c.embed_dim = 8;
    c.attn_dim = 8;
    c.heads = 2;
    c.depth = 2;
    c.mlp_dim = 12;
    c.feature_dim = 6;
    return c;
}

inline petal::InjectionConfig all_sites(int rank, petal::AdapterMode mode)
{
    petal::InjectionConfig c = petal::InjectionConfig::preset("all");
    c.rank = rank;
    c.mode = mode;
    c.dropout_rate = 0.1;
    return c;
}

/// Replaces every adapter up-projection with small Gaussian values so both
/// factors receive gradient.
template <typename Scalar>
void perturb_adapters(petal::AdaptedModel<Scalar>& m, std::uint64_t seed, double std = 0.1)
{
    std::uint64_t k = 0;
    m.backbone().for_each_param([&](petal::Param<Scalar>& p) {
        if (p.name.find(".adapter_") != std::string::npos && p.name.size() > 3 &&
            p.name.compare(p.name.size() - 3, 3, ".up") == 0)
            p.value = petal::gaussian_matrix<Scalar>(p.value.rows(), p.value.cols(), std, petal::derive_seed(seed, ++k));
    });
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

struct FdResult {
    double max_rel = 0.0;
    long checked = 0;
};

/// Central differences of the margin loss against every adapter entry.
inline FdResult fd_adapters(petal::AdaptedModel<double>& m, const Mat<double>& x, const Vec<double>& alpha,
                            petal::MarginHead<double>& head, const std::vector<int>& labels, double h = 1e-5)
{
    auto loss = [&]() {
        petal::MarginHead<double> hc = head;
        return petal::margin_loss(hc, m.forward(x, alpha), labels, false).loss;
    };
    m.backbone().zero_grad();
    head.class_weights.zero_grad();
    typename petal::ToyBackbone<double>::Tape tape;
    const Mat<double> emb = m.forward(x, alpha, {}, &tape);
    m.backbone().backward(tape, petal::margin_loss(head, emb, labels, true).d_embeddings);
    FdResult r;
    m.backbone().for_each_param([&](petal::Param<double>& p) {
        if (p.name.find(".adapter_") == std::string::npos)
            return;
        for (Eigen::Index i = 0; i < p.value.size(); ++i) {
            const double v = p.value.data()[i];
            p.value.data()[i] = v + h;
            const double up = loss();
            p.value.data()[i] = v - h;
            const double dn = loss();
            p.value.data()[i] = v;
            const double num = (up - dn) / (2 * h);
            const double ana = p.has_grad() ? p.grad.data()[i] : 0.0;
            r.max_rel = std::max(r.max_rel, rel_err(ana, num));
            ++r.checked;
        }
    });
    return r;
}

/// Central differences of the margin loss against the embeddings themselves.
inline FdResult fd_embeddings(petal::MarginHead<double>& head, const Mat<double>& emb, const std::vector<int>& labels,
                              double h = 1e-5)
{
    petal::MarginHead<double> hc = head;
    const Mat<double> g = petal::margin_loss(hc, emb, labels, true).d_embeddings;
    FdResult r;
    Mat<double> e = emb;
    for (Eigen::Index i = 0; i < e.size(); ++i) {
        const double v = e.data()[i];
        e.data()[i] = v + h;
        hc = head;
        const double up = petal::margin_loss(hc, e, labels, false).loss;
        e.data()[i] = v - h;
        hc = head;
        const double dn = petal::margin_loss(hc, e, labels, false).loss;
        e.data()[i] = v;
        r.max_rel = std::max(r.max_rel, rel_err(g.data()[i], (up - dn) / (2 * h)));
        ++r.checked;
    }
    return r;
}

} // namespace fixture
