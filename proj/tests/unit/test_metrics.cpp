#include "doctest.h"

#include <algorithm>
#include <limits>

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace petal;

namespace {

std::vector<std::string> unique_labels(const std::vector<std::string>& v)
{
    std::vector<std::string> out;
    for (const auto& s : v)
        if (std::find(out.begin(), out.end(), s) == out.end())
            out.push_back(s);
    return out;
}

} // namespace

TEST_SUITE("metrics")
{
    TEST_CASE("rank-k matches the naive oracle on random instances")
    {
        Rng rng(11);
        for (int trial = 0; trial < 200; ++trial) {
            const auto m = fixture::metric_instance(rng);
            const std::vector<int> ks{1, 2, 3, 10};
            const auto got = rank_retrieval(m.gallery, m.known, ks);
            const auto want = oracle::rank_k(m.gallery.embeddings, m.gallery.labels, m.known.embeddings,
                                             m.known.labels, ks);
            for (std::size_t i = 0; i < ks.size(); ++i)
                CHECK(got[i] == want[i]);
        }
    }

    TEST_CASE("verification and TAR@FAR match exhaustive threshold search")
    {
        Rng rng(12);
        for (int trial = 0; trial < 200; ++trial) {
            const auto m = fixture::metric_instance(rng);
            std::vector<double> s;
            std::vector<bool> same;
            cross_pairs(m.known, m.gallery, s, same);
            if (std::count(same.begin(), same.end(), true) == 0 || std::count(same.begin(), same.end(), false) == 0)
                continue;
            CHECK(verification_accuracy(s, same).accuracy == oracle::verification(s, same));
            for (double far : {0.0, 0.1, 0.5}) {
                CHECK(tar_at_far(s, same, {far})[0] == oracle::tar_at_far(s, same, far));
            }
        }
    }

    TEST_CASE("TPIR@FPIR matches the oracle")
    {
        Rng rng(13);
        for (int trial = 0; trial < 200; ++trial) {
            const auto m = fixture::metric_instance(rng);
            for (double f : {0.0, 0.2, 0.5, 1.0}) {
                const double got = tpir_at_fpir(m.gallery, m.known, m.unknown, {f})[0];
                CHECK(got == oracle::tpir_at_fpir(m.gallery.embeddings, m.gallery.labels, m.known.embeddings,
                                                  m.known.labels, m.unknown.embeddings, f));
            }
        }
    }

    TEST_CASE("ties go to the identity enrolled first")
    {
        Eigen::MatrixXd g(2, 2), p(1, 2);
        g << 1, 0, 1, 0;
        p << 1, 0;
        const auto gal = make_embedding_set(g, {"b", "a"});
        CHECK(rank_retrieval(gal, make_embedding_set(p, {"b"}), {1})[0] == 1.0);
        CHECK(rank_retrieval(gal, make_embedding_set(p, {"a"}), {1})[0] == 0.0);
        CHECK(rank_retrieval(gal, make_embedding_set(p, {"a"}), {2})[0] == 1.0);
    }

    TEST_CASE("probe set equal to gallery gives perfect rank-1")
    {
        Rng rng(14);
        const Eigen::MatrixXd e = fixture::dyadic_rows(6, 16, rng) + 3.0 * Eigen::MatrixXd::Identity(6, 16);
        const std::vector<std::string> l{"a", "b", "c", "d", "e", "f"};
        const auto s = make_embedding_set(e, l);
        CHECK(rank_retrieval(s, s, {1})[0] == 1.0);
        CHECK(unique_labels(pool_templates(s).labels) == l);
    }

    TEST_CASE("degenerate and malformed inputs")
    {
        Eigen::MatrixXd z = Eigen::MatrixXd::Zero(1, 3);
        CHECK_THROWS_AS(make_embedding_set(z, {"a"}), NumericError);
        z(0, 0) = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS(make_embedding_set(z, {"a"}), NumericError);
        CHECK_THROWS(make_embedding_set(Eigen::MatrixXd::Ones(2, 3), {"a"}));
        CHECK(verification_accuracy({0.5, 0.2}, {true, true}).accuracy == 1.0);
        CHECK_THROWS_AS(verification_accuracy({}, {}), ProtocolError);
        CHECK_THROWS_AS(tar_at_far({0.5, 0.2}, {true, true}, {0.1}), ProtocolError);
        const auto g = make_embedding_set(Eigen::MatrixXd::Identity(2, 2), {"a", "b"});
        const auto unk = make_embedding_set(Eigen::MatrixXd::Identity(1, 2), {"a"});
        CHECK_THROWS_AS(tpir_at_fpir(g, g, unk, {0.1}), ProtocolError);
    }

    TEST_CASE("all-equal scores: verification falls back to the majority class")
    {
        const std::vector<double> s(5, 0.3);
        const std::vector<bool> same{true, false, false, true, false};
        CHECK(verification_accuracy(s, same).accuracy == doctest::Approx(0.6));
        CHECK(tar_at_far(s, same, {0.0})[0] == 0.0);
        CHECK(tar_at_far(s, same, {1.0})[0] == 1.0);
    }

    TEST_CASE("balance_pairs keeps positives and an equal number of negatives")
    {
        std::vector<double> s;
        std::vector<bool> same;
        for (int i = 0; i < 30; ++i) {
            s.push_back(i);
            same.push_back(i % 5 == 0);
        }
        auto s1 = s;
        auto y1 = same;
        balance_pairs(s1, y1, 3);
        CHECK(std::count(y1.begin(), y1.end(), true) == 6);
        CHECK(std::count(y1.begin(), y1.end(), false) == 6);
        CHECK(std::is_sorted(y1.begin(), y1.end(), std::greater<>()));
        CHECK(std::is_sorted(s1.begin() + 6, s1.end()));
        auto s2 = s;
        auto y2 = same;
        balance_pairs(s2, y2, 3);
        CHECK(s1 == s2);
        std::vector<double> few{1, 2, 3};
        std::vector<bool> fy{true, true, false};
        balance_pairs(few, fy, 1);
        CHECK(few.size() == 3);
    }

    TEST_CASE("report renders every metric")
    {
        Rng rng(15);
        fixture::MetricInstance m;
        do
            m = fixture::metric_instance(rng);
        while (m.known.size() < 4);
        const EvalReport r = evaluate_embeddings(m.gallery, m.known, &m.unknown);
        CHECK(r.tpir.size() == r.fpirs.size());
        const std::string j = eval_report_json(r);
        for (const char* key : {"retrieval", "verification", "tar_at_far", "tpir_at_fpir"})
            CHECK(j.find(key) != std::string::npos);
        CHECK_FALSE(eval_report_table(r).empty());
    }
}
