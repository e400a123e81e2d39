#include "doctest.h"

#include <cmath>

#include "fixtures.hpp"
#include "petal/losses.hpp"

using namespace petal;

TEST_SUITE("losses")
{
    TEST_CASE("arcface target is cos(theta + m) inside the valid range")
    {
        const double m = 0.5;
        for (double c = -0.8; c <= 0.999; c += 0.013) {
            double slope = 0;
            const double got = detail::target_cos(MarginVariant::arcface, m, c, &slope);
            CHECK(got == doctest::Approx(std::cos(std::acos(c) + m)).epsilon(1e-12));
            // d/dc cos(acos(c) + m) = cos m + c sin m / sqrt(1 - c^2)
            CHECK(slope == doctest::Approx(std::cos(m) + c * std::sin(m) / std::sqrt(1 - c * c)).epsilon(1e-9));
        }
    }

    TEST_CASE("arcface falls back to c - m sin m past pi - m")
    {
        const double m = 0.5;
        const double edge = std::cos(M_PI - m);
        for (double c : {-1.0, -0.99, edge}) {
            double slope = 0;
            CHECK(detail::target_cos(MarginVariant::arcface, m, c, &slope) == doctest::Approx(c - m * std::sin(m)));
            CHECK(slope == 1.0);
        }
    }

    TEST_CASE("arcface slope stays finite at c = 1")
    {
        double slope = 0;
        const double v = detail::target_cos(MarginVariant::arcface, 0.5, 1.0, &slope);
        CHECK(v == doctest::Approx(std::cos(0.5)));
        CHECK(std::isfinite(slope));
    }

    TEST_CASE("cosface target is c - m")
    {
        double slope = 0;
        CHECK(detail::target_cos(MarginVariant::cosface, 0.35, 0.7, &slope) == doctest::Approx(0.35));
        CHECK(slope == 1.0);
        CHECK(default_margin(MarginVariant::cosface) == 0.35);
        CHECK(default_margin(MarginVariant::arcface) == 0.5);
    }

    TEST_CASE("logits: scale times cosine, target column penalized")
    {
        MarginHead<double> h = make_margin_head<double>(3, 4, MarginVariant::cosface, 0.2, 10.0, 1);
        const Mat<double> e = gaussian_matrix<double>(2, 4, 1.0, 2);
        const Mat<double> l = margin_logits(h, e, {1, 2});
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 3; ++j) {
                const double c = e.row(i).dot(h.class_weights.value.row(j)) / e.row(i).norm() /
                                 h.class_weights.value.row(j).norm();
                const bool target = j == (i == 0 ? 1 : 2);
                CHECK(l(i, j) == doctest::Approx(10.0 * (target ? c - 0.2 : c)));
            }
    }

    TEST_CASE("loss is mean cross-entropy of the logits")
    {
        MarginHead<double> h = make_margin_head<double>(4, 3, MarginVariant::arcface, 0.5, 8.0, 3);
        const Mat<double> e = gaussian_matrix<double>(3, 3, 1.0, 4);
        const std::vector<int> y{0, 3, 1};
        const Mat<double> l = margin_logits(h, e, y);
        double want = 0;
        for (int i = 0; i < 3; ++i) {
            double z = 0;
            for (int j = 0; j < 4; ++j)
                z += std::exp(l(i, j));
            want += std::log(z) - l(i, y[std::size_t(i)]);
        }
        CHECK(margin_loss(h, e, y).loss == doctest::Approx(want / 3));
    }

    TEST_CASE("embedding and class-weight gradients match central differences")
    {
        for (MarginVariant v : {MarginVariant::arcface, MarginVariant::cosface}) {
            MarginHead<double> h = make_margin_head<double>(5, 4, v, default_margin(v), 16.0, 5);
            const Mat<double> e = gaussian_matrix<double>(4, 4, 1.0, 6);
            const std::vector<int> y{0, 4, 2, 2};
            CHECK(fixture::fd_embeddings(h, e, y).max_rel < 1e-5);

            h.class_weights.zero_grad();
            margin_loss(h, e, y, true);
            const Mat<double> g = h.class_weights.grad;
            const double step = 1e-6;
            for (Eigen::Index i = 0; i < g.size(); ++i) {
                MarginHead<double> a = h, b = h;
                a.class_weights.value.data()[i] += step;
                b.class_weights.value.data()[i] -= step;
                const double num = (margin_loss(a, e, y).loss - margin_loss(b, e, y).loss) / (2 * step);
                CHECK(fixture::rel_err(g.data()[i], num) < 1e-5);
            }
        }
    }

    TEST_CASE("bad inputs")
    {
        MarginHead<double> h = make_margin_head<double>(3, 2, MarginVariant::arcface, 0.5, 64, 1);
        CHECK_THROWS_AS(margin_loss(h, Mat<double>(Mat<double>::Ones(1, 2)), {3}), InputError);
        CHECK_THROWS_AS(margin_loss(h, Mat<double>(Mat<double>::Ones(1, 2)), {-1}), InputError);
        CHECK_THROWS_AS(margin_loss(h, Mat<double>(Mat<double>::Zero(1, 2)), {0}), NumericError);
        CHECK_THROWS_AS(margin_loss(h, Mat<double>(Mat<double>::Ones(1, 3)), {0}), DimensionError);
        Mat<double> nan = Mat<double>::Ones(1, 2);
        nan(0, 0) = std::nan("");
        CHECK_THROWS_AS(margin_loss(h, nan, {0}), NumericError);
        CHECK_THROWS_AS(make_margin_head<double>(0, 2, MarginVariant::arcface, 0.5, 64, 1), ConfigError);
    }
}
