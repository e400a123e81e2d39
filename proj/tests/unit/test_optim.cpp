#include "doctest.h"

#include <cmath>

#include "petal/optim.hpp"

using namespace petal;

TEST_SUITE("optim")
{
    TEST_CASE("adamw matches a scalar reference over several steps")
    {
        Param<double> p("p", Mat<double>::Constant(1, 1, 0.7), true);
        Param<double> frozen("f", Mat<double>::Constant(1, 1, 3.0), false);
        AdamW<double> opt(AdamWConfig{0.9, 0.999, 1e-8, 0.1});
        double w = 0.7, m = 0, v = 0;
        const double grads[] = {0.5, -0.2, 0.05, 1.5};
        for (int t = 1; t <= 4; ++t) {
            const double g = grads[t - 1], lr = 0.01 * t;
            p.zero_grad();
            p.accumulate(Mat<double>::Constant(1, 1, g));
            frozen.zero_grad();
            opt.step({&p, &frozen}, lr);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            w *= 1 - lr * 0.1;
            w -= lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
            CHECK(p.value(0, 0) == doctest::Approx(w).epsilon(1e-12));
        }
        CHECK(frozen.value(0, 0) == 3.0);
    }

    TEST_CASE("decay is decoupled: zero gradient still shrinks weights")
    {
        Param<double> p("p", Mat<double>::Constant(2, 2, 1.0), true);
        p.zero_grad();
        p.accumulate(Mat<double>::Zero(2, 2));
        AdamW<double> opt(AdamWConfig{0.9, 0.999, 1e-8, 0.5});
        opt.step({&p}, 0.1);
        CHECK(p.value(0, 0) == doctest::Approx(0.95));
    }

    TEST_CASE("schedule: linear warmup then polynomial decay, step s uses f(s+1)")
    {
        LrSchedule s{1.0, 4, 12, 1.0};
        CHECK(s.at(0) == 0.0);
        CHECK(s.at(2) == 0.5);
        CHECK(s.at(4) == 1.0);
        CHECK(s.at(8) == doctest::Approx(0.5));
        CHECK(s.at(12) == 0.0);
        CHECK(s.lr(0) == 0.25);
        CHECK(s.lr(3) == 1.0);
        CHECK(s.lr(11) == 0.0);
        LrSchedule q{2.0, 0, 10, 2.0};
        CHECK(q.lr(4) == doctest::Approx(2.0 * 0.25));
        for (long k = 4; k < 11; ++k)
            CHECK(s.lr(k) <= s.lr(k - 1));
    }
}
