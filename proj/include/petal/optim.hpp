#pragma once

// AdamW with decoupled weight decay, and the warmup + polynomial-decay schedule.

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <vector>

#include "petal/core.hpp"

namespace petal {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

/// Moment buffers are keyed by parameter address, so the same Param objects
/// must be passed on every step.
template <typename Scalar>
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(const std::vector<Param<Scalar>*>& params, double lr)
    {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (Param<Scalar>* p : params) {
            if (!p->trainable || !p->has_grad())
                continue;
            auto& st = state_[p];
            if (st.m.size() == 0) {
                st.m.setZero(p->value.rows(), p->value.cols());
                st.v.setZero(p->value.rows(), p->value.cols());
            }
            st.m = Scalar(cfg_.beta1) * st.m + Scalar(1 - cfg_.beta1) * p->grad;
            st.v = Scalar(cfg_.beta2) * st.v + Scalar(1 - cfg_.beta2) * p->grad.cwiseAbs2();
            p->value *= Scalar(1 - lr * cfg_.weight_decay);
            const Scalar a = Scalar(lr / bc1);
            const Scalar inv_bc2 = Scalar(1.0 / bc2);
            p->value.array() -=
                a * st.m.array() / ((st.v.array() * inv_bc2).sqrt() + Scalar(cfg_.eps));
        }
    }

    long steps() const { return t_; }

private:
    struct State {
        Mat<Scalar> m, v;
    };
    AdamWConfig cfg_;
    std::unordered_map<const Param<Scalar>*, State> state_;
    long t_ = 0;
};

/// f(x) = lr0 * x / W on [0, W], lr0 * (1 - (x - W) / (T - W))^power on [W, T],
/// continuous at W. Step s (0-based) trains with f(s + 1).
struct LrSchedule {
    double initial_lr = 4e-5;
    long warmup_steps = 0;
    long total_steps = 1;
    double power = 1.0;

    double at(double x) const
    {
        if (total_steps <= 0)
            return 0.0;
        if (warmup_steps > 0 && x <= static_cast<double>(warmup_steps))
            return initial_lr * x / static_cast<double>(warmup_steps);
        const double span = static_cast<double>(total_steps - warmup_steps);
        const double progress = std::clamp((x - static_cast<double>(warmup_steps)) / span, 0.0, 1.0);
        return initial_lr * std::pow(1.0 - progress, power);
    }

    double lr(long step) const { return at(static_cast<double>(step + 1)); }
};

} // namespace petal
