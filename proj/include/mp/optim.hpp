#pragma once

#include <cmath>
#include <cstddef>

#include "mp/common.hpp"
#include "mp/nn.hpp"

namespace mp::optim {

// AdamW with decoupled weight decay and an optional cosine learning-rate
// schedule over a fixed horizon. A zero-gradient step scales every parameter
// by exactly (1 - lr * weight_decay).
template <typename Real>
struct AdamW {
    double lr0 = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    bool cosine = true;
    std::size_t total_steps = 1;
    std::size_t t = 0;

    double lr_at(std::size_t step) const {
        if (!cosine) return lr0;
        MP_CONFIG_REQUIRE(total_steps > 0, "cosine schedule requires a positive horizon");
        const double frac = double(step) / double(total_steps);
        return lr0 * 0.5 * (1.0 + std::cos(kPi * frac));
    }

    double current_lr() const { return lr_at(t); }

    // Consumes the accumulated gradients in the store; caller zeroes them.
    void step(nn::ParamStore<Real>& ps) {
        const double lr = lr_at(t);
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, double(t));
        const double bc2 = 1.0 - std::pow(beta2, double(t));
        for (std::size_t i = 0; i < ps.size(); ++i) {
            auto& e = ps.entry(i);
            for (std::size_t k = 0; k < e.value.size(); ++k) {
                const double g = double(e.grad[k]);
                const double m = beta1 * double(e.m[k]) + (1.0 - beta1) * g;
                const double v = beta2 * double(e.v[k]) + (1.0 - beta2) * g * g;
                e.m[k] = Real(m);
                e.v[k] = Real(v);
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                const double upd = mhat / (std::sqrt(vhat) + eps) + weight_decay * double(e.value[k]);
                e.value[k] = Real(double(e.value[k]) - lr * upd);
            }
        }
    }
};

}  // namespace mp::optim
