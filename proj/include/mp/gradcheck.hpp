#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mp/nn.hpp"
#include "mp/tensor.hpp"

namespace mp::gradcheck {

// Relative error with a unit floor, so tiny gradients are compared absolutely.
inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Checks reverse-mode gradients of a scalar-valued function of one input
// tensor against central differences (f(x+eps e) - f(x-eps e)) / (2 eps).
// Returns the max relative error over all coordinates.
template <typename BuildFn>
double check_tensor_fn(BuildFn&& build, const std::vector<double>& x0,
                       const ad::Shape& shape, double eps = 1e-4) {
    MP_REQUIRE(x0.size() == ad::numel(shape), "gradcheck: input size mismatch");

    ad::Graph<double> g;
    ad::Tensor<double> x = g.leaf(shape, x0, true);
    ad::Tensor<double> y = build(g, x);
    MP_REQUIRE(ad::numel(g.shape(y)) == 1, "gradcheck: function must be scalar-valued");
    g.backward(y);
    const std::vector<double> analytic = g.grad(x);

    auto eval = [&](const std::vector<double>& xv) {
        ad::Graph<double> gf;
        ad::Tensor<double> xf = gf.leaf(shape, xv, false);
        ad::Tensor<double> yf = build(gf, xf);
        return gf.value(yf)[0];
    };

    double worst = 0.0;
    std::vector<double> xv = x0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double keep = xv[i];
        xv[i] = keep + eps;
        const double fp = eval(xv);
        xv[i] = keep - eps;
        const double fm = eval(xv);
        xv[i] = keep;
        const double numeric = (fp - fm) / (2.0 * eps);
        worst = std::max(worst, rel_err(analytic[i], numeric));
    }
    return worst;
}

// Checks a model-level loss against central differences over every parameter
// scalar in the store. `loss_and_grads` must zero the store's gradients,
// run forward+backward, and return the loss; `loss_only` runs forward alone.
inline double check_param_store(
    nn::ParamStore<double>& ps,
    const std::function<double(nn::ParamStore<double>&)>& loss_and_grads,
    const std::function<double(nn::ParamStore<double>&)>& loss_only,
    double eps = 1e-4) {
    loss_and_grads(ps);
    std::vector<std::vector<double>> analytic(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) analytic[i] = ps.entry(i).grad;

    double worst = 0.0;
    for (std::size_t i = 0; i < ps.size(); ++i) {
        auto& e = ps.entry(i);
        for (std::size_t k = 0; k < e.value.size(); ++k) {
            const double keep = e.value[k];
            e.value[k] = keep + eps;
            const double fp = loss_only(ps);
            e.value[k] = keep - eps;
            const double fm = loss_only(ps);
            e.value[k] = keep;
            const double numeric = (fp - fm) / (2.0 * eps);
            worst = std::max(worst, rel_err(analytic[i][k], numeric));
        }
    }
    return worst;
}

struct Case {
    std::string name;
    double tolerance;
    std::function<double()> run;  // returns max relative error
};

}  // namespace mp::gradcheck
