#pragma once

#include <vector>

#include "mp/patchflow.hpp"

namespace mp::invariant {

// Directional motion energy per reference frame and patch, averaged over all
// source frames: layout [t][n][4] with components (+x, -x, +y, -y). Built
// from raw pairwise flows; the magnitude floor never applies here.
inline std::vector<double> motion_invariant_matrix(
    const flow::TransitionTable& tab,
    flow::SelfTransition self = flow::SelfTransition::computed,
    std::size_t grid_w = 0) {
    const std::size_t T = tab.T(), N = tab.N();
    std::vector<double> out(T * N * 4, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t m = 0; m < T; ++m) {
            const std::vector<double> pf = flow::pairwise_flow(tab, t, m, self, grid_w);
            for (std::size_t n = 0; n < N; ++n) {
                const double vx = pf[2 * n];
                const double vy = pf[2 * n + 1];
                double* cell = out.data() + (t * N + n) * 4;
                if (vx > 0.0) cell[0] += vx;
                if (vx < 0.0) cell[1] += -vx;
                if (vy > 0.0) cell[2] += vy;
                if (vy < 0.0) cell[3] += -vy;
            }
        }
    }
    const double inv_t = 1.0 / double(T);
    for (double& v : out) v *= inv_t;
    return out;
}

}  // namespace mp::invariant
