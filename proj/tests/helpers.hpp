#pragma once

#include <cstdint>
#include <vector>

#include "mp/common.hpp"

namespace testutil {

inline std::vector<double> random_vec(std::size_t n, std::uint64_t seed,
                                      double lo = -2.0, double hi = 2.0) {
    mp::Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

template <typename Real>
std::vector<Real> cast_vec(const std::vector<double>& v) {
    return std::vector<Real>(v.begin(), v.end());
}

}  // namespace testutil
