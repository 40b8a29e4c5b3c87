#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mp/common.hpp"

namespace mp {

// Per-frame patch descriptors on a fixed H x W grid, flattened row-major as
// [t][n][c] with n = y * W + x.
struct FeatureSequence {
    std::size_t T = 0;
    std::size_t H = 0;
    std::size_t W = 0;
    std::size_t C = 0;
    std::vector<float> features;
    std::string video_id;

    std::size_t N() const { return H * W; }

    const float* frame(std::size_t t) const {
        MP_REQUIRE(t < T, "FeatureSequence::frame: index out of range");
        return features.data() + t * N() * C;
    }

    void validate() const {
        MP_REQUIRE(T > 0 && H > 0 && W > 0 && C > 0, "FeatureSequence: empty dims");
        MP_REQUIRE(features.size() == T * N() * C, "FeatureSequence: buffer size mismatch");
    }
};

}  // namespace mp
