#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "mp/common.hpp"
#include "mp/featseq.hpp"
#include "mp/io.hpp"
#include "mp/png.hpp"
#include "mp/stimgen.hpp"

namespace mp::featex {

inline constexpr std::size_t kRawChannels = 12;

enum class Normalize { none, l2 };

struct PatchDescriptorConfig {
    std::size_t grid_h = 14;
    std::size_t grid_w = 14;
    std::size_t channels = 32;  // 0 keeps the 12 raw channels
    std::uint64_t seed = 2026;  // fixes the random projection basis
    Normalize normalize = Normalize::l2;

    void validate() const {
        MP_CONFIG_REQUIRE(grid_h >= 2 && grid_w >= 2, "featex: grid must be at least 2x2");
        MP_CONFIG_REQUIRE(channels == 0 || channels >= 4,
                          "featex: projected channels must be 0 (raw) or >= 4");
    }
};

// Patches with no light get this marker instead of an all-zero vector, so
// row normalization and adjacency stay well defined over empty regions.
// Real content always has positive mean intensity in channel 0, which this
// vector deliberately lacks.
inline const std::array<double, kRawChannels>& empty_raw_descriptor() {
    static const std::array<double, kRawChannels> d = {
        0, 0, 0, 0.35355339059327373, 0.35355339059327373, 0.35355339059327373,
        0.35355339059327373, 0.35355339059327373, 0.35355339059327373,
        0.35355339059327373, 0.35355339059327373, 0};
    return d;
}

namespace detail {

inline int gradient_octant(int gx, int gy) {
    const int ax = gx < 0 ? -gx : gx, ay = gy < 0 ? -gy : gy;
    if (gy >= 0) {
        if (gx > 0) return ax >= ay ? 0 : 1;
        return ay >= ax ? 2 : 3;
    }
    if (gx < 0) return ax >= ay ? 4 : 5;
    return ay >= ax ? 6 : 7;
}

// 12 channels of patch content: mean intensity, intensity-weighted centroid
// offsets, an 8-bin oriented gradient histogram over the patch interior, and
// intensity variance. Depends only on pixels inside the patch, so identical
// content gives identical values wherever the patch sits.
inline std::array<double, kRawChannels> raw_descriptor(const std::uint8_t* frame,
                                                       std::size_t frame_w, std::size_t x0,
                                                       std::size_t y0, std::size_t pw,
                                                       std::size_t ph) {
    double sum = 0, wx = 0, wy = 0;
    for (std::size_t y = 0; y < ph; ++y)
        for (std::size_t x = 0; x < pw; ++x) {
            const double v = frame[(y0 + y) * frame_w + x0 + x];
            sum += v;
            wx += v * double(x);
            wy += v * double(y);
        }
    if (sum == 0) return empty_raw_descriptor();

    std::array<double, kRawChannels> d{};
    const double n = double(pw * ph);
    const double mean = sum / (n * 255.0);
    d[0] = mean;
    d[1] = (wx / sum - 0.5 * double(pw - 1)) / double(pw);
    d[2] = (wy / sum - 0.5 * double(ph - 1)) / double(pw);

    double hist_total = 0;
    for (std::size_t y = 1; y + 1 < ph; ++y)
        for (std::size_t x = 1; x + 1 < pw; ++x) {
            const std::size_t at = (y0 + y) * frame_w + x0 + x;
            const int gx = int(frame[at + 1]) - int(frame[at - 1]);
            const int gy = int(frame[at + frame_w]) - int(frame[at - frame_w]);
            if (gx == 0 && gy == 0) continue;
            const double mag = std::sqrt(double(gx) * gx + double(gy) * gy) / 510.0;
            d[3 + gradient_octant(gx, gy)] += mag;
            hist_total += mag;
        }
    if (hist_total > 0)
        for (int b = 0; b < 8; ++b) d[3 + b] /= hist_total;

    double var = 0;
    for (std::size_t y = 0; y < ph; ++y)
        for (std::size_t x = 0; x < pw; ++x) {
            const double v = frame[(y0 + y) * frame_w + x0 + x] / 255.0 - mean;
            var += v * v;
        }
    d[11] = var / n;
    return d;
}

inline std::vector<double> projection_basis(const PatchDescriptorConfig& cfg) {
    std::vector<double> basis(cfg.channels * kRawChannels);
    Rng rng(derive_seed(cfg.seed, "featex-projection"));
    const double scale = 1.0 / std::sqrt(double(kRawChannels));
    for (auto& w : basis) w = scale * rng.normal();
    return basis;
}

inline void finish_descriptor(const std::array<double, kRawChannels>& raw,
                              const std::vector<double>& basis,
                              const PatchDescriptorConfig& cfg, float* out) {
    const std::size_t C = cfg.channels == 0 ? kRawChannels : cfg.channels;
    std::vector<double> v(C);
    if (cfg.channels == 0) {
        std::copy(raw.begin(), raw.end(), v.begin());
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0;
            for (std::size_t k = 0; k < kRawChannels; ++k)
                acc += basis[c * kRawChannels + k] * raw[k];
            v[c] = acc;
        }
    }
    if (cfg.normalize == Normalize::l2) {
        double sq = 0;
        for (const double x : v) sq += x * x;
        const double inv = 1.0 / std::max(std::sqrt(sq), 1e-12);
        for (double& x : v) x *= inv;
    }
    for (std::size_t c = 0; c < C; ++c) out[c] = float(v[c]);
}

}  // namespace detail

// Per-patch descriptors for a stack of square grayscale frames.
inline FeatureSequence extract_features(const std::uint8_t* frames, std::size_t T,
                                        std::size_t px, const PatchDescriptorConfig& cfg,
                                        const std::string& video_id = "",
                                        std::size_t jobs = 1) {
    cfg.validate();
    MP_CONFIG_REQUIRE(T >= 2, "featex: need at least two frames");
    MP_CONFIG_REQUIRE(px % cfg.grid_h == 0 && px % cfg.grid_w == 0,
                      "featex: frame size " + std::to_string(px) +
                          " is not divisible by the patch grid");
    const std::size_t ph = px / cfg.grid_h, pw = px / cfg.grid_w;
    MP_CONFIG_REQUIRE(ph >= 4 && pw >= 4,
                      "featex: patches smaller than 4px cannot carry gradients");

    FeatureSequence fs;
    fs.T = T;
    fs.H = cfg.grid_h;
    fs.W = cfg.grid_w;
    fs.C = cfg.channels == 0 ? kRawChannels : cfg.channels;
    fs.video_id = video_id;
    fs.features.resize(T * fs.N() * fs.C);
    const auto basis =
        cfg.channels == 0 ? std::vector<double>() : detail::projection_basis(cfg);

    parallel_for(T, jobs, [&](std::size_t t) {
        const std::uint8_t* frame = frames + t * px * px;
        for (std::size_t gy = 0; gy < cfg.grid_h; ++gy)
            for (std::size_t gx = 0; gx < cfg.grid_w; ++gx) {
                const auto raw =
                    detail::raw_descriptor(frame, px, gx * pw, gy * ph, pw, ph);
                float* out =
                    fs.features.data() + (t * fs.N() + gy * cfg.grid_w + gx) * fs.C;
                detail::finish_descriptor(raw, basis, cfg, out);
            }
    });
    return fs;
}

inline FeatureSequence extract_features(const stim::PointLightVideo& video,
                                        const PatchDescriptorConfig& cfg,
                                        const std::string& video_id = "",
                                        std::size_t jobs = 1) {
    return extract_features(video.frames.data(), video.T, video.px, cfg, video_id, jobs);
}

// --- frame directory input ------------------------------------------------------

struct FrameStack {
    std::size_t T = 0;
    std::size_t px = 0;
    std::vector<std::uint8_t> frames;
};

inline FrameStack load_frame_dir(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> paths;
    std::error_code ec;
    for (const auto& entry : std::filesystem::directory_iterator(dir, ec)) {
        const auto name = entry.path().filename().string();
        if (name.rfind("frame_", 0) == 0 && name.size() > 4 &&
            name.substr(name.size() - 4) == ".png")
            paths.push_back(entry.path());
    }
    if (ec) throw IoError("cannot list " + dir.string() + ": " + ec.message());
    MP_CONFIG_REQUIRE(paths.size() >= 2,
                      "frame directory " + dir.string() + " holds fewer than two frames");
    std::sort(paths.begin(), paths.end());

    FrameStack stack;
    stack.T = paths.size();
    for (std::size_t t = 0; t < paths.size(); ++t) {
        const auto img = png::read_gray8(paths[t]);
        if (t == 0) {
            MP_CONFIG_REQUIRE(img.w == img.h, "frames must be square: " + paths[t].string());
            stack.px = img.w;
            stack.frames.reserve(stack.T * stack.px * stack.px);
        }
        MP_CONFIG_REQUIRE(img.w == stack.px && img.h == stack.px,
                          "frame size changed mid-video: " + paths[t].string());
        stack.frames.insert(stack.frames.end(), img.gray.begin(), img.gray.end());
    }
    return stack;
}

inline FeatureSequence extract_features(const std::filesystem::path& frame_dir,
                                        const PatchDescriptorConfig& cfg,
                                        const std::string& video_id = "",
                                        std::size_t jobs = 1) {
    const auto stack = load_frame_dir(frame_dir);
    return extract_features(stack.frames.data(), stack.T, stack.px, cfg,
                            video_id.empty() ? frame_dir.string() : video_id, jobs);
}

// --- MPT exchange -----------------------------------------------------------------

inline void save_features(const std::filesystem::path& path, const FeatureSequence& fs) {
    fs.validate();
    io::save_tensor(path, {fs.T, fs.N(), fs.C}, fs.features);
}

// Accepts externally computed features: a rank-3 container of T x N x C with
// N a perfect square (descriptors on a square patch grid).
inline FeatureSequence load_features(const std::filesystem::path& path,
                                     const std::string& video_id = "") {
    const io::Mpt m = io::load_tensor(path);
    MP_CONFIG_REQUIRE(m.dims.size() == 3,
                      "feature container must be T x N x C: " + path.string());
    const std::size_t N = m.dims[1];
    const auto side = std::size_t(std::lround(std::sqrt(double(N))));
    MP_CONFIG_REQUIRE(side * side == N,
                      "feature container needs a square patch grid: " + path.string());
    FeatureSequence fs;
    fs.T = m.dims[0];
    fs.H = side;
    fs.W = side;
    fs.C = m.dims[2];
    fs.video_id = video_id.empty() ? path.string() : video_id;
    if (m.dtype == 1) {
        fs.features = m.f32;
    } else {
        fs.features.resize(m.f64.size());
        for (std::size_t i = 0; i < m.f64.size(); ++i) fs.features[i] = float(m.f64[i]);
    }
    fs.validate();
    return fs;
}

// --- constructed-translation fixture ------------------------------------------------

// A block of distinct descriptors sliding over a uniform background with a
// known integer displacement per frame; the planted flow is the ground truth
// that recovered flow fields are scored against.
struct TranslationFixture {
    FeatureSequence fs;
    int dx = 0;
    int dy = 0;
    std::size_t start_x = 0;
    std::size_t start_y = 0;
    std::size_t obj_h = 2;
    std::size_t obj_w = 2;

    std::size_t x_at(std::size_t t) const {
        return std::size_t(std::ptrdiff_t(start_x) + std::ptrdiff_t(t) * dx);
    }
    std::size_t y_at(std::size_t t) const {
        return std::size_t(std::ptrdiff_t(start_y) + std::ptrdiff_t(t) * dy);
    }

    std::vector<std::size_t> object_cells(std::size_t t) const {
        std::vector<std::size_t> cells;
        for (std::size_t oy = 0; oy < obj_h; ++oy)
            for (std::size_t ox = 0; ox < obj_w; ++ox)
                cells.push_back((y_at(t) + oy) * fs.W + x_at(t) + ox);
        return cells;
    }

    // Planted per-patch flow for the step t -> t+1, (dx, dy) pairs.
    std::vector<std::pair<float, float>> planted_flow(std::size_t t) const {
        MP_REQUIRE(t + 1 < fs.T, "planted_flow: no step after the last frame");
        std::vector<std::pair<float, float>> flow(fs.N(), {0.0f, 0.0f});
        for (const std::size_t cell : object_cells(t)) flow[cell] = {float(dx), float(dy)};
        return flow;
    }
};

inline TranslationFixture translation_fixture(std::size_t H, std::size_t W, std::size_t T,
                                              int dx, int dy, std::uint64_t seed) {
    MP_CONFIG_REQUIRE(H >= 2 && W >= 2 && T >= 2, "fixture: grid and clip must be nontrivial");
    TranslationFixture fx;
    fx.dx = dx;
    fx.dy = dy;

    const auto span = [](std::size_t limit, std::size_t extent, int d, std::size_t steps,
                         std::size_t& lo, std::size_t& hi) {
        std::ptrdiff_t a = 0, b = std::ptrdiff_t(limit - extent);
        const std::ptrdiff_t total = std::ptrdiff_t(steps) * d;
        if (total > 0) b -= total;
        if (total < 0) a -= total;
        if (a > b) return false;
        lo = std::size_t(a);
        hi = std::size_t(b);
        return true;
    };
    std::size_t x_lo, x_hi, y_lo, y_hi;
    MP_CONFIG_REQUIRE(span(W, fx.obj_w, dx, T - 1, x_lo, x_hi) &&
                          span(H, fx.obj_h, dy, T - 1, y_lo, y_hi),
                      "fixture: the object would leave the grid before frame " +
                          std::to_string(T - 1));

    Rng rng(derive_seed(seed, "fixture"));
    fx.start_x = x_lo + rng.below(x_hi - x_lo + 1);
    fx.start_y = y_lo + rng.below(y_hi - y_lo + 1);

    // Four distinct unit descriptors, resampled until they are mutually far
    // from each other so correspondence is unambiguous.
    const std::size_t C = kRawChannels;
    std::vector<std::array<double, kRawChannels>> obj;
    while (obj.size() < fx.obj_h * fx.obj_w) {
        std::array<double, kRawChannels> v;
        double sq = 0;
        for (auto& x : v) {
            x = rng.uniform(-1.0, 1.0);
            sq += x * x;
        }
        const double inv = 1.0 / std::max(std::sqrt(sq), 1e-12);
        for (auto& x : v) x *= inv;
        bool ok = true;
        for (const auto& o : obj) {
            double dot = 0;
            for (std::size_t c = 0; c < C; ++c) dot += v[c] * o[c];
            if (std::abs(dot) > 0.8) ok = false;
        }
        const auto& bg = empty_raw_descriptor();
        double dotbg = 0;
        for (std::size_t c = 0; c < C; ++c) dotbg += v[c] * bg[c];
        if (std::abs(dotbg) > 0.8) ok = false;
        if (ok) obj.push_back(v);
    }

    fx.fs.T = T;
    fx.fs.H = H;
    fx.fs.W = W;
    fx.fs.C = C;
    fx.fs.video_id = "fixture:" + std::to_string(seed);
    fx.fs.features.resize(T * H * W * C);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t n = 0; n < H * W; ++n) {
            float* out = fx.fs.features.data() + (t * H * W + n) * C;
            for (std::size_t c = 0; c < C; ++c) out[c] = float(empty_raw_descriptor()[c]);
        }
        std::size_t k = 0;
        for (const std::size_t cell : fx.object_cells(t)) {
            float* out = fx.fs.features.data() + (t * H * W + cell) * C;
            for (std::size_t c = 0; c < C; ++c) out[c] = float(obj[k][c]);
            ++k;
        }
    }
    return fx;
}

}  // namespace mp::featex
