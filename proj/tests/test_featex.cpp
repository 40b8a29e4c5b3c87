#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "mp/featex.hpp"
#include "mp/patchflow.hpp"

using namespace mp;

namespace {

featex::PatchDescriptorConfig small_cfg() {
    featex::PatchDescriptorConfig cfg;
    cfg.grid_h = 4;
    cfg.grid_w = 4;
    return cfg;
}

// A 64px stack with one bright dot per frame at the given pixel positions.
std::vector<std::uint8_t> dot_stack(std::size_t T, std::size_t px,
                                    const std::vector<std::pair<double, double>>& at) {
    std::vector<std::uint8_t> frames(T * px * px, 0);
    for (std::size_t t = 0; t < T; ++t)
        stim::detail::splat_dot(frames.data() + t * px * px, px, at[t].first, at[t].second,
                                3.0);
    return frames;
}

double cosine(const float* a, const float* b, std::size_t c) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < c; ++i) {
        dot += double(a[i]) * b[i];
        na += double(a[i]) * a[i];
        nb += double(b[i]) * b[i];
    }
    return dot / std::sqrt(na * nb);
}

}  // namespace

TEST_CASE("all-black video maps every patch to the reserved descriptor", "[featex]") {
    const std::size_t T = 3, px = 64;
    std::vector<std::uint8_t> frames(T * px * px, 0);
    const auto cfg = small_cfg();
    const auto fs = featex::extract_features(frames.data(), T, px, cfg, "black");
    fs.validate();
    REQUIRE(fs.C == 32);

    const float* first = fs.features.data();
    double norm = 0;
    for (std::size_t c = 0; c < fs.C; ++c) norm += double(first[c]) * first[c];
    REQUIRE(norm > 0.5);
    for (std::size_t i = 1; i < fs.T * fs.N(); ++i)
        for (std::size_t c = 0; c < fs.C; ++c)
            REQUIRE(fs.features[i * fs.C + c] == first[c]);
}

TEST_CASE("a lone dot disturbs only its own patch", "[featex]") {
    const std::size_t px = 64;
    const auto cfg = small_cfg();
    // Dot centered in patch (1, 2) of the 4x4 grid, clear of patch borders.
    const auto frames = dot_stack(2, px, {{40.0, 24.0}, {40.0, 24.0}});
    const auto fs = featex::extract_features(frames.data(), 2, px, cfg, "dot");

    std::vector<std::uint8_t> black(2 * px * px, 0);
    const auto empty = featex::extract_features(black.data(), 2, px, cfg, "black");
    const std::size_t hot = 1 * 4 + 2;
    for (std::size_t n = 0; n < fs.N(); ++n) {
        double diff = 0;
        for (std::size_t c = 0; c < fs.C; ++c)
            diff = std::max(diff, std::abs(double(fs.features[n * fs.C + c]) -
                                           empty.features[n * fs.C + c]));
        if (n == hot)
            REQUIRE(diff > 0.05);
        else
            REQUIRE(diff == 0.0);
    }
}

TEST_CASE("descriptors translate with their content", "[featex]") {
    const std::size_t px = 64;
    const auto cfg = small_cfg();
    // Same dot shape, shifted right by exactly one 16px patch in frame 1.
    const auto frames = dot_stack(2, px, {{24.0, 24.0}, {40.0, 24.0}});
    const auto fs = featex::extract_features(frames.data(), 2, px, cfg, "shift");
    const std::size_t cell0 = 1 * 4 + 1, cell1 = 1 * 4 + 2;
    for (std::size_t c = 0; c < fs.C; ++c) {
        const float a = fs.frame(0)[cell0 * fs.C + c];
        const float b = fs.frame(1)[cell1 * fs.C + c];
        REQUIRE(std::abs(double(a) - b) <= 1e-6);
    }
}

TEST_CASE("feature extraction is deterministic and job-count independent", "[featex]") {
    const auto pose = stim::synth_pose(stim::Action::kick, 6, 3, 0.0, 0.15);
    const auto video = stim::render_joint(pose, 10, {112, 2.0});
    featex::PatchDescriptorConfig cfg;
    cfg.grid_h = 7;
    cfg.grid_w = 7;
    const auto a = featex::extract_features(video, cfg, "v", 1);
    const auto b = featex::extract_features(video, cfg, "v", 1);
    const auto c = featex::extract_features(video, cfg, "v", 3);
    REQUIRE(a.features == b.features);
    REQUIRE(a.features == c.features);
}

TEST_CASE("extraction rejects incompatible frame sizes", "[featex]") {
    std::vector<std::uint8_t> frames(2 * 100 * 100, 0);
    featex::PatchDescriptorConfig cfg;
    REQUIRE_THROWS_AS(featex::extract_features(frames.data(), 2, 100, cfg, "x"),
                      ConfigError);
    featex::PatchDescriptorConfig tiny;
    tiny.grid_h = 32;
    tiny.grid_w = 32;
    std::vector<std::uint8_t> small(2 * 64 * 64, 0);
    REQUIRE_THROWS_AS(featex::extract_features(small.data(), 2, 64, tiny, "x"),
                      ConfigError);
}

TEST_CASE("distinct dots in distinct patches stay distinguishable", "[featex]") {
    featex::PatchDescriptorConfig cfg;  // 14x14 over 224, projected to 32
    std::size_t total = 0, good = 0;
    for (int a = 0; a < 6; a += 2)
        for (std::uint64_t s = 1; s <= 2; ++s) {
            const auto pose =
                stim::synth_pose(stim::Action(a), 8, s * 7 + std::uint64_t(a), 0.0, 0.15);
            const auto video = stim::render_joint(pose, 6, {224, 3.0});
            const auto fs = featex::extract_features(video, cfg, "v");
            for (std::size_t t = 0; t < video.T; ++t) {
                std::vector<std::size_t> cell(6);
                for (int p = 0; p < 6; ++p) {
                    const auto [x, y] = video.dot_xy[t][p];
                    cell[p] = (std::size_t(y) / 16) * 14 + std::size_t(x) / 16;
                }
                bool ok = true;
                for (int i = 0; i < 6; ++i)
                    for (int j = i + 1; j < 6; ++j) {
                        if (cell[i] == cell[j]) continue;
                        if (cosine(fs.frame(t) + cell[i] * fs.C,
                                   fs.frame(t) + cell[j] * fs.C, fs.C) >= 0.99)
                            ok = false;
                    }
                ++total;
                good += ok;
            }
        }
    REQUIRE(double(good) >= 0.9 * double(total));
}

TEST_CASE("translation fixtures plant recoverable flow", "[featex]") {
    std::size_t scored = 0, within = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const int dx = int(seed % 3) - 1, dy = int(seed % 2);
        const std::size_t H = 8, W = 10, T = 6;
        const auto fx = featex::translation_fixture(H, W, T, dx, dy, seed);
        fx.fs.validate();

        for (std::size_t t = 0; t + 1 < T; ++t) {
            const auto flow = fx.planted_flow(t);
            for (const auto cell : fx.object_cells(t)) {
                REQUIRE(flow[cell].first == float(dx));
                REQUIRE(flow[cell].second == float(dy));
            }
        }

        const flow::TransitionTable table(fx.fs);
        const auto df = flow::dense_flow(table, 1);
        for (std::size_t t = 0; t + 1 < T; ++t)
            for (const auto cell : fx.object_cells(t)) {
                const float* row = df.row(t, cell);
                const double ex = row[t] - dx;
                const double ey = row[df.steps + t] - dy;
                ++scored;
                if (std::sqrt(ex * ex + ey * ey) <= 0.5) ++within;
            }
    }
    REQUIRE(scored >= 100);
    REQUIRE(double(within) >= 0.95 * double(scored));

    REQUIRE_THROWS_AS(featex::translation_fixture(4, 4, 8, 2, 0, 1), ConfigError);
}

TEST_CASE("zero displacement plants zero flow", "[featex]") {
    const auto fx = featex::translation_fixture(6, 6, 5, 0, 0, 9);
    for (std::size_t t = 0; t + 1 < 5; ++t)
        for (const auto& f : fx.planted_flow(t)) {
            REQUIRE(f.first == 0.0f);
            REQUIRE(f.second == 0.0f);
        }
    const flow::TransitionTable table(fx.fs);
    const auto df = flow::dense_flow(table, 1);
    for (std::size_t t = 0; t + 1 < 5; ++t)
        for (const auto cell : fx.object_cells(t)) {
            REQUIRE(std::abs(df.row(t, cell)[t]) <= 0.5);
            REQUIRE(std::abs(df.row(t, cell)[df.steps + t]) <= 0.5);
        }
}

TEST_CASE("features survive container and frame-directory round trips", "[featex]") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "mp_featex_test";
    fs::remove_all(dir);
    fs::create_directories(dir);

    const auto pose = stim::synth_pose(stim::Action::wave, 4, 11, 0.0, 0.15);
    const auto video = stim::render_joint(pose, 6, {64, 2.0});
    featex::PatchDescriptorConfig cfg = small_cfg();
    const auto direct = featex::extract_features(video, cfg, "v");

    featex::save_features(dir / "v.mpt", direct);
    const auto loaded = featex::load_features(dir / "v.mpt", "v");
    REQUIRE(loaded.T == direct.T);
    REQUIRE(loaded.H == direct.H);
    REQUIRE(loaded.W == direct.W);
    REQUIRE(loaded.C == direct.C);
    REQUIRE(loaded.features == direct.features);

    fs::create_directories(dir / "frames");
    for (std::size_t t = 0; t < video.T; ++t) {
        char name[16];
        std::snprintf(name, sizeof(name), "frame_%02zu.png", t);
        png::write_gray8(dir / "frames" / name, video.px, video.px, video.frame(t));
    }
    const auto from_disk = featex::extract_features(dir / "frames", cfg, "v");
    REQUIRE(from_disk.features == direct.features);

    io::save_tensor(dir / "flat.mpt", {4, 7, 32},
                    std::vector<float>(4 * 7 * 32, 0.5f));
    REQUIRE_THROWS_AS(featex::load_features(dir / "flat.mpt"), ConfigError);
    io::save_tensor(dir / "rank2.mpt", {4, 7}, std::vector<float>(28, 0.5f));
    REQUIRE_THROWS_AS(featex::load_features(dir / "rank2.mpt"), ConfigError);
    fs::remove_all(dir);
}
