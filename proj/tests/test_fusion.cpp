#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <numeric>
#include <vector>

#include "helpers.hpp"
#include "mp/fusion.hpp"
#include "mp/gradcheck.hpp"

using mp::ad::Graph;
using mp::ad::Shape;
using mp::ad::Tensor;
using mp::nn::Binder;
using mp::nn::ParamStore;
using mp::fusion::ForwardOut;
using mp::fusion::ModelConfig;
using mp::fusion::MotionPerceiver;
using mp::fusion::VideoFlows;

namespace {

// Random model inputs with plausible ranges; flow values do not need to
// respect the magnitude floor for forward-pass checks.
VideoFlows synth_inputs(const ModelConfig& cfg, std::uint64_t seed) {
    VideoFlows v;
    v.T = cfg.T;
    v.N = cfg.N();
    mp::Rng rng(seed);
    if (cfg.fsn_enabled) {
        for (std::size_t s : cfg.active_strides()) {
            mp::flow::DenseFlow df;
            df.stride = s;
            df.T = cfg.T;
            df.N = v.N;
            df.steps = cfg.T / s - 1;
            df.data.resize(cfg.T * v.N * 2 * df.steps);
            for (auto& x : df.data) x = float(rng.uniform(-2.0, 2.0));
            v.flows.push_back(std::move(df));
        }
    }
    if (cfg.min_enabled) {
        v.minmat.resize(cfg.T * v.N * 4);
        for (auto& x : v.minmat) x = rng.uniform(0.0, 1.5);
    }
    return v;
}

ModelConfig mini_config() {
    ModelConfig cfg;
    cfg.num_classes = 2;
    cfg.T = 8;
    cfg.grid_h = 3;
    cfg.grid_w = 3;
    cfg.K = 2;
    cfg.B = 16;
    cfg.strides = {1};
    return cfg;
}

// Feature clip with per-frame random content, for real-flow plumbing tests.
mp::FeatureSequence random_clip(std::size_t T, std::size_t H, std::size_t W, std::size_t C,
                                std::uint64_t seed) {
    mp::FeatureSequence fs;
    fs.T = T;
    fs.H = H;
    fs.W = W;
    fs.C = C;
    fs.video_id = "clip" + std::to_string(seed);
    fs.features.resize(T * H * W * C);
    mp::Rng rng(seed);
    for (auto& x : fs.features) x = float(rng.uniform(-1.0, 1.0));
    return fs;
}

}  // namespace

TEST_CASE("full scale forward shapes and runtime budget", "[fusion]") {
    ModelConfig cfg;  // defaults: T=32, 14x14 grid, 6 classes, strides 1/2/4/8
    MotionPerceiver<float> model(cfg, 7);
    VideoFlows v = synth_inputs(cfg, 99);

    const auto start = std::chrono::steady_clock::now();
    Graph<float> g;
    Binder<float> P(g, model.params());
    ForwardOut<float> f = model.forward(P, v);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    REQUIRE(f.f_fsn.shape() == Shape{1, 196});
    REQUIRE(f.f_min.shape() == Shape{1, 196});
    REQUIRE(f.flow_logits.shape() == Shape{1, 6});
    REQUIRE(f.invar_logits.shape() == Shape{1, 6});
    REQUIRE(f.fuse_logits.shape() == Shape{1, 6});
    REQUIRE(f.slot.valid());
    REQUIRE(f.slot.value().size() == 1);
    REQUIRE(secs < 2.0);
}

TEST_CASE("loss identities at uniform logits", "[fusion]") {
    ModelConfig cfg = mini_config();
    cfg.num_classes = 6;

    MotionPerceiver<double> model(cfg, 3);
    // Zeroed heads emit uniform logits, so every enabled term is ln 6.
    for (const char* name : {"head.flow.W", "head.flow.b", "head.invar.W", "head.invar.b",
                             "head.fuse.W", "head.fuse.b"}) {
        auto& e = model.params().entry(name);
        std::fill(e.value.begin(), e.value.end(), 0.0);
    }
    VideoFlows v = synth_inputs(cfg, 5);

    Graph<double> g;
    Binder<double> P(g, model.params());
    ForwardOut<double> f = model.forward(P, v);
    auto losses = model.losses(f, 2);

    const double ln6 = std::log(6.0);
    REQUIRE(losses.fuse == Catch::Approx(ln6).margin(1e-12));
    REQUIRE(losses.flow == Catch::Approx(ln6).margin(1e-12));
    REQUIRE(losses.invar == Catch::Approx(ln6).margin(1e-12));
    const double expected = 3.0 * ln6 + cfg.alpha * losses.slot;
    REQUIRE(losses.weighted_total() == Catch::Approx(expected).margin(1e-9));
}

TEST_CASE("slot weight scales its term linearly", "[fusion]") {
    ModelConfig a = mini_config();
    a.alpha = 10.0;
    ModelConfig b = a;
    b.alpha = 1.0;
    ModelConfig c = a;
    c.alpha = 0.0;
    ModelConfig d = a;
    d.slot_loss = false;

    const VideoFlows v = synth_inputs(a, 17);
    auto total_and_slot = [&](const ModelConfig& cfg) {
        MotionPerceiver<double> model(cfg, 23);
        Graph<double> g;
        Binder<double> P(g, model.params());
        auto f = model.forward(P, v);
        auto l = model.losses(f, 1);
        return std::pair<double, double>(l.weighted_total(), l.slot);
    };

    auto [t10, s10] = total_and_slot(a);
    auto [t1, s1] = total_and_slot(b);
    REQUIRE(s10 == s1);  // same seed, same forward state
    REQUIRE(t10 - t1 == Catch::Approx(9.0 * s10).epsilon(1e-12));

    // alpha=0 and a disabled slot term give bitwise identical totals.
    auto [t0, s0] = total_and_slot(c);
    auto [toff, soff] = total_and_slot(d);
    REQUIRE(s0 == s10);
    REQUIRE(soff == 0.0);
    REQUIRE(t0 == toff);
}

TEST_CASE("motion invariant pathway ignores frame order", "[fusion]") {
    ModelConfig cfg = mini_config();
    cfg.fsn_enabled = false;  // invariant pathway only

    const auto fs = random_clip(cfg.T, cfg.grid_h, cfg.grid_w, 5, 71);
    const mp::flow::TransitionTable tab(fs, cfg.tau);

    std::vector<std::size_t> perm(cfg.T);
    std::iota(perm.begin(), perm.end(), std::size_t(0));
    mp::Rng rng(73);
    rng.shuffle(perm);

    const VideoFlows v0 = mp::fusion::video_flows_from_table(tab, cfg);
    const VideoFlows v1 = mp::fusion::video_flows_from_table(tab.permuted(perm), cfg);

    MotionPerceiver<double> model(cfg, 29);
    auto run = [&](const VideoFlows& v) {
        Graph<double> g;
        Binder<double> P(g, model.params());
        return model.forward(P, v).fuse_logits.value();
    };
    const auto a = run(v0);
    const auto b = run(v1);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        REQUIRE(std::abs(a[i] - b[i]) < 1e-6);

    // The float instantiation tracks the double one loosely.
    MotionPerceiver<float> modelf(cfg, 29);
    auto runf = [&](const VideoFlows& v) {
        Graph<float> g;
        Binder<float> P(g, modelf.params());
        return modelf.forward(P, v).fuse_logits.value();
    };
    const auto af = runf(v0);
    const auto bf = runf(v1);
    for (std::size_t i = 0; i < af.size(); ++i)
        REQUIRE(std::abs(double(af[i]) - double(bf[i])) < 1e-4);
}

TEST_CASE("pathway toggles zero features and drop loss terms", "[fusion]") {
    SECTION("invariant pathway off") {
        ModelConfig cfg = mini_config();
        cfg.min_enabled = false;
        MotionPerceiver<double> model(cfg, 31);
        REQUIRE_FALSE(model.params().has("head.invar.W"));
        VideoFlows v = synth_inputs(cfg, 37);
        Graph<double> g;
        Binder<double> P(g, model.params());
        auto f = model.forward(P, v);
        for (double x : f.f_min.value()) REQUIRE(x == 0.0);
        REQUIRE_FALSE(f.invar_logits.valid());
        auto l = model.losses(f, 0);
        REQUIRE(l.invar == 0.0);
    }
    SECTION("flow pathway off") {
        ModelConfig cfg = mini_config();
        cfg.fsn_enabled = false;
        MotionPerceiver<double> model(cfg, 41);
        REQUIRE_FALSE(model.params().has("head.flow.W"));
        REQUIRE_FALSE(model.params().has("slots.s1.slots0"));
        VideoFlows v = synth_inputs(cfg, 43);
        Graph<double> g;
        Binder<double> P(g, model.params());
        auto f = model.forward(P, v);
        for (double x : f.f_fsn.value()) REQUIRE(x == 0.0);
        REQUIRE_FALSE(f.flow_logits.valid());
        REQUIRE_FALSE(f.slot.valid());
        auto l = model.losses(f, 1);
        REQUIRE(l.flow == 0.0);
        REQUIRE(l.slot == 0.0);
    }
    SECTION("slots off feeds raw flow channels") {
        ModelConfig cfg = mini_config();
        cfg.slots_enabled = false;
        MotionPerceiver<double> model(cfg, 47);
        REQUIRE_FALSE(model.params().has("slots.s1.slots0"));
        VideoFlows v = synth_inputs(cfg, 53);
        Graph<double> g;
        Binder<double> P(g, model.params());
        auto f = model.forward(P, v);
        REQUIRE_FALSE(f.slot.valid());
        REQUIRE(f.fuse_logits.shape() == Shape{1, 2});
    }
    SECTION("single scale uses one stride bank") {
        ModelConfig cfg;
        cfg.single_scale = true;
        REQUIRE(cfg.active_strides() == std::vector<std::size_t>{1});
        REQUIRE(cfg.fusion_channels() == cfg.K);
    }
    SECTION("time embedding changes the flow feature") {
        ModelConfig on = mini_config();
        ModelConfig off = mini_config();
        off.time_embedding = false;
        VideoFlows v = synth_inputs(on, 59);
        MotionPerceiver<double> m1(on, 61), m2(off, 61);
        Graph<double> g1, g2;
        Binder<double> p1(g1, m1.params()), p2(g2, m2.params());
        const auto a = m1.forward(p1, v).f_fsn.value();
        const auto b = m2.forward(p2, v).f_fsn.value();
        REQUIRE(a != b);
    }
    SECTION("both pathways off is rejected") {
        ModelConfig cfg = mini_config();
        cfg.min_enabled = false;
        cfg.fsn_enabled = false;
        REQUIRE_THROWS_AS(cfg.validate(), mp::ConfigError);
    }
}

TEST_CASE("first frame reference collapses flow rows", "[fusion]") {
    ModelConfig cfg = mini_config();
    cfg.first_frame_ref_only = true;
    const auto fs = random_clip(cfg.T, cfg.grid_h, cfg.grid_w, 5, 67);
    const mp::flow::TransitionTable tab(fs, cfg.tau);
    const VideoFlows v = mp::fusion::video_flows_from_table(tab, cfg);

    const auto& df = v.flows[0];
    for (std::size_t t = 1; t < df.T; ++t)
        for (std::size_t n = 0; n < df.N; ++n)
            for (std::size_t j = 0; j < df.row_dim(); ++j)
                REQUIRE(df.row(t, n)[j] == df.row(0, n)[j]);

    // The default keeps per-reference rows, which differ for random content.
    ModelConfig multi = mini_config();
    const VideoFlows w = mp::fusion::video_flows_from_table(tab, multi);
    bool any_diff = false;
    for (std::size_t n = 0; n < w.flows[0].N && !any_diff; ++n)
        for (std::size_t j = 0; j < w.flows[0].row_dim(); ++j)
            if (w.flows[0].row(1, n)[j] != w.flows[0].row(0, n)[j]) {
                any_diff = true;
                break;
            }
    REQUIRE(any_diff);
}

TEST_CASE("identical fusion tokens pool to a single token's value", "[fusion]") {
    ParamStore<double> ps;
    mp::nn::declare_attention_stack(ps, "stage", std::size_t(5), std::size_t(2), 83);
    Graph<double> g;
    Binder<double> P(g, ps);

    const std::vector<double> token = testutil::random_vec(5, 89, -1.0, 1.0);
    std::vector<double> data;
    for (int copy = 0; copy < 3; ++copy) data.insert(data.end(), token.begin(), token.end());
    Tensor<double> x = g.constant({std::size_t(1), std::size_t(3), std::size_t(5)}, data);
    Tensor<double> y = mp::nn::attention_stack(P, "stage", x, 2);
    const auto& v = y.value();
    for (std::size_t tok = 1; tok < 3; ++tok)
        for (std::size_t d = 0; d < 5; ++d) REQUIRE(v[tok * 5 + d] == v[d]);

    Tensor<double> pooled = mp::ad::mean_axis(y, 1);
    for (std::size_t d = 0; d < 5; ++d)
        REQUIRE(pooled.value()[d] == Catch::Approx(v[d]).margin(1e-12));
}

TEST_CASE("prediction is deterministic and respects inference refinement", "[fusion]") {
    ModelConfig cfg = mini_config();
    MotionPerceiver<float> model(cfg, 97);
    VideoFlows v = synth_inputs(cfg, 101);

    std::vector<float> l1, l2;
    const int p1 = model.predict_label(v, &l1);
    const int p2 = model.predict_label(v, &l2);
    REQUIRE(p1 == p2);
    REQUIRE(l1 == l2);
    REQUIRE(p1 >= 0);
    REQUIRE(p1 < int(cfg.num_classes));

    // Refinement off predicts from the initial slots; logits must match a
    // forward pass with refinement suppressed.
    ModelConfig raw = cfg;
    raw.inference_refine = false;
    MotionPerceiver<float> model_raw(raw, 97);
    std::vector<float> lraw;
    model_raw.predict_label(v, &lraw);
    Graph<float> g;
    Binder<float> P(g, model_raw.params());
    const auto manual = model_raw.forward(P, v, false).fuse_logits.value();
    REQUIRE(lraw == manual);
    REQUIRE(lraw != l1);
}

TEST_CASE("config fingerprints separate ablation variants", "[fusion]") {
    ModelConfig base;
    ModelConfig noslot = base;
    noslot.slots_enabled = false;
    ModelConfig nogamma = base;
    nogamma.gamma_enabled = false;
    ModelConfig aug = base;
    aug.temporal_augmentation = true;
    ModelConfig again;

    REQUIRE(base.fingerprint() == again.fingerprint());
    REQUIRE(base.fingerprint() != noslot.fingerprint());
    REQUIRE(base.fingerprint() != nogamma.fingerprint());
    REQUIRE(base.fingerprint() != aug.fingerprint());

    ModelConfig bad;
    bad.strides = {1, 2, 5};
    REQUIRE_THROWS_AS(bad.validate(), mp::ConfigError);
    ModelConfig short_clip;
    short_clip.T = 8;  // stride 8 leaves a single frame
    REQUIRE_THROWS_AS(short_clip.validate(), mp::ConfigError);
}

TEST_CASE("zero motion matrices give one bias-determined feature", "[fusion]") {
    ModelConfig cfg = mini_config();
    cfg.fsn_enabled = false;
    MotionPerceiver<double> model(cfg, 103);

    auto run = [&](std::uint64_t seed, bool zero) {
        VideoFlows v = synth_inputs(cfg, seed);
        if (zero) std::fill(v.minmat.begin(), v.minmat.end(), 0.0);
        Graph<double> g;
        Binder<double> P(g, model.params());
        return model.forward(P, v).f_min.value();
    };
    REQUIRE(run(1, true) == run(2, true));
    REQUIRE(run(1, false) != run(2, false));
}

TEST_CASE("full loss gradients match central differences on a miniature model", "[fusion]") {
    ModelConfig cfg = mini_config();
    const auto fs = random_clip(cfg.T, cfg.grid_h, cfg.grid_w, 4, 107);
    const VideoFlows v = mp::fusion::prepare_video(fs, cfg);
    const int label = 1;

    MotionPerceiver<double> model(cfg, 109);
    auto forward = [&](ParamStore<double>& store, bool want_grads) {
        Graph<double> g;
        Binder<double> P(g, store);
        auto f = model.forward(P, v);
        auto l = model.losses(f, label);
        if (want_grads) {
            store.zero_grads();
            g.backward(l.total);
            P.harvest();
        }
        return l.weighted_total();
    };
    const double worst = mp::gradcheck::check_param_store(
        model.params(), [&](ParamStore<double>& s) { return forward(s, true); },
        [&](ParamStore<double>& s) { return forward(s, false); });
    REQUIRE(worst < 1e-4);
}
