#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "mp/train.hpp"

using mp::fusion::ModelConfig;
using mp::fusion::MotionPerceiver;
using mp::fusion::VideoFlows;
using mp::train::TrainItem;
using mp::train::TrainOptions;

namespace {

ModelConfig trainable_config() {
    ModelConfig cfg;
    cfg.num_classes = 2;
    cfg.T = 8;
    cfg.grid_h = 2;
    cfg.grid_w = 2;
    cfg.K = 2;
    cfg.B = 8;
    cfg.strides = {1};
    return cfg;
}

// Cleanly separable two-class inputs: class 0 drifts +x, class 1 drifts -x,
// with matching directional energies and mild per-video noise.
std::vector<TrainItem> separable_items(const ModelConfig& cfg, std::size_t per_class,
                                       std::uint64_t seed) {
    std::vector<TrainItem> items;
    for (std::size_t i = 0; i < 2 * per_class; ++i) {
        const int label = int(i % 2);
        const double sign = label == 0 ? 1.0 : -1.0;
        mp::Rng rng(mp::derive_seed(seed, "video" + std::to_string(i)));

        VideoFlows v;
        v.T = cfg.T;
        v.N = cfg.N();
        mp::flow::DenseFlow df;
        df.stride = 1;
        df.T = cfg.T;
        df.N = v.N;
        df.steps = cfg.T - 1;
        df.data.resize(cfg.T * v.N * 2 * df.steps);
        for (std::size_t t = 0; t < cfg.T; ++t)
            for (std::size_t n = 0; n < v.N; ++n) {
                float* row = df.data.data() + (t * v.N + n) * 2 * df.steps;
                for (std::size_t j = 0; j < df.steps; ++j) {
                    row[j] = float(sign + 0.1 * rng.normal());
                    row[df.steps + j] = float(0.1 * rng.normal());
                }
            }
        v.flows.push_back(std::move(df));
        v.minmat.resize(cfg.T * v.N * 4);
        for (std::size_t c = 0; c < v.minmat.size(); c += 4) {
            v.minmat[c + 0] = (label == 0 ? 2.0 : 0.0) + 0.05 * rng.uniform();
            v.minmat[c + 1] = (label == 0 ? 0.0 : 2.0) + 0.05 * rng.uniform();
            v.minmat[c + 2] = 0.05 * rng.uniform();
            v.minmat[c + 3] = 0.05 * rng.uniform();
        }

        TrainItem item;
        item.video_id = "sep" + std::to_string(i);
        item.label = label;
        item.flows = std::move(v);
        items.push_back(std::move(item));
    }
    return items;
}

mp::FeatureSequence moving_clip(const ModelConfig& cfg, std::uint64_t seed) {
    mp::FeatureSequence fs;
    fs.T = cfg.T;
    fs.H = cfg.grid_h;
    fs.W = cfg.grid_w;
    fs.C = 6;
    fs.video_id = "clip" + std::to_string(seed);
    fs.features.resize(fs.T * fs.N() * fs.C);
    mp::Rng rng(seed);
    for (auto& x : fs.features) x = float(rng.uniform(-1.0, 1.0));
    return fs;
}

std::filesystem::path fresh_dir(const std::string& tag) {
    auto p = std::filesystem::temp_directory_path() / ("mp_train_" + tag);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("separable two-class flows reach full training accuracy", "[train]") {
    const ModelConfig cfg = trainable_config();
    MotionPerceiver<float> model(cfg, 5);
    const auto items = separable_items(cfg, 8, 42);

    TrainOptions opts;
    opts.epochs = 30;
    opts.batch_size = 4;
    opts.lr = 3e-3;
    opts.seed = 7;
    const auto result = mp::train::train(model, items, items, opts);

    REQUIRE(result.epochs.size() == 30);
    REQUIRE(mp::train::accuracy(model, items) >= 0.99);
    REQUIRE(result.best_val_accuracy >= 0.99);
}

TEST_CASE("training is bitwise deterministic across runs and job counts", "[train]") {
    const ModelConfig cfg = trainable_config();
    const auto items = separable_items(cfg, 4, 61);

    auto run = [&](std::size_t jobs) {
        MotionPerceiver<float> model(cfg, 9);
        TrainOptions opts;
        opts.epochs = 3;
        opts.batch_size = 3;  // ragged final batch
        opts.lr = 1e-3;
        opts.seed = 11;
        opts.jobs = jobs;
        return mp::train::train(model, items, items, opts);
    };

    const auto a = run(1);
    const auto b = run(1);
    const auto c = run(2);
    for (std::size_t e = 0; e < a.epochs.size(); ++e) {
        REQUIRE(a.epochs[e].loss == b.epochs[e].loss);
        REQUIRE(a.epochs[e].loss == c.epochs[e].loss);
        REQUIRE(a.epochs[e].val_accuracy == c.epochs[e].val_accuracy);
    }
}

TEST_CASE("metrics log and best checkpoint stay consistent", "[train]") {
    const ModelConfig cfg = trainable_config();
    MotionPerceiver<float> model(cfg, 21);
    const auto items = separable_items(cfg, 6, 77);
    const auto out = fresh_dir("metrics");

    TrainOptions opts;
    opts.epochs = 6;
    opts.batch_size = 4;
    opts.lr = 2e-3;
    opts.seed = 13;
    opts.out_dir = out;
    opts.bookkeep_limit = 8;
    const auto result = mp::train::train(model, items, items, opts);

    // One JSON line per epoch, in order.
    std::ifstream is(out / "metrics.jsonl");
    REQUIRE(is.good());
    std::string line;
    std::size_t lines = 0;
    while (std::getline(is, line)) {
        REQUIRE(line.find("\"epoch\": " + std::to_string(lines)) != std::string::npos);
        REQUIRE(line.find("\"val_accuracy\"") != std::string::npos);
        ++lines;
    }
    REQUIRE(lines == 6);

    // The stored checkpoint reproduces the predictions recorded when it was
    // written, even though training continued afterwards.
    REQUIRE(std::filesystem::exists(result.checkpoint_path));
    const auto ck = mp::io::read_checkpoint(result.checkpoint_path);
    REQUIRE(ck.manifest.find("train.epoch=" + std::to_string(result.best_epoch)) !=
            std::string::npos);
    MotionPerceiver<float> restored(cfg, 1);
    mp::io::restore_params(ck, cfg, restored.params());
    REQUIRE(result.best_train_predictions.size() == 8);
    for (const auto& [id, pred] : result.best_train_predictions) {
        const auto it = std::find_if(items.begin(), items.end(),
                                     [&](const TrainItem& x) { return x.video_id == id; });
        REQUIRE(it != items.end());
        REQUIRE(restored.predict_label(it->flows) == pred);
    }
}

TEST_CASE("non-finite members abort with a divergence dump", "[train]") {
    const ModelConfig cfg = trainable_config();
    MotionPerceiver<float> model(cfg, 33);
    auto& e = model.params().entry("head.fuse.W");
    e.value[0] = std::numeric_limits<float>::quiet_NaN();

    const auto items = separable_items(cfg, 2, 91);
    const auto out = fresh_dir("diverge");
    TrainOptions opts;
    opts.epochs = 1;
    opts.batch_size = 2;
    opts.seed = 3;
    opts.out_dir = out;

    REQUIRE_THROWS_AS(mp::train::train(model, items, items, opts), mp::ContractViolation);
    std::ifstream is(out / "divergence.json");
    REQUIRE(is.good());
    std::stringstream content;
    content << is.rdbuf();
    REQUIRE(content.str().find("\"epoch\": 0") != std::string::npos);
    REQUIRE(content.str().find("\"videos\"") != std::string::npos);
}

TEST_CASE("temporal augmentation reshuffles training flows deterministically", "[train]") {
    ModelConfig cfg = trainable_config();
    cfg.temporal_augmentation = true;

    std::vector<TrainItem> items;
    for (std::uint64_t s = 1; s <= 6; ++s) {
        const auto fs = moving_clip(cfg, s);
        items.push_back(mp::train::make_item(fs.video_id, int(s % 2), fs, cfg));
        REQUIRE(items.back().table != nullptr);
    }

    auto run = [&](std::uint64_t model_seed) {
        MotionPerceiver<float> model(cfg, model_seed);
        TrainOptions opts;
        opts.epochs = 2;
        opts.batch_size = 3;
        opts.seed = 19;
        return mp::train::train(model, items, items, opts);
    };
    const auto a = run(4);
    const auto b = run(4);
    for (std::size_t e = 0; e < a.epochs.size(); ++e)
        REQUIRE(a.epochs[e].loss == b.epochs[e].loss);

    // The same data without augmentation follows a different loss curve.
    ModelConfig plain = trainable_config();
    std::vector<TrainItem> plain_items;
    for (std::uint64_t s = 1; s <= 6; ++s) {
        const auto fs = moving_clip(plain, s);
        plain_items.push_back(mp::train::make_item(fs.video_id, int(s % 2), fs, plain));
        REQUIRE(plain_items.back().table == nullptr);
    }
    MotionPerceiver<float> model(plain, 4);
    TrainOptions opts;
    opts.epochs = 2;
    opts.batch_size = 3;
    opts.seed = 19;
    const auto c = mp::train::train(model, plain_items, plain_items, opts);
    REQUIRE(c.epochs[0].loss != a.epochs[0].loss);
}

TEST_CASE("training rejects malformed setups", "[train]") {
    const ModelConfig cfg = trainable_config();
    MotionPerceiver<float> model(cfg, 1);
    const auto items = separable_items(cfg, 2, 7);

    TrainOptions opts;
    opts.epochs = 1;
    REQUIRE_THROWS_AS(mp::train::train(model, {}, items, opts), mp::ConfigError);
    REQUIRE_THROWS_AS(mp::train::train(model, items, {}, opts), mp::ConfigError);

    auto bad = items;
    bad[0].label = 9;
    REQUIRE_THROWS_AS(mp::train::train(model, bad, items, opts), mp::ContractViolation);
}
