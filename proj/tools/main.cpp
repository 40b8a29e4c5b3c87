#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "mp/cli.hpp"

namespace {

// Ordered key=value assignments collected from convenience flags, applied on
// top of any --config files and before --set overrides.
struct Flags {
    std::vector<std::string> configs;
    std::vector<std::string> sets;
    std::vector<std::pair<std::string, std::string>> kv;
};

void add_common(CLI::App* cmd, Flags& f) {
    cmd->add_option("--config", f.configs,
                    "key=value config file, repeatable, applied in order")
        ->check(CLI::ExistingFile);
    cmd->add_option("--set", f.sets,
                    "single key=value override, repeatable, applied last");
}

void key_opt(CLI::App* cmd, Flags& f, const std::string& flag, const std::string& key,
             const std::string& help) {
    cmd->add_option_function<std::string>(
        flag, [&f, key](const std::string& v) { f.kv.emplace_back(key, v); }, help);
}

mp::io::RunConfig build_config(const Flags& f) {
    mp::io::RunConfig rc;
    for (const auto& path : f.configs) rc.load_file(path);
    for (const auto& [k, v] : f.kv) rc.set(k, v);
    for (const auto& s : f.sets) rc.load_line(s, "--set");
    return rc;
}

const std::vector<std::pair<std::string, std::pair<std::string, std::string>>>&
ablation_table() {
    static const std::vector<std::pair<std::string, std::pair<std::string, std::string>>>
        table = {
            {"min", {"min", "0"}},
            {"fsn", {"fsn", "0"}},
            {"slots", {"slots_enabled", "0"}},
            {"slot_loss", {"slot_loss", "0"}},
            {"gamma", {"gamma_enabled", "0"}},
            {"time_embedding", {"time_embedding", "0"}},
            {"refine", {"inference_refine", "0"}},
            {"single_scale", {"single_scale", "1"}},
            {"first_frame_ref", {"first_frame_ref_only", "1"}},
            {"temporal_augmentation", {"temporal_augmentation", "1"}},
        };
    return table;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"point-light action benchmark and motion perceiver pipeline"};
    app.require_subcommand(1);

    Flags gen_f, feat_f, train_f, eval_f, key_f, flow_f, grad_f;

    CLI::App* gen = app.add_subcommand("gen", "render a benchmark dataset");
    add_common(gen, gen_f);
    key_opt(gen, gen_f, "--dataset", "dataset", "output dataset directory");
    key_opt(gen, gen_f, "--classes", "classes", "number of action classes");
    key_opt(gen, gen_f, "--per-class", "per_class", "videos per class");
    key_opt(gen, gen_f, "--seed", "seed", "master seed");
    key_opt(gen, gen_f, "--px", "px", "frame size in pixels");
    key_opt(gen, gen_f, "--t", "t", "frames per video");
    key_opt(gen, gen_f, "--jitter", "jitter", "pose variation strength");
    key_opt(gen, gen_f, "--dot-radius", "dot_radius", "dot radius in pixels");
    key_opt(gen, gen_f, "--conditions", "conditions", "comma list or 'all'");
    key_opt(gen, gen_f, "--jobs", "jobs", "worker threads");

    CLI::App* feat = app.add_subcommand("featex", "extract patch features");
    add_common(feat, feat_f);
    key_opt(feat, feat_f, "--dataset", "dataset", "dataset directory");
    key_opt(feat, feat_f, "--features", "features", "output feature directory");
    key_opt(feat, feat_f, "--grid-h", "grid_h", "patch grid rows");
    key_opt(feat, feat_f, "--grid-w", "grid_w", "patch grid columns");
    key_opt(feat, feat_f, "--channels", "feat_channels", "descriptor channels, 0 = raw");
    key_opt(feat, feat_f, "--feat-seed", "feat_seed", "projection seed");
    key_opt(feat, feat_f, "--conditions", "conditions", "comma list or 'all'");
    key_opt(feat, feat_f, "--jobs", "jobs", "worker threads");

    CLI::App* train = app.add_subcommand("train", "train a model on one condition");
    add_common(train, train_f);
    key_opt(train, train_f, "--features", "features", "feature directory");
    key_opt(train, train_f, "--out", "out", "run output directory");
    key_opt(train, train_f, "--epochs", "epochs", "training epochs");
    key_opt(train, train_f, "--batch-size", "batch_size", "minibatch size");
    key_opt(train, train_f, "--lr", "lr", "peak learning rate");
    key_opt(train, train_f, "--seed", "seed", "master seed");
    key_opt(train, train_f, "--train-condition", "train_condition",
            "condition providing the training clips");
    key_opt(train, train_f, "--val-fraction", "val_fraction", "validation share");
    key_opt(train, train_f, "--jobs", "jobs", "worker threads");
    std::string ablist;
    for (const auto& [name, kv] : ablation_table())
        ablist += (ablist.empty() ? "" : ", ") + name;
    train->add_option_function<std::vector<std::string>>(
        "--ablate",
        [&train_f](const std::vector<std::string>& names) {
            for (const auto& n : names) {
                bool hit = false;
                for (const auto& [name, kv] : ablation_table())
                    if (name == n) {
                        train_f.kv.push_back(kv);
                        hit = true;
                    }
                if (!hit) throw CLI::ValidationError("--ablate", "unknown ablation '" + n + "'");
            }
        },
        "flip one model toggle off its default; one of: " + ablist);

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint per condition");
    add_common(ev, eval_f);
    key_opt(ev, eval_f, "--features", "features", "feature directory");
    key_opt(ev, eval_f, "--checkpoint", "checkpoint", "checkpoint file");
    key_opt(ev, eval_f, "--out", "out", "report output directory");
    key_opt(ev, eval_f, "--conditions", "conditions", "comma list or 'all'");
    key_opt(ev, eval_f, "--human-ref", "human_ref",
            "JSON file of reference accuracies keyed by condition");
    key_opt(ev, eval_f, "--jobs", "jobs", "worker threads");

    CLI::App* keyf = app.add_subcommand("keyframes", "per-frame importance for one clip");
    add_common(keyf, key_f);
    key_opt(keyf, key_f, "--features", "features", "feature directory");
    key_opt(keyf, key_f, "--checkpoint", "checkpoint", "checkpoint file");
    key_opt(keyf, key_f, "--out", "out", "output directory");
    key_opt(keyf, key_f, "--video", "video", "clip path from the feature index");
    key_opt(keyf, key_f, "--x-values", "keyframe_xs", "comma list of replacement counts");
    key_opt(keyf, key_f, "--repeats", "keyframe_repeats", "random draws per count");
    key_opt(keyf, key_f, "--seed", "seed", "master seed");
    key_opt(keyf, key_f, "--jobs", "jobs", "worker threads");

    CLI::App* flows = app.add_subcommand("inspect_flows", "dump flow fields for one clip");
    add_common(flows, flow_f);
    key_opt(flows, flow_f, "--features", "features", "feature directory");
    key_opt(flows, flow_f, "--video", "video", "clip path or .mpt file");
    key_opt(flows, flow_f, "--out", "out", "output directory");

    CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    add_common(grad, grad_f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (gen->parsed()) return mp::cli::run_gen(build_config(gen_f));
        if (feat->parsed()) return mp::cli::run_featex(build_config(feat_f));
        if (train->parsed()) return mp::cli::run_train(build_config(train_f));
        if (ev->parsed()) return mp::cli::run_eval(build_config(eval_f));
        if (keyf->parsed()) return mp::cli::run_keyframes(build_config(key_f));
        if (flows->parsed()) return mp::cli::run_inspect_flows(build_config(flow_f));
        if (grad->parsed()) return mp::cli::run_gradcheck(build_config(grad_f));
    } catch (const mp::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const mp::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const mp::ContractViolation& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
