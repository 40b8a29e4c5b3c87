#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mp/fusion.hpp"
#include "mp/io.hpp"
#include "mp/optim.hpp"

namespace mp::train {

struct TrainItem {
    std::string video_id;
    int label = 0;
    fusion::VideoFlows flows;
    // Retained only when temporal augmentation must re-derive flows per epoch.
    std::shared_ptr<flow::TransitionTable> table;
};

inline TrainItem make_item(std::string video_id, int label, const FeatureSequence& fs,
                           const fusion::ModelConfig& cfg) {
    TrainItem item;
    item.video_id = std::move(video_id);
    item.label = label;
    auto tab = std::make_shared<flow::TransitionTable>(fs, cfg.tau);
    item.flows = fusion::video_flows_from_table(*tab, cfg);
    if (cfg.temporal_augmentation) item.table = std::move(tab);
    return item;
}

struct TrainOptions {
    std::size_t epochs = 40;
    std::size_t batch_size = 16;
    double lr = 1e-4;
    double weight_decay = 0.01;
    std::uint64_t seed = 1;
    std::size_t jobs = 1;
    std::filesystem::path out_dir;  // empty: no metrics/checkpoint files
    std::size_t bookkeep_limit = 64;
};

struct EpochStats {
    std::size_t epoch = 0;
    double loss = 0.0;
    double slot = 0.0;
    double flow = 0.0;
    double invar = 0.0;
    double fuse = 0.0;
    double lr = 0.0;
    double val_accuracy = 0.0;
    bool best = false;
};

struct TrainResult {
    std::vector<EpochStats> epochs;
    std::size_t best_epoch = 0;
    double best_val_accuracy = -1.0;
    std::map<std::string, int> best_train_predictions;
    std::filesystem::path checkpoint_path;
};

namespace detail {

inline std::string json_num(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

// Frame-order augmentation: an even coin picks full reversal, odd picks a
// random shuffle; drawn per video per epoch from its own seed stream.
inline std::vector<std::size_t> augmentation_perm(std::size_t T, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<std::size_t> perm(T);
    std::iota(perm.begin(), perm.end(), std::size_t(0));
    if (rng.below(2) == 0) {
        std::reverse(perm.begin(), perm.end());
    } else {
        rng.shuffle(perm);
    }
    return perm;
}

template <typename Real>
struct MemberRun {
    ad::Graph<Real> graph;
    std::optional<nn::Binder<Real>> binder;
    fusion::LossOut<Real> losses;
    std::string error;
};

}  // namespace detail

template <typename Real>
double accuracy(const fusion::MotionPerceiver<Real>& model, const std::vector<TrainItem>& items) {
    MP_REQUIRE(!items.empty(), "accuracy: empty item list");
    std::size_t hits = 0;
    for (const auto& it : items)
        if (model.predict_label(it.flows) == it.label) ++hits;
    return double(hits) / double(items.size());
}

// Deterministic minibatch training; saves the best checkpoint by validation
// fuse-head accuracy and appends one JSON line per epoch to metrics.jsonl.
template <typename Real>
TrainResult train(fusion::MotionPerceiver<Real>& model, const std::vector<TrainItem>& train_items,
                  const std::vector<TrainItem>& val_items, const TrainOptions& opts) {
    MP_CONFIG_REQUIRE(!train_items.empty(), "train: empty training set");
    MP_CONFIG_REQUIRE(!val_items.empty(), "train: empty validation set");
    MP_CONFIG_REQUIRE(opts.epochs >= 1 && opts.batch_size >= 1, "train: bad schedule");
    const fusion::ModelConfig& cfg = model.config();
    for (const auto& it : train_items) {
        MP_REQUIRE(it.label >= 0 && it.label < int(cfg.num_classes), "train: label out of range");
        if (cfg.temporal_augmentation)
            MP_REQUIRE(it.table != nullptr, "train: augmentation needs retained tables");
    }

    const bool emit = !opts.out_dir.empty();
    if (emit) std::filesystem::create_directories(opts.out_dir);
    const std::filesystem::path metrics_path = opts.out_dir / "metrics.jsonl";
    const std::filesystem::path ckpt_path = opts.out_dir / "checkpoint.mpck";

    const std::size_t steps_per_epoch =
        (train_items.size() + opts.batch_size - 1) / opts.batch_size;
    optim::AdamW<Real> opt;
    opt.lr0 = opts.lr;
    opt.weight_decay = opts.weight_decay;
    opt.cosine = true;
    opt.total_steps = opts.epochs * steps_per_epoch;

    auto& ps = model.params();
    TrainResult result;

    std::vector<std::size_t> order(train_items.size());
    std::iota(order.begin(), order.end(), std::size_t(0));

    for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(opts.seed, "epoch" + std::to_string(epoch)));
        shuffle_rng.shuffle(order);

        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = opt.current_lr();
        std::size_t counted = 0;

        for (std::size_t step = 0; step < steps_per_epoch; ++step) {
            const std::size_t lo = step * opts.batch_size;
            const std::size_t hi = std::min(lo + opts.batch_size, train_items.size());
            const std::size_t members = hi - lo;

            // Augmented flow variants are derived up front so worker
            // scheduling can never affect the draw.
            std::vector<const fusion::VideoFlows*> inputs(members);
            std::vector<fusion::VideoFlows> augmented(members);
            for (std::size_t i = 0; i < members; ++i) {
                const TrainItem& item = train_items[order[lo + i]];
                if (cfg.temporal_augmentation) {
                    const auto perm = detail::augmentation_perm(
                        cfg.T, derive_seed(opts.seed, "aug" + std::to_string(epoch) + ":" +
                                                          item.video_id));
                    augmented[i] = fusion::video_flows_from_table(item.table->permuted(perm), cfg);
                    inputs[i] = &augmented[i];
                } else {
                    inputs[i] = &item.flows;
                }
            }

            std::vector<std::unique_ptr<detail::MemberRun<Real>>> runs(members);
            parallel_for(members, opts.jobs, [&](std::size_t i) {
                auto run = std::make_unique<detail::MemberRun<Real>>();
                try {
                    run->binder.emplace(run->graph, ps);
                    auto f = model.forward(*run->binder, *inputs[i]);
                    run->losses = model.losses(f, train_items[order[lo + i]].label);
                    run->graph.backward(run->losses.total);
                } catch (const std::exception& e) {
                    run->error = e.what();
                }
                runs[i] = std::move(run);
            });

            for (std::size_t i = 0; i < members; ++i) {
                if (runs[i]->error.empty()) continue;
                std::vector<std::string> ids;
                for (std::size_t j = 0; j < members; ++j)
                    ids.push_back(train_items[order[lo + j]].video_id);
                if (emit) {
                    std::ofstream os(opts.out_dir / "divergence.json");
                    os << "{\"epoch\": " << epoch << ", \"step\": " << step << ", \"videos\": [";
                    for (std::size_t j = 0; j < ids.size(); ++j)
                        os << (j ? ", " : "") << '"' << ids[j] << '"';
                    os << "], \"error\": \"" << runs[i]->error << "\"}\n";
                }
                throw ContractViolation("training diverged at epoch " + std::to_string(epoch) +
                                        " step " + std::to_string(step) + ": " + runs[i]->error);
            }

            ps.zero_grads();
            const Real member_scale = Real(1) / Real(members);
            for (std::size_t i = 0; i < members; ++i) {
                runs[i]->binder->harvest(member_scale);
                stats.loss += runs[i]->losses.weighted_total();
                stats.slot += runs[i]->losses.slot;
                stats.flow += runs[i]->losses.flow;
                stats.invar += runs[i]->losses.invar;
                stats.fuse += runs[i]->losses.fuse;
                ++counted;
            }
            opt.step(ps);
        }

        stats.loss /= double(counted);
        stats.slot /= double(counted);
        stats.flow /= double(counted);
        stats.invar /= double(counted);
        stats.fuse /= double(counted);
        stats.val_accuracy = accuracy(model, val_items);

        std::map<std::string, int> predictions;
        if (stats.val_accuracy > result.best_val_accuracy) {
            stats.best = true;
            result.best_val_accuracy = stats.val_accuracy;
            result.best_epoch = epoch;
            const std::size_t sample = std::min(opts.bookkeep_limit, train_items.size());
            for (std::size_t i = 0; i < sample; ++i)
                predictions[train_items[i].video_id] = model.predict_label(train_items[i].flows);
            result.best_train_predictions = predictions;
            if (emit) {
                std::map<std::string, std::string> extra;
                extra["train.epoch"] = std::to_string(epoch);
                extra["train.seed"] = std::to_string(opts.seed);
                extra["train.val_accuracy"] = detail::json_num(stats.val_accuracy);
                io::write_checkpoint(ckpt_path, cfg, ps, extra);
                result.checkpoint_path = ckpt_path;
            }
        }

        if (emit) {
            std::ofstream os(metrics_path, std::ios::app);
            if (!os) throw IoError("cannot append metrics: " + metrics_path.string());
            os << "{\"epoch\": " << epoch << ", \"loss\": " << detail::json_num(stats.loss)
               << ", \"slot\": " << detail::json_num(stats.slot)
               << ", \"flow\": " << detail::json_num(stats.flow)
               << ", \"invar\": " << detail::json_num(stats.invar)
               << ", \"fuse\": " << detail::json_num(stats.fuse)
               << ", \"lr\": " << detail::json_num(stats.lr)
               << ", \"val_accuracy\": " << detail::json_num(stats.val_accuracy)
               << ", \"best\": " << (stats.best ? "true" : "false");
            if (stats.best) {
                os << ", \"train_predictions\": {";
                bool first = true;
                for (const auto& [id, pred] : predictions) {
                    os << (first ? "" : ", ") << '"' << id << "\": " << pred;
                    first = false;
                }
                os << '}';
            }
            os << "}\n";
        }
        result.epochs.push_back(stats);
    }
    return result;
}

}  // namespace mp::train
