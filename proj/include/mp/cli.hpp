#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mp/evalkit.hpp"
#include "mp/featex.hpp"
#include "mp/gradcheck.hpp"
#include "mp/io.hpp"
#include "mp/stimgen.hpp"
#include "mp/train.hpp"

namespace mp::cli {

namespace fs = std::filesystem;

inline std::vector<std::string> condition_list(const io::RunConfig& rc) {
    const std::string& s = rc.str("conditions");
    if (s.empty() || s == "all") return {};
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        MP_CONFIG_REQUIRE(!part.empty(), "conditions: empty list entry");
        stim::ConditionSpec::parse(part);
        out.push_back(part);
    }
    return out;
}

inline std::size_t job_count(const io::RunConfig& rc) {
    return std::max<std::size_t>(1, rc.size_of("jobs"));
}

// --- feature index ----------------------------------------------------------------
// Written by the feature extractor next to its MPT files so downstream
// commands can enumerate videos without touching the original dataset.

struct FeatureRow {
    std::string path;  // relative, without the .mpt suffix
    int label = 0;
    std::string video_id;
};

struct FeatureIndex {
    std::size_t grid_h = 0, grid_w = 0, channels = 0;
    std::uint64_t seed = 0;
    std::vector<std::pair<std::string, std::vector<FeatureRow>>> conditions;

    const std::vector<FeatureRow>* find(const std::string& name) const {
        for (const auto& [n, rows] : conditions)
            if (n == name) return &rows;
        return nullptr;
    }

    void save(const fs::path& path) const {
        nlohmann::json j;
        j["format"] = "mp-features-v1";
        j["grid_h"] = grid_h;
        j["grid_w"] = grid_w;
        j["channels"] = channels;
        j["seed"] = seed;
        auto jconds = nlohmann::json::array();
        for (const auto& [name, rows] : conditions) {
            nlohmann::json jc;
            jc["name"] = name;
            auto vids = nlohmann::json::array();
            for (const auto& r : rows)
                vids.push_back({{"path", r.path}, {"label", r.label},
                                {"video_id", r.video_id}});
            jc["videos"] = std::move(vids);
            jconds.push_back(std::move(jc));
        }
        j["conditions"] = std::move(jconds);
        std::ofstream os(path);
        if (!os) throw IoError("cannot open for writing: " + path.string());
        os << j.dump(1) << "\n";
    }

    static FeatureIndex load(const fs::path& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open feature index: " + path.string());
        nlohmann::json j;
        try {
            is >> j;
        } catch (const nlohmann::json::exception& e) {
            throw IoError("bad feature index " + path.string() + ": " + e.what());
        }
        try {
            MP_CONFIG_REQUIRE(j.value("format", "") == "mp-features-v1",
                              "not a feature index: " + path.string());
            FeatureIndex idx;
            idx.grid_h = j.at("grid_h").get<std::size_t>();
            idx.grid_w = j.at("grid_w").get<std::size_t>();
            idx.channels = j.at("channels").get<std::size_t>();
            idx.seed = j.at("seed").get<std::uint64_t>();
            for (const auto& jc : j.at("conditions")) {
                std::vector<FeatureRow> rows;
                for (const auto& v : jc.at("videos"))
                    rows.push_back({v.at("path").get<std::string>(),
                                    v.at("label").get<int>(),
                                    v.at("video_id").get<std::string>()});
                idx.conditions.emplace_back(jc.at("name").get<std::string>(),
                                            std::move(rows));
            }
            return idx;
        } catch (const nlohmann::json::exception& e) {
            throw IoError("bad feature index " + path.string() + ": " + e.what());
        }
    }
};

// --- gen ---------------------------------------------------------------------------

inline int run_gen(const io::RunConfig& rc, std::ostream& log = std::cout) {
    stim::BenchmarkOptions opts;
    opts.out_dir = rc.str("dataset");
    MP_CONFIG_REQUIRE(!rc.str("dataset").empty(), "gen: dataset path is empty");
    opts.classes = rc.size_of("classes");
    opts.per_class = rc.size_of("per_class");
    opts.seed = rc.seed_of("seed");
    opts.px = rc.size_of("px");
    opts.dot_radius = rc.dbl("dot_radius");
    opts.T = rc.size_of("t");
    opts.jitter = rc.dbl("jitter");
    opts.jobs = job_count(rc);
    opts.conditions = condition_list(rc);

    const fs::path manifest = stim::build_benchmark(opts);
    rc.write_echo(opts.out_dir / "config.txt");
    log << manifest.string() << "\n";
    return 0;
}

// --- featex ------------------------------------------------------------------------

namespace detail {

// An output is current when it postdates every file of its input directory.
inline bool up_to_date(const fs::path& out_path, const fs::path& in_dir) {
    std::error_code ec;
    const auto out_time = fs::last_write_time(out_path, ec);
    if (ec) return false;
    bool saw_input = false;
    for (const auto& entry : fs::directory_iterator(in_dir, ec)) {
        if (!entry.is_regular_file()) continue;
        saw_input = true;
        if (entry.last_write_time() > out_time) return false;
    }
    return !ec && saw_input;
}

}  // namespace detail

inline int run_featex(const io::RunConfig& rc, std::ostream& log = std::cout) {
    const fs::path dataset = rc.str("dataset");
    const fs::path out = rc.str("features");
    MP_CONFIG_REQUIRE(!rc.str("features").empty(), "featex: features path is empty");

    std::ifstream is(dataset / "manifest.json");
    if (!is) throw IoError("cannot open manifest: " + (dataset / "manifest.json").string());
    nlohmann::json man;
    try {
        is >> man;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad manifest: " + std::string(e.what()));
    }
    MP_CONFIG_REQUIRE(man.value("format", "") == "mp-manifest-v1",
                      "not a benchmark manifest: " + (dataset / "manifest.json").string());

    featex::PatchDescriptorConfig fcfg;
    fcfg.grid_h = rc.size_of("grid_h");
    fcfg.grid_w = rc.size_of("grid_w");
    fcfg.channels = rc.size_of("feat_channels");
    fcfg.seed = rc.seed_of("feat_seed");
    fcfg.validate();

    const auto want = condition_list(rc);
    struct Job {
        std::string cond;
        std::string rel;
        int label = 0;
    };
    std::vector<Job> todo;
    std::vector<std::string> cond_order;
    try {
        for (const auto& jc : man.at("conditions")) {
            const std::string name = jc.at("name").get<std::string>();
            if (!want.empty() && std::find(want.begin(), want.end(), name) == want.end())
                continue;
            cond_order.push_back(name);
            for (const auto& v : jc.at("videos"))
                todo.push_back(
                    {name, v.at("path").get<std::string>(), v.at("label").get<int>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad manifest: " + std::string(e.what()));
    }
    for (const auto& name : want)
        MP_CONFIG_REQUIRE(std::find(cond_order.begin(), cond_order.end(), name) !=
                              cond_order.end(),
                          "featex: condition '" + name + "' is not in the manifest");
    MP_CONFIG_REQUIRE(!todo.empty(), "featex: no videos match the requested conditions");

    fs::create_directories(out);
    enum class Outcome { done, skipped, failed };
    std::vector<Outcome> outcome(todo.size(), Outcome::failed);
    std::vector<std::string> error(todo.size());
    parallel_for(todo.size(), job_count(rc), [&](std::size_t i) {
        const Job& job = todo[i];
        const fs::path in_dir = dataset / job.rel;
        const fs::path out_path = out / (job.rel + ".mpt");
        try {
            if (detail::up_to_date(out_path, in_dir)) {
                outcome[i] = Outcome::skipped;
                return;
            }
            fs::create_directories(out_path.parent_path());
            const auto seq = featex::extract_features(in_dir, fcfg, job.rel, 1);
            featex::save_features(out_path, seq);
            outcome[i] = Outcome::done;
        } catch (const std::exception& e) {
            error[i] = e.what();
        }
    });

    FeatureIndex idx;
    idx.grid_h = fcfg.grid_h;
    idx.grid_w = fcfg.grid_w;
    idx.channels = fcfg.channels;
    idx.seed = fcfg.seed;
    for (const auto& name : cond_order) {
        std::vector<FeatureRow> rows;
        for (std::size_t i = 0; i < todo.size(); ++i)
            if (todo[i].cond == name && outcome[i] != Outcome::failed)
                rows.push_back({todo[i].rel, todo[i].label, todo[i].rel});
        idx.conditions.emplace_back(name, std::move(rows));
    }
    idx.save(out / "features_index.json");
    rc.write_echo(out / "config.txt");

    std::size_t done = 0, skipped = 0, failed = 0;
    for (std::size_t i = 0; i < todo.size(); ++i) {
        switch (outcome[i]) {
            case Outcome::done: ++done; break;
            case Outcome::skipped: ++skipped; break;
            case Outcome::failed:
                ++failed;
                log << "FAIL " << todo[i].rel << ": " << error[i] << "\n";
                break;
        }
    }
    log << "extracted " << done << ", up-to-date " << skipped << ", failed " << failed
        << "\n";
    return failed == 0 ? 0 : 1;
}

// --- shared loading ------------------------------------------------------------------

inline FeatureSequence load_clip(const fs::path& features_root, const FeatureRow& row,
                                 const fusion::ModelConfig& cfg) {
    auto seq = featex::load_features(features_root / (row.path + ".mpt"), row.video_id);
    MP_CONFIG_REQUIRE(seq.H == cfg.grid_h && seq.W == cfg.grid_w,
                      "clip " + row.path + ": grid " + std::to_string(seq.H) + "x" +
                          std::to_string(seq.W) + " does not match the model");
    MP_CONFIG_REQUIRE(seq.T == cfg.T, "clip " + row.path + ": has " +
                                          std::to_string(seq.T) + " frames, model expects " +
                                          std::to_string(cfg.T));
    return seq;
}

// Deterministic split: within each class, videos in path order go to
// validation at a fixed cadence of round(1/val_fraction).
inline std::pair<std::vector<FeatureRow>, std::vector<FeatureRow>> split_train_val(
    std::vector<FeatureRow> rows, double val_fraction) {
    MP_CONFIG_REQUIRE(val_fraction > 0.0 && val_fraction < 1.0,
                      "val_fraction must be inside (0, 1)");
    std::sort(rows.begin(), rows.end(),
              [](const FeatureRow& a, const FeatureRow& b) { return a.path < b.path; });
    const auto cadence =
        std::max<std::size_t>(2, std::size_t(std::llround(1.0 / val_fraction)));
    std::map<int, std::size_t> seen;
    std::pair<std::vector<FeatureRow>, std::vector<FeatureRow>> out;
    for (auto& row : rows) {
        const std::size_t k = seen[row.label]++;
        (k % cadence == 0 ? out.second : out.first).push_back(std::move(row));
    }
    MP_CONFIG_REQUIRE(!out.first.empty() && !out.second.empty(),
                      "split leaves an empty train or validation set");
    return out;
}

// --- train -------------------------------------------------------------------------

template <typename Real = float>
int run_train(const io::RunConfig& rc, std::ostream& log = std::cout) {
    const fusion::ModelConfig cfg = io::model_from_config(rc);
    const fs::path froot = rc.str("features");
    const fs::path out = rc.str("out");
    MP_CONFIG_REQUIRE(!rc.str("out").empty(), "train: out path is empty");

    const auto idx = FeatureIndex::load(froot / "features_index.json");
    const std::string cond = rc.str("train_condition");
    const auto* rows = idx.find(cond);
    MP_CONFIG_REQUIRE(rows != nullptr && !rows->empty(),
                      "train: no videos for condition '" + cond + "' in the feature index");

    auto [train_rows, val_rows] = split_train_val(*rows, rc.dbl("val_fraction"));
    const std::size_t jobs = job_count(rc);

    auto load_items = [&](const std::vector<FeatureRow>& src) {
        std::vector<train::TrainItem> items(src.size());
        std::vector<std::string> error(src.size());
        parallel_for(src.size(), jobs, [&](std::size_t i) {
            try {
                const auto seq = load_clip(froot, src[i], cfg);
                items[i] = train::make_item(src[i].video_id, src[i].label, seq, cfg);
            } catch (const std::exception& e) {
                error[i] = e.what();
            }
        });
        for (const auto& e : error)
            if (!e.empty()) throw IoError("train: " + e);
        return items;
    };
    const auto train_items = load_items(train_rows);
    const auto val_items = load_items(val_rows);
    log << "train " << train_items.size() << " clips, validate " << val_items.size()
        << " (" << cond << ")\n";

    fusion::MotionPerceiver<Real> model(cfg, rc.seed_of("seed"));
    train::TrainOptions topt;
    topt.epochs = rc.size_of("epochs");
    topt.batch_size = rc.size_of("batch_size");
    topt.lr = rc.dbl("lr");
    topt.weight_decay = rc.dbl("weight_decay");
    topt.seed = rc.seed_of("seed");
    topt.jobs = jobs;
    topt.out_dir = out;

    const auto result = train::train(model, train_items, val_items, topt);
    rc.write_echo(out / "config.txt");
    log << "best epoch " << result.best_epoch << " val_accuracy "
        << result.best_val_accuracy << "\n";
    log << result.checkpoint_path.string() << "\n";
    return 0;
}

// --- eval --------------------------------------------------------------------------

template <typename Real = float>
fusion::MotionPerceiver<Real> restore_model(const io::RunConfig& rc) {
    const fusion::ModelConfig cfg = io::model_from_config(rc);
    const fs::path ckpt = rc.str("checkpoint");
    MP_CONFIG_REQUIRE(!rc.str("checkpoint").empty(), "checkpoint path is required");
    fusion::MotionPerceiver<Real> model(cfg, 0);
    io::restore_params(io::read_checkpoint(ckpt), cfg, model.params());
    return model;
}

template <typename Real = float>
int run_eval(const io::RunConfig& rc, std::ostream& log = std::cout) {
    const auto model = restore_model<Real>(rc);
    const fusion::ModelConfig& cfg = model.config();
    const fs::path froot = rc.str("features");
    const fs::path out = rc.str("out");
    MP_CONFIG_REQUIRE(!rc.str("out").empty(), "eval: out path is empty");

    const auto idx = FeatureIndex::load(froot / "features_index.json");
    const auto want = condition_list(rc);
    struct Job {
        std::string cond;
        FeatureRow row;
    };
    std::vector<Job> todo;
    for (const auto& [name, rows] : idx.conditions) {
        if (!want.empty() && std::find(want.begin(), want.end(), name) == want.end())
            continue;
        for (const auto& row : rows) todo.push_back({name, row});
    }
    for (const auto& name : want)
        MP_CONFIG_REQUIRE(idx.find(name) != nullptr,
                          "eval: condition '" + name + "' is not in the feature index");
    MP_CONFIG_REQUIRE(!todo.empty(), "eval: no videos match the requested conditions");

    std::vector<eval::TrialRecord> records(todo.size());
    std::vector<std::string> error(todo.size());
    parallel_for(todo.size(), job_count(rc), [&](std::size_t i) {
        try {
            const auto seq = load_clip(froot, todo[i].row, cfg);
            const int pred = model.predict_label(fusion::prepare_video(seq, cfg));
            records[i] = {todo[i].row.video_id, todo[i].cond, todo[i].row.label, pred};
        } catch (const std::exception& e) {
            error[i] = e.what();
        }
    });
    for (const auto& e : error)
        if (!e.empty()) throw IoError("eval: " + e);

    fs::create_directories(out);
    {
        std::ofstream os(out / "trials.csv");
        if (!os) throw IoError("cannot write " + (out / "trials.csv").string());
        os << "video_id,condition,label,predicted\n";
        for (const auto& r : records)
            os << r.video_id << ',' << r.condition << ',' << r.label << ','
               << r.predicted << '\n';
    }

    const auto report = eval::condition_report(records);
    {
        std::ofstream os(out / "report.csv");
        if (!os) throw IoError("cannot write " + (out / "report.csv").string());
        os << report.to_csv();
    }
    {
        std::ofstream os(out / "report.json");
        if (!os) throw IoError("cannot write " + (out / "report.json").string());
        os << report.to_json().dump(1) << "\n";
    }

    if (!rc.str("human_ref").empty()) {
        const auto ref = eval::load_reference_json(rc.str("human_ref"));
        const auto [model_acc, ref_acc] = eval::paired_accuracies(report, ref);
        nlohmann::json ja;
        ja["n"] = model_acc.size();
        ja["pearson"] = nullptr;
        ja["spearman"] = nullptr;
        if (model_acc.size() >= 3) {
            if (auto r = eval::pearson_correlation(model_acc, ref_acc)) ja["pearson"] = *r;
            if (auto r = eval::spearman_correlation(model_acc, ref_acc))
                ja["spearman"] = *r;
        }
        std::ofstream os(out / "human_alignment.json");
        if (!os) throw IoError("cannot write " + (out / "human_alignment.json").string());
        os << ja.dump(1) << "\n";
        log << "human alignment: " << ja.dump() << "\n";
    }

    rc.write_echo(out / "config.txt");
    log << report.to_csv();
    return 0;
}

// --- keyframes -----------------------------------------------------------------------

template <typename Real = float>
int run_keyframes(const io::RunConfig& rc, std::ostream& log = std::cout) {
    const auto model = restore_model<Real>(rc);
    const fs::path froot = rc.str("features");
    const fs::path out = rc.str("out");
    MP_CONFIG_REQUIRE(!rc.str("out").empty(), "keyframes: out path is empty");
    const std::string video = rc.str("video");
    MP_CONFIG_REQUIRE(!video.empty(), "keyframes: set video=<index path>");

    const auto idx = FeatureIndex::load(froot / "features_index.json");
    const FeatureRow* row = nullptr;
    std::string cond;
    for (const auto& [name, rows] : idx.conditions) {
        for (const auto& r : rows)
            if (r.path == video) {
                row = &r;
                cond = name;
            }
    }
    MP_CONFIG_REQUIRE(row != nullptr,
                      "keyframes: video '" + video + "' is not in the feature index");

    const auto seq = load_clip(froot, *row, model.config());
    const auto xs = rc.sizes("keyframe_xs");
    const auto report = eval::keyframe_importance(model, seq, row->label, xs,
                                                  rc.size_of("keyframe_repeats"),
                                                  rc.seed_of("seed"), job_count(rc));

    fs::create_directories(out);
    nlohmann::json j = report.to_json();
    j["video"] = video;
    j["condition"] = cond;
    j["label"] = row->label;
    j["x_values"] = xs;
    j["repeats"] = rc.size_of("keyframe_repeats");
    const fs::path jpath = out / "keyframes.json";
    std::ofstream os(jpath);
    if (!os) throw IoError("cannot write " + jpath.string());
    os << j.dump(1) << "\n";
    rc.write_echo(out / "config.txt");
    log << jpath.string() << "\n";
    return 0;
}

// --- inspect_flows ---------------------------------------------------------------------

inline int run_inspect_flows(const io::RunConfig& rc, std::ostream& log = std::cout) {
    const fs::path froot = rc.str("features");
    const fs::path out = rc.str("out");
    MP_CONFIG_REQUIRE(!rc.str("out").empty(), "inspect_flows: out path is empty");
    const std::string video = rc.str("video");
    MP_CONFIG_REQUIRE(!video.empty(), "inspect_flows: set video=<mpt path or index path>");

    fs::path fpath = video;
    if (!fs::exists(fpath)) fpath = froot / (video + ".mpt");
    const auto seq = featex::load_features(fpath, video);
    const double tau = rc.dbl("tau");
    const double gamma = rc.dbl("gamma");
    const bool gamma_enabled = rc.flag("gamma_enabled");
    const bool ref0 = rc.flag("first_frame_ref_only");

    const flow::TransitionTable table(seq, tau);
    fs::create_directories(out);
    char buf[64];
    for (const std::size_t s : rc.sizes("strides")) {
        const auto df =
            flow::dense_flow(table, s, gamma, flow::kFlowFloor, gamma_enabled, ref0);
        io::save_tensor(out / ("flow_s" + std::to_string(s) + ".mpt"),
                        {df.T, df.N, df.row_dim()}, df.data);

        // One vector field per consecutive stride-s pair, referenced from the
        // pair's own start frame (or frame 0 under first_frame_ref_only).
        const fs::path cpath = out / ("flow_s" + std::to_string(s) + ".csv");
        std::ofstream os(cpath);
        if (!os) throw IoError("cannot write " + cpath.string());
        os << "t,patch_x,patch_y,dx,dy\n";
        for (std::size_t j = 0; j < df.steps; ++j) {
            const std::size_t t = j * s;
            const std::size_t ref = ref0 ? 0 : t;
            for (std::size_t n = 0; n < df.N; ++n) {
                const float* r = df.row(ref, n);
                os << t << ',' << n % seq.W << ',' << n / seq.W << ',';
                std::snprintf(buf, sizeof(buf), "%.9g,%.9g", double(r[j]),
                              double(r[df.steps + j]));
                os << buf << '\n';
            }
        }
        log << cpath.string() << "\n";
    }
    rc.write_echo(out / "config.txt");
    return 0;
}

// --- gradcheck -----------------------------------------------------------------------

namespace detail {

inline std::vector<double> rand_vec(std::size_t n, std::uint64_t seed, double lo = -2.0,
                                    double hi = 2.0) {
    Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

template <typename Body>
gradcheck::Case tensor_case(std::string name, std::vector<double> x0, ad::Shape shape,
                            Body body) {
    auto run = [x0 = std::move(x0), shape = std::move(shape), body]() {
        return gradcheck::check_tensor_fn(body, x0, shape);
    };
    return {std::move(name), 1e-5, std::move(run)};
}

template <typename Loss>
double store_check(nn::ParamStore<double>& ps, Loss loss) {
    return gradcheck::check_param_store(
        ps, [&](nn::ParamStore<double>& s) { return loss(s, true); },
        [&](nn::ParamStore<double>& s) { return loss(s, false); });
}

}  // namespace detail

// Central-difference checks for every differentiable operation, the layer
// helpers built from them, and the whole loss on a miniature model.
inline std::vector<gradcheck::Case> gradcheck_cases() {
    using ad::Graph;
    using ad::Tensor;
    using T = Tensor<double>;
    std::vector<gradcheck::Case> cases;
    const auto w6 = detail::rand_vec(6, 900);
    const auto w12 = detail::rand_vec(12, 901);

    auto halves = [](Graph<double>& g, T x) {
        return std::pair<T, T>(ad::slice_lastdim(x, 0, 6), ad::slice_lastdim(x, 6, 6));
    };
    cases.push_back(detail::tensor_case(
        "add", detail::rand_vec(12, 1), {12}, [halves, w6](Graph<double>& g, T x) {
            auto [a, b] = halves(g, x);
            return ad::sum_all(ad::mul(ad::add(a, b), g.constant({6}, w6)));
        }));
    cases.push_back(detail::tensor_case(
        "sub", detail::rand_vec(12, 2), {12}, [halves, w6](Graph<double>& g, T x) {
            auto [a, b] = halves(g, x);
            return ad::sum_all(ad::mul(ad::sub(a, b), g.constant({6}, w6)));
        }));
    cases.push_back(detail::tensor_case(
        "mul", detail::rand_vec(12, 3), {12}, [halves](Graph<double>& g, T x) {
            auto [a, b] = halves(g, x);
            return ad::sum_all(ad::mul(a, b));
        }));
    cases.push_back(detail::tensor_case(
        "affine", detail::rand_vec(6, 4), {6}, [w6](Graph<double>& g, T x) {
            return ad::sum_all(ad::mul(ad::affine(x, 1.7, -0.3), g.constant({6}, w6)));
        }));
    cases.push_back(detail::tensor_case(
        "sigmoid", detail::rand_vec(6, 5), {6}, [w6](Graph<double>& g, T x) {
            return ad::sum_all(ad::mul(ad::sigmoid(x), g.constant({6}, w6)));
        }));
    cases.push_back(detail::tensor_case(
        "tanh", detail::rand_vec(6, 6), {6}, [w6](Graph<double>& g, T x) {
            return ad::sum_all(ad::mul(ad::tanh_op(x), g.constant({6}, w6)));
        }));
    cases.push_back(detail::tensor_case(
        "gelu", detail::rand_vec(6, 7), {6}, [w6](Graph<double>& g, T x) {
            return ad::sum_all(ad::mul(ad::gelu(x), g.constant({6}, w6)));
        }));
    cases.push_back(detail::tensor_case(
        "log", detail::rand_vec(6, 8, 0.4, 2.5), {6}, [w6](Graph<double>& g, T x) {
            return ad::sum_all(ad::mul(ad::log_op(x), g.constant({6}, w6)));
        }));
    // Inputs stay away from the floor threshold so central differences never
    // straddle the cut.
    auto floored_input = detail::rand_vec(6, 9, 0.5, 2.0);
    for (std::size_t i = 1; i < floored_input.size(); i += 2)
        floored_input[i] = -floored_input[i];
    floored_input[2] = 0.01;
    cases.push_back(detail::tensor_case(
        "magnitude_floor", floored_input, {6}, [w6](Graph<double>& g, T x) {
            return ad::sum_all(
                ad::mul(ad::magnitude_floor(x, 0.25, 1e-6), g.constant({6}, w6)));
        }));
    cases.push_back(detail::tensor_case(
        "add_rowvec", detail::rand_vec(16, 10), {16}, [](Graph<double>& g, T x) {
            auto m = ad::reshape(ad::slice_lastdim(x, 0, 12), {3, 4});
            auto v = ad::slice_lastdim(x, 12, 4);
            return ad::sum_all(ad::mul(ad::add_rowvec(m, v), m));
        }));
    cases.push_back(detail::tensor_case(
        "div_rowvec", detail::rand_vec(16, 11, 0.5, 2.0), {16},
        [](Graph<double>& g, T x) {
            auto m = ad::reshape(ad::slice_lastdim(x, 0, 12), {3, 4});
            auto v = ad::slice_lastdim(x, 12, 4);
            return ad::sum_all(ad::mul(ad::div_rowvec(m, v), m));
        }));
    cases.push_back(detail::tensor_case(
        "reshape", detail::rand_vec(12, 12), {12}, [w12](Graph<double>& g, T x) {
            auto y = ad::reshape(x, {3, 4});
            return ad::sum_all(ad::mul(y, ad::reshape(g.constant({12}, w12), {3, 4})));
        }));
    cases.push_back(detail::tensor_case(
        "transpose_last2", detail::rand_vec(12, 13), {12}, [w12](Graph<double>& g, T x) {
            auto y = ad::transpose_last2(ad::reshape(x, {3, 4}));
            return ad::sum_all(ad::mul(y, ad::reshape(g.constant({12}, w12), {4, 3})));
        }));
    cases.push_back(detail::tensor_case(
        "concat_lastdim", detail::rand_vec(12, 14), {12}, [halves](Graph<double>& g, T x) {
            auto [a, b] = halves(g, x);
            auto y = ad::concat_lastdim(std::vector<T>{b, a});
            return ad::sum_all(ad::mul(y, y));
        }));
    cases.push_back(detail::tensor_case(
        "slice_lastdim", detail::rand_vec(12, 15), {12}, [](Graph<double>& g, T x) {
            auto y = ad::slice_lastdim(x, 3, 5);
            return ad::sum_all(ad::mul(y, y));
        }));
    cases.push_back(detail::tensor_case(
        "pad_lastdim", detail::rand_vec(6, 16), {6}, [](Graph<double>& g, T x) {
            auto y = ad::pad_lastdim(x, 9);
            return ad::sum_all(ad::mul(y, y));
        }));
    cases.push_back(detail::tensor_case(
        "matmul", detail::rand_vec(20, 17), {20}, [](Graph<double>& g, T x) {
            auto a = ad::reshape(ad::slice_lastdim(x, 0, 12), {3, 4});
            auto b = ad::reshape(ad::slice_lastdim(x, 12, 8), {4, 2});
            return ad::sum_all(ad::matmul(a, b));
        }));
    cases.push_back(detail::tensor_case(
        "matmul_nt", detail::rand_vec(20, 18), {20}, [](Graph<double>& g, T x) {
            auto a = ad::reshape(ad::slice_lastdim(x, 0, 12), {3, 4});
            auto b = ad::reshape(ad::slice_lastdim(x, 12, 8), {2, 4});
            return ad::sum_all(ad::matmul_nt(a, b));
        }));
    cases.push_back(detail::tensor_case(
        "matmul_tn", detail::rand_vec(20, 19), {20}, [](Graph<double>& g, T x) {
            auto a = ad::reshape(ad::slice_lastdim(x, 0, 12), {4, 3});
            auto b = ad::reshape(ad::slice_lastdim(x, 12, 8), {4, 2});
            return ad::sum_all(ad::matmul_tn(a, b));
        }));
    cases.push_back(detail::tensor_case(
        "softmax", detail::rand_vec(15, 20), {15}, [w12](Graph<double>& g, T x) {
            auto y = ad::softmax_lastdim(ad::reshape(x, {3, 5}), 0.7);
            std::vector<double> w(15);
            Rng rng(902);
            for (auto& v : w) v = rng.uniform(-2.0, 2.0);
            return ad::sum_all(ad::mul(y, g.constant({3, 5}, w)));
        }));
    cases.push_back(detail::tensor_case(
        "l2_normalize", detail::rand_vec(12, 21, 0.3, 2.0), {12},
        [w12](Graph<double>& g, T x) {
            auto y = ad::l2_normalize_lastdim(ad::reshape(x, {3, 4}));
            return ad::sum_all(ad::mul(y, ad::reshape(g.constant({12}, w12), {3, 4})));
        }));
    cases.push_back(detail::tensor_case(
        "layer_norm", detail::rand_vec(24, 22), {24}, [](Graph<double>& g, T x) {
            auto m = ad::reshape(ad::slice_lastdim(x, 0, 12), {2, 6});
            auto gain = ad::slice_lastdim(x, 12, 6);
            auto bias = ad::slice_lastdim(x, 18, 6);
            auto y = ad::layer_norm(m, gain, bias);
            return ad::sum_all(ad::mul(y, m));
        }));
    cases.push_back(detail::tensor_case(
        "sum_axis", detail::rand_vec(12, 23), {12}, [w6](Graph<double>& g, T x) {
            auto y = ad::sum_axis(ad::reshape(x, {2, 6}), 0);
            return ad::sum_all(ad::mul(y, g.constant({6}, w6)));
        }));
    cases.push_back(detail::tensor_case(
        "mean_axis", detail::rand_vec(12, 24), {12}, [](Graph<double>& g, T x) {
            auto y = ad::mean_axis(ad::reshape(x, {3, 4}), 1);
            return ad::sum_all(ad::mul(y, y));
        }));
    cases.push_back(detail::tensor_case(
        "sum_all", detail::rand_vec(9, 25), {9},
        [](Graph<double>& g, T x) { return ad::sum_all(ad::mul(x, x)); }));
    cases.push_back(detail::tensor_case(
        "mean_all", detail::rand_vec(9, 26), {9},
        [](Graph<double>& g, T x) { return ad::mean_all(ad::mul(x, x)); }));
    cases.push_back(detail::tensor_case(
        "gather_diag", detail::rand_vec(25, 27), {25}, [](Graph<double>& g, T x) {
            auto y = ad::gather_diag(ad::reshape(x, {5, 5}));
            return ad::sum_all(ad::mul(y, y));
        }));
    cases.push_back(detail::tensor_case(
        "cross_entropy", detail::rand_vec(12, 28), {12}, [](Graph<double>& g, T x) {
            return ad::cross_entropy_logits(ad::reshape(x, {4, 3}),
                                            std::vector<int>{0, 2, 1, 0});
        }));

    cases.push_back({"linear", 1e-5, []() {
        nn::ParamStore<double> ps;
        nn::declare_linear(ps, "lin", 3, 4, 777);
        const auto xv = detail::rand_vec(6, 81);
        const auto wv = detail::rand_vec(8, 82);
        return detail::store_check(ps, [&](nn::ParamStore<double>& s, bool grads) {
            ad::Graph<double> g;
            nn::Binder<double> P(g, s);
            auto y = nn::linear(P, "lin", g.constant({2, 3}, xv));
            auto l = ad::sum_all(ad::mul(y, g.constant({2, 4}, wv)));
            if (grads) {
                s.zero_grads();
                g.backward(l);
                P.harvest();
            }
            return g.value(l)[0];
        });
    }});
    cases.push_back({"attention_block", 1e-5, []() {
        nn::ParamStore<double> ps;
        nn::declare_attention_block(ps, "blk", 3, 3131);
        const auto xv = detail::rand_vec(12, 83);
        const auto wv = detail::rand_vec(12, 84);
        return detail::store_check(ps, [&](nn::ParamStore<double>& s, bool grads) {
            ad::Graph<double> g;
            nn::Binder<double> P(g, s);
            auto y = nn::attention_block(P, "blk", g.constant({4, 3}, xv));
            auto l = ad::sum_all(ad::mul(y, g.constant({4, 3}, wv)));
            if (grads) {
                s.zero_grads();
                g.backward(l);
                P.harvest();
            }
            return g.value(l)[0];
        });
    }});
    cases.push_back({"gru_cell", 1e-5, []() {
        nn::ParamStore<double> ps;
        nn::declare_gru(ps, "g", 3, 4, 424242);
        const auto xv = detail::rand_vec(6, 85);
        const auto hv = detail::rand_vec(8, 86);
        const auto wv = detail::rand_vec(8, 87);
        return detail::store_check(ps, [&](nn::ParamStore<double>& s, bool grads) {
            ad::Graph<double> g;
            nn::Binder<double> P(g, s);
            auto h1 = nn::gru_cell(P, "g", g.constant({2, 3}, xv), g.constant({2, 4}, hv));
            auto l = ad::sum_all(ad::mul(h1, g.constant({2, 4}, wv)));
            if (grads) {
                s.zero_grads();
                g.backward(l);
                P.harvest();
            }
            return g.value(l)[0];
        });
    }});

    cases.push_back({"end_to_end_loss", 1e-4, []() {
        fusion::ModelConfig cfg;
        cfg.num_classes = 2;
        cfg.T = 8;
        cfg.grid_h = 3;
        cfg.grid_w = 3;
        cfg.K = 2;
        cfg.B = 16;
        cfg.strides = {1};
        FeatureSequence clip;
        clip.T = cfg.T;
        clip.H = cfg.grid_h;
        clip.W = cfg.grid_w;
        clip.C = 4;
        clip.video_id = "gradcheck";
        clip.features.resize(clip.T * clip.N() * clip.C);
        Rng rng(107);
        for (auto& x : clip.features) x = float(rng.uniform(-1.0, 1.0));
        const fusion::VideoFlows v = fusion::prepare_video(clip, cfg);

        fusion::MotionPerceiver<double> model(cfg, 109);
        return detail::store_check(
            model.params(), [&](nn::ParamStore<double>& s, bool grads) {
                ad::Graph<double> g;
                nn::Binder<double> P(g, s);
                auto f = model.forward(P, v);
                auto l = model.losses(f, 1);
                if (grads) {
                    s.zero_grads();
                    g.backward(l.total);
                    P.harvest();
                }
                return l.weighted_total();
            });
    }});
    return cases;
}

inline int run_gradcheck(const io::RunConfig&, std::ostream& log = std::cout) {
    const auto cases = gradcheck_cases();
    std::size_t failed = 0;
    for (const auto& c : cases) {
        const double err = c.run();
        const bool ok = err <= c.tolerance;
        failed += ok ? 0 : 1;
        char line[128];
        std::snprintf(line, sizeof(line), "%-18s %.3e  tol %.0e  %s", c.name.c_str(),
                      err, c.tolerance, ok ? "PASS" : "FAIL");
        log << line << "\n";
    }
    if (failed == 0)
        log << "gradcheck: all " << cases.size() << " cases passed\n";
    else
        log << "gradcheck: " << failed << " of " << cases.size() << " cases FAILED\n";
    return failed == 0 ? 0 : 2;
}

}  // namespace mp::cli
