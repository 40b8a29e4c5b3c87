#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mp/cli.hpp"

namespace fsys = std::filesystem;
using mp::cli::FeatureIndex;
using mp::cli::FeatureRow;
using mp::io::RunConfig;

namespace {

std::string slurp(const fsys::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

}  // namespace

TEST_CASE("condition list accepts 'all' and validates names", "[cli]") {
    RunConfig rc;
    REQUIRE(mp::cli::condition_list(rc).empty());  // default "all"
    rc.set("conditions", "RGB,J-6P,SP-8P-1LT");
    const auto got = mp::cli::condition_list(rc);
    REQUIRE(got == std::vector<std::string>{"RGB", "J-6P", "SP-8P-1LT"});

    rc.set("conditions", "J-7P");
    REQUIRE_THROWS_AS(mp::cli::condition_list(rc), mp::ConfigError);
    rc.set("conditions", "RGB,,J-6P");
    REQUIRE_THROWS_AS(mp::cli::condition_list(rc), mp::ConfigError);
}

TEST_CASE("train validation split runs per class at a fixed cadence", "[cli]") {
    std::vector<FeatureRow> rows;
    for (int c = 0; c < 2; ++c)
        for (int i = 7; i >= 0; --i) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "%c%02d", 'a' + c, i);
            rows.push_back({buf, c, buf});
        }

    auto [train, val] = mp::cli::split_train_val(rows, 0.25);
    REQUIRE(train.size() == 12);
    REQUIRE(val.size() == 4);
    std::vector<std::string> val_paths;
    for (const auto& r : val) val_paths.push_back(r.path);
    REQUIRE(val_paths == std::vector<std::string>{"a00", "a04", "b00", "b04"});

    // Input order does not matter: the split is keyed on sorted paths.
    std::reverse(rows.begin(), rows.end());
    auto [train2, val2] = mp::cli::split_train_val(rows, 0.25);
    REQUIRE(val2.size() == val.size());
    for (std::size_t i = 0; i < val.size(); ++i) REQUIRE(val2[i].path == val[i].path);

    auto [t3, v3] = mp::cli::split_train_val(rows, 0.5);
    REQUIRE(v3.size() == 8);

    REQUIRE_THROWS_AS(mp::cli::split_train_val(rows, 0.0), mp::ConfigError);
    REQUIRE_THROWS_AS(mp::cli::split_train_val(rows, 1.0), mp::ConfigError);
    std::vector<FeatureRow> lone = {{"x", 0, "x"}};
    REQUIRE_THROWS_AS(mp::cli::split_train_val(lone, 0.25), mp::ConfigError);
}

TEST_CASE("feature index round trips through json", "[cli]") {
    const auto dir = fsys::temp_directory_path() / "mp_cli_index";
    fsys::create_directories(dir);

    FeatureIndex idx;
    idx.grid_h = 4;
    idx.grid_w = 5;
    idx.channels = 16;
    idx.seed = 99;
    idx.conditions.emplace_back(
        "RGB", std::vector<FeatureRow>{{"RGB/sit_down/0000", 0, "v0"},
                                       {"RGB/stand_up/0000", 1, "v1"}});
    idx.conditions.emplace_back("J-6P",
                                std::vector<FeatureRow>{{"J-6P/sit_down/0000", 0, "v2"}});
    idx.save(dir / "features_index.json");

    const auto back = FeatureIndex::load(dir / "features_index.json");
    REQUIRE(back.grid_h == 4);
    REQUIRE(back.grid_w == 5);
    REQUIRE(back.channels == 16);
    REQUIRE(back.seed == 99);
    REQUIRE(back.conditions.size() == 2);
    REQUIRE(back.conditions[0].first == "RGB");
    REQUIRE(back.conditions[0].second.size() == 2);
    REQUIRE(back.conditions[0].second[1].label == 1);
    REQUIRE(back.find("J-6P") != nullptr);
    REQUIRE(back.find("SP-4P-1LT") == nullptr);

    {
        std::ofstream os(dir / "bad.json");
        os << R"({"format": "something-else"})";
    }
    REQUIRE_THROWS_AS(FeatureIndex::load(dir / "bad.json"), mp::ConfigError);
    REQUIRE_THROWS_AS(FeatureIndex::load(dir / "absent.json"), mp::IoError);
    fsys::remove_all(dir);
}

TEST_CASE("pipeline commands chain into coherent artifacts", "[cli]") {
    const auto dir = fsys::temp_directory_path() / "mp_cli_pipe";
    fsys::remove_all(dir);
    fsys::create_directories(dir);
    std::ostringstream sink;

    RunConfig rc;
    rc.set("dataset", (dir / "bench").string());
    rc.set("features", (dir / "feat").string());
    rc.set("classes", "2");
    rc.set("per_class", "3");
    rc.set("px", "64");
    rc.set("t", "8");
    rc.set("seed", "19");
    rc.set("conditions", "RGB,J-6P");
    rc.set("grid_h", "4");
    rc.set("grid_w", "4");
    rc.set("feat_channels", "16");
    rc.set("num_classes", "2");
    rc.set("k", "2");
    rc.set("b", "16");
    rc.set("strides", "1,2");
    rc.set("epochs", "2");
    rc.set("batch_size", "4");
    rc.set("lr", "1e-3");
    rc.set("val_fraction", "0.34");

    REQUIRE(mp::cli::run_gen(rc, sink) == 0);
    REQUIRE(fsys::exists(dir / "bench" / "manifest.json"));
    REQUIRE(fsys::exists(dir / "bench" / "config.txt"));

    REQUIRE(mp::cli::run_featex(rc, sink) == 0);
    const auto idx = FeatureIndex::load(dir / "feat" / "features_index.json");
    REQUIRE(idx.conditions.size() == 2);
    REQUIRE(idx.conditions[0].second.size() == 6);
    const auto seq = mp::featex::load_features(
        dir / "feat" / (idx.conditions[0].second[0].path + ".mpt"));
    REQUIRE(seq.T == 8);
    REQUIRE(seq.H == 4);
    REQUIRE(seq.C == 16);

    // A rerun with nothing changed skips every clip.
    std::ostringstream rerun_log;
    REQUIRE(mp::cli::run_featex(rc, rerun_log) == 0);
    REQUIRE(rerun_log.str().find("extracted 0, up-to-date 12, failed 0") !=
            std::string::npos);

    rc.set("out", (dir / "run").string());
    REQUIRE(mp::cli::run_train(rc, sink) == 0);
    REQUIRE(fsys::exists(dir / "run" / "checkpoint.mpck"));
    REQUIRE(fsys::exists(dir / "run" / "metrics.jsonl"));
    REQUIRE(fsys::exists(dir / "run" / "config.txt"));

    rc.set("checkpoint", (dir / "run" / "checkpoint.mpck").string());
    rc.set("out", (dir / "ev").string());
    REQUIRE(mp::cli::run_eval(rc, sink) == 0);
    const auto report =
        mp::eval::ConditionReport::from_csv(slurp(dir / "ev" / "report.csv"));
    REQUIRE(report.rows.size() == 2);
    for (const auto& row : report.rows) {
        REQUIRE(row.n == 6);
        REQUIRE(row.accuracy >= 0.0);
        REQUIRE(row.accuracy <= 1.0);
    }
    {
        std::istringstream trials(slurp(dir / "ev" / "trials.csv"));
        std::string line;
        std::size_t lines = 0;
        while (std::getline(trials, line))
            if (!line.empty()) ++lines;
        REQUIRE(lines == 13);
    }

    // The echoed config reproduces the evaluation bit for bit.
    const std::string first_report = slurp(dir / "ev" / "report.csv");
    RunConfig echoed;
    echoed.load_file(dir / "ev" / "config.txt");
    REQUIRE(mp::cli::run_eval(echoed, sink) == 0);
    REQUIRE(slurp(dir / "ev" / "report.csv") == first_report);

    // Filtering narrows the report; unknown conditions are refused.
    rc.set("conditions", "J-6P");
    rc.set("out", (dir / "ev2").string());
    REQUIRE(mp::cli::run_eval(rc, sink) == 0);
    const auto narrow =
        mp::eval::ConditionReport::from_csv(slurp(dir / "ev2" / "report.csv"));
    REQUIRE(narrow.rows.size() == 1);
    REQUIRE(narrow.rows[0].condition == "J-6P");
    rc.set("conditions", "SP-4P-1LT");
    REQUIRE_THROWS_AS(mp::cli::run_eval(rc, sink), mp::ConfigError);
    rc.set("conditions", "RGB,J-6P");

    {
        std::ofstream os(dir / "human.json");
        os << R"({"RGB": 0.97, "J-6P": 0.69})";
    }
    rc.set("human_ref", (dir / "human.json").string());
    rc.set("out", (dir / "ev3").string());
    REQUIRE(mp::cli::run_eval(rc, sink) == 0);
    REQUIRE(fsys::exists(dir / "ev3" / "human_alignment.json"));
    rc.set("human_ref", "");

    const auto& probe = idx.conditions[1].second[1];
    rc.set("video", probe.path);
    rc.set("keyframe_xs", "1,4");
    rc.set("keyframe_repeats", "3");
    rc.set("out", (dir / "kf").string());
    REQUIRE(mp::cli::run_keyframes(rc, sink) == 0);
    {
        std::ifstream is(dir / "kf" / "keyframes.json");
        nlohmann::json j;
        is >> j;
        REQUIRE(j.at("importance").size() == 8);
        REQUIRE(j.at("video").get<std::string>() == probe.path);
        REQUIRE(j.at("label").get<int>() == probe.label);
    }

    rc.set("out", (dir / "fl").string());
    REQUIRE(mp::cli::run_inspect_flows(rc, sink) == 0);
    const auto flow1 = mp::io::load_tensor(dir / "fl" / "flow_s1.mpt");
    REQUIRE(flow1.dims == std::vector<std::size_t>{8, 16, 14});
    {
        std::istringstream csv(slurp(dir / "fl" / "flow_s1.csv"));
        std::string line;
        std::size_t lines = 0;
        while (std::getline(csv, line))
            if (!line.empty()) ++lines;
        REQUIRE(lines == 1 + 7 * 16);
    }
    REQUIRE(fsys::exists(dir / "fl" / "flow_s2.mpt"));

    // A checkpoint cannot drive a model built under different settings.
    rc.set("k", "3");
    rc.set("out", (dir / "ev4").string());
    REQUIRE_THROWS_AS(mp::cli::run_eval(rc, sink), mp::ConfigError);

    fsys::remove_all(dir);
}

TEST_CASE("feature extraction isolates per-clip failures", "[cli]") {
    const auto dir = fsys::temp_directory_path() / "mp_cli_fail";
    fsys::remove_all(dir);
    fsys::create_directories(dir);
    std::ostringstream sink;

    RunConfig rc;
    rc.set("dataset", (dir / "bench").string());
    rc.set("features", (dir / "feat").string());
    rc.set("classes", "2");
    rc.set("per_class", "2");
    rc.set("px", "64");
    rc.set("t", "8");
    rc.set("seed", "7");
    rc.set("conditions", "J-6P");
    rc.set("grid_h", "4");
    rc.set("grid_w", "4");
    rc.set("feat_channels", "16");
    REQUIRE(mp::cli::run_gen(rc, sink) == 0);

    const auto broken = dir / "bench" / "J-6P" / "stand_up" / "0001" / "frame_03.png";
    REQUIRE(fsys::exists(broken));
    {
        std::ofstream os(broken, std::ios::binary | std::ios::trunc);
        os << "this is not a png";
    }

    std::ostringstream log;
    REQUIRE(mp::cli::run_featex(rc, log) == 1);
    REQUIRE(log.str().find("FAIL J-6P/stand_up/0001") != std::string::npos);
    REQUIRE(log.str().find("failed 1") != std::string::npos);
    const auto idx = FeatureIndex::load(dir / "feat" / "features_index.json");
    REQUIRE(idx.find("J-6P")->size() == 3);

    // Regenerating the dataset repairs the clip; extraction then completes.
    REQUIRE(mp::cli::run_gen(rc, sink) == 0);
    std::ostringstream log2;
    REQUIRE(mp::cli::run_featex(rc, log2) == 0);
    const auto repaired = FeatureIndex::load(dir / "feat" / "features_index.json");
    REQUIRE(repaired.find("J-6P") != nullptr);
    REQUIRE(repaired.find("J-6P")->size() == 4);
    fsys::remove_all(dir);
}

TEST_CASE("gradient audit passes every registered case", "[cli]") {
    for (const auto& c : mp::cli::gradcheck_cases()) {
        INFO(c.name);
        REQUIRE(c.run() <= c.tolerance);
    }
}
