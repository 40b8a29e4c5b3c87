#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mp/common.hpp"
#include "mp/featseq.hpp"
#include "mp/fusion.hpp"
#include "mp/stimgen.hpp"

namespace mp::eval {

struct TrialRecord {
    std::string video_id;
    std::string condition;
    int label = 0;
    int predicted = -1;

    bool correct() const { return label == predicted; }
};

// Empty record sets have no accuracy; callers must handle the undefined case
// rather than reading a silent zero.
inline std::optional<double> top1_accuracy(const std::vector<TrialRecord>& records) {
    if (records.empty()) return std::nullopt;
    std::size_t hit = 0;
    for (const auto& r : records) hit += r.correct();
    return double(hit) / double(records.size());
}

// --- correlations ---------------------------------------------------------------

inline std::optional<double> pearson_correlation(const std::vector<double>& x,
                                                 const std::vector<double>& y) {
    MP_CONFIG_REQUIRE(x.size() == y.size(), "correlation: length mismatch");
    MP_CONFIG_REQUIRE(x.size() >= 3, "correlation: need at least three points");
    const double n = double(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0 || syy == 0) return std::nullopt;
    return sxy / std::sqrt(sxx * syy);
}

namespace detail {

// Ranks with ties sharing the average rank of their run.
inline std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double avg = 0.5 * double(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace detail

inline std::optional<double> spearman_correlation(const std::vector<double>& x,
                                                  const std::vector<double>& y) {
    MP_CONFIG_REQUIRE(x.size() == y.size(), "correlation: length mismatch");
    MP_CONFIG_REQUIRE(x.size() >= 3, "correlation: need at least three points");
    return pearson_correlation(detail::ranks(x), detail::ranks(y));
}

// --- error consistency -------------------------------------------------------------

// Two-observer agreement beyond chance on per-trial correctness: c_obs is the
// observed agreement rate, c_exp the rate two independent observers with the
// same accuracies would show, and kappa their normalized difference.
inline double error_consistency(const std::vector<TrialRecord>& a,
                                const std::vector<TrialRecord>& b) {
    MP_REQUIRE(a.size() == b.size(), "error_consistency: trial count mismatch");
    MP_REQUIRE(!a.empty(), "error_consistency: empty trial sets");
    std::size_t agree = 0, hits_a = 0, hits_b = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        MP_REQUIRE(a[i].video_id == b[i].video_id && a[i].condition == b[i].condition,
                   "error_consistency: trial sets are not aligned");
        agree += a[i].correct() == b[i].correct();
        hits_a += a[i].correct();
        hits_b += b[i].correct();
    }
    const double n = double(a.size());
    const double c_obs = double(agree) / n;
    const double pa = double(hits_a) / n, pb = double(hits_b) / n;
    const double c_exp = pa * pb + (1.0 - pa) * (1.0 - pb);
    if (c_exp == 1.0) return 1.0;
    return (c_obs - c_exp) / (1.0 - c_exp);
}

// --- condition report ----------------------------------------------------------------

struct ConditionRow {
    std::string condition;
    double accuracy = 0;
    std::optional<double> stderr_across_classes;
    std::size_t n = 0;
};

struct ConditionReport {
    std::vector<ConditionRow> rows;  // sorted by condition name

    std::string to_csv() const {
        std::ostringstream os;
        os << "condition,accuracy,stderr_across_classes,n\n";
        char buf[64];
        for (const auto& r : rows) {
            os << r.condition << ',';
            std::snprintf(buf, sizeof(buf), "%.17g", r.accuracy);
            os << buf << ',';
            if (r.stderr_across_classes) {
                std::snprintf(buf, sizeof(buf), "%.17g", *r.stderr_across_classes);
                os << buf;
            }
            os << ',' << r.n << '\n';
        }
        return os.str();
    }

    static ConditionReport from_csv(const std::string& text) {
        std::istringstream is(text);
        std::string line;
        MP_CONFIG_REQUIRE(std::getline(is, line) &&
                              line == "condition,accuracy,stderr_across_classes,n",
                          "report csv: bad header");
        ConditionReport rep;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            std::vector<std::string> cols;
            std::size_t start = 0;
            for (int k = 0; k < 3; ++k) {
                const auto comma = line.find(',', start);
                MP_CONFIG_REQUIRE(comma != std::string::npos, "report csv: missing column");
                cols.push_back(line.substr(start, comma - start));
                start = comma + 1;
            }
            cols.push_back(line.substr(start));
            ConditionRow row;
            row.condition = cols[0];
            row.accuracy = std::stod(cols[1]);
            if (!cols[2].empty()) row.stderr_across_classes = std::stod(cols[2]);
            row.n = std::size_t(std::stoull(cols[3]));
            rep.rows.push_back(std::move(row));
        }
        return rep;
    }

    nlohmann::json to_json() const {
        auto arr = nlohmann::json::array();
        for (const auto& r : rows) {
            nlohmann::json jr;
            jr["condition"] = r.condition;
            jr["accuracy"] = r.accuracy;
            if (r.stderr_across_classes)
                jr["stderr_across_classes"] = *r.stderr_across_classes;
            else
                jr["stderr_across_classes"] = nullptr;
            jr["n"] = r.n;
            arr.push_back(std::move(jr));
        }
        return arr;
    }
};

inline ConditionReport condition_report(const std::vector<TrialRecord>& records) {
    MP_CONFIG_REQUIRE(!records.empty(), "condition_report: no records");
    std::map<std::string, std::vector<const TrialRecord*>> by_cond;
    for (const auto& r : records) {
        stim::ConditionSpec::parse(r.condition);
        by_cond[r.condition].push_back(&r);
    }

    ConditionReport rep;
    for (const auto& [cond, trials] : by_cond) {
        ConditionRow row;
        row.condition = cond;
        row.n = trials.size();
        std::size_t hit = 0;
        std::map<int, std::pair<std::size_t, std::size_t>> by_class;  // hits, total
        for (const auto* t : trials) {
            hit += t->correct();
            auto& [h, n] = by_class[t->label];
            h += t->correct();
            ++n;
        }
        row.accuracy = double(hit) / double(trials.size());
        if (by_class.size() >= 2) {
            std::vector<double> accs;
            for (const auto& [cls, hn] : by_class)
                accs.push_back(double(hn.first) / double(hn.second));
            double mean = 0;
            for (const double a : accs) mean += a;
            mean /= double(accs.size());
            double ss = 0;
            for (const double a : accs) ss += (a - mean) * (a - mean);
            row.stderr_across_classes =
                std::sqrt(ss / double(accs.size() - 1)) / std::sqrt(double(accs.size()));
        }
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

// Accuracy reference keyed by condition name, e.g. externally collected
// behavioral results, for correlating against model reports.
inline std::map<std::string, double> load_reference_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open reference file: " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad reference json " + path.string() + ": " + e.what());
    }
    MP_CONFIG_REQUIRE(j.is_object(), "reference json must map condition names to accuracies");
    std::map<std::string, double> out;
    for (const auto& [key, val] : j.items()) {
        stim::ConditionSpec::parse(key);
        MP_CONFIG_REQUIRE(val.is_number(), "reference json: '" + key + "' is not a number");
        out[key] = val.get<double>();
    }
    return out;
}

// Paired accuracy vectors over the conditions present in both the report and
// the reference, sorted by condition name.
inline std::pair<std::vector<double>, std::vector<double>> paired_accuracies(
    const ConditionReport& report, const std::map<std::string, double>& reference) {
    std::pair<std::vector<double>, std::vector<double>> out;
    for (const auto& row : report.rows) {
        const auto it = reference.find(row.condition);
        if (it == reference.end()) continue;
        out.first.push_back(row.accuracy);
        out.second.push_back(it->second);
    }
    return out;
}

// --- key-frame importance ---------------------------------------------------------------

// Frames listed in `which` are overwritten in ascending order by a copy of
// the previous frame (the first frame takes its successor), so replacing
// every frame after the first freezes the whole clip at frame 0.
inline FeatureSequence duplicate_frames(const FeatureSequence& fs,
                                        std::vector<std::size_t> which) {
    fs.validate();
    MP_REQUIRE(which.empty() || fs.T >= 2, "duplicate_frames: single-frame clip");
    std::sort(which.begin(), which.end());
    FeatureSequence out = fs;
    const std::size_t row = fs.N() * fs.C;
    for (const std::size_t t : which) {
        MP_REQUIRE(t < fs.T, "duplicate_frames: frame index out of range");
        const std::size_t src = t == 0 ? 1 : t - 1;
        std::copy_n(out.features.data() + src * row, row, out.features.data() + t * row);
    }
    return out;
}

struct KeyframeReport {
    double base_score = 0;
    std::vector<double> importance;      // mean true-class score drop per frame
    std::vector<std::size_t> counts;     // perturbation draws touching each frame

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["base_score"] = base_score;
        j["importance"] = importance;
        j["counts"] = counts;
        return j;
    }
};

namespace detail {

template <typename Real>
double true_class_score(const fusion::MotionPerceiver<Real>& model,
                        const fusion::VideoFlows& flows, int label) {
    std::vector<Real> logits;
    model.predict_label(flows, &logits);
    const Real top = *std::max_element(logits.begin(), logits.end());
    double denom = 0;
    for (const Real l : logits) denom += std::exp(double(l - top));
    return std::exp(double(logits[std::size_t(label)] - top)) / denom;
}

}  // namespace detail

// Replaces X random frames with their predecessors, runs the model, and
// averages the true-class score drop over every draw that touched a frame.
template <typename Real>
KeyframeReport keyframe_importance(const fusion::MotionPerceiver<Real>& model,
                                   const FeatureSequence& fs, int label,
                                   const std::vector<std::size_t>& x_values,
                                   std::size_t repeats, std::uint64_t seed,
                                   std::size_t jobs = 1) {
    fs.validate();
    const fusion::ModelConfig& cfg = model.config();
    MP_CONFIG_REQUIRE(fs.T == cfg.T, "keyframe_importance: clip length mismatch");
    MP_CONFIG_REQUIRE(label >= 0 && std::size_t(label) < cfg.num_classes,
                      "keyframe_importance: label out of range");
    for (const std::size_t x : x_values)
        MP_CONFIG_REQUIRE(x < fs.T,
                          "keyframe_importance: cannot replace " + std::to_string(x) +
                              " of " + std::to_string(fs.T) + " frames");

    KeyframeReport rep;
    rep.base_score = detail::true_class_score(model, fusion::prepare_video(fs, cfg), label);
    rep.importance.assign(fs.T, 0.0);
    rep.counts.assign(fs.T, 0);

    struct Draw {
        std::vector<std::size_t> which;
        double drop = 0;
    };
    std::vector<Draw> draws(x_values.size() * repeats);
    parallel_for(draws.size(), jobs, [&](std::size_t i) {
        const std::size_t x = x_values[i / repeats];
        Draw& d = draws[i];
        if (x == 0) return;
        Rng rng(derive_seed(seed, "keyframe:" + std::to_string(i)));
        std::vector<std::size_t> all(fs.T);
        std::iota(all.begin(), all.end(), std::size_t(0));
        rng.shuffle(all);
        d.which.assign(all.begin(), all.begin() + std::ptrdiff_t(x));
        const auto perturbed = duplicate_frames(fs, d.which);
        const double score =
            detail::true_class_score(model, fusion::prepare_video(perturbed, cfg), label);
        d.drop = rep.base_score - score;
    });

    for (const auto& d : draws)
        for (const std::size_t t : d.which) {
            rep.importance[t] += d.drop;
            rep.counts[t] += 1;
        }
    for (std::size_t t = 0; t < fs.T; ++t)
        if (rep.counts[t] > 0) rep.importance[t] /= double(rep.counts[t]);
    return rep;
}

}  // namespace mp::eval
