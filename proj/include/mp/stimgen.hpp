#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "mp/common.hpp"
#include "mp/png.hpp"

namespace mp::stim {

// --- action vocabulary ------------------------------------------------------

enum class Action { sit_down, stand_up, jump_up, kick, arm_circles, wave };

inline constexpr std::size_t kNumActions = 6;

inline const char* action_name(Action a) {
    switch (a) {
        case Action::sit_down: return "sit_down";
        case Action::stand_up: return "stand_up";
        case Action::jump_up: return "jump_up";
        case Action::kick: return "kick";
        case Action::arm_circles: return "arm_circles";
        case Action::wave: return "wave";
    }
    throw ConfigError("unknown action code");
}

inline Action action_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kNumActions; ++i)
        if (name == action_name(Action(i))) return Action(i);
    throw ConfigError("unknown action class: " + std::string(name));
}

// --- skeleton ----------------------------------------------------------------

struct Vec3 {
    double x = 0, y = 0, z = 0;
};

inline Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator*(double s, Vec3 v) { return {s * v.x, s * v.y, s * v.z}; }
inline double norm(Vec3 v) { return std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z); }

inline const std::array<const char*, 24>& joint_names() {
    static const std::array<const char*, 24> names = {
        "head_top", "nose",   "jaw",    "eye_l",   "eye_r",  "ear_l",   "ear_r",   "shoulder_l",
        "shoulder_r", "elbow_l", "elbow_r", "hand_l", "hand_r", "abdomen", "hip_l", "hip_r",
        "knee_l",   "knee_r", "ankle_l", "ankle_r", "heel_l", "heel_r",  "toe_l",   "toe_r"};
    return names;
}

inline int joint_id(std::string_view name) {
    const auto& names = joint_names();
    for (std::size_t i = 0; i < names.size(); ++i)
        if (name == names[i]) return int(i);
    throw ConfigError("unknown joint name: " + std::string(name));
}

namespace jid {
inline constexpr int head_top = 0, nose = 1, jaw = 2, eye_l = 3, eye_r = 4, ear_l = 5, ear_r = 6,
                     shoulder_l = 7, shoulder_r = 8, elbow_l = 9, elbow_r = 10, hand_l = 11,
                     hand_r = 12, abdomen = 13, hip_l = 14, hip_r = 15, knee_l = 16, knee_r = 17,
                     ankle_l = 18, ankle_r = 19, heel_l = 20, heel_r = 21, toe_l = 22, toe_r = 23;
}

inline const std::vector<std::pair<int, int>>& limb_edges() {
    using namespace jid;
    static const std::vector<std::pair<int, int>> edges = {
        {head_top, nose},  {nose, jaw},       {nose, eye_l},     {nose, eye_r},
        {eye_l, ear_l},    {eye_r, ear_r},    {jaw, abdomen},    {shoulder_l, shoulder_r},
        {hip_l, hip_r},    {shoulder_l, elbow_l}, {elbow_l, hand_l}, {shoulder_r, elbow_r},
        {elbow_r, hand_r}, {abdomen, hip_l},  {abdomen, hip_r},  {hip_l, knee_l},
        {knee_l, ankle_l}, {hip_r, knee_r},   {knee_r, ankle_r}, {ankle_l, heel_l},
        {heel_l, toe_l},   {ankle_r, heel_r}, {heel_r, toe_r}};
    return edges;
}

// Major limb segments carrying the sequential-position dots.
inline const std::vector<std::pair<int, int>>& sp_edges() {
    using namespace jid;
    static const std::vector<std::pair<int, int>> edges = {
        {shoulder_l, elbow_l}, {elbow_l, hand_l}, {shoulder_r, elbow_r}, {elbow_r, hand_r},
        {hip_l, knee_l},       {knee_l, ankle_l}, {hip_r, knee_r},       {knee_r, ankle_r}};
    return edges;
}

struct PoseSequence {
    static constexpr std::size_t J = 24;
    std::size_t T = 0;
    std::vector<Vec3> pts;  // T*J, frame-major
    Action action = Action::sit_down;
    std::uint64_t seed = 0;
    double view_deg = 0;

    Vec3& at(std::size_t t, std::size_t j) { return pts[t * J + j]; }
    const Vec3& at(std::size_t t, std::size_t j) const { return pts[t * J + j]; }
};

// --- pose synthesis -----------------------------------------------------------

namespace detail {

enum ParamIx {
    pRoot = 0, pTorso, pShpL, pShpR, pAbdL, pAbdR, pElbL, pElbR,
    pHipL, pHipR, pKneeL, pKneeR, pFootL, pFootR, pCount
};

using Params = std::array<double, pCount>;

struct Key {
    double tau;
    Params p;
};

inline double eased(double u) { return 0.5 * (1.0 - det_cos(kPi * u)); }

inline Params eval_keys(const std::vector<Key>& keys, double tau) {
    if (tau <= keys.front().tau) return keys.front().p;
    if (tau >= keys.back().tau) return keys.back().p;
    std::size_t k = 0;
    while (tau > keys[k + 1].tau) ++k;
    const double span = keys[k + 1].tau - keys[k].tau;
    const double s = eased((tau - keys[k].tau) / span);
    Params out;
    for (std::size_t i = 0; i < pCount; ++i)
        out[i] = keys[k].p[i] + s * (keys[k + 1].p[i] - keys[k].p[i]);
    return out;
}

inline Params make_params(std::initializer_list<std::pair<ParamIx, double>> kv) {
    Params p{};
    for (const auto& [ix, v] : kv) p[ix] = v;
    return p;
}

inline const std::vector<Key>& stand_up_keys() {
    static const std::vector<Key> keys = {
        {0.00, make_params({{pRoot, -0.38}, {pTorso, 0.55}, {pHipL, 1.45}, {pHipR, 1.45},
                            {pKneeL, 1.50}, {pKneeR, 1.50}, {pShpL, 0.35}, {pShpR, 0.35},
                            {pElbL, 0.30}, {pElbR, 0.30}})},
        {0.35, make_params({{pRoot, -0.30}, {pTorso, 0.75}, {pHipL, 1.60}, {pHipR, 1.60},
                            {pKneeL, 1.35}, {pKneeR, 1.35}, {pShpL, 0.55}, {pShpR, 0.55},
                            {pElbL, 0.35}, {pElbR, 0.35}})},
        {0.70, make_params({{pRoot, -0.10}, {pTorso, 0.30}, {pHipL, 0.50}, {pHipR, 0.50},
                            {pKneeL, 0.45}, {pKneeR, 0.45}, {pShpL, 0.20}, {pShpR, 0.20},
                            {pElbL, 0.15}, {pElbR, 0.15}})},
        {1.00, make_params({{pElbL, 0.05}, {pElbR, 0.05}})},
    };
    return keys;
}

inline const std::vector<Key>& jump_up_keys() {
    static const std::vector<Key> keys = {
        {0.00, Params{}},
        {0.25, make_params({{pRoot, -0.25}, {pTorso, 0.35}, {pHipL, 1.00}, {pHipR, 1.00},
                            {pKneeL, 1.15}, {pKneeR, 1.15}, {pShpL, -0.50}, {pShpR, -0.50},
                            {pElbL, 0.25}, {pElbR, 0.25}})},
        {0.45, make_params({{pRoot, 0.12}, {pTorso, 0.05}, {pHipL, -0.10}, {pHipR, -0.10},
                            {pKneeL, 0.05}, {pKneeR, 0.05}, {pShpL, 2.60}, {pShpR, 2.60},
                            {pElbL, 0.10}, {pElbR, 0.10}})},
        {0.60, make_params({{pRoot, 0.34}, {pHipL, 0.40}, {pHipR, 0.40}, {pKneeL, 0.50},
                            {pKneeR, 0.50}, {pShpL, 2.90}, {pShpR, 2.90}, {pElbL, 0.10},
                            {pElbR, 0.10}})},
        {0.78, make_params({{pRoot, -0.18}, {pTorso, 0.25}, {pHipL, 0.80}, {pHipR, 0.80},
                            {pKneeL, 1.00}, {pKneeR, 1.00}, {pShpL, 0.80}, {pShpR, 0.80},
                            {pElbL, 0.20}, {pElbR, 0.20}})},
        {1.00, Params{}},
    };
    return keys;
}

inline const std::vector<Key>& kick_keys() {
    static const std::vector<Key> keys = {
        {0.00, Params{}},
        {0.22, make_params({{pHipR, -0.35}, {pKneeR, 0.90}, {pTorso, -0.08}, {pShpL, 0.50},
                            {pShpR, -0.30}, {pKneeL, 0.10}, {pElbL, 0.25}, {pElbR, 0.25}})},
        {0.50, make_params({{pHipR, 1.25}, {pKneeR, 0.10}, {pTorso, 0.18}, {pShpL, -0.35},
                            {pShpR, 0.55}, {pKneeL, 0.15}, {pElbL, 0.25}, {pElbR, 0.20},
                            {pFootR, 0.30}})},
        {0.75, make_params({{pHipR, 0.45}, {pKneeR, 0.75}, {pTorso, 0.05}, {pShpL, 0.10},
                            {pShpR, 0.10}, {pKneeL, 0.08}})},
        {1.00, Params{}},
    };
    return keys;
}

inline Params action_params(Action a, double tau) {
    switch (a) {
        case Action::stand_up: return eval_keys(stand_up_keys(), tau);
        case Action::sit_down: return eval_keys(stand_up_keys(), 1.0 - tau);
        case Action::jump_up: return eval_keys(jump_up_keys(), tau);
        case Action::kick: return eval_keys(kick_keys(), tau);
        case Action::arm_circles: {
            Params p{};
            const double theta = 4.0 * kPi * tau;
            p[pAbdL] = theta;
            p[pAbdR] = theta;
            p[pElbL] = 0.04;
            p[pElbR] = 0.04;
            p[pTorso] = 0.02;
            return p;
        }
        case Action::wave: {
            Params p{};
            const double raise = tau < 0.18 ? eased(tau / 0.18) : 1.0;
            p[pAbdR] = 2.35 * raise;
            if (tau >= 0.18)
                p[pAbdR] += 0.45 * det_sin(6.0 * kPi * (tau - 0.18) / 0.82);
            p[pElbR] = 0.55 * raise;
            p[pAbdL] = 0.06;
            p[pShpL] = 0.04;
            p[pTorso] = 0.03 * raise;
            return p;
        }
    }
    throw ConfigError("unknown action code");
}

// Forward rotation about the x axis: +y tips toward +z for positive angles.
inline Vec3 rot_x(double a, Vec3 v) {
    const double c = det_cos(a), s = det_sin(a);
    return {v.x, c * v.y - s * v.z, s * v.y + c * v.z};
}

inline Vec3 rot_y(double a, Vec3 v) {
    const double c = det_cos(a), s = det_sin(a);
    return {c * v.x + s * v.z, v.y, -s * v.x + c * v.z};
}

inline std::array<Vec3, PoseSequence::J> skeleton_frame(const Params& p) {
    using namespace jid;
    std::array<Vec3, PoseSequence::J> j;
    const Vec3 root = {0, 0.95 + p[pRoot], 0};
    const double torso = p[pTorso];

    j[abdomen] = root;
    j[shoulder_l] = root + rot_x(torso, Vec3{-0.19, 0.33, 0.02});
    j[shoulder_r] = root + rot_x(torso, Vec3{0.19, 0.33, -0.02});
    const Vec3 neck = root + rot_x(torso, Vec3{0, 0.45, 0});
    j[jaw] = neck + rot_x(torso, Vec3{0, 0.02, 0.06});
    j[nose] = neck + rot_x(torso, Vec3{0, 0.10, 0.105});
    j[head_top] = neck + rot_x(torso, Vec3{0, 0.27, 0.0});
    j[eye_l] = neck + rot_x(torso, Vec3{-0.055, 0.155, 0.085});
    j[eye_r] = neck + rot_x(torso, Vec3{0.055, 0.155, 0.085});
    j[ear_l] = neck + rot_x(torso, Vec3{-0.105, 0.09, -0.01});
    j[ear_r] = neck + rot_x(torso, Vec3{0.105, 0.09, -0.01});

    for (int side = 0; side < 2; ++side) {
        const double sx = side == 0 ? -1.0 : 1.0;
        const double abd = p[side == 0 ? pAbdL : pAbdR];
        const double shp = p[side == 0 ? pShpL : pShpR];
        const double elb = p[side == 0 ? pElbL : pElbR];
        const Vec3 hang = {sx * det_sin(abd), -det_cos(abd), 0};
        const Vec3 upper = rot_x(-shp, hang);
        const Vec3 fore = rot_x(-(shp + elb), hang);
        const Vec3 sh = j[side == 0 ? shoulder_l : shoulder_r];
        const Vec3 el = sh + 0.29 * upper;
        j[side == 0 ? elbow_l : elbow_r] = el;
        j[side == 0 ? hand_l : hand_r] = el + 0.27 * fore;

        const double hip = p[side == 0 ? pHipL : pHipR];
        const double knee = p[side == 0 ? pKneeL : pKneeR];
        const double foot = p[side == 0 ? pFootL : pFootR];
        // A slightly staggered stance keeps the two legs apart in profile views.
        const Vec3 hipw = root + Vec3{sx * 0.10, -0.10, sx * -0.045};
        j[side == 0 ? hip_l : hip_r] = hipw;
        const Vec3 kneew = hipw + 0.44 * rot_x(-hip, Vec3{0, -1, 0});
        j[side == 0 ? knee_l : knee_r] = kneew;
        const double shin = hip - knee;
        const Vec3 anklew = kneew + 0.42 * rot_x(-shin, Vec3{0, -1, 0});
        j[side == 0 ? ankle_l : ankle_r] = anklew;
        const double footrot = -(shin + foot);
        j[side == 0 ? heel_l : heel_r] = anklew + rot_x(footrot, Vec3{0, -0.06, -0.05});
        j[side == 0 ? toe_l : toe_r] = anklew + rot_x(footrot, Vec3{0, -0.06, 0.19});
    }
    return j;
}

}  // namespace detail

// Kinematic templates under seeded amplitude/phase/timing jitter, rotated to
// the requested camera view. jitter = 0 reproduces the bare template.
inline PoseSequence synth_pose(Action action, std::size_t T, std::uint64_t seed, double view_deg,
                               double jitter = 0.15) {
    MP_CONFIG_REQUIRE(T >= 2, "synth_pose: need at least two frames");
    Rng rng(derive_seed(seed, "pose"));
    const double amp = 1.0 + jitter * rng.uniform(-1.0, 1.0);
    const double shift = 0.25 * jitter * rng.uniform(-1.0, 1.0);
    const double warp = jitter * rng.uniform(-1.0, 1.0);
    const double size = 1.0 + 0.5 * jitter * rng.uniform(-1.0, 1.0);

    PoseSequence pose;
    pose.T = T;
    pose.pts.resize(T * PoseSequence::J);
    pose.action = action;
    pose.seed = seed;
    pose.view_deg = view_deg;

    const double view = view_deg * kPi / 180.0;
    for (std::size_t t = 0; t < T; ++t) {
        double tau = double(t) / double(T - 1);
        tau = tau * (1.0 + warp * (1.0 - tau)) + shift;
        tau = std::min(1.0, std::max(0.0, tau));
        detail::Params p = detail::action_params(action, tau);
        for (auto& v : p) v *= amp;
        const auto frame = detail::skeleton_frame(p);
        for (std::size_t j = 0; j < PoseSequence::J; ++j)
            pose.at(t, j) = detail::rot_y(view, size * frame[j]);
    }
    return pose;
}

// --- condition names -----------------------------------------------------------

enum class Temporal { none, reverse, shuffle, f4, f3 };

struct ConditionSpec {
    enum class Type { rgb, joint, sp };
    Type type = Type::rgb;
    int points = 0;
    int lifetime = 0;
    Temporal temporal = Temporal::none;
    int view = -1;  // degrees; -1 when not pinned

    std::string format() const {
        std::string s;
        switch (type) {
            case Type::rgb: s = "RGB"; break;
            case Type::joint: s = "J-" + std::to_string(points) + "P"; break;
            case Type::sp:
                s = "SP-" + std::to_string(points) + "P-" + std::to_string(lifetime) + "LT";
                break;
        }
        switch (temporal) {
            case Temporal::none: break;
            case Temporal::reverse: s += "-R"; break;
            case Temporal::shuffle: s += "-S"; break;
            case Temporal::f4: s += "-4F"; break;
            case Temporal::f3: s += "-3F"; break;
        }
        if (view >= 0) s += "-" + std::to_string(view) + "V";
        return s;
    }

    static ConditionSpec parse(const std::string& name) {
        ConditionSpec c;
        std::vector<std::string> tok;
        std::size_t start = 0;
        while (start <= name.size()) {
            const auto dash = name.find('-', start);
            if (dash == std::string::npos) {
                tok.push_back(name.substr(start));
                break;
            }
            tok.push_back(name.substr(start, dash - start));
            start = dash + 1;
        }
        MP_CONFIG_REQUIRE(!tok.empty() && !tok[0].empty(), "condition: empty name");
        if (tok[0] == "RGB")
            c.type = Type::rgb;
        else if (tok[0] == "J")
            c.type = Type::joint;
        else if (tok[0] == "SP")
            c.type = Type::sp;
        else
            throw ConfigError("condition: unknown type in '" + name + "'");

        for (std::size_t i = 1; i < tok.size(); ++i) {
            const std::string& t = tok[i];
            if (t == "R") {
                c.temporal = Temporal::reverse;
            } else if (t == "S") {
                c.temporal = Temporal::shuffle;
            } else if (t == "4F") {
                c.temporal = Temporal::f4;
            } else if (t == "3F") {
                c.temporal = Temporal::f3;
            } else if (t.size() >= 2 && t.back() == 'P') {
                c.points = std::stoi(t.substr(0, t.size() - 1));
            } else if (t.size() >= 3 && t.substr(t.size() - 2) == "LT") {
                c.lifetime = std::stoi(t.substr(0, t.size() - 2));
            } else if (t.size() >= 2 && t.back() == 'V') {
                c.view = std::stoi(t.substr(0, t.size() - 1));
            } else {
                throw ConfigError("condition: bad token '" + t + "' in '" + name + "'");
            }
        }
        c.validate();
        return c;
    }

    void validate() const {
        switch (type) {
            case Type::rgb:
                MP_CONFIG_REQUIRE(points == 0 && lifetime == 0 && view < 0,
                                  "condition: RGB takes no points/lifetime/view");
                break;
            case Type::joint: {
                const bool ok = points == 5 || points == 6 || points == 10 || points == 14 ||
                                points == 18 || points == 26;
                MP_CONFIG_REQUIRE(ok, "condition: unsupported joint count " +
                                          std::to_string(points));
                MP_CONFIG_REQUIRE(lifetime == 0, "condition: lifetime is an SP parameter");
                MP_CONFIG_REQUIRE(view < 0 || view == 0 || view == 45 || view == 90,
                                  "condition: view must be 0, 45, or 90");
                MP_CONFIG_REQUIRE(view < 0 || temporal == Temporal::none,
                                  "condition: view bins exclude temporal ops");
                break;
            }
            case Type::sp:
                MP_CONFIG_REQUIRE(points == 4 || points == 8,
                                  "condition: SP supports 4 or 8 points");
                MP_CONFIG_REQUIRE(lifetime == 1 || lifetime == 2 || lifetime == 4,
                                  "condition: lifetime must be 1, 2, or 4");
                MP_CONFIG_REQUIRE(temporal == Temporal::none && view < 0,
                                  "condition: SP takes no temporal op or view");
                break;
        }
    }
};

inline std::vector<std::string> benchmark_condition_names() {
    return {"RGB",      "RGB-R",    "RGB-S",    "RGB-4F",   "RGB-3F",    "J-5P",
            "J-6P",     "J-10P",    "J-14P",    "J-18P",    "J-26P",     "J-6P-R",
            "J-6P-S",   "J-6P-4F",  "J-6P-3F",  "J-6P-0V",  "J-6P-45V",  "J-6P-90V",
            "SP-4P-1LT", "SP-4P-2LT", "SP-4P-4LT", "SP-8P-1LT", "SP-8P-2LT", "SP-8P-4LT"};
}

// --- temporal transforms ---------------------------------------------------------

inline std::vector<std::size_t> frame_order(std::size_t T, Temporal op, std::uint64_t seed = 0) {
    std::vector<std::size_t> order(T);
    std::iota(order.begin(), order.end(), std::size_t(0));
    switch (op) {
        case Temporal::none: break;
        case Temporal::reverse: std::reverse(order.begin(), order.end()); break;
        case Temporal::shuffle: {
            Rng rng(derive_seed(seed, "shuffle"));
            rng.shuffle(order);
            break;
        }
        case Temporal::f4:
        case Temporal::f3: {
            const std::size_t k = op == Temporal::f4 ? 4 : 3;
            order.clear();
            std::size_t placed = 0;
            for (std::size_t i = 0; i < k; ++i) {
                const auto idx = std::size_t(
                    std::floor(double(i) * double(T - 1) / double(k - 1) + 0.5));
                std::size_t reps = std::size_t(std::floor(double(T) / double(k) + 0.5));
                if (i + 1 == k) reps = T - placed;
                for (std::size_t r = 0; r < reps; ++r) order.push_back(idx);
                placed += reps;
            }
            break;
        }
    }
    return order;
}

inline PoseSequence apply_temporal(const PoseSequence& pose, Temporal op,
                                   std::uint64_t seed = 0) {
    const auto order = frame_order(pose.T, op, seed);
    PoseSequence out = pose;
    for (std::size_t t = 0; t < pose.T; ++t)
        for (std::size_t j = 0; j < PoseSequence::J; ++j) out.at(t, j) = pose.at(order[t], j);
    return out;
}

// --- rendering -------------------------------------------------------------------

struct RenderOptions {
    std::size_t px = 224;
    double dot_radius = 3.0;
};

struct PointLightVideo {
    std::size_t T = 0;
    std::size_t px = 0;
    std::vector<std::uint8_t> frames;  // T*px*px
    ConditionSpec cond;
    double dot_radius = 3.0;
    double view_deg = 0;

    // SP bookkeeping: limb assignment per point and the limb parameter drawn
    // for each lifetime window.
    std::vector<int> sp_edge;
    std::vector<std::vector<double>> sp_u;

    // Joint bookkeeping: final dot centers per frame after separation.
    std::vector<std::vector<std::pair<double, double>>> dot_xy;

    std::uint8_t* frame(std::size_t t) { return frames.data() + t * px * px; }
    const std::uint8_t* frame(std::size_t t) const { return frames.data() + t * px * px; }
};

inline void apply_temporal(PointLightVideo& v, Temporal op, std::uint64_t seed = 0) {
    const auto order = frame_order(v.T, op, seed);
    std::vector<std::uint8_t> out(v.frames.size());
    const std::size_t n = v.px * v.px;
    for (std::size_t t = 0; t < v.T; ++t)
        std::copy_n(v.frame(order[t]), n, out.data() + t * n);
    v.frames = std::move(out);
    if (!v.dot_xy.empty()) {
        auto xy = v.dot_xy;
        for (std::size_t t = 0; t < v.T; ++t) xy[t] = v.dot_xy[order[t]];
        v.dot_xy = std::move(xy);
    }
    v.cond.temporal = op;
}

namespace detail {

struct Projection {
    double scale, cx, floor_y;

    static Projection for_px(std::size_t px) {
        return {double(px) / 3.05, 0.5 * double(px), 0.88 * double(px)};
    }

    std::pair<double, double> operator()(Vec3 v) const {
        return {cx + scale * v.x, floor_y - scale * v.y};
    }
};

struct DotSite {
    int a;
    int b;      // -1: the joint itself; else interpolate a->b
    double t;
};

inline std::vector<DotSite> joint_dot_sites(std::size_t P) {
    using namespace jid;
    switch (P) {
        case 5:
            return {{nose, -1, 0}, {hand_l, -1, 0}, {hand_r, -1, 0}, {ankle_l, -1, 0},
                    {ankle_r, -1, 0}};
        case 6:
            return {{nose, -1, 0}, {abdomen, -1, 0}, {hand_l, -1, 0}, {hand_r, -1, 0},
                    {ankle_l, -1, 0}, {ankle_r, -1, 0}};
        case 10:
            return {{nose, -1, 0},   {abdomen, -1, 0}, {shoulder_l, -1, 0}, {shoulder_r, -1, 0},
                    {hand_l, -1, 0}, {hand_r, -1, 0},  {hip_l, -1, 0},      {hip_r, -1, 0},
                    {ankle_l, -1, 0}, {ankle_r, -1, 0}};
        case 14:
            return {{nose, -1, 0},    {abdomen, -1, 0}, {shoulder_l, -1, 0}, {shoulder_r, -1, 0},
                    {elbow_l, -1, 0}, {elbow_r, -1, 0}, {hand_l, -1, 0},     {hand_r, -1, 0},
                    {hip_l, -1, 0},   {hip_r, -1, 0},   {knee_l, -1, 0},     {knee_r, -1, 0},
                    {ankle_l, -1, 0}, {ankle_r, -1, 0}};
        case 18:
            return {{head_top, -1, 0}, {nose, -1, 0},    {jaw, -1, 0},        {abdomen, -1, 0},
                    {ear_l, -1, 0},    {ear_r, -1, 0},   {shoulder_l, -1, 0}, {shoulder_r, -1, 0},
                    {elbow_l, -1, 0},  {elbow_r, -1, 0}, {hand_l, -1, 0},     {hand_r, -1, 0},
                    {hip_l, -1, 0},    {hip_r, -1, 0},   {knee_l, -1, 0},     {knee_r, -1, 0},
                    {ankle_l, -1, 0},  {ankle_r, -1, 0}};
        case 26:
            // Four points per foot: heel, toe, and two interpolants between.
            return {{head_top, -1, 0}, {nose, -1, 0},    {jaw, -1, 0},        {abdomen, -1, 0},
                    {eye_l, -1, 0},    {eye_r, -1, 0},   {ear_l, -1, 0},      {ear_r, -1, 0},
                    {shoulder_l, -1, 0}, {shoulder_r, -1, 0}, {elbow_l, -1, 0}, {elbow_r, -1, 0},
                    {hand_l, -1, 0},   {hand_r, -1, 0},  {hip_l, -1, 0},      {hip_r, -1, 0},
                    {knee_l, -1, 0},   {knee_r, -1, 0},  {heel_l, -1, 0},
                    {heel_l, toe_l, 1.0 / 3.0}, {heel_l, toe_l, 2.0 / 3.0}, {toe_l, -1, 0},
                    {heel_r, -1, 0},   {heel_r, toe_r, 1.0 / 3.0},
                    {heel_r, toe_r, 2.0 / 3.0}, {toe_r, -1, 0}};
        default:
            throw ConfigError("joint rendering supports P in {5,6,10,14,18,26}, got " +
                              std::to_string(P));
    }
}

// Deterministic minimum-separation pass: pairs closer than minsep are pushed
// apart and every center is kept a margin away from the frame border, so dot
// clusters stay countable.
inline void separate_dots(std::vector<std::pair<double, double>>& pts, double minsep,
                          double margin, double px) {
    const double lo = margin, hi = double(px) - 1.0 - margin;
    for (auto& p : pts) {
        p.first = std::min(hi, std::max(lo, p.first));
        p.second = std::min(hi, std::max(lo, p.second));
    }
    for (int iter = 0; iter < 64; ++iter) {
        bool moved = false;
        for (std::size_t i = 0; i < pts.size(); ++i)
            for (std::size_t j = i + 1; j < pts.size(); ++j) {
                double dx = pts[j].first - pts[i].first;
                double dy = pts[j].second - pts[i].second;
                double d = std::sqrt(dx * dx + dy * dy);
                if (d >= minsep) continue;
                if (d < 1e-9) {
                    const double ang = 2.39996322972865332 * double(i * 31 + j + 1);
                    dx = det_cos(ang);
                    dy = det_sin(ang);
                    d = 1.0;
                }
                const double push = 0.5 * (minsep - d) + 0.01;
                pts[i].first -= push * dx / d;
                pts[i].second -= push * dy / d;
                pts[j].first += push * dx / d;
                pts[j].second += push * dy / d;
                moved = true;
            }
        for (auto& p : pts) {
            p.first = std::min(hi, std::max(lo, p.first));
            p.second = std::min(hi, std::max(lo, p.second));
        }
        if (!moved) return;
    }
    for (std::size_t i = 0; i < pts.size(); ++i)
        for (std::size_t j = i + 1; j < pts.size(); ++j) {
            const double dx = pts[j].first - pts[i].first;
            const double dy = pts[j].second - pts[i].second;
            MP_REQUIRE(dx * dx + dy * dy >= 0.98 * minsep * minsep,
                       "dot separation did not converge");
        }
}

inline void splat_dot(std::uint8_t* img, std::size_t px, double cx, double cy, double r) {
    const int x0 = std::max(0, int(std::floor(cx - r - 1)));
    const int x1 = std::min(int(px) - 1, int(std::ceil(cx + r + 1)));
    const int y0 = std::max(0, int(std::floor(cy - r - 1)));
    const int y1 = std::min(int(px) - 1, int(std::ceil(cy + r + 1)));
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
            const double dx = double(x) - cx, dy = double(y) - cy;
            const double d = std::sqrt(dx * dx + dy * dy);
            const double cov = std::min(1.0, std::max(0.0, r + 0.5 - d));
            const auto v = std::uint8_t(std::floor(cov * 255.0 + 0.5));
            if (v > img[std::size_t(y) * px + std::size_t(x)])
                img[std::size_t(y) * px + std::size_t(x)] = v;
        }
}

inline double hash_unit(std::uint64_t seed, std::uint64_t x, std::uint64_t y) {
    std::uint64_t s = seed ^ (x * 0x9E3779B97F4A7C15ull) ^ (y * 0xC2B2AE3D27D4EB4Full);
    return double(splitmix64(s) >> 11) * 0x1.0p-53;
}

}  // namespace detail

// White dots at the selected joint locations on black frames; dots are kept
// separated and clear of the border so each frame shows exactly P clusters.
inline PointLightVideo render_joint(const PoseSequence& pose, std::size_t P,
                                    RenderOptions opt = {}) {
    const auto sites = detail::joint_dot_sites(P);
    PointLightVideo v;
    v.T = pose.T;
    v.px = opt.px;
    v.dot_radius = opt.dot_radius;
    v.view_deg = pose.view_deg;
    v.cond.type = ConditionSpec::Type::joint;
    v.cond.points = int(P);
    v.frames.assign(pose.T * opt.px * opt.px, 0);

    const auto proj = detail::Projection::for_px(opt.px);
    const double minsep = 2.0 * opt.dot_radius + 1.5;
    const double margin = opt.dot_radius + 2.5;
    for (std::size_t t = 0; t < pose.T; ++t) {
        std::vector<std::pair<double, double>> pts;
        pts.reserve(P);
        for (const auto& s : sites) {
            Vec3 w = pose.at(t, std::size_t(s.a));
            if (s.b >= 0) w = w + s.t * (pose.at(t, std::size_t(s.b)) - w);
            pts.push_back(proj(w));
        }
        detail::separate_dots(pts, minsep, margin, double(opt.px));
        for (const auto& [x, y] : pts)
            detail::splat_dot(v.frame(t), opt.px, x, y, opt.dot_radius);
        v.dot_xy.push_back(std::move(pts));
    }
    return v;
}

// Dots at seeded positions along limb segments, re-drawn every `lifetime`
// frames; overlap is allowed, matching the original stimulus.
inline PointLightVideo render_sp(const PoseSequence& pose, std::size_t P, std::size_t lifetime,
                                 std::uint64_t seed, RenderOptions opt = {}) {
    MP_CONFIG_REQUIRE(P == 4 || P == 8, "sp rendering supports 4 or 8 points");
    MP_CONFIG_REQUIRE(lifetime == 1 || lifetime == 2 || lifetime == 4,
                      "sp lifetime must be 1, 2, or 4");
    const auto& edges = sp_edges();

    PointLightVideo v;
    v.T = pose.T;
    v.px = opt.px;
    v.dot_radius = opt.dot_radius;
    v.view_deg = pose.view_deg;
    v.cond.type = ConditionSpec::Type::sp;
    v.cond.points = int(P);
    v.cond.lifetime = int(lifetime);
    v.frames.assign(pose.T * opt.px * opt.px, 0);

    // Balanced round-robin over a seeded edge order.
    std::vector<std::size_t> edge_order(edges.size());
    std::iota(edge_order.begin(), edge_order.end(), std::size_t(0));
    Rng assign_rng(derive_seed(seed, "sp-assign"));
    assign_rng.shuffle(edge_order);
    const std::size_t windows = (pose.T + lifetime - 1) / lifetime;
    v.sp_edge.resize(P);
    v.sp_u.assign(P, {});
    for (std::size_t p = 0; p < P; ++p) {
        v.sp_edge[p] = int(edge_order[p % edges.size()]);
        Rng urng(derive_seed(seed, "sp-u:" + std::to_string(p)));
        for (std::size_t w = 0; w < windows; ++w) v.sp_u[p].push_back(urng.uniform());
    }

    const auto proj = detail::Projection::for_px(opt.px);
    for (std::size_t t = 0; t < pose.T; ++t) {
        for (std::size_t p = 0; p < P; ++p) {
            const auto [a, b] = edges[std::size_t(v.sp_edge[p])];
            const double u = v.sp_u[p][t / lifetime];
            const Vec3 w =
                pose.at(t, std::size_t(a)) +
                u * (pose.at(t, std::size_t(b)) - pose.at(t, std::size_t(a)));
            const auto [x, y] = proj(w);
            detail::splat_dot(v.frame(t), opt.px, x, y, opt.dot_radius);
        }
    }
    return v;
}

// Stick-figure rendering: anti-aliased limb capsules and a head disc in a
// per-actor gray over a low-contrast textured background.
inline PointLightVideo render_rgblike(const PoseSequence& pose, std::uint64_t style_seed,
                                      RenderOptions opt = {}) {
    PointLightVideo v;
    v.T = pose.T;
    v.px = opt.px;
    v.dot_radius = opt.dot_radius;
    v.view_deg = pose.view_deg;
    v.cond.type = ConditionSpec::Type::rgb;
    v.frames.assign(pose.T * opt.px * opt.px, 0);

    Rng rng(derive_seed(style_seed, "rgb-style"));
    const double gray = 185.0 + double(rng.below(51));
    const double half_w = (2.25 + 1.5 * rng.uniform()) * double(opt.px) / 224.0;
    const std::uint64_t tex_seed = rng.next();

    const auto proj = detail::Projection::for_px(opt.px);
    const std::size_t n = opt.px * opt.px;
    std::vector<std::uint8_t> background(n);
    for (std::size_t y = 0; y < opt.px; ++y)
        for (std::size_t x = 0; x < opt.px; ++x)
            background[y * opt.px + x] = std::uint8_t(
                86.0 + std::floor(25.0 * detail::hash_unit(tex_seed, x, y) + 0.5));

    std::vector<double> cov(n);
    for (std::size_t t = 0; t < pose.T; ++t) {
        std::fill(cov.begin(), cov.end(), 0.0);
        auto paint_capsule = [&](std::pair<double, double> a, std::pair<double, double> b,
                                 double hw) {
            const double vx = b.first - a.first, vy = b.second - a.second;
            const double len2 = vx * vx + vy * vy;
            const int x0 = std::max(0, int(std::floor(std::min(a.first, b.first) - hw - 1)));
            const int x1 = std::min(int(opt.px) - 1,
                                    int(std::ceil(std::max(a.first, b.first) + hw + 1)));
            const int y0 = std::max(0, int(std::floor(std::min(a.second, b.second) - hw - 1)));
            const int y1 = std::min(int(opt.px) - 1,
                                    int(std::ceil(std::max(a.second, b.second) + hw + 1)));
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const double pxx = double(x) - a.first, pyy = double(y) - a.second;
                    double s = len2 > 0 ? (pxx * vx + pyy * vy) / len2 : 0.0;
                    s = std::min(1.0, std::max(0.0, s));
                    const double dx = pxx - s * vx, dy = pyy - s * vy;
                    const double d = std::sqrt(dx * dx + dy * dy);
                    const double c = std::min(1.0, std::max(0.0, hw + 0.5 - d));
                    auto& cell = cov[std::size_t(y) * opt.px + std::size_t(x)];
                    if (c > cell) cell = c;
                }
        };
        for (const auto& [a, b] : limb_edges())
            paint_capsule(proj(pose.at(t, std::size_t(a))), proj(pose.at(t, std::size_t(b))),
                          half_w);
        // Head disc between jaw and crown.
        const Vec3 hc = 0.5 * (pose.at(t, jid::head_top) + pose.at(t, jid::jaw));
        const auto hp = proj(hc);
        paint_capsule(hp, hp, 0.115 * proj.scale);

        std::uint8_t* img = v.frame(t);
        for (std::size_t i = 0; i < n; ++i) {
            const double val = double(background[i]) * (1.0 - cov[i]) + gray * cov[i];
            img[i] = std::uint8_t(std::floor(val + 0.5));
        }
    }
    return v;
}

// --- pose JSON hook --------------------------------------------------------------

inline void save_pose_json(const PoseSequence& pose, const std::filesystem::path& path) {
    nlohmann::json j;
    j["action"] = action_name(pose.action);
    j["seed"] = pose.seed;
    j["view_deg"] = pose.view_deg;
    j["T"] = pose.T;
    j["joints"] = joint_names();
    auto& frames = j["frames"];
    frames = nlohmann::json::array();
    for (std::size_t t = 0; t < pose.T; ++t) {
        nlohmann::json frame = nlohmann::json::array();
        for (std::size_t k = 0; k < PoseSequence::J; ++k) {
            const Vec3& p = pose.at(t, k);
            frame.push_back({p.x, p.y, p.z});
        }
        frames.push_back(std::move(frame));
    }
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << j.dump(1) << "\n";
}

inline PoseSequence load_pose_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad pose json " + path.string() + ": " + e.what());
    }
    PoseSequence pose;
    try {
        pose.action = action_from_name(j.at("action").get<std::string>());
        pose.seed = j.at("seed").get<std::uint64_t>();
        pose.view_deg = j.at("view_deg").get<double>();
        pose.T = j.at("T").get<std::size_t>();
        const auto& names = j.at("joints");
        MP_CONFIG_REQUIRE(names.size() == PoseSequence::J, "pose json: expected 24 joints");
        for (std::size_t k = 0; k < PoseSequence::J; ++k)
            MP_CONFIG_REQUIRE(names[k].get<std::string>() == joint_names()[k],
                              "pose json: joint table mismatch");
        const auto& frames = j.at("frames");
        MP_CONFIG_REQUIRE(frames.size() == pose.T, "pose json: frame count mismatch");
        pose.pts.resize(pose.T * PoseSequence::J);
        for (std::size_t t = 0; t < pose.T; ++t) {
            MP_CONFIG_REQUIRE(frames[t].size() == PoseSequence::J,
                              "pose json: joint count mismatch");
            for (std::size_t k = 0; k < PoseSequence::J; ++k) {
                const auto& p = frames[t][k];
                MP_CONFIG_REQUIRE(p.size() == 3, "pose json: coordinates must be 3-d");
                pose.at(t, k) = {p[0].get<double>(), p[1].get<double>(), p[2].get<double>()};
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad pose json " + path.string() + ": " + e.what());
    }
    return pose;
}

// --- benchmark -------------------------------------------------------------------

struct BenchmarkOptions {
    std::filesystem::path out_dir;
    std::size_t classes = kNumActions;
    std::size_t per_class = 4;
    std::uint64_t seed = 1;
    std::size_t px = 224;
    double dot_radius = 3.0;
    std::size_t T = 32;
    double jitter = 0.15;
    std::size_t jobs = 1;
    std::vector<std::string> conditions;  // empty: the full 24-condition grid
};

namespace detail {

inline double seeded_view(std::uint64_t video_seed) {
    static const double pool[5] = {0, 45, -45, 90, -90};
    Rng rng(derive_seed(video_seed, "view"));
    return pool[rng.below(5)];
}

inline void write_frames(const PointLightVideo& v, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    for (std::size_t t = 0; t < v.T; ++t) {
        char name[16];
        std::snprintf(name, sizeof(name), "frame_%02zu.png", t);
        png::write_gray8(dir / name, v.px, v.px, v.frame(t));
    }
}

inline void write_meta(const PointLightVideo& v, const std::string& cls, int label,
                       std::uint64_t video_seed, const std::filesystem::path& dir) {
    nlohmann::json m;
    m["condition"] = v.cond.format();
    m["class"] = cls;
    m["label"] = label;
    m["seed"] = video_seed;
    m["view_deg"] = v.view_deg;
    m["t"] = v.T;
    m["px"] = v.px;
    m["dot_radius"] = v.dot_radius;
    if (v.cond.type == ConditionSpec::Type::sp) {
        auto pts = nlohmann::json::array();
        for (std::size_t p = 0; p < v.sp_edge.size(); ++p) {
            const auto [a, b] = sp_edges()[std::size_t(v.sp_edge[p])];
            pts.push_back({{"edge", {joint_names()[std::size_t(a)],
                                     joint_names()[std::size_t(b)]}},
                           {"u", v.sp_u[p]}});
        }
        m["points"] = std::move(pts);
    }
    std::ofstream os(dir / "meta.json");
    if (!os) throw IoError("cannot open for writing: " + (dir / "meta.json").string());
    os << m.dump(1) << "\n";
}

}  // namespace detail

// Renders every requested condition for a balanced class grid. Conditions of
// the same video index share one underlying pose, so temporal and sparser
// variants are exact re-renderings of the same motion.
inline std::filesystem::path build_benchmark(const BenchmarkOptions& opts) {
    MP_CONFIG_REQUIRE(opts.classes >= 2 && opts.classes <= kNumActions,
                      "benchmark: classes must be between 2 and 6");
    MP_CONFIG_REQUIRE(opts.per_class >= 1, "benchmark: per_class must be positive");
    MP_CONFIG_REQUIRE(opts.px >= 64 && opts.px % 16 == 0,
                      "benchmark: frame size must be a multiple of 16, at least 64");

    std::vector<ConditionSpec> conds;
    const auto names = opts.conditions.empty() ? benchmark_condition_names() : opts.conditions;
    for (const auto& n : names) conds.push_back(ConditionSpec::parse(n));

    std::error_code ec;
    std::filesystem::create_directories(opts.out_dir, ec);
    if (ec) throw IoError("cannot create " + opts.out_dir.string() + ": " + ec.message());

    const RenderOptions ropt{opts.px, opts.dot_radius};
    struct VideoRow {
        std::string path;
        int label;
        std::uint64_t seed;
        int view;
    };
    std::vector<std::vector<VideoRow>> rows(conds.size());
    for (auto& r : rows) r.resize(opts.classes * opts.per_class);

    const std::size_t videos = opts.classes * opts.per_class;
    parallel_for(videos, opts.jobs, [&](std::size_t vi) {
        const std::size_t c = vi / opts.per_class;
        const std::size_t i = vi % opts.per_class;
        const Action action = Action(c);
        const std::string cls = action_name(action);
        char idx[8];
        std::snprintf(idx, sizeof(idx), "%04zu", i);
        const std::uint64_t video_seed =
            derive_seed(opts.seed, "video:" + cls + ":" + std::string(idx));
        const double base_view = detail::seeded_view(video_seed);

        // Poses at the seeded view plus any pinned views requested.
        const PoseSequence base_pose =
            synth_pose(action, opts.T, video_seed, base_view, opts.jitter);
        std::map<int, PoseSequence> pinned;
        for (const auto& cond : conds)
            if (cond.view >= 0 && !pinned.count(cond.view))
                pinned.emplace(cond.view,
                               synth_pose(action, opts.T, video_seed, cond.view, opts.jitter));

        std::map<int, PointLightVideo> joint_cache;
        PointLightVideo rgb_cache;
        bool have_rgb = false;

        for (std::size_t ci = 0; ci < conds.size(); ++ci) {
            const ConditionSpec& cond = conds[ci];
            PointLightVideo video;
            double view_used = base_view;
            switch (cond.type) {
                case ConditionSpec::Type::rgb:
                    if (!have_rgb) {
                        rgb_cache = render_rgblike(base_pose, video_seed, ropt);
                        have_rgb = true;
                    }
                    video = rgb_cache;
                    break;
                case ConditionSpec::Type::joint:
                    if (cond.view >= 0) {
                        video = render_joint(pinned.at(cond.view), std::size_t(cond.points),
                                             ropt);
                        view_used = cond.view;
                    } else {
                        auto it = joint_cache.find(cond.points);
                        if (it == joint_cache.end())
                            it = joint_cache
                                     .emplace(cond.points,
                                              render_joint(base_pose,
                                                           std::size_t(cond.points), ropt))
                                     .first;
                        video = it->second;
                    }
                    break;
                case ConditionSpec::Type::sp:
                    video = render_sp(base_pose, std::size_t(cond.points),
                                      std::size_t(cond.lifetime),
                                      derive_seed(video_seed,
                                                  "sp:" + std::to_string(cond.points) + ":" +
                                                      std::to_string(cond.lifetime)),
                                      ropt);
                    break;
            }
            if (cond.temporal != Temporal::none) apply_temporal(video, cond.temporal, video_seed);
            video.cond = cond;

            const std::string rel = cond.format() + "/" + cls + "/" + std::string(idx);
            const auto dir = opts.out_dir / rel;
            detail::write_frames(video, dir);
            detail::write_meta(video, cls, int(c), video_seed, dir);
            rows[ci][vi] = {rel, int(c), video_seed, int(std::lround(view_used))};
        }
    });

    nlohmann::json manifest;
    manifest["format"] = "mp-manifest-v1";
    manifest["seed"] = opts.seed;
    manifest["per_class"] = opts.per_class;
    manifest["px"] = opts.px;
    manifest["t"] = opts.T;
    manifest["dot_radius"] = opts.dot_radius;
    manifest["jitter"] = opts.jitter;
    auto cls_names = nlohmann::json::array();
    for (std::size_t c = 0; c < opts.classes; ++c) cls_names.push_back(action_name(Action(c)));
    manifest["classes"] = std::move(cls_names);
    auto jconds = nlohmann::json::array();
    for (std::size_t ci = 0; ci < conds.size(); ++ci) {
        nlohmann::json jc;
        jc["name"] = conds[ci].format();
        auto vids = nlohmann::json::array();
        for (const auto& r : rows[ci])
            vids.push_back({{"path", r.path}, {"label", r.label}, {"seed", r.seed},
                            {"view", r.view}});
        jc["videos"] = std::move(vids);
        jconds.push_back(std::move(jc));
    }
    manifest["conditions"] = std::move(jconds);

    const auto mpath = opts.out_dir / "manifest.json";
    std::ofstream os(mpath);
    if (!os) throw IoError("cannot open for writing: " + mpath.string());
    os << manifest.dump(1) << "\n";
    return mpath;
}

}  // namespace mp::stim
