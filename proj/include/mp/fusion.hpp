#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "mp/featseq.hpp"
#include "mp/invariant.hpp"
#include "mp/nn.hpp"
#include "mp/optim.hpp"
#include "mp/patchflow.hpp"
#include "mp/snapshot.hpp"
#include "mp/tensor.hpp"

namespace mp::fusion {

using ad::Shape;
using ad::Tensor;

struct ModelConfig {
    std::size_t num_classes = 6;
    std::size_t T = 32;
    std::size_t grid_h = 14;
    std::size_t grid_w = 14;
    std::size_t K = 6;
    std::size_t P = 3;
    std::size_t B = 64;
    std::vector<std::size_t> strides{1, 2, 4, 8};
    double tau = 0.001;
    double gamma = 0.2;
    double mu = 0.05;
    double alpha = 10.0;
    std::size_t attn_depth = 2;

    bool min_enabled = true;
    bool fsn_enabled = true;
    bool single_scale = false;
    bool slots_enabled = true;
    bool gamma_enabled = true;
    bool temporal_augmentation = false;
    bool time_embedding = true;
    bool slot_loss = true;
    bool inference_refine = true;
    bool first_frame_ref_only = false;

    std::size_t N() const { return grid_h * grid_w; }

    std::vector<std::size_t> active_strides() const {
        if (single_scale) return {strides.at(0)};
        return strides;
    }

    std::size_t flow_dim(std::size_t stride) const { return 2 * (T / stride - 1); }

    // Channel count entering the fusion stages: slot activations per stride,
    // or the raw flow components when slots are ablated away.
    std::size_t fusion_channels() const {
        std::size_t c = 0;
        for (std::size_t s : active_strides()) c += slots_enabled ? K : flow_dim(s);
        return c;
    }

    void validate() const {
        MP_CONFIG_REQUIRE(num_classes >= 2, "config: need at least two classes");
        MP_CONFIG_REQUIRE(T >= 2, "config: need at least two frames");
        MP_CONFIG_REQUIRE(grid_h >= 1 && grid_w >= 1, "config: empty patch grid");
        MP_CONFIG_REQUIRE(K >= 1 && P >= 1 && B >= 1, "config: slot sizes must be positive");
        MP_CONFIG_REQUIRE(!strides.empty(), "config: stride list is empty");
        for (std::size_t s : strides) {
            MP_CONFIG_REQUIRE(s >= 1 && T % s == 0 && T / s >= 2,
                              "config: stride " + std::to_string(s) + " incompatible with T=" +
                                  std::to_string(T));
        }
        MP_CONFIG_REQUIRE(tau > 0 && gamma >= 0 && mu > 0, "config: nonpositive temperature");
        MP_CONFIG_REQUIRE(alpha >= 0, "config: negative slot loss weight");
        MP_CONFIG_REQUIRE(attn_depth >= 1, "config: attention depth must be positive");
        MP_CONFIG_REQUIRE(min_enabled || fsn_enabled, "config: both pathways disabled");
    }

    // Canonical text form; two configs agree iff these strings agree.
    std::string canonical_string() const {
        std::ostringstream os;
        os << "alpha=" << alpha << '\n'
           << "attn_depth=" << attn_depth << '\n'
           << "b=" << B << '\n'
           << "first_frame_ref_only=" << first_frame_ref_only << '\n'
           << "fsn=" << fsn_enabled << '\n'
           << "gamma=" << gamma << '\n'
           << "gamma_enabled=" << gamma_enabled << '\n'
           << "grid_h=" << grid_h << '\n'
           << "grid_w=" << grid_w << '\n'
           << "inference_refine=" << inference_refine << '\n'
           << "k=" << K << '\n'
           << "min=" << min_enabled << '\n'
           << "mu=" << mu << '\n'
           << "num_classes=" << num_classes << '\n'
           << "p=" << P << '\n'
           << "single_scale=" << single_scale << '\n'
           << "slot_loss=" << slot_loss << '\n'
           << "slots_enabled=" << slots_enabled << '\n'
           << "strides=";
        for (std::size_t i = 0; i < strides.size(); ++i) os << (i ? "," : "") << strides[i];
        os << '\n'
           << "t=" << T << '\n'
           << "tau=" << tau << '\n'
           << "temporal_augmentation=" << temporal_augmentation << '\n'
           << "time_embedding=" << time_embedding << '\n';
        return os.str();
    }

    std::uint64_t fingerprint() const { return fnv1a64(canonical_string()); }
};

// Precomputed per-video model inputs: one dense flow per active stride plus
// the directional motion energies.
struct VideoFlows {
    std::size_t T = 0;
    std::size_t N = 0;
    std::vector<flow::DenseFlow> flows;
    std::vector<double> minmat;  // [t][n][4]

    void validate(const ModelConfig& cfg) const {
        MP_REQUIRE(T == cfg.T && N == cfg.N(), "video flows do not match the config grid");
        const auto strides = cfg.active_strides();
        if (cfg.fsn_enabled) {
            MP_REQUIRE(flows.size() == strides.size(), "video flows: wrong stride count");
            for (std::size_t i = 0; i < strides.size(); ++i) {
                MP_REQUIRE(flows[i].stride == strides[i] && flows[i].T == T && flows[i].N == N,
                           "video flows: stride bank mismatch");
            }
        }
        if (cfg.min_enabled)
            MP_REQUIRE(minmat.size() == T * N * 4, "video flows: motion matrix size mismatch");
    }
};

inline VideoFlows video_flows_from_table(const flow::TransitionTable& tab,
                                         const ModelConfig& cfg) {
    VideoFlows out;
    out.T = tab.T();
    out.N = tab.N();
    if (cfg.fsn_enabled) {
        for (std::size_t s : cfg.active_strides())
            out.flows.push_back(flow::dense_flow(tab, s, cfg.gamma, flow::kFlowFloor,
                                                 cfg.gamma_enabled, cfg.first_frame_ref_only));
    }
    if (cfg.min_enabled) out.minmat = invariant::motion_invariant_matrix(tab);
    return out;
}

inline VideoFlows prepare_video(const FeatureSequence& fs, const ModelConfig& cfg) {
    MP_REQUIRE(fs.T == cfg.T && fs.H == cfg.grid_h && fs.W == cfg.grid_w,
               "feature sequence does not match the config grid");
    return video_flows_from_table(flow::TransitionTable(fs, cfg.tau), cfg);
}

// Sinusoidal frame embedding padded up when the token dimension is odd.
template <typename Real>
std::vector<Real> frame_embedding(std::size_t T, std::size_t n) {
    const std::size_t d = n % 2 == 0 ? n : n + 1;
    std::vector<Real> full = nn::time_embedding<Real>(T, d);
    if (d == n) return full;
    std::vector<Real> out(T * n);
    for (std::size_t t = 0; t < T; ++t)
        std::copy_n(full.begin() + t * d, n, out.begin() + t * n);
    return out;
}

template <typename Real>
struct ForwardOut {
    Tensor<Real> f_fsn;         // (1, N)
    Tensor<Real> f_min;         // (1, N)
    Tensor<Real> flow_logits;   // (1, Y), invalid when the pathway is off
    Tensor<Real> invar_logits;  // (1, Y), invalid when the pathway is off
    Tensor<Real> fuse_logits;   // (1, Y)
    Tensor<Real> slot;          // scalar walk loss over stride banks, else invalid
};

template <typename Real>
struct LossOut {
    Tensor<Real> total;
    double slot = 0.0;
    double flow = 0.0;
    double invar = 0.0;
    double fuse = 0.0;

    double weighted_total() const { return total.value()[0]; }
};

template <typename Real>
class MotionPerceiver {
public:
    MotionPerceiver(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)), seed_(seed) {
        cfg_.validate();
        declare();
    }

    const ModelConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }
    nn::ParamStore<Real>& params() { return ps_; }
    const nn::ParamStore<Real>& params() const { return ps_; }

    ForwardOut<Real> forward(nn::Binder<Real>& P, const VideoFlows& v,
                             bool refine_slots = true) const {
        v.validate(cfg_);
        auto& g = P.graph();
        const std::size_t N = cfg_.N();
        ForwardOut<Real> out;

        if (cfg_.fsn_enabled) {
            const auto strides = cfg_.active_strides();
            std::vector<Tensor<Real>> channels;
            std::vector<Tensor<Real>> walks;
            for (std::size_t i = 0; i < strides.size(); ++i) {
                const flow::DenseFlow& df = v.flows[i];
                std::vector<Real> raw(df.data.begin(), df.data.end());
                Tensor<Real> o = g.constant({cfg_.T * N, df.row_dim()}, std::move(raw));
                if (cfg_.slots_enabled) {
                    const std::string bank = "slots.s" + std::to_string(strides[i]);
                    snapshot::SlotConfig sc;
                    sc.K = cfg_.K;
                    sc.B = cfg_.B;
                    sc.P = cfg_.P;
                    sc.mu = cfg_.mu;
                    Tensor<Real> z = refine_slots ? snapshot::slot_attention(P, bank, o, sc)
                                                  : P(bank + ".slots0");
                    Tensor<Real> acts = snapshot::activations(o, z);
                    channels.push_back(ad::reshape(acts, {cfg_.T, N, cfg_.K}));
                    if (cfg_.slot_loss)
                        walks.push_back(snapshot::walk_loss(o, z, Real(cfg_.mu)));
                } else {
                    channels.push_back(ad::reshape(o, {cfg_.T, N, df.row_dim()}));
                }
            }
            Tensor<Real> x = channels.size() == 1 ? channels[0] : ad::concat_lastdim(channels);
            x = ad::transpose_last2(x);  // (T, channels, N)
            x = nn::attention_stack(P, "fsn.stage1", x, cfg_.attn_depth);
            x = ad::mean_axis(x, 1);  // (T, N)
            if (cfg_.time_embedding)
                x = ad::add(x, g.constant({cfg_.T, N}, frame_embedding<Real>(cfg_.T, N)));
            x = nn::attention_stack(P, "fsn.stage2", x, cfg_.attn_depth);
            out.f_fsn = ad::reshape(ad::mean_axis(x, 0), {std::size_t(1), N});
            out.flow_logits = nn::linear(P, "head.flow", out.f_fsn);
            if (!walks.empty()) {
                Tensor<Real> acc = walks[0];
                for (std::size_t i = 1; i < walks.size(); ++i) acc = ad::add(acc, walks[i]);
                out.slot = ad::scale(acc, Real(1) / Real(walks.size()));
            }
        } else {
            out.f_fsn = g.zeros({std::size_t(1), N});
        }

        if (cfg_.min_enabled) {
            std::vector<Real> raw(v.minmat.begin(), v.minmat.end());
            Tensor<Real> x = g.constant({cfg_.T, N, std::size_t(4)}, std::move(raw));
            x = ad::transpose_last2(x);  // (T, 4, N)
            x = nn::attention_stack(P, "min.stage1", x, cfg_.attn_depth);
            x = ad::mean_axis(x, 1);
            x = nn::attention_stack(P, "min.stage2", x, cfg_.attn_depth);
            out.f_min = ad::reshape(ad::mean_axis(x, 0), {std::size_t(1), N});
            out.invar_logits = nn::linear(P, "head.invar", out.f_min);
        } else {
            out.f_min = g.zeros({std::size_t(1), N});
        }

        out.fuse_logits =
            nn::linear(P, "head.fuse", ad::concat_lastdim<Real>({out.f_fsn, out.f_min}));
        return out;
    }

    // L = alpha * L_slot + L_flow + L_invar + L_fuse; terms from disabled
    // pathways contribute exactly zero and are reported as zero.
    LossOut<Real> losses(const ForwardOut<Real>& f, int label) const {
        LossOut<Real> out;
        auto check_term = [](const char* term, Tensor<Real> t) {
            const double v = double(t.value()[0]);
            MP_REQUIRE(std::isfinite(v), std::string("non-finite ") + term + " loss");
            return v;
        };

        Tensor<Real> total = ad::cross_entropy_logits(f.fuse_logits, {label});
        out.fuse = check_term("fuse", total);
        if (f.flow_logits.valid()) {
            Tensor<Real> t = ad::cross_entropy_logits(f.flow_logits, {label});
            out.flow = check_term("flow", t);
            total = ad::add(total, t);
        }
        if (f.invar_logits.valid()) {
            Tensor<Real> t = ad::cross_entropy_logits(f.invar_logits, {label});
            out.invar = check_term("invariant", t);
            total = ad::add(total, t);
        }
        if (f.slot.valid()) {
            out.slot = check_term("slot", f.slot);
            total = ad::add(total, ad::scale(f.slot, Real(cfg_.alpha)));
        }
        out.total = total;
        return out;
    }

    int predict_label(const VideoFlows& v, std::vector<Real>* fuse_logits = nullptr) const {
        ad::Graph<Real> g;
        nn::Binder<Real> P(g, const_cast<nn::ParamStore<Real>&>(ps_));
        ForwardOut<Real> f = forward(P, v, cfg_.inference_refine);
        const auto& logits = f.fuse_logits.value();
        if (fuse_logits) *fuse_logits = logits;
        return int(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }

private:
    void declare() {
        const std::size_t N = cfg_.N();
        const std::size_t Y = cfg_.num_classes;
        if (cfg_.fsn_enabled) {
            if (cfg_.slots_enabled) {
                for (std::size_t s : cfg_.active_strides())
                    snapshot::declare_slot_bank(ps_, "slots.s" + std::to_string(s), cfg_.K,
                                                cfg_.flow_dim(s), cfg_.B, seed_);
            }
            nn::declare_attention_stack(ps_, "fsn.stage1", N, cfg_.attn_depth, seed_);
            nn::declare_attention_stack(ps_, "fsn.stage2", N, cfg_.attn_depth, seed_);
            nn::declare_linear(ps_, "head.flow", N, Y, seed_);
        }
        if (cfg_.min_enabled) {
            nn::declare_attention_stack(ps_, "min.stage1", N, cfg_.attn_depth, seed_);
            nn::declare_attention_stack(ps_, "min.stage2", N, cfg_.attn_depth, seed_);
            nn::declare_linear(ps_, "head.invar", N, Y, seed_);
        }
        nn::declare_linear(ps_, "head.fuse", 2 * N, Y, seed_);
    }

    ModelConfig cfg_;
    std::uint64_t seed_;
    nn::ParamStore<Real> ps_;
};

}  // namespace mp::fusion
