#pragma once

#include <cmath>
#include <string>

#include "mp/nn.hpp"
#include "mp/tensor.hpp"

namespace mp::snapshot {

using ad::Tensor;

struct SlotConfig {
    std::size_t K = 6;   // slot count
    std::size_t B = 64;  // projection width
    std::size_t P = 3;   // refinement iterations
    double mu = 0.05;    // walk softmax temperature
    bool scale_by_proj = false;  // false: logits scaled 1/sqrt(D); true: 1/sqrt(B)
};

// One bank per flow stride: initial slots plus biasless projections and the
// GRU that carries slots between refinement iterations.
template <typename Real>
void declare_slot_bank(nn::ParamStore<Real>& ps, const std::string& prefix, std::size_t K,
                       std::size_t D, std::size_t B, std::uint64_t seed) {
    MP_CONFIG_REQUIRE(K >= 1, "slot bank needs at least one slot");
    MP_CONFIG_REQUIRE(D >= 1 && B >= 1, "slot bank dims must be positive");
    {
        // Initial slots drawn with the fan-sum bound sqrt(6 / (K + D)).
        Rng rng(derive_seed(seed, prefix + ".slots0"));
        ps.create(prefix + ".slots0", {K, D}, nn::xavier_uniform<Real>(K, D, K * D, rng));
    }
    nn::declare_matrix(ps, prefix + ".k", D, B, seed);
    nn::declare_matrix(ps, prefix + ".q", D, B, seed);
    nn::declare_matrix(ps, prefix + ".v", D, B, seed);
    nn::declare_gru(ps, prefix + ".gru", B, D, seed);
}

template <typename Real>
struct SlotTrace {
    Tensor<Real> attn;  // S x K, rows sum to 1
    Tensor<Real> u;     // S x K, columns sum to 1
};

// Iterative slot refinement over flow rows O (S x D). Returns the slots after
// P iterations; pass a trace to inspect the final iteration's matrices.
template <typename Real>
Tensor<Real> slot_attention(nn::Binder<Real>& P, const std::string& prefix, Tensor<Real> o,
                            const SlotConfig& cfg, SlotTrace<Real>* trace = nullptr) {
    const ad::Shape& so = o.shape();
    MP_REQUIRE(so.size() == 2, "slot_attention: flows must be [S, D]");
    const std::size_t D = so[1];

    Tensor<Real> wk = P(prefix + ".k");
    Tensor<Real> wq = P(prefix + ".q");
    Tensor<Real> wv = P(prefix + ".v");
    Tensor<Real> z = P(prefix + ".slots0");

    Tensor<Real> ko = ad::matmul(o, wk);  // S x B
    Tensor<Real> vo = ad::matmul(o, wv);  // S x B
    const Real scale = Real(1.0 / std::sqrt(double(cfg.scale_by_proj ? cfg.B : D)));

    for (std::size_t p = 0; p < cfg.P; ++p) {
        Tensor<Real> qz = ad::matmul(z, wq);                          // K x B
        Tensor<Real> logits = ad::scale(ad::matmul_nt(ko, qz), scale);  // S x K
        Tensor<Real> attn = ad::softmax_lastdim(logits);              // rows over slots
        Tensor<Real> colsum = ad::sum_axis(attn, 0);                  // K
        Tensor<Real> u = ad::div_rowvec(attn, colsum);                // columns sum to 1
        Tensor<Real> h = ad::matmul_tn(u, vo);                        // K x B
        z = nn::gru_cell(P, prefix + ".gru", h, z);
        if (trace && p + 1 == cfg.P) {
            trace->attn = attn;
            trace->u = u;
        }
    }
    return z;
}

// Cosine similarity activations between flow rows and slots: (S x K).
template <typename Real>
Tensor<Real> activations(Tensor<Real> o, Tensor<Real> z) {
    return ad::matmul_nt(ad::l2_normalize_lastdim(o), ad::l2_normalize_lastdim(z));
}

// Two-hop stochastic matrix of the walk slots -> flows -> slots (K x K,
// rows sum to 1). Both hops are softmax transitions over cosine similarity.
template <typename Real>
Tensor<Real> walk_round_trip(Tensor<Real> o, Tensor<Real> z, Real mu) {
    Tensor<Real> fo = ad::l2_normalize_lastdim(o);
    Tensor<Real> fz = ad::l2_normalize_lastdim(z);
    Tensor<Real> q_zo = ad::softmax_lastdim(ad::matmul_nt(fz, fo), mu);  // K x S
    Tensor<Real> q_oz = ad::softmax_lastdim(ad::matmul_nt(fo, fz), mu);  // S x K
    return ad::matmul(q_zo, q_oz);
}

// Walks should land back where they started, so the round trip is scored
// against identity through its diagonal.
template <typename Real>
Tensor<Real> walk_loss(Tensor<Real> o, Tensor<Real> z, Real mu) {
    Tensor<Real> diag = ad::gather_diag(walk_round_trip(o, z, mu));
    return ad::scale(ad::mean_all(ad::log_op(diag)), Real(-1));
}

}  // namespace mp::snapshot
