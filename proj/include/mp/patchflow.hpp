#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <map>
#include <vector>

#include "mp/common.hpp"
#include "mp/featseq.hpp"

namespace mp::flow {

inline constexpr double kDefaultTau = 0.001;
inline constexpr double kDefaultGamma = 0.2;
inline constexpr float kFlowFloor = 1e-6f;

using EMatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Patch centers in grid units: patch k sits at (k mod W, k div W).
inline std::vector<double> grid_coords(std::size_t H, std::size_t W) {
    std::vector<double> g(H * W * 2);
    for (std::size_t k = 0; k < H * W; ++k) {
        g[2 * k] = double(k % W);
        g[2 * k + 1] = double(k / W);
    }
    return g;
}

namespace detail {

inline EMatD l2_normalized_rows(const float* data, std::size_t n, std::size_t c) {
    EMatD out(n, c);
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            const double v = double(data[i * c + j]);
            out(i, j) = v;
            sq += v * v;
        }
        const double nrm = std::sqrt(sq);
        if (nrm == 0.0)
            out.row(i).setZero();
        else
            out.row(i) /= nrm;
    }
    return out;
}

inline void softmax_rows_inplace(EMatD& m, double tau) {
    MP_CONFIG_REQUIRE(tau > 0.0, "adjacency temperature must be positive");
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double mx = m.row(i).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            const double e = std::exp((m(i, j) - mx) / tau);
            m(i, j) = e;
            sum += e;
        }
        m.row(i) /= sum;
    }
}

}  // namespace detail

// Row-stochastic soft correspondence between two frames' descriptors:
// softmax over rows of (f(a) f(b)^T / tau) with f the rowwise l2 normalizer.
inline std::vector<double> adjacency(const float* fa, const float* fb, std::size_t n,
                                     std::size_t c, double tau = kDefaultTau) {
    const EMatD an = detail::l2_normalized_rows(fa, n, c);
    const EMatD bn = detail::l2_normalized_rows(fb, n, c);
    EMatD q(n, n);
    q.noalias() = an * bn.transpose();
    detail::softmax_rows_inplace(q, tau);
    return std::vector<double>(q.data(), q.data() + n * n);
}

// Soft-tracked patch positions G_hat[t][m] = Q(F_t, F_m) G for every frame
// pair, with byte-identical frames deduplicated before the quadratic work.
class TransitionTable {
public:
    TransitionTable() = default;

    explicit TransitionTable(const FeatureSequence& fs, double tau = kDefaultTau)
        : T_(fs.T), N_(fs.N()) {
        fs.validate();
        const std::size_t C = fs.C;
        const std::vector<double> grid = grid_coords(fs.H, fs.W);
        Eigen::Map<const EMatD> gmap(grid.data(), N_, 2);

        // Group byte-identical frames so repeated-frame clips only pay for
        // their unique content.
        std::vector<std::size_t> rep(T_);
        std::map<std::uint64_t, std::vector<std::size_t>> buckets;
        std::vector<std::size_t> uniques;
        for (std::size_t t = 0; t < T_; ++t) {
            const float* f = fs.frame(t);
            const std::uint64_t h = fnv1a64(f, N_ * C * sizeof(float));
            auto& bucket = buckets[h];
            std::size_t found = T_;
            for (std::size_t u : bucket)
                if (std::memcmp(fs.frame(u), f, N_ * C * sizeof(float)) == 0) {
                    found = u;
                    break;
                }
            if (found == T_) {
                bucket.push_back(t);
                uniques.push_back(t);
                found = t;
            }
            rep[t] = found;
        }

        std::map<std::size_t, std::size_t> uidx;
        for (std::size_t i = 0; i < uniques.size(); ++i) uidx[uniques[i]] = i;
        const std::size_t U = uniques.size();

        std::vector<EMatD> normed(U);
        for (std::size_t i = 0; i < U; ++i)
            normed[i] = detail::l2_normalized_rows(fs.frame(uniques[i]), N_, C);

        std::vector<double> upairs(U * U * N_ * 2);
        for (std::size_t a = 0; a < U; ++a)
            for (std::size_t b = 0; b < U; ++b) {
                EMatD q(N_, N_);
                q.noalias() = normed[a] * normed[b].transpose();
                detail::softmax_rows_inplace(q, tau);
                Eigen::Map<EMatD> dst(upairs.data() + (a * U + b) * N_ * 2, N_, 2);
                dst.noalias() = q * gmap;
            }

        g_hat_.resize(T_ * T_ * N_ * 2);
        for (std::size_t t = 0; t < T_; ++t)
            for (std::size_t m = 0; m < T_; ++m) {
                const std::size_t src = (uidx[rep[t]] * U + uidx[rep[m]]) * N_ * 2;
                std::memcpy(g_hat_.data() + (t * T_ + m) * N_ * 2, upairs.data() + src,
                            N_ * 2 * sizeof(double));
            }
    }

    // Table with explicitly planted tracked positions; g_hat is [t][m][n][2].
    static TransitionTable from_raw(std::size_t T, std::size_t N, std::vector<double> g_hat) {
        MP_REQUIRE(g_hat.size() == T * T * N * 2, "TransitionTable::from_raw: size mismatch");
        TransitionTable out;
        out.T_ = T;
        out.N_ = N;
        out.g_hat_ = std::move(g_hat);
        return out;
    }

    std::size_t T() const { return T_; }
    std::size_t N() const { return N_; }

    // Tracked positions of reference-frame t's patches within frame m; N x 2.
    const double* at(std::size_t t, std::size_t m) const {
        MP_REQUIRE(t < T_ && m < T_, "TransitionTable::at: frame index out of range");
        return g_hat_.data() + (t * T_ + m) * N_ * 2;
    }

    // View of the same table under a frame permutation: frame i of the
    // permuted clip is frame perm[i] of the original.
    TransitionTable permuted(const std::vector<std::size_t>& perm) const {
        MP_REQUIRE(perm.size() == T_, "TransitionTable::permuted: wrong permutation length");
        TransitionTable out;
        out.T_ = T_;
        out.N_ = N_;
        out.g_hat_.resize(g_hat_.size());
        for (std::size_t t = 0; t < T_; ++t)
            for (std::size_t m = 0; m < T_; ++m) {
                MP_REQUIRE(perm[t] < T_, "TransitionTable::permuted: index out of range");
                std::memcpy(out.g_hat_.data() + (t * T_ + m) * N_ * 2,
                            at(perm[t], perm[m]), N_ * 2 * sizeof(double));
            }
        return out;
    }

    std::size_t memory_bytes() const { return g_hat_.size() * sizeof(double); }

private:
    std::size_t T_ = 0;
    std::size_t N_ = 0;
    std::vector<double> g_hat_;
};

// Unthresholded flow of reference-frame t's patches between frames m and m+s.
inline std::vector<double> consecutive_flows(const TransitionTable& tab, std::size_t ref_t,
                                             std::size_t m, std::size_t s) {
    MP_REQUIRE(s >= 1, "consecutive_flows: stride must be >= 1");
    MP_REQUIRE(ref_t < tab.T(), "consecutive_flows: reference frame out of range");
    MP_REQUIRE(m % s == 0, "consecutive_flows: frame m not on the stride-s subsample");
    MP_REQUIRE(m + s <= tab.T() - 1, "consecutive_flows: frame m+s out of range");
    const double* a = tab.at(ref_t, m);
    const double* b = tab.at(ref_t, m + s);
    std::vector<double> out(tab.N() * 2);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = b[i] - a[i];
    return out;
}

// Net flow from frame m to the reference frame t, in t's patch frame. The
// self term can come from the computed table (default) or the raw grid.
enum class SelfTransition { computed, grid };

inline std::vector<double> pairwise_flow(const TransitionTable& tab, std::size_t ref_t,
                                         std::size_t m,
                                         SelfTransition self = SelfTransition::computed,
                                         std::size_t grid_w = 0) {
    const std::size_t n2 = tab.N() * 2;
    std::vector<double> out(n2);
    const double* gm = tab.at(ref_t, m);
    if (self == SelfTransition::computed) {
        const double* gt = tab.at(ref_t, ref_t);
        for (std::size_t i = 0; i < n2; ++i) out[i] = gt[i] - gm[i];
    } else {
        MP_REQUIRE(grid_w > 0, "pairwise_flow: grid mode needs the grid width");
        for (std::size_t k = 0; k < tab.N(); ++k) {
            out[2 * k] = double(k % grid_w) - gm[2 * k];
            out[2 * k + 1] = double(k / grid_w) - gm[2 * k + 1];
        }
    }
    return out;
}

// Stride-s snapshot flows for every reference frame: layout [t][n][axis][j]
// with J = T/s - 1 steps, so each (t, n) row is (dx_0..dx_{J-1}, dy_0..dy_{J-1}).
// Stored in float, the precision the model consumes.
struct DenseFlow {
    std::size_t stride = 1;
    std::size_t T = 0;
    std::size_t N = 0;
    std::size_t steps = 0;
    std::vector<float> data;

    std::size_t row_dim() const { return 2 * steps; }

    const float* row(std::size_t t, std::size_t n) const {
        return data.data() + (t * N + n) * 2 * steps;
    }
};

inline DenseFlow dense_flow(const TransitionTable& tab, std::size_t stride,
                            double gamma = kDefaultGamma, float floor_value = kFlowFloor,
                            bool gamma_enabled = true, bool ref0_only = false) {
    MP_REQUIRE(stride >= 1, "dense_flow: stride must be >= 1");
    MP_REQUIRE(tab.T() % stride == 0, "dense_flow: clip length not divisible by stride");
    const std::size_t T = tab.T(), N = tab.N();
    const std::size_t J = T / stride - 1;
    MP_REQUIRE(J >= 1, "dense_flow: stride leaves fewer than two frames");

    DenseFlow out;
    out.stride = stride;
    out.T = T;
    out.N = N;
    out.steps = J;
    out.data.resize(T * N * 2 * J);

    const float g = float(gamma);
    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t ref = ref0_only ? 0 : t;
        for (std::size_t j = 0; j < J; ++j) {
            const double* a = tab.at(ref, j * stride);
            const double* b = tab.at(ref, (j + 1) * stride);
            for (std::size_t n = 0; n < N; ++n) {
                float dx = float(b[2 * n] - a[2 * n]);
                float dy = float(b[2 * n + 1] - a[2 * n + 1]);
                if (gamma_enabled && std::sqrt(dx * dx + dy * dy) < g) {
                    dx = floor_value;
                    dy = floor_value;
                }
                float* row = out.data.data() + (t * N + n) * 2 * J;
                row[j] = dx;
                row[J + j] = dy;
            }
        }
    }
    return out;
}

}  // namespace mp::flow
