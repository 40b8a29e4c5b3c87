#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "helpers.hpp"
#include "mp/gradcheck.hpp"
#include "mp/optim.hpp"
#include "mp/snapshot.hpp"

using mp::ad::Graph;
using mp::ad::Shape;
using mp::ad::Tensor;
using mp::nn::Binder;
using mp::nn::ParamStore;
using mp::snapshot::SlotConfig;
using mp::snapshot::SlotTrace;

namespace {

template <typename Real>
ParamStore<Real> make_bank(std::size_t K, std::size_t D, std::size_t B, std::uint64_t seed) {
    ParamStore<Real> ps;
    mp::snapshot::declare_slot_bank(ps, "bank", K, D, B, seed);
    return ps;
}

}  // namespace

TEST_CASE("slot bank declaration and refinement shapes", "[snapshot]") {
    const std::size_t K = 6, D = 10, B = 64, S = 30;
    auto ps = make_bank<float>(K, D, B, 11);

    REQUIRE(ps.has("bank.slots0"));
    REQUIRE(ps.entry("bank.slots0").shape == Shape{K, D});
    REQUIRE(ps.entry("bank.k").shape == Shape{D, B});
    REQUIRE(ps.entry("bank.gru.Wz").shape == Shape{B, D});
    REQUIRE(ps.entry("bank.gru.Uz").shape == Shape{D, D});

    Graph<float> g;
    Binder<float> P(g, ps);
    Tensor<float> o = g.constant({S, D}, testutil::cast_vec<float>(testutil::random_vec(S * D, 3)));
    SlotConfig cfg;
    cfg.K = K;
    cfg.B = B;
    SlotTrace<float> trace;
    Tensor<float> z = mp::snapshot::slot_attention(P, "bank", o, cfg, &trace);
    REQUIRE(z.shape() == Shape{K, D});
    REQUIRE(trace.attn.shape() == Shape{S, K});
    REQUIRE(trace.u.shape() == Shape{S, K});

    Tensor<float> act = mp::snapshot::activations(o, z);
    REQUIRE(act.shape() == Shape{S, K});
    for (float v : act.value()) {
        REQUIRE(v <= 1.0f + 1e-6f);
        REQUIRE(v >= -1.0f - 1e-6f);
    }
}

TEST_CASE("initial slots respect the fan-sum uniform bound", "[snapshot]") {
    {
        auto ps = make_bank<double>(6, 8, 4, 21);
        const double bound = std::sqrt(6.0 / (6.0 + 8.0));
        for (double v : ps.entry("bank.slots0").value) REQUIRE(std::abs(v) <= bound);
    }
    {
        // Degenerate single-slot, single-dim bank: bound collapses to sqrt(3).
        auto ps = make_bank<double>(1, 1, 2, 22);
        REQUIRE(std::abs(ps.entry("bank.slots0").value[0]) <= std::sqrt(3.0));
    }
    // Same seed redraws the same values regardless of other declarations.
    auto a = make_bank<double>(3, 5, 4, 33);
    ParamStore<double> b;
    mp::nn::declare_matrix(b, "unrelated", 7, 7, 99);
    mp::snapshot::declare_slot_bank(b, "bank", 3, 5, std::size_t(4), 33);
    REQUIRE(a.entry("bank.slots0").value == b.entry("bank.slots0").value);
    REQUIRE(a.entry("bank.q").value == b.entry("bank.q").value);
}

TEST_CASE("attention rows and mixing columns are stochastic", "[snapshot]") {
    const std::size_t K = 6, D = 8, B = 16, S = 25;
    auto ps = make_bank<double>(K, D, B, 5);
    Graph<double> g;
    Binder<double> P(g, ps);
    Tensor<double> o = g.constant({S, D}, testutil::random_vec(S * D, 7));
    SlotConfig cfg;
    cfg.K = K;
    cfg.B = B;
    SlotTrace<double> trace;
    mp::snapshot::slot_attention(P, "bank", o, cfg, &trace);

    const auto& attn = trace.attn.value();
    for (std::size_t i = 0; i < S; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < K; ++j) {
            REQUIRE(attn[i * K + j] > 0.0);
            row += attn[i * K + j];
        }
        REQUIRE(row == Catch::Approx(1.0).margin(1e-9));
    }
    const auto& u = trace.u.value();
    for (std::size_t j = 0; j < K; ++j) {
        double col = 0.0;
        for (std::size_t i = 0; i < S; ++i) col += u[i * K + j];
        REQUIRE(col == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("walk round trip is row stochastic", "[snapshot]") {
    const std::size_t K = 4, D = 6, S = 18;
    Graph<double> g;
    Tensor<double> o = g.constant({S, D}, testutil::random_vec(S * D, 41));
    Tensor<double> z = g.constant({K, D}, testutil::random_vec(K * D, 42));
    Tensor<double> rt = mp::snapshot::walk_round_trip(o, z, 0.05);
    REQUIRE(rt.shape() == Shape{K, K});
    const auto& v = rt.value();
    for (std::size_t i = 0; i < K; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < K; ++j) {
            REQUIRE(v[i * K + j] >= 0.0);
            row += v[i * K + j];
        }
        REQUIRE(row == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("single slot degenerates to uniform mixing", "[snapshot]") {
    const std::size_t K = 1, D = 5, B = 7, S = 12;
    auto ps = make_bank<double>(K, D, B, 17);
    const std::vector<double> o_data = testutil::random_vec(S * D, 19);

    Graph<double> g;
    Binder<double> P(g, ps);
    Tensor<double> o = g.constant({S, D}, o_data);
    SlotConfig cfg;
    cfg.K = K;
    cfg.B = B;
    SlotTrace<double> trace;
    Tensor<double> z = mp::snapshot::slot_attention(P, "bank", o, cfg, &trace);

    // A one-column softmax is exactly 1 everywhere, so mixing weights are 1/S.
    for (double a : trace.attn.value()) REQUIRE(a == 1.0);
    for (double u : trace.u.value()) REQUIRE(u == Catch::Approx(1.0 / double(S)).margin(1e-15));

    // The refined slot must match a plain GRU ladder fed the mean projected row.
    Graph<double> g2;
    Binder<double> P2(g2, ps);
    Tensor<double> o2 = g2.constant({S, D}, o_data);
    Tensor<double> vo = mp::ad::matmul(o2, P2("bank.v"));
    Tensor<double> h = mp::ad::reshape(mp::ad::mean_axis(vo, 0), {1, B});
    Tensor<double> zm = P2("bank.slots0");
    for (int p = 0; p < 3; ++p) zm = mp::nn::gru_cell(P2, "bank.gru", h, zm);
    const auto& za = z.value();
    const auto& zb = zm.value();
    for (std::size_t i = 0; i < za.size(); ++i)
        REQUIRE(za[i] == Catch::Approx(zb[i]).margin(1e-12));

    // One slot also collapses the walk: the round trip is the 1x1 identity.
    Graph<double> g3;
    Tensor<double> o3 = g3.constant({S, D}, o_data);
    Tensor<double> z3 = g3.constant({1, D}, testutil::random_vec(D, 23));
    Tensor<double> loss = mp::snapshot::walk_loss(o3, z3, 0.05);
    REQUIRE(std::abs(loss.value()[0]) < 1e-12);
}

TEST_CASE("slot refinement is bitwise deterministic", "[snapshot]") {
    const std::size_t K = 4, D = 6, B = 8, S = 15;
    auto ps = make_bank<float>(K, D, B, 29);
    const auto o_data = testutil::cast_vec<float>(testutil::random_vec(S * D, 31));
    SlotConfig cfg;
    cfg.K = K;
    cfg.B = B;

    std::vector<float> first, second;
    for (int round = 0; round < 2; ++round) {
        Graph<float> g;
        Binder<float> P(g, ps);
        Tensor<float> o = g.constant({S, D}, o_data);
        Tensor<float> z = mp::snapshot::slot_attention(P, "bank", o, cfg);
        (round == 0 ? first : second) = z.value();
    }
    REQUIRE(first == second);
}

TEST_CASE("well separated clusters give near zero walk loss", "[snapshot]") {
    // Four flow rows per axis direction, slots sitting exactly on the axes.
    const std::size_t K = 3, D = 3, S = 12;
    std::vector<double> o_data(S * D, 0.0);
    mp::Rng rng(57);
    for (std::size_t i = 0; i < S; ++i) o_data[i * D + i % K] = rng.uniform(0.5, 2.0);
    std::vector<double> z_data(K * D, 0.0);
    for (std::size_t k = 0; k < K; ++k) z_data[k * D + k] = 1.0;

    Graph<double> g;
    Tensor<double> o = g.constant({S, D}, o_data);
    Tensor<double> z = g.constant({K, D}, z_data);
    Tensor<double> loss = mp::snapshot::walk_loss(o, z, 0.05);
    REQUIRE(loss.value()[0] < 1e-6);
    REQUIRE(loss.value()[0] >= 0.0);
}

TEST_CASE("slot pipeline gradients match central differences", "[snapshot]") {
    const std::size_t K = 2, D = 4, B = 3, S = 6;
    auto ps = make_bank<double>(K, D, B, 61);
    const std::vector<double> o_data = testutil::random_vec(S * D, 67, -1.0, 1.0);
    const std::vector<double> w_data = testutil::random_vec(S * K, 71, -1.0, 1.0);
    SlotConfig cfg;
    cfg.K = K;
    cfg.B = B;
    cfg.P = 2;

    auto forward = [&](ParamStore<double>& store, bool want_grads) {
        Graph<double> g;
        Binder<double> P(g, store);
        Tensor<double> o = g.constant({S, D}, o_data);
        Tensor<double> z = mp::snapshot::slot_attention(P, "bank", o, cfg);
        Tensor<double> walk = mp::snapshot::walk_loss(o, z, 0.3);
        Tensor<double> act = mp::snapshot::activations(o, z);
        Tensor<double> probe = mp::ad::mean_all(mp::ad::mul(act, g.constant({S, K}, w_data)));
        Tensor<double> loss = mp::ad::add(walk, probe);
        if (want_grads) {
            store.zero_grads();
            g.backward(loss);
            P.harvest();
        }
        return g.value(loss)[0];
    };
    const double worst = mp::gradcheck::check_param_store(
        ps, [&](ParamStore<double>& s) { return forward(s, true); },
        [&](ParamStore<double>& s) { return forward(s, false); });
    REQUIRE(worst < 1e-5);
}

TEST_CASE("walk loss falls when slots are trained on clustered flows", "[snapshot]") {
    // Three noisy clusters along coordinate axes; only the slot bank trains.
    const std::size_t K = 3, D = 6, B = 8, S = 42;
    std::vector<double> curve_sum(51, 0.0);

    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        std::vector<double> o_data(S * D);
        mp::Rng rng(mp::derive_seed(997, "clusters" + std::to_string(seed)));
        for (std::size_t i = 0; i < S; ++i) {
            for (std::size_t d = 0; d < D; ++d)
                o_data[i * D + d] = 0.05 * rng.normal() + (d == i % K ? 1.0 : 0.0);
        }

        auto ps = make_bank<double>(K, D, B, seed);
        mp::optim::AdamW<double> opt;
        opt.lr0 = 3e-3;
        opt.cosine = false;
        SlotConfig cfg;
        cfg.K = K;
        cfg.B = B;

        for (int step = 0; step <= 50; ++step) {
            Graph<double> g;
            Binder<double> P(g, ps);
            Tensor<double> o = g.constant({S, D}, o_data);
            Tensor<double> z = mp::snapshot::slot_attention(P, "bank", o, cfg);
            Tensor<double> loss = mp::snapshot::walk_loss(o, z, 0.05);
            curve_sum[std::size_t(step)] += g.value(loss)[0];
            if (step == 50) break;
            ps.zero_grads();
            g.backward(loss);
            P.harvest();
            opt.step(ps);
        }
    }

    const double first = curve_sum.front() / 5.0;
    const double last = curve_sum.back() / 5.0;
    REQUIRE(last < 0.5 * first);
    // Averaged over seeds the optimization never backtracks by a visible margin.
    for (std::size_t s = 1; s < curve_sum.size(); ++s)
        REQUIRE(curve_sum[s] <= curve_sum[s - 1] + 0.05 * curve_sum.front());
}

TEST_CASE("slot attention rejects malformed input", "[snapshot]") {
    auto ps = make_bank<float>(2, 4, 3, 83);
    Graph<float> g;
    Binder<float> P(g, ps);
    SlotConfig cfg;
    cfg.K = 2;
    cfg.B = 3;
    Tensor<float> bad = g.constant({2, 3, 4}, std::vector<float>(24, 0.1f));
    REQUIRE_THROWS_AS(mp::snapshot::slot_attention(P, "bank", bad, cfg), mp::ContractViolation);
    REQUIRE_THROWS_AS(mp::snapshot::declare_slot_bank(ps, "bank2", 0, 4, std::size_t(3), 1),
                      mp::ConfigError);
}
