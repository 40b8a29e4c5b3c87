#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mp/common.hpp"
#include "mp/tensor.hpp"

namespace mp::nn {

using ad::Shape;
using ad::Tensor;

// Named parameters with their accumulated gradients and optimizer moments.
// Values live here; each per-video graph binds copies as requires-grad leaves
// and gradients are harvested back after the backward sweep.
template <typename Real>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Shape shape;
        std::vector<Real> value;
        std::vector<Real> grad;
        std::vector<Real> m;
        std::vector<Real> v;
    };

    std::size_t create(std::string name, Shape shape, std::vector<Real> value) {
        MP_REQUIRE(!index_.count(name), "parameter '" + name + "' already exists");
        MP_REQUIRE(value.size() == ad::numel(shape), "parameter '" + name + "': bad init size");
        Entry e;
        e.name = std::move(name);
        e.shape = std::move(shape);
        e.value = std::move(value);
        e.grad.assign(e.value.size(), Real(0));
        e.m.assign(e.value.size(), Real(0));
        e.v.assign(e.value.size(), Real(0));
        index_[e.name] = entries_.size();
        entries_.push_back(std::move(e));
        return entries_.size() - 1;
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        MP_REQUIRE(it != index_.end(), "unknown parameter '" + name + "'");
        return it->second;
    }

    Entry& entry(std::size_t i) { return entries_[i]; }
    const Entry& entry(std::size_t i) const { return entries_[i]; }
    Entry& entry(const std::string& name) { return entries_[index_of(name)]; }
    const Entry& entry(const std::string& name) const { return entries_[index_of(name)]; }
    std::size_t size() const { return entries_.size(); }

    void zero_grads() {
        for (auto& e : entries_) std::fill(e.grad.begin(), e.grad.end(), Real(0));
    }

    std::size_t total_scalars() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

// Per-graph view of a ParamStore: operator() binds a parameter into the graph
// and remembers the node so harvest() can pull gradients back out.
template <typename Real>
class Binder {
public:
    Binder(ad::Graph<Real>& g, ParamStore<Real>& ps) : g_(&g), ps_(&ps) {}

    Tensor<Real> operator()(const std::string& name) {
        const std::size_t pi = ps_->index_of(name);
        auto& e = ps_->entry(pi);
        Tensor<Real> t = g_->leaf(e.shape, e.value, true);
        used_.emplace_back(pi, t.idx);
        return t;
    }

    // Adds scale * (graph gradients) into the store's accumulators.
    void harvest(Real scale = Real(1)) {
        for (auto [pi, node] : used_) {
            const auto& gr = g_->node(node).grad;
            if (gr.empty()) continue;
            auto& dst = ps_->entry(pi).grad;
            for (std::size_t k = 0; k < gr.size(); ++k) dst[k] += scale * gr[k];
        }
    }

    ad::Graph<Real>& graph() { return *g_; }

private:
    ad::Graph<Real>* g_;
    ParamStore<Real>* ps_;
    std::vector<std::pair<std::size_t, std::size_t>> used_;
};

// --- initializers -----------------------------------------------------------

template <typename Real>
std::vector<Real> xavier_uniform(std::size_t fan_in, std::size_t fan_out,
                                 std::size_t count, Rng& rng) {
    const double bound = std::sqrt(6.0 / double(fan_in + fan_out));
    std::vector<Real> v(count);
    for (auto& x : v) x = Real(rng.uniform(-bound, bound));
    return v;
}

template <typename Real>
std::vector<Real> fill_value(std::size_t count, Real value) {
    return std::vector<Real>(count, value);
}

// Parameter declaration helpers; each parameter gets its own seed stream so
// creation order never changes the draw.
template <typename Real>
void declare_matrix(ParamStore<Real>& ps, const std::string& name, std::size_t in,
                    std::size_t out, std::uint64_t master_seed) {
    Rng rng(derive_seed(master_seed, name));
    ps.create(name, {in, out}, xavier_uniform<Real>(in, out, in * out, rng));
}

template <typename Real>
void declare_bias(ParamStore<Real>& ps, const std::string& name, std::size_t n) {
    ps.create(name, {n}, fill_value<Real>(n, Real(0)));
}

template <typename Real>
void declare_linear(ParamStore<Real>& ps, const std::string& prefix, std::size_t in,
                    std::size_t out, std::uint64_t seed, bool bias = true) {
    declare_matrix(ps, prefix + ".W", in, out, seed);
    if (bias) declare_bias(ps, prefix + ".b", out);
}

template <typename Real>
void declare_layer_norm(ParamStore<Real>& ps, const std::string& prefix, std::size_t d) {
    ps.create(prefix + ".g", {d}, fill_value<Real>(d, Real(1)));
    ps.create(prefix + ".b", {d}, fill_value<Real>(d, Real(0)));
}

// --- functional layers --------------------------------------------------------

template <typename Real>
Tensor<Real> linear(Binder<Real>& P, const std::string& prefix, Tensor<Real> x,
                    bool bias = true) {
    Tensor<Real> y = ad::matmul(x, P(prefix + ".W"));
    if (bias) y = ad::add_rowvec(y, P(prefix + ".b"));
    return y;
}

template <typename Real>
void declare_attention_block(ParamStore<Real>& ps, const std::string& prefix,
                             std::size_t d, std::uint64_t seed) {
    declare_layer_norm(ps, prefix + ".ln1", d);
    declare_linear(ps, prefix + ".q", d, d, seed);
    declare_linear(ps, prefix + ".k", d, d, seed);
    declare_linear(ps, prefix + ".v", d, d, seed);
    declare_linear(ps, prefix + ".o", d, d, seed);
    declare_layer_norm(ps, prefix + ".ln2", d);
    declare_linear(ps, prefix + ".mlp1", d, 2 * d, seed);
    declare_linear(ps, prefix + ".mlp2", 2 * d, d, seed);
}

// Pre-norm single-head self-attention with scale 1/sqrt(d) and a ratio-2 GELU
// MLP, both with residual connections. x is [..., S, d].
template <typename Real>
Tensor<Real> attention_block(Binder<Real>& P, const std::string& prefix, Tensor<Real> x) {
    const Shape& s = x.shape();
    MP_REQUIRE(s.size() >= 2, "attention_block: input must be [..., S, d]");
    const std::size_t d = s.back();
    Tensor<Real> h = ad::layer_norm(x, P(prefix + ".ln1.g"), P(prefix + ".ln1.b"));
    Tensor<Real> q = linear(P, prefix + ".q", h);
    Tensor<Real> k = linear(P, prefix + ".k", h);
    Tensor<Real> v = linear(P, prefix + ".v", h);
    Tensor<Real> logits = ad::scale(ad::matmul_nt(q, k), Real(1) / Real(std::sqrt(double(d))));
    Tensor<Real> attn = ad::softmax_lastdim(logits);
    Tensor<Real> mixed = ad::matmul(attn, v);
    Tensor<Real> x1 = ad::add(x, linear(P, prefix + ".o", mixed));
    Tensor<Real> h2 = ad::layer_norm(x1, P(prefix + ".ln2.g"), P(prefix + ".ln2.b"));
    Tensor<Real> m = linear(P, prefix + ".mlp2", ad::gelu(linear(P, prefix + ".mlp1", h2)));
    return ad::add(x1, m);
}

template <typename Real>
void declare_attention_stack(ParamStore<Real>& ps, const std::string& prefix,
                             std::size_t d, std::size_t depth, std::uint64_t seed) {
    for (std::size_t i = 0; i < depth; ++i)
        declare_attention_block(ps, prefix + ".block" + std::to_string(i), d, seed);
}

template <typename Real>
Tensor<Real> attention_stack(Binder<Real>& P, const std::string& prefix, Tensor<Real> x,
                             std::size_t depth) {
    for (std::size_t i = 0; i < depth; ++i)
        x = attention_block(P, prefix + ".block" + std::to_string(i), x);
    return x;
}

// --- GRU cell -------------------------------------------------------------------

template <typename Real>
void declare_gru(ParamStore<Real>& ps, const std::string& prefix, std::size_t in,
                 std::size_t hidden, std::uint64_t seed) {
    for (const char* gate : {"z", "r", "h"}) {
        declare_matrix(ps, prefix + ".W" + gate, in, hidden, seed);
        declare_matrix(ps, prefix + ".U" + gate, hidden, hidden, seed);
        declare_bias(ps, prefix + ".b" + gate, hidden);
    }
}

// Fully gated update: h' = z @ h + (1 - z) @ cand. With all-zero parameters
// this collapses to h' = 0.5 * h.
template <typename Real>
Tensor<Real> gru_cell(Binder<Real>& P, const std::string& prefix, Tensor<Real> x,
                      Tensor<Real> h) {
    auto gate = [&](const char* gname, Tensor<Real> hin) {
        Tensor<Real> pre = ad::add(ad::matmul(x, P(prefix + ".W" + gname)),
                                   ad::matmul(hin, P(prefix + ".U" + gname)));
        return ad::add_rowvec(pre, P(prefix + ".b" + gname));
    };
    Tensor<Real> z = ad::sigmoid(gate("z", h));
    Tensor<Real> r = ad::sigmoid(gate("r", h));
    Tensor<Real> cand = ad::tanh_op(gate("h", ad::mul(r, h)));
    Tensor<Real> keep = ad::mul(z, h);
    Tensor<Real> update = ad::mul(ad::affine(z, Real(-1), Real(1)), cand);
    return ad::add(keep, update);
}

// --- sinusoidal time embedding ----------------------------------------------------

// Row t: (sin(t/10000^(2i/d)), cos(t/10000^(2i/d))) pairs. d must be even;
// callers pad odd token dims before adding this.
template <typename Real>
std::vector<Real> time_embedding(std::size_t T, std::size_t d) {
    MP_CONFIG_REQUIRE(d % 2 == 0, "time embedding dimension must be even");
    std::vector<Real> out(T * d);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t i = 0; i < d / 2; ++i) {
            const double freq = std::pow(10000.0, -2.0 * double(i) / double(d));
            const double arg = double(t) * freq;
            out[t * d + 2 * i] = Real(std::sin(arg));
            out[t * d + 2 * i + 1] = Real(std::cos(arg));
        }
    return out;
}

}  // namespace mp::nn
