#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mp/common.hpp"

namespace mp::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) { return checked_product(s); }

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

template <typename Real>
class Graph;

template <typename Real>
struct Tensor {
    Graph<Real>* graph = nullptr;
    std::size_t idx = 0;

    bool valid() const { return graph != nullptr; }
    const Shape& shape() const;
    const std::vector<Real>& value() const;
};

// Tape of nodes in creation order. One backward sweep per graph; parameters
// enter as requires-grad leaves and their gradients are read back afterwards.
template <typename Real>
class Graph {
public:
    struct Node {
        Shape shape;
        std::vector<Real> value;
        std::vector<Real> grad;
        std::vector<std::uint32_t> inputs;
        bool needs_grad = false;
        std::function<void(Graph&, std::size_t)> back;
    };

    bool check_finite = true;

    Tensor<Real> leaf(Shape shape, std::vector<Real> value, bool requires_grad = false) {
        MP_REQUIRE(value.size() == numel(shape), "leaf: value size does not match shape " + shape_str(shape));
        if (check_finite) require_finite("leaf", value);
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.needs_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    Tensor<Real> constant(Shape shape, std::vector<Real> value) {
        return leaf(std::move(shape), std::move(value), false);
    }

    Tensor<Real> zeros(Shape shape) {
        std::vector<Real> v(numel(shape), Real(0));
        return leaf(std::move(shape), std::move(v), false);
    }

    Tensor<Real> make_node(const char* op, Shape shape, std::vector<Real> value,
                           std::vector<std::uint32_t> inputs,
                           std::function<void(Graph&, std::size_t)> back) {
        MP_REQUIRE(value.size() == numel(shape),
                   std::string(op) + ": output size does not match shape " + shape_str(shape));
        if (check_finite) require_finite(op, value);
        Node n;
        n.shape = std::move(shape);
        n.value = std::move(value);
        n.inputs = std::move(inputs);
        for (auto i : n.inputs) {
            if (nodes_[i].needs_grad) {
                n.needs_grad = true;
                break;
            }
        }
        if (n.needs_grad) n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return {this, nodes_.size() - 1};
    }

    Node& node(std::size_t i) { return nodes_[i]; }
    const Node& node(std::size_t i) const { return nodes_[i]; }
    std::size_t num_nodes() const { return nodes_.size(); }

    const Shape& shape(Tensor<Real> t) const { return nodes_[t.idx].shape; }
    const std::vector<Real>& value(Tensor<Real> t) const { return nodes_[t.idx].value; }

    const std::vector<Real>& grad(Tensor<Real> t) const {
        const Node& n = nodes_[t.idx];
        MP_REQUIRE(n.needs_grad, "grad: tensor does not track gradients");
        MP_REQUIRE(!n.grad.empty(), "grad: backward has not populated this tensor");
        return n.grad;
    }

    // Accumulation buffer for an input during backward; null when untracked.
    Real* grad_buf(std::size_t i) {
        Node& n = nodes_[i];
        if (!n.needs_grad) return nullptr;
        if (n.grad.empty()) n.grad.assign(n.value.size(), Real(0));
        return n.grad.data();
    }

    void add_grad(std::size_t i, const Real* d, std::size_t count) {
        Real* g = grad_buf(i);
        if (!g) return;
        MP_REQUIRE(count == nodes_[i].value.size(), "add_grad: size mismatch");
        for (std::size_t k = 0; k < count; ++k) g[k] += d[k];
    }

    void backward(Tensor<Real> root) {
        MP_REQUIRE(root.graph == this, "backward: tensor belongs to another graph");
        MP_REQUIRE(numel(nodes_[root.idx].shape) == 1, "backward: root must be a scalar");
        MP_REQUIRE(!swept_, "backward: graph already swept");
        swept_ = true;
        if (!nodes_[root.idx].needs_grad) return;

        std::vector<char> reachable(root.idx + 1, 0);
        reachable[root.idx] = 1;
        for (std::size_t i = root.idx + 1; i-- > 0;) {
            if (!reachable[i]) continue;
            for (auto in : nodes_[i].inputs) reachable[in] = 1;
        }

        nodes_[root.idx].grad.assign(1, Real(1));
        for (std::size_t i = root.idx + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!reachable[i] || !n.needs_grad || !n.back) continue;
            if (n.grad.empty()) n.grad.assign(n.value.size(), Real(0));
            n.back(*this, i);
        }
    }

private:
    static void require_finite(const char* op, const std::vector<Real>& v) {
        for (Real x : v) {
            if (!std::isfinite(static_cast<double>(x)))
                throw ContractViolation(std::string("non-finite value produced by op '") + op + "'");
        }
    }

    std::vector<Node> nodes_;
    bool swept_ = false;
};

template <typename Real>
const Shape& Tensor<Real>::shape() const { return graph->shape(*this); }

template <typename Real>
const std::vector<Real>& Tensor<Real>::value() const { return graph->value(*this); }

namespace detail {

template <typename Real>
using EMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MapM = Eigen::Map<EMat<Real>>;
template <typename Real>
using CMapM = Eigen::Map<const EMat<Real>>;

template <typename Real>
void require_same_graph(Tensor<Real> a, Tensor<Real> b, const char* op) {
    MP_REQUIRE(a.graph != nullptr && a.graph == b.graph,
               std::string(op) + ": tensors belong to different graphs");
}

inline std::size_t leading(const Shape& s, std::size_t keep_last) {
    std::size_t n = 1;
    for (std::size_t i = 0; i + keep_last < s.size(); ++i) n *= s[i];
    return n;
}

inline bool same_leading(const Shape& a, const Shape& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i + 2 < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

}  // namespace detail

// --- elementwise ----------------------------------------------------------

template <typename Real>
Tensor<Real> add(Tensor<Real> a, Tensor<Real> b) {
    detail::require_same_graph(a, b, "add");
    auto& g = *a.graph;
    MP_REQUIRE(g.shape(a) == g.shape(b), "add: shape mismatch " + shape_str(g.shape(a)) + " vs " + shape_str(g.shape(b)));
    const auto& va = g.value(a);
    const auto& vb = g.value(b);
    std::vector<Real> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] + vb[i];
    return g.make_node("add", g.shape(a), std::move(out), {std::uint32_t(a.idx), std::uint32_t(b.idx)},
                       [ai = a.idx, bi = b.idx](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           g.add_grad(ai, d.data(), d.size());
                           g.add_grad(bi, d.data(), d.size());
                       });
}

template <typename Real>
Tensor<Real> sub(Tensor<Real> a, Tensor<Real> b) {
    detail::require_same_graph(a, b, "sub");
    auto& g = *a.graph;
    MP_REQUIRE(g.shape(a) == g.shape(b), "sub: shape mismatch");
    const auto& va = g.value(a);
    const auto& vb = g.value(b);
    std::vector<Real> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] - vb[i];
    return g.make_node("sub", g.shape(a), std::move(out), {std::uint32_t(a.idx), std::uint32_t(b.idx)},
                       [ai = a.idx, bi = b.idx](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           g.add_grad(ai, d.data(), d.size());
                           if (Real* gb = g.grad_buf(bi))
                               for (std::size_t k = 0; k < d.size(); ++k) gb[k] -= d[k];
                       });
}

template <typename Real>
Tensor<Real> mul(Tensor<Real> a, Tensor<Real> b) {
    detail::require_same_graph(a, b, "mul");
    auto& g = *a.graph;
    MP_REQUIRE(g.shape(a) == g.shape(b), "mul: shape mismatch");
    const auto& va = g.value(a);
    const auto& vb = g.value(b);
    std::vector<Real> out(va.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = va[i] * vb[i];
    return g.make_node("mul", g.shape(a), std::move(out), {std::uint32_t(a.idx), std::uint32_t(b.idx)},
                       [ai = a.idx, bi = b.idx](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           const auto& va = g.node(ai).value;
                           const auto& vb = g.node(bi).value;
                           if (Real* ga = g.grad_buf(ai))
                               for (std::size_t k = 0; k < d.size(); ++k) ga[k] += d[k] * vb[k];
                           if (Real* gb = g.grad_buf(bi))
                               for (std::size_t k = 0; k < d.size(); ++k) gb[k] += d[k] * va[k];
                       });
}

// y = a*x + b with scalar constants.
template <typename Real>
Tensor<Real> affine(Tensor<Real> x, Real a, Real b) {
    auto& g = *x.graph;
    const auto& vx = g.value(x);
    std::vector<Real> out(vx.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * vx[i] + b;
    return g.make_node("affine", g.shape(x), std::move(out), {std::uint32_t(x.idx)},
                       [xi = x.idx, a](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t k = 0; k < d.size(); ++k) gx[k] += a * d[k];
                       });
}

template <typename Real>
Tensor<Real> scale(Tensor<Real> x, Real a) { return affine(x, a, Real(0)); }

template <typename Real>
Tensor<Real> sigmoid(Tensor<Real> x) {
    auto& g = *x.graph;
    const auto& vx = g.value(x);
    std::vector<Real> out(vx.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Real v = vx[i];
        out[i] = v >= Real(0) ? Real(1) / (Real(1) + std::exp(-v))
                              : std::exp(v) / (Real(1) + std::exp(v));
    }
    return g.make_node("sigmoid", g.shape(x), std::move(out), {std::uint32_t(x.idx)},
                       [xi = x.idx](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           const auto& y = g.node(self).value;
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t k = 0; k < d.size(); ++k)
                                   gx[k] += d[k] * y[k] * (Real(1) - y[k]);
                       });
}

template <typename Real>
Tensor<Real> tanh_op(Tensor<Real> x) {
    auto& g = *x.graph;
    const auto& vx = g.value(x);
    std::vector<Real> out(vx.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(vx[i]);
    return g.make_node("tanh", g.shape(x), std::move(out), {std::uint32_t(x.idx)},
                       [xi = x.idx](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           const auto& y = g.node(self).value;
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t k = 0; k < d.size(); ++k)
                                   gx[k] += d[k] * (Real(1) - y[k] * y[k]);
                       });
}

template <typename Real>
Tensor<Real> gelu(Tensor<Real> x) {
    auto& g = *x.graph;
    const auto& vx = g.value(x);
    std::vector<Real> out(vx.size());
    const Real inv_sqrt2 = Real(0.70710678118654752440);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const Real v = vx[i];
        out[i] = Real(0.5) * v * (Real(1) + std::erf(v * inv_sqrt2));
    }
    return g.make_node("gelu", g.shape(x), std::move(out), {std::uint32_t(x.idx)},
                       [xi = x.idx](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           const auto& vx = g.node(xi).value;
                           const Real inv_sqrt2 = Real(0.70710678118654752440);
                           const Real inv_sqrt2pi = Real(0.39894228040143267794);
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t k = 0; k < d.size(); ++k) {
                                   const Real v = vx[k];
                                   const Real cdf = Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
                                   const Real pdf = inv_sqrt2pi * std::exp(Real(-0.5) * v * v);
                                   gx[k] += d[k] * (cdf + v * pdf);
                               }
                       });
}

template <typename Real>
Tensor<Real> log_op(Tensor<Real> x) {
    auto& g = *x.graph;
    const auto& vx = g.value(x);
    std::vector<Real> out(vx.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        MP_REQUIRE(vx[i] > Real(0), "log: non-positive input");
        out[i] = std::log(vx[i]);
    }
    return g.make_node("log", g.shape(x), std::move(out), {std::uint32_t(x.idx)},
                       [xi = x.idx](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           const auto& vx = g.node(xi).value;
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t k = 0; k < d.size(); ++k) gx[k] += d[k] / vx[k];
                       });
}

// Entries with |x| below the threshold are replaced by `value` and carry zero
// gradient; everything else passes through untouched.
template <typename Real>
Tensor<Real> magnitude_floor(Tensor<Real> x, Real threshold, Real value) {
    auto& g = *x.graph;
    const auto& vx = g.value(x);
    std::vector<Real> out(vx.size());
    auto mask = std::make_shared<std::vector<char>>(vx.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const bool floored = std::abs(vx[i]) < threshold;
        (*mask)[i] = floored ? 1 : 0;
        out[i] = floored ? value : vx[i];
    }
    return g.make_node("magnitude_floor", g.shape(x), std::move(out), {std::uint32_t(x.idx)},
                       [xi = x.idx, mask](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t k = 0; k < d.size(); ++k)
                                   if (!(*mask)[k]) gx[k] += d[k];
                       });
}

// --- broadcast helpers ------------------------------------------------------

template <typename Real>
Tensor<Real> add_rowvec(Tensor<Real> x, Tensor<Real> v) {
    detail::require_same_graph(x, v, "add_rowvec");
    auto& g = *x.graph;
    const Shape& sx = g.shape(x);
    const Shape& sv = g.shape(v);
    MP_REQUIRE(!sx.empty() && sv.size() == 1 && sv[0] == sx.back(),
               "add_rowvec: vector length must equal the last dim");
    const auto& vx = g.value(x);
    const auto& vv = g.value(v);
    const std::size_t d = sx.back();
    std::vector<Real> out(vx.size());
    for (std::size_t r = 0; r < vx.size() / d; ++r)
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = vx[r * d + j] + vv[j];
    return g.make_node("add_rowvec", sx, std::move(out), {std::uint32_t(x.idx), std::uint32_t(v.idx)},
                       [xi = x.idx, vi = v.idx, d](Graph<Real>& g, std::size_t self) {
                           const auto& dg = g.node(self).grad;
                           g.add_grad(xi, dg.data(), dg.size());
                           if (Real* gv = g.grad_buf(vi))
                               for (std::size_t r = 0; r < dg.size() / d; ++r)
                                   for (std::size_t j = 0; j < d; ++j) gv[j] += dg[r * d + j];
                       });
}

// x[..., j] / v[j]; every v[j] must be nonzero.
template <typename Real>
Tensor<Real> div_rowvec(Tensor<Real> x, Tensor<Real> v) {
    detail::require_same_graph(x, v, "div_rowvec");
    auto& g = *x.graph;
    const Shape& sx = g.shape(x);
    const Shape& sv = g.shape(v);
    MP_REQUIRE(!sx.empty() && sv.size() == 1 && sv[0] == sx.back(),
               "div_rowvec: vector length must equal the last dim");
    const auto& vx = g.value(x);
    const auto& vv = g.value(v);
    for (Real w : vv) MP_REQUIRE(w != Real(0), "div_rowvec: zero divisor");
    const std::size_t d = sx.back();
    std::vector<Real> out(vx.size());
    for (std::size_t r = 0; r < vx.size() / d; ++r)
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = vx[r * d + j] / vv[j];
    return g.make_node("div_rowvec", sx, std::move(out), {std::uint32_t(x.idx), std::uint32_t(v.idx)},
                       [xi = x.idx, vi = v.idx, d](Graph<Real>& g, std::size_t self) {
                           const auto& dg = g.node(self).grad;
                           const auto& y = g.node(self).value;
                           const auto& vv = g.node(vi).value;
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t r = 0; r < dg.size() / d; ++r)
                                   for (std::size_t j = 0; j < d; ++j)
                                       gx[r * d + j] += dg[r * d + j] / vv[j];
                           if (Real* gv = g.grad_buf(vi))
                               for (std::size_t r = 0; r < dg.size() / d; ++r)
                                   for (std::size_t j = 0; j < d; ++j)
                                       gv[j] -= dg[r * d + j] * y[r * d + j] / vv[j];
                       });
}

// --- shape ops ---------------------------------------------------------------

template <typename Real>
Tensor<Real> reshape(Tensor<Real> x, Shape shape) {
    auto& g = *x.graph;
    MP_REQUIRE(numel(shape) == g.value(x).size(),
               "reshape: element count mismatch for " + shape_str(shape));
    std::vector<Real> out = g.value(x);
    return g.make_node("reshape", std::move(shape), std::move(out), {std::uint32_t(x.idx)},
                       [xi = x.idx](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           g.add_grad(xi, d.data(), d.size());
                       });
}

template <typename Real>
Tensor<Real> transpose_last2(Tensor<Real> x) {
    auto& g = *x.graph;
    const Shape& s = g.shape(x);
    MP_REQUIRE(s.size() >= 2, "transpose_last2: rank must be >= 2");
    const std::size_t m = s[s.size() - 2], n = s[s.size() - 1];
    const std::size_t L = detail::leading(s, 2);
    const auto& vx = g.value(x);
    std::vector<Real> out(vx.size());
    for (std::size_t l = 0; l < L; ++l) {
        const Real* src = vx.data() + l * m * n;
        Real* dst = out.data() + l * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    Shape so = s;
    std::swap(so[so.size() - 2], so[so.size() - 1]);
    return g.make_node("transpose_last2", std::move(so), std::move(out), {std::uint32_t(x.idx)},
                       [xi = x.idx, m, n, L](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t l = 0; l < L; ++l) {
                                   const Real* src = d.data() + l * m * n;
                                   Real* dst = gx + l * m * n;
                                   for (std::size_t j = 0; j < n; ++j)
                                       for (std::size_t i = 0; i < m; ++i)
                                           dst[i * n + j] += src[j * m + i];
                               }
                       });
}

template <typename Real>
Tensor<Real> concat_lastdim(const std::vector<Tensor<Real>>& parts) {
    MP_REQUIRE(!parts.empty(), "concat_lastdim: no inputs");
    auto& g = *parts[0].graph;
    const Shape& s0 = g.shape(parts[0]);
    MP_REQUIRE(!s0.empty(), "concat_lastdim: rank must be >= 1");
    std::size_t total_last = 0;
    std::vector<std::size_t> lasts;
    std::vector<std::uint32_t> idxs;
    for (const auto& p : parts) {
        detail::require_same_graph(parts[0], p, "concat_lastdim");
        const Shape& s = g.shape(p);
        MP_REQUIRE(s.size() == s0.size(), "concat_lastdim: rank mismatch");
        for (std::size_t i = 0; i + 1 < s.size(); ++i)
            MP_REQUIRE(s[i] == s0[i], "concat_lastdim: leading dims mismatch");
        lasts.push_back(s.back());
        total_last += s.back();
        idxs.push_back(std::uint32_t(p.idx));
    }
    const std::size_t rows = detail::leading(s0, 1);
    std::vector<Real> out(rows * total_last);
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const auto& v = g.value(parts[pi]);
        for (std::size_t r = 0; r < rows; ++r)
            std::copy(v.begin() + r * lasts[pi], v.begin() + (r + 1) * lasts[pi],
                      out.begin() + r * total_last + off);
        off += lasts[pi];
    }
    Shape so = s0;
    so.back() = total_last;
    return g.make_node("concat_lastdim", std::move(so), std::move(out), idxs,
                       [idxs, lasts, rows, total_last](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           std::size_t off = 0;
                           for (std::size_t pi = 0; pi < idxs.size(); ++pi) {
                               if (Real* gx = g.grad_buf(idxs[pi]))
                                   for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t j = 0; j < lasts[pi]; ++j)
                                           gx[r * lasts[pi] + j] += d[r * total_last + off + j];
                               off += lasts[pi];
                           }
                       });
}

template <typename Real>
Tensor<Real> slice_lastdim(Tensor<Real> x, std::size_t begin, std::size_t len) {
    auto& g = *x.graph;
    const Shape& s = g.shape(x);
    MP_REQUIRE(!s.empty() && begin + len <= s.back(), "slice_lastdim: range out of bounds");
    const std::size_t d = s.back();
    const std::size_t rows = detail::leading(s, 1);
    const auto& vx = g.value(x);
    std::vector<Real> out(rows * len);
    for (std::size_t r = 0; r < rows; ++r)
        std::copy(vx.begin() + r * d + begin, vx.begin() + r * d + begin + len, out.begin() + r * len);
    Shape so = s;
    so.back() = len;
    return g.make_node("slice_lastdim", std::move(so), std::move(out), {std::uint32_t(x.idx)},
                       [xi = x.idx, begin, len, d, rows](Graph<Real>& g, std::size_t self) {
                           const auto& dg = g.node(self).grad;
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < len; ++j)
                                       gx[r * d + begin + j] += dg[r * len + j];
                       });
}

template <typename Real>
Tensor<Real> pad_lastdim(Tensor<Real> x, std::size_t new_last) {
    auto& g = *x.graph;
    const Shape& s = g.shape(x);
    MP_REQUIRE(!s.empty() && new_last >= s.back(), "pad_lastdim: target smaller than input");
    const std::size_t d = s.back();
    const std::size_t rows = detail::leading(s, 1);
    const auto& vx = g.value(x);
    std::vector<Real> out(rows * new_last, Real(0));
    for (std::size_t r = 0; r < rows; ++r)
        std::copy(vx.begin() + r * d, vx.begin() + (r + 1) * d, out.begin() + r * new_last);
    Shape so = s;
    so.back() = new_last;
    return g.make_node("pad_lastdim", std::move(so), std::move(out), {std::uint32_t(x.idx)},
                       [xi = x.idx, d, rows, new_last](Graph<Real>& g, std::size_t self) {
                           const auto& dg = g.node(self).grad;
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t r = 0; r < rows; ++r)
                                   for (std::size_t j = 0; j < d; ++j)
                                       gx[r * d + j] += dg[r * new_last + j];
                       });
}

// --- matmul family -----------------------------------------------------------

// A[..., m, k] x B[k, n] (shared) or A[..., m, k] x B[..., k, n] (per slice).
template <typename Real>
Tensor<Real> matmul(Tensor<Real> a, Tensor<Real> b) {
    detail::require_same_graph(a, b, "matmul");
    auto& g = *a.graph;
    const Shape& sa = g.shape(a);
    const Shape& sb = g.shape(b);
    MP_REQUIRE(sa.size() >= 2 && sb.size() >= 2, "matmul: rank must be >= 2");
    const std::size_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    const std::size_t n = sb[sb.size() - 1];
    const bool shared_b = (sb.size() == 2);
    MP_REQUIRE(sb[sb.size() - 2] == k, "matmul: inner dims differ, " + shape_str(sa) + " x " + shape_str(sb));
    if (!shared_b)
        MP_REQUIRE(detail::same_leading(sa, sb), "matmul: batch dims differ");
    const std::size_t L = detail::leading(sa, 2);
    const auto& va = g.value(a);
    const auto& vb = g.value(b);
    std::vector<Real> out(L * m * n);
    if (shared_b) {
        detail::CMapM<Real> A(va.data(), L * m, k);
        detail::CMapM<Real> B(vb.data(), k, n);
        detail::MapM<Real> C(out.data(), L * m, n);
        C.noalias() = A * B;
    } else {
        for (std::size_t l = 0; l < L; ++l) {
            detail::CMapM<Real> A(va.data() + l * m * k, m, k);
            detail::CMapM<Real> B(vb.data() + l * k * n, k, n);
            detail::MapM<Real> C(out.data() + l * m * n, m, n);
            C.noalias() = A * B;
        }
    }
    Shape so(sa.begin(), sa.end() - 1);
    so.push_back(n);
    return g.make_node("matmul", std::move(so), std::move(out), {std::uint32_t(a.idx), std::uint32_t(b.idx)},
                       [ai = a.idx, bi = b.idx, m, k, n, L, shared_b](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           const auto& va = g.node(ai).value;
                           const auto& vb = g.node(bi).value;
                           Real* ga = g.grad_buf(ai);
                           Real* gb = g.grad_buf(bi);
                           if (shared_b) {
                               detail::CMapM<Real> D(d.data(), L * m, n);
                               detail::CMapM<Real> A(va.data(), L * m, k);
                               detail::CMapM<Real> B(vb.data(), k, n);
                               if (ga) Eigen::Map<detail::EMat<Real>>(ga, L * m, k).noalias() += D * B.transpose();
                               if (gb) Eigen::Map<detail::EMat<Real>>(gb, k, n).noalias() += A.transpose() * D;
                           } else {
                               for (std::size_t l = 0; l < L; ++l) {
                                   detail::CMapM<Real> D(d.data() + l * m * n, m, n);
                                   detail::CMapM<Real> A(va.data() + l * m * k, m, k);
                                   detail::CMapM<Real> B(vb.data() + l * k * n, k, n);
                                   if (ga) Eigen::Map<detail::EMat<Real>>(ga + l * m * k, m, k).noalias() += D * B.transpose();
                                   if (gb) Eigen::Map<detail::EMat<Real>>(gb + l * k * n, k, n).noalias() += A.transpose() * D;
                               }
                           }
                       });
}

// A[..., m, k] x B[n, k]^T (shared) or A[..., m, k] x B[..., n, k]^T.
template <typename Real>
Tensor<Real> matmul_nt(Tensor<Real> a, Tensor<Real> b) {
    detail::require_same_graph(a, b, "matmul_nt");
    auto& g = *a.graph;
    const Shape& sa = g.shape(a);
    const Shape& sb = g.shape(b);
    MP_REQUIRE(sa.size() >= 2 && sb.size() >= 2, "matmul_nt: rank must be >= 2");
    const std::size_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    const std::size_t n = sb[sb.size() - 2];
    const bool shared_b = (sb.size() == 2);
    MP_REQUIRE(sb[sb.size() - 1] == k, "matmul_nt: inner dims differ, " + shape_str(sa) + " x " + shape_str(sb));
    if (!shared_b)
        MP_REQUIRE(detail::same_leading(sa, sb), "matmul_nt: batch dims differ");
    const std::size_t L = detail::leading(sa, 2);
    const auto& va = g.value(a);
    const auto& vb = g.value(b);
    std::vector<Real> out(L * m * n);
    if (shared_b) {
        detail::CMapM<Real> A(va.data(), L * m, k);
        detail::CMapM<Real> B(vb.data(), n, k);
        detail::MapM<Real> C(out.data(), L * m, n);
        C.noalias() = A * B.transpose();
    } else {
        for (std::size_t l = 0; l < L; ++l) {
            detail::CMapM<Real> A(va.data() + l * m * k, m, k);
            detail::CMapM<Real> B(vb.data() + l * n * k, n, k);
            detail::MapM<Real> C(out.data() + l * m * n, m, n);
            C.noalias() = A * B.transpose();
        }
    }
    Shape so(sa.begin(), sa.end() - 1);
    so.push_back(n);
    return g.make_node("matmul_nt", std::move(so), std::move(out), {std::uint32_t(a.idx), std::uint32_t(b.idx)},
                       [ai = a.idx, bi = b.idx, m, k, n, L, shared_b](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           const auto& va = g.node(ai).value;
                           const auto& vb = g.node(bi).value;
                           Real* ga = g.grad_buf(ai);
                           Real* gb = g.grad_buf(bi);
                           if (shared_b) {
                               detail::CMapM<Real> D(d.data(), L * m, n);
                               detail::CMapM<Real> A(va.data(), L * m, k);
                               detail::CMapM<Real> B(vb.data(), n, k);
                               if (ga) Eigen::Map<detail::EMat<Real>>(ga, L * m, k).noalias() += D * B;
                               if (gb) Eigen::Map<detail::EMat<Real>>(gb, n, k).noalias() += D.transpose() * A;
                           } else {
                               for (std::size_t l = 0; l < L; ++l) {
                                   detail::CMapM<Real> D(d.data() + l * m * n, m, n);
                                   detail::CMapM<Real> A(va.data() + l * m * k, m, k);
                                   detail::CMapM<Real> B(vb.data() + l * n * k, n, k);
                                   if (ga) Eigen::Map<detail::EMat<Real>>(ga + l * m * k, m, k).noalias() += D * B;
                                   if (gb) Eigen::Map<detail::EMat<Real>>(gb + l * n * k, n, k).noalias() += D.transpose() * A;
                               }
                           }
                       });
}

// A[..., m, k]^T x B[..., m, n] -> [..., k, n].
template <typename Real>
Tensor<Real> matmul_tn(Tensor<Real> a, Tensor<Real> b) {
    detail::require_same_graph(a, b, "matmul_tn");
    auto& g = *a.graph;
    const Shape& sa = g.shape(a);
    const Shape& sb = g.shape(b);
    MP_REQUIRE(sa.size() >= 2 && sb.size() == sa.size(), "matmul_tn: rank mismatch");
    MP_REQUIRE(detail::same_leading(sa, sb), "matmul_tn: batch dims differ");
    const std::size_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    MP_REQUIRE(sb[sb.size() - 2] == m, "matmul_tn: shared dim differs");
    const std::size_t n = sb[sb.size() - 1];
    const std::size_t L = detail::leading(sa, 2);
    const auto& va = g.value(a);
    const auto& vb = g.value(b);
    std::vector<Real> out(L * k * n);
    for (std::size_t l = 0; l < L; ++l) {
        detail::CMapM<Real> A(va.data() + l * m * k, m, k);
        detail::CMapM<Real> B(vb.data() + l * m * n, m, n);
        detail::MapM<Real> C(out.data() + l * k * n, k, n);
        C.noalias() = A.transpose() * B;
    }
    Shape so(sa.begin(), sa.end() - 2);
    so.push_back(k);
    so.push_back(n);
    return g.make_node("matmul_tn", std::move(so), std::move(out), {std::uint32_t(a.idx), std::uint32_t(b.idx)},
                       [ai = a.idx, bi = b.idx, m, k, n, L](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           const auto& va = g.node(ai).value;
                           const auto& vb = g.node(bi).value;
                           Real* ga = g.grad_buf(ai);
                           Real* gb = g.grad_buf(bi);
                           for (std::size_t l = 0; l < L; ++l) {
                               detail::CMapM<Real> D(d.data() + l * k * n, k, n);
                               detail::CMapM<Real> A(va.data() + l * m * k, m, k);
                               detail::CMapM<Real> B(vb.data() + l * m * n, m, n);
                               if (ga) Eigen::Map<detail::EMat<Real>>(ga + l * m * k, m, k).noalias() += B * D.transpose();
                               if (gb) Eigen::Map<detail::EMat<Real>>(gb + l * m * n, m, n).noalias() += A * D;
                           }
                       });
}

// --- normalizations and softmax ----------------------------------------------

// Rowwise softmax of x / tau over the last dim, max-subtracted for stability.
template <typename Real>
Tensor<Real> softmax_lastdim(Tensor<Real> x, Real tau = Real(1)) {
    MP_CONFIG_REQUIRE(tau > Real(0), "softmax: temperature must be positive");
    auto& g = *x.graph;
    const Shape& s = g.shape(x);
    MP_REQUIRE(!s.empty(), "softmax: rank must be >= 1");
    const std::size_t d = s.back();
    const std::size_t rows = detail::leading(s, 1);
    const auto& vx = g.value(x);
    std::vector<Real> out(vx.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = vx.data() + r * d;
        Real* yr = out.data() + r * d;
        Real mx = xr[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
        Real sum = Real(0);
        for (std::size_t j = 0; j < d; ++j) {
            yr[j] = std::exp((xr[j] - mx) / tau);
            sum += yr[j];
        }
        for (std::size_t j = 0; j < d; ++j) yr[j] /= sum;
    }
    return g.make_node("softmax", s, std::move(out), {std::uint32_t(x.idx)},
                       [xi = x.idx, d, rows, tau](Graph<Real>& g, std::size_t self) {
                           const auto& dg = g.node(self).grad;
                           const auto& y = g.node(self).value;
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const Real* yr = y.data() + r * d;
                                   const Real* dr = dg.data() + r * d;
                                   Real dot = Real(0);
                                   for (std::size_t j = 0; j < d; ++j) dot += dr[j] * yr[j];
                                   for (std::size_t j = 0; j < d; ++j)
                                       gx[r * d + j] += yr[j] * (dr[j] - dot) / tau;
                               }
                       });
}

// Rowwise l2 normalization; all-zero rows pass through unchanged.
template <typename Real>
Tensor<Real> l2_normalize_lastdim(Tensor<Real> x) {
    auto& g = *x.graph;
    const Shape& s = g.shape(x);
    MP_REQUIRE(!s.empty(), "l2_normalize: rank must be >= 1");
    const std::size_t d = s.back();
    const std::size_t rows = detail::leading(s, 1);
    const auto& vx = g.value(x);
    std::vector<Real> out(vx.size());
    auto norms = std::make_shared<std::vector<Real>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = vx.data() + r * d;
        Real sq = Real(0);
        for (std::size_t j = 0; j < d; ++j) sq += xr[j] * xr[j];
        const Real nrm = std::sqrt(sq);
        (*norms)[r] = nrm;
        if (nrm == Real(0)) {
            std::fill(out.begin() + r * d, out.begin() + (r + 1) * d, Real(0));
        } else {
            for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xr[j] / nrm;
        }
    }
    return g.make_node("l2_normalize", s, std::move(out), {std::uint32_t(x.idx)},
                       [xi = x.idx, d, rows, norms](Graph<Real>& g, std::size_t self) {
                           const auto& dg = g.node(self).grad;
                           const auto& y = g.node(self).value;
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t r = 0; r < rows; ++r) {
                                   const Real nrm = (*norms)[r];
                                   if (nrm == Real(0)) continue;
                                   const Real* yr = y.data() + r * d;
                                   const Real* dr = dg.data() + r * d;
                                   Real dot = Real(0);
                                   for (std::size_t j = 0; j < d; ++j) dot += dr[j] * yr[j];
                                   for (std::size_t j = 0; j < d; ++j)
                                       gx[r * d + j] += (dr[j] - yr[j] * dot) / nrm;
                               }
                       });
}

template <typename Real>
Tensor<Real> layer_norm(Tensor<Real> x, Tensor<Real> gain, Tensor<Real> bias, Real eps = Real(1e-5)) {
    detail::require_same_graph(x, gain, "layer_norm");
    detail::require_same_graph(x, bias, "layer_norm");
    auto& g = *x.graph;
    const Shape& s = g.shape(x);
    const std::size_t d = s.back();
    MP_REQUIRE(g.shape(gain) == Shape{d} && g.shape(bias) == Shape{d},
               "layer_norm: gain/bias must have the last-dim length");
    const std::size_t rows = detail::leading(s, 1);
    const auto& vx = g.value(x);
    const auto& vg = g.value(gain);
    const auto& vb = g.value(bias);
    std::vector<Real> out(vx.size());
    auto xhat = std::make_shared<std::vector<Real>>(vx.size());
    auto inv_sd = std::make_shared<std::vector<Real>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* xr = vx.data() + r * d;
        Real mean = Real(0);
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= Real(d);
        Real var = Real(0);
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= Real(d);
        const Real isd = Real(1) / std::sqrt(var + eps);
        (*inv_sd)[r] = isd;
        for (std::size_t j = 0; j < d; ++j) {
            const Real xh = (xr[j] - mean) * isd;
            (*xhat)[r * d + j] = xh;
            out[r * d + j] = vg[j] * xh + vb[j];
        }
    }
    return g.make_node("layer_norm", s, std::move(out),
                       {std::uint32_t(x.idx), std::uint32_t(gain.idx), std::uint32_t(bias.idx)},
                       [xi = x.idx, gi = gain.idx, bi = bias.idx, d, rows, xhat, inv_sd](Graph<Real>& g, std::size_t self) {
                           const auto& dg = g.node(self).grad;
                           const auto& vg = g.node(gi).value;
                           Real* gx = g.grad_buf(xi);
                           Real* gg = g.grad_buf(gi);
                           Real* gb = g.grad_buf(bi);
                           for (std::size_t r = 0; r < rows; ++r) {
                               const Real* dr = dg.data() + r * d;
                               const Real* xh = xhat->data() + r * d;
                               if (gg || gb)
                                   for (std::size_t j = 0; j < d; ++j) {
                                       if (gg) gg[j] += dr[j] * xh[j];
                                       if (gb) gb[j] += dr[j];
                                   }
                               if (gx) {
                                   Real sum_dxh = Real(0), sum_dxh_xh = Real(0);
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const Real dxh = dr[j] * vg[j];
                                       sum_dxh += dxh;
                                       sum_dxh_xh += dxh * xh[j];
                                   }
                                   const Real isd = (*inv_sd)[r];
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const Real dxh = dr[j] * vg[j];
                                       gx[r * d + j] += isd * (dxh - sum_dxh / Real(d) - xh[j] * sum_dxh_xh / Real(d));
                                   }
                               }
                           }
                       });
}

// --- reductions ----------------------------------------------------------------

template <typename Real>
Tensor<Real> sum_axis(Tensor<Real> x, std::size_t axis) {
    auto& g = *x.graph;
    const Shape& s = g.shape(x);
    MP_REQUIRE(axis < s.size(), "sum_axis: axis out of range");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t K = s[axis];
    const auto& vx = g.value(x);
    std::vector<Real> out(outer * inner, Real(0));
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t i = 0; i < inner; ++i)
                out[o * inner + i] += vx[(o * K + k) * inner + i];
    Shape so;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) so.push_back(s[i]);
    if (so.empty()) so.push_back(1);
    return g.make_node("sum_axis", std::move(so), std::move(out), {std::uint32_t(x.idx)},
                       [xi = x.idx, outer, inner, K](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t k = 0; k < K; ++k)
                                       for (std::size_t i = 0; i < inner; ++i)
                                           gx[(o * K + k) * inner + i] += d[o * inner + i];
                       });
}

template <typename Real>
Tensor<Real> mean_axis(Tensor<Real> x, std::size_t axis) {
    const Real k = Real(1) / Real(x.graph->shape(x)[axis]);
    return scale(sum_axis(x, axis), k);
}

template <typename Real>
Tensor<Real> sum_all(Tensor<Real> x) {
    auto& g = *x.graph;
    const auto& vx = g.value(x);
    Real acc = Real(0);
    for (Real v : vx) acc += v;
    return g.make_node("sum_all", Shape{1}, std::vector<Real>{acc}, {std::uint32_t(x.idx)},
                       [xi = x.idx](Graph<Real>& g, std::size_t self) {
                           const Real d = g.node(self).grad[0];
                           if (Real* gx = g.grad_buf(xi)) {
                               const std::size_t n = g.node(xi).value.size();
                               for (std::size_t k = 0; k < n; ++k) gx[k] += d;
                           }
                       });
}

template <typename Real>
Tensor<Real> mean_all(Tensor<Real> x) {
    return scale(sum_all(x), Real(1) / Real(x.graph->value(x).size()));
}

template <typename Real>
Tensor<Real> gather_diag(Tensor<Real> x) {
    auto& g = *x.graph;
    const Shape& s = g.shape(x);
    MP_REQUIRE(s.size() == 2 && s[0] == s[1], "gather_diag: input must be square");
    const std::size_t k = s[0];
    const auto& vx = g.value(x);
    std::vector<Real> out(k);
    for (std::size_t i = 0; i < k; ++i) out[i] = vx[i * k + i];
    return g.make_node("gather_diag", Shape{k}, std::move(out), {std::uint32_t(x.idx)},
                       [xi = x.idx, k](Graph<Real>& g, std::size_t self) {
                           const auto& d = g.node(self).grad;
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t i = 0; i < k; ++i) gx[i * k + i] += d[i];
                       });
}

// Mean cross entropy between rows of logits and integer labels.
template <typename Real>
Tensor<Real> cross_entropy_logits(Tensor<Real> logits, std::vector<int> labels) {
    auto& g = *logits.graph;
    const Shape& s = g.shape(logits);
    MP_REQUIRE(s.size() == 2, "cross_entropy: logits must be 2-d");
    const std::size_t b = s[0], y = s[1];
    MP_REQUIRE(labels.size() == b, "cross_entropy: one label per row required");
    for (int lab : labels)
        MP_REQUIRE(lab >= 0 && std::size_t(lab) < y, "cross_entropy: label out of range");
    const auto& vx = g.value(logits);
    auto probs = std::make_shared<std::vector<Real>>(vx.size());
    Real loss = Real(0);
    for (std::size_t r = 0; r < b; ++r) {
        const Real* xr = vx.data() + r * y;
        Real mx = xr[0];
        for (std::size_t j = 1; j < y; ++j) mx = std::max(mx, xr[j]);
        Real sum = Real(0);
        for (std::size_t j = 0; j < y; ++j) {
            (*probs)[r * y + j] = std::exp(xr[j] - mx);
            sum += (*probs)[r * y + j];
        }
        for (std::size_t j = 0; j < y; ++j) (*probs)[r * y + j] /= sum;
        loss += std::log(sum) + mx - xr[labels[r]];
    }
    loss /= Real(b);
    return g.make_node("cross_entropy", Shape{1}, std::vector<Real>{loss}, {std::uint32_t(logits.idx)},
                       [xi = logits.idx, labels = std::move(labels), probs, b, y](Graph<Real>& g, std::size_t self) {
                           const Real d = g.node(self).grad[0];
                           if (Real* gx = g.grad_buf(xi))
                               for (std::size_t r = 0; r < b; ++r)
                                   for (std::size_t j = 0; j < y; ++j) {
                                       Real v = (*probs)[r * y + j];
                                       if (std::size_t(labels[r]) == j) v -= Real(1);
                                       gx[r * y + j] += d * v / Real(b);
                                   }
                       });
}

}  // namespace mp::ad
